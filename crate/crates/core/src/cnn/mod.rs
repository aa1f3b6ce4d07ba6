//! Small VGG-style CNN: configurable conv/pool/fc stack, forward pass with
//! per-conv-layer feature-map capture, an SGD trainer with early stopping
//! (`train`), and weight (de)serialization (`io`).
//!
//! All conv layers run stride 1 with padding `kernel / 2`, so spatial size
//! only changes at the 2x2 max-pools.

pub(crate) mod io;
mod train;

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use train::{loss_and_param_grads, train, ParamGrads, TrainHyper};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, maxpool2, relu, softmax, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool_after: bool,
}

/// Network architecture. Grayscale input of `input_h` x `input_h`, a stack of
/// same-size conv layers (ReLU, optional 2x2 pool), then fully connected
/// layers whose last entry is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_h: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub fc_layers: Vec<usize>,
}

impl ArchitectureSpec {
    /// Desk-scale default mirroring VGG-16's shape at 1/7 depth: 32x32 input,
    /// K = [8, 16, 16, 32] with 3x3 kernels, pools after layers 2 and 4,
    /// fc = [64, C].
    pub fn mini_vgg(classes: usize) -> Self {
        ArchitectureSpec {
            input_h: 32,
            conv_layers: [8, 16, 16, 32]
                .into_iter()
                .enumerate()
                .map(|(i, k)| ConvLayerSpec {
                    out_channels: k,
                    kernel: 3,
                    pool_after: i % 2 == 1,
                })
                .collect(),
            fc_layers: vec![64, classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("need at least one conv layer".into()));
        }
        if self.fc_layers.is_empty() {
            return Err(Error::Config("need at least one fc layer".into()));
        }
        if self.input_h == 0 {
            return Err(Error::Config("input_h must be positive".into()));
        }
        if self.fc_layers.contains(&0) {
            return Err(Error::Config("fc layer sizes must be positive".into()));
        }
        let mut side = self.input_h;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.out_channels == 0 {
                return Err(Error::Config(format!("conv layer {i}: zero channels")));
            }
            if layer.kernel == 0 || layer.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i}: kernel must be odd, got {}",
                    layer.kernel
                )));
            }
            if layer.pool_after {
                if side % 2 != 0 || side < 2 {
                    return Err(Error::Config(format!(
                        "conv layer {i}: cannot pool a {side}x{side} map"
                    )));
                }
                side /= 2;
            }
        }
        Ok(())
    }

    /// Spatial side of each conv layer's captured (post-ReLU, pre-pool) map.
    pub fn capture_sides(&self) -> Vec<usize> {
        let mut side = self.input_h;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for layer in &self.conv_layers {
            out.push(side);
            if layer.pool_after {
                side /= 2;
            }
        }
        out
    }

    /// Flattened length feeding the first fc layer.
    pub fn flatten_len(&self) -> usize {
        let mut side = self.input_h;
        for layer in &self.conv_layers {
            if layer.pool_after {
                side /= 2;
            }
        }
        self.conv_layers.last().unwrap().out_channels * side * side
    }

    pub fn class_count(&self) -> usize {
        *self.fc_layers.last().unwrap()
    }

    /// Input channel count of conv layer `l`.
    fn in_channels(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.conv_layers[l - 1].out_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
    pub seed: u64,
}

/// Architecture plus learned weights. Weight tensor shapes always match the
/// spec and all values are finite; `validate` enforces both.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ArchitectureSpec,
    pub conv_weights: Vec<Tensor>,
    pub conv_bias: Vec<Vec<f64>>,
    pub fc_weights: Vec<Tensor>,
    pub fc_bias: Vec<Vec<f64>>,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn init(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        spec.validate()?;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut glorot = |shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)
        };

        let mut conv_weights = Vec::new();
        let mut conv_bias = Vec::new();
        for (l, layer) in spec.conv_layers.iter().enumerate() {
            let (c_in, k) = (spec.in_channels(l), layer.kernel);
            conv_weights.push(glorot(
                vec![layer.out_channels, c_in, k, k],
                c_in * k * k,
                layer.out_channels * k * k,
            )?);
            conv_bias.push(vec![0.0; layer.out_channels]);
        }
        let mut fc_weights = Vec::new();
        let mut fc_bias = Vec::new();
        let mut fan_in = spec.flatten_len();
        for &units in &spec.fc_layers {
            fc_weights.push(glorot(vec![units, fan_in], fan_in, units)?);
            fc_bias.push(vec![0.0; units]);
            fan_in = units;
        }
        Ok(TrainedModel {
            spec,
            conv_weights,
            conv_bias,
            fc_weights,
            fc_bias,
            meta: TrainingMeta {
                epochs_run: 0,
                best_val_accuracy: 0.0,
                seed,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.conv_weights.len() != self.spec.conv_layers.len()
            || self.conv_bias.len() != self.spec.conv_layers.len()
        {
            return Err(Error::Config(
                "conv weight count does not match spec".into(),
            ));
        }
        if self.fc_weights.len() != self.spec.fc_layers.len()
            || self.fc_bias.len() != self.spec.fc_layers.len()
        {
            return Err(Error::Config("fc weight count does not match spec".into()));
        }
        for (l, layer) in self.spec.conv_layers.iter().enumerate() {
            let want = [
                layer.out_channels,
                self.spec.in_channels(l),
                layer.kernel,
                layer.kernel,
            ];
            if self.conv_weights[l].shape() != want {
                return Err(Error::Config(format!(
                    "conv{l}.weight shape {:?} does not match spec {want:?}",
                    self.conv_weights[l].shape()
                )));
            }
            if self.conv_bias[l].len() != layer.out_channels {
                return Err(Error::Config(format!("conv{l}.bias length mismatch")));
            }
        }
        let mut fan_in = self.spec.flatten_len();
        for (j, &units) in self.spec.fc_layers.iter().enumerate() {
            if self.fc_weights[j].shape() != [units, fan_in] {
                return Err(Error::Config(format!(
                    "fc{j}.weight shape {:?} does not match spec [{units}, {fan_in}]",
                    self.fc_weights[j].shape()
                )));
            }
            if self.fc_bias[j].len() != units {
                return Err(Error::Config(format!("fc{j}.bias length mismatch")));
            }
            fan_in = units;
        }
        let finite = self
            .conv_weights
            .iter()
            .chain(&self.fc_weights)
            .all(|t| t.data().iter().all(|v| v.is_finite()))
            && self
                .conv_bias
                .iter()
                .chain(&self.fc_bias)
                .all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numeric("model contains non-finite weights".into()));
        }
        Ok(())
    }
}

/// Post-activation (pre-pool) feature maps of every conv layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureTrace {
    pub maps: Vec<Tensor>,
}

fn check_input(model: &TrainedModel, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.dims3()?;
    if c != 1 || h != model.spec.input_h || w != model.spec.input_h {
        return Err(Error::Dim(format!(
            "input shape {:?} does not match spec 1x{h0}x{h0}",
            image.shape(),
            h0 = model.spec.input_h
        )));
    }
    Ok(())
}

/// Run only the convolutional stack, returning the captured post-ReLU maps
/// (pre-pool) and the final pooled tensor feeding the fc layers.
fn forward_convs(model: &TrainedModel, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    check_input(model, image)?;
    let mut x = image.clone();
    let mut maps = Vec::with_capacity(model.spec.conv_layers.len());
    for (l, layer) in model.spec.conv_layers.iter().enumerate() {
        let s = conv2d(
            &x,
            &model.conv_weights[l],
            &model.conv_bias[l],
            1,
            layer.kernel / 2,
        )?;
        let a = relu(&s)?;
        x = if layer.pool_after {
            maxpool2(&a)?
        } else {
            a.clone()
        };
        maps.push(a);
    }
    Ok((maps, x))
}

fn forward_fc(model: &TrainedModel, flat: &[f64]) -> Result<Vec<f64>> {
    let mut h = flat.to_vec();
    let last = model.fc_weights.len() - 1;
    for (j, (w, b)) in model.fc_weights.iter().zip(&model.fc_bias).enumerate() {
        let [out, inp] = w.dims2()?;
        if inp != h.len() {
            return Err(Error::Dim(format!(
                "fc{j} expects {inp} inputs, got {}",
                h.len()
            )));
        }
        let mut z = vec![0.0; out];
        for r in 0..out {
            let row = &w.data()[r * inp..(r + 1) * inp];
            z[r] = b[r] + crate::linalg::dot(row, &h);
        }
        if j < last {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    softmax(&h)
}

/// Full forward pass: class probabilities plus the capture trace.
pub fn forward(model: &TrainedModel, image: &Tensor) -> Result<(Vec<f64>, CaptureTrace)> {
    let (maps, pooled) = forward_convs(model, image)?;
    let probs = forward_fc(model, pooled.data())?;
    Ok((probs, CaptureTrace { maps }))
}

/// Forward pass without retaining the trace (the timed classification path).
pub fn forward_probs(model: &TrainedModel, image: &Tensor) -> Result<Vec<f64>> {
    let (_, pooled) = forward_convs(model, image)?;
    forward_fc(model, pooled.data())
}

/// Capture the per-layer feature maps only; fc layers are not run.
pub fn capture(model: &TrainedModel, image: &Tensor) -> Result<CaptureTrace> {
    let (maps, _) = forward_convs(model, image)?;
    Ok(CaptureTrace { maps })
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of one image.
pub fn predict(model: &TrainedModel, image: &Tensor) -> Result<usize> {
    Ok(argmax(&forward_probs(model, image)?))
}

/// Accuracy of the model over a dataset.
pub fn evaluate(model: &TrainedModel, ds: &Dataset) -> Result<f64> {
    let hits = ds
        .images()
        .par_iter()
        .zip(ds.labels().par_iter())
        .map(|(img, &label)| Ok(usize::from(predict(model, img)? == label)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / ds.len() as f64)
}
