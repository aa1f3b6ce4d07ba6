//! Minibatch SGD trainer with cross-entropy loss, backprop through the
//! conv/pool/fc stack and accuracy-based early stopping.
//!
//! Training is single-threaded by contract so a fixed seed reproduces the
//! same model byte for byte.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{evaluate, ArchitectureSpec, TrainedModel, TrainingMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, Tensor};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.02,
            batch: 20,
            max_epochs: 40,
            patience: 8,
            seed: 0,
        }
    }
}

/// Gradients of the loss with respect to every parameter group, with the same
/// shapes as the model's weights.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc_w: Vec<Tensor>,
    pub fc_b: Vec<Vec<f64>>,
}

impl ParamGrads {
    fn zeros_like(model: &TrainedModel) -> Self {
        ParamGrads {
            conv_w: model
                .conv_weights
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            conv_b: model.conv_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            fc_w: model
                .fc_weights
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            fc_b: model.fc_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Everything the backward pass needs from one forward pass.
struct Stash {
    conv_in: Vec<Tensor>,   // input of each conv layer
    conv_post: Vec<Tensor>, // post-ReLU (pre-pool) map of each conv layer
    pool_argmax: Vec<Option<Vec<usize>>>,
    fc_in: Vec<Vec<f64>>, // input of each fc layer
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn maxpool_argmax(a: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = a.dims3()?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ci * h + 2 * oy) * w + 2 * ox;
                let mut best = a.data()[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if a.data()[idx] > best {
                        best = a.data()[idx];
                        best_idx = idx;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = best;
                arg[(ci * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

fn forward_stash(model: &TrainedModel, image: &Tensor) -> Result<Stash> {
    let mut conv_in = Vec::new();
    let mut conv_post = Vec::new();
    let mut pool_argmax = Vec::new();
    let mut x = image.clone();
    for (l, layer) in model.spec.conv_layers.iter().enumerate() {
        let s = conv2d(
            &x,
            &model.conv_weights[l],
            &model.conv_bias[l],
            1,
            layer.kernel / 2,
        )?;
        if !s.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation in conv{l}")));
        }
        let a = Tensor::new(
            s.shape().to_vec(),
            s.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        conv_in.push(x);
        if layer.pool_after {
            let (pooled, arg) = maxpool_argmax(&a)?;
            pool_argmax.push(Some(arg));
            x = pooled;
        } else {
            pool_argmax.push(None);
            x = a.clone();
        }
        conv_post.push(a);
    }

    let mut fc_in = Vec::new();
    let mut h = x.data().to_vec();
    let last = model.fc_weights.len() - 1;
    for (j, (w, b)) in model.fc_weights.iter().zip(&model.fc_bias).enumerate() {
        let [out, inp] = w.dims2()?;
        let mut z = vec![0.0; out];
        for r in 0..out {
            z[r] = b[r] + crate::linalg::dot(&w.data()[r * inp..(r + 1) * inp], &h);
        }
        fc_in.push(h);
        if j < last {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    let logits = h;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let probs = crate::tensor::softmax(&logits)?;
    Ok(Stash {
        conv_in,
        conv_post,
        pool_argmax,
        fc_in,
        logits,
        probs,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Accumulate dW/db of one conv layer given the layer input and the gradient
/// at the (pre-pool, post-ReLU-mask) output. Stride 1, padding k/2; each
/// kernel tap is one shifted row dot product.
fn conv_grad_weights(
    x: &Tensor,
    g: &Tensor,
    k: usize,
    dw: &mut Tensor,
    db: &mut [f64],
) -> Result<()> {
    let [c_in, h, w] = x.dims3()?;
    let [c_out, oh, ow] = g.dims3()?;
    let pad = k / 2;
    for co in 0..c_out {
        let g_ch = &g.data()[co * oh * ow..(co + 1) * oh * ow];
        db[co] += g_ch.iter().sum::<f64>();
        for ci in 0..c_in {
            let x_ch = &x.data()[ci * h * w..(ci + 1) * h * w];
            let dw_ker = &mut dw.data_mut()[((co * c_in + ci) * k) * k..][..k * k];
            for ky in 0..k {
                let oy0 = pad.saturating_sub(ky);
                let oy1 = oh.min((h + pad).saturating_sub(ky));
                for kx in 0..k {
                    let ox0 = pad.saturating_sub(kx);
                    let ox1 = ow.min((w + pad).saturating_sub(kx));
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy + ky - pad;
                        let g_row = &g_ch[oy * ow + ox0..oy * ow + ox1];
                        let x_row = &x_ch[iy * w + ox0 + kx - pad..iy * w + ox1 + kx - pad];
                        for (gv, xv) in g_row.iter().zip(x_row) {
                            acc += gv * xv;
                        }
                    }
                    dw_ker[ky * k + kx] += acc;
                }
            }
        }
    }
    Ok(())
}

/// Gradient with respect to the conv layer input. Stride 1, padding k/2;
/// each kernel tap is one shifted row axpy.
fn conv_grad_input(g: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [c_out, oh, ow] = g.dims3()?;
    let [_, c_in, k, _] = weights.dims4()?;
    let pad = k / 2;
    let (h, w) = (oh, ow); // same-size convolution
    let mut gx = vec![0.0; c_in * h * w];
    for co in 0..c_out {
        let g_ch = &g.data()[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let gx_ch = &mut gx[ci * h * w..(ci + 1) * h * w];
            let ker = &weights.data()[((co * c_in + ci) * k) * k..][..k * k];
            for ky in 0..k {
                let oy0 = pad.saturating_sub(ky);
                let oy1 = oh.min((h + pad).saturating_sub(ky));
                for kx in 0..k {
                    let wv = ker[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox0 = pad.saturating_sub(kx);
                    let ox1 = ow.min((w + pad).saturating_sub(kx));
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + ky - pad;
                        let g_row = &g_ch[oy * ow + ox0..oy * ow + ox1];
                        let gx_row = &mut gx_ch[iy * w + ox0 + kx - pad..iy * w + ox1 + kx - pad];
                        for (gxv, gv) in gx_row.iter_mut().zip(g_row) {
                            *gxv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_in, h, w], gx)
}

fn backward_sample(
    model: &TrainedModel,
    stash: &Stash,
    label: usize,
    grads: &mut ParamGrads,
) -> Result<()> {
    // Softmax + cross-entropy gradient at the logits.
    let mut g: Vec<f64> = stash.probs.clone();
    g[label] -= 1.0;

    for j in (0..model.fc_weights.len()).rev() {
        let w = &model.fc_weights[j];
        let [out, inp] = w.dims2()?;
        let h_in = &stash.fc_in[j];
        for r in 0..out {
            let g_r = g[r];
            grads.fc_b[j][r] += g_r;
            if g_r != 0.0 {
                let dw_row = &mut grads.fc_w[j].data_mut()[r * inp..(r + 1) * inp];
                for i in 0..inp {
                    dw_row[i] += g_r * h_in[i];
                }
            }
        }
        let mut g_prev = vec![0.0; inp];
        for r in 0..out {
            let g_r = g[r];
            if g_r != 0.0 {
                let w_row = &w.data()[r * inp..(r + 1) * inp];
                for i in 0..inp {
                    g_prev[i] += g_r * w_row[i];
                }
            }
        }
        if j > 0 {
            // ReLU mask: fc_in[j] is the post-ReLU output of layer j-1. The
            // flatten input (j = 0) gets its mask in the conv stack instead.
            for (gp, &hv) in g_prev.iter_mut().zip(h_in) {
                if hv <= 0.0 {
                    *gp = 0.0;
                }
            }
        }
        g = g_prev;
    }

    // Back through flatten into the conv stack.
    let last_out_shape = if model.spec.conv_layers.last().unwrap().pool_after {
        let a = &stash.conv_post[model.spec.conv_layers.len() - 1];
        let [c, h, w] = a.dims3()?;
        vec![c, h / 2, w / 2]
    } else {
        stash.conv_post[model.spec.conv_layers.len() - 1]
            .shape()
            .to_vec()
    };
    let mut g_map = Tensor::new(last_out_shape, g)?;

    for l in (0..model.spec.conv_layers.len()).rev() {
        let a = &stash.conv_post[l];
        // Through the pool: route gradient to each window's argmax.
        let mut g_a = if let Some(arg) = &stash.pool_argmax[l] {
            let mut buf = vec![0.0; a.len()];
            for (e, &src) in arg.iter().enumerate() {
                buf[src] += g_map.data()[e];
            }
            Tensor::new(a.shape().to_vec(), buf)?
        } else {
            g_map.clone()
        };
        // Through the ReLU.
        for (gv, &av) in g_a.data_mut().iter_mut().zip(a.data()) {
            if av <= 0.0 {
                *gv = 0.0;
            }
        }
        let k = model.spec.conv_layers[l].kernel;
        conv_grad_weights(
            &stash.conv_in[l],
            &g_a,
            k,
            &mut grads.conv_w[l],
            &mut grads.conv_b[l],
        )?;
        if l > 0 {
            g_map = conv_grad_input(&g_a, &model.conv_weights[l])?;
        }
    }
    Ok(())
}

/// Total cross-entropy loss and parameter gradients summed over `samples`.
pub fn loss_and_param_grads(
    model: &TrainedModel,
    samples: &[(&Tensor, usize)],
) -> Result<(f64, ParamGrads)> {
    let mut grads = ParamGrads::zeros_like(model);
    let mut loss = 0.0;
    for &(image, label) in samples {
        if label >= model.spec.class_count() {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                model.spec.class_count()
            )));
        }
        let stash = forward_stash(model, image)?;
        loss += log_sum_exp(&stash.logits) - stash.logits[label];
        backward_sample(model, &stash, label, &mut grads)?;
    }
    Ok((loss, grads))
}

fn apply_update(model: &mut TrainedModel, grads: &ParamGrads, scale: f64) {
    for (w, g) in model.conv_weights.iter_mut().zip(&grads.conv_w) {
        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= scale * gv;
        }
    }
    for (b, g) in model.conv_bias.iter_mut().zip(&grads.conv_b) {
        for (bv, gv) in b.iter_mut().zip(g) {
            *bv -= scale * gv;
        }
    }
    for (w, g) in model.fc_weights.iter_mut().zip(&grads.fc_w) {
        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= scale * gv;
        }
    }
    for (b, g) in model.fc_bias.iter_mut().zip(&grads.fc_b) {
        for (bv, gv) in b.iter_mut().zip(g) {
            *bv -= scale * gv;
        }
    }
}

fn check_compat(spec: &ArchitectureSpec, ds: &Dataset, role: &str) -> Result<()> {
    if ds.side() != spec.input_h {
        return Err(Error::Config(format!(
            "{role} set is {0}x{0}, spec expects {1}x{1}",
            ds.side(),
            spec.input_h
        )));
    }
    if ds.class_count() != spec.class_count() {
        return Err(Error::Config(format!(
            "{role} set has {} classes, spec expects {}",
            ds.class_count(),
            spec.class_count()
        )));
    }
    Ok(())
}

/// Minibatch SGD on cross-entropy. Stops when validation accuracy has not
/// improved for `patience` epochs (or at `max_epochs`) and returns the
/// best-validation snapshot.
pub fn train(
    spec: &ArchitectureSpec,
    train_ds: &Dataset,
    val_ds: &Dataset,
    hyper: &TrainHyper,
) -> Result<TrainedModel> {
    spec.validate()?;
    check_compat(spec, train_ds, "train")?;
    check_compat(spec, val_ds, "val")?;
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(hyper.lr.is_finite() && hyper.lr > 0.0) {
        return Err(Error::Config(format!("bad learning rate {}", hyper.lr)));
    }

    let mut model = TrainedModel::init(spec.clone(), hyper.seed)?;
    let mut best = model.clone();
    let mut best_acc = evaluate(&model, val_ds)?;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(hyper.seed, 0x5f5e));
    let mut order: Vec<usize> = (0..train_ds.len()).collect();

    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let samples: Vec<(&Tensor, usize)> = chunk
                .iter()
                .map(|&i| (train_ds.image(i), train_ds.labels()[i]))
                .collect();
            let (loss, grads) = loss_and_param_grads(&model, &samples).map_err(|e| match e {
                Error::Numeric(msg) => Error::Training { epoch, msg },
                other => other,
            })?;
            let mean_loss = loss / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("non-finite minibatch loss {mean_loss}"),
                });
            }
            apply_update(&mut model, &grads, hyper.lr / chunk.len() as f64);
        }
        epochs_run = epoch;
        let acc = evaluate(&model, val_ds)?;
        if acc > best_acc {
            best_acc = acc;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if hyper.patience > 0 && stale >= hyper.patience {
                break;
            }
        }
    }

    best.meta = TrainingMeta {
        epochs_run,
        best_val_accuracy: best_acc,
        seed: hyper.seed,
    };
    best.validate()?;
    Ok(best)
}
