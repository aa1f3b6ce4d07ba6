//! Dense MLP head: ReLU hidden layers, softmax output, minibatch SGD with
//! accuracy-based early stopping. Mirrors the CNN trainer without the conv
//! stack; single-threaded for determinism.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub sizes: Vec<usize>, // [input, hidden.., classes]
    pub weights: Vec<Tensor>,
    pub bias: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w: Vec<Tensor>,
    pub b: Vec<Vec<f64>>,
}

impl MlpHead {
    pub fn init(sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp needs input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!("zero-size mlp layer in {sizes:?}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut bias = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(vec![fan_out, fan_in], data)?);
            bias.push(vec![0.0; fan_out]);
        }
        Ok(MlpHead {
            sizes,
            weights,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Pre-softmax output and the input of every layer (for backprop).
    fn logits_with_stash(&self, z: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if z.len() != self.input_dim() {
            return Err(Error::Dim(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                z.len()
            )));
        }
        let mut ins = Vec::with_capacity(self.weights.len());
        let mut h = z.to_vec();
        let last = self.weights.len() - 1;
        for (j, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            let [out, inp] = w.dims2()?;
            let mut next = vec![0.0; out];
            for r in 0..out {
                next[r] = b[r] + crate::linalg::dot(&w.data()[r * inp..(r + 1) * inp], &h);
            }
            if j < last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            ins.push(h);
            h = next;
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite mlp logits".into()));
        }
        Ok((ins, h))
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_with_stash(z)?.1)
    }

    /// Class probabilities (softmax of the logits).
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax(&self.logits(z)?)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Total cross-entropy loss and gradients summed over `samples`.
pub fn mlp_loss_and_grads(head: &MlpHead, samples: &[(&[f64], usize)]) -> Result<(f64, MlpGrads)> {
    let mut grads = MlpGrads {
        w: head
            .weights
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect(),
        b: head.bias.iter().map(|b| vec![0.0; b.len()]).collect(),
    };
    let mut loss = 0.0;
    for &(z, label) in samples {
        if label >= head.class_count() {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                head.class_count()
            )));
        }
        let (ins, logits) = head.logits_with_stash(z)?;
        loss += log_sum_exp(&logits) - logits[label];
        let mut g = softmax(&logits)?;
        g[label] -= 1.0;
        for j in (0..head.weights.len()).rev() {
            let w = &head.weights[j];
            let [out, inp] = w.dims2()?;
            let h_in = &ins[j];
            for r in 0..out {
                let g_r = g[r];
                grads.b[j][r] += g_r;
                if g_r != 0.0 {
                    let dw_row = &mut grads.w[j].data_mut()[r * inp..(r + 1) * inp];
                    for i in 0..inp {
                        dw_row[i] += g_r * h_in[i];
                    }
                }
            }
            if j > 0 {
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
                for (gp, &hv) in g_prev.iter_mut().zip(h_in) {
                    if hv <= 0.0 {
                        *gp = 0.0;
                    }
                }
                g = g_prev;
            }
        }
    }
    Ok((loss, grads))
}

fn accuracy(head: &MlpHead, samples: &[(&[f64], usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &(z, label) in samples {
        let logits = head.logits(z)?;
        if crate::cnn::argmax(&logits) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub struct MlpFitConfig {
    pub sizes: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

/// SGD + cross-entropy + early stopping on validation accuracy; returns the
/// best-validation snapshot.
pub fn fit_mlp(
    train: &[(&[f64], usize)],
    val: &[(&[f64], usize)],
    cfg: &MlpFitConfig,
) -> Result<MlpHead> {
    if train.is_empty() {
        return Err(Error::Config("empty training set for mlp head".into()));
    }
    if cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config("bad mlp hyperparameters".into()));
    }
    let mut head = MlpHead::init(cfg.sizes.clone(), cfg.seed)?;
    let mut best = head.clone();
    let mut best_acc = accuracy(&head, val)?;
    let mut stale = 0usize;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 0x313a));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = mlp_loss_and_grads(&head, &batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Training { epoch, msg },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("non-finite minibatch loss {loss}"),
                });
            }
            let scale = cfg.lr / chunk.len() as f64;
            for (w, g) in head.weights.iter_mut().zip(&grads.w) {
                for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *wv -= scale * gv;
                }
            }
            for (b, g) in head.bias.iter_mut().zip(&grads.b) {
                for (bv, gv) in b.iter_mut().zip(g) {
                    *bv -= scale * gv;
                }
            }
        }
        let acc = accuracy(&head, val)?;
        if acc > best_acc {
            best_acc = acc;
            best = head.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let head = MlpHead::init(vec![5, 4, 3], 31).unwrap();
        let zs: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..5).map(|j| ((i * 5 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let samples: Vec<(&[f64], usize)> = vec![(&zs[0], 0), (&zs[1], 1), (&zs[2], 2)];
        let (_, grads) = mlp_loss_and_grads(&head, &samples).unwrap();

        let eps = 1e-7;
        for j in 0..head.weights.len() {
            for idx in 0..head.weights[j].len() {
                let mut plus = head.clone();
                plus.weights[j].data_mut()[idx] += eps;
                let mut minus = head.clone();
                minus.weights[j].data_mut()[idx] -= eps;
                let (lp, _) = mlp_loss_and_grads(&plus, &samples).unwrap();
                let (lm, _) = mlp_loss_and_grads(&minus, &samples).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.w[j].data()[idx];
                let tol = 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "w[{j}][{idx}]: {analytic} vs {numeric}"
                );
            }
            for idx in 0..head.bias[j].len() {
                let mut plus = head.clone();
                plus.bias[j][idx] += eps;
                let mut minus = head.clone();
                minus.bias[j][idx] -= eps;
                let (lp, _) = mlp_loss_and_grads(&plus, &samples).unwrap();
                let (lm, _) = mlp_loss_and_grads(&minus, &samples).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.b[j][idx];
                let tol = 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "b[{j}][{idx}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn scores_sum_to_one() {
        let head = MlpHead::init(vec![4, 6, 3], 1).unwrap();
        let s = head.scores(&[0.1, -0.4, 2.0, 0.3]).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_learns_blobs() {
        // Two well-separated 2-d blobs.
        let mut train = Vec::new();
        for i in 0..40 {
            let t = i as f64 * 0.11;
            train.push((vec![1.0 + 0.05 * t.sin(), 1.0 + 0.05 * t.cos()], 0usize));
            train.push((vec![-1.0 + 0.05 * t.cos(), -1.0 - 0.05 * t.sin()], 1usize));
        }
        let refs: Vec<(&[f64], usize)> = train.iter().map(|(z, l)| (z.as_slice(), *l)).collect();
        let cfg = MlpFitConfig {
            sizes: vec![2, 8, 2],
            lr: 0.05,
            batch: 10,
            max_epochs: 100,
            patience: 10,
            seed: 3,
        };
        let head = fit_mlp(&refs, &refs, &cfg).unwrap();
        assert!(accuracy(&head, &refs).unwrap() >= 0.99);
    }
}
