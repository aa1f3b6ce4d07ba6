//! The accelerated classification path: project an image through the chain
//! of layer spaces (mean subtraction + eigenbasis product per layer, in place
//! of convolutions) and hand the final low-dimensional vector to a
//! lightweight head — MLP, k-NN or Gaussian naive Bayes.

pub mod mlp;

mod io;

pub use io::{load_amfc_model, save_amfc_model};
pub use mlp::{mlp_loss_and_grads, MlpGrads, MlpHead};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::argmax;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::featurespace::LayerSpaceBank;
use crate::tensor::Tensor;
use crate::util::derive_seed;

/// Final-layer projection of one image, with its label when known.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDimSample {
    pub z: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Knn,
    GaussianNb,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Knn => "knn",
            HeadKind::GaussianNb => "gaussian_nb",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(HeadKind::Mlp),
            "knn" => Ok(HeadKind::Knn),
            "gaussian_nb" | "nb" => Ok(HeadKind::GaussianNb),
            other => Err(Error::Config(format!(
                "unknown head kind {other:?} (expected mlp, knn or gaussian_nb)"
            ))),
        }
    }
}

/// Hyperparameters for `fit_head`; only the fields of the chosen kind apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub mlp_hidden: Vec<usize>,
    pub mlp_lr: f64,
    pub mlp_batch: usize,
    pub mlp_max_epochs: usize,
    pub mlp_patience: usize,
    pub knn_k: usize,
    pub nb_var_floor: f64,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper {
            mlp_hidden: vec![64],
            mlp_lr: 0.05,
            mlp_batch: 20,
            mlp_max_epochs: 300,
            mlp_patience: 30,
            knn_k: 1,
            nb_var_floor: 1e-9,
            seed: 0,
        }
    }
}

/// k-nearest-neighbour head over the stored training projections.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnHead {
    pub k: usize,
    pub train_z: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl KnnHead {
    /// Vote fractions per class among the k nearest (squared-Euclidean)
    /// training points; distance ties break on the lower sample index.
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.train_z[0].len() {
            return Err(Error::Dim(format!(
                "knn expects {} inputs, got {}",
                self.train_z[0].len(),
                z.len()
            )));
        }
        let mut dists: Vec<(f64, usize)> = self
            .train_z
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d = t.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (d, i)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut votes = vec![0.0; self.classes];
        for &(_, i) in dists.iter().take(self.k) {
            votes[self.labels[i]] += 1.0;
        }
        for v in votes.iter_mut() {
            *v /= self.k as f64;
        }
        Ok(votes)
    }
}

/// Gaussian naive Bayes head: per-class feature means/variances and priors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNbHead {
    pub priors: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>, // floored at var_floor
    pub var_floor: f64,
}

impl GaussianNbHead {
    /// Posterior class probabilities under the independent-Gaussian model.
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.means[0].len();
        if z.len() != n {
            return Err(Error::Dim(format!(
                "nb expects {n} inputs, got {}",
                z.len()
            )));
        }
        let mut log_post: Vec<f64> = self
            .priors
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(&prior, (mu, var))| {
                let mut ll = prior.ln();
                for i in 0..n {
                    let d = z[i] - mu[i];
                    ll -= 0.5 * ((2.0 * std::f64::consts::PI * var[i]).ln() + d * d / var[i]);
                }
                ll
            })
            .collect();
        let m = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for lp in log_post.iter_mut() {
            *lp = (*lp - m).exp();
            sum += *lp;
        }
        for lp in log_post.iter_mut() {
            *lp /= sum;
        }
        Ok(log_post)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Mlp(MlpHead),
    Knn(KnnHead),
    GaussianNb(GaussianNbHead),
}

impl ClassifierHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            ClassifierHead::Mlp(_) => HeadKind::Mlp,
            ClassifierHead::Knn(_) => HeadKind::Knn,
            ClassifierHead::GaussianNb(_) => HeadKind::GaussianNb,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ClassifierHead::Mlp(h) => h.input_dim(),
            ClassifierHead::Knn(h) => h.train_z[0].len(),
            ClassifierHead::GaussianNb(h) => h.means[0].len(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            ClassifierHead::Mlp(h) => h.class_count(),
            ClassifierHead::Knn(h) => h.classes,
            ClassifierHead::GaussianNb(h) => h.priors.len(),
        }
    }

    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            ClassifierHead::Mlp(h) => h.scores(z),
            ClassifierHead::Knn(h) => h.scores(z),
            ClassifierHead::GaussianNb(h) => h.scores(z),
        }
    }
}

/// Bank + head + preprocessing contract: the complete accelerated classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AmfcModel {
    pub bank: LayerSpaceBank,
    pub head: ClassifierHead,
    pub input_h: usize,
}

impl AmfcModel {
    pub fn new(bank: LayerSpaceBank, head: ClassifierHead) -> Result<Self> {
        bank.validate()?;
        if head.input_dim() != bank.output_dim() {
            return Err(Error::Config(format!(
                "head expects {} inputs but the bank projects to {}",
                head.input_dim(),
                bank.output_dim()
            )));
        }
        let input_h = bank.input_h();
        Ok(AmfcModel {
            bank,
            head,
            input_h,
        })
    }
}

fn flat_image(image: &Tensor, n: usize) -> Result<&[f64]> {
    let ok = match image.shape() {
        [h, w] => h * w == n,
        [1, h, w] => h * w == n,
        _ => false,
    };
    if !ok {
        return Err(Error::Config(format!(
            "image shape {:?} does not match the bank's input length {n}",
            image.shape()
        )));
    }
    Ok(image.data())
}

/// Project one preprocessed image through the chain of layer spaces:
/// z1 = (x - m1) A1ᵀ, then z_l = (z_(l-1) - m_l) A_lᵀ down the bank. Each
/// step's output length is the next step's input length by construction, so
/// no resizing happens at classification time.
pub fn project_chain(bank: &LayerSpaceBank, image: &Tensor) -> Result<LowDimSample> {
    let first = bank
        .spaces
        .first()
        .ok_or_else(|| Error::Config("empty bank".into()))?;
    let mut cur: Vec<f64> = flat_image(image, first.n)?.to_vec();
    let mut buf: Vec<f64> = Vec::new();
    for space in &bank.spaces {
        if cur.len() != space.n {
            return Err(Error::Config(format!(
                "layer {}: projected vector has length {}, space expects {}",
                space.layer,
                cur.len(),
                space.n
            )));
        }
        for (c, m) in cur.iter_mut().zip(&space.mean) {
            *c -= m;
        }
        buf.clear();
        buf.reserve(space.p);
        for r in 0..space.p {
            let row = &space.basis.data()[r * space.n..(r + 1) * space.n];
            buf.push(crate::linalg::dot(row, &cur));
        }
        std::mem::swap(&mut cur, &mut buf);
        cur.truncate(space.p);
    }
    Ok(LowDimSample {
        z: cur,
        label: None,
    })
}

/// Project a whole dataset, carrying labels through in order.
pub fn project_dataset(bank: &LayerSpaceBank, ds: &Dataset) -> Result<Vec<LowDimSample>> {
    ds.images()
        .par_iter()
        .zip(ds.labels().par_iter())
        .map(|(img, &label)| {
            let mut s = project_chain(bank, img)?;
            s.label = Some(label);
            Ok(s)
        })
        .collect()
}

fn labeled<'a>(samples: &'a [LowDimSample], what: &str) -> Result<Vec<(&'a [f64], usize)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let label = s
                .label
                .ok_or_else(|| Error::Config(format!("{what} sample {i} has no label")))?;
            Ok((s.z.as_slice(), label))
        })
        .collect()
}

/// Fit a classifier head on projected training samples. The MLP variant early
/// stops on `val`; k-NN and naive Bayes fit in closed form and ignore it.
pub fn fit_head(
    kind: HeadKind,
    train: &[LowDimSample],
    val: &[LowDimSample],
    hyper: &HeadHyper,
) -> Result<ClassifierHead> {
    if train.is_empty() {
        return Err(Error::Config("empty training set for head".into()));
    }
    let dim = train[0].z.len();
    for s in train.iter().chain(val) {
        if s.z.len() != dim {
            return Err(Error::Dim(format!(
                "inconsistent projection lengths: {} vs {dim}",
                s.z.len()
            )));
        }
    }
    let train_l = labeled(train, "train")?;
    let val_l = labeled(val, "val")?;
    let classes = 1 + train_l
        .iter()
        .chain(&val_l)
        .map(|&(_, l)| l)
        .max()
        .unwrap_or(0);

    match kind {
        HeadKind::Mlp => {
            let mut sizes = vec![dim];
            sizes.extend_from_slice(&hyper.mlp_hidden);
            sizes.push(classes);
            let cfg = mlp::MlpFitConfig {
                sizes,
                lr: hyper.mlp_lr,
                batch: hyper.mlp_batch,
                max_epochs: hyper.mlp_max_epochs,
                patience: hyper.mlp_patience,
                seed: derive_seed(hyper.seed, 0x4ead),
            };
            Ok(ClassifierHead::Mlp(mlp::fit_mlp(&train_l, &val_l, &cfg)?))
        }
        HeadKind::Knn => {
            if hyper.knn_k == 0 || hyper.knn_k > train_l.len() {
                return Err(Error::Config(format!(
                    "knn k={} must be in 1..={}",
                    hyper.knn_k,
                    train_l.len()
                )));
            }
            Ok(ClassifierHead::Knn(KnnHead {
                k: hyper.knn_k,
                train_z: train.iter().map(|s| s.z.clone()).collect(),
                labels: train_l.iter().map(|&(_, l)| l).collect(),
                classes,
            }))
        }
        HeadKind::GaussianNb => {
            if hyper.nb_var_floor.is_nan() || hyper.nb_var_floor <= 0.0 {
                return Err(Error::Config("nb variance floor must be positive".into()));
            }
            let mut counts = vec![0usize; classes];
            let mut means = vec![vec![0.0; dim]; classes];
            for &(z, l) in &train_l {
                counts[l] += 1;
                for (m, v) in means[l].iter_mut().zip(z) {
                    *m += v;
                }
            }
            for (c, mean) in means.iter_mut().enumerate() {
                if counts[c] == 0 {
                    return Err(Error::Config(format!(
                        "class {c} has no training samples for naive bayes"
                    )));
                }
                for m in mean.iter_mut() {
                    *m /= counts[c] as f64;
                }
            }
            let mut vars = vec![vec![0.0; dim]; classes];
            for &(z, l) in &train_l {
                for ((v, m), x) in vars[l].iter_mut().zip(&means[l]).zip(z) {
                    let d = x - m;
                    *v += d * d;
                }
            }
            for (c, var) in vars.iter_mut().enumerate() {
                for v in var.iter_mut() {
                    *v = (*v / counts[c] as f64).max(hyper.nb_var_floor);
                }
            }
            let priors = counts
                .iter()
                .map(|&c| c as f64 / train_l.len() as f64)
                .collect();
            Ok(ClassifierHead::GaussianNb(GaussianNbHead {
                priors,
                means,
                vars,
                var_floor: hyper.nb_var_floor,
            }))
        }
    }
}

/// Classify one preprocessed image: projection chain, then the head.
/// Ties at the top score resolve to the lowest class index.
pub fn classify(model: &AmfcModel, image: &Tensor) -> Result<(usize, Vec<f64>)> {
    let sample = project_chain(&model.bank, image)?;
    let scores = model.head.scores(&sample.z)?;
    Ok((argmax(&scores), scores))
}

/// Head accuracy over already-projected samples.
pub fn evaluate_head(head: &ClassifierHead, samples: &[LowDimSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            let label = s
                .label
                .ok_or_else(|| Error::Config("unlabeled sample in evaluation".into()))?;
            Ok(usize::from(argmax(&head.scores(&s.z)?) == label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / samples.len() as f64)
}
