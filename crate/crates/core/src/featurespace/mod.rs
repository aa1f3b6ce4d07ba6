//! Per-layer eigenvector feature spaces.
//!
//! For each conv layer, the post-activation maps of M sample images are
//! flattened (resized to the previous layer's selected dimension first, for
//! layers past the first) and stacked into a V x n matrix. Its mean vector
//! and covariance eigenpairs define the layer's space; a ranked subset of
//! eigenvectors becomes the projection basis. The chain of spaces — the
//! `LayerSpaceBank` — is what replaces the convolutional forward pass.
//!
//! Covariance uses the 1/V normalization and, whenever V < n, the snapshot
//! (Gram) method: eigendecompose the V x V matrix X_c X_cᵀ / V and map the
//! eigenvectors back through X_cᵀ.

mod io;

pub use io::{bank_from_bytes, bank_to_bytes, load_bank, save_bank};

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{capture, CaptureTrace, TrainedModel};
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigen_desc};
use crate::tensor::{resize_bilinear, Tensor};
use crate::util::derive_seed;

/// Eigenvalues below this fraction of the largest one count as zero.
pub const EPS_VALID_REL: f64 = 1e-12;

/// Stacked flattened feature maps of one layer: V = M * K_l rows of length n.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub layer: usize, // 1-based conv layer index
    pub rows: usize,  // V
    pub cols: usize,  // n
    pub data: Tensor, // V x n
}

impl FeatureMatrix {
    pub fn new(layer: usize, data: Tensor) -> Result<Self> {
        let [rows, cols] = data.dims2()?;
        Ok(FeatureMatrix {
            layer,
            rows,
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data.data()[i * self.cols..(i + 1) * self.cols]
    }
}

/// Validity mask and descending-eigenvalue ranking over the candidate
/// eigenpairs of one layer. Valid means real, positive and above
/// `EPS_VALID_REL` times the largest eigenvalue; `order` is a permutation of
/// the valid indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EigRanking {
    pub order: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Full eigendecomposition of one layer's covariance: candidate eigenvalues
/// in descending order (at most min(V-1, n) of them) and unit eigenvectors
/// for the valid prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEigen {
    pub n: usize,
    pub rows: usize,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub ranking: EigRanking,
}

impl LayerEigen {
    pub fn valid_count(&self) -> usize {
        self.ranking.order.len()
    }
}

/// How eigenvectors are picked out of the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    FirstRanked,
    LastRanked,
    Random,
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionMode::FirstRanked => "first_ranked",
            SelectionMode::LastRanked => "last_ranked",
            SelectionMode::Random => "random",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_ranked" => Ok(SelectionMode::FirstRanked),
            "last_ranked" => Ok(SelectionMode::LastRanked),
            "random" => Ok(SelectionMode::Random),
            other => Err(Error::Config(format!(
                "unknown selection mode {other:?} (expected first_ranked, last_ranked or random)"
            ))),
        }
    }
}

/// One layer's projection space: mean vector, selected eigenvector basis
/// (rows of `basis`), and the eigenvalues those rows belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpace {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub basis: Tensor, // p x n
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub h_in: usize, // sqrt(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub m: usize,
    pub seed: u64,
    pub scenario: String,
    pub model_hash: u64,
}

/// Ordered chain of layer spaces; `spaces[l].n == spaces[l-1].p` throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpaceBank {
    pub spaces: Vec<LayerSpace>,
    pub provenance: Provenance,
}

impl LayerSpaceBank {
    pub fn validate(&self) -> Result<()> {
        if self.spaces.is_empty() {
            return Err(Error::Config("bank has no layer spaces".into()));
        }
        for (i, s) in self.spaces.iter().enumerate() {
            if s.basis.shape() != [s.p, s.n] {
                return Err(Error::Config(format!(
                    "space {i}: basis shape {:?} does not match p={}, n={}",
                    s.basis.shape(),
                    s.p,
                    s.n
                )));
            }
            if s.mean.len() != s.n || s.eigenvalues.len() != s.p {
                return Err(Error::Config(format!(
                    "space {i}: mean/eigenvalue sizes off"
                )));
            }
            if s.h_in * s.h_in != s.n {
                return Err(Error::Config(format!(
                    "space {i}: n={} is not the square of h_in={}",
                    s.n, s.h_in
                )));
            }
            if i > 0 && s.n != self.spaces[i - 1].p {
                return Err(Error::Config(format!(
                    "chain break: space {i} expects n={}, previous space selected p={}",
                    s.n,
                    self.spaces[i - 1].p
                )));
            }
        }
        Ok(())
    }

    /// Dimension of the final projected vector.
    pub fn output_dim(&self) -> usize {
        self.spaces.last().map(|s| s.p).unwrap_or(0)
    }

    /// Input image side the chain expects.
    pub fn input_h(&self) -> usize {
        self.spaces.first().map(|s| s.h_in).unwrap_or(0)
    }
}

fn int_sqrt(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Flatten the maps of conv layer `layer` (1-based) from one trace into rows,
/// resizing to `side x side` first when given.
fn trace_rows(trace: &CaptureTrace, layer: usize, side: Option<usize>) -> Result<Vec<f64>> {
    let map = trace.maps.get(layer - 1).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} out of range: model has {} conv layers",
            trace.maps.len()
        ))
    })?;
    let [k, h, w] = map.dims3()?;
    let mut out = Vec::with_capacity(k * side.map(|s| s * s).unwrap_or(h * w));
    for c in 0..k {
        let flat = Tensor::new(vec![h, w], map.channel(c)?.to_vec())?;
        match side {
            Some(s) => out.extend_from_slice(resize_bilinear(&flat, s, s)?.data()),
            None => out.extend_from_slice(flat.data()),
        }
    }
    Ok(out)
}

fn collect_from_traces(
    traces: &[CaptureTrace],
    layer: usize,
    prev_p: Option<usize>,
) -> Result<FeatureMatrix> {
    if traces.is_empty() {
        return Err(Error::Config(
            "no samples to collect feature maps from".into(),
        ));
    }
    if layer == 0 {
        return Err(Error::Config("layer index is 1-based".into()));
    }
    let side = match (layer, prev_p) {
        (1, _) => None,
        (_, Some(p)) => Some(
            int_sqrt(p)
                .ok_or_else(|| Error::Config(format!("previous p={p} is not a perfect square")))?,
        ),
        (_, None) => {
            return Err(Error::Config(format!(
                "layer {layer} needs the previous layer's selected dimension"
            )))
        }
    };
    let rows: Vec<Vec<f64>> = traces
        .par_iter()
        .map(|t| trace_rows(t, layer, side))
        .collect::<Result<_>>()?;
    let cols = rows[0].len() / traces[0].maps[layer - 1].shape()[0];
    let mut data = Vec::with_capacity(rows.iter().map(Vec::len).sum());
    for r in rows {
        data.extend_from_slice(&r);
    }
    let v = data.len() / cols;
    FeatureMatrix::new(layer, Tensor::new(vec![v, cols], data)?)
}

/// Phase-3 collection: run the capture forward pass on every sample and stack
/// the flattened maps of `layer` in sample-major, kernel-minor order. Maps of
/// layers past the first are resized to sqrt(prev_p) squared.
pub fn collect_feature_matrix(
    model: &TrainedModel,
    samples: &[Tensor],
    layer: usize,
    prev_p: Option<usize>,
) -> Result<FeatureMatrix> {
    let traces: Vec<CaptureTrace> = samples
        .par_iter()
        .map(|img| capture(model, img))
        .collect::<Result<_>>()?;
    collect_from_traces(&traces, layer, prev_p)
}

/// Mean row of a feature matrix.
pub fn mean_vector(x: &FeatureMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let inv = 1.0 / x.rows as f64;
    for m in &mut mean {
        *m *= inv;
    }
    mean
}

fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    let mut best = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Symmetric pairwise-dot matrix `rows rowsᵀ / scale` for `count` rows of
/// length `len`, computed lower-triangle-first in parallel, then mirrored.
fn self_gram(rows: &[f64], count: usize, len: usize, scale: f64) -> Vec<f64> {
    let mut g = vec![0.0; count * count];
    g.par_chunks_mut(count).enumerate().for_each(|(i, out)| {
        let ri = &rows[i * len..(i + 1) * len];
        for (j, slot) in out.iter_mut().enumerate().take(i + 1) {
            *slot = dot(ri, &rows[j * len..(j + 1) * len]) / scale;
        }
    });
    for i in 0..count {
        for j in i + 1..count {
            g[i * count + j] = g[j * count + i];
        }
    }
    g
}

fn rank_candidates(eigenvalues: &[f64]) -> EigRanking {
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let valid: Vec<bool> = eigenvalues
        .iter()
        .map(|&l| l > 0.0 && l > EPS_VALID_REL * lambda_max)
        .collect();
    // Candidates are sorted descending, so the valid set is a prefix.
    let order: Vec<usize> = valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    EigRanking { order, valid }
}

fn eigen_direct(xc: &[f64], v: usize, n: usize) -> Result<LayerEigen> {
    // Covariance via a transpose so every dot runs over contiguous memory.
    let mut xt = vec![0.0; n * v];
    for i in 0..v {
        for a in 0..n {
            xt[a * v + i] = xc[i * n + a];
        }
    }
    let cov = self_gram(&xt, n, v, v as f64);
    let pairs = sym_eigen_desc(&cov, n)?;
    let keep = n.min(v - 1);
    let eigenvalues: Vec<f64> = pairs.iter().take(keep).map(|p| p.0).collect();
    let ranking = rank_candidates(&eigenvalues);
    let eigenvectors: Vec<Vec<f64>> = pairs
        .into_iter()
        .take(ranking.order.len())
        .map(|(_, mut vec)| {
            fix_sign(&mut vec);
            vec
        })
        .collect();
    Ok(LayerEigen {
        n,
        rows: v,
        eigenvalues,
        eigenvectors,
        ranking,
    })
}

fn eigen_snapshot(xc: &[f64], v: usize, n: usize) -> Result<LayerEigen> {
    let gram = self_gram(xc, v, n, v as f64);
    let pairs = sym_eigen_desc(&gram, v)?;
    let keep = n.min(v - 1);
    let eigenvalues: Vec<f64> = pairs.iter().take(keep).map(|p| p.0).collect();
    let ranking = rank_candidates(&eigenvalues);
    // Map each valid Gram eigenvector u back through the data: w = X_cᵀ u,
    // renormalized to unit length.
    let eigenvectors: Vec<Vec<f64>> = pairs[..ranking.order.len()]
        .par_iter()
        .map(|(_, u)| {
            let mut w = vec![0.0; n];
            for (i, &ui) in u.iter().enumerate() {
                if ui != 0.0 {
                    let row = &xc[i * n..(i + 1) * n];
                    for (wa, &ra) in w.iter_mut().zip(row) {
                        *wa += ui * ra;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > 0.0 {
                for x in w.iter_mut() {
                    *x /= norm;
                }
            }
            fix_sign(&mut w);
            w
        })
        .collect();
    Ok(LayerEigen {
        n,
        rows: v,
        eigenvalues,
        eigenvectors,
        ranking,
    })
}

/// Eigenpairs of `Cov = (1/V) sum (x_i - x_m)(x_i - x_m)ᵀ`, via the snapshot
/// (Gram) method when V < n and directly otherwise. At most min(V-1, n)
/// candidates are returned, ranked by descending eigenvalue; a degenerate
/// matrix (all rows identical) yields zero valid pairs, not an error.
pub fn eigendecompose(x: &FeatureMatrix) -> Result<LayerEigen> {
    if x.rows < 2 {
        return Err(Error::Config(format!(
            "need at least 2 rows to eigendecompose, got {}",
            x.rows
        )));
    }
    let mean = mean_vector(x);
    let (v, n) = (x.rows, x.cols);
    let mut xc = vec![0.0; v * n];
    for i in 0..v {
        for (slot, (&xv, &mv)) in xc[i * n..(i + 1) * n]
            .iter_mut()
            .zip(x.row(i).iter().zip(&mean))
        {
            *slot = xv - mv;
        }
    }
    if v < n {
        eigen_snapshot(&xc, v, n)
    } else {
        eigen_direct(&xc, v, n)
    }
}

/// Pick `p` eigenvectors out of a layer's ranking and assemble the space.
///
/// `first_ranked` takes the p largest-eigenvalue vectors in rank order,
/// `last_ranked` the p smallest valid ones in ascending-eigenvalue order,
/// `random` a seeded uniform draw without replacement in drawn order.
pub fn select_basis(
    layer: usize,
    mean: &[f64],
    eigen: &LayerEigen,
    p: usize,
    mode: SelectionMode,
    seed: u64,
) -> Result<LayerSpace> {
    let valid = eigen.valid_count();
    if p == 0 {
        return Err(Error::Config("cannot select an empty basis".into()));
    }
    if p > valid {
        return Err(Error::Config(format!(
            "requested p={p} eigenvectors but only {valid} are valid"
        )));
    }
    let n = eigen.n;
    if mean.len() != n {
        return Err(Error::Dim(format!(
            "mean length {} does not match n={n}",
            mean.len()
        )));
    }
    let h_in = int_sqrt(n)
        .ok_or_else(|| Error::Config(format!("layer input n={n} is not a perfect square")))?;

    let picks: Vec<usize> = match mode {
        SelectionMode::FirstRanked => eigen.ranking.order[..p].to_vec(),
        SelectionMode::LastRanked => eigen.ranking.order[valid - p..]
            .iter()
            .rev()
            .copied()
            .collect(),
        SelectionMode::Random => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut pool = eigen.ranking.order.clone();
            let mut picks = Vec::with_capacity(p);
            for i in 0..p {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
                picks.push(pool[i]);
            }
            picks
        }
    };

    let mut basis = Vec::with_capacity(p * n);
    let mut eigenvalues = Vec::with_capacity(p);
    for &idx in &picks {
        basis.extend_from_slice(&eigen.eigenvectors[idx]);
        eigenvalues.push(eigen.eigenvalues[idx]);
    }
    Ok(LayerSpace {
        layer,
        mean: mean.to_vec(),
        basis: Tensor::new(vec![p, n], basis)?,
        eigenvalues,
        n,
        p,
        h_in,
    })
}

/// Mean vector plus full eigendecomposition of one layer's feature matrix —
/// everything basis selection and offline analysis need.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExtraction {
    pub mean: Vec<f64>,
    pub eigen: LayerEigen,
}

/// Incremental bank construction with a memo of per-layer eigendecompositions,
/// so several selections (scenarios) over the same samples share the
/// expensive work. The capture forward pass runs once per sample.
pub struct BankBuilder<'a> {
    model: &'a TrainedModel,
    traces: Vec<CaptureTrace>,
    sample_count: usize,
    memo: HashMap<(usize, usize), Arc<LayerExtraction>>,
}

impl<'a> BankBuilder<'a> {
    /// Draw up to `m` sample images (seeded, without replacement) and capture
    /// their feature maps.
    pub fn new(model: &'a TrainedModel, images: &[Tensor], m: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("no images to build a bank from".into()));
        }
        if m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let take = m.min(images.len());
        let mut idx: Vec<usize> = (0..images.len()).collect();
        for i in 0..take {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let traces: Vec<CaptureTrace> = idx[..take]
            .par_iter()
            .map(|&i| capture(model, &images[i]))
            .collect::<Result<_>>()?;
        Ok(BankBuilder {
            model,
            traces,
            sample_count: take,
            memo: HashMap::new(),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Builder whose sample draw matches what `build_bank` does for the same
    /// run seed, so offline analysis sees the same M-sample subset.
    pub fn for_run_seed(
        model: &'a TrainedModel,
        images: &[Tensor],
        m: usize,
        run_seed: u64,
    ) -> Result<Self> {
        Self::new(model, images, m, derive_seed(run_seed, 0x5a17))
    }

    /// Mean vector and full eigendecomposition of one layer's feature matrix
    /// (memoized). `prev_p` is the previous layer's selected dimension, None
    /// for layer 1.
    pub fn layer_eigen(
        &mut self,
        layer: usize,
        prev_p: Option<usize>,
    ) -> Result<Arc<LayerExtraction>> {
        let key = (layer, prev_p.unwrap_or(0));
        if let Some(hit) = self.memo.get(&key) {
            return Ok(hit.clone());
        }
        let x = collect_from_traces(&self.traces, layer, prev_p)?;
        let mean = mean_vector(&x);
        let eigen = eigendecompose(&x)?;
        let entry = Arc::new(LayerExtraction { mean, eigen });
        self.memo.insert(key, entry.clone());
        Ok(entry)
    }

    /// Build a bank for the given schedule and selection mode. Schedule entry
    /// l is the p of conv layer l+1; every entry except the last must be a
    /// perfect square so the next layer can reshape.
    pub fn build(
        &mut self,
        p_schedule: &[usize],
        mode: SelectionMode,
        seed: u64,
        scenario: &str,
    ) -> Result<LayerSpaceBank> {
        let layers = self.model.spec.conv_layers.len();
        if p_schedule.is_empty() || p_schedule.len() > layers {
            return Err(Error::Config(format!(
                "schedule length {} must be in 1..={layers}",
                p_schedule.len()
            )));
        }
        for (i, &p) in p_schedule.iter().enumerate() {
            if p == 0 {
                return Err(Error::Config(format!("schedule entry {i} is zero")));
            }
            if i + 1 < p_schedule.len() && int_sqrt(p).is_none() {
                return Err(Error::Config(format!(
                    "schedule entry {i} ({p}) feeds another layer and must be a perfect square"
                )));
            }
        }
        let mut spaces = Vec::with_capacity(p_schedule.len());
        let mut prev_p = None;
        for (i, &p) in p_schedule.iter().enumerate() {
            let layer = i + 1;
            let entry = self.layer_eigen(layer, prev_p)?;
            let space = select_basis(
                layer,
                &entry.mean,
                &entry.eigen,
                p,
                mode,
                derive_seed(seed, layer as u64),
            )
            .map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("layer {layer}: {msg}")),
                other => other,
            })?;
            spaces.push(space);
            prev_p = Some(p);
        }
        let bank = LayerSpaceBank {
            spaces,
            provenance: Provenance {
                m: self.sample_count,
                seed,
                scenario: scenario.to_string(),
                model_hash: self.model.weights_hash(),
            },
        };
        bank.validate()?;
        Ok(bank)
    }
}

/// One-shot bank construction: draw M samples, then collect, decompose and
/// select per layer down the schedule.
pub fn build_bank(
    model: &TrainedModel,
    train_images: &[Tensor],
    m: usize,
    p_schedule: &[usize],
    mode: SelectionMode,
    seed: u64,
) -> Result<LayerSpaceBank> {
    let mut builder = BankBuilder::for_run_seed(model, train_images, m, seed)?;
    let mut bank = builder.build(p_schedule, mode, seed, &mode.to_string())?;
    bank.provenance.seed = seed;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ArchitectureSpec;
    use crate::data::synth_corpus;
    use rand::{Rng, SeedableRng};

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        let cols = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(1, Tensor::new(vec![rows.len(), cols], data).unwrap()).unwrap()
    }

    fn random_matrix(v: usize, n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..v * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(1, Tensor::new(vec![v, n], data).unwrap()).unwrap()
    }

    #[test]
    fn mean_vector_cases() {
        let x = matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mean_vector(&x), vec![2.0, 3.0]);
        let single = matrix(&[&[7.0, -1.0, 0.5]]);
        assert_eq!(mean_vector(&single), vec![7.0, -1.0, 0.5]);
    }

    #[test]
    fn mean_vector_matches_independent_accumulation() {
        let x = random_matrix(1000, 17, 3);
        let got = mean_vector(&x);
        // Independent order: accumulate per column over reversed rows.
        for c in 0..17 {
            let mut acc = 0.0;
            for i in (0..1000).rev() {
                acc += x.row(i)[c];
            }
            let want = acc / 1000.0;
            assert!((got[c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn eigendecompose_hand_case() {
        // Centered rows (-1,-1),(1,1): Cov = [[1,1],[1,1]], spectrum {2, 0}.
        let x = matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eig = eigendecompose(&x).unwrap();
        // min(V-1, n) = 1 candidate survives the rank bound.
        assert_eq!(eig.eigenvalues.len(), 1);
        assert!((eig.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert_eq!(eig.valid_count(), 1);
        let inv = 1.0 / 2.0f64.sqrt();
        assert!((eig.eigenvectors[0][0] - inv).abs() < 1e-12);
        assert!((eig.eigenvectors[0][1] - inv).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_no_valid_pairs() {
        let x = matrix(&[&[0.5, 1.5, -2.0], &[0.5, 1.5, -2.0], &[0.5, 1.5, -2.0]]);
        let eig = eigendecompose(&x).unwrap();
        assert_eq!(eig.valid_count(), 0);
        assert!(eig.ranking.order.is_empty());
    }

    #[test]
    fn snapshot_matches_svd_oracle() {
        let x = random_matrix(50, 200, 7);
        let eig = eigendecompose(&x).unwrap(); // V < n, snapshot path
        assert_eq!(eig.eigenvalues.len(), 49);

        // Oracle: SVD of the centered data; eigenvalues are squared singular
        // values over V, eigenvectors the right singular vectors up to sign.
        let mean = mean_vector(&x);
        let mut centered = nalgebra::DMatrix::<f64>::zeros(50, 200);
        for i in 0..50 {
            for j in 0..200 {
                centered[(i, j)] = x.row(i)[j] - mean[j];
            }
        }
        let svd = centered.clone().svd(true, true);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let v_t = svd.v_t.unwrap();

        for (i, &lambda) in eig.eigenvalues.iter().enumerate().take(20) {
            let want = sv[i] * sv[i] / 50.0;
            assert!(
                (lambda - want).abs() <= 1e-8 * want.max(1e-12),
                "eigenvalue {i}: {lambda} vs {want}"
            );
        }
        // Vector agreement (up to sign) for the well-separated leading pairs.
        for i in 0..10 {
            let v_row: Vec<f64> = (0..200).map(|j| v_t[(i, j)]).collect();
            let d = dot(&eig.eigenvectors[i], &v_row).abs();
            assert!(d > 1.0 - 1e-8, "eigenvector {i}: |dot| = {d}");
        }
        // Subspace agreement, sign-free: ||AᵀA - ÃᵀÃ||_F over the top 10
        // eigenvectors from each route.
        let k = 10;
        let mut frob2 = 0.0;
        for a in 0..200 {
            for b in 0..200 {
                let mine: f64 = (0..k)
                    .map(|i| eig.eigenvectors[i][a] * eig.eigenvectors[i][b])
                    .sum();
                let oracle: f64 = (0..k).map(|i| v_t[(i, a)] * v_t[(i, b)]).sum();
                frob2 += (mine - oracle) * (mine - oracle);
            }
        }
        assert!(frob2.sqrt() < 1e-6, "projector distance {}", frob2.sqrt());
    }

    #[test]
    fn snapshot_and_direct_paths_agree() {
        // 40 x 30: the direct path applies. Re-run the same centered data
        // through the snapshot path and compare.
        let x = random_matrix(40, 30, 11);
        let mean = mean_vector(&x);
        let mut xc = vec![0.0; 40 * 30];
        for i in 0..40 {
            for j in 0..30 {
                xc[i * 30 + j] = x.row(i)[j] - mean[j];
            }
        }
        let a = eigen_direct(&xc, 40, 30).unwrap();
        let b = eigen_snapshot(&xc, 40, 30).unwrap();
        assert_eq!(a.eigenvalues.len(), 30);
        assert_eq!(b.eigenvalues.len(), 30);
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-12));
        }
        for (va, vb) in a.eigenvectors.iter().zip(&b.eigenvectors) {
            assert!(dot(va, vb) > 1.0 - 1e-8); // sign-fixed on both paths
        }
    }

    #[test]
    fn eigenvalue_sum_matches_trace() {
        // V - 1 < n: the dropped tail of the spectrum is exactly zero.
        let x = random_matrix(20, 30, 13);
        let eig = eigendecompose(&x).unwrap();
        let mean = mean_vector(&x);
        let mut trace = 0.0;
        for i in 0..20 {
            for j in 0..30 {
                let d = x.row(i)[j] - mean[j];
                trace += d * d / 20.0;
            }
        }
        let sum: f64 = eig.eigenvalues.iter().sum();
        assert!((sum - trace).abs() <= 1e-8 * trace);
    }

    #[test]
    fn select_basis_ordering_contracts() {
        let x = random_matrix(30, 9, 17);
        let mean = mean_vector(&x);
        let eig = eigendecompose(&x).unwrap();
        assert!(eig.valid_count() >= 3);

        let first = select_basis(1, &mean, &eig, 2, SelectionMode::FirstRanked, 0).unwrap();
        assert_eq!(first.eigenvalues, &eig.eigenvalues[..2]);
        assert_eq!(&first.basis.data()[..9], eig.eigenvectors[0].as_slice());

        let last = select_basis(1, &mean, &eig, 2, SelectionMode::LastRanked, 0).unwrap();
        let vc = eig.valid_count();
        // Ascending eigenvalue order: smallest valid first.
        assert_eq!(
            last.eigenvalues,
            vec![eig.eigenvalues[vc - 1], eig.eigenvalues[vc - 2]]
        );

        let r1 = select_basis(1, &mean, &eig, 3, SelectionMode::Random, 42).unwrap();
        let r2 = select_basis(1, &mean, &eig, 3, SelectionMode::Random, 42).unwrap();
        assert_eq!(r1, r2);
        let r3 = select_basis(1, &mean, &eig, 3, SelectionMode::Random, 43).unwrap();
        assert_ne!(r1.eigenvalues, r3.eigenvalues);

        match select_basis(1, &mean, &eig, vc + 1, SelectionMode::FirstRanked, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains(&vc.to_string()), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn ranking_is_permutation_of_valid_prefix() {
        let x = random_matrix(25, 10, 19);
        let eig = eigendecompose(&x).unwrap();
        let valid_count = eig.ranking.valid.iter().filter(|&&v| v).count();
        assert_eq!(eig.ranking.order.len(), valid_count);
        let mut sorted = eig.ranking.order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), valid_count);
        for w in eig.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    fn toy_model_and_images() -> (TrainedModel, Vec<Tensor>) {
        let model = TrainedModel::init(ArchitectureSpec::mini_vgg(3), 5).unwrap();
        let ds = synth_corpus(3, 10, 32, 2, 0.05, 21).unwrap();
        (model, ds.images().to_vec())
    }

    #[test]
    fn feature_matrix_row_order_is_sample_major() {
        let (model, images) = toy_model_and_images();
        let k1 = model.spec.conv_layers[0].out_channels;
        let both = collect_feature_matrix(&model, &images[..2], 1, None).unwrap();
        assert_eq!(both.rows, 2 * k1);
        assert_eq!(both.cols, 32 * 32);
        let first = collect_feature_matrix(&model, &images[..1], 1, None).unwrap();
        let second = collect_feature_matrix(&model, &images[1..2], 1, None).unwrap();
        for k in 0..k1 {
            assert_eq!(both.row(k), first.row(k));
            assert_eq!(both.row(k1 + k), second.row(k));
        }
    }

    #[test]
    fn layer_two_rows_are_resized_to_prev_p() {
        let (model, images) = toy_model_and_images();
        let x = collect_feature_matrix(&model, &images[..3], 2, Some(196)).unwrap();
        assert_eq!(x.cols, 196); // native map is 32x32 = 1024
        assert_eq!(x.rows, 3 * model.spec.conv_layers[1].out_channels);
        assert!(matches!(
            collect_feature_matrix(&model, &images[..3], 2, Some(10)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            collect_feature_matrix(&model, &images[..3], 2, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bank_shape_propagation_and_orthonormality() {
        let (model, images) = toy_model_and_images();
        // M = 25 keeps V manageable while still exceeding every schedule p.
        let bank = build_bank(
            &model,
            &images,
            25,
            &[196, 144, 100, 64],
            SelectionMode::FirstRanked,
            7,
        )
        .unwrap();
        assert_eq!(bank.spaces.len(), 4);
        let ns: Vec<usize> = bank.spaces.iter().map(|s| s.n).collect();
        assert_eq!(ns, vec![1024, 196, 144, 100]);
        let ps: Vec<usize> = bank.spaces.iter().map(|s| s.p).collect();
        assert_eq!(ps, vec![196, 144, 100, 64]);
        bank.validate().unwrap();

        // ||A Aᵀ - I||_max < 1e-8 for every stored basis.
        for s in &bank.spaces {
            for i in 0..s.p {
                let ri = &s.basis.data()[i * s.n..(i + 1) * s.n];
                for j in 0..=i {
                    let rj = &s.basis.data()[j * s.n..(j + 1) * s.n];
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (dot(ri, rj) - want).abs() < 1e-8,
                        "layer {} rows {i},{j}",
                        s.layer
                    );
                }
            }
        }
    }

    #[test]
    fn schedule_overrunning_rank_bound_errors() {
        let (model, images) = toy_model_and_images();
        // M=10 -> V1 = 80 rows -> at most 79 valid pairs; 196 is unreachable.
        match build_bank(
            &model,
            &images,
            10,
            &[196, 144],
            SelectionMode::FirstRanked,
            7,
        ) {
            Err(Error::Config(msg)) => assert!(msg.contains("valid"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn interior_schedule_entries_must_be_square() {
        let (model, images) = toy_model_and_images();
        match build_bank(
            &model,
            &images,
            10,
            &[50, 16],
            SelectionMode::FirstRanked,
            7,
        ) {
            Err(Error::Config(msg)) => assert!(msg.contains("square"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        // A non-square *last* entry is allowed.
        build_bank(
            &model,
            &images,
            10,
            &[49, 30],
            SelectionMode::FirstRanked,
            7,
        )
        .unwrap();
    }

    #[test]
    fn bank_build_is_deterministic() {
        let (model, images) = toy_model_and_images();
        let a = build_bank(&model, &images, 15, &[49, 36], SelectionMode::Random, 40).unwrap();
        let b = build_bank(&model, &images, 15, &[49, 36], SelectionMode::Random, 40).unwrap();
        assert_eq!(bank_to_bytes(&a).unwrap(), bank_to_bytes(&b).unwrap());
    }
}
