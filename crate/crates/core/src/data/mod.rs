//! Dataset ingestion and preparation: corpus loading from PGM + CSV,
//! grayscale/resize preprocessing, a deterministic synthetic shape corpus,
//! and stratified k-fold split plans.

pub mod pgm;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// Labeled image collection. Every image is a 1xHxH grayscale tensor with
/// values in [0, 1]; labels index into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let c = class_names.len();
        let mut seen = vec![false; c];
        for &l in &labels {
            if l >= c {
                return Err(Error::Config(format!("label {l} out of range 0..{c}")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "class {:?} has no samples",
                class_names[missing]
            )));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
            return Err(Error::Config(format!(
                "images must be 1xHxH, got {shape:?}"
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::Config(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if !img.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!("image {i} has values outside [0,1]")));
            }
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Image side length H.
    pub fn side(&self) -> usize {
        self.images[0].shape()[1]
    }
}

/// Stratified k-fold assignment. `assignments[i]` is the fold index of sample
/// `i`; it is a pure function of `(seed, dataset order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

/// Load a corpus from a directory of PGM files and a `filename,label` CSV.
/// Images are grayscaled (channel average, when color), resized to
/// `target_h` x `target_h` and scaled to [0, 1]; sample order follows the CSV.
pub fn load_corpus(dir: &Path, labels_csv: &Path, target_h: usize) -> Result<Dataset> {
    if target_h == 0 {
        return Err(Error::Config("target_h must be positive".into()));
    }
    let text = std::fs::read_to_string(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut lines = text.lines();
    match lines.next().map(|l| l.trim_end_matches('\r')) {
        Some("filename,label") => {}
        other => {
            return Err(Error::Ingest(format!(
                "labels CSV must start with header 'filename,label', got {other:?}"
            )))
        }
    }
    let mut rows: Vec<(usize, String, String)> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row_no = idx + 2; // 1-based, counting the header
        let Some((file, label)) = line.split_once(',') else {
            return Err(Error::Ingest(format!(
                "row {row_no}: missing comma: {line:?}"
            )));
        };
        if file.is_empty() || label.is_empty() {
            return Err(Error::Ingest(format!(
                "row {row_no}: empty filename or label"
            )));
        }
        rows.push((row_no, file.to_string(), label.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Ingest("labels CSV has no data rows".into()));
    }

    // Class indices follow lexicographic label order, independent of row order.
    let mut classes: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, _, label) in &rows {
        let next = classes.len();
        classes.entry(label).or_insert(next);
    }
    let mut class_names: Vec<String> = classes.keys().map(|s| s.to_string()).collect();
    class_names.sort();
    let class_index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let loaded: Vec<Result<(Tensor, usize)>> = rows
        .par_iter()
        .map(|(row_no, file, label)| {
            let path = dir.join(file);
            let img = pgm::read_pnm(&path)
                .map_err(|e| Error::Ingest(format!("row {row_no} ({file}): {e}")))?;
            let resized = resize_bilinear(&img, target_h, target_h)?;
            let clamped: Vec<f64> = resized
                .into_data()
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            let img = Tensor::new(vec![1, target_h, target_h], clamped)?;
            Ok((img, class_index[label.as_str()]))
        })
        .collect();

    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for item in loaded {
        let (img, label) = item?;
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, class_names)
}

const SHAPE_NAMES: [&str; 5] = ["square", "disc", "cross", "ring", "bars"];
const FOREGROUND: f64 = 0.85;
const BACKGROUND: f64 = 0.10;

/// Deterministic synthetic corpus: one filled shape per class, centered with
/// +-`jitter_px` translation and uniform additive noise of amplitude `noise`.
/// Classes are balanced and emitted in class-major order.
pub fn synth_corpus(
    classes: usize,
    per_class: usize,
    h: usize,
    jitter_px: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=5).contains(&classes) {
        return Err(Error::Config(format!(
            "synth corpus supports 2..=5 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if h < 8 {
        return Err(Error::Config(format!(
            "image side {h} too small, need >= 8"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be finite >= 0, got {noise}"
        )));
    }
    if jitter_px >= h / 4 {
        return Err(Error::Config(format!(
            "jitter {jitter_px} too large for side {h}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let j = jitter_px as i64;
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for _ in 0..per_class {
            let dx = rng.random_range(-j..=j);
            let dy = rng.random_range(-j..=j);
            let mut data = vec![0.0; h * h];
            let c = (h / 2) as i64;
            for y in 0..h {
                for x in 0..h {
                    let ry = y as i64 - (c + dy);
                    let rx = x as i64 - (c + dx);
                    let inside = shape_hit(class, rx, ry, h as i64);
                    let mut v = if inside { FOREGROUND } else { BACKGROUND };
                    if noise > 0.0 {
                        v += rng.random_range(-noise..noise);
                    }
                    data[y * h + x] = v.clamp(0.0, 1.0);
                }
            }
            images.push(Tensor::new(vec![1, h, h], data)?);
            labels.push(class);
        }
    }
    let class_names = SHAPE_NAMES[..classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Dataset::new(images, labels, class_names)
}

fn shape_hit(class: usize, rx: i64, ry: i64, h: i64) -> bool {
    let r2 = rx * rx + ry * ry;
    match class {
        // Filled square, side ~ h/2.
        0 => rx.abs() <= h / 4 && ry.abs() <= h / 4,
        // Filled disc, radius ~ h/4.
        1 => r2 <= (h / 4) * (h / 4),
        // Plus-shaped cross.
        2 => {
            let w = (h / 10).max(1);
            let len = h / 3;
            (rx.abs() <= w && ry.abs() <= len) || (ry.abs() <= w && rx.abs() <= len)
        }
        // Annulus between h/8 and h/4.
        3 => r2 <= (h / 4) * (h / 4) && r2 >= (h / 8) * (h / 8),
        // Three horizontal bars.
        4 => {
            let w = (h / 16).max(1);
            let span = h / 3;
            rx.abs() <= span && [-h / 4, 0, h / 4].iter().any(|&o| (ry - o).abs() <= w)
        }
        _ => unreachable!("class checked by synth_corpus"),
    }
}

/// Build a stratified k-fold plan: per class, fold sizes differ by at most 1.
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {:?} has {} samples, fewer than k = {k}",
                ds.class_names()[c],
                members.len()
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; ds.len()];
    for mut members in by_class {
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            assignments[idx] = pos % k;
        }
    }
    Ok(SplitPlan {
        fold_count: k,
        seed,
        assignments,
    })
}

/// Split a dataset per the plan: test = fold `fold_i`, train = everything
/// else. Sample order within each side follows the dataset order.
pub fn fold_view(ds: &Dataset, plan: &SplitPlan, fold_i: usize) -> Result<(Dataset, Dataset)> {
    if plan.assignments.len() != ds.len() {
        return Err(Error::Config(format!(
            "plan covers {} samples, dataset has {}",
            plan.assignments.len(),
            ds.len()
        )));
    }
    if fold_i >= plan.fold_count {
        return Err(Error::Config(format!(
            "fold {fold_i} out of range 0..{}",
            plan.fold_count
        )));
    }
    let (mut train_imgs, mut train_labels) = (Vec::new(), Vec::new());
    let (mut test_imgs, mut test_labels) = (Vec::new(), Vec::new());
    for i in 0..ds.len() {
        if plan.assignments[i] == fold_i {
            test_imgs.push(ds.images[i].clone());
            test_labels.push(ds.labels[i]);
        } else {
            train_imgs.push(ds.images[i].clone());
            train_labels.push(ds.labels[i]);
        }
    }
    Ok((
        Dataset::new(train_imgs, train_labels, ds.class_names.to_vec())?,
        Dataset::new(test_imgs, test_labels, ds.class_names.to_vec())?,
    ))
}
