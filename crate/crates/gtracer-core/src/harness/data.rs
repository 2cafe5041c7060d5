//! Deterministic dataset generation and label-noise injection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::DataBatch;
use crate::rng;

use super::config::DatasetSpec;
use super::idx;

/// Build `(train, test)` batches for a dataset spec. Label flips apply to
/// the training split only; the test split keeps clean labels.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(DataBatch, DataBatch)> {
    spec.validate()?;
    let seed = spec.seed();
    let (train, test) = match spec {
        DatasetSpec::TwoMoons { train_size, test_size, noise, .. } => (
            two_moons(*train_size, *noise, seed, "train-data")?,
            two_moons(*test_size, *noise, seed, "test-data")?,
        ),
        DatasetSpec::GaussianBlobs { train_size, test_size, n_classes, noise, .. } => (
            gaussian_blobs(*train_size, *n_classes, *noise, seed, "train-data")?,
            gaussian_blobs(*test_size, *n_classes, *noise, seed, "test-data")?,
        ),
        DatasetSpec::Xor { train_size, test_size, noise, .. } => (
            xor(*train_size, *noise, seed, "train-data")?,
            xor(*test_size, *noise, seed, "test-data")?,
        ),
        DatasetSpec::IdxFile {
            images,
            labels,
            test_images,
            test_labels,
            n_classes,
            train_subsample,
            test_subsample,
            ..
        } => (
            idx_batch(images, labels, *n_classes, *train_subsample, seed, "train-subsample")?,
            idx_batch(test_images, test_labels, *n_classes, *test_subsample, seed, "test-subsample")?,
        ),
    };
    let train = if spec.flip_fraction() > 0.0 {
        flip_labels(&train, spec.flip_fraction(), rng::subseed(seed, "flip", 0))?
    } else {
        train
    };
    Ok((train, test))
}

/// Two interleaving half-circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1−cos t, ½−sin t)`, `t` evenly spaced on `[0, π]`, plus Gaussian jitter.
pub fn two_moons(n: usize, noise: f64, seed: u64, purpose: &str) -> Result<DataBatch> {
    let n0 = n / 2;
    let n1 = n - n0;
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut r = rng::stream(seed, purpose, 0);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0.max(2) - 1) as f64;
        inputs.push(t.cos());
        inputs.push(t.sin());
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1.max(2) - 1) as f64;
        inputs.push(1.0 - t.cos());
        inputs.push(0.5 - t.sin());
        labels.push(1);
    }
    for x in inputs.iter_mut() {
        let z: f64 = r.sample(StandardNormal);
        *x += noise * z;
    }
    shuffled_batch(inputs, 2, labels, 2, seed, purpose)
}

/// Gaussian clusters centered on a circle of radius 3.
pub fn gaussian_blobs(
    n: usize,
    n_classes: usize,
    noise: f64,
    seed: u64,
    purpose: &str,
) -> Result<DataBatch> {
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut r = rng::stream(seed, purpose, 0);
    for i in 0..n {
        let k = i % n_classes;
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
        let zx: f64 = r.sample(StandardNormal);
        let zy: f64 = r.sample(StandardNormal);
        inputs.push(3.0 * angle.cos() + noise * zx);
        inputs.push(3.0 * angle.sin() + noise * zy);
        labels.push(k);
    }
    shuffled_batch(inputs, 2, labels, n_classes, seed, purpose)
}

/// Four clusters at `(±1, ±1)`; the label is the XOR of coordinate signs.
pub fn xor(n: usize, noise: f64, seed: u64, purpose: &str) -> Result<DataBatch> {
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut r = rng::stream(seed, purpose, 0);
    let corners = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    for i in 0..n {
        let (cx, cy) = corners[i % 4];
        let zx: f64 = r.sample(StandardNormal);
        let zy: f64 = r.sample(StandardNormal);
        inputs.push(cx + noise * zx);
        inputs.push(cy + noise * zy);
        labels.push(usize::from((cx > 0.0) != (cy > 0.0)));
    }
    shuffled_batch(inputs, 2, labels, 2, seed, purpose)
}

fn idx_batch(
    images: &std::path::Path,
    labels: &std::path::Path,
    n_classes: usize,
    subsample: usize,
    seed: u64,
    purpose: &str,
) -> Result<DataBatch> {
    let (features, n, rows, cols) = idx::read_idx_images(images)?;
    let raw_labels = idx::read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(Error::Idx {
            offset: 8,
            reason: format!("label count {} != image count {n}", raw_labels.len()),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let batch = DataBatch::classification(features, rows * cols, labels, n_classes)?;
    if subsample == 0 || subsample >= n {
        return Ok(batch);
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, purpose, 0);
    indices.shuffle(&mut r);
    indices.truncate(subsample);
    batch.select(&indices)
}

fn shuffled_batch(
    inputs: Vec<f64>,
    d: usize,
    labels: Vec<usize>,
    n_classes: usize,
    seed: u64,
    purpose: &str,
) -> Result<DataBatch> {
    let batch = DataBatch::classification(inputs, d, labels, n_classes)?;
    let mut indices: Vec<usize> = (0..batch.n()).collect();
    let mut r = rng::stream(seed, &format!("{purpose}-perm"), 0);
    indices.shuffle(&mut r);
    batch.select(&indices)
}

/// Flip exactly `round(fraction·n)` labels, chosen without replacement, each
/// to a uniformly random *different* class.
pub fn flip_labels(batch: &DataBatch, fraction: f64, seed: u64) -> Result<DataBatch> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("flip fraction must be in [0,1), got {fraction}")));
    }
    let labels = batch
        .labels()
        .ok_or_else(|| Error::invalid("flip_labels requires classification labels"))?;
    if fraction == 0.0 {
        return Ok(batch.clone());
    }
    let n_classes = batch.n_classes().expect("classification batch");
    if n_classes < 2 {
        return Err(Error::invalid("cannot flip labels in a single-class dataset"));
    }
    let n = batch.n();
    let k = (fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "flip-select", 0);
    indices.shuffle(&mut r);
    indices.truncate(k);

    let mut new_labels = labels.to_vec();
    let mut rl = rng::stream(seed, "flip-label", 0);
    for &i in &indices {
        let shift = rl.gen_range(1..n_classes);
        new_labels[i] = (labels[i] + shift) % n_classes;
    }
    batch.with_labels(new_labels)
}
