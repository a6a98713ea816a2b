//! Synthetic activation data for the probe battery.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use iimap::probes::{corrected_accuracy, train_probe, ActivationDataset, Concept};

/// Two unit-variance blobs on either side of a random hyperplane through
/// the origin. Along the plane normal every sample sits at least one sigma
/// from the plane, so the classes are linearly separable with a gap of two
/// sigma between them.
pub fn separable_blobs(n: usize, dim: usize, seed: u64) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    normal.iter_mut().for_each(|v| *v /= len);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_bool(0.5);
        let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let along: f64 = x.iter().zip(&normal).map(|(a, b)| a * b).sum();
        let z: f64 = StandardNormal.sample(&mut rng);
        let target = if label { 1.0 + z.abs() } else { -1.0 - z.abs() };
        for (xi, ni) in x.iter_mut().zip(&normal) {
            *xi += (target - along) * ni;
        }
        features.extend(x.iter().map(|&v| v as f32));
        labels.push(label);
    }
    let hashes: Vec<u64> = (0..n as u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).collect();
    ActivationDataset::new(0, Concept::Random, dim, features, labels, &hashes).unwrap()
}

pub fn with_permuted_labels(ds: &ActivationDataset, seed: u64) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    out.labels.shuffle(&mut rng);
    out
}

/// Best corrected accuracy over the standard lambda pair.
pub fn best_accuracy(ds: &ActivationDataset) -> f64 {
    iimap::probes::DEFAULT_LAMBDAS
        .iter()
        .map(|&l| corrected_accuracy(&train_probe(ds, l).unwrap(), ds).unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
}
