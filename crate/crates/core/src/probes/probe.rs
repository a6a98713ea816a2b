use serde::{Deserialize, Serialize};

use super::concepts::{mix, Concept};
use super::ProbeError;

/// Percentage of positions held out for validation, chosen by position hash.
pub const VALIDATION_PERCENT: u64 = 20;
pub const MAX_PROBE_STEPS: usize = 2000;
pub const PROBE_TOLERANCE: f64 = 1e-7;
const SPLIT_SEED: u64 = 0x005e_ed0f_5711;

/// Whether a position with this hash belongs to the validation split.
pub fn is_validation(position_hash: u64) -> bool {
    mix(position_hash, SPLIT_SEED) % 100 < VALIDATION_PERCENT
}

/// Flattened activations of one layer with binary concept labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    pub layer: usize,
    pub concept: Concept,
    pub dim: usize,
    /// Row-major `[n, dim]`.
    pub features: Vec<f32>,
    pub labels: Vec<bool>,
    pub validation: Vec<bool>,
}

impl ActivationDataset {
    /// Builds a dataset and splits it by `hashes` (one per item).
    pub fn new(
        layer: usize,
        concept: Concept,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<bool>,
        hashes: &[u64],
    ) -> Result<ActivationDataset, ProbeError> {
        let n = labels.len();
        if features.len() != n * dim || hashes.len() != n {
            return Err(ProbeError::Shape(format!(
                "{} features, {} labels, {} hashes for dim {dim}",
                features.len(),
                n,
                hashes.len()
            )));
        }
        Ok(ActivationDataset {
            layer,
            concept,
            dim,
            features,
            labels,
            validation: hashes.iter().map(|&h| is_validation(h)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.validation[i]).collect()
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.validation[i]).collect()
    }

    /// (negatives, positives) over the whole dataset.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (self.len() - pos, pos)
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.class_counts().1 as f64 / self.len() as f64
    }

    pub fn minority_fraction(&self) -> f64 {
        let r = self.positive_rate();
        r.min(1.0 - r)
    }
}

/// A single affine unit with a sigmoid: `sigma(w . x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
    /// Objective value after each accepted step, starting at the initial point.
    pub loss_history: Vec<f64>,
}

impl Probe {
    pub fn logit(&self, x: &[f32]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        self.logit(x) >= 0.0
    }
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct Problem<'a> {
    ds: &'a ActivationDataset,
    rows: Vec<usize>,
    lambda: f64,
}

impl Problem<'_> {
    /// Mean squared error of the sigmoid outputs.
    fn smooth(&self, w: &[f64], b: f64) -> f64 {
        let n = self.rows.len() as f64;
        self.rows
            .iter()
            .map(|&i| {
                let y = self.ds.labels[i] as u8 as f64;
                let e = sigmoid(dot(w, self.ds.row(i)) + b) - y;
                e * e
            })
            .sum::<f64>()
            / n
    }

    fn smooth_grad(&self, w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
        let n = self.rows.len() as f64;
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        let mut f = 0.0;
        for &i in &self.rows {
            let x = self.ds.row(i);
            let y = self.ds.labels[i] as u8 as f64;
            let s = sigmoid(dot(w, x) + b);
            let e = s - y;
            f += e * e;
            let r = 2.0 * e * s * (1.0 - s) / n;
            gb += r;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += r * xi as f64;
            }
        }
        (f / n, gw, gb)
    }

    fn penalty(&self, w: &[f64], b: f64) -> f64 {
        self.lambda * (w.iter().map(|v| v.abs()).sum::<f64>() + b.abs())
    }
}

/// Fits a probe on the training split by proximal gradient descent with
/// backtracking, minimising
/// `mean_j (sigma(w . x_j + b) - y_j)^2 + lambda * (|w|_1 + |b|)`.
///
/// Every accepted step satisfies the sufficient-decrease condition, so the
/// objective never increases. Stops after [`MAX_PROBE_STEPS`] steps or when
/// a step improves the objective by less than [`PROBE_TOLERANCE`].
pub fn train_probe(ds: &ActivationDataset, lambda: f64) -> Result<Probe, ProbeError> {
    let rows = ds.train_indices();
    let positives = rows.iter().filter(|&&i| ds.labels[i]).count();
    if positives == 0 || positives == rows.len() {
        return Err(ProbeError::DegenerateLabels {
            concept: ds.concept,
            layer: ds.layer,
        });
    }
    let prob = Problem { ds, rows, lambda };
    let mut w = vec![0.0; ds.dim];
    let mut b = 0.0;
    let mut step = 1.0f64;
    let mut objective = prob.smooth(&w, b) + prob.penalty(&w, b);
    let mut history = vec![objective];

    for _ in 0..MAX_PROBE_STEPS {
        let (f0, gw, gb) = prob.smooth_grad(&w, b);
        let (nw, nb, f1) = loop {
            let nw: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(&wi, &gi)| soft_threshold(wi - step * gi, step * lambda))
                .collect();
            let nb = soft_threshold(b - step * gb, step * lambda);
            let f1 = prob.smooth(&nw, nb);
            let mut lin = (nb - b) * gb;
            let mut sq = (nb - b) * (nb - b);
            for ((&a, &c), &g) in nw.iter().zip(&w).zip(&gw) {
                lin += (a - c) * g;
                sq += (a - c) * (a - c);
            }
            if f1 <= f0 + lin + sq / (2.0 * step) || step < 1e-12 {
                break (nw, nb, f1);
            }
            step *= 0.5;
        };
        let next = f1 + prob.penalty(&nw, nb);
        if next > objective {
            // Only reachable through rounding at a stationary point.
            break;
        }
        let improvement = objective - next;
        w = nw;
        b = nb;
        objective = next;
        history.push(objective);
        if improvement < PROBE_TOLERANCE {
            break;
        }
        step *= 1.5;
    }
    Ok(Probe {
        w,
        b,
        lambda,
        loss_history: history,
    })
}

/// `2 * correct / total - 1`.
pub fn corrected_from_counts(correct: usize, total: usize) -> f64 {
    2.0 * correct as f64 / total as f64 - 1.0
}

/// Accuracy on the validation split, corrected so that guessing scores 0.
pub fn corrected_accuracy(probe: &Probe, ds: &ActivationDataset) -> Result<f64, ProbeError> {
    let val = ds.validation_indices();
    if val.is_empty() {
        return Err(ProbeError::EmptyValidation);
    }
    let correct = val
        .iter()
        .filter(|&&i| probe.predict(ds.row(i)) == ds.labels[i])
        .count();
    Ok(corrected_from_counts(correct, val.len()))
}
