//! Linear concept probes over residual-block activations.

mod concepts;
mod probe;

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use concepts::{concept_label, Concept, ConceptSpec, UnknownConcept};
pub use probe::{
    corrected_accuracy, corrected_from_counts, is_validation, train_probe, ActivationDataset, Probe,
    MAX_PROBE_STEPS, PROBE_TOLERANCE, VALIDATION_PERCENT,
};

use crate::chess::Position;
use crate::encoding::encode_position;
use crate::network::{NetworkError, PolicyValueNet};
use crate::par::{self, Exec};

/// The regularisation weights tried for every probe cell.
pub const DEFAULT_LAMBDAS: [f64; 2] = [0.01, 0.001];
/// Cells whose rarer class falls below this fraction are refused.
pub const MIN_MINORITY_FRACTION: f64 = 0.05;
const EXTRACT_BATCH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("layer {layer} out of range for a {blocks}-block network")]
    LayerOutOfRange { layer: usize, blocks: usize },
    #[error("training split for {concept} at layer {layer} has a single label")]
    DegenerateLabels { concept: Concept, layer: usize },
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("inconsistent dataset: {0}")]
    Shape(String),
    #[error("sweep needs at least one {0}")]
    EmptyAxis(&'static str),
    #[error("report output: {0}")]
    Output(String),
}

fn check_layer(net: &PolicyValueNet, layer: usize) -> Result<(), ProbeError> {
    let blocks = net.config.residual_blocks;
    if layer >= blocks {
        return Err(ProbeError::LayerOutOfRange { layer, blocks });
    }
    Ok(())
}

/// Flattened activations of several blocks: one `[n * 64 * filters]` buffer
/// per requested layer, positions in input order.
pub fn extract_layers(
    net: &PolicyValueNet,
    layers: &[usize],
    positions: &[Position],
) -> Result<Vec<Vec<f32>>, ProbeError> {
    for &l in layers {
        check_layer(net, l)?;
    }
    let depth = layers.iter().max().map_or(0, |&l| l + 1);
    let dim = 64 * net.config.filters;
    let mut out: Vec<Vec<f32>> = layers
        .iter()
        .map(|_| Vec::with_capacity(positions.len() * dim))
        .collect();
    for chunk in positions.chunks(EXTRACT_BATCH) {
        let stacks = chunk
            .iter()
            .map(|p| encode_position(p, &net.config.encoding))
            .collect::<Result<Vec<_>, _>>()
            .map_err(NetworkError::from)?;
        let refs: Vec<_> = stacks.iter().collect();
        let taps = net.taps_batch(&refs, depth)?;
        for (buf, &l) in out.iter_mut().zip(layers) {
            buf.extend_from_slice(taps[l].data());
        }
    }
    Ok(out)
}

/// One flattened activation vector (`8 * 8 * filters`) per position.
pub fn extract_activations(
    net: &PolicyValueNet,
    layer: usize,
    positions: &[Position],
) -> Result<Vec<Vec<f32>>, ProbeError> {
    let flat = extract_layers(net, &[layer], positions)?.pop().unwrap();
    let dim = 64 * net.config.filters;
    Ok(flat.chunks(dim).map(<[f32]>::to_vec).collect())
}

/// Labels every position with `spec`.
pub fn label_positions(spec: &ConceptSpec, positions: &[Position], exec: Exec) -> Vec<bool> {
    par::map(exec, positions, |p| spec.label(p))
}

/// One trained probe: a (checkpoint, layer, concept, lambda) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub checkpoint: String,
    pub layer: usize,
    pub concept: Concept,
    pub lambda: f64,
    pub corrected_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub positive_rate: f64,
}

/// The best row of a (checkpoint, layer, concept) cell over all lambdas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub checkpoint: String,
    pub layer: usize,
    pub concept: Concept,
    pub best_lambda: f64,
    pub corrected_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub positive_rate: f64,
}

/// A cell that was not trained, and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub checkpoint: String,
    pub layer: usize,
    pub concept: Concept,
    pub positive_rate: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambdas: Vec<f64>,
    pub rows: Vec<ProbeRow>,
    pub cells: Vec<ProbeCell>,
    pub skipped: Vec<SkippedCell>,
}

/// Layer-vs-accuracy series for one concept and checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub concept: Concept,
    pub checkpoint: String,
    pub layers: Vec<usize>,
    pub corrected_accuracy: Vec<f64>,
}

#[derive(Serialize)]
struct PlotJson<'a> {
    lambdas: &'a [f64],
    curves: Vec<Curve>,
    cells: &'a [ProbeCell],
    skipped: &'a [SkippedCell],
}

impl ProbeReport {
    pub fn cell(&self, checkpoint: &str, layer: usize, concept: Concept) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.checkpoint == checkpoint && c.layer == layer && c.concept == concept)
    }

    /// Best corrected accuracy over layers for one checkpoint and concept.
    pub fn max_over_layers(&self, checkpoint: &str, concept: Concept) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.checkpoint == checkpoint && c.concept == concept)
            .map(|c| c.corrected_accuracy)
            .reduce(f64::max)
    }

    /// One curve per (concept, checkpoint), layers ascending.
    pub fn curves(&self) -> Vec<Curve> {
        let mut keys: Vec<(Concept, String)> = self
            .cells
            .iter()
            .map(|c| (c.concept, c.checkpoint.clone()))
            .collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(concept, checkpoint)| {
                let mut pts: Vec<(usize, f64)> = self
                    .cells
                    .iter()
                    .filter(|c| c.concept == concept && c.checkpoint == checkpoint)
                    .map(|c| (c.layer, c.corrected_accuracy))
                    .collect();
                pts.sort_by_key(|p| p.0);
                Curve {
                    concept,
                    checkpoint,
                    layers: pts.iter().map(|p| p.0).collect(),
                    corrected_accuracy: pts.iter().map(|p| p.1).collect(),
                }
            })
            .collect()
    }

    /// CSV with one line per trained probe.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ProbeError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| ProbeError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| ProbeError::Output(e.to_string()))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ProbeRow>, ProbeError> {
        csv::Reader::from_reader(input)
            .deserialize()
            .collect::<Result<Vec<ProbeRow>, _>>()
            .map_err(|e| ProbeError::Output(e.to_string()))
    }

    /// Plot-ready JSON: curves over layers plus the full grid.
    pub fn to_plot_json(&self) -> String {
        serde_json::to_string_pretty(&PlotJson {
            lambdas: &self.lambdas,
            curves: self.curves(),
            cells: &self.cells,
            skipped: &self.skipped,
        })
        .expect("report serializes")
    }
}

/// Axes of a sweep besides the checkpoints.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub concepts: Vec<ConceptSpec>,
    pub lambdas: Vec<f64>,
    pub exec: Exec,
}

impl SweepConfig {
    pub fn new(layers: Vec<usize>, concepts: Vec<ConceptSpec>) -> SweepConfig {
        SweepConfig {
            layers,
            concepts,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            exec: Exec::default(),
        }
    }
}

enum CellOutcome {
    Trained(Vec<ProbeRow>),
    Skipped(SkippedCell),
}

/// Trains one probe per (checkpoint, layer, concept, lambda) and keeps the
/// best lambda per cell. Cells run independently; their results do not
/// depend on scheduling.
pub fn probe_sweep(
    checkpoints: &[(String, &PolicyValueNet)],
    positions: &[Position],
    cfg: &SweepConfig,
) -> Result<ProbeReport, ProbeError> {
    if checkpoints.is_empty() {
        return Err(ProbeError::EmptyAxis("checkpoint"));
    }
    if cfg.layers.is_empty() {
        return Err(ProbeError::EmptyAxis("layer"));
    }
    if cfg.concepts.is_empty() {
        return Err(ProbeError::EmptyAxis("concept"));
    }
    if cfg.lambdas.is_empty() {
        return Err(ProbeError::EmptyAxis("lambda"));
    }
    if positions.is_empty() {
        return Err(ProbeError::EmptyAxis("position"));
    }
    let hashes: Vec<u64> = positions.iter().map(Position::stable_hash).collect();
    let labels: Vec<Vec<bool>> = cfg
        .concepts
        .iter()
        .map(|c| label_positions(c, positions, cfg.exec))
        .collect();

    let mut report = ProbeReport {
        lambdas: cfg.lambdas.clone(),
        ..Default::default()
    };
    for (name, net) in checkpoints {
        let acts = extract_layers(net, &cfg.layers, positions)?;
        let dim = 64 * net.config.filters;
        let jobs: Vec<(usize, usize)> = (0..cfg.layers.len())
            .flat_map(|li| (0..cfg.concepts.len()).map(move |ci| (li, ci)))
            .collect();
        let outcomes = par::map(cfg.exec, &jobs, |&(li, ci)| {
            let layer = cfg.layers[li];
            let concept = cfg.concepts[ci].concept;
            let ds = ActivationDataset::new(layer, concept, dim, acts[li].clone(), labels[ci].clone(), &hashes)?;
            let rate = ds.positive_rate();
            if ds.minority_fraction() < MIN_MINORITY_FRACTION {
                return Ok(CellOutcome::Skipped(SkippedCell {
                    checkpoint: name.clone(),
                    layer,
                    concept,
                    positive_rate: rate,
                    reason: format!(
                        "minority class {:.3} below {MIN_MINORITY_FRACTION}",
                        ds.minority_fraction()
                    ),
                }));
            }
            let n_train = ds.train_indices().len();
            let n_val = ds.validation_indices().len();
            let mut rows = Vec::with_capacity(cfg.lambdas.len());
            for &lambda in &cfg.lambdas {
                let probe = match train_probe(&ds, lambda) {
                    Ok(p) => p,
                    Err(ProbeError::DegenerateLabels { .. }) => {
                        return Ok(CellOutcome::Skipped(SkippedCell {
                            checkpoint: name.clone(),
                            layer,
                            concept,
                            positive_rate: rate,
                            reason: "training split has a single label".into(),
                        }))
                    }
                    Err(e) => return Err(e),
                };
                rows.push(ProbeRow {
                    checkpoint: name.clone(),
                    layer,
                    concept,
                    lambda,
                    corrected_accuracy: corrected_accuracy(&probe, &ds)?,
                    n_train,
                    n_val,
                    positive_rate: rate,
                });
            }
            Ok(CellOutcome::Trained(rows))
        });
        for outcome in outcomes {
            match outcome? {
                CellOutcome::Trained(rows) => {
                    let best = rows
                        .iter()
                        .reduce(|a, b| if b.corrected_accuracy > a.corrected_accuracy { b } else { a })
                        .expect("at least one lambda");
                    report.cells.push(ProbeCell {
                        checkpoint: best.checkpoint.clone(),
                        layer: best.layer,
                        concept: best.concept,
                        best_lambda: best.lambda,
                        corrected_accuracy: best.corrected_accuracy,
                        n_train: best.n_train,
                        n_val: best.n_val,
                        positive_rate: best.positive_rate,
                    });
                    report.rows.extend(rows);
                }
                CellOutcome::Skipped(s) => {
                    warn!(
                        "skipping {} at layer {} of {}: {}",
                        s.concept, s.layer, s.checkpoint, s.reason
                    );
                    report.skipped.push(s);
                }
            }
        }
    }
    Ok(report)
}
