use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DistillDataset, DistillRecord, TrainRunConfig, TrainingError};
use crate::autodiff::{Graph, Tensor, UpdateRule};
use crate::network::checkpoint::{Checkpoint, CheckpointMeta};
use crate::network::{batch_input, distill_loss, mask_noise, MaskerNet, PolicyValueNet};
use crate::par::{self, Exec};
use crate::rng::{mix_seed, stream};

const EVAL_BATCH: usize = 64;
const HELDOUT_SEED: u64 = 0x04e1_d0a7;

/// One optimisation step as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f32,
    pub mask_density: f32,
}

/// Held-out metrics at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: u64,
    pub heldout_agreement: f64,
    pub heldout_density: f64,
}

pub struct TrainOutcome {
    pub net: PolicyValueNet,
    pub masker: MaskerNet,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> EvalLog {
        *self.evals.last().expect("a run always ends with an evaluation")
    }
}

/// Whether a record is held out from training, by hash of its position.
pub fn is_heldout(record: &DistillRecord, percent: u64) -> bool {
    mix_seed(HELDOUT_SEED, record.position().stable_hash()) % 100 < percent
}

/// (train, held-out) record indices.
pub fn split_heldout(ds: &DistillDataset, percent: u64) -> (Vec<usize>, Vec<usize>) {
    (0..ds.len()).partition(|&i| !is_heldout(&ds.records[i], percent))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.ckpt")
}

/// Agreement of the masked model's top move with the teacher's best move(s),
/// and mean keep-probability, over `records`. Mask noise for the i-th record
/// comes from stream `i` of `eval_seed`, so the result does not depend on
/// batching.
pub fn evaluate_heldout(
    net: &PolicyValueNet,
    masker: &MaskerNet,
    records: &[&DistillRecord],
    eval_seed: u64,
) -> Result<EvalLog, TrainingError> {
    if records.is_empty() {
        return Err(TrainingError::EmptyDataset("held-out split"));
    }
    let enc = &net.config.encoding;
    let mut agree = 0usize;
    let mut density = 0.0f64;
    for (chunk_no, chunk) in records.chunks(EVAL_BATCH).enumerate() {
        let stacks: Vec<_> = chunk.iter().map(|r| r.encode(enc)).collect();
        let refs: Vec<_> = stacks.iter().collect();
        let supports: Vec<Vec<u32>> = chunk.iter().map(|r| r.support.clone()).collect();
        let mut noise = Vec::with_capacity(chunk.len() * 768);
        for i in 0..chunk.len() {
            let mut rng = stream(eval_seed, (chunk_no * EVAL_BATCH + i) as u64);
            noise.extend_from_slice(mask_noise(&[768], &mut rng).data());
        }
        let mut g = Graph::new();
        let x = g.constant(batch_input(&refs)?);
        let p = masker.forward(&mut g, x)?;
        let nz = g.constant(Tensor::new(&[chunk.len(), 8, 8, 12], noise));
        let d = g.sub(p, nz)?;
        let bin = g.heaviside_ste(d);
        let masked = g.channel_gate(x, bin)?;
        let nodes = net.forward(&mut g, masked, &supports)?;
        let policy = g.value(nodes.policy).data();
        density += g.value(p).data().iter().map(|&v| v as f64).sum::<f64>();
        for (b, r) in chunk.iter().enumerate() {
            let row = &policy[b * crate::network::POLICY_SIZE..(b + 1) * crate::network::POLICY_SIZE];
            let top = r
                .support
                .iter()
                .copied()
                .fold(None::<(u32, f32)>, |best, i| match best {
                    Some((_, bp)) if bp >= row[i as usize] => best,
                    _ => Some((i, row[i as usize])),
                })
                .expect("non-empty support")
                .0;
            if r.teacher_argmax().contains(&top) {
                agree += 1;
            }
        }
    }
    Ok(EvalLog {
        step: net.params.step,
        heldout_agreement: agree as f64 / records.len() as f64,
        heldout_density: density / (records.len() * 768) as f64,
    })
}

struct Run<'a> {
    cfg: &'a TrainRunConfig,
    ds: &'a DistillDataset,
    train: Vec<usize>,
    heldout: Vec<usize>,
    exec: Exec,
}

struct ChunkResult {
    graph: Graph,
    loss: f64,
    density: f64,
}

impl Run<'_> {
    fn chunk(
        &self,
        net: &PolicyValueNet,
        masker: &MaskerNet,
        records: &[&DistillRecord],
        noise: &[f32],
        batch: usize,
    ) -> Result<ChunkResult, TrainingError> {
        let cfg = self.cfg;
        let n = records.len();
        let enc = &net.config.encoding;
        let stacks: Vec<_> = records.iter().map(|r| r.encode(enc)).collect();
        let refs: Vec<_> = stacks.iter().collect();
        let supports: Vec<Vec<u32>> = records.iter().map(|r| r.support.clone()).collect();
        let teacher: Vec<Vec<(u32, f32)>> = records.iter().map(|r| r.policy.clone()).collect();

        let mut g = Graph::with_exec(self.exec);
        let x = g.constant(batch_input(&refs)?);
        let p = masker.forward(&mut g, x)?;
        let nz = g.constant(Tensor::new(&[n, 8, 8, 12], noise.to_vec()));
        let d = g.sub(p, nz)?;
        let bin = g.heaviside_ste(d);
        let masked = g.channel_gate(x, bin)?;
        let nodes = net.forward(&mut g, masked, &supports)?;
        let mut loss = distill_loss(&mut g, nodes.policy, &teacher, p, cfg.lambda_mask)?;

        if let Some(v) = nodes.value {
            if records.iter().any(|r| r.value.is_some()) {
                let target: Vec<f32> = records.iter().map(|r| r.value.unwrap_or(0.0)).collect();
                let weight: Vec<f32> = records.iter().map(|r| r.value.map_or(0.0, |_| 1.0)).collect();
                let t = g.constant(Tensor::new(&[n, 1], target));
                let w = g.constant(Tensor::new(&[n, 1], weight));
                let diff = g.sub(v, t)?;
                let sq = g.mul(diff, diff)?;
                let sq = g.mul(sq, w)?;
                let s = g.sum(sq);
                let term = g.scale(s, cfg.value_weight / n as f32);
                loss = g.add(loss, term)?;
            }
        }
        if let Some(z) = nodes.aux_in_check {
            let labels: Vec<f32> = records.iter().map(|r| r.position().is_check() as u8 as f32).collect();
            let y = g.constant(Tensor::new(&[n, 1], labels));
            let s = g.sigmoid(z);
            let diff = g.sub(s, y)?;
            let sq = g.mul(diff, diff)?;
            let m = g.mean(sq);
            let term = g.scale(m, cfg.aux_weight);
            loss = g.add(loss, term)?;
        }

        let scaled = g.scale(loss, n as f32 / batch as f32);
        g.backward(scaled)?;
        let loss = g.value(scaled).item() as f64;
        let density = g.value(p).data().iter().map(|&v| v as f64).sum::<f64>();
        Ok(ChunkResult { graph: g, loss, density })
    }

    fn step(&self, net: &mut PolicyValueNet, masker: &mut MaskerNet, step: u64) -> Result<StepLog, TrainingError> {
        let cfg = self.cfg;
        let mut rng = stream(cfg.data_seed, step);
        let b = cfg.batch_size.min(self.train.len());
        let picks: Vec<usize> = sample(&mut rng, self.train.len(), b)
            .into_iter()
            .map(|i| self.train[i])
            .collect();
        let noise = mask_noise(&[b, 8, 8, 12], &mut rng);
        let records: Vec<&DistillRecord> = picks.iter().map(|&i| &self.ds.records[i]).collect();

        let chunks = cfg.grad_chunks.min(b);
        let per = b.div_ceil(chunks);
        let bounds: Vec<(usize, usize)> = (0..b).step_by(per).map(|s| (s, (s + per).min(b))).collect();
        let (n_ref, m_ref) = (&*net, &*masker);
        let results = par::map(self.exec, &bounds, |&(s, e)| {
            self.chunk(n_ref, m_ref, &records[s..e], &noise.data()[s * 768..e * 768], b)
        });
        let mut loss = 0.0f64;
        let mut density = 0.0f64;
        for r in results {
            let r = r?;
            loss += r.loss;
            density += r.density;
            net.params.accumulate_grads(&r.graph);
            masker.params.accumulate_grads(&r.graph);
        }
        if !loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss { step: step + 1 });
        }
        net.params.optimizer_step(UpdateRule::adam(cfg.lr_net))?;
        masker.params.optimizer_step(UpdateRule::adam(cfg.lr_masker))?;
        Ok(StepLog {
            step: step + 1,
            loss: loss as f32,
            mask_density: (density / (b * 768) as f64) as f32,
        })
    }

    fn evaluate(&self, net: &PolicyValueNet, masker: &MaskerNet, step: u64) -> Result<EvalLog, TrainingError> {
        let records: Vec<&DistillRecord> = self.heldout.iter().map(|&i| &self.ds.records[i]).collect();
        let mut e = evaluate_heldout(net, masker, &records, self.cfg.eval_seed)?;
        e.step = step;
        Ok(e)
    }
}

fn meta(cfg: &TrainRunConfig, ds: &DistillDataset, step: u64, eval: &EvalLog) -> CheckpointMeta {
    CheckpointMeta {
        step,
        lambda_mask: cfg.lambda_mask,
        seed: cfg.seed,
        teacher: ds.teacher.clone(),
        metrics: [
            ("heldout_agreement".to_string(), eval.heldout_agreement),
            ("heldout_density".to_string(), eval.heldout_density),
        ]
        .into(),
    }
}

struct Logs {
    steps: Option<csv::Writer<std::fs::File>>,
    evals: Option<csv::Writer<std::fs::File>>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Logs, TrainingError> {
        let Some(dir) = dir else {
            return Ok(Logs { steps: None, evals: None });
        };
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<csv::Writer<std::fs::File>, TrainingError> {
            let path = dir.join(name);
            let exists = path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(path)?;
            Ok(csv::WriterBuilder::new().has_headers(!(append && exists)).from_writer(file))
        };
        Ok(Logs {
            steps: Some(open("train_log.csv")?),
            evals: Some(open("eval_log.csv")?),
        })
    }

    fn step(&mut self, s: &StepLog) -> Result<(), TrainingError> {
        if let Some(w) = &mut self.steps {
            w.serialize(s).map_err(|e| TrainingError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn eval(&mut self, e: &EvalLog) -> Result<(), TrainingError> {
        if let Some(w) = &mut self.evals {
            w.serialize(e).map_err(|e| TrainingError::Config(e.to_string()))?;
            w.flush()?;
        }
        if let Some(w) = &mut self.steps {
            w.flush()?;
        }
        Ok(())
    }
}

/// Trains a fresh network and masker on `ds`.
///
/// With `out_dir`, writes `ckpt-NNNNNN.ckpt` at step 0, every
/// `checkpoint_every` steps and at the end, plus `train_log.csv` and
/// `eval_log.csv`. A non-finite loss or gradient aborts the run and leaves
/// earlier checkpoints in place.
pub fn train_distill(
    cfg: &TrainRunConfig,
    ds: &DistillDataset,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    let net = PolicyValueNet::new(cfg.model_config(), cfg.seed)?;
    let masker = MaskerNet::new(cfg.masker_config(), mix_seed(cfg.seed, 1))?;
    run(cfg, ds, net, masker, out_dir, exec)
}

/// Continues a run from a checkpoint written by [`train_distill`] with the
/// same config and dataset.
pub fn resume_distill(
    cfg: &TrainRunConfig,
    ds: &DistillDataset,
    ckpt: &Checkpoint,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    if ckpt.model != cfg.model_config() {
        return Err(TrainingError::Config("checkpoint model config differs from the run config".into()));
    }
    let (net, masker) = ckpt.to_models()?;
    let masker = masker.ok_or_else(|| TrainingError::Config("checkpoint has no masker".into()))?;
    run(cfg, ds, net, masker, out_dir, exec)
}

fn run(
    cfg: &TrainRunConfig,
    ds: &DistillDataset,
    mut net: PolicyValueNet,
    mut masker: MaskerNet,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome, TrainingError> {
    if ds.is_empty() {
        return Err(TrainingError::EmptyDataset("distillation dataset"));
    }
    let (train, heldout) = split_heldout(ds, cfg.heldout_percent);
    if train.is_empty() || heldout.is_empty() {
        return Err(TrainingError::EmptyDataset("train or held-out split"));
    }
    let run = Run { cfg, ds, train, heldout, exec };
    let start = net.params.step;
    let mut logs = Logs::open(out_dir, start > 0)?;
    let mut outcome_steps = Vec::new();
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();

    let mut save = |net: &PolicyValueNet, masker: &MaskerNet, step: u64, logs: &mut Logs| -> Result<EvalLog, TrainingError> {
        let e = run.evaluate(net, masker, step)?;
        logs.eval(&e)?;
        info!(
            "step {step}: held-out agreement {:.4}, density {:.4}",
            e.heldout_agreement, e.heldout_density
        );
        if let Some(dir) = out_dir {
            let path = dir.join(checkpoint_name(step));
            Checkpoint::from_models(net, Some(masker), meta(cfg, ds, step, &e)).save(&path)?;
            checkpoints.push(path);
        }
        Ok(e)
    };

    if start == 0 {
        evals.push(save(&net, &masker, 0, &mut logs)?);
    }
    for step in start..cfg.steps {
        let log = run.step(&mut net, &mut masker, step)?;
        logs.step(&log)?;
        outcome_steps.push(log);
        let done = log.step;
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.steps {
            evals.push(save(&net, &masker, done, &mut logs)?);
        }
    }
    if evals.is_empty() {
        evals.push(save(&net, &masker, start, &mut logs)?);
    }
    Ok(TrainOutcome {
        net,
        masker,
        steps: outcome_steps,
        evals,
        checkpoints,
    })
}

/// One row of a lambda sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f32,
    pub final_density: f64,
    pub heldout_agreement: f64,
}

/// One full run per lambda with shared seeds; rows sorted by lambda. Final
/// density and agreement are the held-out metrics after the last step.
pub fn lambda_sweep(
    base: &TrainRunConfig,
    lambdas: &[f32],
    ds: &DistillDataset,
    exec: Exec,
) -> Result<Vec<LambdaRow>, TrainingError> {
    if lambdas.len() < 2 {
        return Err(TrainingError::Config("a sweep needs at least two lambda values".into()));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f32::total_cmp);
    par::map(exec, &sorted, |&lambda| {
        let cfg = TrainRunConfig {
            lambda_mask: lambda,
            ..base.clone()
        };
        let out = train_distill(&cfg, ds, None, Exec::Sequential)?;
        let e = out.final_eval();
        Ok(LambdaRow {
            lambda,
            final_density: e.heldout_density,
            heldout_agreement: e.heldout_agreement,
        })
    })
    .into_iter()
    .collect()
}
