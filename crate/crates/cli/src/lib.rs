//! The `iimap` command line: one subcommand per pipeline stage plus the
//! HTTP explanation service.

pub mod config_args;
pub mod plot;
pub mod run;
pub mod server;

use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use iimap::chess::{Position, Square, START_FEN};
use iimap::encoding::{encode, EncodingConfig};
use iimap::explain::{counterfactual_pair, DEFAULT_TOP_K};
use iimap::network::checkpoint::{list_checkpoints, Checkpoint};
use iimap::network::{MaskerNet, PolicyValueNet};
use iimap::par::Exec;
use iimap::probes::{probe_sweep, Concept, ConceptSpec, SweepConfig};
use iimap::service::{ExplainRequest, ExplainResponse, ExplainService, LoadedModel, Snapshot};
use iimap::training::{
    build_distill_dataset, build_from_games, eval_puzzles, export_teacher_policies, generate_corpus, generate_games,
    import_teacher_policies, lambda_sweep, load_puzzles, resume_distill, train_distill, DistillDataset,
    HeuristicTeacher, TrainRunConfig,
};
use log::{info, warn};

pub use config_args::ConfigArgs;
use run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "iimap", version, about = "Chess networks with trainable input masks, concept probes and explanations")]
pub struct Cli {
    /// Output directory; defaults to runs/<command>-<unix time>.
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Run all batch work on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a position (optionally after a move sequence) into input planes.
    Encode {
        #[arg(long, default_value = START_FEN)]
        fen: String,
        /// Space-separated UCI moves played from --fen before encoding.
        #[arg(long, default_value = "")]
        moves: String,
        #[arg(long, default_value_t = 1)]
        history_length: usize,
    },
    /// Label positions with the heuristic teacher and write a JSON-lines policy file.
    Teach {
        #[command(flatten)]
        config: ConfigArgs,
        /// Label the FENs in this file (one per line) instead of self-play games.
        #[arg(long, value_name = "FILE")]
        fens: Option<PathBuf>,
    },
    /// Distil the teacher into a network and masker.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher policy file to train on; self-play corpus when absent.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Train concept probes on checkpoint activations.
    Probe {
        /// A checkpoint file or a directory of checkpoints.
        #[arg(long, value_name = "PATH")]
        checkpoints: PathBuf,
        /// `all` or a comma-separated list of concept names.
        #[arg(long, default_value = "all")]
        concepts: String,
        /// `all` or a comma-separated list of block indices.
        #[arg(long, default_value = "all")]
        layers: String,
        /// Probe positions from this teacher policy file; self-play otherwise.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        games: usize,
        #[arg(long, default_value_t = 11)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 5000)]
        max_positions: usize,
        /// Seed of the random control concept.
        #[arg(long, default_value_t = 0)]
        random_seed: u64,
    },
    /// Explain one position: top moves, P and the per-square map.
    Explain {
        #[arg(long, default_value = START_FEN)]
        fen: String,
        /// Checkpoint file or directory (latest is used); untrained model when absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        /// Predict on a mask sampled from P.
        #[arg(long)]
        sample_mask: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also explain a variant with one piece moved, as FROM:TO (e.g. g8:c6).
        #[arg(long, value_name = "FROM:TO")]
        relocate: Option<String>,
    },
    /// Score a puzzle CSV (id,fen,best_move) by top-1 move.
    Puzzles {
        #[arg(long, value_name = "CSV")]
        file: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// One training run per lambda; density and agreement table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.0003,0.001,0.003,0.01")]
        lambdas: Vec<f32>,
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
    },
    /// Serve explanations over HTTP.
    Serve {
        /// Directory of checkpoints.
        #[arg(long, value_name = "DIR")]
        checkpoints: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        /// Poll the directory and hot-swap models when it changes; 0 disables.
        #[arg(long, default_value_t = 5)]
        watch_secs: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Encode { .. } => "encode",
            Command::Teach { .. } => "teach",
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::Explain { .. } => "explain",
            Command::Puzzles { .. } => "puzzles",
            Command::Sweep { .. } => "sweep",
            Command::Serve { .. } => "serve",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    if let Command::Serve {
        checkpoints,
        addr,
        top_k,
        watch_secs,
    } = &cli.command
    {
        return serve(checkpoints, *addr, *top_k, *watch_secs);
    }
    let mut rd = RunDir::create(cli.run_dir.as_deref(), cli.command.name())?;
    match cli.command {
        Command::Encode {
            fen,
            moves,
            history_length,
        } => encode_cmd(&mut rd, &fen, &moves, history_length)?,
        Command::Teach { config, fens } => teach(&mut rd, &config.resolve()?, fens.as_deref(), exec)?,
        Command::Train {
            config,
            dataset,
            resume,
        } => train(&mut rd, &config.resolve()?, dataset.as_deref(), resume.as_deref(), exec)?,
        Command::Probe {
            checkpoints,
            concepts,
            layers,
            dataset,
            games,
            corpus_seed,
            max_positions,
            random_seed,
        } => {
            let opts = ProbeOpts {
                concepts: parse_concepts(&concepts, random_seed)?,
                layers,
                dataset,
                games,
                corpus_seed,
                max_positions,
            };
            probe(&mut rd, &checkpoints, &opts, exec)?
        }
        Command::Explain {
            fen,
            checkpoint,
            top_k,
            sample_mask,
            seed,
            relocate,
        } => {
            let req = ExplainRequest {
                fen,
                checkpoint: None,
                sample_mask,
                seed,
                top_k: Some(top_k),
            };
            explain(&mut rd, &req, checkpoint.as_deref(), relocate.as_deref())?
        }
        Command::Puzzles { file, checkpoint } => puzzles(&mut rd, &file, &checkpoint, exec)?,
        Command::Sweep {
            config,
            lambdas,
            dataset,
        } => sweep(&mut rd, &config.resolve()?, &lambdas, dataset.as_deref(), exec)?,
        Command::Serve { .. } => unreachable!("handled above"),
    }
    let manifest = rd.finish()?;
    info!("wrote {}", manifest.display());
    Ok(())
}

fn encode_cmd(rd: &mut RunDir, fen: &str, moves: &str, history_length: usize) -> Result<()> {
    let mut history = vec![Position::from_fen(fen)?];
    for uci in moves.split_whitespace() {
        let next = history.last().expect("non-empty").apply_uci(uci)?;
        history.push(next);
    }
    let cfg = EncodingConfig {
        history_length,
        ..Default::default()
    };
    let planes = encode(&history, &cfg)?;
    let shape = planes.shape();
    println!("shape {}x{}x{}", shape[0], shape[1], shape[2]);
    for c in 0..planes.channels() {
        let s = planes.plane_sum(c);
        if s != 0.0 {
            println!("plane {c:3}  sum {s}");
        }
    }
    rd.write_json(
        "planes.json",
        &serde_json::json!({
            "fen": history.last().expect("non-empty").to_fen(),
            "shape": shape,
            "layout": "row-major [row][file][channel], rows in the mover's frame",
            "data": planes.data,
        }),
    )?;
    Ok(())
}

fn teacher_for(cfg: &TrainRunConfig) -> HeuristicTeacher {
    HeuristicTeacher {
        temperature: cfg.teacher_temperature,
    }
}

fn self_play_dataset(cfg: &TrainRunConfig, exec: Exec) -> Result<DistillDataset> {
    let teacher = teacher_for(cfg);
    let games = generate_games(&teacher, cfg.games, cfg.max_plies, cfg.corpus_seed, exec)?;
    let ds = build_from_games(&teacher, &games, cfg.history_length, exec)?;
    info!("{} positions from {} self-play games", ds.len(), games.len());
    Ok(ds)
}

fn load_dataset(path: &Path) -> Result<DistillDataset> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let tag = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let ds = import_teacher_policies(BufReader::new(file), &tag).with_context(|| format!("reading {}", path.display()))?;
    info!("{} positions from {}", ds.len(), path.display());
    Ok(ds)
}

fn dataset_for(cfg: &TrainRunConfig, path: Option<&Path>, exec: Exec) -> Result<DistillDataset> {
    match path {
        Some(p) => {
            if cfg.history_length > 1 {
                warn!("imported positions carry no history; earlier planes are encoded as empty");
            }
            load_dataset(p)
        }
        None => self_play_dataset(cfg, exec),
    }
}

fn teach(rd: &mut RunDir, cfg: &TrainRunConfig, fens: Option<&Path>, exec: Exec) -> Result<()> {
    let ds = match fens {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let positions = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| Position::from_fen(l.trim()).with_context(|| format!("{}:{}", path.display(), i + 1)))
                .collect::<Result<Vec<_>>>()?;
            build_distill_dataset(&teacher_for(cfg), &positions, exec)?
        }
        None => self_play_dataset(cfg, exec)?,
    };
    let mut out = Vec::new();
    export_teacher_policies(&ds, &mut out)?;
    let path = rd.write("teacher.jsonl", out)?;
    rd.write("config.toml", cfg.to_toml_string())?;
    rd.set_summary(&serde_json::json!({ "positions": ds.len(), "teacher": ds.teacher }))?;
    println!("{} positions -> {}", ds.len(), path.display());
    Ok(())
}

fn train(rd: &mut RunDir, cfg: &TrainRunConfig, dataset: Option<&Path>, resume: Option<&Path>, exec: Exec) -> Result<()> {
    let ds = dataset_for(cfg, dataset, exec)?;
    rd.write("config.toml", cfg.to_toml_string())?;
    let out = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            resume_distill(cfg, &ds, &ckpt, Some(&rd.path), exec)?
        }
        None => train_distill(cfg, &ds, Some(&rd.path), exec)?,
    };
    for p in &out.checkpoints {
        rd.record(p);
    }
    rd.record(&rd.file("train_log.csv"));
    rd.record(&rd.file("eval_log.csv"));
    let last = out.final_eval();
    rd.set_summary(&last)?;
    println!(
        "step {}: held-out agreement {:.4}, mask density {:.4}",
        last.step, last.heldout_agreement, last.heldout_density
    );
    Ok(())
}

fn sweep(rd: &mut RunDir, cfg: &TrainRunConfig, lambdas: &[f32], dataset: Option<&Path>, exec: Exec) -> Result<()> {
    let ds = dataset_for(cfg, dataset, exec)?;
    rd.write("config.toml", cfg.to_toml_string())?;
    let rows = lambda_sweep(cfg, lambdas, &ds, exec)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    rd.write("sweep.csv", w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    let chart = rd.file("sweep.svg");
    plot::sweep_chart(&rows, &chart)?;
    rd.record(&chart);
    rd.set_summary(&rows)?;
    println!("{:>10} {:>10} {:>10}", "lambda", "mean P", "agreement");
    for r in &rows {
        println!("{:>10} {:>10.4} {:>10.4}", r.lambda, r.final_density, r.heldout_agreement);
    }
    Ok(())
}

pub fn parse_concepts(list: &str, random_seed: u64) -> Result<Vec<ConceptSpec>> {
    let concepts: Vec<Concept> = if list.trim() == "all" {
        Concept::ALL.to_vec()
    } else {
        list.split(',')
            .map(|s| s.trim().parse::<Concept>())
            .collect::<Result<_, _>>()?
    };
    Ok(concepts
        .into_iter()
        .map(|c| ConceptSpec {
            seed: random_seed,
            ..ConceptSpec::new(c)
        })
        .collect())
}

fn parse_layers(list: &str, blocks: usize) -> Result<Vec<usize>> {
    if list.trim() == "all" {
        return Ok((0..blocks).collect());
    }
    list.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| anyhow!("layer {s:?}: {e}")))
        .collect()
}

struct ProbeOpts {
    concepts: Vec<ConceptSpec>,
    layers: String,
    dataset: Option<PathBuf>,
    games: usize,
    corpus_seed: u64,
    max_positions: usize,
}

fn checkpoint_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let found = list_checkpoints(path)?;
        if found.is_empty() {
            bail!("no checkpoints in {}", path.display());
        }
        Ok(found)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn probe(rd: &mut RunDir, checkpoints: &Path, opts: &ProbeOpts, exec: Exec) -> Result<()> {
    let mut nets = Vec::new();
    for path in checkpoint_paths(checkpoints)? {
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        nets.push((stem(&path), ckpt.to_models()?.0));
    }
    let mut positions: Vec<Position> = match &opts.dataset {
        Some(p) => load_dataset(p)?.records.iter().map(|r| r.position().clone()).collect(),
        None => generate_corpus(&HeuristicTeacher::default(), opts.games, 120, opts.corpus_seed, exec)?,
    };
    positions.truncate(opts.max_positions);
    let blocks = nets.iter().map(|(_, n)| n.config.residual_blocks).min().unwrap_or(0);
    let mut cfg = SweepConfig::new(parse_layers(&opts.layers, blocks)?, opts.concepts.clone());
    cfg.exec = exec;
    let named: Vec<(String, &PolicyValueNet)> = nets.iter().map(|(n, net)| (n.clone(), net)).collect();
    let report = probe_sweep(&named, &positions, &cfg)?;

    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes)?;
    rd.write("probe_report.csv", csv_bytes)?;
    rd.write("probe_plot.json", report.to_plot_json())?;
    for chart in plot::probe_curves(&report, &rd.path)? {
        rd.record(&chart);
    }
    rd.set_summary(&serde_json::json!({
        "positions": positions.len(),
        "cells": report.cells.len(),
        "skipped": report.skipped.len(),
    }))?;
    println!("{} positions, {} cells, {} skipped", positions.len(), report.cells.len(), report.skipped.len());
    for c in &report.cells {
        println!("{:<14} layer {} {:<24} {:+.3}", c.checkpoint, c.layer, c.concept.name(), c.corrected_accuracy);
    }
    for s in &report.skipped {
        println!("{:<14} layer {} {:<24} skipped: {}", s.checkpoint, s.layer, s.concept.name(), s.reason);
    }
    Ok(())
}

/// Loads a checkpoint file or directory into a snapshot.
pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    if path.is_dir() {
        return Ok(Snapshot::load_dir(path)?);
    }
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Snapshot::from_models(vec![LoadedModel::from_checkpoint(&stem(path), &ckpt)?]))
}

fn untrained_snapshot() -> Result<Snapshot> {
    let cfg = TrainRunConfig::default();
    warn!("no checkpoint given; explaining with an untrained network");
    let net = PolicyValueNet::new(cfg.model_config(), cfg.seed)?;
    let masker = MaskerNet::new(cfg.masker_config(), cfg.seed.wrapping_add(1))?;
    let ckpt = Checkpoint::from_models(&net, Some(&masker), Default::default());
    Ok(Snapshot::from_models(vec![LoadedModel::from_checkpoint("untrained", &ckpt)?]))
}

pub fn format_grid(grid: &[Vec<f32>]) -> String {
    let mut s = String::new();
    for rank in (0..8).rev() {
        s.push_str(&format!("{} ", rank + 1));
        for v in &grid[rank] {
            s.push_str(&format!("{v:6.3}"));
        }
        s.push('\n');
    }
    s.push_str("  ");
    for f in 'a'..='h' {
        s.push_str(&format!("{f:>6}"));
    }
    s.push('\n');
    s
}

fn print_explanation(r: &ExplainResponse) {
    println!("{}", r.fen);
    println!("model {} (step {})", r.model.checkpoint, r.model.step);
    print!("{}", format_grid(&r.collapsed));
    for m in &r.policy {
        println!("{:<6} {:.4}", m.uci, m.p);
    }
    if let Some(v) = r.value {
        println!("value {v:+.4}");
    }
}

fn parse_relocation(s: &str) -> Result<(Square, Square)> {
    let (a, b) = s.split_once(':').ok_or_else(|| anyhow!("expected FROM:TO, got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn explain(rd: &mut RunDir, req: &ExplainRequest, checkpoint: Option<&Path>, relocate: Option<&str>) -> Result<()> {
    let snap = match checkpoint {
        Some(p) => load_snapshot(p)?,
        None => untrained_snapshot()?,
    };
    let svc = ExplainService::new(snap);
    let resp = svc.handle_explain(req)?;
    print_explanation(&resp);
    rd.write_json("explanation.json", &resp)?;
    if let Some(spec) = relocate {
        let (from, to) = parse_relocation(spec)?;
        let snap = svc.snapshot();
        let model = &snap.models[snap.latest.as_ref().expect("snapshot has a model")];
        let pos = Position::from_fen(req.fen.trim())?;
        let report = counterfactual_pair(&model.net, &model.masker, &pos, from, to, req.top_k.unwrap_or(DEFAULT_TOP_K))?;
        println!("\nvariant {} ({from} -> {to})", report.variant.fen);
        print!("{}", format_grid(&report.variant.collapsed));
        println!("difference (variant - original)");
        print!("{}", format_grid(&report.diff));
        rd.write_json("counterfactual.json", &report)?;
    }
    rd.set_summary(&serde_json::json!({ "best_move": resp.best_move_arrow, "checkpoint": resp.model.checkpoint }))?;
    Ok(())
}

fn puzzles(rd: &mut RunDir, file: &Path, checkpoint: &Path, exec: Exec) -> Result<()> {
    let snap = load_snapshot(checkpoint)?;
    let model = &snap.models[snap.latest.as_ref().expect("snapshot has a model")];
    let f = std::fs::File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let cases = load_puzzles(f)?;
    let report = eval_puzzles(&model.net, &model.masker, &cases, exec);
    rd.write_json("puzzles.json", &report)?;
    rd.set_summary(&serde_json::json!({
        "evaluated": report.results.len(),
        "skipped": report.skipped.len(),
        "solve_rate": report.solve_rate,
    }))?;
    for r in &report.results {
        println!(
            "{:<12} best {:<6} top {:<6} p(best) {:.4} {}",
            r.id,
            r.best_move,
            r.top_move,
            r.best_move_prob,
            if r.solved { "solved" } else { "missed" }
        );
    }
    for s in &report.skipped {
        println!("{:<12} skipped: {}", s.id, s.reason);
    }
    match report.solve_rate {
        Some(rate) => println!("solve rate {rate:.4} over {} puzzles", report.results.len()),
        None => println!("solve rate undefined: no puzzles evaluated"),
    }
    Ok(())
}

fn serve(dir: &Path, addr: SocketAddr, top_k: usize, watch_secs: u64) -> Result<()> {
    let snap = Snapshot::load_dir(dir).with_context(|| format!("loading checkpoints from {}", dir.display()))?;
    let svc = Arc::new(ExplainService::new(snap).with_default_top_k(top_k));
    let watch = (watch_secs > 0).then(|| (dir.to_path_buf(), Duration::from_secs(watch_secs)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(svc, addr, watch))
}
