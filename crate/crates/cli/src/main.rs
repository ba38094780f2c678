mod splits;

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use mimask_core::checkpoint::{load_estimator, load_mdm, read_manifest, save_estimator, save_mdm, BACKBONE_HASH_KEY};
use mimask_core::config::{MiDataConfig, RunConfig};
use mimask_core::estimator::{
    build_mi_dataset, load_mi_dataset, save_mi_dataset, split_by_group, train_estimator, MiDatasetMeta,
    DATASET_FORMAT_VERSION,
};
use mimask_core::eval::{decode_all, export_mi_map, run_benchmark, BenchmarkOptions};
use mimask_core::mdm::{train_mdm, DenoisingModel, LossPoint};
use mimask_core::mi::ground_truth_mi;
use mimask_core::sampler::{CommitRule, DecodeTrace, SamplerConfig, Strategy};
use mimask_core::sudoku::{format_puzzle_line, generate_puzzles, load_puzzles, write_puzzles};
use mimask_core::{Error, Mdm, MiEstimator, SequenceState, Token};

use splits::{load_data, manifest_path, SplitManifest};

#[derive(Parser)]
#[command(
    name = "mimask",
    version,
    about = "MI-guided parallel decoding for masked diffusion on Sudoku"
)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a puzzle file and its train/val/test split manifest.
    GenData(GenDataArgs),
    /// Train the masked diffusion backbone.
    TrainMdm(TrainMdmArgs),
    /// Label noisy contexts with oracle MI for estimator training.
    BuildMiData(BuildMiDataArgs),
    /// Fit the MI estimator head on a labelled dataset.
    TrainEstimator(TrainEstimatorArgs),
    /// Decode puzzles with one sampler.
    Sample(SampleArgs),
    /// Run a sampler suite and report passes and accuracy.
    Benchmark(BenchmarkArgs),
    /// Write oracle (and optionally estimated) MI maps for one board state.
    ExportMiMap(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2)]
    box_size: usize,
    #[arg(long)]
    count: usize,
    /// Hole count per puzzle, `N` or an inclusive range `A-B`.
    #[arg(long, value_parser = parse_holes)]
    holes: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    /// Puzzle file whose clue sets must not be regenerated.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainMdmArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Checkpoint to continue from; the step counter carries over.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildMiDataArgs {
    #[arg(long)]
    mdm: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Run config whose `[mi_data]` section supplies defaults for the
    /// flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noisy contexts drawn per puzzle.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEstimatorArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mi_data: PathBuf,
    /// Backbone the head will run on; its hash must match the dataset's.
    #[arg(long)]
    mdm: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    mdm: PathBuf,
    #[arg(long)]
    estimator: Option<PathBuf>,
    #[arg(long)]
    puzzles: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "sequential")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value = "argmax")]
    commit: CommitRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    suite_config: PathBuf,
    /// JSON report; the text table goes next to it with a .txt extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    mdm: PathBuf,
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Puzzle file; `--index` picks the line.
    #[arg(long)]
    puzzle: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Extra digits placed before export, e.g. `3=2,7=4` (cell=digit).
    #[arg(long, default_value = "")]
    cell_assignments: String,
    /// Output directory for oracle.csv and estimator.csv with sidecars.
    #[arg(long)]
    out: PathBuf,
}

fn parse_holes(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((num(a)?, num(b)?)),
        None => num(s).map(|n| (n, n)),
    }
}

fn parse_assignments(s: &str) -> Result<Vec<(usize, u8)>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let parsed = t
                .split_once('=')
                .and_then(|(c, d)| Some((c.trim().parse().ok()?, d.trim().parse().ok()?)));
            parsed.ok_or_else(|| Error::Usage(format!("bad cell assignment {t:?}; expected cell=digit")).into())
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::Json)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    info!("resolved config from {}:\n{}", path.display(), cfg.to_toml_string()?);
    Ok(cfg)
}

fn load_head(dir: &Path, mdm_hash: &str) -> Result<MiEstimator> {
    let (head, manifest) = load_estimator(dir).with_context(|| format!("loading estimator {}", dir.display()))?;
    match manifest.extra.get(BACKBONE_HASH_KEY) {
        Some(h) if h == mdm_hash => {}
        other => warn!("estimator was trained on backbone {other:?}, running on {mdm_hash}"),
    }
    Ok(head)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let exclude: HashSet<_> = match &a.exclude {
        Some(p) => load_puzzles(p)?.into_iter().collect(),
        None => HashSet::new(),
    };
    let puzzles = generate_puzzles(a.box_size, a.count, a.holes.0..=a.holes.1, a.seed, &exclude)?;
    let splits = SplitManifest::assign(&puzzles, a.val_frac, a.test_frac, a.seed)?;
    ensure_parent(&a.out)?;
    let header = format!(
        "box_size={} count={} holes={}-{} seed={}",
        a.box_size, a.count, a.holes.0, a.holes.1, a.seed
    );
    write_puzzles(BufWriter::new(File::create(&a.out)?), &header, &puzzles)?;
    write_json(&manifest_path(&a.out), &splits)?;
    info!(
        "wrote {} puzzles to {} (train {}, val {}, test {})",
        puzzles.len(),
        a.out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

const LOSS_CSV: &str = "loss.csv";

fn train_mdm_cmd(a: &TrainMdmArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let data = load_data(&a.data, a.split.as_deref())?;
    let (mut model, mut lineage) = match &a.resume {
        Some(dir) => {
            let (m, manifest) = load_mdm(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if m.config() != &cfg.model {
                return Err(Error::Config("model section differs from the checkpoint being resumed".into()).into());
            }
            info!("resuming at step {}", manifest.step);
            (m, manifest.seed_lineage)
        }
        None => (Mdm::new(cfg.model.clone())?, vec![cfg.model.seed]),
    };
    lineage.push(cfg.train.seed);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml_string()?)?;

    // The loss curve continues the resumed run's file when there is one.
    let csv_path = a.out.join(LOSS_CSV);
    if let Some(dir) = &a.resume {
        let src = dir.join(LOSS_CSV);
        if src.exists() && src != csv_path {
            fs::copy(&src, &csv_path)?;
        }
    }
    let fresh = !csv_path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&csv_path)?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        csv.write_record(["step", "loss"])?;
    }

    info!("training on {} puzzles", data.len());
    let start = Instant::now();
    let mut csv_err = None;
    let mut window = Vec::new();
    train_mdm(&mut model, &data, &cfg.train, |p: LossPoint| {
        if let Err(e) = csv.serialize((p.step, p.loss)) {
            csv_err.get_or_insert(e);
        }
        window.push(p.loss);
        if window.len() == 100 {
            info!("step {} mean loss {:.4}", p.step, window.iter().sum::<f64>() / 100.0);
            window.clear();
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    csv.flush()?;
    let manifest = save_mdm(&a.out, &model, &lineage)?;
    info!(
        "saved {} at step {} (hash {}) after {:.1}s",
        a.out.display(),
        manifest.step,
        manifest.content_hash,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn build_mi_data_cmd(a: &BuildMiDataArgs) -> Result<()> {
    let (model, manifest) = load_mdm(&a.mdm).with_context(|| format!("loading {}", a.mdm.display()))?;
    let base = match &a.config {
        Some(p) => load_config(p)?.mi_data,
        None => MiDataConfig::default(),
    };
    let mi = MiDataConfig {
        samples_per_puzzle: a.samples.unwrap_or(base.samples_per_puzzle),
        t_min: a.t_min.unwrap_or(base.t_min),
        t_max: a.t_max.unwrap_or(base.t_max),
        seed: a.seed.unwrap_or(base.seed),
    };
    let data = load_data(&a.data, a.split.as_deref())?;
    let start = Instant::now();
    let examples = build_mi_dataset(&model, &data, mi.samples_per_puzzle, (mi.t_min, mi.t_max), mi.seed)?;
    let meta = MiDatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        seq_len: model.seq_len(),
        hidden_dim: model.hidden_dim(),
        count: examples.len(),
        mdm_hash: manifest.content_hash,
        seed: mi.seed,
        samples_per_puzzle: mi.samples_per_puzzle,
        t_range: (mi.t_min, mi.t_max),
        total_oracle_nfe: examples.iter().map(|e| e.oracle_nfe).sum(),
    };
    ensure_parent(&a.out)?;
    save_mi_dataset(&a.out, &examples, &meta)?;
    info!(
        "{} examples, {} oracle evaluations, {:.1}s",
        meta.count,
        meta.total_oracle_nfe,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train_estimator_cmd(a: &TrainEstimatorArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (examples, meta) = load_mi_dataset(&a.mi_data)?;
    if let Some(mdm) = &a.mdm {
        let backbone = read_manifest(mdm)?;
        if backbone.content_hash != meta.mdm_hash {
            let msg = format!(
                "dataset was built with backbone {} but {} has hash {}",
                meta.mdm_hash,
                mdm.display(),
                backbone.content_hash
            );
            if !a.force {
                return Err(Error::Usage(format!("{msg}; pass --force to train anyway")).into());
            }
            warn!("{msg}");
        }
    }
    let tcfg = &cfg.estimator_train;
    let (train, heldout) = split_by_group(examples, meta.samples_per_puzzle.max(1), tcfg.heldout_frac, tcfg.seed)?;
    let mut head = MiEstimator::new(cfg.estimator.with_input_dim(meta.hidden_dim))?;
    fs::create_dir_all(&a.out)?;
    let mut csv = csv::Writer::from_path(a.out.join("epochs.csv"))?;
    let mut csv_err = None;
    let start = Instant::now();
    let report = train_estimator(&mut head, &train, &heldout, tcfg, |s| {
        info!(
            "epoch {} train {:.6} held-out {:.6}",
            s.epoch, s.train_loss, s.heldout_mse
        );
        if let Err(e) = csv.serialize(s) {
            csv_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    csv.flush()?;
    let monotone = report.epochs.windows(2).all(|w| w[1].heldout_mse <= w[0].heldout_mse);
    if !monotone {
        info!("held-out MSE was not monotone across epochs");
    }
    info!(
        "held-out MSE {:.6}, constant baseline {:.6}, {:.1}s",
        report.final_mse,
        report.baseline_mse,
        start.elapsed().as_secs_f64()
    );
    save_estimator(
        &a.out,
        &head,
        &meta.mdm_hash,
        &[meta.seed, cfg.estimator.seed, tcfg.seed],
    )?;
    write_json(&a.out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    puzzle: String,
    solved: bool,
    trace: &'a DecodeTrace,
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    seed: u64,
    config: &'a SamplerConfig,
    solved: usize,
    puzzles: Vec<SampleRecord<'a>>,
}

fn sample_cmd(a: &SampleArgs, threads: usize) -> Result<()> {
    let cfg = SamplerConfig {
        strategy: a.strategy,
        k: a.k,
        gamma: a.gamma,
        lambda: a.lambda,
        commit: a.commit,
        seed: a.seed,
    };
    cfg.validate()?;
    if cfg.strategy == Strategy::MiGuided && a.estimator.is_none() {
        return Err(Error::Usage("mi_guided needs --estimator".into()).into());
    }
    let (model, manifest) = load_mdm(&a.mdm).with_context(|| format!("loading {}", a.mdm.display()))?;
    let head = a
        .estimator
        .as_deref()
        .map(|p| load_head(p, &manifest.content_hash))
        .transpose()?;
    let mut puzzles = load_data(&a.puzzles, a.split.as_deref())?;
    if let Some(n) = a.limit {
        puzzles.truncate(n);
    }
    let outcomes = decode_all(&model, head.as_ref(), &puzzles, &cfg, a.seed, threads)?;
    let n = outcomes.len().max(1) as f64;
    let solved = outcomes.iter().filter(|o| o.solved).count();
    let passes: usize = outcomes.iter().map(|o| o.trace.num_passes()).sum();
    let head_nfe: u64 = outcomes.iter().map(|o| o.trace.head_nfe).sum();
    println!(
        "{}: solved {solved}/{} ({:.1}%), avg passes {:.2}, backbone NFE {passes}, head NFE {head_nfe}",
        cfg.label(),
        outcomes.len(),
        100.0 * solved as f64 / n,
        passes as f64 / n
    );
    if let Some(path) = &a.trace_out {
        let out = SampleOutput {
            seed: a.seed,
            config: &cfg,
            solved,
            puzzles: puzzles
                .iter()
                .zip(&outcomes)
                .map(|(p, o)| SampleRecord {
                    puzzle: format_puzzle_line(p),
                    solved: o.solved,
                    trace: &o.trace,
                })
                .collect(),
        };
        ensure_parent(path)?;
        write_json(path, &out)?;
    }
    Ok(())
}

fn benchmark_cmd(a: &BenchmarkArgs, threads: usize) -> Result<()> {
    let cfg = load_config(&a.suite_config)?;
    let b = &cfg.benchmark;
    // Relative paths in the suite are taken from the config's directory.
    let base = a.suite_config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        match p {
            Some(p) => Ok(base.join(p)),
            None => Err(Error::Config(format!("benchmark.{what} is required")).into()),
        }
    };
    if b.samplers.is_empty() {
        bail!(Error::Config("benchmark.samplers is empty".into()));
    }
    let mdm_dir = resolve(&b.mdm, "mdm")?;
    let (model, manifest) = load_mdm(&mdm_dir).with_context(|| format!("loading {}", mdm_dir.display()))?;
    let head = match &b.estimator {
        Some(p) => Some(load_head(&base.join(p), &manifest.content_hash)?),
        None => None,
    };
    let puzzles = load_data(&resolve(&b.puzzles, "puzzles")?, b.split.as_deref())?;
    let exclude: Option<HashSet<_>> = match &b.exclude {
        Some(p) => Some(load_puzzles(&base.join(p))?.into_iter().collect()),
        None => None,
    };
    let opts = BenchmarkOptions {
        seed: b.seed,
        threads,
        exclude: exclude.as_ref(),
    };
    let report = run_benchmark(&model, head.as_ref(), &puzzles, &b.samplers, &opts)?;
    let table = report.to_text_table();
    ensure_parent(&a.out)?;
    write_json(&a.out, &report)?;
    fs::write(a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let (model, manifest) = load_mdm(&a.mdm).with_context(|| format!("loading {}", a.mdm.display()))?;
    let puzzles = load_puzzles(&a.puzzle)?;
    let Some(puzzle) = puzzles.get(a.index) else {
        bail!(Error::Usage(format!(
            "{} has {} puzzles, index {} requested",
            a.puzzle.display(),
            puzzles.len(),
            a.index
        )));
    };
    let mut state = SequenceState::from_puzzle(puzzle);
    let side = puzzle.clues.side();
    for (cell, digit) in parse_assignments(&a.cell_assignments)? {
        if cell >= state.len() || digit == 0 || digit as usize > side {
            bail!(Error::Usage(format!("assignment {cell}={digit} is off the board")));
        }
        if !state.is_masked(cell) {
            bail!(Error::Usage(format!("cell {cell} is already filled")));
        }
        state.unmask(cell, Token::from(digit - 1))?;
    }
    let box_size = puzzle.clues.box_size();
    fs::create_dir_all(&a.out)?;
    let oracle = ground_truth_mi(&model, &state)?;
    let meta = export_mi_map(&state, &oracle, box_size, "oracle", &a.out.join("oracle.csv"))?;
    info!(
        "oracle map: {} masked cells, max pair {:?}",
        meta.masked.len(),
        meta.max_pair
    );
    if let Some(dir) = &a.estimator {
        let head = load_head(dir, &manifest.content_hash)?;
        let hidden = model.forward_marginals(&state)?.hidden;
        let est = head.predict_mi(&hidden, &state.masked_positions())?;
        let meta = export_mi_map(&state, &est, box_size, "estimator", &a.out.join("estimator.csv"))?;
        info!("estimator map: max pair {:?}", meta.max_pair);
    }
    Ok(())
}

/// 2 for caller mistakes, 3 for unreadable or malformed data, 4 for
/// numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Shape(_) | Error::Usage(_) | Error::Config(_) => 2,
                Error::Parse { .. } | Error::Format(_) | Error::Json(_) => 3,
                Error::Numeric(_) | Error::ZeroProbabilityContext => 4,
                Error::Io(io) => io_code(io),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
    }
    3
}

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == std::io::ErrorKind::NotFound {
        2
    } else {
        3
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainMdm(a) => train_mdm_cmd(a),
        Command::BuildMiData(a) => build_mi_data_cmd(a),
        Command::TrainEstimator(a) => train_estimator_cmd(a),
        Command::Sample(a) => sample_cmd(a, cli.threads),
        Command::Benchmark(a) => benchmark_cmd(a, cli.threads),
        Command::ExportMiMap(a) => export_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holes_parse() {
        assert_eq!(parse_holes("7"), Ok((7, 7)));
        assert_eq!(parse_holes("4-12"), Ok((4, 12)));
        assert!(parse_holes("x").is_err());
    }

    #[test]
    fn assignments_parse() {
        assert_eq!(parse_assignments("3=2, 7=4").unwrap(), vec![(3, 2), (7, 4)]);
        assert!(parse_assignments("").unwrap().is_empty());
        assert!(parse_assignments("3:2").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Format("x".into())), 3);
        assert_eq!(code(Error::Numeric("x".into())), 4);
        let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(
            exit_code(&anyhow::Error::from(Error::Io(missing)).context("loading")),
            2
        );
    }
}
