//! Benchmarking decode strategies, MI-map export, and a k-mer
//! Jensen-Shannon divergence between sequence sets.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};
use crate::estimator::MiPredictor;
use crate::mdm::{DenoisingModel, NfeCounter, SequenceState};
use crate::mi::MiMatrix;
use crate::sampler::{decode, DecodeTrace, SamplerConfig, Strategy};
use crate::sudoku::{check_solution, PuzzleRecord};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `n` at quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Decode seed for one puzzle under one config: depends on the puzzle's
/// content, never on its position in the file.
pub fn puzzle_seed(run_seed: u64, config_seed: u64, puzzle: &PuzzleRecord) -> u64 {
    let mut x = run_seed ^ config_seed.rotate_left(32) ^ puzzle.content_hash();
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub config: SamplerConfig,
    pub puzzles: usize,
    pub solved: usize,
    pub avg_passes: f64,
    pub avg_backbone_nfe: f64,
    pub avg_head_nfe: f64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub puzzles: usize,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    /// Aligned plain-text table: method, passes, NFE, accuracy and interval.
    pub fn to_text_table(&self) -> String {
        let header = ["Method", "Avg. Passes", "Avg. NFE", "Sol. Acc.", "95% CI"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.2}", r.avg_passes),
                    format!("{:.2}", r.avg_backbone_nfe + r.avg_head_nfe),
                    format!("{:.1}%", 100.0 * r.accuracy),
                    format!("[{:.1}%, {:.1}%]", 100.0 * r.ci_low, 100.0 * r.ci_high),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for row in &body {
            let cells: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &cells);
        }
        let _ = writeln!(out, "({} puzzles, seed {})", self.puzzles, self.seed);
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkOptions<'a> {
    pub seed: u64,
    /// Worker threads; 0 and 1 both mean single-threaded.
    pub threads: usize,
    /// Training puzzles; any overlap with the benchmark set is an error.
    pub exclude: Option<&'a HashSet<PuzzleRecord>>,
}

/// Per-puzzle decode outcome.
#[derive(Clone, Debug)]
pub struct PuzzleOutcome {
    pub solved: bool,
    pub trace: DecodeTrace,
}

/// Decodes every puzzle under `cfg`. Each puzzle's commit seed comes from
/// [`puzzle_seed`], so results do not depend on order or thread count. The
/// trace NFE totals are cross-checked against independent counters wrapped
/// around the model and the head.
pub fn decode_all<M: DenoisingModel + Sync, H: MiPredictor + Sync>(
    model: &M,
    estimator: Option<&H>,
    puzzles: &[PuzzleRecord],
    cfg: &SamplerConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<PuzzleOutcome>> {
    cfg.validate()?;
    if cfg.strategy == Strategy::MiGuided && estimator.is_none() {
        return usage_err(format!("{} needs an estimator checkpoint", cfg.label()));
    }
    let counted = NfeCounter::new(model);
    let head = estimator.map(NfeCounter::new);
    let run = |chunk: &[PuzzleRecord]| -> Result<Vec<PuzzleOutcome>> {
        chunk
            .iter()
            .map(|p| {
                let local = SamplerConfig {
                    seed: puzzle_seed(seed, cfg.seed, p),
                    ..cfg.clone()
                };
                let h = head.as_ref().map(|h| h as &dyn MiPredictor);
                let trace = decode(&counted, h, &SequenceState::from_puzzle(p), &local)?;
                let board = trace.final_state.to_board(p.clues.box_size())?;
                Ok(PuzzleOutcome {
                    solved: check_solution(p, &board),
                    trace,
                })
            })
            .collect()
    };
    let threads = threads.max(1).min(puzzles.len().max(1));
    let outcomes: Vec<PuzzleOutcome> = if threads == 1 {
        run(puzzles)?
    } else {
        let chunk = puzzles.len().div_ceil(threads);
        let parts: Vec<Result<Vec<PuzzleOutcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = puzzles.chunks(chunk).map(|c| s.spawn(|| run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("decode worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(puzzles.len());
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let backbone: u64 = outcomes.iter().map(|o| o.trace.backbone_nfe).sum();
    let head_total: u64 = outcomes.iter().map(|o| o.trace.head_nfe).sum();
    let passes: u64 = outcomes.iter().map(|o| o.trace.num_passes() as u64).sum();
    let expected_head = if cfg.strategy == Strategy::MiGuided { passes } else { 0 };
    if counted.nfe() != backbone || backbone != passes {
        return Err(Error::Numeric(format!(
            "backbone NFE ledger mismatch: counter {}, traces {backbone}, passes {passes}",
            counted.nfe()
        )));
    }
    if head.as_ref().map_or(0, |h| h.nfe()) != head_total || head_total != expected_head {
        return Err(Error::Numeric(format!(
            "head NFE ledger mismatch: traces {head_total}, expected {expected_head}"
        )));
    }
    for o in &outcomes {
        o.trace.validate()?;
    }
    Ok(outcomes)
}

/// Runs every config over every puzzle.
pub fn run_benchmark<M: DenoisingModel + Sync, H: MiPredictor + Sync>(
    model: &M,
    estimator: Option<&H>,
    puzzles: &[PuzzleRecord],
    configs: &[SamplerConfig],
    opts: &BenchmarkOptions<'_>,
) -> Result<BenchmarkReport> {
    if puzzles.is_empty() {
        return usage_err("benchmark puzzle set is empty");
    }
    if let Some(train) = opts.exclude {
        let leaked = puzzles.iter().filter(|p| train.contains(*p)).count();
        if leaked > 0 {
            return usage_err(format!("{leaked} benchmark puzzles also appear in the training set"));
        }
    }
    for cfg in configs {
        cfg.validate()?;
        if cfg.strategy == Strategy::MiGuided && estimator.is_none() {
            return usage_err(format!("{} needs an estimator checkpoint", cfg.label()));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let start = Instant::now();
        let outcomes = decode_all(model, estimator, puzzles, cfg, opts.seed, opts.threads)?;
        let wall = start.elapsed().as_secs_f64();
        let n = outcomes.len();
        let solved = outcomes.iter().filter(|o| o.solved).count();
        let mean = |f: &dyn Fn(&PuzzleOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n as f64;
        let (ci_low, ci_high) = wilson_interval(solved, n, Z95);
        rows.push(BenchmarkRow {
            method: cfg.label(),
            config: cfg.clone(),
            puzzles: n,
            solved,
            avg_passes: mean(&|o| o.trace.num_passes() as f64),
            avg_backbone_nfe: mean(&|o| o.trace.backbone_nfe as f64),
            avg_head_nfe: mean(&|o| o.trace.head_nfe as f64),
            accuracy: solved as f64 / n as f64,
            ci_low,
            ci_high,
            wall_time_secs: wall,
        });
    }
    Ok(BenchmarkReport {
        seed: opts.seed,
        puzzles: puzzles.len(),
        rows,
    })
}

/// Sidecar describing an exported MI map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiMapMeta {
    pub n: usize,
    pub box_size: usize,
    pub side: usize,
    /// Current digit per cell (0 = masked), row-major.
    pub cells: Vec<u8>,
    pub masked: Vec<usize>,
    pub units: String,
    pub source: String,
    pub max_value: f64,
    /// Largest off-diagonal entry as `(row, col, nats)`, if any is positive.
    pub max_pair: Option<(usize, usize, f64)>,
}

pub fn mi_map_sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `mi` as a dense CSV at `path` plus a JSON sidecar with the board
/// layout. `mi` must be defined over exactly the state's masked positions.
pub fn export_mi_map(
    state: &SequenceState,
    mi: &MiMatrix,
    box_size: usize,
    source: &str,
    path: &Path,
) -> Result<MiMapMeta> {
    if mi.n() != state.len() {
        return usage_err("MI map size does not match the state");
    }
    if mi.masked() != state.masked_positions().as_slice() {
        return usage_err("MI map is not defined over the state's masked positions");
    }
    let side = box_size * box_size;
    if side * side != state.len() {
        return usage_err(format!("state of length {} is not a {side}x{side} board", state.len()));
    }
    let cells: Vec<u8> = (0..state.len())
        .map(|i| state.token(i).map_or(0, |t| t as u8 + 1))
        .collect();
    let mut max_pair: Option<(usize, usize, f64)> = None;
    for (i, j) in mi.masked_pairs() {
        let v = mi.get(i, j);
        if v > 0.0 && max_pair.is_none_or(|(_, _, m)| v > m) {
            max_pair = Some((i, j, v));
        }
    }
    let meta = MiMapMeta {
        n: state.len(),
        box_size,
        side,
        cells,
        masked: mi.masked().to_vec(),
        units: "nats".into(),
        source: source.into(),
        max_value: max_pair.map_or(0.0, |p| p.2),
        max_pair,
    };
    mi.save_dense_csv(path)?;
    std::fs::write(mi_map_sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

/// Jensen-Shannon divergence in nats between two aligned distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return usage_err("distributions must be aligned");
    }
    let half_kl = |a: f64, b: f64| {
        if a > 0.0 {
            0.5 * a * (2.0 * a / (a + b)).ln()
        } else {
            0.0
        }
    };
    let d: f64 = p.iter().zip(q).map(|(&a, &b)| half_kl(a, b) + half_kl(b, a)).sum();
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

/// Normalized histogram of all length-`k` windows across `seqs`.
pub fn kmer_histogram<T: Ord + Clone, S: AsRef<[T]>>(seqs: &[S], k: usize) -> Result<BTreeMap<Vec<T>, f64>> {
    if k == 0 {
        return usage_err("k must be at least 1");
    }
    let mut counts: BTreeMap<Vec<T>, f64> = BTreeMap::new();
    for s in seqs {
        for w in s.as_ref().windows(k) {
            *counts.entry(w.to_vec()).or_default() += 1.0;
        }
    }
    let total: f64 = counts.values().sum();
    if total == 0.0 {
        return usage_err(format!("no sequence has a window of length {k}"));
    }
    counts.values_mut().for_each(|c| *c /= total);
    Ok(counts)
}

/// JSD between the k-mer histograms of two sequence sets, over the union
/// of their supports.
pub fn kmer_jsd<T: Ord + Clone, S: AsRef<[T]>>(generated: &[S], reference: &[S], k: usize) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return usage_err("both sequence sets must be non-empty");
    }
    let p = kmer_histogram(generated, k)?;
    let q = kmer_histogram(reference, k)?;
    let support: Vec<&Vec<T>> = p
        .keys()
        .chain(q.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let pv: Vec<f64> = support.iter().map(|s| p.get(*s).copied().unwrap_or(0.0)).collect();
    let qv: Vec<f64> = support.iter().map(|s| q.get(*s).copied().unwrap_or(0.0)).collect();
    jsd(&pv, &qv)
}
