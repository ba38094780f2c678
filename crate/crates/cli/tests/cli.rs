use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimask_core::checkpoint::{load_estimator, load_mdm, read_manifest, BACKBONE_HASH_KEY};
use mimask_core::estimator::{load_mi_dataset, sidecar_path};
use mimask_core::eval::{mi_map_sidecar_path, BenchmarkReport, MiMapMeta};
use mimask_core::mi::read_dense_csv;
use mimask_core::sudoku::{format_puzzle_line, load_puzzles};
use mimask_core::DecodeTrace;
use serde_json::Value;
use tempfile::TempDir;

fn mimask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mimask(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    mimask(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model]
dim = 8
layers = 1
heads = 2
ff_dim = 16

[train]
epochs = 1
batch_size = 16
warmup_steps = 2

[estimator]
proj_dim = 4
hidden = 8

[estimator_train]
epochs = 2
batch_size = 8
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn puzzles(&self, name: &str, count: &str, holes: &str, seed: &str) -> PathBuf {
        let p = self.path(name);
        ok(&[
            "gen-data",
            "--count",
            count,
            "--holes",
            holes,
            "--seed",
            seed,
            "--out",
            s(&p),
        ]);
        p
    }

    fn config(&self) -> PathBuf {
        let p = self.path("run.toml");
        fs::write(&p, TINY).unwrap();
        p
    }

    fn mdm(&self, data: &Path) -> PathBuf {
        let out = self.path("mdm");
        ok(&[
            "train-mdm",
            "--config",
            s(&self.config()),
            "--data",
            s(data),
            "--split",
            "train",
            "--out",
            s(&out),
        ]);
        out
    }
}

#[test]
fn gen_data_writes_requested_count_reproducibly() {
    let f = Fixture::new();
    let a = f.puzzles("a.txt", "100", "4-10", "3");
    let b = f.puzzles("b.txt", "100", "4-10", "3");
    assert_eq!(load_puzzles(&a).unwrap().len(), 100);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let splits: Value = serde_json::from_str(&fs::read_to_string(f.path("a.txt.splits.json")).unwrap()).unwrap();
    let n = |k: &str| splits[k].as_array().unwrap().len();
    assert_eq!((n("train"), n("val"), n("test")), (80, 10, 10));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let f = Fixture::new();
    let out = f.path("x.txt");
    assert_eq!(
        code(&["gen-data", "--count", "5", "--holes", "17", "--out", s(&out)]),
        2
    );
    assert_eq!(
        code(&["gen-data", "--count", "5", "--holes", "abc", "--out", s(&out)]),
        2
    );
    let cfg = f.config();
    let missing = f.path("missing.txt");
    assert_eq!(
        code(&[
            "train-mdm",
            "--config",
            s(&cfg),
            "--data",
            s(&missing),
            "--out",
            s(&f.path("m"))
        ]),
        2
    );
    fs::write(f.path("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let data = f.puzzles("d.txt", "10", "4", "1");
    assert_eq!(
        code(&[
            "train-mdm",
            "--config",
            s(&f.path("bad.toml")),
            "--data",
            s(&data),
            "--out",
            s(&f.path("m"))
        ]),
        2
    );
}

#[test]
fn malformed_puzzle_file_is_a_data_error() {
    let f = Fixture::new();
    fs::write(f.path("bad.txt"), "12,34\n").unwrap();
    let cfg = f.config();
    assert_eq!(
        code(&[
            "train-mdm",
            "--config",
            s(&cfg),
            "--data",
            s(&f.path("bad.txt")),
            "--out",
            s(&f.path("m"))
        ]),
        3
    );
}

#[test]
fn training_resumes_and_checkpoints_verify() {
    let f = Fixture::new();
    let data = f.puzzles("d.txt", "40", "4-10", "1");
    let mdm = f.mdm(&data);
    let (_, first) = load_mdm(&mdm).unwrap();
    // 32 training puzzles at batch 16.
    assert_eq!(first.step, 2);
    let resumed = f.path("mdm2");
    ok(&[
        "train-mdm",
        "--config",
        s(&f.config()),
        "--data",
        s(&data),
        "--split",
        "train",
        "--resume",
        s(&mdm),
        "--out",
        s(&resumed),
    ]);
    let (_, second) = load_mdm(&resumed).unwrap();
    assert_eq!(second.step, 4);
    let curve = fs::read_to_string(resumed.join("loss.csv")).unwrap();
    let steps: Vec<&str> = curve.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["step", "1", "2", "3", "4"]);
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    let data = f.puzzles("d.txt", "40", "4-10", "1");
    let mdm = f.mdm(&data);
    let mdm_hash = read_manifest(&mdm).unwrap().content_hash;

    let mi = f.path("mi.bin");
    ok(&[
        "build-mi-data",
        "--mdm",
        s(&mdm),
        "--data",
        s(&data),
        "--split",
        "val",
        "--samples",
        "2",
        "--seed",
        "4",
        "--out",
        s(&mi),
    ]);
    let (examples, meta) = load_mi_dataset(&mi).unwrap();
    assert!(sidecar_path(&mi).exists());
    assert_eq!(meta.mdm_hash, mdm_hash);
    assert_eq!(examples.len(), 8);

    // A different backbone is refused unless forced.
    let other = f.path("other");
    fs::write(
        f.path("other.toml"),
        TINY.replace("ff_dim = 16", "ff_dim = 16\nseed = 9"),
    )
    .unwrap();
    ok(&[
        "train-mdm",
        "--config",
        s(&f.path("other.toml")),
        "--data",
        s(&data),
        "--out",
        s(&other),
    ]);
    let est = f.path("est");
    let cfg = f.config();
    let train_est = |backbone: &Path, force: bool| {
        let mut args = vec![
            "train-estimator",
            "--config",
            s(&cfg),
            "--mi-data",
            s(&mi),
            "--mdm",
            s(backbone),
            "--out",
            s(&est),
        ];
        if force {
            args.push("--force");
        }
        code(&args)
    };
    assert_eq!(train_est(&other, false), 2);
    assert_eq!(train_est(&other, true), 0);
    assert_eq!(train_est(&mdm, false), 0);
    let (_, manifest) = load_estimator(&est).unwrap();
    assert_eq!(manifest.extra[BACKBONE_HASH_KEY], mdm_hash);
    assert_eq!(fs::read_to_string(est.join("epochs.csv")).unwrap().lines().count(), 3);

    // Sampling.
    let test = load_puzzles(&data).unwrap();
    let sample = |strategy: &str, estimator: bool, trace: &Path| {
        let mut args = vec![
            "sample",
            "--mdm",
            s(&mdm),
            "--puzzles",
            s(&data),
            "--split",
            "test",
            "--strategy",
            strategy,
            "--gamma",
            "0.5",
            "--lambda",
            "2",
            "--commit",
            "sample",
            "--seed",
            "7",
            "--trace-out",
            s(trace),
        ];
        if estimator {
            args.extend(["--estimator", s(&est)]);
        }
        code(&args)
    };
    assert_eq!(sample("mi_guided", false, &f.path("t0.json")), 2);
    assert_eq!(sample("bogus", false, &f.path("t0.json")), 2);
    assert_eq!(sample("sequential", false, &f.path("t1.json")), 0);
    let trace: Value = serde_json::from_str(&fs::read_to_string(f.path("t1.json")).unwrap()).unwrap();
    let records = trace["puzzles"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    for r in records {
        let t: DecodeTrace = serde_json::from_value(r["trace"].clone()).unwrap();
        t.validate().unwrap();
        let line = r["puzzle"].as_str().unwrap();
        let p = test.iter().find(|p| format_puzzle_line(p) == line).unwrap();
        assert_eq!(t.backbone_nfe as usize, p.holes());
        assert_eq!(t.num_passes(), p.holes());
    }
    assert_eq!(sample("mi_guided", true, &f.path("t2.json")), 0);
    assert_eq!(sample("mi_guided", true, &f.path("t3.json")), 0);
    assert_eq!(
        fs::read(f.path("t2.json")).unwrap(),
        fs::read(f.path("t3.json")).unwrap()
    );
    let t2: Value = serde_json::from_str(&fs::read_to_string(f.path("t2.json")).unwrap()).unwrap();
    for r in t2["puzzles"].as_array().unwrap() {
        let t: DecodeTrace = serde_json::from_value(r["trace"].clone()).unwrap();
        assert_eq!(t.head_nfe, t.backbone_nfe);
    }

    // Benchmark suite with paths relative to the suite file.
    let suite = f.path("suite.toml");
    fs::write(
        &suite,
        format!(
            "{TINY}\n[benchmark]\nmdm = \"mdm\"\nestimator = \"est\"\npuzzles = \"d.txt\"\nsplit = \"test\"\nseed = 3\n\n\
             [[benchmark.samplers]]\nstrategy = \"sequential\"\n\n\
             [[benchmark.samplers]]\nstrategy = \"naive_k\"\nk = 4\n\n\
             [[benchmark.samplers]]\nstrategy = \"mi_guided\"\ngamma = 0.5\nlambda = 1.0\n"
        ),
    )
    .unwrap();
    let report_path = f.path("bench/report.json");
    let out = ok(&[
        "--threads",
        "2",
        "benchmark",
        "--suite-config",
        s(&suite),
        "--out",
        s(&report_path),
    ]);
    let report: BenchmarkReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.puzzles, 4);
    let table = fs::read_to_string(report_path.with_extension("txt")).unwrap();
    assert!(table.contains("Avg. Passes") && table.contains("naive_k(k=4)"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);

    // Training puzzles are not allowed in the benchmark set.
    let leaky = fs::read_to_string(&suite)
        .unwrap()
        .replace("split = \"test\"", "exclude = \"d.txt\"");
    fs::write(&suite, leaky).unwrap();
    assert_eq!(
        code(&["benchmark", "--suite-config", s(&suite), "--out", s(&report_path)]),
        2
    );

    // MI maps: oracle and estimator side by side, zero on a solved board.
    let maps = f.path("maps");
    ok(&[
        "export-mi-map",
        "--mdm",
        s(&mdm),
        "--estimator",
        s(&est),
        "--puzzle",
        s(&data),
        "--out",
        s(&maps),
    ]);
    for name in ["oracle.csv", "estimator.csv"] {
        let meta: MiMapMeta =
            serde_json::from_str(&fs::read_to_string(mi_map_sidecar_path(&maps.join(name))).unwrap()).unwrap();
        assert_eq!(meta.masked.len(), test[0].holes());
        let dense = read_dense_csv(&fs::read_to_string(maps.join(name)).unwrap()).unwrap();
        assert_eq!(dense.len(), 16);
    }
    let fill: Vec<String> = (0..16)
        .filter(|&i| test[0].clues.get(i) == 0)
        .map(|i| format!("{i}={}", test[0].solution.get(i)))
        .collect();
    let solved = f.path("solved");
    ok(&[
        "export-mi-map",
        "--mdm",
        s(&mdm),
        "--puzzle",
        s(&data),
        "--cell-assignments",
        &fill.join(","),
        "--out",
        s(&solved),
    ]);
    let dense = read_dense_csv(&fs::read_to_string(solved.join("oracle.csv")).unwrap()).unwrap();
    assert!(dense.iter().flatten().all(|&v| v == 0.0));
    assert_eq!(
        code(&[
            "export-mi-map",
            "--mdm",
            s(&mdm),
            "--puzzle",
            s(&data),
            "--cell-assignments",
            "99=1",
            "--out",
            s(&solved)
        ]),
        2
    );
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sudoku4.toml");
    let cfg = mimask_core::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.benchmark.samplers.len(), 6);
    assert_eq!(cfg.model.dim, 32);
}
