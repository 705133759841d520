use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ctxssl::checkpoint::load_manifest;
use ctxssl::log::read_log;
use ctxssl::report::read_json;
use tempfile::TempDir;

const TINY: &str = r#"{
  "world": { "n_classes": 3, "objects_per_class": 3, "prototype_dim": 6, "obs_dim": 24, "render_hidden": 16 },
  "model": { "enc_hidden": 16, "rep_dim": 8, "model_dim": 16, "n_layers": 1, "n_heads": 2,
             "ff_mult": 2, "out_dim": 8, "pred_hidden": 16, "predictor_input": "embedding" },
  "train": { "steps": 10, "batch_sequences": 2, "k_max": 4, "lr": 0.001 },
  "probe": { "n_eval_samples": 60, "queries_per_context": 20, "retrieval_queries": 8,
             "retrieval_views": 10, "classification_samples": 60 }
}"#;

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Run {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Run { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ctxssl(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ctxssl"))
            .arg(cmd)
            .arg("--config")
            .arg(&self.config)
            .arg("--out_dir")
            .arg(self.out(out))
            .args(extra)
            .env("CTXSSL_THREADS", "1")
            .output()
            .unwrap()
    }

    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) {
        let o = self.ctxssl(cmd, out, extra);
        assert!(
            o.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn csv_lengths(path: &Path) -> Vec<u64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut out: Vec<u64> = r
        .records()
        .map(|rec| rec.unwrap())
        .filter(|rec| &rec[0] != "encoder")
        .map(|rec| rec[2].parse().unwrap())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[test]
fn gen_world_is_deterministic() {
    let run = Run::new();
    run.ok("gen-world", "a", &[]);
    run.ok("gen-world", "b", &[]);
    let a = fs::read(run.out("a/world.bin")).unwrap();
    let b = fs::read(run.out("b/world.bin")).unwrap();
    assert_eq!(a, b);
    run.ok("gen-world", "c", &["--world.seed", "9"]);
    assert_ne!(a, fs::read(run.out("c/world.bin")).unwrap());
    assert!(run.out("a/resolved.gen-world.json").exists());
}

#[test]
fn ten_step_smoke_writes_every_artifact() {
    let run = Run::new();
    let t0 = Instant::now();
    run.ok("gen-world", "s", &[]);
    run.ok("train", "s", &[]);
    run.ok("eval", "s", &[]);
    assert!(t0.elapsed().as_secs() < 30);

    let log = read_log(&run.out("s/train_log.jsonl")).unwrap();
    assert_eq!(
        log.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
    assert!(log
        .iter()
        .all(|r| r.total.is_finite() && !r.group.is_empty()));

    let manifest = load_manifest(&run.out("s/checkpoint.json")).unwrap();
    assert_eq!(manifest.step, 10);
    let report = read_json(&run.out("s/report.json")).unwrap();
    assert_eq!(report.metadata.checkpoint_id, manifest.id());
    assert_eq!(csv_lengths(&run.out("s/report.csv")), vec![0, 2, 6, 14, 30]);

    let mask = fs::read_to_string(run.out("s/mask.txt")).unwrap();
    assert_eq!(mask.lines().count(), 8);
    assert!(fs::read(run.out("s/mask.pbm")).unwrap().starts_with(b"P1"));

    let charts: Vec<_> = fs::read_dir(run.out("s/charts"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!charts.is_empty());
    for c in charts {
        let text = fs::read_to_string(&c).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
    }
}

#[test]
fn single_length_gives_single_column() {
    let run = Run::new();
    run.ok("gen-world", "s", &[]);
    run.ok("train", "s", &["--steps", "2"]);
    run.ok("eval", "s", &["--lengths", "0"]);
    assert_eq!(csv_lengths(&run.out("s/report.csv")), vec![0]);
}

#[test]
fn resume_is_bit_exact() {
    let run = Run::new();
    run.ok("gen-world", "a", &[]);
    fs::create_dir_all(run.out("b")).unwrap();
    fs::copy(run.out("a/world.bin"), run.out("b/world.bin")).unwrap();
    run.ok("train", "a", &["--steps", "8"]);
    run.ok("train", "b", &["--steps", "4"]);
    run.ok("train", "b", &["--steps", "8", "--resume"]);
    assert_eq!(
        fs::read(run.out("a/checkpoint.bin")).unwrap(),
        fs::read(run.out("b/checkpoint.bin")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(run.out("a/train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| l.split(",\"wallclock_ms\"").next().unwrap().to_string())
            .collect::<Vec<_>>(),
        fs::read_to_string(run.out("b/train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| l.split(",\"wallclock_ms\"").next().unwrap().to_string())
            .collect::<Vec<_>>()
    );
    let o = run.ctxssl(
        "train",
        "b",
        &["--steps", "12", "--resume", "--lambda", "0.5"],
    );
    assert_eq!(code(&o), 4);
}

#[test]
fn exit_codes() {
    let run = Run::new();
    assert_eq!(code(&run.ctxssl("train", "s", &[])), 2, "missing world");
    assert_eq!(
        code(&run.ctxssl("gen-world", "s", &["--no_such_key", "1"])),
        2
    );
    assert_eq!(
        code(&run.ctxssl("gen-world", "s", &["--seed", "1"])),
        2,
        "ambiguous key"
    );
    assert_eq!(
        code(&run.ctxssl("gen-world", "s", &["--n_classes", "0"])),
        2
    );
    let bad = Command::new(env!("CARGO_BIN_EXE_ctxssl"))
        .args(["gen-world", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);

    run.ok("gen-world", "s", &[]);
    let o = run.ctxssl("train", "s", &["--steps", "3", "--lr", "1e30"]);
    assert_eq!(code(&o), 3);
    assert!(run.out("s/failure.json").exists());

    run.ok("train", "s", &["--steps", "2"]);
    run.ok("gen-world", "other", &["--world.seed", "4"]);
    let w = run.out("other/world.bin");
    let o = run.ctxssl("eval", "s", &["--world", w.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run.ctxssl("eval", "s", &["--out_dim", "4"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn invariant_baseline_trains_without_actions_or_predictor() {
    let run = Run::new();
    run.ok("gen-world", "s", &[]);
    run.ok(
        "train",
        "s",
        &["--mode", "invariant_baseline", "--steps", "4"],
    );
    let log = read_log(&run.out("s/train_log.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.group == "none" && r.predictor == 0.0));
    let manifest = load_manifest(&run.out("s/checkpoint.json")).unwrap();
    assert_eq!(manifest.train.loss().lambda, 0.0);
}

#[test]
fn ablate_runs_cells_and_skips_finished_ones() {
    let run = Run::new();
    run.ok("gen-world", "s", &[]);
    let args = [
        "--steps",
        "2",
        "--p_grid",
        "0,0.9",
        "--seeds",
        "0",
        "--lambda_grid",
        "0",
        "--lengths",
        "0,2",
    ];
    run.ok("ablate", "s", &args);
    let first = fs::read_to_string(run.out("s/ablate.csv")).unwrap();
    assert!(first
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(3) == Some("done")));
    let cells: Vec<_> = first
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert!(cells.contains(&"0,1,0".to_string()) && cells.contains(&"0.9,0,0".to_string()));

    let o = run.ctxssl("ablate", "s", &args);
    assert!(
        String::from_utf8_lossy(&o.stdout)
            .matches("skipped")
            .count()
            == 3
    );

    let o = Command::new(env!("CARGO_BIN_EXE_ctxssl"))
        .args(["ablate", "--config"])
        .arg(&run.config)
        .arg("--out_dir")
        .arg(run.out("s"))
        .env("CTXSSL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
