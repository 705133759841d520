use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ctxssl_core::eval::{full_report, EvalReport, ReportMetadata};
use ctxssl_core::mask;
use ctxssl_core::train::{run, seeded_stream, TrainConfig, TrainError, TrainState};
use ctxssl_core::World;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CheckpointMeta};
use crate::config::{sha256_hex, RunConfig, SweepAxes};
use crate::error::{CliError, Result};
use crate::log::{LogRecord, LogWriter};
use crate::report;
use crate::world_io::{load_world, save_world};

/// Stream id for the illustrative mask dump; disjoint from the training streams.
const STREAM_MASK_DUMP: u64 = 0x6d61_736b;

pub const THREADS_ENV: &str = "CTXSSL_THREADS";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_resolved(cfg: &RunConfig, command: &str) -> Result<()> {
    ensure_dir(&cfg.paths.out_dir)?;
    let path = cfg.paths.out_dir.join(format!("resolved.{command}.json"));
    fs::write(&path, cfg.to_pretty_json()).map_err(|e| CliError::io(&path, e))
}

#[derive(Debug)]
pub struct WorldSummary {
    pub path: PathBuf,
    pub sha256: String,
    pub world: World,
}

pub fn gen_world(cfg: &RunConfig) -> Result<WorldSummary> {
    write_resolved(cfg, "gen-world")?;
    let world = World::new(cfg.world.clone())?;
    let path = cfg.paths.world_file();
    let sha256 = save_world(&world, &path)?;
    Ok(WorldSummary {
        path,
        sha256,
        world,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Print a progress line to stderr every this many steps (0 disables).
    pub progress_every: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub manifest: CheckpointManifest,
    pub log: PathBuf,
    pub state: TrainState<f32>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    step: u64,
    recent: &'a [LogRecord],
}

/// `TrainConfig` with the step budget cleared, for resume compatibility checks.
fn without_steps(t: &TrainConfig) -> TrainConfig {
    TrainConfig {
        steps: 0,
        ..t.clone()
    }
}

pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    write_resolved(cfg, "train")?;
    let out = &cfg.paths.out_dir;
    let (world, world_sha) = load_world(&cfg.paths.world_file())?;
    let model_cfg = cfg.train.model_config(&world, &cfg.model);
    let ckpt_path = cfg.paths.checkpoint_file();
    let hash = cfg.training_hash();

    let mut state = if opts.resume && ckpt_path.exists() {
        let (m, s) = load_checkpoint(&ckpt_path)?;
        if m.world_sha256 != world_sha {
            return Err(CliError::Mismatch(
                "checkpoint was trained on a different world file".into(),
            ));
        }
        if m.model != model_cfg
            || without_steps(&m.train) != without_steps(&cfg.train)
            || m.mask != cfg.mask
        {
            return Err(CliError::Mismatch(
                "checkpoint settings differ from the resolved config".into(),
            ));
        }
        s
    } else {
        TrainState::new(model_cfg, cfg.train.seed)?
    };

    let log_path = out.join("train_log.jsonl");
    let mut log = if opts.resume {
        LogWriter::resume(&log_path, state.step)?
    } else {
        LogWriter::create(&log_path)?
    };

    if cfg.paths.dump_mask {
        let mut rng = seeded_stream(cfg.train.seed, STREAM_MASK_DUMP);
        let m = if cfg.train.mode == ctxssl_core::train::TrainMode::Supervised {
            mask::causal_mask(2 * cfg.train.k_max)
        } else {
            mask::compose(&cfg.mask, cfg.train.k_max, &mut rng)
                .map_err(|e| CliError::Config(e.to_string()))?
        };
        report::write_mask_dump(&m, &out.join("mask"))?;
    }

    let meta = CheckpointMeta {
        training_hash: &hash,
        world_sha256: &world_sha,
        train: &cfg.train,
        mask: &cfg.mask,
    };
    let t0 = Instant::now();
    let mut recent: Vec<LogRecord> = Vec::new();
    let mut side_error: Option<CliError> = None;
    let result = run(&mut state, &world, &cfg.train, &cfg.mask, |st, rep| {
        let rec = LogRecord::from_report(rep, t0.elapsed().as_millis() as u64);
        if opts.progress_every > 0 && rep.step % opts.progress_every == 0 {
            eprintln!(
                "step {:>6}  contrastive {:.4}  predictor {:.4}  total {:.4}",
                rec.step, rec.contrastive, rec.predictor, rec.total
            );
        }
        if let Err(e) = log.append(&rec) {
            side_error = Some(e);
            return false;
        }
        recent.push(rec);
        if recent.len() > 8 {
            recent.remove(0);
        }
        let every = cfg.paths.checkpoint_every;
        if every > 0 && st.step % every == 0 {
            let p = out
                .join("checkpoints")
                .join(format!("step-{:08}.json", st.step));
            if let Err(e) = save_checkpoint(st, &meta, &p) {
                side_error = Some(e);
                return false;
            }
        }
        true
    });
    log.flush()?;
    if let Some(e) = side_error {
        return Err(e);
    }
    if let Err(e) = result {
        if let TrainError::NonFinite { step, .. } = &e {
            let dump = FailureDump {
                error: e.to_string(),
                step: *step,
                recent: &recent,
            };
            let path = out.join("failure.json");
            let json = serde_json::to_string_pretty(&dump).expect("dump serializes");
            fs::write(&path, json).map_err(|err| CliError::io(&path, err))?;
        }
        return Err(e.into());
    }
    let manifest = save_checkpoint(&state, &meta, &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        manifest,
        log: log_path,
        state,
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub json: PathBuf,
    pub csv: PathBuf,
    pub charts: Vec<PathBuf>,
}

pub const REPORT_NOTE: &str = "random pair dropping disabled at evaluation; contexts longer than the training context are out of distribution";

pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    write_resolved(cfg, "eval")?;
    let out = &cfg.paths.out_dir;
    let (world, world_sha) = load_world(&cfg.paths.world_file())?;
    let (manifest, state) = load_checkpoint(&cfg.paths.checkpoint_file())?;
    if manifest.world_sha256 != world_sha {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects world {}, found {}",
            &manifest.world_sha256[..12],
            &world_sha[..12]
        )));
    }
    if manifest.model != manifest.train.model_config(&world, &cfg.model) {
        return Err(CliError::Mismatch(
            "model settings differ from the checkpoint".into(),
        ));
    }
    let metadata = ReportMetadata {
        config_hash: manifest.training_hash.clone(),
        checkpoint_id: manifest.id(),
        eval_seed: cfg.probe.eval_seed,
        lengths: cfg.probe.lengths.clone(),
        note: REPORT_NOTE.into(),
    };
    let rep = full_report(
        &state.model,
        &world,
        &cfg.probe,
        manifest.train.mode,
        metadata,
    )?;
    let json = out.join("report.json");
    let csv = out.join("report.csv");
    report::write_json(&rep, &json)?;
    report::write_csv(&rep, &csv)?;
    let charts = if cfg.paths.svg {
        let dir = out.join("charts");
        ensure_dir(&dir)?;
        report::write_charts(&rep, &dir)?
    } else {
        Vec::new()
    };
    Ok(EvalOutcome {
        report: rep,
        json,
        csv,
        charts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateCell {
    pub p: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// Grid points in sweep order. The λ axis runs at the configured `p`.
pub fn ablate_cells(cfg: &RunConfig) -> Vec<AblateCell> {
    let seeds = if cfg.ablate.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        cfg.ablate.seeds.clone()
    };
    let lambdas = if cfg.ablate.lambda_grid.is_empty() {
        vec![0.0, cfg.train.lambda]
    } else {
        cfg.ablate.lambda_grid.clone()
    };
    let mut cells: Vec<AblateCell> = Vec::new();
    for &seed in &seeds {
        if cfg.ablate.sweep != SweepAxes::Lambda {
            for &p in &cfg.ablate.p_grid {
                cells.push(AblateCell {
                    p,
                    lambda: cfg.train.lambda,
                    seed,
                });
            }
        }
        if cfg.ablate.sweep != SweepAxes::P {
            for &lambda in &lambdas {
                let c = AblateCell {
                    p: cfg.mask.p,
                    lambda,
                    seed,
                };
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
        }
    }
    cells
}

pub fn cell_config(cfg: &RunConfig, cell: &AblateCell) -> RunConfig {
    let mut c = cfg.clone();
    c.mask.p = cell.p;
    c.train.lambda = cell.lambda;
    c.train.seed = cell.seed;
    c.paths.world = Some(cfg.paths.world_file());
    c.paths.checkpoint = None;
    c.paths.dump_mask = false;
    c.paths.svg = false;
    let hash = c.training_hash();
    c.paths.out_dir = cfg
        .paths
        .out_dir
        .join("ablate")
        .join(format!("cell-{}", &hash[..16]));
    c
}

#[derive(Debug)]
pub enum CellStatus {
    Done(EvalReport),
    Skipped(EvalReport),
    Failed(String),
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub cells: Vec<(AblateCell, CellStatus)>,
    pub csv: PathBuf,
}

/// Worker count from `CTXSSL_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Hash over everything that determines a cell's report.
fn cell_hash(c: &RunConfig) -> String {
    let probe = serde_json::to_string(&c.probe).expect("probe serializes");
    sha256_hex(format!("{}:{probe}", c.training_hash()).as_bytes())
}

fn run_cell(cfg: &RunConfig, cell: &AblateCell) -> CellStatus {
    let c = cell_config(cfg, cell);
    let marker = c.paths.out_dir.join("cell.sha256");
    let hash = cell_hash(&c);
    if fs::read_to_string(&marker).is_ok_and(|h| h.trim() == hash) {
        if let Ok(prev) = report::read_json(&c.paths.out_dir.join("report.json")) {
            return CellStatus::Skipped(prev);
        }
    }
    let done = train(&c, TrainOptions::default())
        .and_then(|_| eval(&c))
        .and_then(|o| {
            fs::write(&marker, &hash).map_err(|e| CliError::io(&marker, e))?;
            Ok(o.report)
        });
    match done {
        Ok(r) => CellStatus::Done(r),
        Err(e) => CellStatus::Failed(e.to_string()),
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<AblateOutcome> {
    write_resolved(cfg, "ablate")?;
    if !cfg.paths.world_file().exists() {
        return Err(CliError::Config(format!(
            "world file {} does not exist",
            cfg.paths.world_file().display()
        )));
    }
    let cells = ablate_cells(cfg);
    let workers = thread_cap()?.min(cells.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CellStatus>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let status = run_cell(cfg, &cells[i]);
                *slots[i].lock().unwrap() = Some(status);
            });
        }
    });
    let results: Vec<(AblateCell, CellStatus)> = cells
        .into_iter()
        .zip(slots)
        .map(|(c, s)| (c, s.into_inner().unwrap().expect("every cell ran")))
        .collect();

    let csv_path = cfg.paths.out_dir.join("ablate.csv");
    write_ablate_csv(&results, &csv_path)?;
    let ok = results
        .iter()
        .any(|(_, s)| !matches!(s, CellStatus::Failed(_)));
    if !ok {
        let first = results.iter().find_map(|(_, s)| match s {
            CellStatus::Failed(m) => Some(m.clone()),
            _ => None,
        });
        return Err(CliError::Numeric(format!(
            "every ablation cell failed; first: {}",
            first.unwrap_or_default()
        )));
    }
    Ok(AblateOutcome {
        cells: results,
        csv: csv_path,
    })
}

fn write_ablate_csv(results: &[(AblateCell, CellStatus)], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "p", "lambda", "seed", "status", "group", "mode", "length", "metric", "value",
    ])
    .map_err(to_err)?;
    for (cell, status) in results {
        let head = [
            cell.p.to_string(),
            cell.lambda.to_string(),
            cell.seed.to_string(),
        ];
        match status {
            CellStatus::Done(r) | CellStatus::Skipped(r) => {
                let tag = if matches!(status, CellStatus::Done(_)) {
                    "done"
                } else {
                    "skipped"
                };
                for row in report::all_rows(r) {
                    let rec = [
                        head[0].clone(),
                        head[1].clone(),
                        head[2].clone(),
                        tag.to_string(),
                        row.group,
                        row.mode,
                        row.length.to_string(),
                        row.metric,
                        row.value.to_string(),
                    ];
                    w.write_record(&rec).map_err(to_err)?;
                }
            }
            CellStatus::Failed(msg) => {
                let rec = [
                    head[0].clone(),
                    head[1].clone(),
                    head[2].clone(),
                    "failed".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                    String::new(),
                ];
                w.write_record(&rec).map_err(to_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_sweep_axes() {
        let mut cfg = RunConfig::default();
        let cells = ablate_cells(&cfg);
        let ps: Vec<f64> = cells
            .iter()
            .filter(|c| c.lambda == cfg.train.lambda)
            .map(|c| c.p)
            .collect();
        assert_eq!(ps, vec![0.0, 0.2, 0.5, 0.75, 0.9, 0.98]);
        assert!(cells.contains(&AblateCell {
            p: 0.9,
            lambda: 0.0,
            seed: 0
        }));
        assert_eq!(cells.len(), 7);
        cfg.ablate.sweep = SweepAxes::Lambda;
        assert_eq!(ablate_cells(&cfg).len(), 2);
    }

    #[test]
    fn cell_dirs_differ_per_cell() {
        let cfg = RunConfig::default();
        let cells = ablate_cells(&cfg);
        let a = cell_config(&cfg, &cells[0]).paths.out_dir;
        let b = cell_config(&cfg, &cells[1]).paths.out_dir;
        assert_ne!(a, b);
    }
}
