use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use super::config::{ExperimentConfig, Mode};
use super::report::{energy_per_flop, report_merge, DetectionCounts, MergedReport, RunReport, RunTiming};
use super::ExperimentError;
use crate::dsl::{parse, validate_with, Program, Severity};
use crate::graph::{compile, partition, DataflowGraph, DeploymentPlan, Endpoint, Manifest};
use crate::mlkit::{count_forward_flops, evaluate, load_idx, partition as shard, Dataset, ModelParams};
use crate::runtime::{encode_frame, run_group, run_plan_local, Bindings, ExecutionTrace, RunOptions, TensorMsg};
use crate::schemes::{self, fl_bindings, read_frames, synthetic_frames, tree_bindings, FlLog, FlSetup, Scheme, StubDetector, TreeLog, TreeSetup};

pub const MNIST_DIR_ENV: &str = "DMLFLOW_MNIST_DIR";

/// Training and test split.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

fn io_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Loads the IDX files from the configured directory, `DMLFLOW_MNIST_DIR`
/// or `data/mnist`.
pub fn load_mnist(cfg: &ExperimentConfig) -> Result<Mnist, ExperimentError> {
    let dir = cfg
        .data
        .dir
        .clone()
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    let load = |images: &str, labels: &str| {
        load_idx(&dir.join(images), &dir.join(labels)).map_err(|e| ExperimentError::MissingDataset {
            dir: dir.display().to_string(),
            message: e.to_string(),
        })
    };
    let mut train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let mut test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    if let Some(n) = cfg.train.train_limit {
        train = train.take(n);
    }
    if let Some(n) = cfg.train.test_limit {
        test = test.take(n);
    }
    Ok(Mnist { train, test })
}

/// The configured DSL file, or the built-in program of the scheme.
pub fn load_program(cfg: &ExperimentConfig, seed: u64) -> Result<Program, ExperimentError> {
    match &cfg.experiment.program {
        Some(path) => Ok(parse(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)?),
        None => Ok(schemes::build(&cfg.federation(seed))?),
    }
}

/// One dgroup per top-level home, unhomed nodes in `master`, with endpoints
/// on consecutive localhost ports.
pub fn default_plan(g: &DataflowGraph, base_port: u16) -> Result<DeploymentPlan, ExperimentError> {
    let assignment = g.assignment_by_home("master");
    let groups: std::collections::BTreeSet<&String> = assignment.iter().map(|(_, grp)| grp).collect();
    let endpoints: BTreeMap<String, Endpoint> = groups
        .into_iter()
        .enumerate()
        .map(|(i, grp)| (grp.clone(), Endpoint::new("127.0.0.1", base_port.saturating_add(i as u16))))
        .collect();
    Ok(partition(g, &assignment, &endpoints)?)
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub trace: ExecutionTrace,
    /// Final models of the output nodes, in node order.
    pub models: Vec<ModelParams>,
    pub alerts_jsonl: Option<String>,
}

enum Logs {
    Fl(Arc<FlLog>, Option<Dataset>, usize),
    Tree(Arc<TreeLog>, f32),
}

fn bindings_for(cfg: &ExperimentConfig, seed: u64, data: Option<&Mnist>) -> Result<(Bindings, Logs), ExperimentError> {
    match cfg.experiment.scheme {
        Scheme::MasterWorker | Scheme::P2p => {
            let data = data.ok_or_else(|| ExperimentError::Config("federated schemes need MNIST".into()))?;
            let shards = shard(&data.train, cfg.experiment.workers, seed)?;
            let shard_size = shards.first().map_or(0, Dataset::len);
            let test = cfg.train.evaluate.then(|| data.test.clone());
            let setup = FlSetup {
                arch: cfg.arch()?,
                hyperparams: cfg.hyperparams(),
                seed,
                shards: Arc::new(shards),
                test: test.clone().map(Arc::new),
                record_models: false,
                log: Arc::new(FlLog::default()),
            };
            Ok((fl_bindings(&setup), Logs::Fl(setup.log, Some(data.test.clone()), shard_size)))
        }
        Scheme::Tree => {
            let t = &cfg.tree;
            let frames = if t.frame_files.is_empty() {
                (0..t.leaves).map(|l| synthetic_frames(seed, l, t.frames, t.height, t.width)).collect()
            } else {
                t.frame_files.iter().map(|p| read_frames(p)).collect::<Result<Vec<_>, _>>()?
            };
            let setup = TreeSetup {
                threshold: t.threshold,
                frames: Arc::new(frames),
                detector: Arc::new(move |_| Box::new(StubDetector::new(seed))),
                log: Arc::new(TreeLog::default()),
            };
            Ok((tree_bindings(&setup), Logs::Tree(setup.log, t.threshold)))
        }
    }
}

/// One execution with `seed`. FL schemes need `data`.
pub fn run_once(cfg: &ExperimentConfig, seed: u64, data: Option<&Mnist>) -> Result<RunArtifacts, ExperimentError> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let program = load_program(cfg, seed)?;
    let (bindings, logs) = bindings_for(cfg, seed, data)?;
    let errors: Vec<String> = validate_with(&program, &bindings)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(ExperimentError::Invalid(errors.join("\n")));
    }
    let g = compile(&program, &bindings)?;
    let plan = match &e.manifest {
        Some(path) => Manifest::parse(&fs::read_to_string(path).map_err(|err| io_err(path, err))?)?.plan(&g)?,
        None => default_plan(&g, e.base_port)?,
    };
    let opts = RunOptions {
        seed,
        watchdog: Duration::from_secs(e.watchdog_secs.max(1)),
        ..RunOptions::default()
    };
    let out = match e.mode {
        Mode::Local => run_plan_local(&plan, &bindings, &opts)?,
        Mode::Dist => run_group(&plan, e.group.as_deref().expect("validated"), &bindings, &opts)?,
    };

    let trace = out.trace.clone();
    let mut report = RunReport {
        scheme: e.scheme,
        mode: e.mode.to_string(),
        group: if e.mode == Mode::Dist { e.group.clone() } else { None },
        seed,
        workers: e.workers,
        rounds: e.rounds,
        messages: trace.total_messages(),
        bytes: trace.channels.iter().map(|c| c.bytes).sum(),
        inter_messages: trace.inter_messages(),
        inter_bytes: trace.inter_bytes(),
        accuracy: Vec::new(),
        final_accuracy: None,
        peer_max_abs_diff: None,
        detections: None,
        energy_per_flop_j: None,
        timing: RunTiming {
            wall_s: trace.wall_ms / 1e3,
            node_busy_ms: trace.node_busy_ms.clone(),
            rounds: trace.rounds.clone(),
        },
    };
    let mut models = Vec::new();
    let mut alerts_jsonl = None;
    match logs {
        Logs::Fl(log, test, shard_size) => {
            models = out
                .results()
                .iter()
                .map(|p| ModelParams::from_tensors(p))
                .collect::<Result<Vec<_>, _>>()?;
            report.accuracy = log.accuracy_of(0).iter().filter(|a| a.round >= 2).map(|a| a.accuracy).collect();
            if let (Some(first), Some(test)) = (models.first(), &test) {
                let acc = evaluate(first, test)?;
                report.final_accuracy = Some(acc);
                if cfg.train.evaluate {
                    report.accuracy.push(acc);
                }
            }
            if models.len() > 1 {
                report.peer_max_abs_diff = models[1..]
                    .iter()
                    .filter_map(|m| m.max_abs_diff(&models[0]))
                    .reduce(f32::max);
            }
            if let Some(en) = &cfg.energy {
                let fwd = count_forward_flops(&cfg.arch()?);
                report.energy_per_flop_j = Some(energy_per_flop(
                    en.mean_power_w,
                    en.t_epoch_s,
                    en.images.unwrap_or(shard_size as u32),
                    fwd,
                    en.flops_backward.unwrap_or(2 * fwd),
                )?);
            }
        }
        Logs::Tree(log, tau) => {
            let emitted = log.emitted();
            report.detections = Some(DetectionCounts {
                emitted: emitted.len() as u64,
                above_threshold: emitted.iter().filter(|d| d.score > tau).count() as u64,
                alerts: log.alerts().len() as u64,
            });
            alerts_jsonl = Some(log.alerts_jsonl());
        }
    }
    Ok(RunArtifacts {
        report,
        trace,
        models,
        alerts_jsonl,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serialises") + "\n"
}

/// `report.json`, `timing.json`, `trace.csv`, `trace.json`, plus
/// `model.bin` for FL runs and `alerts.jsonl` for the tree.
pub fn write_artifacts(dir: &Path, a: &RunArtifacts) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join("report.json"), json(&a.report))?;
    write(&dir.join("timing.json"), json(&a.report.timing))?;
    write(&dir.join("trace.csv"), a.trace.to_csv())?;
    write(&dir.join("trace.json"), json(&a.trace.summary_json()))?;
    if let Some(m) = a.models.first() {
        write(&dir.join("model.bin"), encode_frame(&TensorMsg::data(0, 0, a.report.rounds, m.to_tensors())))?;
    }
    if let Some(alerts) = &a.alerts_jsonl {
        write(&dir.join("alerts.jsonl"), alerts)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunArtifacts>,
    pub merged: MergedReport,
}

/// Runs `repetitions` times with seeds `seed + i` and writes the artifacts
/// under the output directory: directly for a single run, else one
/// `run-<i>` directory per run plus `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let data = match cfg.experiment.scheme {
        Scheme::Tree => None,
        _ => Some(load_mnist(cfg)?),
    };
    let e = &cfg.experiment;
    let mut runs = Vec::with_capacity(e.repetitions as usize);
    for i in 0..e.repetitions {
        let a = run_once(cfg, e.seed + i as u64, data.as_ref())?;
        let dir = if e.repetitions == 1 {
            e.out.clone()
        } else {
            e.out.join(format!("run-{i}"))
        };
        write_artifacts(&dir, &a)?;
        runs.push(a);
    }
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    let merged = report_merge(&reports)?;
    if e.repetitions > 1 {
        write(&e.out.join("summary.json"), json(&merged))?;
    }
    Ok(ExperimentOutcome { runs, merged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Overrides;

    fn tree_cfg(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse("[experiment]\nscheme = \"tree\"\n[tree]\nframes = 12\nthreshold = 0.4\n").unwrap();
        cfg.apply(&Overrides {
            out: Some(out.to_path_buf()),
            ..Default::default()
        });
        cfg
    }

    #[test]
    fn tree_experiment_writes_reproducible_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tree_cfg(dir.path());
        let first = run_experiment(&cfg).unwrap();
        let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let alerts = fs::read_to_string(dir.path().join("alerts.jsonl")).unwrap();
        let counts = first.runs[0].report.detections.unwrap();
        assert_eq!(counts.alerts, counts.above_threshold);
        assert_eq!(alerts.lines().count() as u64, counts.alerts);
        assert!(fs::read_to_string(dir.path().join("trace.csv")).unwrap().starts_with("src,dst,messages,bytes\n"));

        run_experiment(&cfg).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("report.json")).unwrap(), report);
        assert_eq!(fs::read_to_string(dir.path().join("alerts.jsonl")).unwrap(), alerts);
    }

    #[test]
    fn repetitions_use_consecutive_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tree_cfg(dir.path());
        cfg.experiment.repetitions = 3;
        cfg.experiment.seed = 5;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.merged.seeds, [5, 6, 7]);
        assert!(dir.path().join("run-2/report.json").exists());
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn fl_without_dataset_is_reported() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.dir = Some(PathBuf::from("/nonexistent/mnist"));
        assert!(matches!(run_experiment(&cfg), Err(ExperimentError::MissingDataset { .. })));
    }

    #[test]
    fn default_plan_groups_by_home() {
        let cfg = ExperimentConfig::default();
        let p = load_program(&cfg, 0).unwrap();
        let g = crate::graph::compile_structure(&p).unwrap();
        let plan = default_plan(&g, 9100).unwrap();
        assert_eq!(plan.dgroups.keys().collect::<Vec<_>>(), ["W0", "W1", "master"]);
        assert_eq!(plan.endpoints["master"].port, 9102);
    }
}
