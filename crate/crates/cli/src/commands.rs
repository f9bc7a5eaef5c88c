use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use icrm::eval::{
    bandit_alignment, calibration_curve, heldout_accuracy, hypervolume, pareto_sweep,
    AccuracyProtocol, BanditConfig, RewardSource, SweepSize, DEFAULT_ARM_ACCURACIES,
};
use icrm::model::{train as train_model, ModelParams, Objective, TraceRecord};
use icrm::rng::derive;
use icrm::synth::{build_context, gen_objective};
use icrm::verify::{Suite, VerifyReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::CliError;

/// Runs the verification suite, prints one line per check, and optionally
/// writes the full report as JSON.
pub fn verify(suite: &Suite, report: Option<&Path>, out: &mut dyn Write) -> Result<VerifyReport, CliError> {
    let result = suite.run();
    for c in &result.checks {
        if c.passed {
            writeln!(out, "ok    {} ({} cases, worst {:.3e})", c.name, c.cases, c.worst)?;
        } else {
            writeln!(out, "FAIL  {}: {}", c.name, c.failure.as_deref().unwrap_or("?"))?;
        }
    }
    if let Some(path) = report {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let doc = json!({ "schema_version": SCHEMA_VERSION, "seed": suite.seed, "passed": result.passed(), "checks": result.checks });
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    }
    let failed: Vec<String> = result
        .failures()
        .map(|c| format!("{} ({})", c.name, c.failure.as_deref().unwrap_or("?")))
        .collect();
    if failed.is_empty() {
        Ok(result)
    } else {
        Err(CliError::Invariant(failed.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub status: RunStatus,
    pub message: Option<String>,
    pub steps_completed: usize,
    /// Final values are means over the last `final_window` steps.
    pub final_window: usize,
    pub final_loss: Option<f64>,
    pub final_mu: Option<f64>,
    pub final_tau: Option<f64>,
}

/// Reads a metrics document and rejects other schema versions.
pub fn read_metrics(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    match doc.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(doc),
        Some(v) => Err(CliError::Config(format!(
            "{}: unsupported schema_version {v}, expected {SCHEMA_VERSION}",
            path.display()
        ))),
        None => Err(CliError::Config(format!("{}: missing schema_version", path.display()))),
    }
}

pub fn run_id(objective: &Objective, seed: u64) -> String {
    match objective {
        Objective::Icrm { lambda, .. } => format!("icrm-lambda{lambda}-seed{seed}"),
        Objective::Bt => format!("bt-seed{seed}"),
    }
}

const FINAL_WINDOW: usize = 100;

fn summarize(trace: &[TraceRecord]) -> (usize, f64, f64, f64) {
    let w = trace.len().min(FINAL_WINDOW);
    let tail = &trace[trace.len() - w..];
    let mean = |f: fn(&TraceRecord) -> f64| tail.iter().map(f).sum::<f64>() / w as f64;
    (w, mean(|r| r.loss), mean(|r| r.mu_mean), mean(|r| r.tau_mean))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains one run per objective into `out/<run id>`. Returns the run
/// directories. Refuses to start if any target directory already exists.
pub fn train(
    seed: u64,
    config: Option<&Path>,
    out: &Path,
    lambdas: &[f64],
    n: Option<usize>,
) -> Result<Vec<PathBuf>, CliError> {
    let base = ExperimentConfig::load(config, seed)?;
    let sweep = if lambdas.is_empty() { base.lambda_sweep.clone() } else { lambdas.to_vec() };
    let objectives: Vec<Objective> = if sweep.is_empty() {
        vec![base.train.objective]
    } else {
        let prior = match base.train.objective {
            Objective::Icrm { prior, .. } => prior,
            Objective::Bt => icrm::BetaParams::uniform(),
        };
        sweep.iter().map(|&lambda| Objective::Icrm { lambda, prior }).collect()
    };

    let mut runs = Vec::new();
    for objective in &objectives {
        let id = run_id(objective, seed);
        let dir = out.join(&id);
        if dir.exists() {
            return Err(CliError::Config(format!(
                "run directory {} already exists; refusing to overwrite",
                dir.display()
            )));
        }
        if runs.iter().any(|(d, _): &(PathBuf, _)| d == &dir) {
            return Err(CliError::Config(format!("duplicate run id {id} in sweep")));
        }
        let mut cfg = base.clone();
        cfg.lambda_sweep.clear();
        cfg.train.objective = *objective;
        if let Some(n) = n {
            cfg.train.n_values = vec![n];
        }
        runs.push((dir, cfg));
    }

    let mut aborted = Vec::new();
    for (dir, cfg) in &runs {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), cfg)?;
        let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let tc = cfg.train.to_train_config(seed);
        match train_model(&cfg.world, &tc) {
            Ok((params, trace)) => {
                write_csv(&dir.join("trace.csv"), &trace)?;
                fs::write(dir.join("checkpoint.json"), params.to_json())?;
                let (w, loss, mu, tau) = summarize(&trace);
                write_json(
                    &dir.join("metrics.json"),
                    &TrainMetrics {
                        schema_version: SCHEMA_VERSION,
                        run_id: id,
                        seed,
                        status: RunStatus::Ok,
                        message: None,
                        steps_completed: trace.len(),
                        final_window: w,
                        final_loss: Some(loss),
                        final_mu: Some(mu),
                        final_tau: Some(tau),
                    },
                )?;
            }
            Err(e @ icrm::Error::NonFinite { step }) => {
                write_json(
                    &dir.join("metrics.json"),
                    &TrainMetrics {
                        schema_version: SCHEMA_VERSION,
                        run_id: id.clone(),
                        seed,
                        status: RunStatus::Aborted,
                        message: Some(e.to_string()),
                        steps_completed: step - 1,
                        final_window: 0,
                        final_loss: None,
                        final_mu: None,
                        final_tau: None,
                    },
                )?;
                aborted.push(format!("{id}: {e}"));
            }
            Err(e) => return Err(CliError::Config(format!("{id}: {e}"))),
        }
    }
    if aborted.is_empty() {
        Ok(runs.into_iter().map(|(d, _)| d).collect())
    } else {
        Err(CliError::Numeric(aborted.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Accuracy,
    Calibration,
    Pareto,
    Bandit,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Accuracy => "accuracy",
            Protocol::Calibration => "calibration",
            Protocol::Pareto => "pareto",
            Protocol::Bandit => "bandit",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub n: Option<usize>,
    pub mix_ratio: Option<f64>,
    pub reversed: bool,
}

#[derive(Serialize)]
struct AccuracyRow {
    n_demos: usize,
    reversed: bool,
    accuracy: f64,
    accuracy_std: f64,
}

#[derive(Serialize)]
struct ParetoRow {
    mix_ratio: f64,
    n_demos: usize,
    respond_acc: f64,
    refuse_acc: f64,
}

#[derive(Serialize)]
struct BanditRow {
    batch: usize,
    mean_reward: f64,
    gold_accuracy: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Evaluates a checkpoint under one protocol, writing `metrics.json` and
/// `<protocol>.csv` into `out`.
pub fn eval(
    seed: u64,
    checkpoint: &Path,
    protocol: Protocol,
    config: Option<&Path>,
    out: &Path,
    flags: &EvalFlags,
) -> Result<serde_json::Value, CliError> {
    if flags.reversed && protocol != Protocol::Accuracy {
        return Err(CliError::Config("--reversed only applies to the accuracy protocol".into()));
    }
    if flags.mix_ratio.is_some() && protocol != Protocol::Pareto {
        return Err(CliError::Config("--mix-ratio only applies to the pareto protocol".into()));
    }
    if let Some(r) = flags.mix_ratio {
        if !(0.0..=1.0).contains(&r) {
            return Err(CliError::Config(format!("--mix-ratio must lie in [0, 1], got {r}")));
        }
    }
    if flags.n == Some(0) {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let cfg = ExperimentConfig::load(config, seed)?;
    let text = fs::read_to_string(checkpoint)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", checkpoint.display())))?;
    let params = ModelParams::from_json(&text)?;
    let world = cfg.world;
    if params.dim() != world.dim {
        return Err(CliError::Config(format!(
            "structural error: checkpoint has dim {}, world has dim {}",
            params.dim(),
            world.dim
        )));
    }
    let ev = &cfg.eval;
    let seeds: Vec<u64> = (0..ev.seeds as u64).map(|i| derive(seed, "eval", i)).collect();
    if seeds.is_empty() {
        return Err(CliError::Config("field `eval.seeds` must be >= 1".into()));
    }
    let n_values = |default: &[usize]| flags.n.map_or_else(|| default.to_vec(), |n| vec![n]);
    fs::create_dir_all(out)?;
    let csv_path = out.join(format!("{}.csv", protocol.name()));

    let body = match protocol {
        Protocol::Accuracy => {
            let mut rows = Vec::new();
            for n in n_values(&ev.n_values) {
                let mut proto = AccuracyProtocol::new(n, cfg.train.task);
                proto.episodes = ev.episodes;
                proto.queries = ev.queries;
                proto.reversed = flags.reversed;
                let per_seed = seeds
                    .iter()
                    .map(|&s| heldout_accuracy(&params, &world, &proto, s))
                    .collect::<Result<Vec<_>, _>>()?;
                let (accuracy, accuracy_std) = mean_std(&per_seed);
                rows.push(AccuracyRow { n_demos: n, reversed: flags.reversed, accuracy, accuracy_std });
            }
            write_csv(&csv_path, &rows)?;
            json!({ "reversed": flags.reversed, "rows": rows })
        }
        Protocol::Calibration => {
            let curve = calibration_curve(&params, &world, cfg.train.task, &n_values(&ev.n_values), &seeds, ev.episodes)?;
            write_csv(&csv_path, &curve)?;
            json!({ "curve": curve })
        }
        Protocol::Pareto => {
            let obj_a = gen_objective(world.dim, derive(seed, "objective_a", 0))?;
            let obj_b = gen_objective(world.dim, derive(seed, "objective_b", 0))?;
            let ratios = flags.mix_ratio.map_or_else(|| ev.mix_ratios.clone(), |r| vec![r]);
            let size = SweepSize { episodes: ev.episodes, queries: ev.queries };
            let mut rows = Vec::new();
            let mut by_n = Vec::new();
            for n in n_values(&ev.pareto_n_values) {
                let points = pareto_sweep(&params, &world, &obj_a, &obj_b, n, &ratios, &seeds, size)?;
                let hv = hypervolume(&points, (0.0, 0.0))?;
                rows.extend(points.iter().map(|p| ParetoRow {
                    mix_ratio: p.mix_ratio,
                    n_demos: p.n_demos,
                    respond_acc: p.respond_acc,
                    refuse_acc: p.refuse_acc,
                }));
                by_n.push(json!({ "n_demos": n, "hv": hv, "points": points }));
            }
            write_csv(&csv_path, &rows)?;
            json!({ "by_n": by_n })
        }
        Protocol::Bandit => {
            let verifier = gen_objective(world.dim, derive(seed, "verifier", 0))?;
            let n = flags.n.unwrap_or(ev.bandit.context_n);
            let ctx = build_context(&verifier, &verifier, n, 1.0, world.margin_scale, derive(seed, "bandit_context", 0))?;
            let bc = BanditConfig {
                arm_accuracies: DEFAULT_ARM_ACCURACIES.to_vec(),
                steps: ev.bandit.steps,
                batch_size: ev.bandit.batch_size,
                learning_rate: ev.bandit.learning_rate,
                seed: derive(seed, "bandit", 0),
            };
            let report = bandit_alignment(RewardSource::Model { params: &params, context: &ctx }, &verifier, &bc)?;
            let rows: Vec<BanditRow> = report
                .batch_reward
                .iter()
                .zip(&report.batch_gold)
                .enumerate()
                .map(|(i, (&r, &g))| BanditRow { batch: i + 1, mean_reward: r, gold_accuracy: g })
                .collect();
            write_csv(&csv_path, &rows)?;
            json!({
                "context_n": n,
                "arm_accuracies": bc.arm_accuracies,
                "correlation": report.correlation,
                "initial_best_arm_prob": report.initial_best_arm_prob,
                "best_arm_prob": report.best_arm_prob,
                "final_policy": report.final_policy,
            })
        }
    };

    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "protocol": protocol.name(),
        "seed": seed,
        "checkpoint": checkpoint.display().to_string(),
    });
    if let (Some(d), serde_json::Value::Object(b)) = (doc.as_object_mut(), body) {
        d.extend(b);
    }
    write_json(&out.join("metrics.json"), &doc)?;
    Ok(doc)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    run_id: &'a str,
    objective: &'a str,
    lambda: Option<f64>,
    seed: u64,
    step: usize,
    loss: f64,
    mu_mean: f64,
    tau_mean: f64,
}

/// Concatenates the traces of several runs into `out/report.csv`, with a
/// JSON summary of their final metrics.
pub fn report(seed: u64, runs: &[PathBuf], out: &Path) -> Result<PathBuf, CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    fs::create_dir_all(out)?;
    let csv_path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut summary = Vec::new();
    for dir in runs {
        let cfg_path = dir.join("config.json");
        let cfg_text = fs::read_to_string(&cfg_path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", cfg_path.display())))?;
        let cfg = ExperimentConfig::from_json(&cfg_text, &cfg_path.display().to_string())?;
        let metrics = read_metrics(&dir.join("metrics.json"))?;
        let run_seed = cfg.seed.ok_or_else(|| CliError::Config(format!("{}: missing seed", cfg_path.display())))?;
        let id = metrics.get("run_id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        let (objective, lambda) = match cfg.train.objective {
            Objective::Icrm { lambda, .. } => ("icrm", Some(lambda)),
            Objective::Bt => ("bt", None),
        };
        let trace_path = dir.join("trace.csv");
        if trace_path.exists() {
            let mut rd = csv::Reader::from_path(&trace_path)?;
            for rec in rd.deserialize::<TraceRecord>() {
                let r = rec?;
                w.serialize(ReportRow {
                    run_id: &id,
                    objective,
                    lambda,
                    seed: run_seed,
                    step: r.step,
                    loss: r.loss,
                    mu_mean: r.mu_mean,
                    tau_mean: r.tau_mean,
                })?;
            }
        }
        summary.push(metrics);
    }
    w.flush()?;
    write_json(
        &out.join("report.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "seed": seed, "runs": summary }),
    )?;
    Ok(csv_path)
}
