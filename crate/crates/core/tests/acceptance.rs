//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use icrm::beta::BetaParams;
use icrm::eval::{
    bandit_alignment, calibration_curve, heldout_accuracy, hypervolume, isotonic_fit, pareto_sweep,
    pearson, r2_iso, r2_ols, AccuracyProtocol, BanditConfig, ParetoPoint, RewardSource, SweepSize,
    DEFAULT_MIX_RATIOS,
};
use icrm::model::{train, ModelParams, Objective, TaskMode, TraceRecord, TrainConfig};
use icrm::objective::{edge_coefficient_check, interior_optimum, OptimumStatus, Regularizer};
use icrm::rng;
use icrm::synth::{build_context, gen_objective, WorldConfig};
use icrm::verify::Suite;
use rand::Rng as _;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&Models) -> Outcome);

struct Trained {
    params: ModelParams,
    trace: Vec<TraceRecord>,
}

/// Models shared between criteria, trained on first use.
struct Models {
    world: WorldConfig,
    cache: Mutex<HashMap<(u64, u64), &'static Trained>>,
}

impl Models {
    fn get(&self, objective: Objective, seed: u64) -> &'static Trained {
        let key = match objective {
            Objective::Icrm { lambda, .. } => (lambda.to_bits(), seed),
            Objective::Bt => (u64::MAX, seed),
        };
        if let Some(t) = self.cache.lock().unwrap().get(&key) {
            return t;
        }
        let cfg = match objective {
            Objective::Bt => TrainConfig::bt_baseline(BT_OBJECTIVE_SEED, seed),
            o => TrainConfig::new(o, seed),
        };
        let (params, trace) = train(&self.world, &cfg).expect("training converges");
        let t: &'static Trained = Box::leak(Box::new(Trained { params, trace }));
        self.cache.lock().unwrap().insert(key, t);
        t
    }

    fn icrm(&self, lambda: f64, seed: u64) -> &'static Trained {
        self.get(Objective::icrm(lambda), seed)
    }
}

const BT_OBJECTIVE_SEED: u64 = 4242;
const FINAL_WINDOW: usize = 100;

fn final_means(trace: &[TraceRecord]) -> (f64, f64) {
    let tail = &trace[trace.len() - FINAL_WINDOW..];
    let n = tail.len() as f64;
    (
        tail.iter().map(|r| r.mu_mean).sum::<f64>() / n,
        tail.iter().map(|r| r.tau_mean).sum::<f64>() / n,
    )
}

fn budget(start: Instant, limit: Duration) -> Result<String, String> {
    let took = start.elapsed();
    if took <= limit {
        Ok(format!("{:.1}s", took.as_secs_f64()))
    } else {
        Err(format!("took {:.1}s, budget {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn kl_oracle(_: &Models) -> Outcome {
    let start = Instant::now();
    let c = Suite::default().kl_agreement();
    let t = budget(start, Duration::from_secs(5))?;
    let msg = format!("max |closed - quadrature| = {:.2e} over {} pairs ({t})", c.worst, c.cases);
    if c.passed && c.cases == 500 {
        Ok(msg)
    } else {
        Err(format!("{msg}: {:?}", c.failure))
    }
}

fn gradient_exactness(_: &Models) -> Outcome {
    let start = Instant::now();
    let s = Suite::default();
    let checks = [s.gradient_mu_tau(), s.gradient_heads(), s.gradient_model()];
    let t = budget(start, Duration::from_secs(30))?;
    let msg = checks
        .iter()
        .map(|c| format!("{} {:.1e} ({} cases)", c.name, c.worst, c.cases))
        .collect::<Vec<_>>()
        .join(", ");
    match checks.iter().find(|c| !c.passed) {
        None => Ok(format!("{msg} ({t})")),
        Some(c) => Err(format!("{msg}: {:?}", c.failure)),
    }
}

fn interior_check(_: &Models) -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for lambda in [0.01, 0.1, 0.5, 1.0] {
        let o = interior_optimum(Regularizer::new(BetaParams::uniform(), lambda), 400, 400, 200.0)
            .map_err(|e| e.to_string())?;
        // Stationary point of the loss with a uniform prior: α* = 1 + 1/λ, β* = 1.
        let tau_star = 2.0 + 1.0 / lambda;
        let mu_star = (1.0 + 1.0 / lambda) / tau_star;
        let interior = o.status == OptimumStatus::Interior
            && (1e-3..=1.0 - 1e-3).contains(&o.mu)
            && o.tau <= 180.0;
        let dominated = o.boundary_losses.iter().all(|&b| b > o.loss);
        let near = ((o.tau - tau_star) / tau_star).abs() < 1e-3 && (o.mu - mu_star).abs() < 1e-4;
        if !(interior && dominated && near) {
            return Err(format!(
                "lambda {lambda}: mu* {} tau* {} (closed form {mu_star}, {tau_star}), status {:?}, boundary {:?} vs {}",
                o.mu, o.tau, o.status, o.boundary_losses, o.loss
            ));
        }
        parts.push(format!("λ={lambda}: μ*={:.4} τ*={:.2}", o.mu, o.tau));
    }
    let t = budget(start, Duration::from_secs(60))?;
    Ok(format!("{} ({t})", parts.join(", ")))
}

fn edge_check(_: &Models) -> Outcome {
    let start = Instant::now();
    let eps = [1e-3, 1e-4, 1e-5, 1e-6];
    let rows = edge_coefficient_check(3.0, 0.1, BetaParams::uniform(), &eps).map_err(|e| e.to_string())?;
    let u: Vec<f64> = rows.iter().map(|r| r.utility_deviation()).collect();
    let c: Vec<f64> = rows.iter().map(|r| r.confidence_deviation()).collect();
    let t = budget(start, Duration::from_secs(1))?;
    let dec = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(" ");
    let msg = format!("utility deviations [{}], confidence deviations [{}]", fmt(&u), fmt(&c));
    if dec(&u) && dec(&c) && u[3] <= 1e-3 && c[3] <= 1e-3 {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

const LAMBDAS: [f64; 3] = [0.1, 0.5, 1.0];
const SEEDS: [u64; 3] = [0, 1, 2];

fn lambda_ordering(m: &Models) -> Outcome {
    let start = Instant::now();
    let mut mus = Vec::new();
    let mut taus = Vec::new();
    for lambda in LAMBDAS {
        let (mut mu, mut tau) = (0.0, 0.0);
        for seed in SEEDS {
            let tr = &m.icrm(lambda, seed).trace;
            if tr.len() != 2000 {
                return Err(format!("trace has {} steps", tr.len()));
            }
            let (a, b) = final_means(tr);
            mu += a / SEEDS.len() as f64;
            tau += b / SEEDS.len() as f64;
        }
        mus.push(mu);
        taus.push(tau);
    }
    let t = budget(start, Duration::from_secs(300))?;
    let msg = format!("μ {mus:.4?}, τ {taus:.3?} for λ {LAMBDAS:?}");
    let ordered = |v: &[f64]| v.windows(2).all(|w| w[0] - w[1] > 0.01);
    if ordered(&mus) && ordered(&taus) {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

fn steerability(m: &Models) -> Outcome {
    let start = Instant::now();
    let world = m.world;
    let acc = |p: &ModelParams, n: usize, task: TaskMode, reversed: bool, seed: u64| {
        let mut proto = AccuracyProtocol::new(n, task);
        proto.episodes = 500;
        proto.reversed = reversed;
        heldout_accuracy(p, &world, &proto, rng::derive(seed, "acceptance-eval", 0)).expect("eval")
    };
    let seeds = [0u64, 1, 2, 3];
    let (mut a1, mut a16, mut r16) = (0.0, 0.0, 0.0);
    for &s in &seeds {
        let p = &m.icrm(0.1, s).params;
        a1 += acc(p, 1, TaskMode::InContext, false, s) / 4.0;
        a16 += acc(p, 16, TaskMode::InContext, false, s) / 4.0;
        r16 += acc(p, 16, TaskMode::InContext, true, s) / 4.0;
    }
    let fixed = TaskMode::Fixed { objective_seed: BT_OBJECTIVE_SEED };
    let (mut bs, mut br) = (0.0, 0.0);
    for s in [0u64, 1] {
        let p = &m.get(Objective::Bt, s).params;
        bs += acc(p, 16, fixed, false, s) / 2.0;
        br += acc(p, 16, fixed, true, s) / 2.0;
    }
    let t = budget(start, Duration::from_secs(300))?;
    let pct = |x: f64| 100.0 * x;
    let msg = format!(
        "ICRM N=1 {:.1}%, N=16 {:.1}%, reversed N=16 {:.1}%; BT standard {:.1}%, reversed {:.1}%",
        pct(a1),
        pct(a16),
        pct(r16),
        pct(bs),
        pct(br)
    );
    let ok = pct(a16) - pct(a1) >= 10.0
        && (pct(r16) - pct(a16)).abs() <= 5.0
        && pct(br) <= 100.0 - pct(bs) + 5.0;
    if ok {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

fn calibration_trend(m: &Models) -> Outcome {
    let start = Instant::now();
    let ns = [1usize, 2, 4, 8, 16];
    let mut mean = vec![0.0; ns.len()];
    for s in SEEDS {
        let curve = calibration_curve(&m.icrm(0.1, s).params, &m.world, TaskMode::InContext, &ns, &[s + 100], 100)
            .map_err(|e| e.to_string())?;
        for (acc, c) in mean.iter_mut().zip(&curve) {
            *acc += c.tau_mean / SEEDS.len() as f64;
        }
    }
    let t = budget(start, Duration::from_secs(120))?;
    let msg = format!("τ over N {ns:?}: {mean:.3?}");
    if mean.windows(2).all(|w| w[1] >= w[0]) && mean[4] - mean[0] >= 0.2 {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

fn pareto_trend(m: &Models) -> Outcome {
    let start = Instant::now();
    let world = m.world;
    let p = &m.icrm(0.1, 0).params;
    let a = gen_objective(world.dim, 31).map_err(|e| e.to_string())?;
    let b = gen_objective(world.dim, 32).map_err(|e| e.to_string())?;
    let mut hvs = Vec::new();
    for n in [1usize, 2, 4, 8, 16] {
        let pts: Vec<ParetoPoint> = pareto_sweep(p, &world, &a, &b, n, &DEFAULT_MIX_RATIOS, &[7, 8], SweepSize::default())
            .map_err(|e| e.to_string())?;
        let respond_ok = pts.windows(2).all(|w| w[1].respond_acc >= w[0].respond_acc - 0.03);
        let refuse_ok = pts.windows(2).all(|w| w[1].refuse_acc <= w[0].refuse_acc + 0.03);
        if !(respond_ok && refuse_ok) {
            let pairs: Vec<_> = pts.iter().map(|q| (q.respond_acc, q.refuse_acc)).collect();
            return Err(format!("N={n}: trade-off not monotone: {pairs:.3?}"));
        }
        hvs.push(hypervolume(&pts, (0.0, 0.0)).map_err(|e| e.to_string())?);
    }
    let t = budget(start, Duration::from_secs(300))?;
    let msg = format!("monotone at N 1..16; HV {hvs:.4?}");
    if hvs[4] > hvs[0] {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

fn grid_hv(points: &[(f64, f64)], cells: usize) -> f64 {
    let h = 1.0 / cells as f64;
    let mut inside = 0usize;
    for i in 0..cells {
        let x = (i as f64 + 0.5) * h;
        let top = points
            .iter()
            .filter(|p| x <= p.0)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        inside += (0..cells).filter(|&j| (j as f64 + 0.5) * h <= top).count();
    }
    inside as f64 * h * h
}

fn statistics_oracles(_: &Models) -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = r.random_range(1..10);
        let pts: Vec<(f64, f64)> = (0..k).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
        let pp: Vec<ParetoPoint> = pts
            .iter()
            .map(|&(x, y)| ParetoPoint { respond_acc: x, refuse_acc: y, mix_ratio: 0.0, n_demos: 1 })
            .collect();
        let hv = hypervolume(&pp, (0.0, 0.0)).map_err(|e| e.to_string())?;
        worst = worst.max((hv - grid_hv(&pts, 2000)).abs());
    }
    if worst > 2e-3 {
        return Err(format!("hypervolume off grid oracle by {worst:.2e}"));
    }
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [1.0, 3.0, 2.0, 4.0];
    let fit = isotonic_fit(&xs, &ys);
    let iso = r2_iso(&xs, &ys).map_err(|e| e.to_string())?;
    if fit != [1.0, 2.5, 2.5, 4.0] || (iso - 0.9).abs() > 1e-12 {
        return Err(format!("PAVA example gave {fit:?}, r2_iso {iso}"));
    }
    let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let perfect = [pearson(&xs, &lin), r2_ols(&xs, &lin), r2_iso(&xs, &lin)];
    if perfect.iter().any(|v| v.as_ref().ok() != Some(&1.0)) {
        return Err(format!("perfect linear case gave {perfect:?}"));
    }
    let t = budget(start, Duration::from_secs(10))?;
    Ok(format!("HV grid error {worst:.1e} on 50 sets; PAVA r2_iso = {iso}; linear case exact ({t})"))
}

fn bandit_alignment_trend(m: &Models) -> Outcome {
    let start = Instant::now();
    let world = m.world;
    let mut parts = Vec::new();
    let mut ok = true;
    for s in SEEDS {
        let p = &m.icrm(0.1, s).params;
        let verifier = gen_objective(world.dim, 500 + s).map_err(|e| e.to_string())?;
        let ctx = build_context(&verifier, &verifier, 32, 1.0, world.margin_scale, 600 + s).map_err(|e| e.to_string())?;
        let rep = bandit_alignment(RewardSource::Model { params: p, context: &ctx }, &verifier, &BanditConfig::new(s))
            .map_err(|e| e.to_string())?;
        let r = rep.correlation.map_or(f64::NAN, |c| c.pearson_r);
        ok &= r > 0.5 && rep.best_arm_prob > 0.5;
        parts.push(format!("seed {s}: r={r:.3} best-arm={:.3}", rep.best_arm_prob));
    }
    let t = budget(start, Duration::from_secs(180))?;
    let msg = parts.join(", ");
    if ok {
        Ok(format!("{msg} ({t})"))
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let models = Models { world: WorldConfig::default(), cache: Mutex::new(HashMap::new()) };
    let criteria: [Criterion; 10] = [
        ("KL oracle", kl_oracle),
        ("gradient exactness", gradient_exactness),
        ("interior optimum", interior_check),
        ("edge coefficients", edge_check),
        ("lambda ordering of mu and tau", lambda_ordering),
        ("in-context steerability", steerability),
        ("tau grows with N", calibration_trend),
        ("pareto trade-off and hypervolume", pareto_trend),
        ("statistics oracles", statistics_oracles),
        ("bandit reward alignment", bandit_alignment_trend),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&models)))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>())));
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
