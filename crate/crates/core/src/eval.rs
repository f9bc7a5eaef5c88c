//! Measurement: accuracy, τ calibration, Pareto sweeps and hypervolume,
//! correlation statistics, and the bandit reward-alignment harness.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, score_single, ModelParams, TaskMode};
use crate::objective::reparameterize;
use crate::rng;
use crate::synth::{
    build_context, dot, normal_vec, sample_triple, DemonstrationSet, ObjectiveVector,
    PreferenceTriple, WorldConfig,
};

pub const DEFAULT_MIX_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_ARM_ACCURACIES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Fraction of `eval_set` where the model puts μ > 0.5 on the labelled
/// chosen candidate. Exact ties count as wrong.
pub fn accuracy(
    params: &ModelParams,
    context: &DemonstrationSet,
    eval_set: &[PreferenceTriple],
) -> Result<f64> {
    Ok(correct_count(params, context, eval_set)? as f64 / eval_set.len() as f64)
}

fn correct_count(
    params: &ModelParams,
    context: &DemonstrationSet,
    eval_set: &[PreferenceTriple],
) -> Result<usize> {
    if eval_set.is_empty() {
        return Err(Error::Precondition("accuracy needs a nonempty eval set".into()));
    }
    let mut hits = 0;
    for t in eval_set {
        if reparameterize(&forward(params, context, t)?).mu > 0.5 {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Held-out accuracy protocol: `episodes` fresh contexts of size `n_demos`,
/// each scored on `queries` fresh triples from the same objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyProtocol {
    pub n_demos: usize,
    pub episodes: usize,
    pub queries: usize,
    pub task: TaskMode,
    /// Draw context and labels from the negated objective.
    pub reversed: bool,
}

impl AccuracyProtocol {
    pub fn new(n_demos: usize, task: TaskMode) -> Self {
        Self {
            n_demos,
            episodes: 200,
            queries: 20,
            task,
            reversed: false,
        }
    }
}

pub fn heldout_accuracy(
    params: &ModelParams,
    world: &WorldConfig,
    proto: &AccuracyProtocol,
    seed: u64,
) -> Result<f64> {
    if proto.episodes == 0 || proto.queries == 0 {
        return Err(Error::Precondition("episodes and queries must be >= 1".into()));
    }
    let mut hits = 0;
    for e in 0..proto.episodes as u64 {
        let es = rng::derive(seed, "episode", e);
        let mut obj = proto.task.objective(world.dim, es)?;
        if proto.reversed {
            obj = obj.reversed();
        }
        let ctx = build_context(&obj, &obj, proto.n_demos, 1.0, world.margin_scale, rng::derive(es, "context", 0))?;
        let queries: Vec<_> = (0..proto.queries as u64)
            .map(|q| sample_triple(&obj, world.margin_scale, rng::derive(es, "query", q)))
            .collect();
        hits += correct_count(params, &ctx, &queries)?;
    }
    Ok(hits as f64 / (proto.episodes * proto.queries) as f64)
}

/// Mean and spread of τ over seeds at one context size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub n_demos: usize,
    pub tau_mean: f64,
    pub tau_std: f64,
}

/// τ against context size. Each seed contributes the mean τ over
/// `episodes` contexts; the curve reports the mean and sample standard
/// deviation of those per-seed values.
pub fn calibration_curve(
    params: &ModelParams,
    world: &WorldConfig,
    task: TaskMode,
    n_values: &[usize],
    seeds: &[u64],
    episodes: usize,
) -> Result<Vec<CalibrationPoint>> {
    if n_values.is_empty() || seeds.is_empty() || episodes == 0 {
        return Err(Error::Precondition("calibration needs n_values, seeds and episodes".into()));
    }
    let probe = PreferenceTriple {
        phi_prompt: vec![0.0; world.dim],
        phi_chosen: vec![0.0; world.dim],
        phi_rejected: vec![0.0; world.dim],
        outcome: 1,
    };
    n_values
        .iter()
        .map(|&n| {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut total = 0.0;
                for e in 0..episodes as u64 {
                    let es = rng::derive(seed, "calibration", e);
                    let obj = task.objective(world.dim, es)?;
                    let ctx = build_context(&obj, &obj, n, 1.0, world.margin_scale, rng::derive(es, "context", n as u64))?;
                    total += reparameterize(&forward(params, &ctx, &probe)?).tau;
                }
                per_seed.push(total / episodes as f64);
            }
            let (tau_mean, tau_std) = mean_std(&per_seed);
            Ok(CalibrationPoint {
                n_demos: n,
                tau_mean,
                tau_std,
            })
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub respond_acc: f64,
    pub refuse_acc: f64,
    pub mix_ratio: f64,
    pub n_demos: usize,
}

/// Sizes of the Pareto evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSize {
    pub episodes: usize,
    pub queries: usize,
}

impl Default for SweepSize {
    fn default() -> Self {
        Self {
            episodes: 100,
            queries: 20,
        }
    }
}

/// One averaged point per ratio. Contexts mix `obj_a` and `obj_b`;
/// respond accuracy is scored on `obj_a` labels, refuse accuracy on `obj_b`
/// labels, both under the same mixed context.
#[allow(clippy::too_many_arguments)]
pub fn pareto_sweep(
    params: &ModelParams,
    world: &WorldConfig,
    obj_a: &ObjectiveVector,
    obj_b: &ObjectiveVector,
    n: usize,
    mix_ratios: &[f64],
    seeds: &[u64],
    size: SweepSize,
) -> Result<Vec<ParetoPoint>> {
    if seeds.is_empty() || size.episodes == 0 || size.queries == 0 {
        return Err(Error::Precondition("pareto sweep needs seeds, episodes and queries".into()));
    }
    mix_ratios
        .iter()
        .map(|&ratio| {
            let (mut respond, mut refuse) = (0usize, 0usize);
            for &seed in seeds {
                for e in 0..size.episodes as u64 {
                    // Episodes share seeds across ratios so that neighbouring
                    // points differ only through the context composition.
                    let es = rng::derive(rng::derive(seed, "pareto", 0), "episode", e);
                    let ctx = build_context(obj_a, obj_b, n, ratio, world.margin_scale, rng::derive(es, "context", 0))?;
                    let qa: Vec<_> = (0..size.queries as u64)
                        .map(|q| sample_triple(obj_a, world.margin_scale, rng::derive(es, "respond", q)))
                        .collect();
                    let qb: Vec<_> = (0..size.queries as u64)
                        .map(|q| sample_triple(obj_b, world.margin_scale, rng::derive(es, "refuse", q)))
                        .collect();
                    respond += correct_count(params, &ctx, &qa)?;
                    refuse += correct_count(params, &ctx, &qb)?;
                }
            }
            let total = (seeds.len() * size.episodes * size.queries) as f64;
            Ok(ParetoPoint {
                respond_acc: respond as f64 / total,
                refuse_acc: refuse as f64 / total,
                mix_ratio: ratio,
                n_demos: n,
            })
        })
        .collect()
}

/// Area dominated by `points` relative to `reference`.
pub fn hypervolume(points: &[ParetoPoint], reference: (f64, f64)) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if !(p.respond_acc >= reference.0 && p.refuse_acc >= reference.1) {
            return Err(Error::Domain {
                function: "hypervolume",
                value: p.respond_acc.min(p.refuse_acc),
                expected: "points at or above the reference in both coordinates",
            });
        }
        pts.push((p.respond_acc, p.refuse_acc));
    }
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut y_max = reference.1;
    for (x, y) in pts {
        if y > y_max {
            area += (x - reference.0) * (y - y_max);
            y_max = y;
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson_r: f64,
    pub r2_ols: f64,
    pub r2_iso: f64,
}

fn check_stats_input(function: &'static str, xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Structural(format!(
            "{function}: {} xs but {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Domain {
            function,
            value: xs.len() as f64,
            expected: "at least 3 points",
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Domain {
            function,
            value: f64::NAN,
            expected: "finite inputs",
        });
    }
    for (v, what) in [(xs, "xs with nonzero variance"), (ys, "ys with nonzero variance")] {
        if sum_sq_dev(v) == 0.0 {
            return Err(Error::Domain {
                function,
                value: 0.0,
                expected: what,
            });
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_stats_input("pearson", xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let r = sxy / (sum_sq_dev(xs) * sum_sq_dev(ys)).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// In-sample R² of the least-squares line.
pub fn r2_ols(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_stats_input("r2_ols", xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let sxx = sum_sq_dev(xs);
    let slope = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    Ok(1.0 - ssr / sum_sq_dev(ys))
}

/// Nondecreasing least-squares fit of `ys` ordered by `xs`, returned in the
/// input order. Points sharing an x are pooled before fitting.
pub fn isotonic_fit(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));

    // Blocks of (sum, weight, members).
    let mut blocks: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    for &i in &order {
        match blocks.last_mut() {
            Some(last) if xs[last.2[0]] == xs[i] => {
                last.0 += ys[i];
                last.1 += 1.0;
                last.2.push(i);
            }
            _ => blocks.push((ys[i], 1.0, vec![i])),
        }
        while blocks.len() >= 2 {
            let k = blocks.len();
            if blocks[k - 2].0 / blocks[k - 2].1 <= blocks[k - 1].0 / blocks[k - 1].1 {
                break;
            }
            let top = blocks.pop().expect("two blocks");
            let prev = blocks.last_mut().expect("two blocks");
            prev.0 += top.0;
            prev.1 += top.1;
            prev.2.extend(top.2);
        }
    }
    let mut fit = vec![0.0; xs.len()];
    for (sum, weight, members) in blocks {
        for i in members {
            fit[i] = sum / weight;
        }
    }
    fit
}

/// In-sample R² of the isotonic fit.
pub fn r2_iso(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_stats_input("r2_iso", xs, ys)?;
    let fit = isotonic_fit(xs, ys);
    let ssr: f64 = ys.iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
    Ok(1.0 - ssr / sum_sq_dev(ys))
}

pub fn correlation_report(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        pearson_r: pearson(xs, ys)?,
        r2_ols: r2_ols(xs, ys)?,
        r2_iso: r2_iso(xs, ys)?,
    })
}

/// Where bandit rewards come from.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    /// softplus(s)·u from a trained model under a fixed context.
    Model {
        params: &'a ModelParams,
        context: &'a DemonstrationSet,
    },
    /// 1 for a correct response, 0 otherwise.
    Oracle,
    /// Always zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    /// Probability that each arm emits a correct response.
    pub arm_accuracies: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl BanditConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            arm_accuracies: DEFAULT_ARM_ACCURACIES.to_vec(),
            steps: 150,
            batch_size: 64,
            learning_rate: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let accs = &self.arm_accuracies;
        if accs.len() < 2 || accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Precondition(
                "bandit needs at least two arms with accuracies in [0, 1]".into(),
            ));
        }
        if accs.iter().all(|&a| a == accs[0]) {
            return Err(Error::Precondition("arm accuracies must not all be equal".into()));
        }
        if self.steps == 0 || self.batch_size < 2 {
            return Err(Error::Precondition("bandit needs steps >= 1 and batch_size >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditReport {
    pub batch_reward: Vec<f64>,
    pub batch_gold: Vec<f64>,
    /// Absent when either per-batch series is constant.
    pub correlation: Option<CorrelationReport>,
    pub initial_best_arm_prob: f64,
    pub best_arm_prob: f64,
    pub final_policy: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// A response whose projection on `verifier` is positive iff `correct`.
fn response(rng: &mut rng::Rng, verifier: &ObjectiveVector, correct: bool) -> Vec<f64> {
    let w = verifier.weights();
    let mut phi = normal_vec(rng, w.len());
    let proj = dot(&phi, w);
    let target = if correct { proj.abs() } else { -proj.abs() };
    phi.iter_mut().zip(w).for_each(|(p, wi)| *p += (target - proj) * wi);
    phi
}

/// Softmax policy over candidate generators trained by policy gradient on
/// the chosen reward. Advantages are batch rewards centred and scaled by
/// the batch standard deviation. Correlation is computed between per-batch
/// mean reward and per-batch gold accuracy.
pub fn bandit_alignment(
    reward: RewardSource<'_>,
    verifier: &ObjectiveVector,
    cfg: &BanditConfig,
) -> Result<BanditReport> {
    cfg.validate()?;
    if let RewardSource::Model { params, .. } = reward {
        if params.dim() != verifier.dim() {
            return Err(Error::Structural(format!(
                "verifier has dim {}, model expects {}",
                verifier.dim(),
                params.dim()
            )));
        }
    }
    let k = cfg.arm_accuracies.len();
    let best = (0..k)
        .max_by(|&a, &b| cfg.arm_accuracies[a].total_cmp(&cfg.arm_accuracies[b]))
        .expect("at least two arms");
    let mut logits = vec![0.0; k];
    let initial_best_arm_prob = softmax(&logits)[best];
    let mut rng = rng::seeded(rng::derive(cfg.seed, "bandit", 0));
    let mut batch_reward = Vec::with_capacity(cfg.steps);
    let mut batch_gold = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let pi = softmax(&logits);
        let mut arms = Vec::with_capacity(cfg.batch_size);
        let mut rewards = Vec::with_capacity(cfg.batch_size);
        let mut gold = 0usize;
        for _ in 0..cfg.batch_size {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let arm = pi
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(k - 1);
            let correct = rng.random::<f64>() < cfg.arm_accuracies[arm];
            let prompt = normal_vec(&mut rng, verifier.dim());
            let phi = response(&mut rng, verifier, correct);
            let r = match reward {
                RewardSource::Model { params, context } => score_single(params, context, &prompt, &phi)?,
                RewardSource::Oracle => f64::from(u8::from(correct)),
                RewardSource::Zero => 0.0,
            };
            gold += usize::from(correct);
            arms.push(arm);
            rewards.push(r);
        }
        let (mean_r, std_r) = mean_std(&rewards);
        batch_reward.push(mean_r);
        batch_gold.push(gold as f64 / cfg.batch_size as f64);
        if std_r > 1e-12 {
            let mut grad = vec![0.0; k];
            for (&arm, &r) in arms.iter().zip(&rewards) {
                let adv = (r - mean_r) / std_r;
                for (j, g) in grad.iter_mut().enumerate() {
                    let indicator = if j == arm { 1.0 } else { 0.0 };
                    *g += adv * (indicator - pi[j]);
                }
            }
            for (l, g) in logits.iter_mut().zip(&grad) {
                *l += cfg.learning_rate * g / cfg.batch_size as f64;
            }
        }
    }

    let final_policy = softmax(&logits);
    Ok(BanditReport {
        correlation: correlation_report(&batch_reward, &batch_gold).ok(),
        best_arm_prob: final_policy[best],
        initial_best_arm_prob,
        final_policy,
        batch_reward,
        batch_gold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::synth::gen_objective;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> ParetoPoint {
        ParetoPoint {
            respond_acc: x,
            refuse_acc: y,
            mix_ratio: 0.0,
            n_demos: 1,
        }
    }

    fn grid_hypervolume(points: &[(f64, f64)], cells: usize) -> f64 {
        let h = 1.0 / cells as f64;
        let mut inside = 0usize;
        for i in 0..cells {
            let x = (i as f64 + 0.5) * h;
            for j in 0..cells {
                let y = (j as f64 + 0.5) * h;
                if points.iter().any(|&(px, py)| x <= px && y <= py) {
                    inside += 1;
                }
            }
        }
        inside as f64 * h * h
    }

    #[test]
    fn hypervolume_examples() {
        assert_eq!(hypervolume(&[pt(1.0, 1.0)], (0.0, 0.0)).unwrap(), 1.0);
        let three = [pt(0.8, 0.2), pt(0.5, 0.5), pt(0.2, 0.8)];
        assert_relative_eq!(hypervolume(&three, (0.0, 0.0)).unwrap(), 0.37, max_relative = 1e-14);
        let coords: Vec<_> = three.iter().map(|p| (p.respond_acc, p.refuse_acc)).collect();
        assert!((grid_hypervolume(&coords, 2000) - 0.37).abs() < 1e-3);
        let mut four = three.to_vec();
        four.push(pt(0.4, 0.4));
        assert_eq!(
            hypervolume(&four, (0.0, 0.0)).unwrap(),
            hypervolume(&three, (0.0, 0.0)).unwrap()
        );
        assert!(matches!(
            hypervolume(&[pt(0.5, 0.5)], (0.6, 0.0)),
            Err(Error::Domain { .. })
        ));
        assert_eq!(hypervolume(&[], (0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn stats_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert_eq!(pearson(&xs, &ys).unwrap(), 1.0);
        assert_eq!(r2_ols(&xs, &ys).unwrap(), 1.0);
        assert_eq!(r2_iso(&xs, &ys).unwrap(), 1.0);

        assert!(matches!(pearson(&xs, &[3.0; 5]), Err(Error::Domain { .. })));
        assert!(matches!(r2_iso(&[1.0; 5], &ys), Err(Error::Domain { .. })));
        assert!(matches!(r2_ols(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Domain { .. })));

        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(isotonic_fit(&xs, &ys), vec![1.0, 2.5, 2.5, 4.0]);
        assert_relative_eq!(r2_iso(&xs, &ys).unwrap(), 0.9, max_relative = 1e-14);
    }

    #[test]
    fn isotonic_fit_pools_ties_and_handles_unsorted_input() {
        // x = 2 appears twice with ys 5 and 1 → pooled to 3 before fitting.
        let xs = [3.0, 2.0, 1.0, 2.0];
        let ys = [4.0, 5.0, 0.0, 1.0];
        assert_eq!(isotonic_fit(&xs, &ys), vec![4.0, 3.0, 0.0, 3.0]);
        // Full reversal collapses to the mean.
        let fit = isotonic_fit(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert_eq!(fit, vec![2.0; 3]);
    }

    /// Brute-force isotonic oracle: the best nondecreasing fit is constant
    /// on each block of some partition into runs; enumerate all partitions.
    fn brute_isotonic_ssr(ys: &[f64]) -> f64 {
        let n = ys.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            let mut fit = Vec::with_capacity(n);
            let mut start = 0;
            for i in 0..n {
                if i == n - 1 || mask & (1 << i) != 0 {
                    let m = ys[start..=i].iter().sum::<f64>() / (i + 1 - start) as f64;
                    fit.extend(std::iter::repeat_n(m, i + 1 - start));
                    start = i + 1;
                }
            }
            if fit.windows(2).all(|w| w[0] <= w[1] + 1e-12) {
                let ssr: f64 = ys.iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
                best = best.min(ssr);
            }
        }
        best
    }

    #[test]
    fn accuracy_of_zero_model_is_zero() {
        let world = WorldConfig::default();
        let p = ModelParams::zeros(world.dim);
        let proto = AccuracyProtocol::new(4, TaskMode::InContext);
        assert_eq!(heldout_accuracy(&p, &world, &proto, 1).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_rejects_empty_eval_set() {
        let world = WorldConfig::default();
        let obj = gen_objective(world.dim, 1).unwrap();
        let ctx = build_context(&obj, &obj, 2, 1.0, 2.0, 3).unwrap();
        let p = ModelParams::zeros(world.dim);
        assert!(matches!(accuracy(&p, &ctx, &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn oracle_head_matches_bayes_accuracy() {
        // With W = 0 and b = margin_scale·w the utility is the true margin.
        let world = WorldConfig::default();
        let obj = gen_objective(world.dim, 11).unwrap();
        let mut p = ModelParams::zeros(world.dim);
        p.b_agg = obj.weights().iter().map(|w| world.margin_scale * w).collect();
        let ctx = build_context(&obj, &obj, 1, 1.0, world.margin_scale, 0).unwrap();
        let set: Vec<_> = (0..5000)
            .map(|i| sample_triple(&obj, world.margin_scale, rng::derive(7, "q", i)))
            .collect();
        let acc = accuracy(&p, &ctx, &set).unwrap();
        // Monte-Carlo Bayes accuracy E[σ(m·|w·Δφ|)] from fresh draws.
        let mut r = rng::seeded(99);
        let bayes = (0..200_000)
            .map(|_| {
                let a = normal_vec(&mut r, world.dim);
                let b = normal_vec(&mut r, world.dim);
                crate::specfun::sigmoid(world.margin_scale * obj.margin(&a, &b).abs())
            })
            .sum::<f64>()
            / 200_000.0;
        assert!((acc - bayes).abs() < 0.02, "acc {acc} bayes {bayes}");
    }

    #[test]
    fn reversal_symmetry_of_linear_model() {
        let world = WorldConfig::default();
        let p = ModelParams::identity(world.dim);
        let mut proto = AccuracyProtocol::new(8, TaskMode::InContext);
        proto.episodes = 50;
        let standard = heldout_accuracy(&p, &world, &proto, 4).unwrap();
        proto.reversed = true;
        let reversed = heldout_accuracy(&p, &world, &proto, 4).unwrap();
        // Same draws with every sign flipped: the linear pipeline is odd in
        // the context and in the labels, so the counts agree exactly.
        assert_eq!(standard, reversed);
    }

    #[test]
    fn untrained_calibration_is_constant() {
        let world = WorldConfig::default();
        let p = ModelParams::init(world.dim, 3);
        let curve = calibration_curve(&p, &world, TaskMode::InContext, &[1, 4, 16], &[1, 2], 5).unwrap();
        let expected = 2.0 * 2f64.ln() + 1.0;
        for c in &curve {
            assert_relative_eq!(c.tau_mean, expected, max_relative = 1e-15);
            assert_eq!(c.tau_std, 0.0);
        }
        let single = calibration_curve(&p, &world, TaskMode::InContext, &[1], &[1], 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn pareto_sweep_shape_and_determinism() {
        let world = WorldConfig::default();
        let p = ModelParams::identity(world.dim);
        let a = gen_objective(world.dim, 1).unwrap();
        let b = gen_objective(world.dim, 2).unwrap();
        let size = SweepSize { episodes: 10, queries: 5 };
        let s1 = pareto_sweep(&p, &world, &a, &b, 4, &DEFAULT_MIX_RATIOS, &[1], size).unwrap();
        let s2 = pareto_sweep(&p, &world, &a, &b, 4, &DEFAULT_MIX_RATIOS, &[1], size).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 5);
        assert_eq!(DEFAULT_MIX_RATIOS, [0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(s1.iter().all(|q| (0.0..=1.0).contains(&q.respond_acc) && q.n_demos == 4));
    }

    #[test]
    fn bandit_oracle_reward_is_perfectly_aligned() {
        let obj = gen_objective(8, 3).unwrap();
        let report = bandit_alignment(RewardSource::Oracle, &obj, &BanditConfig::new(1)).unwrap();
        let c = report.correlation.unwrap();
        assert_relative_eq!(c.pearson_r, 1.0, max_relative = 1e-12);
        assert!(report.best_arm_prob > report.initial_best_arm_prob);
    }

    #[test]
    fn bandit_zero_reward_keeps_uniform_policy() {
        let obj = gen_objective(8, 3).unwrap();
        let report = bandit_alignment(RewardSource::Zero, &obj, &BanditConfig::new(1)).unwrap();
        for p in &report.final_policy {
            assert!((p - 0.25).abs() < 1e-6);
        }
        assert!(report.correlation.is_none());
    }

    #[test]
    fn bandit_rejects_degenerate_arms() {
        let obj = gen_objective(8, 3).unwrap();
        let mut cfg = BanditConfig::new(1);
        cfg.arm_accuracies = vec![0.5, 0.5];
        assert!(bandit_alignment(RewardSource::Oracle, &obj, &cfg).is_err());
        cfg.arm_accuracies = vec![0.5];
        assert!(bandit_alignment(RewardSource::Oracle, &obj, &cfg).is_err());
    }

    #[test]
    fn bandit_responses_respect_correctness() {
        let obj = gen_objective(8, 5).unwrap();
        let mut r = rng::seeded(1);
        for i in 0..200 {
            let correct = i % 2 == 0;
            let phi = response(&mut r, &obj, correct);
            assert_eq!(dot(&phi, obj.weights()) > 0.0, correct);
        }
    }

    fn point_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn hypervolume_matches_grid_oracle(pts in point_set()) {
            let ps: Vec<_> = pts.iter().map(|&(x, y)| pt(x, y)).collect();
            let hv = hypervolume(&ps, (0.0, 0.0)).unwrap();
            prop_assert!((hv - grid_hypervolume(&pts, 1000)).abs() < 2e-3);
        }

        #[test]
        fn hypervolume_is_monotone(pts in point_set(), extra in (0.0..1.0f64, 0.0..1.0f64)) {
            let mut ps: Vec<_> = pts.iter().map(|&(x, y)| pt(x, y)).collect();
            let before = hypervolume(&ps, (0.0, 0.0)).unwrap();
            ps.push(pt(extra.0, extra.1));
            let after = hypervolume(&ps, (0.0, 0.0)).unwrap();
            prop_assert!(after >= before - 1e-15);
            // A point dominated by an existing one changes nothing.
            let (x0, y0) = pts[0];
            ps.push(pt(x0 * 0.5, y0 * 0.5));
            prop_assert_eq!(hypervolume(&ps, (0.0, 0.0)).unwrap(), after);
        }

        #[test]
        fn pearson_is_affine_invariant(
            data in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..30),
            a in 0.1..10.0f64, b in -5.0..5.0f64, c in 0.1..10.0f64, d in -5.0..5.0f64,
        ) {
            let xs: Vec<f64> = data.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = data.iter().map(|p| p.1).collect();
            prop_assume!(sum_sq_dev(&xs) > 1e-6 && sum_sq_dev(&ys) > 1e-6);
            let r = pearson(&xs, &ys).unwrap();
            let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let yt: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
            prop_assert!((pearson(&xt, &yt).unwrap() - r).abs() < 1e-12);
        }

        #[test]
        fn iso_dominates_ols_for_nonnegative_slope(
            slope in 0.0..3.0f64,
            noise in prop::collection::vec(-1.0..1.0f64, 5..40),
        ) {
            let xs: Vec<f64> = (0..noise.len()).map(|i| i as f64).collect();
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| slope * x + 3.0 * e).collect();
            let ols = r2_ols(&xs, &ys).unwrap();
            let iso = r2_iso(&xs, &ys).unwrap();
            prop_assert!(iso >= ols - 1e-12, "iso {} ols {}", iso, ols);
            prop_assert!((-1.0..=1.0).contains(&pearson(&xs, &ys).unwrap()));
        }

        #[test]
        fn isotonic_fit_matches_brute_force(ys in prop::collection::vec(-5.0..5.0f64, 2..10)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
            let fit = isotonic_fit(&xs, &ys);
            prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            let ssr: f64 = ys.iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
            prop_assert!((ssr - brute_isotonic_ssr(&ys)).abs() < 1e-9);
        }
    }
}
