//! Self-check suite: special-function recurrences, KL against quadrature,
//! analytic gradients against finite differences, edge behaviour of the
//! gradient, and interior optima of the loss.

use rand::Rng as _;
use serde::Serialize;

use crate::beta::{kl_beta, kl_beta_quadrature, BetaParams};
use crate::error::Result;
use crate::model::{backward, training_instance, ModelParams, Objective, TrainConfig};
use crate::objective::{
    edge_coefficient_check, grad_heads, grad_mu_tau, icrm_loss, interior_optimum, reparameterize,
    HeadScores, OptimumStatus, Regularizer, VariationalOutput,
};
use crate::rng;
use crate::specfun::{digamma, log_gamma, trigamma};
use crate::synth::WorldConfig;

pub type KlFn = fn(BetaParams, BetaParams) -> f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, in the check's own units (largest τ* for the
    /// optimum check).
    pub worst: f64,
    /// The first violated case, with its inputs.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Suite parameters. The KL function is injectable so the suite itself can
/// be tested against a broken implementation.
#[derive(Debug, Clone)]
pub struct Suite {
    pub kl: KlFn,
    pub seed: u64,
    pub kl_pairs: usize,
    pub kl_tolerance: f64,
    pub grad_points: usize,
    pub grad_tolerance: f64,
    pub model_instances: usize,
    pub model_tolerance: f64,
    pub optimum_grid: usize,
}

impl Default for Suite {
    fn default() -> Self {
        Self {
            kl: kl_beta,
            seed: 0,
            kl_pairs: 500,
            kl_tolerance: 1e-7,
            grad_points: 200,
            grad_tolerance: 1e-5,
            model_instances: 50,
            model_tolerance: 1e-4,
            optimum_grid: 400,
        }
    }
}

/// Tracks the worst case and the first failure of one check.
struct Tally {
    name: &'static str,
    cases: usize,
    worst: f64,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            worst: 0.0,
            failure: None,
        }
    }

    fn record(&mut self, err: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if !ok && self.failure.is_none() {
            self.failure = Some(describe());
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            passed: self.failure.is_none(),
            cases: self.cases,
            worst: self.worst,
            failure: self.failure,
        }
    }
}

/// |a − b| / max(|a|, |b|, floor).
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Five-point central difference.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

fn log_uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    (r.random_range(lo.ln()..hi.ln())).exp()
}

impl Suite {
    pub fn run(&self) -> VerifyReport {
        VerifyReport {
            checks: vec![
                self.specfun_recurrences(),
                self.kl_agreement(),
                self.gradient_mu_tau(),
                self.gradient_heads(),
                self.gradient_model(),
                self.edge_coefficients(),
                self.interior_optima(),
            ],
        }
    }

    pub fn specfun_recurrences(&self) -> CheckOutcome {
        let mut t = Tally::new("specfun recurrences");
        let mut r = rng::seeded(rng::derive(self.seed, "specfun", 0));
        for _ in 0..1000 {
            let x = log_uniform(&mut r, 1e-3, 1e3);
            let run = || -> Result<[f64; 3]> {
                let lg = log_gamma(x + 1.0)? - log_gamma(x)? - x.ln();
                let lg = lg.abs() / log_gamma(x + 1.0)?.abs().max(1.0);
                let d = (digamma(x + 1.0)? - digamma(x)? - 1.0 / x).abs() / (1.0 / x).max(1.0);
                let t1 = (trigamma(x + 1.0)? - trigamma(x)? + 1.0 / (x * x)).abs()
                    / (1.0 / (x * x)).max(1.0);
                Ok([lg, d, t1])
            };
            match run() {
                Ok([lg, d, t1]) => {
                    let err = lg.max(d).max(t1 * 1e-2);
                    t.record(err, lg <= 1e-12 && d <= 1e-12 && t1 <= 1e-10, || {
                        format!("x = {x}: lgamma {lg:e}, digamma {d:e}, trigamma {t1:e}")
                    });
                }
                Err(e) => t.record(f64::INFINITY, false, || format!("x = {x}: {e}")),
            }
        }
        t.finish()
    }

    pub fn kl_agreement(&self) -> CheckOutcome {
        let mut t = Tally::new("kl agreement");
        let mut r = rng::seeded(rng::derive(self.seed, "kl", 0));
        for _ in 0..self.kl_pairs {
            let s: [f64; 4] = std::array::from_fn(|_| log_uniform(&mut r, 0.1, 50.0));
            let q = BetaParams::new(s[0], s[1]).expect("positive shapes");
            let p = BetaParams::new(s[2], s[3]).expect("positive shapes");
            let closed = (self.kl)(q, p);
            match kl_beta_quadrature(q, p, 256) {
                Ok(quad) => {
                    let err = (closed - quad).abs();
                    t.record(err, err <= self.kl_tolerance, || {
                        format!("q = {q:?}, p = {p:?}: closed form {closed}, quadrature {quad}")
                    });
                }
                Err(e) => t.record(f64::INFINITY, false, || format!("q = {q:?}, p = {p:?}: {e}")),
            }
        }
        t.finish()
    }

    fn random_regularizer(r: &mut rng::Rng) -> Regularizer {
        let prior = BetaParams::new(r.random_range(0.5..5.0), r.random_range(0.5..5.0))
            .expect("positive shapes");
        Regularizer::new(prior, r.random_range(0.0..2.0))
    }

    pub fn gradient_mu_tau(&self) -> CheckOutcome {
        let mut t = Tally::new("gradient mu tau");
        let mut r = rng::seeded(rng::derive(self.seed, "grad_mu_tau", 0));
        for _ in 0..self.grad_points {
            let reg = Self::random_regularizer(&mut r);
            let mu: f64 = r.random_range(0.05..0.95);
            let tau = log_uniform(&mut r, 1.2, 60.0);
            let v = VariationalOutput::from_mean(mu, tau).expect("valid point");
            let g = grad_mu_tau(&v, reg);
            let loss = |m: f64, k: f64| icrm_loss(&VariationalOutput::from_mean(m, k).expect("valid point"), reg);
            let fd_mu = central_difference(|m| loss(m, tau), mu, 1e-4 * mu.min(1.0 - mu));
            let fd_tau = central_difference(|k| loss(mu, k), tau, 1e-4 * tau);
            let err = relative_error(g.d_mu, fd_mu, 1e-8).max(relative_error(g.d_tau, fd_tau, 1e-8));
            t.record(err, err <= self.grad_tolerance, || {
                format!(
                    "mu = {mu}, tau = {tau}, lambda = {}, prior = {:?}: analytic ({}, {}), numeric ({fd_mu}, {fd_tau})",
                    reg.lambda, reg.prior, g.d_mu, g.d_tau
                )
            });
        }
        t.finish()
    }

    pub fn gradient_heads(&self) -> CheckOutcome {
        let mut t = Tally::new("gradient heads");
        let mut r = rng::seeded(rng::derive(self.seed, "grad_heads", 0));
        for _ in 0..self.grad_points {
            let reg = Self::random_regularizer(&mut r);
            let h = HeadScores {
                u_w: r.random_range(-4.0..4.0),
                u_l: r.random_range(-4.0..4.0),
                s_w: r.random_range(-3.0..3.0),
                s_l: r.random_range(-3.0..3.0),
            };
            let g = grad_heads(&h, reg);
            let loss = |h: HeadScores| icrm_loss(&reparameterize(&h), reg);
            let step = 1e-4;
            let fd = [
                central_difference(|x| loss(HeadScores { u_w: x, ..h }), h.u_w, step),
                central_difference(|x| loss(HeadScores { u_l: x, ..h }), h.u_l, step),
                central_difference(|x| loss(HeadScores { s_w: x, ..h }), h.s_w, step),
                central_difference(|x| loss(HeadScores { s_l: x, ..h }), h.s_l, step),
            ];
            let an = [g.d_u_w, g.d_u_l, g.d_s_w, g.d_s_l];
            let err = an
                .iter()
                .zip(&fd)
                .map(|(a, n)| relative_error(*a, *n, 1e-8))
                .fold(0.0, f64::max);
            t.record(err, err <= self.grad_tolerance, || {
                format!("heads = {h:?}, lambda = {}, prior = {:?}: analytic {an:?}, numeric {fd:?}", reg.lambda, reg.prior)
            });
        }
        t.finish()
    }

    pub fn gradient_model(&self) -> CheckOutcome {
        let mut t = Tally::new("gradient model");
        let world = WorldConfig::default();
        let d = world.dim;
        let mut r = rng::seeded(rng::derive(self.seed, "grad_model", 0));
        for i in 0..self.model_instances {
            let objective = if i % 5 == 4 {
                Objective::Bt
            } else {
                Objective::Icrm {
                    lambda: r.random_range(0.0..1.0),
                    prior: BetaParams::new(r.random_range(0.5..3.0), r.random_range(0.5..3.0))
                        .expect("positive shapes"),
                }
            };
            let cfg = TrainConfig::new(objective, rng::derive(self.seed, "grad_model_data", i as u64));
            let (ctx, pair) = match training_instance(&world, &cfg, 0) {
                Ok(x) => x,
                Err(e) => {
                    t.record(f64::INFINITY, false, || format!("instance {i}: {e}"));
                    continue;
                }
            };
            let mut params = ModelParams::init(d, rng::derive(self.seed, "grad_model_init", i as u64));
            params.w_agg.iter_mut().for_each(|w| *w *= 0.3);
            params.b_agg.iter_mut().for_each(|b| *b = r.random_range(-0.1..0.1));
            params.w_conf.iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));

            let analytic = match backward(&params, &ctx, &pair, &objective) {
                Ok(b) => b.grad,
                Err(e) => {
                    t.record(f64::INFINITY, false, || format!("instance {i}: {e}"));
                    continue;
                }
            };
            let loss_with = |p: &ModelParams| backward(p, &ctx, &pair, &objective).map(|b| b.loss).unwrap_or(f64::NAN);
            let mut worst = (0.0, String::new());
            let mut probe = |slot: &str, k: usize, a: f64, set: &dyn Fn(&mut ModelParams, f64), x0: f64| {
                let numeric = central_difference(
                    |x| {
                        let mut p = params.clone();
                        set(&mut p, x);
                        loss_with(&p)
                    },
                    x0,
                    1e-4,
                );
                let err = relative_error(a, numeric, 1e-7);
                if err.is_nan() || err > worst.0 {
                    worst = (err, format!("{slot}[{k}]: analytic {a}, numeric {numeric}"));
                }
            };
            for k in 0..d * d {
                probe("w_agg", k, analytic.w_agg[k], &|p, x| p.w_agg[k] = x, params.w_agg[k]);
            }
            for k in 0..d {
                probe("b_agg", k, analytic.b_agg[k], &|p, x| p.b_agg[k] = x, params.b_agg[k]);
            }
            for k in 0..3 {
                probe("w_conf", k, analytic.w_conf[k], &|p, x| p.w_conf[k] = x, params.w_conf[k]);
            }
            let (err, at) = worst;
            t.record(err, err <= self.model_tolerance, || {
                format!("instance {i} ({objective:?}, N = {}): {at}", ctx.len())
            });
        }
        t.finish()
    }

    pub fn edge_coefficients(&self) -> CheckOutcome {
        let mut t = Tally::new("edge coefficients");
        let eps = [1e-3, 1e-4, 1e-5, 1e-6];
        match edge_coefficient_check(3.0, 0.1, BetaParams::uniform(), &eps) {
            Ok(rows) => {
                let u: Vec<f64> = rows.iter().map(|s| s.utility_deviation()).collect();
                let c: Vec<f64> = rows.iter().map(|s| s.confidence_deviation()).collect();
                let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
                let last = u[u.len() - 1].max(c[c.len() - 1]);
                let ok = decreasing(&u) && decreasing(&c) && last <= 1e-3;
                t.record(last, ok, || {
                    format!("tau = 3, lambda = 0.1, prior (1, 1), eps {eps:?}: utility deviations {u:?}, confidence deviations {c:?}")
                });
            }
            Err(e) => t.record(f64::INFINITY, false, || format!("tau = 3, lambda = 0.1: {e}")),
        }
        t.finish()
    }

    pub fn interior_optima(&self) -> CheckOutcome {
        let mut t = Tally::new("interior optimum");
        for lambda in [0.01, 0.1, 0.5, 1.0] {
            let reg = Regularizer::new(BetaParams::uniform(), lambda);
            match interior_optimum(reg, self.optimum_grid, self.optimum_grid, 200.0) {
                Ok(o) => {
                    let gap = o.boundary_losses.iter().fold(f64::INFINITY, |m, b| m.min(b - o.loss));
                    let ok = o.status == OptimumStatus::Interior
                        && (1e-3..=1.0 - 1e-3).contains(&o.mu)
                        && o.tau <= 180.0
                        && gap > 0.0;
                    t.record(o.tau, ok, || {
                        format!(
                            "lambda = {lambda}: mu* = {}, tau* = {}, loss* = {}, status {:?}, boundary {:?}",
                            o.mu, o.tau, o.loss, o.status, o.boundary_losses
                        )
                    });
                }
                Err(e) => t.record(f64::INFINITY, false, || format!("lambda = {lambda}: {e}")),
            }
        }
        t.finish()
    }
}
