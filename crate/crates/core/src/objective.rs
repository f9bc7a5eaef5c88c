//! The ICRM objective: reparameterization of head scores into a Beta
//! posterior, the negative ELBO with its λ(N) schedule, the Bradley-Terry
//! baseline, and analytic gradients.
//!
//! The loss for a posterior Beta(μτ, (1−μ)τ) and prior Beta(α₀, β₀) is
//!
//! ```text
//! L(μ, τ) = −(ψ(μτ) − ψ(τ)) + λ_eff · KL(Beta(μτ, (1−μ)τ) ‖ Beta(α₀, β₀))
//! ```
//!
//! with λ_eff = λ / N. The observed outcome is always "chosen beats
//! rejected"; reversed preferences are expressed by swapping the pair.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use crate::beta::{kl_beta, BetaParams};
use crate::error::{Error, Result};
use crate::specfun::{logit_from_complement, psi, psi1, sigmoid, softplus};

/// Raw head outputs for the chosen (w) and rejected (l) responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub u_w: f64,
    pub u_l: f64,
    pub s_w: f64,
    pub s_l: f64,
}

/// Beta posterior in mean/concentration form. `alpha_q` and `beta_q` are
/// stored separately so that 1 − μ keeps full precision when μ is close
/// to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalOutput {
    pub mu: f64,
    pub tau: f64,
    pub alpha_q: f64,
    pub beta_q: f64,
}

impl VariationalOutput {
    /// Posterior with mean σ(`margin`) and concentration `tau`.
    pub fn from_margin(margin: f64, tau: f64) -> Self {
        let p = sigmoid(margin);
        let q = sigmoid(-margin);
        Self {
            mu: p,
            tau,
            alpha_q: p * tau,
            beta_q: q * tau,
        }
    }

    /// Posterior with mean `mu` ∈ (0, 1) and concentration `tau` > 0.
    pub fn from_mean(mu: f64, tau: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::Domain {
                function: "VariationalOutput::from_mean",
                value: mu,
                expected: "0 < mu < 1",
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain {
                function: "VariationalOutput::from_mean",
                value: tau,
                expected: "0 < tau < inf",
            });
        }
        Ok(Self {
            mu,
            tau,
            alpha_q: mu * tau,
            beta_q: (1.0 - mu) * tau,
        })
    }

    pub fn posterior(&self) -> BetaParams {
        BetaParams::new(self.alpha_q, self.beta_q).expect("posterior shapes are positive")
    }

    /// 1 − μ without cancellation.
    pub fn complement(&self) -> f64 {
        self.beta_q / self.tau
    }
}

/// Loss hyperparameters: base KL weight λ, prior, and context size N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_base: f64,
    pub prior: BetaParams,
    pub n_demos: usize,
}

impl LossConfig {
    pub fn new(lambda_base: f64, prior: BetaParams, n_demos: usize) -> Result<Self> {
        if !(lambda_base >= 0.0 && lambda_base.is_finite()) {
            return Err(Error::Precondition(format!(
                "lambda must be finite and nonnegative, got {lambda_base}"
            )));
        }
        if n_demos == 0 {
            return Err(Error::Precondition("n_demos must be at least 1".into()));
        }
        Ok(Self {
            lambda_base,
            prior,
            n_demos,
        })
    }

    pub fn regularizer(&self) -> Regularizer {
        Regularizer {
            prior: self.prior,
            lambda: lambda_schedule(self),
        }
    }
}

/// KL prior together with its effective (post-schedule) weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    pub prior: BetaParams,
    pub lambda: f64,
}

impl Regularizer {
    pub fn new(prior: BetaParams, lambda: f64) -> Self {
        Self { prior, lambda }
    }
}

/// ∂L/∂μ and ∂L/∂τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradPair {
    pub d_mu: f64,
    pub d_tau: f64,
}

/// Gradient of the loss with respect to each head score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadGrads {
    pub d_u_w: f64,
    pub d_u_l: f64,
    pub d_s_w: f64,
    pub d_s_l: f64,
}

/// μ = σ(u_w − u_l), τ = softplus(s_w) + softplus(s_l) + 1.
pub fn reparameterize(h: &HeadScores) -> VariationalOutput {
    let tau = softplus(h.s_w) + softplus(h.s_l) + 1.0;
    VariationalOutput::from_margin(h.u_w - h.u_l, tau)
}

/// λ(N) = λ / N.
pub fn lambda_schedule(cfg: &LossConfig) -> f64 {
    cfg.lambda_base / cfg.n_demos as f64
}

/// Reconstruction term −E_q[ln z] = −(ψ(μτ) − ψ(τ)).
pub fn reconstruction(v: &VariationalOutput) -> f64 {
    psi(v.tau) - psi(v.alpha_q)
}

/// Negative ELBO for one preference pair.
pub fn icrm_loss(v: &VariationalOutput, reg: Regularizer) -> f64 {
    let rec = reconstruction(v);
    if reg.lambda == 0.0 {
        return rec;
    }
    rec + reg.lambda * kl_beta(v.posterior(), reg.prior)
}

/// Bradley-Terry loss −ln σ(Δr).
pub fn bt_loss(delta_r: f64) -> f64 {
    softplus(-delta_r)
}

/// d/dΔr of [`bt_loss`].
pub fn bt_loss_grad(delta_r: f64) -> f64 {
    -sigmoid(-delta_r)
}

/// Analytic ∂L/∂μ and ∂L/∂τ; the weight, α₀ and β₀ are held constant.
pub fn grad_mu_tau(v: &VariationalOutput, reg: Regularizer) -> GradPair {
    let (a, b, tau, mu) = (v.alpha_q, v.beta_q, v.tau, v.mu);
    let one_minus_mu = v.complement();
    let (a0, b0) = (reg.prior.alpha(), reg.prior.beta());
    let t_a = psi1(a);
    let t_b = psi1(b);
    let t_tau = psi1(tau);
    let kl_mu = tau * ((a - a0) * t_a - (b - b0) * t_b);
    let kl_tau = mu * (a - a0) * t_a + one_minus_mu * (b - b0) * t_b - (tau - a0 - b0) * t_tau;
    GradPair {
        d_mu: -tau * t_a + reg.lambda * kl_mu,
        d_tau: -mu * t_a + t_tau + reg.lambda * kl_tau,
    }
}

/// Chain rule from (μ, τ) back to the four head scores.
pub fn grad_heads(h: &HeadScores, reg: Regularizer) -> HeadGrads {
    let v = reparameterize(h);
    let g = grad_mu_tau(&v, reg);
    let dmu_ddu = v.mu * v.complement();
    let d_u_w = g.d_mu * dmu_ddu;
    HeadGrads {
        d_u_w,
        d_u_l: -d_u_w,
        d_s_w: g.d_tau * sigmoid(h.s_w),
        d_s_l: g.d_tau * sigmoid(h.s_l),
    }
}

/// One row of the edge-behaviour check at μ = 1 − ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSample {
    pub epsilon: f64,
    /// ε · ∂L/∂Δu
    pub utility_measured: f64,
    /// λβ₀ / τ
    pub utility_predicted: f64,
    /// ε · ∂L/∂τ
    pub confidence_measured: f64,
    /// −λβ₀ / τ²
    pub confidence_predicted: f64,
}

impl EdgeSample {
    pub fn utility_deviation(&self) -> f64 {
        relative_gap(self.utility_measured, self.utility_predicted)
    }

    pub fn confidence_deviation(&self) -> f64 {
        relative_gap(self.confidence_measured, self.confidence_predicted)
    }
}

fn relative_gap(measured: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        measured.abs()
    } else {
        ((measured - predicted) / predicted).abs()
    }
}

/// Softplus inverse: the s with softplus(s) = y, y > 0.
fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Scaled gradient coefficients as μ → 1 at fixed τ.
///
/// The utility margin is set to logit(1 − ε) exactly and the confidence
/// heads are chosen so the reparameterized concentration equals `tau`.
pub fn edge_coefficient_check(
    tau: f64,
    lambda: f64,
    prior: BetaParams,
    epsilons: &[f64],
) -> Result<Vec<EdgeSample>> {
    if !(tau > 1.0 && tau.is_finite()) {
        return Err(Error::Precondition(format!("tau must exceed 1, got {tau}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Precondition(format!("lambda must be >= 0, got {lambda}")));
    }
    if epsilons.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Precondition("epsilons must be sorted descending".into()));
    }
    let reg = Regularizer::new(prior, lambda);
    let s = softplus_inverse(0.5 * (tau - 1.0));
    epsilons
        .iter()
        .map(|&eps| {
            if !(eps > 0.0 && eps < 0.01) {
                return Err(Error::Domain {
                    function: "edge_coefficient_check",
                    value: eps,
                    expected: "0 < epsilon < 0.01",
                });
            }
            let margin = logit_from_complement(eps);
            let heads = HeadScores {
                u_w: margin,
                u_l: 0.0,
                s_w: s,
                s_l: s,
            };
            let v = reparameterize(&heads);
            if !(v.beta_q > 0.0) {
                return Err(Error::Domain {
                    function: "edge_coefficient_check",
                    value: eps,
                    expected: "epsilon * tau representable",
                });
            }
            let hg = grad_heads(&heads, reg);
            let g = grad_mu_tau(&v, reg);
            if !(hg.d_u_w.is_finite() && g.d_tau.is_finite()) {
                return Err(Error::Domain {
                    function: "edge_coefficient_check",
                    value: eps,
                    expected: "finite gradient",
                });
            }
            let b0 = prior.beta();
            Ok(EdgeSample {
                epsilon: eps,
                utility_measured: eps * hg.d_u_w,
                utility_predicted: lambda * b0 / v.tau,
                confidence_measured: eps * g.d_tau,
                confidence_predicted: -lambda * b0 / (v.tau * v.tau),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimumStatus {
    /// μ* ∈ [1e-3, 1 − 1e-3] and τ* ≤ 0.9 · tau_max.
    Interior,
    /// The minimizer sits against the upper τ edge; rerun with a larger box.
    TauMaxTooSmall,
    /// μ* escaped toward 0 or 1.
    MuBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorOptimum {
    pub mu: f64,
    pub tau: f64,
    pub loss: f64,
    pub status: OptimumStatus,
    /// Smallest grid loss on the low-μ, high-μ, low-τ and high-τ edges.
    pub boundary_losses: [f64; 4],
}

const LOGIT_MU_LIMIT: f64 = 13.815_510_557_964_274; // logit(1 − 1e-6)
const TAU_FLOOR: f64 = 1e-3;

/// Global minimizer of the loss over (0, 1) × (0, tau_max], by brute-force
/// grid search on (logit μ, ln τ) followed by local descent.
pub fn interior_optimum(
    reg: Regularizer,
    grid_mu: usize,
    grid_tau: usize,
    tau_max: f64,
) -> Result<InteriorOptimum> {
    if !(reg.lambda > 0.0) {
        return Err(Error::Precondition(format!(
            "interior optimum requires a positive KL weight, got {}",
            reg.lambda
        )));
    }
    if grid_mu < 200 || grid_tau < 200 {
        return Err(Error::Precondition(format!(
            "grids must be at least 200 per axis, got {grid_mu} x {grid_tau}"
        )));
    }
    if !(tau_max >= 100.0) {
        return Err(Error::Precondition(format!("tau_max must be >= 100, got {tau_max}")));
    }
    let log_tau_lo = TAU_FLOOR.ln();
    let log_tau_hi = tau_max.ln();
    let x_at = |i: usize| -LOGIT_MU_LIMIT + 2.0 * LOGIT_MU_LIMIT * i as f64 / (grid_mu - 1) as f64;
    let y_at = |j: usize| log_tau_lo + (log_tau_hi - log_tau_lo) * j as f64 / (grid_tau - 1) as f64;
    let loss_at = |x: f64, y: f64| icrm_loss(&VariationalOutput::from_margin(x, y.exp()), reg);

    // Rows are τ, columns are μ; scanning τ-major with strict `<` keeps the
    // smallest τ, then smallest μ, among exact ties.
    let mut best = (f64::INFINITY, 0usize, 0usize);
    let mut edges = [f64::INFINITY; 4];
    for j in 0..grid_tau {
        let y = y_at(j);
        for i in 0..grid_mu {
            let l = loss_at(x_at(i), y);
            if l < best.0 {
                best = (l, i, j);
            }
            if i == 0 {
                edges[0] = edges[0].min(l);
            }
            if i == grid_mu - 1 {
                edges[1] = edges[1].min(l);
            }
            if j == 0 {
                edges[2] = edges[2].min(l);
            }
            if j == grid_tau - 1 {
                edges[3] = edges[3].min(l);
            }
        }
    }

    let (x, y, loss) = local_descent(&loss_at, reg, x_at(best.1), y_at(best.2), best.0, log_tau_hi);
    let mu = sigmoid(x);
    let tau = y.exp();
    let status = if tau > 0.9 * tau_max {
        OptimumStatus::TauMaxTooSmall
    } else if !(1e-3..=1.0 - 1e-3).contains(&mu) {
        OptimumStatus::MuBoundary
    } else {
        OptimumStatus::Interior
    };
    Ok(InteriorOptimum {
        mu,
        tau,
        loss,
        status,
        boundary_losses: edges,
    })
}

/// Backtracking gradient descent in (logit μ, ln τ), clamped to the box.
fn local_descent(
    loss_at: &impl Fn(f64, f64) -> f64,
    reg: Regularizer,
    mut x: f64,
    mut y: f64,
    mut loss: f64,
    y_max: f64,
) -> (f64, f64, f64) {
    let clamp = |x: f64, y: f64| {
        (
            x.clamp(-LOGIT_MU_LIMIT, LOGIT_MU_LIMIT),
            y.clamp(TAU_FLOOR.ln(), y_max),
        )
    };
    let mut step = 1.0;
    for _ in 0..5000 {
        let v = VariationalOutput::from_margin(x, y.exp());
        let g = grad_mu_tau(&v, reg);
        let gx = g.d_mu * v.mu * v.complement();
        let gy = g.d_tau * v.tau;
        let gnorm2 = gx * gx + gy * gy;
        if gnorm2 < 1e-28 {
            break;
        }
        let mut accepted = false;
        while step > 1e-16 {
            let (nx, ny) = clamp(x - step * gx, y - step * gy);
            let nl = loss_at(nx, ny);
            if nl <= loss - 1e-4 * step * gnorm2 {
                x = nx;
                y = ny;
                loss = nl;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, y, loss)
}
