//! Beta distribution over the latent preference probability z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{ln_gamma, psi};

/// Shape pair (α, β) of a Beta distribution. Both shapes are finite and
/// strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(alpha) && ok(beta) {
            Ok(Self { alpha, beta })
        } else {
            Err(Error::Domain {
                function: "BetaParams::new",
                value: if ok(alpha) { beta } else { alpha },
                expected: "finite shape > 0",
            })
        }
    }

    /// The uniform prior Beta(1, 1).
    pub const fn uniform() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// α + β.
    pub fn concentration(&self) -> f64 {
        self.alpha + self.beta
    }

    /// ln B(α, β).
    pub fn ln_beta_fn(&self) -> f64 {
        ln_gamma(self.alpha) + ln_gamma(self.beta) - ln_gamma(self.alpha + self.beta)
    }

    /// Log density at z, taking ln z and ln(1 - z) separately so the caller
    /// can supply them without rounding z near the endpoints.
    pub fn ln_pdf_parts(&self, ln_z: f64, ln_1mz: f64) -> f64 {
        (self.alpha - 1.0) * ln_z + (self.beta - 1.0) * ln_1mz - self.ln_beta_fn()
    }
}

impl TryFrom<[f64; 2]> for BetaParams {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<BetaParams> for [f64; 2] {
    fn from(p: BetaParams) -> Self {
        [p.alpha, p.beta]
    }
}

/// E[z] = α / (α + β).
pub fn mean(p: BetaParams) -> f64 {
    p.alpha / (p.alpha + p.beta)
}

/// E[ln z] = ψ(α) − ψ(α + β).
pub fn expected_log_z(p: BetaParams) -> f64 {
    psi(p.alpha) - psi(p.alpha + p.beta)
}

/// KL(q ‖ p) between two Beta distributions, in log-gamma/digamma space.
pub fn kl_beta(q: BetaParams, p: BetaParams) -> f64 {
    let (aq, bq) = (q.alpha, q.beta);
    let (ap, bp) = (p.alpha, p.beta);
    let psi_sum = psi(aq + bq);
    let kl = ln_gamma(aq + bq) - ln_gamma(aq) - ln_gamma(bq) - ln_gamma(ap + bp)
        + ln_gamma(ap)
        + ln_gamma(bp)
        + (aq - ap) * (psi(aq) - psi_sum)
        + (bq - bp) * (psi(bq) - psi_sum);
    // Rounding can leave a tiny negative residue when q ≈ p.
    kl.max(0.0)
}

/// Shape range over which [`kl_beta_quadrature`] is validated.
pub const QUADRATURE_SHAPE_RANGE: (f64, f64) = (0.05, 200.0);

/// Numerical KL(q ‖ p) by Gauss–Legendre quadrature, independent of the
/// closed form.
///
/// Each half of (0, 1) is integrated under the substitution z = u^k (mirrored
/// on the right half), with k = ⌈4 / shape⌉ for the shape governing that
/// endpoint. This turns the z^(α−1) endpoint behaviour into a bounded
/// integrand in u. Half of `nodes` goes to each side.
pub fn kl_beta_quadrature(q: BetaParams, p: BetaParams, nodes: usize) -> Result<f64> {
    let (lo, hi) = QUADRATURE_SHAPE_RANGE;
    for v in [q.alpha, q.beta, p.alpha, p.beta] {
        if !(lo..=hi).contains(&v) {
            return Err(Error::OracleRange(format!(
                "shape {v} outside [{lo}, {hi}]"
            )));
        }
    }
    if nodes < 64 {
        return Err(Error::Precondition(format!(
            "quadrature needs at least 64 nodes, got {nodes}"
        )));
    }
    let rule = gauss_legendre(nodes / 2);
    let mut total = 0.0;
    for left in [true, false] {
        let shape = if left { q.alpha } else { q.beta };
        let k = (4.0 / shape).ceil().max(1.0);
        let u_max = 0.5f64.powf(1.0 / k);
        for &(x, w) in &rule {
            let u = 0.5 * (x + 1.0) * u_max;
            let wu = 0.5 * w * u_max;
            let ln_near = k * u.ln();
            let ln_far = (-ln_near.exp()).ln_1p();
            let (ln_z, ln_1mz) = if left {
                (ln_near, ln_far)
            } else {
                (ln_far, ln_near)
            };
            let lq = q.ln_pdf_parts(ln_z, ln_1mz);
            let lp = p.ln_pdf_parts(ln_z, ln_1mz);
            let jacobian = k * u.powf(k - 1.0);
            total += wu * jacobian * lq.exp() * (lq - lp);
        }
    }
    Ok(total)
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(n);
    let nf = n as f64;
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        rule.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    rule
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
