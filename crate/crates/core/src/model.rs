//! Context-conditioned linear reward head.
//!
//! The context is summarised by the mean sign-corrected preference direction
//! m̄. A linear aggregator turns it into a utility direction
//! g = W·m̄ + b, and each candidate's utility is ⟨g, φ⟩. Both candidates share
//! one confidence logit s = ⟨w_conf, [agreement, ln(1 + N), 1]⟩.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::beta::BetaParams;
use crate::error::{Error, Result};
use crate::objective::{
    bt_loss, bt_loss_grad, grad_heads, icrm_loss, reparameterize, HeadScores, Regularizer,
};
use crate::rng;
use crate::specfun::{sigmoid, softplus};
use crate::synth::{build_context, dot, gen_objective, sample_triple, DemonstrationSet, ObjectiveVector, PreferenceTriple, WorldConfig};

pub const CONF_FEATURES: usize = 3;

/// Trainable parameters. `w_agg` is row-major d×d.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dim: usize,
    pub w_agg: Vec<f64>,
    pub b_agg: Vec<f64>,
    pub w_conf: [f64; CONF_FEATURES],
}

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            w_agg: vec![0.0; dim * dim],
            b_agg: vec![0.0; dim],
            w_conf: [0.0; CONF_FEATURES],
        }
    }

    /// Aggregator entries ~ N(0, 1/(d+1)); bias and confidence head zero.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dim);
        let normal = Normal::new(0.0, (1.0 / (dim as f64 + 1.0)).sqrt()).expect("valid std");
        let mut rng = rng::seeded(seed);
        p.w_agg.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        p
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = Self::zeros(dim);
        (0..dim).for_each(|i| p.w_agg[i * dim + i] = 1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self) -> Result<()> {
        if self.w_agg.len() != self.dim * self.dim || self.b_agg.len() != self.dim {
            return Err(Error::Structural(format!(
                "parameter arrays do not match dim {}: w_agg {}, b_agg {}",
                self.dim,
                self.w_agg.len(),
                self.b_agg.len()
            )));
        }
        let all = self.w_agg.iter().chain(&self.b_agg).chain(&self.w_conf);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("parameters must be finite".into()));
        }
        Ok(())
    }

    fn require_dim(&self, d: usize, what: &str) -> Result<()> {
        if d == self.dim {
            Ok(())
        } else {
            Err(Error::Structural(format!("{what} has dim {d}, model expects {}", self.dim)))
        }
    }

    fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.w_agg.iter_mut().zip(&other.w_agg) {
            *a += scale * b;
        }
        for (a, b) in self.b_agg.iter_mut().zip(&other.b_agg) {
            *a += scale * b;
        }
        for (a, b) in self.w_conf.iter_mut().zip(&other.w_conf) {
            *a += scale * b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.w_agg.iter_mut().for_each(|v| *v *= s);
        self.b_agg.iter_mut().for_each(|v| *v *= s);
        self.w_conf.iter_mut().for_each(|v| *v *= s);
    }

    fn norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.w_agg) + sq(&self.b_agg) + sq(&self.w_conf)).sqrt()
    }

    /// Utility direction g = W·m̄ + b for a context.
    pub fn utility_direction(&self, context: &DemonstrationSet) -> Result<Vec<f64>> {
        self.require_dim(context.dim(), "context")?;
        let m = context.mean_direction();
        Ok(self.direction_from_mean(&m))
    }

    fn direction_from_mean(&self, m: &[f64]) -> Vec<f64> {
        self.w_agg
            .chunks_exact(self.dim)
            .zip(&self.b_agg)
            .map(|(row, b)| dot(row, m) + b)
            .collect()
    }

    /// Shared confidence logit for a context.
    pub fn confidence_logit(&self, context: &DemonstrationSet) -> f64 {
        dot(&self.w_conf, &confidence_features(context))
    }
}

/// [agreement, ln(1 + N), 1].
pub fn confidence_features(context: &DemonstrationSet) -> [f64; CONF_FEATURES] {
    [context.agreement, (context.len() as f64).ln_1p(), 1.0]
}

/// Head scores for the pair's chosen and rejected slots under `context`.
pub fn forward(
    params: &ModelParams,
    context: &DemonstrationSet,
    pair: &PreferenceTriple,
) -> Result<HeadScores> {
    params.require_dim(pair.dim(), "pair")?;
    let g = params.utility_direction(context)?;
    let s = params.confidence_logit(context);
    Ok(HeadScores {
        u_w: dot(&g, &pair.phi_chosen),
        u_l: dot(&g, &pair.phi_rejected),
        s_w: s,
        s_l: s,
    })
}

/// R = softplus(s) · u for a single candidate.
pub fn score_single(
    params: &ModelParams,
    context: &DemonstrationSet,
    phi_prompt: &[f64],
    phi_candidate: &[f64],
) -> Result<f64> {
    params.require_dim(phi_prompt.len(), "prompt")?;
    params.require_dim(phi_candidate.len(), "candidate")?;
    let g = params.utility_direction(context)?;
    let u = dot(&g, phi_candidate);
    Ok(softplus(params.confidence_logit(context)) * u)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Objective {
    /// Negative ELBO with KL weight `lambda / N`.
    Icrm {
        lambda: f64,
        #[serde(default = "BetaParams::uniform")]
        prior: BetaParams,
    },
    /// Plain Bradley-Terry log-loss on the utility margin.
    Bt,
}

impl Objective {
    pub fn icrm(lambda: f64) -> Self {
        Objective::Icrm {
            lambda,
            prior: BetaParams::uniform(),
        }
    }
}

/// τ reported for Bradley-Terry runs, whose confidence heads are unused.
pub fn bt_tau() -> f64 {
    2.0 * softplus(0.0) + 1.0
}

/// Loss, posterior summary and parameter gradient at one instance.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub mu: f64,
    pub tau: f64,
    pub grad: ModelParams,
}

/// Gradient of the per-pair loss with respect to every parameter. The pair
/// is taken as given: callers orient it so the chosen slot is preferred.
pub fn backward(
    params: &ModelParams,
    context: &DemonstrationSet,
    pair: &PreferenceTriple,
    objective: &Objective,
) -> Result<Backward> {
    params.require_dim(context.dim(), "context")?;
    params.require_dim(pair.dim(), "pair")?;
    let m = context.mean_direction();
    let g = params.direction_from_mean(&m);
    let feats = confidence_features(context);
    let s = dot(&params.w_conf, &feats);
    let delta_phi: Vec<f64> = pair
        .phi_chosen
        .iter()
        .zip(&pair.phi_rejected)
        .map(|(a, b)| a - b)
        .collect();
    let heads = HeadScores {
        u_w: dot(&g, &pair.phi_chosen),
        u_l: dot(&g, &pair.phi_rejected),
        s_w: s,
        s_l: s,
    };

    let (loss, mu, tau, d_margin, d_conf) = match *objective {
        Objective::Icrm { lambda, prior } => {
            let reg = Regularizer::new(prior, lambda / context.len() as f64);
            let v = reparameterize(&heads);
            // A saturated posterior (α or β underflowed to zero) has infinite
            // loss; report it instead of evaluating polygammas at zero.
            if !(v.alpha_q > 0.0 && v.beta_q > 0.0 && v.tau.is_finite()) {
                return Ok(Backward {
                    loss: f64::INFINITY,
                    mu: v.mu,
                    tau: v.tau,
                    grad: ModelParams::zeros(params.dim),
                });
            }
            let hg = grad_heads(&heads, reg);
            (icrm_loss(&v, reg), v.mu, v.tau, hg.d_u_w, hg.d_s_w + hg.d_s_l)
        }
        Objective::Bt => {
            let margin = heads.u_w - heads.u_l;
            (bt_loss(margin), sigmoid(margin), bt_tau(), bt_loss_grad(margin), 0.0)
        }
    };

    let d = params.dim;
    let mut grad = ModelParams::zeros(d);
    // ∂L/∂g = d_margin · Δφ; ∂L/∂W = ∂L/∂g ⊗ m̄.
    for (i, dp) in delta_phi.iter().enumerate() {
        let dg = d_margin * dp;
        grad.b_agg[i] = dg;
        for (w, mj) in grad.w_agg[i * d..(i + 1) * d].iter_mut().zip(&m) {
            *w = dg * mj;
        }
    }
    for (w, f) in grad.w_conf.iter_mut().zip(feats) {
        *w = d_conf * f;
    }
    Ok(Backward {
        loss,
        mu,
        tau,
        grad,
    })
}

/// Loss value only; used by gradient checks.
pub fn loss(
    params: &ModelParams,
    context: &DemonstrationSet,
    pair: &PreferenceTriple,
    objective: &Objective,
) -> Result<f64> {
    backward(params, context, pair, objective).map(|b| b.loss)
}

/// Where each training instance's objective comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskMode {
    /// A fresh random objective per instance; the model must read it from
    /// the context.
    InContext,
    /// One objective for the whole run (a conventional reward model).
    Fixed { objective_seed: u64 },
}

impl TaskMode {
    /// Objective for one instance or episode with the given seed.
    pub fn objective(&self, dim: usize, episode_seed: u64) -> Result<ObjectiveVector> {
        match *self {
            TaskMode::InContext => gen_objective(dim, rng::derive(episode_seed, "objective", 0)),
            TaskMode::Fixed { objective_seed } => gen_objective(dim, objective_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub task: TaskMode,
    /// Freeze the aggregator at zero so scores ignore the context.
    pub context_free: bool,
    pub n_values: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Per-instance gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective, seed: u64) -> Self {
        Self {
            objective,
            task: TaskMode::InContext,
            context_free: false,
            n_values: vec![1, 2, 4, 8, 16, 32],
            steps: 2000,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            clip_norm: 0.25,
            seed,
        }
    }

    /// A conventional Bradley-Terry reward model for one fixed objective.
    pub fn bt_baseline(objective_seed: u64, seed: u64) -> Self {
        Self {
            task: TaskMode::Fixed { objective_seed },
            context_free: true,
            ..Self::new(Objective::Bt, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Precondition("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Precondition(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::Precondition("n_values must be nonempty and positive".into()));
        }
        if let Objective::Icrm { lambda, .. } = self.objective {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Precondition(format!("lambda must be >= 0, got {lambda}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub mu_mean: f64,
    pub tau_mean: f64,
}

pub type TrainTrace = Vec<TraceRecord>;

/// One training instance: context, oriented query, and its objective.
pub fn training_instance(
    world: &WorldConfig,
    cfg: &TrainConfig,
    index: u64,
) -> Result<(DemonstrationSet, PreferenceTriple)> {
    let seed = rng::derive(cfg.seed, "instance", index);
    let obj = cfg.task.objective(world.dim, seed)?;
    let pick = rng::derive(seed, "n", 0) % cfg.n_values.len() as u64;
    let n = cfg.n_values[pick as usize];
    let ctx = build_context(&obj, &obj, n, 1.0, world.margin_scale, rng::derive(seed, "context", 0))?;
    let query = sample_triple(&obj, world.margin_scale, rng::derive(seed, "query", 0)).oriented();
    Ok((ctx, query))
}

/// Mini-batch gradient descent with momentum.
pub fn train(world: &WorldConfig, cfg: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    world.validate()?;
    cfg.validate()?;
    let mut params = if cfg.context_free {
        ModelParams::zeros(world.dim)
    } else {
        ModelParams::init(world.dim, rng::derive(cfg.seed, "init", 0))
    };
    let mut velocity = ModelParams::zeros(world.dim);
    let mut trace = Vec::with_capacity(cfg.steps);
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 1..=cfg.steps {
        let mut grad = ModelParams::zeros(world.dim);
        let (mut loss, mut mu, mut tau) = (0.0, 0.0, 0.0);
        for b in 0..cfg.batch_size {
            let index = ((step - 1) * cfg.batch_size + b) as u64;
            let (ctx, query) = training_instance(world, cfg, index)?;
            let mut out = backward(&params, &ctx, &query, &cfg.objective)?;
            loss += out.loss;
            mu += out.mu;
            tau += out.tau;
            let norm = out.grad.norm();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                out.grad.scale(cfg.clip_norm / norm);
            }
            grad.axpy(inv_batch, &out.grad);
        }
        loss *= inv_batch;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        if cfg.context_free {
            grad.w_agg.iter_mut().for_each(|g| *g = 0.0);
        }
        velocity.scale(cfg.momentum);
        velocity.axpy(-cfg.learning_rate, &grad);
        params.axpy(1.0, &velocity);
        trace.push(TraceRecord {
            step,
            loss,
            mu_mean: mu * inv_batch,
            tau_mean: match cfg.objective {
                Objective::Bt => bt_tau(),
                Objective::Icrm { .. } => tau * inv_batch,
            },
        });
    }
    Ok((params, trace))
}

/// On-disk checkpoint: dimension header plus flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub w_agg: Vec<f64>,
    pub b_agg: Vec<f64>,
    pub w_conf: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "icrm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dim: p.dim,
            w_agg: p.w_agg.clone(),
            b_agg: p.b_agg.clone(),
            w_conf: p.w_conf.to_vec(),
        }
    }
}

impl TryFrom<Checkpoint> for ModelParams {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Structural(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let w_conf: [f64; CONF_FEATURES] = c.w_conf.try_into().map_err(|v: Vec<f64>| {
            Error::Structural(format!("w_conf needs {CONF_FEATURES} entries, got {}", v.len()))
        })?;
        let p = ModelParams {
            dim: c.dim,
            w_agg: c.w_agg,
            b_agg: c.b_agg,
            w_conf,
        };
        p.check()?;
        Ok(p)
    }
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        c.try_into()
    }
}
