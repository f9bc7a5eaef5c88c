//! Synthetic preference worlds.
//!
//! A world is a latent unit direction `w` in feature space. Responses are
//! standard-normal feature vectors, and a comparison between responses a and
//! b follows the Bradley-Terry law P(a ≻ b) = σ(m · w·(φ_a − φ_b)) with
//! margin scale m. The sampled winner is stored as `phi_chosen`.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::specfun::sigmoid;

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_MARGIN_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dim: usize,
    pub margin_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            margin_scale: DEFAULT_MARGIN_SCALE,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Precondition(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(self.margin_scale >= 0.0 && self.margin_scale.is_finite()) {
            return Err(Error::Precondition(format!(
                "margin_scale must be finite and >= 0, got {}",
                self.margin_scale
            )));
        }
        Ok(())
    }
}

/// Latent preference direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    weights: Vec<f64>,
    name: String,
}

impl ObjectiveVector {
    pub fn new(weights: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Structural("objective weights must be finite".into()));
        }
        if dot(&weights, &weights) == 0.0 {
            return Err(Error::Structural("objective weights must be nonzero".into()));
        }
        Ok(Self {
            weights,
            name: name.into(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// The opposite preference: negated weights.
    pub fn reversed(&self) -> Self {
        let name = match self.name.strip_prefix('-') {
            Some(rest) => rest.to_owned(),
            None => format!("-{}", self.name),
        };
        Self {
            weights: self.weights.iter().map(|w| -w).collect(),
            name,
        }
    }

    /// w · (φ_a − φ_b).
    pub fn margin(&self, phi_a: &[f64], phi_b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(phi_a.iter().zip(phi_b))
            .map(|(w, (a, b))| w * (a - b))
            .sum()
    }
}

/// Unit-norm objective direction drawn from `seed`.
pub fn gen_objective(dim: usize, seed: u64) -> Result<ObjectiveVector> {
    if dim < 2 {
        return Err(Error::Precondition(format!("objective dim must be >= 2, got {dim}")));
    }
    let mut rng = rng::seeded(seed);
    loop {
        let v = normal_vec(&mut rng, dim);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            let weights = v.into_iter().map(|x| x / norm).collect();
            return ObjectiveVector::new(weights, format!("obj{seed}"));
        }
    }
}

/// One pairwise comparison. `outcome == 1` means `phi_chosen` was preferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriple {
    pub phi_prompt: Vec<f64>,
    pub phi_chosen: Vec<f64>,
    pub phi_rejected: Vec<f64>,
    pub outcome: u8,
}

impl PreferenceTriple {
    pub fn dim(&self) -> usize {
        self.phi_chosen.len()
    }

    /// Exchange the two responses and flip the outcome.
    pub fn swapped(&self) -> Self {
        Self {
            phi_prompt: self.phi_prompt.clone(),
            phi_chosen: self.phi_rejected.clone(),
            phi_rejected: self.phi_chosen.clone(),
            outcome: 1 - self.outcome,
        }
    }

    /// The same comparison with the preferred response in the chosen slot.
    pub fn oriented(&self) -> Self {
        if self.outcome == 1 {
            self.clone()
        } else {
            self.swapped()
        }
    }

    /// (φ_chosen − φ_rejected), sign-corrected so it points from the loser
    /// to the winner.
    pub fn preference_direction(&self) -> Vec<f64> {
        let sign = if self.outcome == 1 { 1.0 } else { -1.0 };
        self.phi_chosen
            .iter()
            .zip(&self.phi_rejected)
            .map(|(c, r)| sign * (c - r))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let d = self.phi_chosen.len();
        if self.phi_prompt.len() != d || self.phi_rejected.len() != d {
            return Err(Error::Structural(format!(
                "triple feature lengths differ: prompt {}, chosen {}, rejected {}",
                self.phi_prompt.len(),
                d,
                self.phi_rejected.len()
            )));
        }
        if self.outcome > 1 {
            return Err(Error::Structural(format!("outcome must be 0 or 1, got {}", self.outcome)));
        }
        let all = self.phi_prompt.iter().chain(&self.phi_chosen).chain(&self.phi_rejected);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("triple features must be finite".into()));
        }
        Ok(())
    }
}

/// Sample one comparison under `obj`.
///
/// The draw is coupled across objectives: with the same seed, `obj` and
/// `obj.reversed()` produce identical features and exactly swapped labels.
/// The label agrees with the true margin sign with probability σ(m·|margin|).
pub fn sample_triple(obj: &ObjectiveVector, margin_scale: f64, seed: u64) -> PreferenceTriple {
    let d = obj.dim();
    let mut rng = rng::seeded(seed);
    let phi_prompt = normal_vec(&mut rng, d);
    let phi_a = normal_vec(&mut rng, d);
    let phi_b = normal_vec(&mut rng, d);
    let u: f64 = rng.random();
    let margin = obj.margin(&phi_a, &phi_b);
    let label_correct = u < sigmoid(margin_scale * margin.abs());
    let a_wins = (margin >= 0.0) == label_correct;
    let (phi_chosen, phi_rejected) = if a_wins { (phi_a, phi_b) } else { (phi_b, phi_a) };
    PreferenceTriple {
        phi_prompt,
        phi_chosen,
        phi_rejected,
        outcome: 1,
    }
}

/// In-context demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    triples: Vec<PreferenceTriple>,
    /// Fraction of triples drawn from the first objective.
    pub mix_ratio: f64,
    /// Fraction of triples whose label agrees with the sign of the true
    /// margin under the majority generating objective.
    pub agreement: f64,
}

impl DemonstrationSet {
    pub fn new(triples: Vec<PreferenceTriple>, mix_ratio: f64, agreement: f64) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Precondition("a demonstration set needs N >= 1".into()));
        }
        let d = triples[0].dim();
        for t in &triples {
            t.validate()?;
            if t.dim() != d {
                return Err(Error::Structural(format!(
                    "context mixes dimensions {d} and {}",
                    t.dim()
                )));
            }
        }
        if !(0.0..=1.0).contains(&mix_ratio) || !(0.0..=1.0).contains(&agreement) {
            return Err(Error::Precondition(format!(
                "mix_ratio {mix_ratio} and agreement {agreement} must lie in [0, 1]"
            )));
        }
        Ok(Self {
            triples,
            mix_ratio,
            agreement,
        })
    }

    pub fn triples(&self) -> &[PreferenceTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.triples[0].dim()
    }

    /// Mean of the sign-corrected preference directions.
    pub fn mean_direction(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for t in &self.triples {
            for (a, v) in acc.iter_mut().zip(t.preference_direction()) {
                *a += v;
            }
        }
        let n = self.triples.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn with_triples_permuted(&self, order: &[usize]) -> Self {
        Self {
            triples: order.iter().map(|&i| self.triples[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Number of demonstrations drawn from the first objective.
pub fn split_count(n: usize, mix_ratio: f64) -> usize {
    ((mix_ratio * n as f64).round() as usize).min(n)
}

/// `round(mix_ratio · n)` triples from `obj_a`, the rest from `obj_b`, in a
/// seed-determined order.
pub fn build_context(
    obj_a: &ObjectiveVector,
    obj_b: &ObjectiveVector,
    n: usize,
    mix_ratio: f64,
    margin_scale: f64,
    seed: u64,
) -> Result<DemonstrationSet> {
    if n == 0 {
        return Err(Error::Precondition("context size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Precondition(format!("mix_ratio {mix_ratio} outside [0, 1]")));
    }
    if obj_a.dim() != obj_b.dim() {
        return Err(Error::Structural("objectives have different dimensions".into()));
    }
    let n_a = split_count(n, mix_ratio);
    let mut triples: Vec<PreferenceTriple> = (0..n)
        .map(|i| {
            if i < n_a {
                sample_triple(obj_a, margin_scale, rng::derive(seed, "demo_a", i as u64))
            } else {
                sample_triple(obj_b, margin_scale, rng::derive(seed, "demo_b", i as u64))
            }
        })
        .collect();
    let majority = if 2 * n_a >= n { obj_a } else { obj_b };
    let agreeing = triples
        .iter()
        .filter(|t| majority.margin(&t.phi_chosen, &t.phi_rejected) > 0.0)
        .count();
    triples.shuffle(&mut rng::seeded(rng::derive(seed, "shuffle", 0)));
    DemonstrationSet::new(triples, mix_ratio, agreeing as f64 / n as f64)
}

/// Write one JSON object per line.
pub fn write_jsonl<W: Write>(triples: &[PreferenceTriple], mut out: W) -> Result<()> {
    for t in triples {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read triples written by [`write_jsonl`]. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PreferenceTriple>> {
    let mut triples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PreferenceTriple = serde_json::from_str(&line)
            .map_err(|e| Error::Structural(format!("line {}: {e}", lineno + 1)))?;
        t.validate()
            .map_err(|e| Error::Structural(format!("line {}: {e}", lineno + 1)))?;
        triples.push(t);
    }
    Ok(triples)
}

pub(crate) fn normal_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
