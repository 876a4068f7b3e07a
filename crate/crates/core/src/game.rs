//! Data model of the per-token game and the closed-form agent quantities.
//!
//! A game fixes a base policy `pi0` over `N` candidates, `J` principals with
//! reward vectors `q^j` and preference weights `w^j`, and a temperature
//! `tau`. Principal `j` offers an incentive `y^j` in the box `[0, w^j q^j]`;
//! the agent answers the aggregate `Y = sum_j y^j` with the KL-tilted policy
//! `pi*(Y) = softmax(log pi0 + Y / tau)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};

/// Absolute tolerance for the simplex normalization invariant.
pub const SIMPLEX_ATOL: f64 = 1e-12;

/// Default floor used by [`PolicySimplex::is_full_support`].
pub const FULL_SUPPORT_FLOOR: f64 = 1e-12;

/// Slack allowed when checking box membership of incentives.
pub const BOX_SLACK: f64 = 1e-12;

/// A probability vector over the candidate set.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PolicySimplex(Vec<f64>);

impl PolicySimplex {
    /// Validates that `probs` is nonnegative and sums to one within
    /// [`SIMPLEX_ATOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, SIMPLEX_ATOL)
    }

    /// Like [`PolicySimplex::new`] but accepts a looser normalization
    /// error and renormalizes, so the stored vector meets [`SIMPLEX_ATOL`].
    pub fn normalized(probs: Vec<f64>, atol: f64) -> Result<Self> {
        let mut p = Self::with_tolerance(probs, atol)?.0;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        Ok(Self(p))
    }

    fn with_tolerance(probs: Vec<f64>, atol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(CageError::Format("empty probability vector".into()));
        }
        if let Some(i) = probs.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CageError::Domain(format!(
                "probability entry {i} is {} (must be finite and >= 0)",
                probs[i]
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > atol {
            return Err(CageError::Domain(format!(
                "probabilities sum to {s}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Wraps a vector produced by a normalizing computation.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// True when every entry is at least `floor`.
    pub fn is_full_support(&self, floor: f64) -> bool {
        self.0.iter().all(|&p| p >= floor)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl<'de> Deserialize<'de> for PolicySimplex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        PolicySimplex::normalized(v, 1e-9).map_err(serde::de::Error::custom)
    }
}

/// Per-candidate reward of one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CageError::Domain(format!("reward entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The user's nonnegative weighting of the objectives.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PreferenceWeights(Vec<f64>);

impl PreferenceWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(CageError::Precondition("empty preference vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CageError::Precondition(
                "preference weights must be finite and nonnegative".into(),
            ));
        }
        if !w.iter().any(|&v| v > 0.0) {
            return Err(CageError::Precondition(
                "at least one preference weight must be positive".into(),
            ));
        }
        Ok(Self(w))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for PreferenceWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        PreferenceWeights::new(v).map_err(serde::de::Error::custom)
    }
}

/// One principal's incentive vector. Box membership depends on the game and
/// is checked by [`GameInstance::check_incentive`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IncentiveVector(pub Vec<f64>);

impl IncentiveVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for IncentiveVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// All principals' incentives together with their elementwise sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncentiveProfile {
    per_principal: Vec<IncentiveVector>,
    aggregate: Vec<f64>,
}

impl IncentiveProfile {
    pub fn new(per_principal: Vec<IncentiveVector>) -> Result<Self> {
        let n = per_principal
            .first()
            .map(|y| y.len())
            .ok_or_else(|| CageError::Format("incentive profile needs a principal".into()))?;
        if per_principal.iter().any(|y| y.len() != n) {
            return Err(CageError::Format("incentive vectors differ in length".into()));
        }
        let aggregate = sum_vectors(per_principal.iter().map(|y| y.values()), n);
        Ok(Self {
            per_principal,
            aggregate,
        })
    }

    pub fn zeros(n: usize, j: usize) -> Self {
        Self {
            per_principal: vec![IncentiveVector::zeros(n); j],
            aggregate: vec![0.0; n],
        }
    }

    pub fn per_principal(&self) -> &[IncentiveVector] {
        &self.per_principal
    }

    pub fn principal(&self, j: usize) -> &IncentiveVector {
        &self.per_principal[j]
    }

    pub fn aggregate(&self) -> &[f64] {
        &self.aggregate
    }

    pub fn num_principals(&self) -> usize {
        self.per_principal.len()
    }

    /// `Y^{-j}`: the sum of every incentive except principal `j`'s.
    pub fn others(&self, j: usize) -> Vec<f64> {
        let n = self.aggregate.len();
        sum_vectors(
            self.per_principal
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, y)| y.values()),
            n,
        )
    }
}

impl<'de> Deserialize<'de> for IncentiveProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            per_principal: Vec<IncentiveVector>,
        }
        let raw = Raw::deserialize(d)?;
        IncentiveProfile::new(raw.per_principal).map_err(serde::de::Error::custom)
    }
}

// Summed in index order so results are reproducible.
fn sum_vectors<'a>(vs: impl Iterator<Item = &'a [f64]>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out
}

/// Wire form of [`GameInstance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GameSpec {
    tau: f64,
    pi0: Vec<f64>,
    weights: Vec<f64>,
    rewards: Vec<Vec<f64>>,
}

/// One decoding step's game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameSpec", into = "GameSpec")]
pub struct GameInstance {
    pi0: PolicySimplex,
    log_pi0: Vec<f64>,
    rewards: Vec<RewardVector>,
    weights: PreferenceWeights,
    tau: f64,
    /// Upper box corners `w^j q^j`.
    upper: Vec<Vec<f64>>,
}

impl TryFrom<GameSpec> for GameInstance {
    type Error = CageError;
    fn try_from(s: GameSpec) -> Result<Self> {
        let pi0 = PolicySimplex::normalized(s.pi0, 1e-9)?;
        let rewards = s
            .rewards
            .into_iter()
            .map(RewardVector::new)
            .collect::<Result<Vec<_>>>()?;
        GameInstance::new(pi0, rewards, PreferenceWeights::new(s.weights)?, s.tau)
    }
}

impl From<GameInstance> for GameSpec {
    fn from(g: GameInstance) -> Self {
        GameSpec {
            tau: g.tau,
            pi0: g.pi0.into_inner(),
            weights: g.weights.0,
            rewards: g.rewards.into_iter().map(|r| r.0).collect(),
        }
    }
}

impl GameInstance {
    pub fn new(
        pi0: PolicySimplex,
        rewards: Vec<RewardVector>,
        weights: PreferenceWeights,
        tau: f64,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(CageError::Domain(format!("tau must be positive, got {tau}")));
        }
        let n = pi0.len();
        if n < 2 {
            return Err(CageError::Format("need at least two candidates".into()));
        }
        if pi0.probs().iter().any(|&p| p <= 0.0) {
            return Err(CageError::Domain("base policy must have full support".into()));
        }
        if rewards.is_empty() {
            return Err(CageError::Format("need at least one principal".into()));
        }
        if rewards.len() != weights.len() {
            return Err(CageError::Format(format!(
                "{} reward vectors but {} weights",
                rewards.len(),
                weights.len()
            )));
        }
        if let Some(j) = rewards.iter().position(|r| r.len() != n) {
            return Err(CageError::Format(format!(
                "reward vector {j} has length {} but the base policy has {n} entries",
                rewards[j].len()
            )));
        }
        let upper: Vec<Vec<f64>> = rewards
            .iter()
            .zip(weights.values())
            .map(|(q, &w)| q.values().iter().map(|&qi| w * qi).collect())
            .collect();
        for (j, u) in upper.iter().enumerate() {
            if let Some(i) = u.iter().position(|&v| v < 0.0) {
                return Err(CageError::Constraint(format!(
                    "weighted reward w^{j} q^{j}_{i} = {} is negative; normalize rewards first",
                    u[i]
                )));
            }
        }
        let log_pi0 = pi0.probs().iter().map(|p| p.ln()).collect();
        Ok(Self {
            pi0,
            log_pi0,
            rewards,
            weights,
            tau,
            upper,
        })
    }

    pub fn pi0(&self) -> &PolicySimplex {
        &self.pi0
    }

    pub fn log_pi0(&self) -> &[f64] {
        &self.log_pi0
    }

    pub fn rewards(&self) -> &[RewardVector] {
        &self.rewards
    }

    pub fn weights(&self) -> &PreferenceWeights {
        &self.weights
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_candidates(&self) -> usize {
        self.pi0.len()
    }

    pub fn num_principals(&self) -> usize {
        self.rewards.len()
    }

    /// Upper corner `w^j q^j` of principal `j`'s box.
    pub fn upper(&self, j: usize) -> &[f64] {
        &self.upper[j]
    }

    /// Same game at a different temperature.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.pi0.clone(), self.rewards.clone(), self.weights.clone(), tau)
    }

    /// Verifies `0 <= y <= w^j q^j` up to [`BOX_SLACK`].
    pub fn check_incentive(&self, j: usize, y: &[f64]) -> Result<()> {
        if j >= self.num_principals() {
            return Err(CageError::Format(format!("no principal {j}")));
        }
        self.check_len(y)?;
        for (i, (&v, &u)) in y.iter().zip(&self.upper[j]).enumerate() {
            if !v.is_finite() || v < -BOX_SLACK || v > u + BOX_SLACK {
                return Err(CageError::Constraint(format!(
                    "y^{j}_{i} = {v} outside [0, {u}]"
                )));
            }
        }
        Ok(())
    }

    pub fn check_profile(&self, profile: &IncentiveProfile) -> Result<()> {
        if profile.num_principals() != self.num_principals() {
            return Err(CageError::Format(format!(
                "profile has {} principals, game has {}",
                profile.num_principals(),
                self.num_principals()
            )));
        }
        for (j, y) in profile.per_principal().iter().enumerate() {
            self.check_incentive(j, y)?;
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_candidates() {
            return Err(CageError::Format(format!(
                "vector has length {}, expected {}",
                v.len(),
                self.num_candidates()
            )));
        }
        Ok(())
    }

    fn check_finite(&self, y: &[f64]) -> Result<()> {
        self.check_len(y)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CageError::Domain("incentive vector has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(log_pi0 + y / tau)` with max-subtraction.
pub(crate) fn tilt(log_pi0: &[f64], y: &[f64], tau: f64) -> Vec<f64> {
    let mut z: Vec<f64> = log_pi0.iter().zip(y).map(|(l, v)| l + v / tau).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
    z
}

/// `KL(pi || pi0)` with `0 log 0 = 0`.
pub(crate) fn kl_divergence(pi: &[f64], log_pi0: &[f64]) -> f64 {
    pi.iter()
        .zip(log_pi0)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * (p.ln() - l))
        .sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The agent's best response to an aggregate incentive.
pub fn best_response(y: &[f64], g: &GameInstance) -> Result<PolicySimplex> {
    g.check_finite(y)?;
    Ok(PolicySimplex::from_normalized(tilt(g.log_pi0(), y, g.tau())))
}

/// Regularized agent utility `pi . Y - tau KL(pi || pi0)`.
pub fn agent_utility(pi: &PolicySimplex, y: &[f64], g: &GameInstance) -> Result<f64> {
    g.check_finite(y)?;
    g.check_len(pi.probs())?;
    // pi0 has full support, so absolute continuity always holds.
    Ok(dot(pi.probs(), y) - g.tau() * kl_divergence(pi.probs(), g.log_pi0()))
}

fn check_principal_args(j: usize, y_j: &[f64], y_minus_j: &[f64], g: &GameInstance) -> Result<()> {
    g.check_incentive(j, y_j)?;
    g.check_len(y_minus_j)?;
    if let Some(i) = y_minus_j.iter().position(|v| !v.is_finite() || *v < -BOX_SLACK) {
        return Err(CageError::Constraint(format!(
            "other principals' aggregate has entry {i} = {}",
            y_minus_j[i]
        )));
    }
    Ok(())
}

/// Principal `j`'s utility `pi*(Y^{-j} + y^j) . (w^j q^j - y^j)`.
pub fn principal_utility(j: usize, y_j: &[f64], y_minus_j: &[f64], g: &GameInstance) -> Result<f64> {
    check_principal_args(j, y_j, y_minus_j, g)?;
    Ok(principal_value(g.upper(j), y_j, y_minus_j, g.log_pi0(), g.tau()))
}

/// Gradient of [`principal_utility`] with respect to `y^j`:
/// `S(Y)^T (w^j q^j - y^j) - pi*(Y)`.
pub fn principal_gradient(
    j: usize,
    y_j: &[f64],
    y_minus_j: &[f64],
    g: &GameInstance,
) -> Result<Vec<f64>> {
    check_principal_args(j, y_j, y_minus_j, g)?;
    Ok(principal_value_grad(g.upper(j), y_j, y_minus_j, g.log_pi0(), g.tau()).1)
}

pub(crate) fn principal_value(
    upper: &[f64],
    y: &[f64],
    y_minus: &[f64],
    log_pi0: &[f64],
    tau: f64,
) -> f64 {
    let agg: Vec<f64> = y.iter().zip(y_minus).map(|(a, b)| a + b).collect();
    let pi = tilt(log_pi0, &agg, tau);
    pi.iter()
        .zip(upper.iter().zip(y))
        .map(|(p, (u, v))| p * (u - v))
        .sum()
}

/// Value and gradient in one pass. With `p = w q - y` and `pi = pi*(Y)`,
/// `S p = pi .* (p - pi.p) / tau`.
pub(crate) fn principal_value_grad(
    upper: &[f64],
    y: &[f64],
    y_minus: &[f64],
    log_pi0: &[f64],
    tau: f64,
) -> (f64, Vec<f64>) {
    let agg: Vec<f64> = y.iter().zip(y_minus).map(|(a, b)| a + b).collect();
    let pi = tilt(log_pi0, &agg, tau);
    let payoff: Vec<f64> = upper.iter().zip(y).map(|(u, v)| u - v).collect();
    let value = dot(&pi, &payoff);
    let grad = pi
        .iter()
        .zip(&payoff)
        .map(|(p, r)| p * (r - value) / tau - p)
        .collect();
    (value, grad)
}

/// Jacobian of [`best_response`]: `(Diag(pi) - pi pi^T) / tau`.
pub fn response_jacobian(y: &[f64], g: &GameInstance) -> Result<DMatrix<f64>> {
    let pi = best_response(y, g)?;
    Ok(jacobian_from_policy(pi.probs(), g.tau()))
}

pub(crate) fn jacobian_from_policy(pi: &[f64], tau: f64) -> DMatrix<f64> {
    let n = pi.len();
    DMatrix::from_fn(n, n, |r, c| {
        let d = if r == c { pi[r] } else { 0.0 };
        (d - pi[r] * pi[c]) / tau
    })
}

/// Individual-rationality slack `pi*(Y) . Y - tau KL(pi*(Y) || pi0)`.
pub fn ir_value(y: &[f64], g: &GameInstance) -> Result<f64> {
    let pi = best_response(y, g)?;
    agent_utility(&pi, y, g)
}
