//! Per-token decoding over recorded logit streams. Each step restricts the
//! base model to its top candidates, turns guidance log-probabilities into
//! nonnegative rewards, solves the step's equilibrium and picks a token.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};
use crate::game::{
    GameInstance, IncentiveProfile, IncentiveVector, PolicySimplex, PreferenceWeights, RewardVector,
};
use crate::jacobi::{self, EquilibriumResult, JacobiOptions, UpdateMode};
use crate::principal::SolverOptions;

/// Floor for renormalized base probabilities so every candidate keeps full
/// support.
pub const PI0_FLOOR: f64 = 1e-300;

/// One decoding position: candidate ids with base and per-objective
/// natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub step: usize,
    #[serde(rename = "ids")]
    pub candidate_ids: Vec<u64>,
    #[serde(rename = "base")]
    pub base_logprobs: Vec<f64>,
    #[serde(rename = "objectives")]
    pub objective_logprobs: Vec<Vec<f64>>,
}

impl LogitRecord {
    pub fn num_candidates(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn num_objectives(&self) -> usize {
        self.objective_logprobs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.candidate_ids.len();
        if n == 0 {
            return Err(CageError::Format(format!("step {}: no candidates", self.step)));
        }
        if self.base_logprobs.len() != n {
            return Err(CageError::Format(format!(
                "step {}: {} ids but {} base logprobs",
                self.step,
                n,
                self.base_logprobs.len()
            )));
        }
        if self.objective_logprobs.is_empty() {
            return Err(CageError::Format(format!("step {}: no objectives", self.step)));
        }
        for (j, o) in self.objective_logprobs.iter().enumerate() {
            if o.len() != n {
                return Err(CageError::Format(format!(
                    "step {}: objective {j} has {} logprobs, expected {n}",
                    self.step,
                    o.len()
                )));
            }
        }
        let finite = self
            .base_logprobs
            .iter()
            .chain(self.objective_logprobs.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(CageError::Format(format!("step {}: non-finite logprob", self.step)));
        }
        Ok(())
    }

    /// Keeps the `top_n` candidates with the highest base logprob (ties to
    /// the lower index), in their original order.
    pub fn restrict(&self, top_n: usize) -> LogitRecord {
        if top_n >= self.num_candidates() {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.num_candidates()).collect();
        order.sort_by(|&a, &b| self.base_logprobs[b].total_cmp(&self.base_logprobs[a]));
        let mut keep = order[..top_n].to_vec();
        keep.sort_unstable();
        LogitRecord {
            step: self.step,
            candidate_ids: keep.iter().map(|&i| self.candidate_ids[i]).collect(),
            base_logprobs: keep.iter().map(|&i| self.base_logprobs[i]).collect(),
            objective_logprobs: self
                .objective_logprobs
                .iter()
                .map(|o| keep.iter().map(|&i| o[i]).collect())
                .collect(),
        }
    }

    /// Base distribution renormalized over the listed candidates.
    pub fn base_policy(&self) -> Result<PolicySimplex> {
        let m = self.base_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.base_logprobs.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| (v / s).max(PI0_FLOOR)).collect();
        let t: f64 = p.iter().sum();
        PolicySimplex::normalized(p.iter().map(|v| v / t).collect(), 1e-9)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardNormalization {
    /// Subtract the per-step minimum so the smallest reward is zero.
    #[default]
    ShiftMinToZero,
    ClampNegativeToZero,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub top_n: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub max_new_tokens: usize,
    pub selection: Selection,
    pub reward_normalization: RewardNormalization,
    /// Start each step from the previous step's incentives.
    pub warm_start: bool,
    pub max_rounds: usize,
    pub update_mode: UpdateMode,
    pub solver: SolverOptions,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            top_n: 50,
            tau: 0.1,
            epsilon: 1e-4,
            max_new_tokens: 512,
            selection: Selection::Greedy,
            reward_normalization: RewardNormalization::ShiftMinToZero,
            warm_start: true,
            max_rounds: JacobiOptions::default().max_rounds,
            update_mode: UpdateMode::Jacobi,
            solver: SolverOptions::default(),
        }
    }
}

impl DecodeOptions {
    pub fn jacobi_options(&self) -> JacobiOptions {
        JacobiOptions {
            epsilon: self.epsilon,
            max_rounds: self.max_rounds,
            update_mode: self.update_mode,
            record_trace: false,
            solver: self.solver,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(CageError::Precondition("top_n must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(CageError::Domain(format!("tau must be > 0, got {}", self.tau)));
        }
        self.jacobi_options().validate()
    }
}

/// `objective - base` per candidate, before normalization.
pub fn raw_rewards(rec: &LogitRecord) -> Result<Vec<Vec<f64>>> {
    rec.validate()?;
    Ok(rec
        .objective_logprobs
        .iter()
        .map(|o| o.iter().zip(&rec.base_logprobs).map(|(a, b)| a - b).collect())
        .collect())
}

pub fn normalize_rewards(raw: &[f64], norm: RewardNormalization) -> Vec<f64> {
    match norm {
        RewardNormalization::ShiftMinToZero => {
            let m = raw.iter().copied().fold(f64::INFINITY, f64::min);
            raw.iter().map(|v| v - m).collect()
        }
        RewardNormalization::ClampNegativeToZero => raw.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Implicit rewards of every objective, normalized to be nonnegative.
pub fn extract_rewards(rec: &LogitRecord, norm: RewardNormalization) -> Result<Vec<RewardVector>> {
    raw_rewards(rec)?
        .iter()
        .map(|q| RewardVector::new(normalize_rewards(q, norm)))
        .collect()
}

/// Incentives from a previous step keyed by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub candidate_ids: Vec<u64>,
    pub incentives: Vec<Vec<f64>>,
}

impl WarmStart {
    /// Carries incentives over to a new candidate set. Unknown ids start at
    /// zero and every entry is clipped into the new box.
    pub fn project(&self, ids: &[u64], g: &GameInstance) -> IncentiveProfile {
        let per = (0..g.num_principals())
            .map(|j| {
                let upper = g.upper(j);
                let prev = self.incentives.get(j);
                IncentiveVector(
                    ids.iter()
                        .zip(upper)
                        .map(|(id, u)| {
                            let v = prev
                                .and_then(|p| {
                                    self.candidate_ids.iter().position(|c| c == id).map(|k| p[k])
                                })
                                .unwrap_or(0.0);
                            v.clamp(0.0, *u)
                        })
                        .collect(),
                )
            })
            .collect();
        IncentiveProfile::new(per).expect("dimensions come from the game")
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// Index into the restricted candidate list.
    pub chosen: usize,
    pub token: u64,
    pub candidate_ids: Vec<u64>,
    /// Raw rewards over the restricted candidates, one vector per objective.
    pub raw_rewards: Vec<Vec<f64>>,
    pub game: GameInstance,
    /// On non-convergence the policy is the response to the last aggregate.
    pub equilibrium: EquilibriumResult,
}

impl StepResult {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            candidate_ids: self.candidate_ids.clone(),
            incentives: self
                .equilibrium
                .incentives
                .per_principal()
                .iter()
                .map(|v| v.0.clone())
                .collect(),
        }
    }
}

/// Builds and solves the game for one record and selects a token.
pub fn step_decode(
    rec: &LogitRecord,
    weights: &PreferenceWeights,
    opts: &DecodeOptions,
    warm: Option<&WarmStart>,
) -> Result<StepResult> {
    opts.validate()?;
    rec.validate()?;
    if weights.len() != rec.num_objectives() {
        return Err(CageError::Precondition(format!(
            "{} weights for {} objectives",
            weights.len(),
            rec.num_objectives()
        )));
    }
    let r = rec.restrict(opts.top_n);
    if r.num_candidates() < 2 {
        return Err(CageError::Precondition(format!(
            "step {}: need at least two candidates",
            rec.step
        )));
    }
    let raw = raw_rewards(&r)?;
    let rewards = raw
        .iter()
        .map(|q| RewardVector::new(normalize_rewards(q, opts.reward_normalization)))
        .collect::<Result<Vec<_>>>()?;
    let g = GameInstance::new(r.base_policy()?, rewards, weights.clone(), opts.tau)?;
    let init = match warm {
        Some(w) if opts.warm_start => w.project(&r.candidate_ids, &g),
        _ => IncentiveProfile::zeros(g.num_candidates(), g.num_principals()),
    };
    let eq = jacobi::solve_equilibrium(&g, &init, &opts.jacobi_options())?;
    if !eq.converged {
        log::warn!("step {}: equilibrium not found, using the last iterate's response", rec.step);
    }
    let chosen = match opts.selection {
        Selection::Greedy => eq.policy.argmax(),
        Selection::Sample { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ rec.step as u64);
            WeightedIndex::new(eq.policy.probs())
                .map_err(|e| CageError::Domain(format!("cannot sample from policy: {e}")))?
                .sample(&mut rng)
        }
    };
    Ok(StepResult {
        chosen,
        token: r.candidate_ids[chosen],
        candidate_ids: r.candidate_ids,
        raw_rewards: raw,
        game: g,
        equilibrium: eq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub tokens: Vec<u64>,
    pub chosen_indices: Vec<usize>,
    pub policies: Vec<Vec<f64>>,
    /// Sum over steps of each objective's raw reward for the chosen token.
    /// A proxy for external reward-model scores.
    pub proxy_totals: Vec<f64>,
    pub converged: Vec<bool>,
    pub rounds: Vec<usize>,
    pub reward_normalization: RewardNormalization,
}

impl DecodeOutcome {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Share of steps whose equilibrium converged; 1 for an empty outcome.
    pub fn converged_fraction(&self) -> f64 {
        if self.converged.is_empty() {
            return 1.0;
        }
        self.converged.iter().filter(|c| **c).count() as f64 / self.converged.len() as f64
    }
}

/// Runs [`step_decode`] over a step-ordered stream, up to `max_new_tokens`.
pub fn decode_stream(
    records: &[LogitRecord],
    weights: &PreferenceWeights,
    opts: &DecodeOptions,
) -> Result<DecodeOutcome> {
    opts.validate()?;
    let mut out = DecodeOutcome {
        tokens: Vec::new(),
        chosen_indices: Vec::new(),
        policies: Vec::new(),
        proxy_totals: vec![0.0; weights.len()],
        converged: Vec::new(),
        rounds: Vec::new(),
        reward_normalization: opts.reward_normalization,
    };
    let mut warm: Option<WarmStart> = None;
    let mut last_step: Option<usize> = None;
    for rec in records.iter().take(opts.max_new_tokens) {
        if last_step.is_some_and(|s| rec.step <= s) {
            return Err(CageError::Format(format!(
                "step {} follows step {}; records must be step-ordered",
                rec.step,
                last_step.unwrap_or(0)
            )));
        }
        last_step = Some(rec.step);
        let s = step_decode(rec, weights, opts, warm.as_ref()).map_err(|e| match e {
            CageError::Format(m) if !m.starts_with("step") => {
                CageError::Format(format!("step {}: {m}", rec.step))
            }
            other => other,
        })?;
        for (total, q) in out.proxy_totals.iter_mut().zip(&s.raw_rewards) {
            *total += q[s.chosen];
        }
        out.tokens.push(s.token);
        out.chosen_indices.push(s.chosen);
        out.policies.push(s.equilibrium.policy.probs().to_vec());
        out.converged.push(s.equilibrium.converged);
        out.rounds.push(s.equilibrium.rounds);
        warm = Some(s.warm_start());
    }
    Ok(out)
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Synthetic vocabulary size that candidate ids are drawn from.
pub const SYNTH_VOCAB: usize = 32_000;

/// Reproducible synthetic stream. Objective 0 scores candidates by a latent
/// Gaussian `c`; objective `j >= 1` uses `rho c + sqrt(1 - rho^2) e_j`, so
/// `rho = 1` copies the ranking and `rho = -1` reverses it.
pub fn synth_stream(
    n_steps: usize,
    n_candidates: usize,
    j: usize,
    correlation: f64,
    seed: u64,
) -> Result<Vec<LogitRecord>> {
    if n_candidates < 2 || n_candidates > SYNTH_VOCAB || j == 0 {
        return Err(CageError::Precondition(format!(
            "need 2 <= candidates <= {SYNTH_VOCAB} and J >= 1, got {n_candidates} and {j}"
        )));
    }
    if !(-1.0..=1.0).contains(&correlation) {
        return Err(CageError::Domain(format!("correlation {correlation} outside [-1, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_scale = (1.0 - correlation * correlation).max(0.0).sqrt();
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let records = (0..n_steps)
        .map(|step| {
            let ids: Vec<u64> = rand::seq::index::sample(&mut rng, SYNTH_VOCAB, n_candidates)
                .into_iter()
                .map(|i| i as u64)
                .collect();
            let logits: Vec<f64> = normal(&mut rng, n_candidates).iter().map(|v| 2.0 * v).collect();
            let base = log_softmax(&logits);
            let latent = normal(&mut rng, n_candidates);
            let objectives = (0..j)
                .map(|k| {
                    let score: Vec<f64> = if k == 0 {
                        latent.clone()
                    } else {
                        let e = normal(&mut rng, n_candidates);
                        latent
                            .iter()
                            .zip(&e)
                            .map(|(c, e)| correlation * c + noise_scale * e)
                            .collect()
                    };
                    let tilted: Vec<f64> = base.iter().zip(&score).map(|(b, s)| b + s).collect();
                    log_softmax(&tilted)
                })
                .collect();
            LogitRecord { step, candidate_ids: ids, base_logprobs: base, objective_logprobs: objectives }
        })
        .collect();
    Ok(records)
}

/// Reads one record per non-blank line. Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<LogitRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CageError::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogitRecord = serde_json::from_str(&line).map_err(|e| {
            CageError::Format(format!("line {}, column {}: {e}", i + 1, e.column()))
        })?;
        rec.validate()
            .map_err(|e| CageError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[LogitRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CageError::Format(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| CageError::Format(e.to_string()))?;
    }
    Ok(())
}
