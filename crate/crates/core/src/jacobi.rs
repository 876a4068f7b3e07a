//! Nonlinear Jacobi best-response iteration over the principals.
//!
//! Each round every principal re-solves its subproblem against the other
//! principals' incentives from the previous round (Jacobi) or against the
//! freshest ones (Gauss-Seidel). The loop stops once both the incentives and
//! the induced policy move by at most `epsilon` in the infinity norm.

use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};
use crate::game::{self, GameInstance, IncentiveProfile, IncentiveVector, PolicySimplex};
use crate::principal::{self, SolverOptions};

/// IR slack below this at an accepted iterate is reported as a violation.
pub const IR_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    #[default]
    Jacobi,
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JacobiOptions {
    pub epsilon: f64,
    pub max_rounds: usize,
    pub update_mode: UpdateMode,
    /// Keep per-round snapshots in [`EquilibriumResult::trace`].
    pub record_trace: bool,
    pub solver: SolverOptions,
}

impl Default for JacobiOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_rounds: 100,
            update_mode: UpdateMode::Jacobi,
            record_trace: false,
            solver: SolverOptions::default(),
        }
    }
}

impl JacobiOptions {
    pub fn traced() -> Self {
        Self {
            record_trace: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(CageError::Precondition("epsilon must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(CageError::Precondition("max_rounds must be positive".into()));
        }
        self.solver.validate()
    }
}

/// Snapshot after one round. Round 0 holds the initial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub incentives: Vec<Vec<f64>>,
    pub policy: Vec<f64>,
    /// `||y^{j,(t)} - y^{j,(t-1)}||_inf` per principal (zeros for round 0).
    pub step_norms: Vec<f64>,
    pub policy_change: f64,
}

impl RoundRecord {
    pub fn max_step(&self) -> f64 {
        self.step_norms.iter().copied().fold(0.0, f64::max)
    }

    /// `Y^{-j}` at this round.
    pub fn others(&self, j: usize) -> Vec<f64> {
        let n = self.policy.len();
        let mut out = vec![0.0; n];
        for (i, y) in self.incentives.iter().enumerate() {
            if i != j {
                out.iter_mut().zip(y).for_each(|(o, v)| *o += v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumStatus {
    Converged,
    /// The round budget ran out; the last iterate is attached.
    NoEquilibriumFound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub incentives: IncentiveProfile,
    pub policy: PolicySimplex,
    pub rounds: usize,
    pub converged: bool,
    pub status: EquilibriumStatus,
    /// Largest incentive change in the final round.
    pub final_step: f64,
    pub final_policy_change: f64,
    /// Subproblem solves that hit their iteration cap.
    pub unconverged_subproblems: usize,
    pub min_ir_value: f64,
    pub ir_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<RoundRecord>>,
}

impl EquilibriumResult {
    /// `a_t = max_j ||y^{j,(t)} - y^{j,*}||_inf` for `t = 0..=rounds`, with
    /// `y*` taken as the final iterate. Needs a recorded trace.
    pub fn deviation_proxies(&self) -> Option<Vec<f64>> {
        let trace = self.trace.as_ref()?;
        Some(
            trace
                .iter()
                .map(|r| {
                    r.incentives
                        .iter()
                        .zip(self.incentives.per_principal())
                        .flat_map(|(a, b)| a.iter().zip(b.values()).map(|(x, y)| (x - y).abs()))
                        .fold(0.0, f64::max)
                })
                .collect(),
        )
    }
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn aggregate(ys: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for y in ys {
        out.iter_mut().zip(y).for_each(|(o, v)| *o += v);
    }
    out
}

fn others(ys: &[Vec<f64>], j: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, y) in ys.iter().enumerate() {
        if i != j {
            out.iter_mut().zip(y).for_each(|(o, v)| *o += v);
        }
    }
    out
}

/// Runs the best-response loop from `init`.
pub fn solve_equilibrium(
    g: &GameInstance,
    init: &IncentiveProfile,
    opts: &JacobiOptions,
) -> Result<EquilibriumResult> {
    opts.validate()?;
    g.check_profile(init)?;
    let n = g.num_candidates();
    let nj = g.num_principals();
    // Clip away the slack tolerated by the box check.
    let mut ys: Vec<Vec<f64>> = init
        .per_principal()
        .iter()
        .enumerate()
        .map(|(j, y)| {
            y.iter()
                .zip(g.upper(j))
                .map(|(v, u)| v.clamp(0.0, *u))
                .collect()
        })
        .collect();
    let mut pi = game::tilt(g.log_pi0(), &aggregate(&ys, n), g.tau());

    let mut trace = opts.record_trace.then(|| {
        vec![RoundRecord {
            round: 0,
            incentives: ys.clone(),
            policy: pi.clone(),
            step_norms: vec![0.0; nj],
            policy_change: 0.0,
        }]
    });

    let mut rounds = 0;
    let mut converged = false;
    let mut unconverged_subproblems = 0;
    let mut min_ir = f64::INFINITY;
    let mut ir_violations = 0;
    let mut final_step = f64::INFINITY;
    let mut final_policy_change = f64::INFINITY;

    while rounds < opts.max_rounds {
        let mut next = ys.clone();
        for j in 0..nj {
            let basis = match opts.update_mode {
                UpdateMode::Jacobi => &ys,
                UpdateMode::GaussSeidel => &next,
            };
            let y_minus = others(basis, j, n);
            let sol = principal::solve_mpec(j, &y_minus, g, &opts.solver, Some(&ys[j]))?;
            if !sol.converged {
                unconverged_subproblems += 1;
            }
            next[j] = sol.incentive.0;
        }
        let agg = aggregate(&next, n);
        let next_pi = game::tilt(g.log_pi0(), &agg, g.tau());

        let step_norms: Vec<f64> = next.iter().zip(&ys).map(|(a, b)| inf_dist(a, b)).collect();
        final_step = step_norms.iter().copied().fold(0.0, f64::max);
        final_policy_change = inf_dist(&next_pi, &pi);

        let ir = game::ir_value(&agg, g)?;
        min_ir = min_ir.min(ir);
        if ir < -IR_TOLERANCE {
            ir_violations += 1;
            log::warn!("IR slack {ir:e} at round {}", rounds + 1);
        }

        rounds += 1;
        if let Some(t) = trace.as_mut() {
            t.push(RoundRecord {
                round: rounds,
                incentives: next.clone(),
                policy: next_pi.clone(),
                step_norms,
                policy_change: final_policy_change,
            });
        }
        ys = next;
        pi = next_pi;
        if final_step <= opts.epsilon && final_policy_change <= opts.epsilon {
            converged = true;
            break;
        }
    }

    if !converged {
        log::debug!(
            "no equilibrium within {} rounds (last step {final_step:e})",
            opts.max_rounds
        );
    }

    Ok(EquilibriumResult {
        incentives: IncentiveProfile::new(ys.into_iter().map(IncentiveVector).collect())?,
        policy: PolicySimplex::from_normalized(pi),
        rounds,
        converged,
        status: if converged {
            EquilibriumStatus::Converged
        } else {
            EquilibriumStatus::NoEquilibriumFound
        },
        final_step,
        final_policy_change,
        unconverged_subproblems,
        min_ir_value: min_ir,
        ir_violations,
        trace,
    })
}

/// Convenience wrapper starting from the zero profile.
pub fn solve_from_zero(g: &GameInstance, opts: &JacobiOptions) -> Result<EquilibriumResult> {
    let init = IncentiveProfile::zeros(g.num_candidates(), g.num_principals());
    solve_equilibrium(g, &init, opts)
}

pub const STATIONARITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrincipalStationarity {
    pub principal: usize,
    pub projected_grad_norm: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub tol: f64,
    pub principals: Vec<PrincipalStationarity>,
    pub pass: bool,
}

/// First-order certificate: each principal's projected gradient at its own
/// incentive, holding the others at theirs.
pub fn check_stationarity(
    result: &EquilibriumResult,
    g: &GameInstance,
    tol: f64,
) -> Result<StationarityReport> {
    let profile = &result.incentives;
    g.check_profile(profile)?;
    let principals = (0..g.num_principals())
        .map(|j| {
            let norm =
                principal::projected_gradient_norm(j, profile.principal(j), &profile.others(j), g)?;
            Ok(PrincipalStationarity {
                principal: j,
                projected_grad_norm: norm,
                pass: norm <= tol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = principals.iter().all(|p| p.pass);
    Ok(StationarityReport {
        tol,
        principals,
        pass,
    })
}
