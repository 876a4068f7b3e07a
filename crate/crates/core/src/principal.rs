//! One principal's subproblem: maximize `f_j(y^j; Y^{-j})` over the box
//! `[0, w^j q^j]` with the agent's response substituted in closed form.
//!
//! Stationarity forces `y_k = clip(u_k - v - tau, 0, u_k)` where `u = w q`
//! and `v` is the value attained. Writing `h(v) = f(y(v)) - v`, one finds
//! `h'(v) = -1` at every root, so the root is unique, the stationary point is
//! the global maximizer, and bisection on `v` recovers it to rounding.
//!
//! A generic projected gradient ascent (Armijo backtracking along the
//! projection arc, Barzilai-Borwein trial steps) polishes that point when
//! needed and serves objectives without the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};
use crate::game::{self, GameInstance, IncentiveVector, PolicySimplex, BOX_SLACK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once the infinity norm of the projected gradient is below this.
    pub grad_tol: f64,
    pub line_search_shrink: f64,
    pub armijo_c: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            line_search_shrink: 0.5,
            armijo_c: 1e-4,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(CageError::Precondition("max_iters must be positive".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(CageError::Precondition("grad_tol must be positive".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(CageError::Precondition("line_search_shrink must lie in (0,1)".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(CageError::Precondition("armijo_c must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Outcome of a box-constrained ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxAscent {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub projected_grad_norm: f64,
    pub converged: bool,
}

const MAX_BACKTRACKS: usize = 60;
const MIN_STEP: f64 = 1e-14;
const MAX_STEP: f64 = 1e8;

/// `x + P(g)`-style projected gradient: `P(x + g) - x` clipped to the box.
pub(crate) fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| (xi + gi).clamp(lo, hi.max(lo)) - xi)
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi.max(lo));
    }
}

/// Maximizes a smooth function over `[lower, upper]` by projected gradient
/// ascent. `f` returns the value and gradient at a point. Every accepted
/// iterate is feasible and does not decrease the objective beyond rounding.
pub fn maximize_on_box<F>(
    mut f: F,
    lower: &[f64],
    upper: &[f64],
    start: &[f64],
    opts: &SolverOptions,
) -> BoxAscent
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = start.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut gx) = f(&x);
    let mut pg = inf_norm(&projected_gradient(&x, &gx, lower, upper));
    let mut step = 1.0;
    let mut iterations = 0;

    while pg > opts.grad_tol && iterations < opts.max_iters {
        iterations += 1;
        let mut alpha = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&gx).map(|(a, b)| a + alpha * b).collect();
            project(&mut trial, lower, upper);
            let decrease: f64 = trial
                .iter()
                .zip(&x)
                .zip(&gx)
                .map(|((t, a), gi)| gi * (t - a))
                .sum();
            let (ft, gt) = f(&trial);
            // Rounding slack: near the optimum the predicted gain falls below
            // the resolution of `f` itself.
            let slack = 4.0 * f64::EPSILON * fx.abs().max(1.0);
            if ft >= fx + opts.armijo_c * decrease - slack && ft >= fx - slack {
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= opts.line_search_shrink;
            if alpha < MIN_STEP {
                break;
            }
        }
        let Some((trial, ft, gt)) = accepted else {
            break;
        };
        // Barzilai-Borwein step for the next trial, using the curvature of
        // the negated objective.
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(gt.iter().zip(&gx)).map(|(si, (a, b))| -si * (a - b)).sum();
        step = if sy > 0.0 && ss > 0.0 {
            (ss / sy).clamp(MIN_STEP, MAX_STEP)
        } else {
            (alpha * 2.0).min(MAX_STEP)
        };
        let stalled = ss == 0.0;
        x = trial;
        fx = ft;
        gx = gt;
        pg = inf_norm(&projected_gradient(&x, &gx, lower, upper));
        if stalled {
            break;
        }
    }

    BoxAscent {
        converged: pg <= opts.grad_tol,
        x,
        value: fx,
        iterations,
        projected_grad_norm: pg,
    }
}

/// Solution of one principal's subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct MpecSolution {
    pub incentive: IncentiveVector,
    pub policy: PolicySimplex,
    pub value: f64,
    pub iterations: usize,
    pub projected_grad_norm: f64,
    pub converged: bool,
}

/// Solves principal `j`'s subproblem against the fixed aggregate
/// `y_minus_j` of the other principals. The ascent starts from whichever of
/// `warm_start` (when given) and the zero vector scores higher.
pub fn solve_mpec(
    j: usize,
    y_minus_j: &[f64],
    g: &GameInstance,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<MpecSolution> {
    opts.validate()?;
    if j >= g.num_principals() {
        return Err(CageError::Format(format!("no principal {j}")));
    }
    g.check_len(y_minus_j)?;
    if let Some(i) = y_minus_j.iter().position(|v| !v.is_finite() || *v < -BOX_SLACK) {
        return Err(CageError::Constraint(format!(
            "other principals' aggregate has entry {i} = {}",
            y_minus_j[i]
        )));
    }
    let n = g.num_candidates();
    let lower = vec![0.0; n];
    let upper = g.upper(j);
    let (log_pi0, tau) = (g.log_pi0(), g.tau());
    let value = |y: &[f64]| game::principal_value(upper, y, y_minus_j, log_pi0, tau);

    let (kkt, bisections) = kkt_incentive(upper, y_minus_j, log_pi0, tau);
    // The closed form leaves nothing for a warm start to do beyond breaking a
    // tie in its favour.
    let start: &[f64] = match warm_start {
        Some(w) => {
            g.check_incentive(j, w)?;
            if value(w) > value(&kkt) {
                w
            } else {
                &kkt
            }
        }
        None => &kkt,
    };

    let mut out = maximize_on_box(
        |y| game::principal_value_grad(upper, y, y_minus_j, log_pi0, tau),
        &lower,
        upper,
        start,
        opts,
    );
    out.iterations += bisections;
    let aggregate: Vec<f64> = out.x.iter().zip(y_minus_j).map(|(a, b)| a + b).collect();
    let policy = PolicySimplex::from_normalized(game::tilt(log_pi0, &aggregate, tau));
    Ok(MpecSolution {
        incentive: IncentiveVector(out.x),
        policy,
        value: out.value,
        iterations: out.iterations,
        projected_grad_norm: out.projected_grad_norm,
        converged: out.converged,
    })
}

/// Bisection on the attained value `v`; returns the stationary incentive and
/// the number of halvings.
pub(crate) fn kkt_incentive(upper: &[f64], y_minus: &[f64], log_pi0: &[f64], tau: f64) -> (Vec<f64>, usize) {
    let at = |v: f64| -> Vec<f64> { upper.iter().map(|u| (u - v - tau).clamp(0.0, *u)).collect() };
    let value = |y: &[f64]| game::principal_value(upper, y, y_minus, log_pi0, tau);
    // h(-tau) = tau > 0 since y = u pays everything away; h(max u) <= 0
    // since nothing is paid and the value cannot exceed max u.
    let (mut lo, mut hi) = (-tau, upper.iter().copied().fold(0.0, f64::max));
    let mut iters = 0;
    while iters < 200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iters += 1;
        if value(&at(mid)) > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (at(lo), at(hi));
    (if value(&a) >= value(&b) { a } else { b }, iters)
}

/// Infinity norm of principal `j`'s projected gradient at `y_j`.
pub fn projected_gradient_norm(
    j: usize,
    y_j: &[f64],
    y_minus_j: &[f64],
    g: &GameInstance,
) -> Result<f64> {
    let grad = game::principal_gradient(j, y_j, y_minus_j, g)?;
    let lower = vec![0.0; y_j.len()];
    Ok(inf_norm(&projected_gradient(y_j, &grad, &lower, g.upper(j))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BoundTag {
    Lower,
    Upper,
    Free,
}

/// Per-coordinate constraint status of an incentive vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivePattern(pub Vec<BoundTag>);

pub const PATTERN_ATOL: f64 = 1e-7;

/// Tags each coordinate of `y_j` as at its lower bound, upper bound or
/// interior. Degenerate coordinates (`w^j q^j_i = 0`) are LOWER.
pub fn active_pattern(y_j: &[f64], g: &GameInstance, j: usize) -> Result<ActivePattern> {
    active_pattern_with_tol(y_j, g, j, PATTERN_ATOL)
}

pub fn active_pattern_with_tol(
    y_j: &[f64],
    g: &GameInstance,
    j: usize,
    atol: f64,
) -> Result<ActivePattern> {
    g.check_incentive(j, y_j)?;
    Ok(ActivePattern(
        y_j.iter()
            .zip(g.upper(j))
            .map(|(&y, &u)| {
                if u == 0.0 || y <= atol {
                    BoundTag::Lower
                } else if y >= u - atol {
                    BoundTag::Upper
                } else {
                    BoundTag::Free
                }
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{PreferenceWeights, RewardVector};

    fn canonical() -> GameInstance {
        GameInstance::new(
            PolicySimplex::new(vec![0.5, 0.5]).unwrap(),
            vec![RewardVector::new(vec![1.0, 0.0]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap()
    }

    /// Grid oracle over y_1 in [0, 1] with step 1e-4.
    fn canonical_grid_optimum() -> (f64, f64) {
        let g = canonical();
        (0..=10_000)
            .map(|k| {
                let y = k as f64 * 1e-4;
                (y, game::principal_utility(0, &[y, 0.0], &[0.0, 0.0], &g).unwrap())
            })
            .fold((0.0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
    }

    #[test]
    fn canonical_instance_matches_grid() {
        let (y_grid, f_grid) = canonical_grid_optimum();
        assert!((0.190..=0.200).contains(&y_grid));
        assert!((f_grid - 0.705).abs() <= 1e-3);

        let g = canonical();
        let sol = solve_mpec(0, &[0.0, 0.0], &g, &SolverOptions::default(), None).unwrap();
        assert!(sol.converged);
        assert!((0.190..=0.200).contains(&sol.incentive[0]), "{:?}", sol.incentive);
        assert_eq!(sol.incentive[1], 0.0);
        assert!((sol.value - 0.705).abs() <= 1e-3);
        assert!((sol.incentive[0] - y_grid).abs() <= 1e-4);
        assert!(sol.value >= f_grid - 1e-12);

        let pattern = active_pattern(&sol.incentive, &g, 0).unwrap();
        assert_eq!(pattern.0, vec![BoundTag::Free, BoundTag::Lower]);
    }

    #[test]
    fn empty_box_gives_zero() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.2, 0.3, 0.5]).unwrap(),
            vec![RewardVector::zeros(3)],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        let sol = solve_mpec(0, &[0.1, 0.0, 0.2], &g, &SolverOptions::default(), None).unwrap();
        assert_eq!(sol.incentive.values(), &[0.0, 0.0, 0.0]);
        let br = game::best_response(&[0.1, 0.0, 0.2], &g).unwrap();
        assert_eq!(sol.policy, br);
        assert!(sol.converged);
    }

    #[test]
    fn warm_start_is_never_worse() {
        let g = canonical();
        let warm = [0.6, 0.0];
        let f_warm = game::principal_utility(0, &warm, &[0.0, 0.0], &g).unwrap();
        let sol = solve_mpec(0, &[0.0, 0.0], &g, &SolverOptions::default(), Some(&warm)).unwrap();
        assert!(sol.value >= f_warm);
        let f_zero = game::principal_utility(0, &[0.0, 0.0], &[0.0, 0.0], &g).unwrap();
        assert!(sol.value >= f_zero);
    }

    #[test]
    fn rejects_infeasible_warm_start() {
        let g = canonical();
        let r = solve_mpec(0, &[0.0, 0.0], &g, &SolverOptions::default(), Some(&[2.0, 0.0]));
        assert!(matches!(r, Err(CageError::Constraint(_))));
    }

    #[test]
    fn reports_non_convergence() {
        let opts = SolverOptions {
            max_iters: 1,
            grad_tol: 1e-14,
            ..Default::default()
        };
        // Ill-conditioned quadratic with its peak inside the box.
        let f = |x: &[f64]| {
            let (a, b) = (x[0] - 0.3, x[1] - 0.7);
            (-(a * a) - 100.0 * b * b, vec![-2.0 * a, -200.0 * b])
        };
        let out = maximize_on_box(f, &[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], &opts);
        assert!(!out.converged);
        assert!(out.projected_grad_norm > 1e-14);
    }

    #[test]
    fn closed_form_is_stationary() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            vec![RewardVector::new(vec![3.0, 0.05, 1.7, 2.2]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.07,
        )
        .unwrap();
        let ym = [0.4, 0.0, 1.1, 0.2];
        let (y, _) = kkt_incentive(g.upper(0), &ym, g.log_pi0(), g.tau());
        assert!(projected_gradient_norm(0, &y, &ym, &g).unwrap() < 1e-12);
    }

    #[test]
    fn pattern_tags() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.25, 0.25, 0.5]).unwrap(),
            vec![RewardVector::new(vec![1.0, 0.0, 0.5]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        let p = active_pattern(&[0.0, 0.0, 0.0], &g, 0).unwrap();
        assert!(p.0.iter().all(|t| *t == BoundTag::Lower));
        let p = active_pattern(&[1.0, 0.0, 0.5], &g, 0).unwrap();
        assert_eq!(p.0, vec![BoundTag::Upper, BoundTag::Lower, BoundTag::Upper]);
        let p = active_pattern(&[0.5, 0.0, 0.25], &g, 0).unwrap();
        assert_eq!(p.0, vec![BoundTag::Free, BoundTag::Lower, BoundTag::Free]);
    }

    #[test]
    fn box_ascent_on_concave_quadratic() {
        // max -(x-2)^2 - (y+1)^2 on [0,1]^2 -> (1, 0)
        let out = maximize_on_box(
            |x| {
                let v = -(x[0] - 2.0).powi(2) - (x[1] + 1.0).powi(2);
                (v, vec![-2.0 * (x[0] - 2.0), -2.0 * (x[1] + 1.0)])
            },
            &[0.0, 0.0],
            &[1.0, 1.0],
            &[0.5, 0.5],
            &SolverOptions::default(),
        );
        assert!(out.converged);
        assert_eq!(out.x, vec![1.0, 0.0]);
    }
}
