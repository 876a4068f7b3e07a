//! Policy-space characterizations of the equilibrium, used to cross-check
//! the best-response loop.
//!
//! Any interior policy `pi` is implemented by the incentives
//! `Y = tau log(pi / pi0) + c`; the cheapest nonnegative choice uses
//! `c = c_min(pi)`, which turns the principals' joint surplus into a
//! strictly concave function of `pi` alone:
//!
//! * aggregate surplus: `pi . Q - tau KL(pi || pi0) - max(0, c_min(pi))`
//! * user-regularized utility: `pi . Q - J tau KL(pi || pi0) - J c_min(pi)`
//!
//! with `Q = sum_j w^j q^j`. Both are maximized by entropic mirror ascent
//! followed by an exact polish. The module also holds the min-cost incentive
//! recovery and an exhaustive grid oracle for tiny games.

use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};
use crate::game::{self, GameInstance, IncentiveProfile, IncentiveVector, PolicySimplex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectiveMode {
    #[default]
    AggregateSurplus,
    UserReg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurplusObjective {
    pub mode: ObjectiveMode,
    /// Interior floor of the simplex.
    pub floor: f64,
}

impl Default for SurplusObjective {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::AggregateSurplus,
            floor: 1e-9,
        }
    }
}

impl SurplusObjective {
    pub fn new(mode: ObjectiveMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

pub const MIRROR_MAX_ITERS: usize = 5000;
pub const MIRROR_STOP: f64 = 1e-10;

/// `Q_w = sum_j w^j q^j`.
pub fn aggregate_score_vector(g: &GameInstance) -> Vec<f64> {
    let mut q = vec![0.0; g.num_candidates()];
    for j in 0..g.num_principals() {
        q.iter_mut().zip(g.upper(j)).for_each(|(a, b)| *a += b);
    }
    q
}

fn log_ratios(pi: &[f64], g: &GameInstance) -> Result<Vec<f64>> {
    g.check_len(pi)?;
    if let Some(i) = pi.iter().position(|&p| !(p > 0.0)) {
        return Err(CageError::Domain(format!(
            "policy entry {i} is {}; a strictly positive policy is required",
            pi[i]
        )));
    }
    Ok(pi
        .iter()
        .zip(g.log_pi0())
        .map(|(p, l)| g.tau() * (p.ln() - l))
        .collect())
}

/// `(c_min, c_max)` with `c_min = max_i -tau log(pi_i / pi0_i)` and
/// `c_max = min_i (Q_i - tau log(pi_i / pi0_i))`. The policy can be
/// implemented inside the principals' boxes iff `c_min <= c_max`.
pub fn cmin_cmax(pi: &PolicySimplex, g: &GameInstance) -> Result<(f64, f64)> {
    let r = log_ratios(pi.probs(), g)?;
    Ok(cmin_cmax_from_ratios(&r, &aggregate_score_vector(g)))
}

fn cmin_cmax_from_ratios(r: &[f64], q: &[f64]) -> (f64, f64) {
    let cmin = r.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let cmax = q
        .iter()
        .zip(r)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    (cmin, cmax)
}

/// Evaluates the policy-space objective selected by `mode`.
pub fn policy_objective(pi: &PolicySimplex, g: &GameInstance, mode: ObjectiveMode) -> Result<f64> {
    let r = log_ratios(pi.probs(), g)?;
    Ok(objective_from_ratios(pi.probs(), &r, g, mode))
}

fn objective_from_ratios(pi: &[f64], r: &[f64], g: &GameInstance, mode: ObjectiveMode) -> f64 {
    let q = aggregate_score_vector(g);
    // tau KL = pi . r
    let tau_kl = game::dot(pi, r);
    let cmin = r.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let lin = game::dot(pi, &q);
    match mode {
        ObjectiveMode::AggregateSurplus => lin - tau_kl - cmin.max(0.0),
        ObjectiveMode::UserReg => {
            let j = g.num_principals() as f64;
            lin - j * tau_kl - j * cmin
        }
    }
}

/// Maximizer of a policy-space objective and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyMaximum {
    pub policy: PolicySimplex,
    pub value: f64,
    pub mode: ObjectiveMode,
    pub mirror_iterations: usize,
    pub step_size: f64,
    /// True when the exact stationarity polish replaced the mirror iterate.
    pub polished: bool,
}

fn softmax_in_place(l: &mut [f64]) {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in l.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    l.iter_mut().for_each(|v| *v /= s);
}

fn apply_floor(p: &mut [f64], floor: f64) {
    if p.iter().any(|&v| v < floor) {
        p.iter_mut().for_each(|v| *v = v.max(floor));
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
    }
}

/// Index attaining `c_min`, i.e. the smallest ratio `pi_i / pi0_i`; lowest
/// index on ties.
fn cmin_index(r: &[f64]) -> usize {
    let mut k = 0;
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v < r[k] {
            k = i;
        }
    }
    k
}

/// Maximizes the chosen objective over the floored simplex (restricted to
/// implementable policies for the user-regularized mode).
///
/// Entropic mirror ascent with step `0.1 / ||Q||_inf` and subgradients of
/// the max terms taken at the attaining index gets close to the maximizer;
/// the result is then polished by solving the stationarity conditions in
/// incentive space exactly. Both objectives share the form
/// `s (pi . V - tau KL - c_min)` (`s = 1, V = Q` or `s = J, V = Q / J`), whose
/// maximizer is implemented by `Y_i = max(0, V_i - v - tau)` where `v` is the
/// optimal value of the bracket. `v` is the root of a scalar equation found
/// by bisection. The polished point is kept only if it scores at least as
/// well as the best mirror iterate.
pub fn maximize_policy_objective(g: &GameInstance, objective: &SurplusObjective) -> Result<PolicyMaximum> {
    let n = g.num_candidates();
    if !(objective.floor > 0.0 && objective.floor < 1.0 / n as f64) {
        return Err(CageError::Precondition(format!(
            "floor {} must lie in (0, 1/N)",
            objective.floor
        )));
    }
    let mode = objective.mode;
    let q = aggregate_score_vector(g);
    let scale = match mode {
        ObjectiveMode::AggregateSurplus => 1.0,
        ObjectiveMode::UserReg => g.num_principals() as f64,
    };
    let tau = g.tau();
    let qmax = q.iter().copied().fold(0.0, f64::max);
    let step = if qmax > 0.0 { 0.1 / qmax } else { 0.1 };

    let reachable = |r: &[f64]| {
        let (lo, hi) = cmin_cmax_from_ratios(r, &q);
        mode == ObjectiveMode::AggregateSurplus || lo <= hi
    };

    let mut pi = g.pi0().probs().to_vec();
    apply_floor(&mut pi, objective.floor);
    let mut r = log_ratios(&pi, g)?;
    if !reachable(&r) {
        return Err(CageError::Infeasible(
            "no implementable policy: the base policy is outside the reachable set".into(),
        ));
    }
    let mut value = objective_from_ratios(&pi, &r, g, mode);
    let mut best = (value, pi.clone());
    let mut iterations = 0;

    while iterations < MIRROR_MAX_ITERS {
        iterations += 1;
        // Supergradient of scale * (pi.V - tau KL - c_min) where V = Q/scale.
        let k = cmin_index(&r);
        let grad: Vec<f64> = (0..n)
            .map(|i| {
                let mut d = q[i] - scale * (r[i] + tau);
                if i == k {
                    d += scale * tau / pi[i];
                }
                d
            })
            .collect();
        let mut eta = step;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = pi
                .iter()
                .zip(&grad)
                .map(|(p, d)| p.ln() + eta * d)
                .collect();
            softmax_in_place(&mut trial);
            apply_floor(&mut trial, objective.floor);
            let tr = log_ratios(&trial, g)?;
            if reachable(&tr) {
                accepted = Some((trial, tr));
                break;
            }
            eta *= 0.5;
        }
        let Some((next, next_r)) = accepted else {
            break;
        };
        let next_value = objective_from_ratios(&next, &next_r, g, mode);
        let change = (next_value - value).abs();
        pi = next;
        r = next_r;
        value = next_value;
        if value > best.0 {
            best = (value, pi.clone());
        }
        if change < MIRROR_STOP {
            break;
        }
    }

    let mut polished = false;
    if let Some(candidate) = stationary_policy(g, &q, scale) {
        if candidate.iter().all(|&p| p >= objective.floor) {
            let cr = log_ratios(&candidate, g)?;
            if reachable(&cr) {
                let cv = objective_from_ratios(&candidate, &cr, g, mode);
                if cv >= best.0 - 1e-12 * best.0.abs().max(1.0) {
                    best = (cv, candidate);
                    polished = true;
                }
            }
        }
    }

    Ok(PolicyMaximum {
        policy: PolicySimplex::from_normalized(best.1),
        value: best.0,
        mode,
        mirror_iterations: iterations,
        step_size: step,
        polished,
    })
}

/// Solves `h(v) = pi(Y(v)) . (V - Y(v)) - v = 0` with
/// `Y(v) = max(0, V - v - tau)` and `V = Q / scale`, and returns the
/// induced policy.
fn stationary_policy(g: &GameInstance, q: &[f64], scale: f64) -> Option<Vec<f64>> {
    let tau = g.tau();
    let v_target: Vec<f64> = q.iter().map(|x| x / scale).collect();
    let incentives = |v: f64| -> Vec<f64> {
        v_target.iter().map(|vi| (vi - v - tau).max(0.0)).collect()
    };
    let h = |v: f64| {
        let y = incentives(v);
        let pi = game::tilt(g.log_pi0(), &y, tau);
        let payoff: Vec<f64> = v_target.iter().zip(&y).map(|(a, b)| a - b).collect();
        game::dot(&pi, &payoff) - v
    };
    let vmin = v_target.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = v_target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Below vmin - tau every coordinate is free and h = tau > 0; at vmax no
    // incentive is paid and h = pi0 . V - max V <= 0.
    let (mut lo, mut hi) = (vmin - tau - 1.0, vmax);
    if !(h(lo) > 0.0 && h(hi) <= 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y = incentives(0.5 * (lo + hi));
    Some(game::tilt(g.log_pi0(), &y, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CostRule {
    /// `c = max(0, c_min)`: the cheapest shift that keeps the agent's
    /// participation constraint.
    #[default]
    MaxZeroCmin,
    /// `c = c_min`.
    RawCmin,
}

/// Cheapest aggregate incentive implementing `pi`:
/// `Y_i = tau log(pi_i / pi0_i) + c`.
pub fn min_cost_incentive(pi: &PolicySimplex, g: &GameInstance, rule: CostRule) -> Result<Vec<f64>> {
    let r = log_ratios(pi.probs(), g)?;
    let q = aggregate_score_vector(g);
    let (cmin, cmax) = cmin_cmax_from_ratios(&r, &q);
    let c = match rule {
        CostRule::MaxZeroCmin => cmin.max(0.0),
        CostRule::RawCmin => cmin,
    };
    let slack = 1e-12 * (1.0 + c.abs());
    if c > cmax + slack {
        return Err(CageError::Infeasible(format!(
            "policy not implementable within the boxes (c = {c}, c_max = {cmax})"
        )));
    }
    Ok(r.iter()
        .zip(&q)
        .map(|(ri, qi)| (ri + c).clamp(0.0, *qi))
        .collect())
}

/// Output of [`brute_force_equilibrium`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub incentives: IncentiveProfile,
    pub policy: PolicySimplex,
    /// Largest gain any principal obtains by a grid deviation.
    pub worst_deviation: f64,
    pub worst_principal: usize,
    pub certified: bool,
    pub sweeps: usize,
    pub grid_step: f64,
}

pub const BRUTE_FORCE_MAX_N: usize = 3;
pub const BRUTE_FORCE_MAX_J: usize = 2;
const BRUTE_FORCE_MAX_SWEEPS: usize = 200;

fn axis(upper: f64, step: f64) -> Vec<f64> {
    if upper <= 0.0 {
        return vec![0.0];
    }
    let count = (upper / step).floor() as usize;
    let mut v: Vec<f64> = (0..=count).map(|k| k as f64 * step).collect();
    if upper - v[count] > 1e-12 {
        v.push(upper);
    }
    v
}

/// Exhaustive best response of principal `j` over its box grid. The utility
/// separates as `sum_i b_i(y_i) / sum_i a_i(y_i)`, so each coordinate's
/// factors are tabulated once.
fn grid_best_response(
    g: &GameInstance,
    j: usize,
    y_minus: &[f64],
    axes: &[Vec<f64>],
) -> (Vec<f64>, f64) {
    let tau = g.tau();
    let upper = g.upper(j);
    let shift = axes
        .iter()
        .enumerate()
        .map(|(i, ax)| g.log_pi0()[i] + (y_minus[i] + ax[ax.len() - 1]) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let tables: Vec<Vec<(f64, f64)>> = axes
        .iter()
        .enumerate()
        .map(|(i, ax)| {
            ax.iter()
                .map(|&y| {
                    let a = (g.log_pi0()[i] + (y_minus[i] + y) / tau - shift).exp();
                    (a, a * (upper[i] - y))
                })
                .collect()
        })
        .collect();

    let n = axes.len();
    let mut idx = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, vec![0usize; n]);
    'outer: loop {
        let (mut sa, mut sb) = (0.0, 0.0);
        for (i, &k) in idx.iter().enumerate() {
            sa += tables[i][k].0;
            sb += tables[i][k].1;
        }
        let v = sb / sa;
        if v > best.0 {
            best = (v, idx.clone());
        }
        for i in (0..n).rev() {
            idx[i] += 1;
            if idx[i] < axes[i].len() {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    let y = best.1.iter().enumerate().map(|(i, &k)| axes[i][k]).collect();
    (y, best.0)
}

/// Grid-search equilibrium for tiny games (N <= 3, J <= 2): sequential
/// exhaustive best responses on each principal's box grid until no principal
/// moves, then a certificate listing the largest profitable grid deviation.
pub fn brute_force_equilibrium(
    g: &GameInstance,
    grid_step: f64,
    improve_tol: f64,
) -> Result<BruteForceResult> {
    let (n, nj) = (g.num_candidates(), g.num_principals());
    if n > BRUTE_FORCE_MAX_N || nj > BRUTE_FORCE_MAX_J {
        return Err(CageError::Precondition(format!(
            "brute force refused for N = {n}, J = {nj} (limits {BRUTE_FORCE_MAX_N}, {BRUTE_FORCE_MAX_J})"
        )));
    }
    if !(grid_step > 0.0) {
        return Err(CageError::Precondition("grid_step must be positive".into()));
    }
    let grids: Vec<Vec<Vec<f64>>> = (0..nj)
        .map(|j| g.upper(j).iter().map(|&u| axis(u, grid_step)).collect())
        .collect();

    let others = |ys: &[Vec<f64>], j: usize| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, y) in ys.iter().enumerate() {
            if i != j {
                out.iter_mut().zip(y).for_each(|(o, v)| *o += v);
            }
        }
        out
    };

    let mut ys = vec![vec![0.0; n]; nj];
    let mut sweeps = 0;
    let mut seen: Vec<Vec<Vec<f64>>> = vec![ys.clone()];
    while sweeps < BRUTE_FORCE_MAX_SWEEPS {
        sweeps += 1;
        let mut moved = false;
        for j in 0..nj {
            let y_minus = others(&ys, j);
            let current = game::principal_value(g.upper(j), &ys[j], &y_minus, g.log_pi0(), g.tau());
            let (y, v) = grid_best_response(g, j, &y_minus, &grids[j]);
            if v > current + 1e-14 * (1.0 + current.abs()) && y != ys[j] {
                ys[j] = y;
                moved = true;
            }
        }
        if !moved || seen.contains(&ys) {
            break;
        }
        seen.push(ys.clone());
    }

    let mut worst = (0.0f64, 0usize);
    for j in 0..nj {
        let y_minus = others(&ys, j);
        let current = game::principal_value(g.upper(j), &ys[j], &y_minus, g.log_pi0(), g.tau());
        let (_, v) = grid_best_response(g, j, &y_minus, &grids[j]);
        let gain = (v - current).max(0.0);
        if gain > worst.0 {
            worst = (gain, j);
        }
    }
    let incentives = IncentiveProfile::new(ys.into_iter().map(IncentiveVector).collect())?;
    let policy = game::best_response(incentives.aggregate(), g)?;
    Ok(BruteForceResult {
        incentives,
        policy,
        worst_deviation: worst.0,
        worst_principal: worst.1,
        certified: worst.0 <= improve_tol,
        sweeps,
        grid_step,
    })
}
