//! Game-dynamics diagnostics: regret of each principal along a best-response
//! trace with the deviation-based regret bound, the temperature threshold for
//! local stability, and empirical perturbation probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CageError, Result};
use crate::game::{self, GameInstance, PolicySimplex, RewardVector};
use crate::jacobi::{self, EquilibriumResult, JacobiOptions};
use crate::principal::{self, ActivePattern, SolverOptions};

/// Numerical slack on every regret assertion; the comparator is only as
/// exact as the subproblem solver.
pub const REGRET_SLACK: f64 = 1e-6;

/// Probes whose largest policy shift stays below this are treated as exactly
/// insensitive.
pub const ZERO_SENSITIVITY: f64 = 1e-12;

/// Largest tolerated max/min spread of sensitivity ratios across probes.
pub const RATIO_SPREAD_LIMIT: f64 = 10.0;

/// Text attached to every report that uses distance to the final iterate in
/// place of distance to the true equilibrium.
pub const PROXY_NOTE: &str =
    "a_t = max_j ||y^(j,t) - y^(j,T)||_inf uses the final iterate as a stand-in for the equilibrium";

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `R / tau + 1` with `R = max_j ||w^j q^j||_2`.
pub fn lipschitz_constant(g: &GameInstance) -> f64 {
    let r = (0..g.num_principals())
        .map(|j| l2(g.upper(j)))
        .fold(0.0, f64::max);
    r / g.tau() + 1.0
}

/// Temperature above which the equilibrium policy is locally Lipschitz in
/// `(log pi0, q)`: `2 N^2 J R / (pi_lower (1 - (N - 1) pi_lower))`.
///
/// Returns `f64::INFINITY` when `(N - 1) pi_lower` reaches 1.
pub fn tau_threshold(n: usize, j: usize, r: f64, pi_lower: f64) -> Result<f64> {
    if n < 2 || j < 1 {
        return Err(CageError::Domain(format!("need N >= 2 and J >= 1, got N = {n}, J = {j}")));
    }
    if !(r.is_finite() && r >= 0.0) {
        return Err(CageError::Domain(format!("R must be finite and >= 0, got {r}")));
    }
    let upper = 1.0 / (n - 1) as f64;
    if !(pi_lower > 0.0 && pi_lower <= upper) {
        return Err(CageError::Domain(format!(
            "pi_lower = {pi_lower} outside (0, 1/(N-1)) = (0, {upper})"
        )));
    }
    let denom = pi_lower * (1.0 - (n - 1) as f64 * pi_lower);
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let t = 2.0 * (n * n) as f64 * j as f64 * r / denom;
    Ok(if t.is_finite() { t } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrincipalRegret {
    pub principal: usize,
    /// `R_j(T')` for `T' = 1..=T`.
    pub cumulative: Vec<f64>,
    /// Per-round regret against that round's own best response.
    pub instantaneous: Vec<f64>,
    /// `2 L_f (J - 1) sum_{t <= T'} (a_t + a_{t-1})` for `T' = 1..=T`.
    pub bound: Vec<f64>,
    pub bound_satisfied: bool,
    /// `R_j(T)/T <= R_j(T/2)/(T/2) + slack` at the full and half horizons.
    pub time_average_nonincreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretReport {
    pub horizon: usize,
    pub lipschitz: f64,
    /// `a_0..=a_T`.
    pub deviation_proxies: Vec<f64>,
    pub proxy_note: &'static str,
    pub principals: Vec<PrincipalRegret>,
    pub bound_satisfied: bool,
    pub time_average_nonincreasing: bool,
    /// Smallest cumulative regret seen. Simultaneous updates answer the
    /// previous round's opponents, so this can be negative.
    pub min_regret: f64,
}

/// Regret of every principal along the recorded trace of `result`.
///
/// For each horizon `T'` the best fixed comparator maximizes
/// `sum_{t <= T'} f_j(.; Y^{-j,(t)})` over principal `j`'s box with the same
/// projected-gradient solver used for the subproblems.
pub fn regret_trace(
    g: &GameInstance,
    result: &EquilibriumResult,
    opts: &SolverOptions,
) -> Result<RegretReport> {
    let trace = result.trace.as_ref().ok_or_else(|| {
        CageError::Precondition("regret needs a recorded trace (enable record_trace)".into())
    })?;
    if trace.len() < 2 {
        return Err(CageError::Precondition("trace has no completed round".into()));
    }
    let a = result
        .deviation_proxies()
        .expect("trace is present, so proxies exist");
    let horizon = trace.len() - 1;
    let nj = g.num_principals();
    let n = g.num_candidates();
    let lf = lipschitz_constant(g);

    // bound prefix sums over t = 1..=T'
    let mut bound = Vec::with_capacity(horizon);
    let mut acc = 0.0;
    for t in 1..=horizon {
        acc += a[t] + a[t - 1];
        bound.push(2.0 * lf * (nj as f64 - 1.0) * acc);
    }

    let lower = vec![0.0; n];
    let principals = (0..nj)
        .map(|j| {
            let upper = g.upper(j);
            let rounds: Vec<(Vec<f64>, &[f64])> = trace[1..]
                .iter()
                .map(|r| (r.others(j), r.incentives[j].as_slice()))
                .collect();
            let realized: Vec<f64> = rounds
                .iter()
                .map(|(ym, y)| game::principal_value(upper, y, ym, g.log_pi0(), g.tau()))
                .collect();

            let instantaneous = rounds
                .iter()
                .zip(&realized)
                .map(|((ym, y), f_real)| {
                    let best = best_fixed(g, j, std::slice::from_ref(ym), &[y, &lower], opts);
                    best - f_real
                })
                .collect();

            let mut cumulative = Vec::with_capacity(horizon);
            let mut realized_sum = 0.0;
            let mut warm = rounds[0].1.to_vec();
            for t in 1..=horizon {
                realized_sum += realized[t - 1];
                let others: Vec<Vec<f64>> = rounds[..t].iter().map(|(ym, _)| ym.clone()).collect();
                let starts: [&[f64]; 3] = [&warm, rounds[t - 1].1, &lower];
                let (best, arg) = best_fixed_with_arg(g, j, &others, &starts, opts);
                warm = arg;
                cumulative.push(best - realized_sum);
            }

            let bound_satisfied = cumulative
                .iter()
                .zip(&bound)
                .all(|(r, b)| *r <= b + REGRET_SLACK);
            let time_average_nonincreasing = if horizon >= 2 {
                let half = horizon / 2;
                cumulative[horizon - 1] / horizon as f64
                    <= cumulative[half - 1] / half as f64 + REGRET_SLACK
            } else {
                true
            };
            PrincipalRegret {
                principal: j,
                cumulative,
                instantaneous,
                bound: bound.clone(),
                bound_satisfied,
                time_average_nonincreasing,
            }
        })
        .collect::<Vec<_>>();

    let min_regret = principals
        .iter()
        .flat_map(|p| p.cumulative.iter().copied())
        .fold(f64::INFINITY, f64::min);
    Ok(RegretReport {
        horizon,
        lipschitz: lf,
        deviation_proxies: a,
        proxy_note: PROXY_NOTE,
        bound_satisfied: principals.iter().all(|p| p.bound_satisfied),
        time_average_nonincreasing: principals.iter().all(|p| p.time_average_nonincreasing),
        principals,
        min_regret,
    })
}

fn best_fixed(g: &GameInstance, j: usize, others: &[Vec<f64>], starts: &[&[f64]], opts: &SolverOptions) -> f64 {
    best_fixed_with_arg(g, j, others, starts, opts).0
}

/// Maximizes `sum_t f_j(y; others[t])` over principal `j`'s box from each
/// start and keeps the best.
fn best_fixed_with_arg(
    g: &GameInstance,
    j: usize,
    others: &[Vec<f64>],
    starts: &[&[f64]],
    opts: &SolverOptions,
) -> (f64, Vec<f64>) {
    let upper = g.upper(j);
    let lower = vec![0.0; upper.len()];
    let objective = |y: &[f64]| {
        let mut total = 0.0;
        let mut grad = vec![0.0; y.len()];
        for ym in others {
            let (v, gr) = game::principal_value_grad(upper, y, ym, g.log_pi0(), g.tau());
            total += v;
            grad.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
        }
        (total, grad)
    };
    let mut best = (f64::NEG_INFINITY, lower.clone());
    for s in starts {
        let out = principal::maximize_on_box(objective, &lower, upper, s, opts);
        if out.value > best.0 {
            best = (out.value, out.x);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityFamily {
    /// `"log_pi0"` or `"q{j}"`.
    pub parameter: String,
    /// `||pi*' - pi*||_2 / delta` for each valid probe.
    pub ratios: Vec<f64>,
    /// max/min of `ratios`; 1 when every shift is below
    /// [`ZERO_SENSITIVITY`].
    pub spread: f64,
    pub invalid_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub tau: f64,
    pub tau_threshold: f64,
    pub above_threshold: bool,
    /// `max_j ||w^j q^j - y^{j*}||_2` used in the threshold.
    pub r_bound: f64,
    /// `min_i pi*_i` used in the threshold.
    pub pi_lower: f64,
    pub delta: f64,
    pub families: Vec<SensitivityFamily>,
    /// No probe changed any principal's active pattern.
    pub pattern_stable: bool,
    pub pattern_flips: usize,
    /// Every family has spread <= [`RATIO_SPREAD_LIMIT`]. Only meaningful when
    /// `pattern_stable`.
    pub ratios_bounded: bool,
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize, norm: f64, remove_mean: bool) -> Vec<f64> {
    loop {
        let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        if remove_mean {
            let m = d.iter().sum::<f64>() / n as f64;
            d.iter_mut().for_each(|v| *v -= m);
        }
        let len = l2(&d);
        if len > 1e-8 {
            d.iter_mut().for_each(|v| *v *= norm / len);
            return d;
        }
    }
}

fn perturbed_game(g: &GameInstance, log_shift: Option<&[f64]>, q_shift: Option<(usize, &[f64])>) -> Result<GameInstance> {
    let pi0 = match log_shift {
        Some(d) => {
            let z: Vec<f64> = g.log_pi0().iter().zip(d).map(|(a, b)| a + b).collect();
            PolicySimplex::from_normalized(game::tilt(&z, &vec![0.0; z.len()], 1.0))
        }
        None => g.pi0().clone(),
    };
    let rewards = g
        .rewards()
        .iter()
        .enumerate()
        .map(|(j, q)| match q_shift {
            // Clamped at zero so the perturbed box stays valid.
            Some((k, d)) if k == j => RewardVector::new(
                q.values().iter().zip(d).map(|(a, b)| (a + b).max(0.0)).collect(),
            ),
            _ => Ok(q.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    GameInstance::new(pi0, rewards, g.weights().clone(), g.tau())
}

fn patterns(g: &GameInstance, r: &EquilibriumResult) -> Result<Vec<ActivePattern>> {
    (0..g.num_principals())
        .map(|j| principal::active_pattern(r.incentives.principal(j), g, j))
        .collect()
}

/// Perturbs `log pi0` (mean-free, renormalized) and each `q^j` by random
/// vectors of norm `delta`, re-solves, and reports `||d pi*||_2 / delta` per
/// probe together with whether the active patterns survived.
pub fn stability_probe(
    g: &GameInstance,
    delta: f64,
    n_probes: usize,
    seed: u64,
    opts: &JacobiOptions,
) -> Result<StabilityReport> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(CageError::Domain(format!("delta must be >= 0, got {delta}")));
    }
    // Re-solves must be much sharper than the perturbation they measure.
    let mut solve_opts = *opts;
    solve_opts.record_trace = false;
    if delta > 0.0 {
        solve_opts.epsilon = solve_opts.epsilon.min(delta * 1e-4);
        solve_opts.solver.grad_tol = solve_opts.solver.grad_tol.min(delta * 1e-5).max(1e-13);
    }
    solve_opts.max_rounds = solve_opts.max_rounds.max(1000);

    let base = jacobi::solve_from_zero(g, &solve_opts)?;
    if !base.converged {
        return Err(CageError::Precondition(
            "the unperturbed game did not reach an equilibrium".into(),
        ));
    }
    let base_patterns = patterns(g, &base)?;
    let r_bound = (0..g.num_principals())
        .map(|j| {
            let d: Vec<f64> = g
                .upper(j)
                .iter()
                .zip(base.incentives.principal(j).values())
                .map(|(u, y)| u - y)
                .collect();
            l2(&d)
        })
        .fold(0.0, f64::max);
    let pi_lower = base.policy.probs().iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = tau_threshold(g.num_candidates(), g.num_principals(), r_bound, pi_lower)?;

    let n = g.num_candidates();
    // (family index, probe index); family 0 is log pi0, family j+1 is q^j.
    let jobs: Vec<(usize, usize)> = (0..=g.num_principals())
        .flat_map(|f| (0..n_probes).map(move |p| (f, p)))
        .collect();
    let outcomes: Vec<(usize, Option<(f64, bool)>)> = jobs
        .par_iter()
        .map(|&(family, probe)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((family as u64) << 32).wrapping_add(probe as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let perturbed = if family == 0 {
                let d = random_direction(&mut rng, n, delta, true);
                perturbed_game(g, Some(&d), None)
            } else {
                let d = random_direction(&mut rng, n, delta, false);
                perturbed_game(g, None, Some((family - 1, &d)))
            };
            let outcome = perturbed.and_then(|pg| {
                let r = jacobi::solve_from_zero(&pg, &solve_opts)?;
                if !r.converged {
                    return Ok(None);
                }
                let shift: Vec<f64> = r
                    .policy
                    .probs()
                    .iter()
                    .zip(base.policy.probs())
                    .map(|(a, b)| a - b)
                    .collect();
                let same = patterns(&pg, &r)? == base_patterns;
                Ok(Some((l2(&shift), same)))
            });
            (family, outcome.unwrap_or(None))
        })
        .collect();

    let mut families = Vec::new();
    let mut flips = 0;
    for family in 0..=g.num_principals() {
        let mut shifts = Vec::new();
        let mut invalid = 0;
        for (f, o) in outcomes.iter().filter(|(f, _)| *f == family).map(|(f, o)| (*f, o)) {
            debug_assert_eq!(f, family);
            match o {
                Some((shift, same)) => {
                    shifts.push(*shift);
                    if !same {
                        flips += 1;
                    }
                }
                None => invalid += 1,
            }
        }
        let ratios: Vec<f64> = if delta > 0.0 {
            shifts.iter().map(|s| s / delta).collect()
        } else {
            Vec::new()
        };
        let max_shift = shifts.iter().copied().fold(0.0, f64::max);
        let spread = if max_shift <= ZERO_SENSITIVITY || ratios.is_empty() {
            1.0
        } else {
            let hi = ratios.iter().copied().fold(0.0, f64::max);
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };
        families.push(SensitivityFamily {
            parameter: if family == 0 {
                "log_pi0".to_string()
            } else {
                format!("q{}", family - 1)
            },
            ratios,
            spread,
            invalid_probes: invalid,
        });
    }

    Ok(StabilityReport {
        tau: g.tau(),
        tau_threshold: threshold,
        above_threshold: g.tau() > threshold,
        r_bound,
        pi_lower,
        delta,
        ratios_bounded: families.iter().all(|f| f.spread <= RATIO_SPREAD_LIMIT),
        pattern_stable: flips == 0,
        pattern_flips: flips,
        families,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::PreferenceWeights;

    #[test]
    fn threshold_arithmetic() {
        let t = tau_threshold(2, 2, 1.0, 0.25).unwrap();
        assert!((t - 256.0 / 3.0).abs() < 1e-12);
        assert_eq!(tau_threshold(2, 1, 1.0, 0.5).unwrap(), 32.0);
        assert_eq!(tau_threshold(3, 1, 1.0, 0.5).unwrap(), f64::INFINITY);
        assert!(tau_threshold(3, 1, 1.0, 0.6).is_err());
        assert!(tau_threshold(3, 1, 1.0, 0.0).is_err());
        assert!(tau_threshold(1, 1, 1.0, 0.5).is_err());
    }

    #[test]
    fn lipschitz_cases() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.5, 0.5]).unwrap(),
            vec![RewardVector::new(vec![1.0, 0.0]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        assert!((lipschitz_constant(&g) - 11.0).abs() < 1e-12);
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.5, 0.5]).unwrap(),
            vec![RewardVector::zeros(2)],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        assert_eq!(lipschitz_constant(&g), 1.0);
    }

    #[test]
    fn regret_needs_trace() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.5, 0.5]).unwrap(),
            vec![RewardVector::new(vec![1.0, 0.0]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        let r = jacobi::solve_from_zero(&g, &JacobiOptions::default()).unwrap();
        assert!(matches!(
            regret_trace(&g, &r, &SolverOptions::default()),
            Err(CageError::Precondition(_))
        ));
    }

    #[test]
    fn zero_delta_moves_nothing() {
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.4, 0.6]).unwrap(),
            vec![RewardVector::new(vec![1.0, 0.3]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.2,
        )
        .unwrap();
        let rep = stability_probe(&g, 0.0, 4, 1, &JacobiOptions::default()).unwrap();
        assert!(rep.pattern_stable);
        assert!(rep.families.iter().all(|f| f.ratios.is_empty() && f.spread == 1.0));
        assert!(stability_probe(&g, -1.0, 4, 1, &JacobiOptions::default()).is_err());
    }

    #[test]
    fn corner_optimum_flips_pattern() {
        // y* sits exactly where the first coordinate leaves its lower bound.
        let g = GameInstance::new(
            PolicySimplex::new(vec![0.5, 0.5]).unwrap(),
            vec![RewardVector::new(vec![0.2, 0.0]).unwrap()],
            PreferenceWeights::new(vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        let rep = stability_probe(&g, 1e-3, 16, 9, &JacobiOptions::default()).unwrap();
        assert!(!rep.pattern_stable);
        assert!(rep.pattern_flips > 0);
    }
}
