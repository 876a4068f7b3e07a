#![allow(dead_code)]

use cage_core::game::{GameInstance, PolicySimplex, PreferenceWeights, RewardVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point on the simplex with every entry at least `floor / n`.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    let mixed: Vec<f64> = raw.iter().map(|v| (1.0 - floor) * v / s + floor / n as f64).collect();
    let t: f64 = mixed.iter().sum();
    mixed.iter().map(|v| v / t).collect()
}

pub struct InstanceFamily {
    pub n: (usize, usize),
    pub j: (usize, usize),
    pub tau: (f64, f64),
    pub reward_scale: f64,
}

impl InstanceFamily {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> GameInstance {
        let n = rng.random_range(self.n.0..=self.n.1);
        let j = rng.random_range(self.j.0..=self.j.1);
        let tau = rng.random_range(self.tau.0..=self.tau.1);
        let pi0 = random_simplex(rng, n, 0.2);
        let w = random_simplex(rng, j, 0.2);
        let rewards = (0..j)
            .map(|_| {
                RewardVector::new((0..n).map(|_| self.reward_scale * rng.random::<f64>()).collect())
                    .unwrap()
            })
            .collect();
        GameInstance::new(
            PolicySimplex::normalized(pi0, 1e-9).unwrap(),
            rewards,
            PreferenceWeights::new(w).unwrap(),
            tau,
        )
        .unwrap()
    }
}

pub fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += FD_STEP;
            b[k] -= FD_STEP;
            (f(&a) - f(&b)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central-difference Jacobian; entry `[i][k]` is `d out_i / d x_k`.
pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..x.len())
        .map(|k| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += FD_STEP;
            b[k] -= FD_STEP;
            f(&a).iter().zip(f(&b)).map(|(p, m)| (p - m) / (2.0 * FD_STEP)).collect()
        })
        .collect();
    (0..cols[0].len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// `||a - b||_inf / max(1, ||b||_inf)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    inf_dist(a, b) / scale
}

/// Maximizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Monte-Carlo hypervolume of `points` above `z` inside the bounding box;
/// returns (estimate, standard error).
pub fn hv_monte_carlo(points: &[Vec<f64>], z: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let d = z.len();
    let upper: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).fold(z[k], f64::max))
        .collect();
    let volume: f64 = (0..d).map(|k| upper[k] - z[k]).product();
    if volume == 0.0 {
        return (0.0, 0.0);
    }
    let mut s = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..samples {
        for k in 0..d {
            s[k] = z[k] + (upper[k] - z[k]) * rng.random::<f64>();
        }
        if points.iter().any(|p| p.iter().zip(&s).all(|(a, b)| a >= b)) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    (volume * p, volume * (p * (1.0 - p) / samples as f64).sqrt())
}
