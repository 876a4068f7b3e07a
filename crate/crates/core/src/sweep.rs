//! Preference sweeps: one decode per preference vector, scored by proxy
//! reward totals and summarized with the multi-objective metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{self, DecodeOptions, LogitRecord};
use crate::error::{CageError, Result};
use crate::game::PreferenceWeights;
use crate::metrics::{self, ParetoPoint, ReferencePoint};

/// `(a, 1 - a)` for `a = 0.1, 0.2, ..., 0.8`.
pub fn help2d() -> Vec<Vec<f64>> {
    (1..=8)
        .map(|k| {
            let a = k as f64 / 10.0;
            vec![a, 1.0 - a]
        })
        .collect()
}

/// Corners, five points on each edge, and thirteen interior points of the
/// three-objective simplex.
pub fn simplex31() -> Vec<Vec<f64>> {
    const ROWS: [[f64; 3]; 31] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.9, 0.1, 0.0],
        [0.7, 0.3, 0.0],
        [0.5, 0.5, 0.0],
        [0.3, 0.7, 0.0],
        [0.1, 0.9, 0.0],
        [0.9, 0.0, 0.1],
        [0.7, 0.0, 0.3],
        [0.5, 0.0, 0.5],
        [0.3, 0.0, 0.7],
        [0.1, 0.0, 0.9],
        [0.0, 0.9, 0.1],
        [0.0, 0.7, 0.3],
        [0.0, 0.5, 0.5],
        [0.0, 0.3, 0.7],
        [0.0, 0.1, 0.9],
        [0.8, 0.1, 0.1],
        [0.5, 0.3, 0.2],
        [0.4, 0.2, 0.4],
        [0.33, 0.33, 0.34],
        [0.3, 0.3, 0.4],
        [0.3, 0.2, 0.5],
        [0.25, 0.25, 0.5],
        [0.2, 0.5, 0.3],
        [0.2, 0.4, 0.4],
        [0.2, 0.3, 0.5],
        [0.2, 0.2, 0.6],
        [0.1, 0.8, 0.1],
        [0.1, 0.1, 0.8],
    ];
    ROWS.iter().map(|r| r.to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceGrid {
    Help2d,
    Simplex31,
    Custom(Vec<Vec<f64>>),
}

impl PreferenceGrid {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            Self::Help2d => help2d(),
            Self::Simplex31 => simplex31(),
            Self::Custom(r) => r.clone(),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        match self {
            Self::Help2d => Some(2),
            Self::Simplex31 => Some(3),
            Self::Custom(r) => r.first().map(Vec::len),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Help2d => "help2d",
            Self::Simplex31 => "simplex31",
            Self::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preference: Vec<f64>,
    pub proxy_totals: Vec<f64>,
    pub converged_fraction: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Non-dominated proxy-total vectors.
    pub pareto_front: Vec<Vec<f64>>,
    /// Present only when a reference point was supplied.
    pub hypervolume: Option<f64>,
    pub mean_inner_product: f64,
}

/// HV, MIP and Pareto front of `(preference, reward)` pairs.
pub fn summarize(points: &[ParetoPoint], reference: Option<&ReferencePoint>) -> Result<(Vec<Vec<f64>>, Option<f64>, f64)> {
    let rewards: Vec<Vec<f64>> = points.iter().map(|p| p.reward.clone()).collect();
    let front = metrics::pareto_filter(&rewards);
    let hv = reference.map(|z| metrics::hypervolume(&rewards, z)).transpose()?;
    let mip = metrics::mean_inner_product(points)?;
    Ok((front, hv, mip))
}

/// Decodes `records` once per grid row, in parallel on the current rayon
/// pool; row order is preserved.
pub fn run_sweep(
    records: &[LogitRecord],
    grid: &[Vec<f64>],
    opts: &DecodeOptions,
    reference: Option<&ReferencePoint>,
) -> Result<SweepSummary> {
    if grid.is_empty() {
        return Err(CageError::Precondition("empty preference grid".into()));
    }
    if let Some(first) = records.first() {
        if let Some(row) = grid.iter().find(|r| r.len() != first.num_objectives()) {
            return Err(CageError::Precondition(format!(
                "grid row has {} entries, stream has {} objectives",
                row.len(),
                first.num_objectives()
            )));
        }
    }
    let rows = grid
        .par_iter()
        .map(|w| {
            let weights = PreferenceWeights::new(w.clone())?;
            let out = decode::decode_stream(records, &weights, opts)?;
            Ok(SweepRow {
                preference: w.clone(),
                converged_fraction: out.converged_fraction(),
                tokens: out.len(),
                proxy_totals: out.proxy_totals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points = rows
        .iter()
        .map(|r| ParetoPoint::new(r.preference.clone(), r.proxy_totals.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (pareto_front, hypervolume, mean_inner_product) = summarize(&points, reference)?;
    Ok(SweepSummary { rows, pareto_front, hypervolume, mean_inner_product })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let h = help2d();
        assert_eq!(h.len(), 8);
        assert_eq!(h[0], vec![0.1, 0.9]);
        assert!(h.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let s = simplex31();
        assert_eq!(s.len(), 31);
        assert!(s.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        for (i, a) in s.iter().enumerate() {
            assert!(s[..i].iter().all(|b| b != a));
        }
        let interior = s.iter().filter(|r| r.iter().all(|v| *v > 0.0)).count();
        assert_eq!(interior, 13);
    }

    #[test]
    fn mismatched_grid_rejected() {
        let s = decode::synth_stream(2, 4, 2, 0.0, 1).unwrap();
        let err = run_sweep(&s, &simplex31(), &DecodeOptions::default(), None).unwrap_err();
        assert!(matches!(err, CageError::Precondition(_)));
    }
}
