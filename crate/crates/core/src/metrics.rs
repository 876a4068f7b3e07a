//! Multi-objective evaluation: hypervolume, mean inner product and Pareto
//! filtering. Larger rewards are better in every coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{CageError, Result};

/// A preference vector together with the reward vector it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub preference: Vec<f64>,
    pub reward: Vec<f64>,
}

impl ParetoPoint {
    pub fn new(preference: Vec<f64>, reward: Vec<f64>) -> Result<Self> {
        if preference.len() != reward.len() || preference.is_empty() {
            return Err(CageError::Domain(format!(
                "preference has {} entries, reward has {}",
                preference.len(),
                reward.len()
            )));
        }
        if preference.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CageError::Domain("preference entries must be >= 0".into()));
        }
        let s: f64 = preference.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(CageError::Domain(format!("preference sums to {s}, not 1")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(CageError::Domain("reward entries must be finite".into()));
        }
        Ok(Self { preference, reward })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub z: Vec<f64>,
}

impl ReferencePoint {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CageError::Domain("reference point must be finite".into()));
        }
        Ok(Self { z })
    }

    pub fn origin(d: usize) -> Self {
        Self { z: vec![0.0; d] }
    }
}

/// `a` weakly dominates `b` in every coordinate and strictly in one.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Non-dominated subset, in order of first appearance, duplicates once.
pub fn pareto_filter(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if points.iter().any(|o| dominates(o, p)) {
            continue;
        }
        if points[..i].iter().any(|o| o == p) {
            continue;
        }
        out.push(p.clone());
    }
    out
}

/// Lebesgue measure of the region dominated by `points` and dominating `z`.
/// Exact for two and three objectives.
pub fn hypervolume(points: &[Vec<f64>], z: &ReferencePoint) -> Result<f64> {
    let d = z.z.len();
    if d != 2 && d != 3 {
        return Err(CageError::UnsupportedDimension(d));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(CageError::Domain(format!(
            "point has {} coordinates, reference has {d}",
            p.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CageError::Domain("points must be finite".into()));
    }
    // Shift so the reference sits at the origin and drop what cannot contribute.
    let shifted: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(&z.z).all(|(a, b)| a > b))
        .map(|p| p.iter().zip(&z.z).map(|(a, b)| a - b).collect())
        .collect();
    Ok(if d == 2 {
        let pts: Vec<(f64, f64)> = shifted.iter().map(|p| (p[0], p[1])).collect();
        hv2(pts)
    } else {
        hv3(&shifted)
    })
}

/// Two-objective hypervolume above the origin.
fn hv2(mut pts: Vec<(f64, f64)>) -> f64 {
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut ymax = 0.0;
    for (x, y) in pts {
        if y > ymax {
            area += x * (y - ymax);
            ymax = y;
        }
    }
    area
}

fn hv3(pts: &[Vec<f64>]) -> f64 {
    let mut levels: Vec<f64> = pts.iter().map(|p| p[2]).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let mut vol = 0.0;
    for (k, &top) in levels.iter().enumerate() {
        let bottom = levels.get(k + 1).copied().unwrap_or(0.0);
        let slab: Vec<(f64, f64)> = pts
            .iter()
            .filter(|p| p[2] >= top)
            .map(|p| (p[0], p[1]))
            .collect();
        vol += hv2(slab) * (top - bottom);
    }
    vol
}

/// `(1/n) sum_i w_i . r_i`.
pub fn mean_inner_product(points: &[ParetoPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(CageError::Domain("mean inner product of an empty set".into()));
    }
    let total: f64 = points
        .iter()
        .map(|p| p.preference.iter().zip(&p.reward).map(|(w, r)| w * r).sum::<f64>())
        .sum();
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hv(points: &[&[f64]], z: &[f64]) -> f64 {
        let pts: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        hypervolume(&pts, &ReferencePoint::new(z.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn hv_cases() {
        assert_eq!(hv(&[&[1.0, 1.0]], &[0.0, 0.0]), 1.0);
        assert_eq!(hv(&[&[2.0, 1.0], &[1.0, 2.0]], &[0.0, 0.0]), 3.0);
        assert_eq!(hv(&[&[1.0, 1.0, 1.0]], &[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(hv(&[], &[0.0, 0.0]), 0.0);
        // reference not dominated by anything
        assert_eq!(hv(&[&[1.0, 1.0]], &[2.0, 0.0]), 0.0);
        // two boxes overlapping in a unit cube: 2 + 2 - 1
        assert_eq!(hv(&[&[2.0, 1.0, 1.0], &[1.0, 1.0, 2.0]], &[0.0, 0.0, 0.0]), 3.0);
        assert_eq!(hv(&[&[3.0, 3.0]], &[1.0, 2.0]), 2.0);
    }

    #[test]
    fn hv_dimension_errors() {
        let z = ReferencePoint::origin(4);
        assert!(matches!(
            hypervolume(&[vec![1.0; 4]], &z),
            Err(CageError::UnsupportedDimension(4))
        ));
        let z = ReferencePoint::origin(2);
        assert!(hypervolume(&[vec![1.0; 3]], &z).is_err());
    }

    #[test]
    fn filter_cases() {
        let f = pareto_filter(&[vec![1.0, 2.0], vec![2.0, 1.0], vec![0.5, 0.5]]);
        assert_eq!(f, vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(pareto_filter(&[vec![1.0, 1.0]]), vec![vec![1.0, 1.0]]);
        let chain = pareto_filter(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        assert_eq!(chain, vec![vec![3.0, 3.0]]);
        let dup = pareto_filter(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(dup, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn mip_cases() {
        let p = ParetoPoint::new(vec![0.5, 0.5], vec![0.8, 0.4]).unwrap();
        assert!((mean_inner_product(&[p]).unwrap() - 0.6).abs() < 1e-15);
        let zero = ParetoPoint::new(vec![0.3, 0.7], vec![0.0, 0.0]).unwrap();
        assert_eq!(mean_inner_product(&[zero]).unwrap(), 0.0);
        let pts = [
            ParetoPoint::new(vec![1.0, 0.0], vec![2.0, 5.0]).unwrap(),
            ParetoPoint::new(vec![0.0, 1.0], vec![3.0, 4.0]).unwrap(),
        ];
        assert_eq!(mean_inner_product(&pts).unwrap(), 3.0);
        assert!(mean_inner_product(&[]).is_err());
        assert!(ParetoPoint::new(vec![0.5, 0.6], vec![1.0, 1.0]).is_err());
    }
}
