//! Finitely supported probability measures.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MASS_TOLERANCE: f64 = 1e-9;

/// Support points with probability masses; points are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    masses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr {
    support: Vec<Vec<f64>>,
    masses: Vec<f64>,
}

impl TryFrom<MeasureRepr> for DiscreteMeasure {
    type Error = Error;

    fn try_from(r: MeasureRepr) -> Result<Self> {
        DiscreteMeasure::new(r.support, r.masses)
    }
}

impl From<DiscreteMeasure> for MeasureRepr {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureRepr {
            support: m.iter_points().map(|p| p.to_vec()).collect(),
            masses: m.masses,
        }
    }
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("measure support"));
        }
        if support.len() != masses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} support points but {} masses",
                support.len(),
                masses.len()
            )));
        }
        let dim = support[0].len();
        if dim == 0 || support.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidArgument(
                "support points must share a positive dimension".into(),
            ));
        }
        if support.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "support points must be finite".into(),
            ));
        }
        if masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "masses must be finite and non-negative".into(),
            ));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            dim,
            points: support.into_iter().flatten().collect(),
            masses,
        })
    }

    /// Uniform masses `1/K` on the given points.
    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let k = support.len();
        Self::new(support, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (p, &w) in self.iter_points().zip(&self.masses) {
            for (m, c) in mean.iter_mut().zip(p) {
                *m += w * c;
            }
        }
        mean
    }

    /// Mass-weighted covariance (row-major `dim × dim`).
    pub fn covariance(&self) -> Vec<f64> {
        let mean = self.mean();
        let d = self.dim;
        let mut cov = vec![0.0; d * d];
        for (p, &w) in self.iter_points().zip(&self.masses) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += w * (p[i] - mean[i]) * (p[j] - mean[j]);
                }
            }
        }
        cov
    }

    /// Merges atoms at identical locations, summing their masses. Order of first
    /// occurrence is kept.
    pub fn merge_duplicates(&self) -> Self {
        let mut support: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        let mut masses: Vec<f64> = Vec::with_capacity(self.len());
        let mut index = std::collections::HashMap::new();
        for (p, &w) in self.iter_points().zip(&self.masses) {
            let key: Vec<u64> = p.iter().map(|c| (c + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&k) => masses[k] += w,
                None => {
                    index.insert(key, support.len());
                    support.push(p.to_vec());
                    masses.push(w);
                }
            }
        }
        Self {
            dim: self.dim,
            points: support.into_iter().flatten().collect(),
            masses,
        }
    }

    /// Drops atoms whose mass is below `threshold` and renormalises.
    pub fn prune(&self, threshold: f64) -> Result<Self> {
        let kept: Vec<usize> = (0..self.len())
            .filter(|&i| self.masses[i] > threshold)
            .collect();
        if kept.is_empty() {
            return Err(Error::Empty("pruned measure"));
        }
        let total: f64 = kept.iter().map(|&i| self.masses[i]).sum();
        Ok(Self {
            dim: self.dim,
            points: kept.iter().flat_map(|&i| self.point(i).to_vec()).collect(),
            masses: kept.iter().map(|&i| self.masses[i] / total).collect(),
        })
    }

    /// Image of the measure under a coordinate selection (masses unchanged).
    pub fn project(&self, coords: &[usize]) -> Self {
        Self {
            dim: coords.len(),
            points: self
                .iter_points()
                .flat_map(|p| coords.iter().map(move |&c| p[c]))
                .collect(),
            masses: self.masses.clone(),
        }
    }

    /// Image of the measure under an arbitrary map (masses unchanged).
    pub fn map_points(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        Self::new(self.iter_points().map(f).collect(), self.masses.clone())
    }

    /// Total variation distance to another measure on the same support ordering.
    pub fn total_variation_same_support(&self, other: &Self) -> Option<f64> {
        if self.len() != other.len() || self.points != other.points {
            return None;
        }
        Some(
            0.5 * self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>(),
        )
    }
}
