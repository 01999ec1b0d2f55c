//! Axis-aligned boxes used for state domains and input constraint sets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned box `[lower_1, upper_1] x ... x [lower_n, upper_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Config(format!(
                "box bounds have mismatched or zero length ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "box coordinate {i} has invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Euclidean length of the main diagonal.
    pub fn diameter(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.width(i).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// True when the origin lies strictly inside the box.
    pub fn contains_origin_in_interior(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(lo, hi)| *lo < 0.0 && *hi > 0.0)
    }

    /// Coordinate-wise projection onto the box.
    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Translate the box by `-offset`.
    pub fn shifted(&self, offset: &[f64]) -> Self {
        Self {
            lower: self.lower.iter().zip(offset).map(|(a, b)| a - b).collect(),
            upper: self.upper.iter().zip(offset).map(|(a, b)| a - b).collect(),
        }
    }

    /// All `2^dim` corners, enumerated in binary order of the axes.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    }),
                )
            })
            .collect()
    }

    /// Largest infinity norm attained on the box.
    pub fn max_abs(&self) -> f64 {
        self.lower
            .iter()
            .chain(&self.upper)
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Regular lattice with `per_axis` points per coordinate, first axis fastest.
    pub fn lattice(&self, per_axis: usize) -> Vec<DVector<f64>> {
        let n = self.dim();
        let count = per_axis.pow(n as u32);
        let coord = |axis: usize, k: usize| {
            if per_axis == 1 {
                0.5 * (self.lower[axis] + self.upper[axis])
            } else {
                let t = k as f64 / (per_axis - 1) as f64;
                // Exact endpoints, no accumulated rounding at the far edge.
                if k == per_axis - 1 {
                    self.upper[axis]
                } else {
                    self.lower[axis] + t * self.width(axis)
                }
            }
        };
        (0..count)
            .map(|mut idx| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|axis| {
                        let k = idx % per_axis;
                        idx /= per_axis;
                        coord(axis, k)
                    }),
                )
            })
            .collect()
    }
}
