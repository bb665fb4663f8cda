//! Finite point sets on which every sup-norm quantity is measured.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tensor grid over an axis-aligned box, or an explicit point list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<Vec<f64>>,
    shape: Option<BoxShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxShape {
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    /// `counts[c]` equally spaced values per axis, endpoints included.
    pub fn uniform(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(Error::dim("grid bounds and counts differ in length"));
        }
        if lo.is_empty() {
            return Err(Error::invalid("grid", "zero-dimensional grid"));
        }
        for c in 0..lo.len() {
            if !(lo[c].is_finite() && hi[c].is_finite() && lo[c] <= hi[c]) {
                return Err(Error::invalid("grid", format!("bad bounds on axis {c}")));
            }
            if counts[c] == 0 {
                return Err(Error::invalid("grid", "empty axis"));
            }
        }
        let axes: Vec<Vec<f64>> = (0..lo.len())
            .map(|c| linspace(lo[c], hi[c], counts[c]))
            .collect();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; lo.len()];
        for _ in 0..total {
            points.push(idx.iter().enumerate().map(|(c, &i)| axes[c][i]).collect());
            for c in (0..idx.len()).rev() {
                idx[c] += 1;
                if idx[c] < counts[c] {
                    break;
                }
                idx[c] = 0;
            }
        }
        Ok(Grid {
            points,
            shape: Some(BoxShape {
                lo: lo.to_vec(),
                hi: hi.to_vec(),
                counts: counts.to_vec(),
            }),
        })
    }

    /// Same number of points on every axis of the cube `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, dim: usize, per_axis: usize) -> Result<Self> {
        Grid::uniform(&vec![lo; dim], &vec![hi; dim], &vec![per_axis; dim])
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("grid", "empty point list"));
        };
        let d = first.len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::dim("grid points must share a positive dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid", "non-finite coordinate"));
        }
        Ok(Grid {
            points,
            shape: None,
        })
    }

    /// Each axis spacing divided by `factor`; explicit point lists are returned unchanged.
    pub fn refined(&self, factor: usize) -> Grid {
        match &self.shape {
            Some(s) if factor > 1 => {
                let counts: Vec<usize> = s
                    .counts
                    .iter()
                    .map(|&c| if c > 1 { (c - 1) * factor + 1 } else { 1 })
                    .collect();
                Grid::uniform(&s.lo, &s.hi, &counts).expect("refining a valid grid")
            }
            _ => self.clone(),
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Componentwise bounding box of the points.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in &self.points {
            for c in 0..d {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        (lo, hi)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_includes_corners() {
        let g = Grid::uniform(&[0.0, -1.0], &[1.0, 1.0], &[3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.points()[0], vec![0.0, -1.0]);
        assert_eq!(g.points()[5], vec![1.0, 1.0]);
    }

    #[test]
    fn refinement_multiplies_intervals() {
        let g = Grid::cube(0.0, 1.0, 1, 201).unwrap();
        assert_eq!(g.refined(10).len(), 2001);
    }

    #[test]
    fn point_lists_need_matching_dims() {
        assert!(Grid::from_points(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(Grid::from_points(vec![]).is_err());
    }
}
