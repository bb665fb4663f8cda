//! Dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Matrices whose 2-norm condition number exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

pub fn condition_number(m: &Matrix) -> f64 {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return f64::INFINITY;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fails unless `m` is square with condition number below [`CONDITION_LIMIT`].
pub fn check_conditioning(name: &str, m: &Matrix) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let cond = condition_number(m);
    if !(cond < CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            name: name.to_string(),
            cond,
        });
    }
    Ok(cond)
}

/// Solves `m * x = rhs` with partial-pivoting LU.
pub fn solve(name: &str, m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    check_conditioning(name, m)?;
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical(format!("LU solve with `{name}` failed")))
}

pub fn from_rows(field: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(field, "ragged rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(field, "non-finite entry"));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Largest absolute row sum, the operator norm induced by the uniform norm.
pub fn matrix_inf_norm(m: &Matrix) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Serde adapter writing a matrix as a list of rows.
pub mod row_major {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows("matrix", &rows).map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(v))
    }
}
