//! Seeded random instances for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fnn::{ActivationKind, FnnParams};
use crate::linalg::{condition_number, Matrix, Vector};
use crate::transformer::TransformerParams;

/// Number of redraws before giving up on the conditioning limit.
const MAX_DRAWS: usize = 1000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-scale, scale]`.
pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
}

fn near_identity(rng: &mut impl Rng, d: usize) -> Matrix {
    Matrix::identity(d, d) + uniform_matrix(rng, d, d, 0.5)
}

/// Sparse-partition transformer with `B, C, U = I + U[-½, ½]` and both `CᵀB` and
/// `U` conditioned below `max_condition`. `F` is zero.
pub fn sparse_transformer(d_x: usize, d_y: usize, seed: u64, max_condition: f64) -> Result<TransformerParams> {
    if d_x == 0 || d_y == 0 {
        return Err(Error::dim("d_x and d_y must be positive"));
    }
    let mut rng = rng(seed);
    for _ in 0..MAX_DRAWS {
        let b = near_identity(&mut rng, d_x);
        let c = near_identity(&mut rng, d_x);
        let u = near_identity(&mut rng, d_y);
        if condition_number(&(b.transpose() * &c)) < max_condition && condition_number(&u) < max_condition {
            return TransformerParams::sparse(b, c, u);
        }
    }
    Err(Error::Numerical(format!(
        "no draw met condition limit {max_condition:e} after {MAX_DRAWS} tries"
    )))
}

/// `A ~ U[-1, 1]`, `W ~ U[-w_scale, w_scale]`, `b ~ U[-1, 1]`.
pub fn fnn(d_in: usize, d_y: usize, k: usize, activation: ActivationKind, w_scale: f64, seed: u64) -> Result<FnnParams> {
    let mut rng = rng(seed);
    let a = uniform_matrix(&mut rng, d_y, k, 1.0);
    let w = uniform_matrix(&mut rng, k, d_in, w_scale);
    let b = Vector::from_fn(k, |_, _| rng.gen_range(-1.0..=1.0));
    FnnParams::new(a, w, b, activation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_draws_are_reproducible_and_conditioned() {
        for seed in 0..10 {
            let a = sparse_transformer(4, 2, seed, 1e6).unwrap();
            assert_eq!(a, sparse_transformer(4, 2, seed, 1e6).unwrap());
            assert!(condition_number(&a.score_map()) < 1e6);
            assert!(a.f().iter().all(|&v| v == 0.0));
        }
        let f = fnn(3, 2, 5, ActivationKind::Relu, 2.0, 9).unwrap();
        assert_eq!(f, fnn(3, 2, 5, ActivationKind::Relu, 2.0, 9).unwrap());
        assert!(f.w().amax() <= 2.0);
    }

    #[test]
    fn impossible_limit_is_reported() {
        assert!(matches!(sparse_transformer(3, 1, 0, 1.0), Err(Error::Numerical(_))));
    }
}
