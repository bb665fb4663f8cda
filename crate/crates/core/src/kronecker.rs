//! Integer pairs `(q, l)` with `|β − q√2 + l| < ε`, used to write real
//! coefficients as sums of `√2` and `±1` tokens.

use std::cmp::Ordering;
use std::f64::consts::SQRT_2;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Low word of √2 in double-double form: `√2 = SQRT_2 + SQRT2_LO`.
const SQRT2_LO: f64 = -9.667_293_313_452_913e-17;

/// Denominators of the continued-fraction convergents of √2.
pub fn pell_denominators(cap: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let (mut a, mut b) = (1u64, 2u64);
    while a <= cap {
        out.push(a);
        let Some(next) = b.checked_mul(2).and_then(|v| v.checked_add(a)) else {
            break;
        };
        (a, b) = (b, next);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

impl Dd {
    fn add_f64(self, b: f64) -> Dd {
        let s = two_sum(self.hi, b);
        let t = s.lo + self.lo;
        let r = two_sum(s.hi, t);
        Dd { hi: r.hi, lo: r.lo }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// `q√2` in double-double; exact inputs up to `q < 2^53`.
fn q_sqrt2(q: u64) -> Dd {
    let qf = q as f64;
    let p = qf * SQRT_2;
    let err = qf.mul_add(SQRT_2, -p);
    let r = two_sum(p, err + qf * SQRT2_LO);
    Dd { hi: r.hi, lo: r.lo }
}

/// `(round(q√2 − β), q√2 − β − l)` evaluated in double-double.
fn residual(beta: f64, q: u64) -> (i64, f64) {
    let v = q_sqrt2(q).add_f64(-beta);
    let mut l = v.hi.round();
    let mut r = v.add_f64(-l).to_f64();
    if r > 0.5 {
        l += 1.0;
        r -= 1.0;
    } else if r < -0.5 {
        l -= 1.0;
        r += 1.0;
    }
    (l as i64, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KroneckerWitness {
    pub q: u64,
    pub l: i64,
    /// `|β − q√2 + l|` in double-double.
    pub achieved_error: f64,
}

/// Smallest `q ≤ q_cap` with `|β − q√2 + l| < ε`, `l = round(q√2 − β)`.
///
/// Pell denominators are probed first; a hit there bounds the linear scan,
/// which then certifies minimality.
pub fn kronecker_search(beta: f64, epsilon: f64, q_cap: u64) -> Result<KroneckerWitness> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon", "must be positive and finite"));
    }
    if !beta.is_finite() || beta.abs() > 1e15 {
        return Err(Error::invalid("beta", "must be finite with |beta| <= 1e15"));
    }
    let cap = q_cap.min(1 << 52);
    let accept = |q: u64| {
        let (l, r) = residual(beta, q);
        (r.abs() < epsilon && verify_exact(beta, epsilon, q, l)).then_some(KroneckerWitness {
            q,
            l,
            achieved_error: r.abs(),
        })
    };
    let pell_hit = pell_denominators(cap).into_iter().find_map(accept);
    let scan_end = pell_hit.map_or(cap, |w| w.q - 1);
    for q in 1..=scan_end {
        if let Some(w) = accept(q) {
            return Ok(w);
        }
    }
    pell_hit.ok_or(Error::KroneckerCap {
        beta,
        epsilon,
        q_cap,
    })
}

fn dyadic(x: f64) -> (BigInt, i32) {
    if x == 0.0 {
        return (BigInt::from(0), 0);
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    (BigInt::from(m) * sign, e)
}

/// Exact sum of doubles and integers as `(numerator, exponent)`.
fn exact_sum(terms: &[(BigInt, i32)]) -> (BigInt, i32) {
    let e = terms.iter().map(|t| t.1).min().unwrap_or(0);
    let n = terms
        .iter()
        .map(|(m, te)| m.clone() << ((te - e) as usize))
        .sum();
    (n, e)
}

/// Compares `v = m·2^e` with `q√2` exactly.
fn cmp_with_q_sqrt2(v: &(BigInt, i32), q: u64) -> Ordering {
    let (m, e) = v;
    if m.sign() != num_bigint::Sign::Plus {
        return Ordering::Less;
    }
    // Compare m²·2^{2e} with 2q².
    let lhs = m * m;
    let rhs = BigInt::from(q) * BigInt::from(q) * 2;
    if *e >= 0 {
        (lhs << ((2 * e) as usize)).cmp(&rhs)
    } else {
        lhs.cmp(&(rhs << ((-2 * e) as usize)))
    }
}

/// Exact rational check of `|β − q√2 + l| < ε`, independent of the floating
/// evaluation path.
pub fn verify_exact(beta: f64, epsilon: f64, q: u64, l: i64) -> bool {
    let b = dyadic(beta);
    let eps = dyadic(epsilon);
    let li = (BigInt::from(l), 0);
    let neg_eps = (-eps.0.clone(), eps.1);
    let lower = exact_sum(&[b.clone(), li.clone(), neg_eps]);
    let upper = exact_sum(&[b, li, eps]);
    cmp_with_q_sqrt2(&lower, q) == Ordering::Less && cmp_with_q_sqrt2(&upper, q) == Ordering::Greater
}

/// Role of a context token in the coefficient encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Sqrt2,
    PlusUnit,
    MinusUnit,
    Nulled,
}

impl TokenRole {
    pub fn value(self) -> f64 {
        match self {
            TokenRole::Sqrt2 => SQRT_2,
            TokenRole::PlusUnit => 1.0,
            TokenRole::MinusUnit => -1.0,
            TokenRole::Nulled => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenRole::Sqrt2 => "sqrt2",
            TokenRole::PlusUnit => "plus_unit",
            TokenRole::MinusUnit => "minus_unit",
            TokenRole::Nulled => "nulled",
        }
    }
}

/// Unit-token sign to token role. The √2 group is always `+√2`: a negative
/// coefficient is reached by `q√2 − l` with `l > q√2`, so no `−√2` token is needed.
pub const SIGN_MAPPING: [(i8, TokenRole); 2] = [(1, TokenRole::PlusUnit), (-1, TokenRole::MinusUnit)];

/// `a ≈ q·√2 + unit_sign·l` with token counts `q ≥ 1`, `l ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDecomposition {
    pub q: u64,
    pub l: u64,
    pub unit_sign: i8,
    pub achieved_error: f64,
}

impl CoefficientDecomposition {
    pub fn unit_role(&self) -> TokenRole {
        SIGN_MAPPING
            .iter()
            .find(|(s, _)| *s == self.unit_sign)
            .map(|(_, r)| *r)
            .expect("unit_sign is ±1")
    }

    /// `q√2 + sign·l` as a double.
    pub fn value(&self) -> f64 {
        q_sqrt2(self.q)
            .add_f64(self.unit_sign as f64 * self.l as f64)
            .to_f64()
    }

    pub fn token_count(&self) -> u64 {
        self.q + self.l
    }
}

pub fn coefficient_decompose(a: f64, epsilon: f64, q_cap: u64) -> Result<CoefficientDecomposition> {
    let w = kronecker_search(a, epsilon, q_cap)?;
    // a ≈ q√2 − l_w, so the unit group carries −l_w.
    let (l, unit_sign) = if w.l <= 0 {
        (w.l.unsigned_abs(), 1)
    } else {
        (w.l as u64, -1)
    };
    Ok(CoefficientDecomposition {
        q: w.q,
        l,
        unit_sign,
        achieved_error: w.achieved_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference scan in plain doubles, adequate for small q.
    fn brute(beta: f64, eps: f64, cap: u64) -> Option<(u64, i64)> {
        (1..=cap).find_map(|q| {
            let v = q as f64 * SQRT_2 - beta;
            let l = v.round();
            ((beta - q as f64 * SQRT_2 + l).abs() < eps).then_some((q, l as i64))
        })
    }

    #[test]
    fn pell_sequence() {
        assert_eq!(pell_denominators(200), vec![1, 2, 5, 12, 29, 70, 169]);
    }

    #[test]
    fn sqrt2_low_word() {
        let v = q_sqrt2(1);
        assert_eq!(v.hi, SQRT_2);
        assert_eq!(v.lo, SQRT2_LO);
    }

    #[test]
    fn exact_representation_of_sqrt2() {
        let w = kronecker_search(SQRT_2, 1e-12, 100).unwrap();
        assert_eq!((w.q, w.l), (1, 0));
    }

    #[test]
    fn zero_target_hits_pell_convergent() {
        // 99/70 is a convergent of √2 and |70√2 − 99| ≈ 0.00505; q = 29 misses (0.0122).
        let w = kronecker_search(0.0, 0.01, 1000).unwrap();
        assert_eq!((w.q, w.l), (70, 99));
        assert!((w.achieved_error - 0.005_050_633_883_346_584).abs() < 1e-15);
        assert_eq!(brute(0.0, 0.01, 100), Some((70, 99)));
    }

    #[test]
    fn frozen_regression_pairs() {
        // Found by a 50-digit scan, independent of this implementation.
        let cases = [
            (1.5, 0.01, 35, 48),
            (0.5, 1e-3, 204, 288),
            (7.25, 1e-4, 3465, 4893),
            (-2.2, 0.01, 14, 22),
        ];
        for (beta, eps, q, l) in cases {
            let w = kronecker_search(beta, eps, 100_000).unwrap();
            assert_eq!((w.q, w.l), (q, l), "beta {beta}");
        }
        assert_eq!(brute(1.5, 0.01, 200), Some((35, 48)));
    }

    #[test]
    fn cap_exhaustion_reported() {
        match kronecker_search(0.0, 1e-3, 100) {
            Err(Error::KroneckerCap { q_cap, .. }) => assert_eq!(q_cap, 100),
            other => panic!("expected cap error, got {other:?}"),
        }
        assert!(kronecker_search(0.0, 0.0, 10).is_err());
        assert!(kronecker_search(f64::NAN, 0.1, 10).is_err());
    }

    #[test]
    fn exact_check_agrees_on_boundary_cases() {
        assert!(verify_exact(0.0, 0.01, 70, 99));
        assert!(!verify_exact(0.0, 0.005, 70, 99));
        assert!(!verify_exact(0.0, 0.01, 29, 41));
        // |0 − 70√2 + 99| ≈ 0.0050506338833466; straddle it closely.
        assert!(verify_exact(0.0, 0.005_050_633_883_347, 70, 99));
        assert!(!verify_exact(0.0, 0.005_050_633_883_346, 70, 99));
    }

    #[test]
    fn large_q_keeps_precision() {
        // First q with |q√2 − l| < 1e-6, from a 50-digit scan.
        let w = kronecker_search(0.0, 1e-6, 10_000_000).unwrap();
        assert_eq!((w.q, w.l), (470_832, 665_857));
        assert!((w.achieved_error - 7.509_119_826_032_946e-7).abs() < 1e-15);
        assert!(verify_exact(0.0, 1e-6, w.q, w.l));
    }

    #[test]
    fn decomposition_examples() {
        let d = coefficient_decompose(SQRT_2, 1e-12, 10).unwrap();
        assert_eq!((d.q, d.l, d.unit_sign), (1, 0, 1));
        let d = coefficient_decompose(3.0, 0.05, 500).unwrap();
        assert_eq!((d.q, d.l, d.unit_sign), (12, 14, -1));
        assert!((3.0 - d.value()).abs() < 0.05);
        let d = coefficient_decompose(-2.2, 0.05, 500).unwrap();
        assert_eq!((d.q, d.l, d.unit_sign), (2, 5, -1));
        assert!((-2.2 - d.value()).abs() < 0.05);
    }

    #[test]
    fn mapping_table_is_total_and_signed() {
        assert_eq!(SIGN_MAPPING.len(), 2);
        for (sign, role) in SIGN_MAPPING {
            assert_eq!(role.value(), sign as f64);
        }
        assert_eq!(TokenRole::Sqrt2.value(), SQRT_2);
        assert_eq!(TokenRole::Nulled.value(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn witness_valid_and_minimal(beta in -10.0f64..10.0, eps_exp in 1.0f64..3.5) {
            let eps = 10f64.powf(-eps_exp);
            let w = kronecker_search(beta, eps, 1_000_000).unwrap();
            prop_assert!(verify_exact(beta, eps, w.q, w.l));
            prop_assert!(w.achieved_error < eps);
            for q in 1..w.q.min(5000) {
                let (l, r) = residual(beta, q);
                prop_assert!(r.abs() >= eps || !verify_exact(beta, eps, q, l));
            }
        }

        #[test]
        fn decomposition_counts_reconstruct(a in -20.0f64..20.0) {
            let d = coefficient_decompose(a, 1e-3, 1_000_000).unwrap();
            prop_assert!(d.q >= 1);
            prop_assert!((a - d.value()).abs() < 1e-3);
            prop_assert!(d.unit_sign == 1 || d.unit_sign == -1);
        }
    }
}
