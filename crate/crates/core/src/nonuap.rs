//! Zero counting for exponential sums and an evidence harness for the
//! finite-parameter softmax family.
//!
//! A net `Σ aᵢ e^{wᵢx+bᵢ} / Σ e^{wⱼx+bⱼ}` with `(aᵢ, wᵢ, bᵢ)` drawn from finite sets
//! has a numerator with at most `N = #(W × B)` distinct terms, hence at most `N − 1`
//! zeros. `cos((N+1)πx)` alternates `±1` at `N + 2` points, so every such net misses
//! it by at least 1 at one of them. The audit checks the term cap per sampled net and
//! records the empirical errors next to that floor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TransformerParams;
use crate::vocab_pe::Vocabulary;

/// Exponents closer than this are treated as equal.
pub const EXPONENT_TOLERANCE: f64 = 1e-9;

/// `h(x) = Σ aᵢ e^{bᵢ x}` with pairwise distinct exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSum {
    coeffs: Vec<f64>,
    exponents: Vec<f64>,
}

impl ExpSum {
    pub fn new(coeffs: Vec<f64>, exponents: Vec<f64>) -> Result<Self> {
        if coeffs.len() != exponents.len() || coeffs.is_empty() {
            return Err(Error::dim("need matching, non-empty coefficient and exponent lists"));
        }
        if coeffs.iter().chain(&exponents).any(|v| !v.is_finite()) {
            return Err(Error::invalid("exp_sum", "entries must be finite"));
        }
        if coeffs.iter().all(|&a| a == 0.0) {
            return Err(Error::invalid("coeffs", "at least one coefficient must be nonzero"));
        }
        let mut sorted = exponents.clone();
        sorted.sort_by(f64::total_cmp);
        if let Some(w) = sorted.windows(2).find(|w| w[1] - w[0] <= EXPONENT_TOLERANCE) {
            return Err(Error::invalid(
                "exponents",
                format!("{} and {} are not distinct", w[0], w[1]),
            ));
        }
        Ok(ExpSum { coeffs, exponents })
    }

    pub fn k(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.exponents)
            .map(|(a, b)| a * (b * x).exp())
            .sum()
    }
}

/// Strict sign changes of `es` over `grid_points` equispaced samples of `[lo, hi]`.
///
/// Exact zeros are skipped, so tangential zeros are not counted and the result is a
/// lower bound on the number of zeros.
pub fn count_zeros(es: &ExpSum, interval: (f64, f64), grid_points: usize) -> Result<usize> {
    count_sign_changes(|x| es.eval(x), interval, grid_points)
}

pub fn count_sign_changes(f: impl Fn(f64) -> f64, (lo, hi): (f64, f64), grid_points: usize) -> Result<usize> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid("interval", "need finite lo < hi"));
    }
    if grid_points < 2 {
        return Err(Error::invalid("grid_points", "need at least 2"));
    }
    let mut last = 0.0_f64;
    let mut changes = 0;
    for x in crate::grid::linspace(lo, hi, grid_points) {
        let v = f(x);
        if v == 0.0 || v.is_nan() {
            continue;
        }
        if last != 0.0 && (v > 0.0) != (last > 0.0) {
            changes += 1;
        }
        last = v;
    }
    Ok(changes)
}

/// `cos((N+1)πx)` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardTarget {
    pub n: usize,
}

pub fn hard_target(n: usize) -> Result<HardTarget> {
    if n == 0 {
        return Err(Error::invalid("N", "must be at least 1"));
    }
    Ok(HardTarget { n })
}

impl HardTarget {
    pub fn eval(&self, x: f64) -> f64 {
        ((self.n + 1) as f64 * std::f64::consts::PI * x).cos()
    }

    /// `zᵢ = i/(N+1)` for `i = 0..=N+1`.
    pub fn alternation_points(&self) -> Vec<f64> {
        let m = self.n + 1;
        (0..=m).map(|i| i as f64 / m as f64).collect()
    }

    /// `g(zᵢ) = (−1)ⁱ`, exactly.
    pub fn alternation_values(&self) -> Vec<f64> {
        (0..=self.n + 1).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }

    pub fn sample(&self, points: usize) -> Vec<(f64, f64)> {
        crate::grid::linspace(0.0, 1.0, points)
            .into_iter()
            .map(|x| (x, self.eval(x)))
            .collect()
    }
}

/// Finite parameter sets of a one-input softmax family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteFamilySpec {
    pub a_set: Vec<f64>,
    pub w_set: Vec<f64>,
    pub b_set: Vec<f64>,
}

fn dedup_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a.to_bits() == b.to_bits());
    v
}

impl FiniteFamilySpec {
    pub fn new(a_set: Vec<f64>, w_set: Vec<f64>, b_set: Vec<f64>) -> Result<Self> {
        for (name, s) in [("a_set", &a_set), ("w_set", &w_set), ("b_set", &b_set)] {
            if s.is_empty() {
                return Err(Error::invalid(name, "must be non-empty"));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "entries must be finite"));
            }
        }
        Ok(FiniteFamilySpec {
            a_set: dedup_sorted(a_set),
            w_set: dedup_sorted(w_set),
            b_set: dedup_sorted(b_set),
        })
    }

    /// Parameters reachable by a position-free context over `vocab`: the rows
    /// `xᵀBᵀC = (w, b)` for `x ∈ V_x` and the outputs `U y` for `y ∈ V_y`.
    pub fn from_vocabulary(vocab: &Vocabulary, tp: &TransformerParams) -> Result<Self> {
        if tp.d_x() != 2 || tp.d_y() != 1 || vocab.d_x() != 2 || vocab.d_y() != 1 {
            return Err(Error::dim("needs d_x = 2 (one input plus bias) and d_y = 1"));
        }
        let st = tp.score_map().transpose();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for x in vocab.vx() {
            let r = &st * crate::linalg::Vector::from_column_slice(x);
            w.push(r[0]);
            b.push(r[1]);
        }
        let u = tp.u()[(0, 0)];
        let a = vocab.vy().iter().map(|y| u * y[0]).collect();
        FiniteFamilySpec::new(a, w, b)
    }

    /// `N = #(W × B)`.
    pub fn n(&self) -> usize {
        self.w_set.len() * self.b_set.len()
    }
}

/// A sampled net with its numerator regrouped by `(w, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegroupedNet {
    /// `(w, b) ↦ Σ a` over neurons sharing the pair.
    pub numerator: BTreeMap<(u64, u64), f64>,
    /// `(w, b) ↦ multiplicity`.
    pub denominator: BTreeMap<(u64, u64), usize>,
}

impl RegroupedNet {
    pub fn from_neurons(neurons: &[(f64, f64, f64)]) -> Self {
        let mut numerator = BTreeMap::new();
        let mut denominator = BTreeMap::new();
        for &(a, w, b) in neurons {
            let key = (w.to_bits(), b.to_bits());
            *numerator.entry(key).or_insert(0.0) += a;
            *denominator.entry(key).or_insert(0) += 1;
        }
        RegroupedNet { numerator, denominator }
    }

    pub fn distinct_terms(&self) -> usize {
        self.numerator.len()
    }

    /// Numerator terms after also merging pairs with equal `w`, the exponent in `x`.
    pub fn distinct_exponents(&self) -> usize {
        let mut ws: Vec<u64> = self.numerator.keys().map(|k| k.0).collect();
        ws.dedup();
        ws.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        // Shift by the largest exponent for stability.
        let z = |k: &(u64, u64)| f64::from_bits(k.0) * x + f64::from_bits(k.1);
        let m = self.denominator.keys().map(z).fold(f64::NEG_INFINITY, f64::max);
        let num: f64 = self.numerator.iter().map(|(k, a)| a * (z(k) - m).exp()).sum();
        let den: f64 = self.denominator.iter().map(|(k, c)| *c as f64 * (z(k) - m).exp()).sum();
        num / den
    }
}

/// Direct evaluation of `Σ aᵢ e^{wᵢx+bᵢ} / Σ e^{wⱼx+bⱼ}`.
pub fn softmax_net_raw(neurons: &[(f64, f64, f64)], x: f64) -> f64 {
    let m = neurons.iter().map(|n| n.1 * x + n.2).fold(f64::NEG_INFINITY, f64::max);
    let (num, den) = neurons.iter().fold((0.0, 0.0), |(p, q), &(a, w, b)| {
        let e = (w * x + b - m).exp();
        (p + a * e, q + e)
    });
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub context_length: usize,
    pub minmax_error: f64,
    pub distinct_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonUapAudit {
    pub n: usize,
    pub max_context: usize,
    pub trials: u64,
    /// Every sampled numerator had at most `N` distinct terms.
    pub term_cap_holds: bool,
    pub max_distinct_terms: usize,
    /// Lower bound on the alternation-point error implied by the term cap.
    pub certified_floor: f64,
    /// Minimum over trials of the max error at the alternation points.
    pub empirical_floor: f64,
    pub records: Vec<TrialRecord>,
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Samples `trials` nets with `1..=max_context` neurons drawn uniformly from the
/// family and scores each against `cos((N+1)πx)` at the alternation points.
pub fn nonuap_audit(family: &FiniteFamilySpec, max_context: usize, trials: u64, seed: u64) -> Result<NonUapAudit> {
    if trials == 0 || max_context == 0 {
        return Err(Error::invalid("trials", "trials and max_context must be at least 1"));
    }
    let n = family.n();
    let g = hard_target(n)?;
    let zs = g.alternation_points();
    let gv = g.alternation_values();
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let len = rng.gen_range(1..=max_context);
            let neurons: Vec<(f64, f64, f64)> = (0..len)
                .map(|_| {
                    let a = family.a_set[rng.gen_range(0..family.a_set.len())];
                    let w = family.w_set[rng.gen_range(0..family.w_set.len())];
                    let b = family.b_set[rng.gen_range(0..family.b_set.len())];
                    (a, w, b)
                })
                .collect();
            let net = RegroupedNet::from_neurons(&neurons);
            let err = zs
                .iter()
                .zip(&gv)
                .map(|(&z, &t)| (net.eval(z) - t).abs())
                .fold(0.0, f64::max);
            TrialRecord {
                trial,
                context_length: len,
                minmax_error: err,
                distinct_terms: net.distinct_terms(),
            }
        })
        .collect();
    let max_distinct_terms = records.iter().map(|r| r.distinct_terms).max().unwrap_or(0);
    let term_cap_holds = max_distinct_terms <= n;
    let empirical_floor = records.iter().map(|r| r.minmax_error).fold(f64::INFINITY, f64::min);
    Ok(NonUapAudit {
        n,
        max_context,
        trials,
        term_cap_holds,
        max_distinct_terms,
        certified_floor: if term_cap_holds { 1.0 } else { 0.0 },
        empirical_floor,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroFuzzRecord {
    pub trial: u64,
    pub k: usize,
    pub sign_changes: usize,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroFuzzReport {
    pub trials: u64,
    pub violations: u64,
    pub max_sign_changes_minus_k: i64,
    pub records: Vec<ZeroFuzzRecord>,
}

/// Exponents in `[−3, 3]` with gaps of at least `separation`, coefficients in `[−5, 5]`.
pub fn random_exp_sum(rng: &mut impl Rng, k: usize, separation: f64) -> ExpSum {
    let span = 6.0 - separation * (k as f64 - 1.0);
    assert!(span > 0.0, "separation too large for k = {k}");
    // Sorted uniforms in [0, span], spread by the separation.
    let mut u: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..span)).collect();
    u.sort_by(f64::total_cmp);
    let exponents = u.iter().enumerate().map(|(i, v)| v - 3.0 + separation * i as f64).collect();
    let mut coeffs: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
    if coeffs.iter().all(|&c| c == 0.0) {
        coeffs[0] = 1.0;
    }
    ExpSum::new(coeffs, exponents).expect("separated exponents")
}

/// Counts sign changes of random exponential sums on `[−4, 4]` and flags any above `k − 1`.
pub fn zero_bound_fuzz(trials: u64, seed: u64, separation: f64, grid_points: usize) -> Result<ZeroFuzzReport> {
    if !(separation > EXPONENT_TOLERANCE && separation < 1.2) {
        return Err(Error::invalid("separation", "must lie in (1e-9, 1.2)"));
    }
    let records: Vec<ZeroFuzzRecord> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let k = rng.gen_range(1..=6);
            let es = random_exp_sum(&mut rng, k, separation);
            let c = count_zeros(&es, (-4.0, 4.0), grid_points).unwrap();
            ZeroFuzzRecord {
                trial,
                k,
                sign_changes: c,
                violation: c + 1 > k,
            }
        })
        .collect();
    Ok(ZeroFuzzReport {
        trials,
        violations: records.iter().filter(|r| r.violation).count() as u64,
        max_sign_changes_minus_k: records
            .iter()
            .map(|r| r.sign_changes as i64 - r.k as i64)
            .max()
            .unwrap_or(0),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn es(a: &[f64], b: &[f64]) -> ExpSum {
        ExpSum::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn sign_change_examples() {
        assert_eq!(count_zeros(&es(&[1.0], &[2.0]), (-1.0, 1.0), 1001).unwrap(), 0);
        assert_eq!(count_zeros(&es(&[1.0, -1.0], &[1.0, -1.0]), (-1.0, 1.0), 1000).unwrap(), 1);
        let h = es(&[3.0, -1.0, -1.0], &[0.0, 1.0, -1.0]);
        assert_eq!(count_zeros(&h, (-2.0, 2.0), 4001).unwrap(), 2);
    }

    #[test]
    fn cosh_crossings_match_bisection() {
        // 2cosh(x) = 3 by bisection, then brute-force grid sign scan.
        let f = |x: f64| 3.0 - x.exp() - (-x).exp();
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if f(m) > 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        let root = 0.5 * (lo + hi);
        assert!((root - 1.5f64.acosh()).abs() < 1e-14);
        let xs = crate::grid::linspace(-2.0, 2.0, 4001);
        let crossings: Vec<f64> = xs.windows(2).filter(|w| f(w[0]) * f(w[1]) < 0.0).map(|w| w[0]).collect();
        assert_eq!(crossings.len(), 2);
        assert!((crossings[0] + root).abs() < 1e-3 && (crossings[1] - root).abs() < 1e-3);
    }

    #[test]
    fn exp_sum_validation() {
        assert!(ExpSum::new(vec![1.0, 1.0], vec![0.5, 0.5 + 1e-10]).is_err());
        assert!(ExpSum::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(ExpSum::new(vec![1.0], vec![]).is_err());
        assert!(ExpSum::new(vec![1.0, 0.0], vec![0.0, 1.0]).is_ok());
        assert!(count_zeros(&es(&[1.0], &[0.0]), (1.0, 1.0), 10).is_err());
        assert!(count_zeros(&es(&[1.0], &[0.0]), (0.0, 1.0), 1).is_err());
    }

    #[test]
    fn hard_target_alternates() {
        let g = hard_target(1).unwrap();
        assert!(g.eval(0.25).abs() < 1e-15 && g.eval(0.75).abs() < 1e-15);
        for n in 1..12 {
            let g = hard_target(n).unwrap();
            for (i, (z, v)) in g.alternation_points().iter().zip(g.alternation_values()).enumerate() {
                assert_eq!(g.eval(*z).signum(), v, "n {n} i {i}");
                assert!((g.eval(*z) - v).abs() < 1e-12);
            }
            assert_eq!(count_sign_changes(|x| g.eval(x), (0.0, 1.0), 10_001).unwrap(), n + 1);
        }
        assert!(hard_target(0).is_err());
    }

    #[test]
    fn single_pair_family_floor() {
        // Exhaustive: every net is a constant a-average, compared with ±1 at 0, 1/2, 1.
        let fam = FiniteFamilySpec::new(vec![-1.0, 0.3, 2.0], vec![0.7], vec![-0.1]).unwrap();
        assert_eq!(fam.n(), 1);
        let mut best = f64::INFINITY;
        for c in 0..4usize {
            for d in 0..4usize {
                for e in 0..4usize {
                    let total = c + d + e;
                    if total == 0 {
                        continue;
                    }
                    let mean = (-(c as f64) + 0.3 * d as f64 + 2.0 * e as f64) / total as f64;
                    best = best.min((mean - 1.0).abs().max((mean + 1.0).abs()));
                }
            }
        }
        assert!(best >= 0.9);
        let audit = nonuap_audit(&fam, 50, 500, 3).unwrap();
        assert!(audit.term_cap_holds && audit.max_distinct_terms == 1);
        assert!(audit.empirical_floor >= best - 1e-12);
    }

    #[test]
    fn audit_is_deterministic_and_capped() {
        let fam = FiniteFamilySpec::new(vec![-1.0, 0.0, 1.0], vec![-2.0, 2.0], vec![0.0, 0.5]).unwrap();
        let a = nonuap_audit(&fam, 100, 300, 11).unwrap();
        let b = nonuap_audit(&fam, 100, 300, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n, 4);
        assert!(a.records.iter().all(|r| r.distinct_terms <= 4));
        assert!(a.empirical_floor >= a.certified_floor);
    }

    #[test]
    fn family_from_vocabulary() {
        let vocab = Vocabulary::new(vec![vec![0.5, 1.0], vec![-1.0, 1.0], vec![0.5, 1.0]], vec![vec![1.0], vec![-1.0]]).unwrap();
        let tp = TransformerParams::identity(2, 1);
        let fam = FiniteFamilySpec::from_vocabulary(&vocab, &tp).unwrap();
        assert_eq!(fam.w_set, vec![-1.0, 0.5]);
        assert_eq!(fam.b_set, vec![1.0]);
        assert_eq!(fam.a_set, vec![-1.0, 1.0]);
        assert_eq!(fam.n(), 2);
    }

    #[test]
    fn fuzz_has_no_violations() {
        let r = zero_bound_fuzz(300, 5, 0.1, 4001).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_sign_changes_minus_k <= -1);
    }

    proptest! {
        #[test]
        fn regrouping_is_exact(
            picks in proptest::collection::vec((0usize..3, 0usize..3, 0usize..2), 1..60),
            x in -1.0f64..2.0,
        ) {
            let a = [-1.5, 0.25, 2.0];
            let w = [-1.0, 0.5, 3.0];
            let b = [0.0, -0.75];
            let neurons: Vec<(f64, f64, f64)> = picks.iter().map(|&(i, j, l)| (a[i], w[j], b[l])).collect();
            let net = RegroupedNet::from_neurons(&neurons);
            prop_assert!(net.distinct_terms() <= 6);
            prop_assert!(net.distinct_exponents() <= 3);
            prop_assert!((net.eval(x) - softmax_net_raw(&neurons, x)).abs() <= 1e-12);
        }

        #[test]
        fn zero_count_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=6);
            let e = random_exp_sum(&mut rng, k, 0.1);
            prop_assert!(e.exponents().windows(2).all(|w| w[1] - w[0] >= 0.1 - 1e-12));
            prop_assert!(count_zeros(&e, (-4.0, 4.0), 2001).unwrap() < k);
        }
    }
}
