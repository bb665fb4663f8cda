//! Finite vocabularies, positional encodings `j ↦ P(j)` and covering audits of `V_x + P`.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Token sets for the `x` and `y` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    vx: Vec<Vec<f64>>,
    vy: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn new(vx: Vec<Vec<f64>>, vy: Vec<Vec<f64>>) -> Result<Self> {
        for (name, set) in [("V_x", &vx), ("V_y", &vy)] {
            let Some(first) = set.first() else {
                return Err(Error::invalid(name, "empty vocabulary"));
            };
            if first.is_empty() || set.iter().any(|v| v.len() != first.len()) {
                return Err(Error::dim(format!("{name} entries must share a positive dimension")));
            }
            if set.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "non-finite entry"));
            }
        }
        Ok(Vocabulary { vx, vy })
    }

    pub fn vx(&self) -> &[Vec<f64>] {
        &self.vx
    }
    pub fn vy(&self) -> &[Vec<f64>] {
        &self.vy
    }
    pub fn d_x(&self) -> usize {
        self.vx[0].len()
    }
    pub fn d_y(&self) -> usize {
        self.vy[0].len()
    }

    /// Index of an exact (bitwise) member of `V_y`.
    pub fn vy_index(&self, y: &[f64]) -> Option<usize> {
        self.vy.iter().position(|v| bit_equal(v, y))
    }

    pub fn vx_index(&self, x: &[f64]) -> Option<usize> {
        self.vx.iter().position(|v| bit_equal(v, x))
    }

    /// True when every one-nonzero vector with entry in `{1, −1, √2}` and zero are present.
    pub fn has_signed_units(&self) -> bool {
        reduced_vy(self.d_y()).iter().all(|v| self.vy_index(v).is_some())
    }
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Lattice `{spacing·k}` inside `[lo, hi]` on every axis of `ℝ^dim`.
pub fn lattice_vx(lo: f64, hi: f64, spacing: f64, dim: usize) -> Result<Vec<Vec<f64>>> {
    if !(spacing > 0.0 && spacing.is_finite() && lo <= hi) || dim == 0 {
        return Err(Error::invalid("lattice", "need spacing > 0, lo ≤ hi and dim ≥ 1"));
    }
    let k_lo = (lo / spacing).ceil() as i64;
    let k_hi = (hi / spacing).floor() as i64;
    if k_lo > k_hi {
        return Err(Error::invalid("lattice", "no lattice point inside the bounds"));
    }
    let axis: Vec<f64> = (k_lo..=k_hi).map(|k| k as f64 * spacing).collect();
    let count = axis.len().checked_pow(dim as u32).filter(|&c| c <= 50_000_000);
    let Some(count) = count else {
        return Err(Error::invalid("lattice", "too many lattice points"));
    };
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; dim];
    for _ in 0..count {
        out.push(idx.iter().map(|&i| axis[i]).collect());
        for c in (0..dim).rev() {
            idx[c] += 1;
            if idx[c] < axis.len() {
                break;
            }
            idx[c] = 0;
        }
    }
    Ok(out)
}

/// `0` followed by `+e_o, −e_o, √2·e_o` for each output coordinate.
pub fn reduced_vy(d_y: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d_y]];
    for o in 0..d_y {
        for v in [1.0, -1.0, std::f64::consts::SQRT_2] {
            let mut e = vec![0.0; d_y];
            e[o] = v;
            out.push(e);
        }
    }
    out
}

/// The full product set `{1, −1, √2, 0}^{d_y}`.
pub fn product_vy(d_y: usize) -> Vec<Vec<f64>> {
    let vals = [0.0, 1.0, -1.0, std::f64::consts::SQRT_2];
    let total = 4usize.pow(d_y as u32);
    (0..total)
        .map(|mut t| {
            (0..d_y)
                .map(|_| {
                    let v = vals[t % 4];
                    t /= 4;
                    v
                })
                .collect()
        })
        .collect()
}

/// The `i`-th positive rational of the Calkin–Wilf sequence, read off the binary digits of `i`.
pub fn calkin_wilf_rational(i: u64) -> (u64, u64) {
    assert!(i >= 1, "Calkin–Wilf indices start at 1");
    let (mut a, mut b) = (1u64, 1u64);
    for bit in (0..63 - i.leading_zeros()).rev() {
        if (i >> bit) & 1 == 0 {
            b += a;
        } else {
            a += b;
        }
    }
    (a, b)
}

/// Successor in the Calkin–Wilf sequence: `q ↦ 1/(2⌊q⌋ − q + 1)` on `q = a/b`.
pub fn calkin_wilf_next((a, b): (u64, u64)) -> (u64, u64) {
    let fl = a / b;
    (b, (2 * fl + 1) * b - a)
}

/// Target region of a scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// All of `ℝ^dim`.
    Whole { dim: usize },
}

impl Region {
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Region {
        Region::Box {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::Whole { dim } => *dim,
        }
    }

    pub fn contains_box(&self, lo: &[f64], hi: &[f64]) -> bool {
        match self {
            Region::Whole { dim } => lo.len() == *dim,
            Region::Box { lo: l, hi: h } => {
                lo.len() == l.len() && (0..l.len()).all(|c| l[c] <= lo[c] && hi[c] <= h[c])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Region::Whole { dim } if *dim == 0 => Err(Error::invalid("region", "dimension must be positive")),
            Region::Whole { .. } => Ok(()),
            Region::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::dim("region bounds must share a positive length"));
                }
                if (0..lo.len()).any(|c| !(lo[c].is_finite() && hi[c].is_finite() && lo[c] < hi[c])) {
                    return Err(Error::invalid("region", "need finite lo < hi on every axis"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeKind {
    /// Fibonacci lattices with Calkin–Wilf generators, one shell per coprime modulus.
    CalkinWilfLattice,
    /// Cell centres of successive dyadic refinements.
    DyadicLattice,
    /// `frac(j·√pₖ)` per coordinate for distinct primes `pₖ`.
    IrrationalRotation { primes: Vec<u64> },
    /// `P(j)` read from a table, cycling after its end.
    Custom { table: Vec<Vec<f64>> },
}

impl PeKind {
    pub fn name(&self) -> &'static str {
        match self {
            PeKind::CalkinWilfLattice => "calkin_wilf_lattice",
            PeKind::DyadicLattice => "dyadic_lattice",
            PeKind::IrrationalRotation { .. } => "irrational_rotation",
            PeKind::Custom { .. } => "custom",
        }
    }
}

/// A positional encoding with zero `y` part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeDescriptor", into = "SchemeDescriptor")]
pub struct PeScheme {
    kind: PeKind,
    region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primes: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
}

/// JSON form `{"kind", "region": {"lo", "hi"} | null, "params", "p_y_zero"}`;
/// a null region means all of `ℝ^dim` with `dim` taken from `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeDescriptor {
    pub kind: String,
    pub region: Option<BoxBounds>,
    #[serde(default)]
    pub params: SchemeParams,
    #[serde(default = "yes")]
    pub p_y_zero: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<SchemeDescriptor> for PeScheme {
    type Error = Error;

    fn try_from(d: SchemeDescriptor) -> Result<Self> {
        if !d.p_y_zero {
            return Err(Error::invalid("p_y_zero", "the y part of the encoding must vanish"));
        }
        let region = match d.region {
            Some(b) => Region::Box { lo: b.lo, hi: b.hi },
            None => Region::Whole {
                dim: d.params.dim.ok_or_else(|| Error::invalid("params.dim", "required when region is null"))?,
            },
        };
        let dim = region.dim();
        let kind = match d.kind.as_str() {
            "calkin_wilf_lattice" => PeKind::CalkinWilfLattice,
            "dyadic_lattice" => PeKind::DyadicLattice,
            "irrational_rotation" => PeKind::IrrationalRotation {
                primes: d.params.primes.unwrap_or_else(|| first_primes(dim)),
            },
            "custom" => PeKind::Custom {
                table: d.params.table.ok_or_else(|| Error::invalid("params.table", "custom schemes need a table"))?,
            },
            other => return Err(Error::invalid("kind", format!("unknown scheme `{other}`"))),
        };
        PeScheme::new(kind, region)
    }
}

impl From<PeScheme> for SchemeDescriptor {
    fn from(s: PeScheme) -> Self {
        let mut params = SchemeParams::default();
        let region = match s.region {
            Region::Box { lo, hi } => Some(BoxBounds { lo, hi }),
            Region::Whole { dim } => {
                params.dim = Some(dim);
                None
            }
        };
        let kind = s.kind.name().to_string();
        match s.kind {
            PeKind::IrrationalRotation { primes } => params.primes = Some(primes),
            PeKind::Custom { table } => params.table = Some(table),
            _ => {}
        }
        SchemeDescriptor {
            kind,
            region,
            params,
            p_y_zero: true,
        }
    }
}

fn is_prime(p: u64) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| p % d != 0)
}

fn first_primes(n: usize) -> Vec<u64> {
    (2..).filter(|&p| is_prime(p)).take(n).collect()
}

impl PeScheme {
    pub fn new(kind: PeKind, region: Region) -> Result<Self> {
        region.validate()?;
        let dim = region.dim();
        match (&kind, &region) {
            (PeKind::DyadicLattice | PeKind::IrrationalRotation { .. }, Region::Whole { .. }) => {
                return Err(Error::Unsupported(format!(
                    "{} covers a bounded box only",
                    kind.name()
                )))
            }
            (PeKind::IrrationalRotation { primes }, _) => {
                if primes.len() != dim || primes.iter().any(|&p| !is_prime(p)) {
                    return Err(Error::invalid("primes", format!("need {dim} primes")));
                }
                let mut sorted = primes.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != dim {
                    return Err(Error::invalid("primes", "primes must be distinct"));
                }
            }
            (PeKind::Custom { table }, _) => {
                if table.is_empty() || table.iter().any(|r| r.len() != dim) {
                    return Err(Error::dim(format!("custom table rows must have {dim} entries")));
                }
                if table.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("table", "non-finite entry"));
                }
            }
            _ => {}
        }
        Ok(PeScheme { kind, region })
    }

    pub fn calkin_wilf(region: Region) -> Result<Self> {
        PeScheme::new(PeKind::CalkinWilfLattice, region)
    }

    pub fn dyadic(region: Region) -> Result<Self> {
        PeScheme::new(PeKind::DyadicLattice, region)
    }

    /// Rotation by the square roots of the first `dim` primes.
    pub fn irrational_rotation(region: Region) -> Result<Self> {
        let primes = first_primes(region.dim());
        PeScheme::new(PeKind::IrrationalRotation { primes }, region)
    }

    pub fn kind(&self) -> &PeKind {
        &self.kind
    }
    pub fn region(&self) -> &Region {
        &self.region
    }
    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    /// `P_x(j)` for `j ≥ 1`.
    pub fn value(&self, j: u64) -> Vec<f64> {
        assert!(j >= 1, "positions start at 1");
        match &self.kind {
            PeKind::CalkinWilfLattice => cw_value(&self.region, j),
            PeKind::DyadicLattice => dyadic_value(&self.region, j),
            PeKind::IrrationalRotation { primes } => {
                let u: Vec<f64> = primes.iter().map(|&p| frac_sqrt(j, p)).collect();
                to_region(&self.region, &u)
            }
            PeKind::Custom { table } => table[((j - 1) % table.len() as u64) as usize].clone(),
        }
    }

    /// `(P_x(j), P_y(j))`; the second part is always zero.
    pub fn value_full(&self, j: u64, d_y: usize) -> (Vec<f64>, Vec<f64>) {
        (self.value(j), vec![0.0; d_y])
    }

    pub fn cursor(&self, start: u64) -> PeCursor<'_> {
        PeCursor { scheme: self, next: start.max(1) }
    }
}

pub fn pe_value(scheme: &PeScheme, j: u64) -> Vec<f64> {
    scheme.value(j)
}

/// Sequential walk over positions.
pub struct PeCursor<'a> {
    scheme: &'a PeScheme,
    next: u64,
}

impl Iterator for PeCursor<'_> {
    type Item = (u64, Vec<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        let j = self.next;
        self.next = j.checked_add(1)?;
        Some((j, self.scheme.value(j)))
    }
}

fn to_region(region: &Region, u: &[f64]) -> Vec<f64> {
    match region {
        Region::Box { lo, hi } => (0..u.len()).map(|c| lo[c] + (hi[c] - lo[c]) * u[c]).collect(),
        Region::Whole { .. } => u.to_vec(),
    }
}

#[derive(Debug, Clone, Copy)]
struct CwShell {
    n: u64,
    g: u64,
    stride: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Moduli `F_m` (m = 3, 4 and primes ≥ 5) are pairwise coprime; `g = F_{m−1}`.
fn cw_shells() -> &'static [CwShell] {
    static SHELLS: OnceLock<Vec<CwShell>> = OnceLock::new();
    SHELLS.get_or_init(|| {
        let mut shells = vec![CwShell { n: 1, g: 0, stride: 0 }];
        // Golden-path Calkin–Wilf indices 1, 2, 5, 10, 21, … give consecutive Fibonacci terms.
        let mut idx = 1u64;
        for m in 1..=90u32 {
            let (a, b) = calkin_wilf_rational(idx);
            let (g, n) = (a.min(b), a.max(b));
            // The term at step m is F_m / F_{m+1} in some order.
            let mm = m + 1;
            if mm == 3 || mm == 4 || (mm > 4 && is_prime(mm as u64)) {
                let nn = n as u128;
                let mut c = ((2 * nn * nn).isqrt() - nn) as u64;
                while gcd(c, n) != 1 {
                    c += 1;
                }
                shells.push(CwShell { n, g, stride: c });
            }
            match idx.checked_mul(2).and_then(|v| v.checked_add((m % 2 == 0) as u64)) {
                Some(v) if v < (1u64 << 63) => idx = v,
                _ => break,
            }
        }
        shells
    })
}

/// Locates `j` in shell order; each shell after the first skips the all-zero digit string.
fn cw_locate(j: u64, pairs: u32) -> (usize, u128) {
    let shells = cw_shells();
    let mut rem = (j - 1) as u128;
    for (s, sh) in shells.iter().enumerate() {
        let size = if s == 0 {
            1
        } else {
            match (sh.n as u128).checked_pow(pairs) {
                Some(v) => v - 1,
                None => u128::MAX,
            }
        };
        if rem < size {
            return (s, if s == 0 { 0 } else { rem + 1 });
        }
        rem -= size;
    }
    unreachable!("position beyond the last lattice shell")
}

fn cw_value(region: &Region, j: u64) -> Vec<f64> {
    let d = region.dim();
    let pairs = d.div_ceil(2) as u32;
    let (s, mut digits) = cw_locate(j, pairs);
    let sh = cw_shells()[s];
    let n = sh.n as u128;
    let mut u = Vec::with_capacity(d);
    while u.len() < d {
        let digit = digits % n;
        digits /= n;
        let t = digit * sh.stride as u128 % n;
        if d == 1 {
            u.push(t as f64 / sh.n as f64);
            break;
        }
        u.push(t as f64 / sh.n as f64);
        if u.len() < d {
            u.push((t * sh.g as u128 % n) as f64 / sh.n as f64);
        }
    }
    match region {
        Region::Box { .. } => to_region(region, &u),
        Region::Whole { .. } => {
            let scale = (1u64 << (s / 3).min(60)) as f64;
            u.iter().map(|&v| scale * (2.0 * v - 1.0)).collect()
        }
    }
}

fn dyadic_value(region: &Region, j: u64) -> Vec<f64> {
    let d = region.dim() as u32;
    let mut rem = (j - 1) as u128;
    let mut m = 0u32;
    loop {
        let size = 1u128 << (m * d).min(127);
        if rem < size {
            break;
        }
        rem -= size;
        m += 1;
    }
    let mut coords = vec![0u128; d as usize];
    for bit in 0..m {
        for (c, coord) in coords.iter_mut().enumerate() {
            *coord |= ((rem >> (bit * d + c as u32)) & 1) << bit;
        }
    }
    let denom = (1u128 << (m + 1)) as f64;
    let u: Vec<f64> = coords.iter().map(|&o| (2 * o + 1) as f64 / denom).collect();
    to_region(region, &u)
}

/// `frac(j·√p)`, exact to 2⁻⁶⁴ before a single rounding.
fn frac_sqrt(j: u64, p: u64) -> f64 {
    let v = (BigUint::from(j) * BigUint::from(j) * BigUint::from(p)) << 128u32;
    let root = v.sqrt();
    let low: u64 = (root & BigUint::from(u64::MAX)).try_into().expect("masked to 64 bits");
    low as f64 / 18_446_744_073_709_551_616.0
}

/// Closed-form covering radius of the first `2^m − 1` one-dimensional dyadic values.
pub fn dyadic_covering_radius(lo: f64, hi: f64, m: u32) -> f64 {
    (hi - lo) / 2.0 * 2f64.powi(1 - m as i32)
}

/// `x_i + P_x(j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SToken {
    pub j: u64,
    pub base: usize,
    pub value: Vec<f64>,
}

pub fn s_token(vocab: &Vocabulary, scheme: &PeScheme, base: usize, j: u64) -> SToken {
    let p = scheme.value(j);
    let value = vocab.vx()[base].iter().zip(&p).map(|(x, q)| x + q).collect();
    SToken { j, base, value }
}

/// Uniform-grid bucket index over a point set.
#[derive(Debug, Clone)]
pub struct VocabIndex {
    points: Vec<Vec<f64>>,
    cell: f64,
    cell_lo: Vec<i64>,
    cell_hi: Vec<i64>,
    strides: Vec<u64>,
    buckets: Buckets,
}

#[derive(Debug, Clone)]
enum Buckets {
    /// CSR layout over every cell of the bounding range.
    Dense { start: Vec<u32>, items: Vec<u32> },
    Sparse(HashMap<u64, Vec<u32>>),
}

impl VocabIndex {
    /// `cell` defaults to the mean spacing of the points' bounding box.
    pub fn new(points: &[Vec<f64>], cell: Option<f64>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("V_x", "empty vocabulary"));
        };
        if points.len() > u32::MAX as usize {
            return Err(Error::invalid("V_x", "vocabulary too large to index"));
        }
        let d = first.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for c in 0..d {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let cell = match cell {
            Some(h) if h > 0.0 && h.is_finite() => h,
            Some(_) => return Err(Error::invalid("cell", "must be positive")),
            None => {
                let extent = (0..d).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
                let per_axis = (points.len() as f64).powf(1.0 / d as f64).max(1.0);
                if extent > 0.0 {
                    extent / per_axis
                } else {
                    1.0
                }
            }
        };
        let cell_lo: Vec<i64> = lo.iter().map(|v| cell_coord(cell, *v)).collect();
        let cell_hi: Vec<i64> = hi.iter().map(|v| cell_coord(cell, *v)).collect();
        let mut strides = vec![1u64; d];
        let mut total: u128 = 1;
        for c in (0..d).rev() {
            strides[c] = total.min(u64::MAX as u128) as u64;
            total = total.saturating_mul((cell_hi[c] - cell_lo[c] + 1) as u128);
        }
        let mut idx = VocabIndex {
            points: points.to_vec(),
            cell,
            cell_lo,
            cell_hi,
            strides,
            buckets: Buckets::Sparse(HashMap::new()),
        };
        let keys: Vec<u64> = points.iter().map(|p| idx.flat_key_of(p)).collect();
        if total <= 4 * points.len() as u128 + 4096 {
            let cells = total as usize;
            let mut start = vec![0u32; cells + 1];
            for &k in &keys {
                start[k as usize + 1] += 1;
            }
            for c in 0..cells {
                start[c + 1] += start[c];
            }
            let mut fill = start.clone();
            let mut items = vec![0u32; points.len()];
            for (i, &k) in keys.iter().enumerate() {
                items[fill[k as usize] as usize] = i as u32;
                fill[k as usize] += 1;
            }
            idx.buckets = Buckets::Dense { start, items };
        } else {
            let mut map: HashMap<u64, Vec<u32>> = HashMap::new();
            for (i, &k) in keys.iter().enumerate() {
                map.entry(k).or_default().push(i as u32);
            }
            idx.buckets = Buckets::Sparse(map);
        }
        Ok(idx)
    }

    fn flat_key_of(&self, p: &[f64]) -> u64 {
        (0..p.len())
            .map(|c| (cell_coord(self.cell, p[c]) - self.cell_lo[c]) as u64 * self.strides[c])
            .sum()
    }

    /// Points whose cell has the given in-range coordinates.
    fn cell_items(&self, key: &[i64]) -> &[u32] {
        let flat: u64 = (0..key.len())
            .map(|c| (key[c] - self.cell_lo[c]) as u64 * self.strides[c])
            .sum();
        match &self.buckets {
            Buckets::Dense { start, items } => {
                &items[start[flat as usize] as usize..start[flat as usize + 1] as usize]
            }
            Buckets::Sparse(map) => map.get(&flat).map_or(&[], Vec::as_slice),
        }
    }

    fn occupied_cells(&self) -> usize {
        match &self.buckets {
            Buckets::Dense { start, .. } => start.len() - 1,
            Buckets::Sparse(map) => map.len(),
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of points inside the closed box, ascending.
    pub fn in_box(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        self.in_box_into(lo, hi, &mut out);
        out
    }

    /// As [`VocabIndex::in_box`], reusing `out`.
    pub fn in_box_into(&self, lo: &[f64], hi: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let d = lo.len();
        let inside = |p: &[f64]| (0..d).all(|c| lo[c] <= p[c] && p[c] <= hi[c]);
        let mut klo = [0i64; 8];
        let mut khi = [0i64; 8];
        if d > 8 {
            out.extend((0..self.points.len()).filter(|&i| inside(&self.points[i])));
            return;
        }
        let mut cells = 1.0;
        for c in 0..d {
            klo[c] = cell_coord(self.cell, lo[c]).max(self.cell_lo[c]);
            khi[c] = cell_coord(self.cell, hi[c]).min(self.cell_hi[c]);
            if klo[c] > khi[c] {
                return;
            }
            cells *= (khi[c] - klo[c] + 1) as f64;
        }
        if cells > self.occupied_cells() as f64 {
            out.extend((0..self.points.len()).filter(|&i| inside(&self.points[i])));
            return;
        }
        let mut key = klo;
        let mut single_cell = true;
        'cells: loop {
            for &i in self.cell_items(&key[..d]) {
                if inside(&self.points[i as usize]) {
                    out.push(i as usize);
                }
            }
            for c in (0..d).rev() {
                key[c] += 1;
                if key[c] <= khi[c] {
                    single_cell = false;
                    continue 'cells;
                }
                key[c] = klo[c];
            }
            break;
        }
        if !single_cell {
            out.sort_unstable();
        }
    }

    /// Nearest point in the Euclidean norm; ties go to the lowest index.
    pub fn nearest(&self, p: &[f64]) -> (usize, f64) {
        let d = p.len();
        let centre: Vec<i64> = p.iter().map(|v| cell_coord(self.cell, *v)).collect();
        let max_ring = (0..d)
            .map(|c| (centre[c] - self.cell_lo[c]).abs().max((self.cell_hi[c] - centre[c]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |i: usize, best: &mut (usize, f64)| {
            let dist = dist2(&self.points[i], p);
            if dist < best.1 || (dist == best.1 && i < best.0) {
                *best = (i, dist);
            }
        };
        if (2.0 * max_ring as f64 + 1.0).powi(d as i32) > 4.0 * self.len() as f64 {
            for i in 0..self.points.len() {
                consider(i, &mut best);
            }
            return (best.0, best.1.sqrt());
        }
        let mut key = vec![0i64; d];
        for r in 0..=max_ring {
            let mut off = vec![-r; d];
            'ring: loop {
                if off.iter().any(|o| o.abs() == r) {
                    let mut in_range = true;
                    for c in 0..d {
                        key[c] = centre[c] + off[c];
                        in_range &= self.cell_lo[c] <= key[c] && key[c] <= self.cell_hi[c];
                    }
                    if in_range {
                        for &i in self.cell_items(&key) {
                            consider(i as usize, &mut best);
                        }
                    }
                }
                for c in (0..d).rev() {
                    off[c] += 1;
                    if off[c] <= r {
                        continue 'ring;
                    }
                    off[c] = -r;
                }
                break;
            }
            // Unvisited points lie at least r cells away from the query's cell.
            if best.1.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn cell_coord(cell: f64, v: f64) -> i64 {
    (v / cell).floor().clamp(-1e15, 1e15) as i64
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Covering radius `r(n)` of `{xᵢ + P_x(j) : j ≤ n}` over a probe grid, `n = 1..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub covering_radius: Vec<f64>,
    pub probes: usize,
    pub vocab_size: usize,
}

impl DensityProfile {
    pub fn n_max(&self) -> usize {
        self.covering_radius.len()
    }

    pub fn radius(&self, n: usize) -> f64 {
        self.covering_radius[n - 1]
    }

    /// Smallest `n` with `r(n) < target`.
    pub fn first_below(&self, target: f64) -> Option<usize> {
        self.covering_radius.iter().position(|&r| r < target).map(|i| i + 1)
    }

    /// `(n, r(n))` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.covering_radius.iter().enumerate().map(|(i, &r)| (i + 1, r))
    }
}

/// Covering radius of `V_x + P` over the uniform probe grid with `probe_per_axis` points per axis.
pub fn density_audit(
    vocab: &Vocabulary,
    scheme: &PeScheme,
    region: (&[f64], &[f64]),
    n_max: usize,
    probe_per_axis: usize,
) -> Result<DensityProfile> {
    let (lo, hi) = region;
    if vocab.d_x() != scheme.dim() {
        return Err(Error::dim(format!(
            "V_x has dimension {}, scheme has {}",
            vocab.d_x(),
            scheme.dim()
        )));
    }
    if n_max == 0 {
        return Err(Error::invalid("n_max", "must be positive"));
    }
    let probes = Grid::uniform(lo, hi, &vec![probe_per_axis; lo.len()])?;
    if probes.dim() != scheme.dim() {
        return Err(Error::dim("probe region dimension differs from the scheme"));
    }
    if vocab.vx().iter().all(|x| x.iter().all(|&v| v == 0.0)) && !scheme.region().contains_box(lo, hi) {
        return Err(Error::invalid("region", "audit region lies outside the scheme's target"));
    }
    let pe: Vec<Vec<f64>> = scheme.cursor(1).take(n_max).map(|(_, v)| v).collect();
    let index = VocabIndex::new(vocab.vx(), None)?;
    let d = scheme.dim();
    // Per probe: positions where its nearest distance strictly improves.
    let improvements: Vec<Vec<(u32, f64)>> = probes
        .points()
        .par_iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            let mut out = Vec::new();
            let mut shifted = vec![0.0; d];
            for (j, pj) in pe.iter().enumerate() {
                for c in 0..d {
                    shifted[c] = p[c] - pj[c];
                }
                let (_, dist) = index.nearest(&shifted);
                if dist < best {
                    best = dist;
                    out.push((j as u32, dist));
                }
            }
            out
        })
        .collect();
    let mut events: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_max];
    for (probe, list) in improvements.iter().enumerate() {
        for &(j, dist) in list {
            events[j as usize].push((probe, dist));
        }
    }
    let mut current = vec![f64::INFINITY; probes.len()];
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    counts.insert(f64::INFINITY.to_bits(), probes.len());
    let mut radius = Vec::with_capacity(n_max);
    for ev in &events {
        for &(probe, dist) in ev {
            let old = current[probe].to_bits();
            if let Some(c) = counts.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    counts.remove(&old);
                }
            }
            *counts.entry(dist.to_bits()).or_default() += 1;
            current[probe] = dist;
        }
        let top = counts.keys().next_back().copied().expect("at least one probe");
        radius.push(f64::from_bits(top));
    }
    Ok(DensityProfile {
        covering_radius: radius,
        probes: probes.len(),
        vocab_size: vocab.vx().len(),
    })
}
