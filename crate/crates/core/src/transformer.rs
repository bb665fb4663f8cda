//! Single-layer masked attention `Attn(Z) = V Z M σ((QZ)ᵀ K Z)` and its readouts.
//!
//! `Z = [[X, x̃], [Y, 0]]` stacks `n` context tokens and the query, `M = diag(I_n, 0)`
//! masks the query's own value, and the readout is the `y` block of the last
//! column of `Z + Attn(Z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnn::{softmax, ActivationKind};
use crate::linalg::{self, check_conditioning, Matrix, Vector};

/// The four blocks of a dense `QᵀK`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralBlocks {
    #[serde(rename = "O11", with = "linalg::row_major")]
    pub o11: Matrix,
    #[serde(rename = "O12", with = "linalg::row_major")]
    pub o12: Matrix,
    #[serde(rename = "O21", with = "linalg::row_major")]
    pub o21: Matrix,
    #[serde(rename = "O22", with = "linalg::row_major")]
    pub o22: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformerParams {
    #[serde(rename = "B", with = "linalg::row_major")]
    b: Matrix,
    #[serde(rename = "C", with = "linalg::row_major")]
    c: Matrix,
    #[serde(rename = "D", with = "linalg::row_major")]
    d: Matrix,
    #[serde(rename = "E", with = "linalg::row_major")]
    e: Matrix,
    #[serde(rename = "F", with = "linalg::row_major")]
    f: Matrix,
    #[serde(rename = "U", with = "linalg::row_major")]
    u: Matrix,
    general: Option<GeneralBlocks>,
}

#[derive(Deserialize)]
struct RawParams {
    #[serde(rename = "B", with = "linalg::row_major")]
    b: Matrix,
    #[serde(rename = "C", with = "linalg::row_major")]
    c: Matrix,
    #[serde(rename = "D", with = "linalg::row_major")]
    d: Matrix,
    #[serde(rename = "E", with = "linalg::row_major")]
    e: Matrix,
    #[serde(rename = "F", with = "linalg::row_major")]
    f: Matrix,
    #[serde(rename = "U", with = "linalg::row_major")]
    u: Matrix,
    #[serde(default)]
    general: Option<GeneralBlocks>,
}

impl<'de> Deserialize<'de> for TransformerParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RawParams::deserialize(d)?;
        TransformerParams::new(r.b, r.c, r.d, r.e, r.f, r.u, r.general)
            .map_err(serde::de::Error::custom)
    }
}

impl TransformerParams {
    pub fn new(
        b: Matrix,
        c: Matrix,
        d: Matrix,
        e: Matrix,
        f: Matrix,
        u: Matrix,
        general: Option<GeneralBlocks>,
    ) -> Result<Self> {
        let dx = b.nrows();
        let dy = u.nrows();
        let shape = |name: &str, m: &Matrix, r: usize, cc: usize| -> Result<()> {
            if m.nrows() != r || m.ncols() != cc {
                return Err(Error::dim(format!(
                    "{name} is {}x{}, expected {r}x{cc}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        if dx == 0 || dy == 0 {
            return Err(Error::dim("d_x and d_y must be positive"));
        }
        shape("B", &b, dx, dx)?;
        shape("C", &c, dx, dx)?;
        shape("D", &d, dx, dx)?;
        shape("E", &e, dx, dy)?;
        shape("F", &f, dy, dx)?;
        shape("U", &u, dy, dy)?;
        if let Some(g) = &general {
            shape("O11", &g.o11, dx, dx)?;
            shape("O12", &g.o12, dx, dy)?;
            shape("O21", &g.o21, dy, dx)?;
            shape("O22", &g.o22, dy, dy)?;
        } else {
            check_conditioning("B", &b)?;
            check_conditioning("C", &c)?;
        }
        check_conditioning("U", &u)?;
        Ok(TransformerParams {
            b,
            c,
            d,
            e,
            f,
            u,
            general,
        })
    }

    /// Sparse partition with `D = E = F = 0`.
    pub fn sparse(b: Matrix, c: Matrix, u: Matrix) -> Result<Self> {
        let (dx, dy) = (b.nrows(), u.nrows());
        TransformerParams::new(
            b,
            c,
            Matrix::zeros(dx, dx),
            Matrix::zeros(dx, dy),
            Matrix::zeros(dy, dx),
            u,
            None,
        )
    }

    pub fn identity(dx: usize, dy: usize) -> Self {
        TransformerParams::sparse(
            Matrix::identity(dx, dx),
            Matrix::identity(dx, dx),
            Matrix::identity(dy, dy),
        )
        .expect("identity blocks are well-conditioned")
    }

    pub fn with_value_blocks(mut self, d: Matrix, e: Matrix, f: Matrix) -> Result<Self> {
        self.d = d;
        self.e = e;
        self.f = f;
        let s = self;
        TransformerParams::new(s.b, s.c, s.d, s.e, s.f, s.u, s.general)
    }

    pub fn with_general(self, general: GeneralBlocks) -> Result<Self> {
        TransformerParams::new(
            self.b,
            self.c,
            self.d,
            self.e,
            self.f,
            self.u,
            Some(general),
        )
    }

    pub fn d_x(&self) -> usize {
        self.b.nrows()
    }
    pub fn d_y(&self) -> usize {
        self.u.nrows()
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn c(&self) -> &Matrix {
        &self.c
    }
    pub fn d(&self) -> &Matrix {
        &self.d
    }
    pub fn e(&self) -> &Matrix {
        &self.e
    }
    pub fn f(&self) -> &Matrix {
        &self.f
    }
    pub fn u(&self) -> &Matrix {
        &self.u
    }
    pub fn general(&self) -> Option<&GeneralBlocks> {
        self.general.as_ref()
    }

    pub fn is_sparse(&self) -> bool {
        self.general.is_none()
    }

    /// `BᵀC`, the score map on token inputs.
    pub fn score_map(&self) -> Matrix {
        self.b.transpose() * &self.c
    }

    fn block(tl: &Matrix, tr: &Matrix, bl: &Matrix, br: &Matrix) -> Matrix {
        let (r1, c1) = tl.shape();
        let (r2, c2) = br.shape();
        let mut m = Matrix::zeros(r1 + r2, c1 + c2);
        m.view_mut((0, 0), (r1, c1)).copy_from(tl);
        m.view_mut((0, c1), (r1, c2)).copy_from(tr);
        m.view_mut((r1, 0), (r2, c1)).copy_from(bl);
        m.view_mut((r1, c1), (r2, c2)).copy_from(br);
        m
    }

    /// Full `Q` in sparse mode; `None` when only `QᵀK` is specified.
    pub fn q(&self) -> Option<Matrix> {
        self.is_sparse().then(|| {
            let (dx, dy) = (self.d_x(), self.d_y());
            Self::block(&self.b, &Matrix::zeros(dx, dy), &Matrix::zeros(dy, dx), &Matrix::zeros(dy, dy))
        })
    }

    pub fn k(&self) -> Option<Matrix> {
        self.is_sparse().then(|| {
            let (dx, dy) = (self.d_x(), self.d_y());
            Self::block(&self.c, &Matrix::zeros(dx, dy), &Matrix::zeros(dy, dx), &Matrix::zeros(dy, dy))
        })
    }

    pub fn v(&self) -> Matrix {
        Self::block(&self.d, &self.e, &self.f, &self.u)
    }

    /// `QᵀK` as a full matrix.
    pub fn qk(&self) -> Matrix {
        match &self.general {
            Some(g) => Self::block(&g.o11, &g.o12, &g.o21, &g.o22),
            None => {
                let (dx, dy) = (self.d_x(), self.d_y());
                Self::block(
                    &self.score_map(),
                    &Matrix::zeros(dx, dy),
                    &Matrix::zeros(dy, dx),
                    &Matrix::zeros(dy, dy),
                )
            }
        }
    }
}

/// Context tokens plus a query; the query's `y` slot is structurally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InputAssembly {
    x: Matrix,
    y: Matrix,
    query: Vector,
}

impl InputAssembly {
    /// `query_x` is the raw query; the trailing 1 of `x̃` is appended here.
    pub fn new(x: Matrix, y: Matrix, query_x: &[f64]) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(Error::dim(format!(
                "X has {} columns but Y has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() != query_x.len() + 1 {
            return Err(Error::dim(format!(
                "X has {} rows; the query needs {} entries before the appended 1",
                x.nrows(),
                x.nrows().saturating_sub(1)
            )));
        }
        let mut q = query_x.to_vec();
        q.push(1.0);
        Ok(InputAssembly {
            x,
            y,
            query: Vector::from_vec(q),
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }
    pub fn y(&self) -> &Matrix {
        &self.y
    }
    /// The augmented query `x̃`.
    pub fn query(&self) -> &Vector {
        &self.query
    }
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn z(&self) -> Matrix {
        let (dx, dy, n) = (self.x.nrows(), self.y.nrows(), self.n());
        let mut z = Matrix::zeros(dx + dy, n + 1);
        z.view_mut((0, 0), (dx, n)).copy_from(&self.x);
        z.view_mut((dx, 0), (dy, n)).copy_from(&self.y);
        z.view_mut((0, n), (dx, 1)).copy_from(&self.query);
        z
    }

    /// Reorders the context columns jointly.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("perm", "not a permutation of the context"));
        }
        let x = Matrix::from_fn(self.x.nrows(), n, |r, c| self.x[(r, perm[c])]);
        let y = Matrix::from_fn(self.y.nrows(), n, |r, c| self.y[(r, perm[c])]);
        Ok(InputAssembly {
            x,
            y,
            query: self.query.clone(),
        })
    }
}

fn activate_column(act: &ActivationKind, s: &[f64]) -> Vec<f64> {
    match act {
        ActivationKind::Softmax => softmax(s),
        _ => act.apply(s),
    }
}

/// `σ` applied to a score matrix: entrywise, or softmax down each column.
pub fn activate_scores(act: &ActivationKind, scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for j in 0..scores.ncols() {
        let col: Vec<f64> = scores.column(j).iter().copied().collect();
        for (i, v) in activate_column(act, &col).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

pub fn attention_forward(tp: &TransformerParams, z: &Matrix, act: &ActivationKind) -> Result<Matrix> {
    let d = tp.d_x() + tp.d_y();
    if z.nrows() != d {
        return Err(Error::dim(format!("Z has {} rows, expected {d}", z.nrows())));
    }
    if z.ncols() < 2 {
        return Err(Error::invalid("context", "empty context (n = 0)"));
    }
    let n = z.ncols() - 1;
    let scores = match (tp.q(), tp.k()) {
        (Some(q), Some(k)) => (&q * z).transpose() * (&k * z),
        _ => z.transpose() * tp.qk() * z,
    };
    let sig = activate_scores(act, &scores);
    let mut masked = sig;
    masked.row_mut(n).fill(0.0);
    let out = tp.v() * z * masked;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite attention output".into()));
    }
    Ok(out)
}

/// Whether the readout evaluates only the query column or the whole attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadoutPath {
    #[default]
    QueryColumn,
    FullMatrix,
}

fn check_assembly(tp: &TransformerParams, asm: &InputAssembly) -> Result<()> {
    if asm.x.nrows() != tp.d_x() || asm.y.nrows() != tp.d_y() {
        return Err(Error::dim(format!(
            "assembly is ({}+{}) rows, parameters expect ({}+{})",
            asm.x.nrows(),
            asm.y.nrows(),
            tp.d_x(),
            tp.d_y()
        )));
    }
    if asm.n() == 0 {
        return Err(Error::invalid("context", "empty context (n = 0)"));
    }
    Ok(())
}

pub fn transformer_readout(
    tp: &TransformerParams,
    asm: &InputAssembly,
    act: &ActivationKind,
) -> Result<Vector> {
    transformer_readout_with(tp, asm, act, ReadoutPath::QueryColumn)
}

pub fn transformer_readout_with(
    tp: &TransformerParams,
    asm: &InputAssembly,
    act: &ActivationKind,
    path: ReadoutPath,
) -> Result<Vector> {
    check_assembly(tp, asm)?;
    let (dx, dy, n) = (tp.d_x(), tp.d_y(), asm.n());
    match path {
        ReadoutPath::FullMatrix => {
            let z = asm.z();
            let attn = attention_forward(tp, &z, act)?;
            let res = z + attn;
            Ok(res.view((dx, n), (dy, 1)).into_owned().column(0).into_owned())
        }
        ReadoutPath::QueryColumn => {
            let z = asm.z();
            let zq = z.column(n).into_owned();
            let scores: Vec<f64> = (z.transpose() * (tp.qk() * &zq)).iter().copied().collect();
            let sig = activate_column(act, &scores);
            // y rows of V Z restricted to the context: F X + U Y.
            let vy = tp.f() * asm.x() + tp.u() * asm.y();
            let w = Vector::from_iterator(n, sig.into_iter().take(n));
            let out = vy * w;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite readout".into()));
            }
            Ok(out)
        }
    }
}

/// `UY σ(XᵀBᵀC x̃)`; for softmax the query's own score `x̃ᵀBᵀC x̃` joins the normalizer.
pub fn simplified_readout(
    tp: &TransformerParams,
    asm: &InputAssembly,
    act: &ActivationKind,
) -> Result<Vector> {
    check_assembly(tp, asm)?;
    if !tp.is_sparse() {
        return Err(Error::Unsupported(
            "simplified readout needs the sparse partition; use transformer_readout".into(),
        ));
    }
    if tp.f().iter().any(|&v| v != 0.0) {
        return Err(Error::Unsupported("simplified readout needs F = 0".into()));
    }
    let g = tp.score_map() * asm.query();
    let s = asm.x().transpose() * &g;
    let weights: Vec<f64> = match act {
        ActivationKind::Softmax => {
            let mut stacked: Vec<f64> = s.iter().copied().collect();
            stacked.push(asm.query().dot(&g));
            let mut p = softmax(&stacked);
            p.pop();
            p
        }
        _ => act.apply(s.as_slice()),
    };
    Ok(tp.u() * (asm.y() * Vector::from_vec(weights)))
}

/// Closed form for a dense `QᵀK`: `(FX + UY) σ((XᵀO₁₁ + YᵀO₂₁) x̃)`, with
/// `x̃ᵀO₁₁x̃` in the softmax normalizer.
pub fn general_readout(
    tp: &TransformerParams,
    asm: &InputAssembly,
    act: &ActivationKind,
) -> Result<Vector> {
    check_assembly(tp, asm)?;
    let g = match tp.general() {
        Some(g) => g.clone(),
        None => GeneralBlocks {
            o11: tp.score_map(),
            o12: Matrix::zeros(tp.d_x(), tp.d_y()),
            o21: Matrix::zeros(tp.d_y(), tp.d_x()),
            o22: Matrix::zeros(tp.d_y(), tp.d_y()),
        },
    };
    let xq = asm.query();
    let s = (asm.x().transpose() * &g.o11 + asm.y().transpose() * &g.o21) * xq;
    let weights: Vec<f64> = match act {
        ActivationKind::Softmax => {
            let mut stacked: Vec<f64> = s.iter().copied().collect();
            stacked.push(xq.dot(&(&g.o11 * xq)));
            let mut p = softmax(&stacked);
            p.pop();
            p
        }
        _ => act.apply(s.as_slice()),
    };
    let vy = tp.f() * asm.x() + tp.u() * asm.y();
    Ok(vy * Vector::from_vec(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn near_identity(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        Matrix::identity(d, d) + random_matrix(rng, d, d) * 0.3
    }

    fn random_instance(seed: u64, dx: usize, dy: usize, n: usize) -> (TransformerParams, InputAssembly) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tp = TransformerParams::sparse(
            near_identity(&mut rng, dx),
            near_identity(&mut rng, dx),
            near_identity(&mut rng, dy),
        )
        .unwrap();
        let x = random_matrix(&mut rng, dx, n);
        let y = random_matrix(&mut rng, dy, n);
        let q: Vec<f64> = (0..dx - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (tp, InputAssembly::new(x, y, &q).unwrap())
    }

    #[test]
    fn zero_value_matrix_gives_zero_attention() {
        let tp = TransformerParams::new(
            scalar(1.0),
            scalar(1.0),
            scalar(0.0),
            scalar(0.0),
            scalar(0.0),
            scalar(1.0),
            None,
        )
        .unwrap();
        let tp = TransformerParams { u: scalar(0.0), ..tp };
        let z = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 3.0, 0.0]);
        let out = attention_forward(&tp, &z, &ActivationKind::Relu).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_scalar_blocks_hand_expansion() {
        // Z = [[2, 1], [3, 0]]; QᵀK = [[1, 0], [0, 0]] so scores are x_i x_j:
        // S = [[4, 2], [2, 1]]; masked σ(S) = [[4, 2], [0, 0]];
        // V = all ones, V Z = [[5, 1], [5, 1]]; output = [[20, 10], [20, 10]].
        let one = scalar(1.0);
        let tp = TransformerParams::new(
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one,
            None,
        )
        .unwrap();
        let z = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 3.0, 0.0]);
        let out = attention_forward(&tp, &z, &ActivationKind::Relu).unwrap();
        assert_eq!(out, Matrix::from_row_slice(2, 2, &[20.0, 10.0, 20.0, 10.0]));
    }

    #[test]
    fn empty_context_is_rejected() {
        let tp = TransformerParams::identity(2, 1);
        let z = Matrix::zeros(3, 1);
        assert!(attention_forward(&tp, &z, &ActivationKind::Relu).is_err());
        let asm = InputAssembly::new(Matrix::zeros(2, 0), Matrix::zeros(1, 0), &[0.5]).unwrap();
        assert!(transformer_readout(&tp, &asm, &ActivationKind::Relu).is_err());
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let (tp, asm) = random_instance(3, 3, 2, 7);
        let scores = asm.z().transpose() * tp.qk() * asm.z();
        let sig = activate_scores(&ActivationKind::Softmax, &scores);
        for j in 0..sig.ncols() {
            assert!((sig.column(j).sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_y_gives_zero_readout() {
        let (tp, asm) = random_instance(4, 3, 2, 5);
        let asm = InputAssembly::new(asm.x().clone(), Matrix::zeros(2, 5), &[0.1, 0.2]).unwrap();
        for act in [ActivationKind::Relu, ActivationKind::Exp] {
            let r = transformer_readout(&tp, &asm, &act).unwrap();
            assert!(r.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn query_column_path_matches_full_matrix() {
        for seed in 0..20 {
            let (tp, asm) = random_instance(seed, 3, 2, 6);
            for act in [ActivationKind::Relu, ActivationKind::Exp, ActivationKind::Softmax] {
                let a = transformer_readout_with(&tp, &asm, &act, ReadoutPath::QueryColumn).unwrap();
                let b = transformer_readout_with(&tp, &asm, &act, ReadoutPath::FullMatrix).unwrap();
                assert!((a - b).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn readout_equals_simplified_form() {
        for seed in 0..100 {
            let (tp, asm) = random_instance(seed, 3, 2, 5);
            for act in [ActivationKind::Relu, ActivationKind::Softmax] {
                let a = transformer_readout_with(&tp, &asm, &act, ReadoutPath::FullMatrix).unwrap();
                let b = simplified_readout(&tp, &asm, &act).unwrap();
                assert!((a - b).amax() <= 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn identity_blocks_reproduce_fnn() {
        use crate::fnn::{fnn_forward, FnnParams};
        let w = Matrix::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 0.8, -1.2, 0.1]);
        let b = Vector::from_row_slice(&[0.2, -0.1, 0.4]);
        let a = Matrix::from_row_slice(1, 3, &[1.5, -2.0, 0.7]);
        let fnn = FnnParams::new(a.clone(), w.clone(), b.clone(), ActivationKind::Relu).unwrap();
        let x = Matrix::from_fn(3, 3, |r, c| if r < 2 { w[(c, r)] } else { b[c] });
        let asm = InputAssembly::new(x, a, &[0.3, -0.7]).unwrap();
        let tp = TransformerParams::identity(3, 1);
        let r = simplified_readout(&tp, &asm, &ActivationKind::Relu).unwrap();
        let f = fnn_forward(&fnn, &[0.3, -0.7]).unwrap();
        assert!((r - f).amax() <= 1e-15);
    }

    #[test]
    fn softmax_single_token_hand_expansion() {
        // d_x = 2 (x, 1), d_y = 1, n = 1 with scalar-named entries.
        let bm = Matrix::from_row_slice(2, 2, &[1.2, 0.1, -0.3, 0.9]);
        let cm = Matrix::from_row_slice(2, 2, &[0.8, -0.2, 0.4, 1.1]);
        let u = 1.7;
        let tp = TransformerParams::sparse(bm.clone(), cm.clone(), scalar(u)).unwrap();
        let (x1, x2, y, q) = (0.6, -0.4, 2.5, 0.35);
        let asm = InputAssembly::new(Matrix::from_row_slice(2, 1, &[x1, x2]), scalar(y), &[q]).unwrap();
        let m = bm.transpose() * cm;
        let xt = [q, 1.0];
        let s1 = (x1 * m[(0, 0)] + x2 * m[(1, 0)]) * xt[0] + (x1 * m[(0, 1)] + x2 * m[(1, 1)]) * xt[1];
        let t = xt[0] * (m[(0, 0)] * xt[0] + m[(0, 1)] * xt[1]) + xt[1] * (m[(1, 0)] * xt[0] + m[(1, 1)] * xt[1]);
        let expected = u * y * s1.exp() / (s1.exp() + t.exp());
        let got = simplified_readout(&tp, &asm, &ActivationKind::Softmax).unwrap()[0];
        assert!((got - expected).abs() <= 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn sparse_pattern_in_general_blocks_matches_sparse_mode() {
        for seed in 0..20 {
            let (tp, asm) = random_instance(seed + 100, 3, 2, 4);
            let g = GeneralBlocks {
                o11: tp.score_map(),
                o12: Matrix::zeros(3, 2),
                o21: Matrix::zeros(2, 3),
                o22: Matrix::zeros(2, 2),
            };
            let tg = tp.clone().with_general(g).unwrap();
            for act in [ActivationKind::Relu, ActivationKind::Softmax] {
                let a = transformer_readout(&tp, &asm, &act).unwrap();
                let b = transformer_readout(&tg, &asm, &act).unwrap();
                assert!((a - b).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn general_closed_form_with_value_coupling() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            let (tp, asm) = random_instance(seed + 200, 3, 2, 5);
            let g = GeneralBlocks {
                o11: random_matrix(&mut rng, 3, 3),
                o12: random_matrix(&mut rng, 3, 2),
                o21: random_matrix(&mut rng, 2, 3),
                o22: random_matrix(&mut rng, 2, 2),
            };
            let f = random_matrix(&mut rng, 2, 3);
            let tg = tp
                .with_value_blocks(random_matrix(&mut rng, 3, 3), random_matrix(&mut rng, 3, 2), f)
                .unwrap()
                .with_general(g)
                .unwrap();
            for act in [ActivationKind::Relu, ActivationKind::Exp, ActivationKind::Softmax] {
                let direct = transformer_readout_with(&tg, &asm, &act, ReadoutPath::FullMatrix).unwrap();
                let closed = general_readout(&tg, &asm, &act).unwrap();
                assert!((direct - closed).amax() <= 1e-10);
            }
            assert!(simplified_readout(&tg, &asm, &ActivationKind::Relu).is_err());
        }
    }

    #[test]
    fn value_blocks_d_and_e_do_not_reach_the_readout() {
        let (tp, asm) = random_instance(9, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tq = tp
            .clone()
            .with_value_blocks(random_matrix(&mut rng, 3, 3), random_matrix(&mut rng, 3, 2), Matrix::zeros(2, 3))
            .unwrap();
        for act in [ActivationKind::Relu, ActivationKind::Softmax] {
            let a = transformer_readout_with(&tp, &asm, &act, ReadoutPath::FullMatrix).unwrap();
            let b = transformer_readout_with(&tq, &asm, &act, ReadoutPath::FullMatrix).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ill_conditioned_blocks_rejected() {
        let sing = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            TransformerParams::sparse(sing, Matrix::identity(2, 2), scalar(1.0)),
            Err(Error::IllConditioned { .. })
        ));
        assert!(TransformerParams::sparse(Matrix::identity(2, 2), Matrix::identity(2, 2), scalar(0.0)).is_err());
    }

    #[test]
    fn assembly_appends_one_and_zero_y_slot() {
        let asm = InputAssembly::new(Matrix::zeros(3, 2), Matrix::zeros(1, 2), &[0.5, 0.25]).unwrap();
        assert_eq!(asm.query().as_slice(), &[0.5, 0.25, 1.0]);
        let z = asm.z();
        assert_eq!(z.shape(), (4, 3));
        assert_eq!(z[(3, 2)], 0.0);
        assert!(InputAssembly::new(Matrix::zeros(3, 2), Matrix::zeros(1, 2), &[0.5]).is_err());
    }

    #[test]
    fn params_json_names_blocks() {
        let tp = TransformerParams::identity(2, 1);
        let v: serde_json::Value = serde_json::to_value(&tp).unwrap();
        for key in ["B", "C", "D", "E", "F", "U"] {
            assert!(v.get(key).is_some());
        }
        assert!(v["general"].is_null());
        let back: TransformerParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, tp);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn readout_is_permutation_invariant(seed in 0u64..1000, n in 1usize..9) {
            let (tp, asm) = random_instance(seed, 3, 2, n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let pa = asm.permuted(&perm).unwrap();
            for act in [ActivationKind::Relu, ActivationKind::Softmax] {
                let a = transformer_readout(&tp, &asm, &act).unwrap();
                let b = transformer_readout(&tp, &pa, &act).unwrap();
                prop_assert!((a - b).amax() <= 1e-12);
            }
        }

        #[test]
        fn sparse_readouts_agree(seed in 0u64..1000, n in 1usize..8) {
            let (tp, asm) = random_instance(seed, 2, 1, n);
            for act in [ActivationKind::Relu, ActivationKind::Exp, ActivationKind::Softmax] {
                let a = transformer_readout(&tp, &asm, &act).unwrap();
                let b = simplified_readout(&tp, &asm, &act).unwrap();
                let scale = 1.0 + b.amax();
                prop_assert!((a - b).amax() <= 1e-10 * scale);
            }
        }
    }
}
