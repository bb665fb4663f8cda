//! Placing a one-hidden-layer network into an attention context.
//!
//! Token `j` contributes the score `x_jᵀ S x̃` with `S = BᵀC` and the value `F x_j + U y_j`,
//! so choosing `X = S⁻ᵀ [W b]ᵀ` and `U Y = A − F X` reproduces the network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnn::{fnn_forward, softmax, ActivationKind, FnnParams};
use crate::grid::Grid;
use crate::linalg::{self, Matrix, Vector};
use crate::transformer::{transformer_readout, InputAssembly, TransformerParams};

/// Audits are evaluated on the domain grid refined by this factor.
pub const AUDIT_REFINEMENT: usize = 10;

/// Safety margin added on top of the smallest admissible shift or bias.
const MARGIN: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    #[serde(rename = "X", with = "linalg::row_major")]
    pub x: Matrix,
    #[serde(rename = "Y", with = "linalg::row_major")]
    pub y: Matrix,
    /// Normalization shift; `None` for entrywise embeddings.
    #[serde(rename = "s")]
    pub shift_s: Option<f64>,
    pub certified_sup_error: f64,
    /// Largest absolute row sum of `Y`.
    pub y_norm: f64,
    /// Uniform gap to the source measured on the refined audit grid, when a grid was given.
    pub measured_sup_error: Option<f64>,
}

impl EmbeddingResult {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn assemble(&self, query_x: &[f64]) -> Result<InputAssembly> {
        InputAssembly::new(self.x.clone(), self.y.clone(), query_x)
    }

    /// Activation the attention layer must use to realize this embedding.
    pub fn readout_activation(&self, source: &ActivationKind) -> ActivationKind {
        if self.shift_s.is_some() {
            ActivationKind::Softmax
        } else {
            source.clone()
        }
    }
}

fn require_sparse(tp: &TransformerParams) -> Result<()> {
    if !tp.is_sparse() {
        return Err(Error::Unsupported(
            "embeddings are only constructed for the sparse partition".into(),
        ));
    }
    Ok(())
}

fn check_dims(tp: &TransformerParams, fnn: &FnnParams) -> Result<()> {
    if fnn.input_dim() + 1 != tp.d_x() {
        return Err(Error::dim(format!(
            "network input dimension {} needs d_x = {}, transformer has {}",
            fnn.input_dim(),
            fnn.input_dim() + 1,
            tp.d_x()
        )));
    }
    if fnn.output_dim() != tp.d_y() {
        return Err(Error::dim(format!(
            "network output dimension {} differs from d_y = {}",
            fnn.output_dim(),
            tp.d_y()
        )));
    }
    Ok(())
}

/// Tokens for score rows `rows` (n × d_x) and target values `a` (d_y × n).
fn tokens_for(tp: &TransformerParams, rows: &Matrix, a: &Matrix) -> Result<(Matrix, Matrix)> {
    let st = tp.score_map().transpose();
    let x = linalg::solve("CᵀB", &st, &rows.transpose())?;
    let rhs = a - tp.f() * &x;
    let y = linalg::solve("U", tp.u(), &rhs)?;
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding tokens".into()));
    }
    Ok((x, y))
}

/// Exact embedding of an entrywise network; `n = k`.
pub fn embed_fnn(tp: &TransformerParams, fnn: &FnnParams) -> Result<EmbeddingResult> {
    require_sparse(tp)?;
    check_dims(tp, fnn)?;
    if !fnn.activation().is_elementwise() {
        return Err(Error::Unsupported(
            "exact embedding needs an entrywise activation; use embed_softmax_fnn".into(),
        ));
    }
    if fnn.k() == 0 {
        return Err(Error::invalid("k", "cannot embed a network with no neurons"));
    }
    let (x, y) = tokens_for(tp, &fnn.augmented_rows(), fnn.a())?;
    let y_norm = linalg::matrix_inf_norm(&y);
    Ok(EmbeddingResult {
        x,
        y,
        shift_s: None,
        certified_sup_error: 0.0,
        y_norm,
        measured_sup_error: None,
    })
}

/// Recovers `(A, W, b)` from tokens: `[W b] = (Sᵀ X)ᵀ`, `A = F X + U Y`.
pub fn extract_fnn(
    tp: &TransformerParams,
    x: &Matrix,
    y: &Matrix,
    activation: ActivationKind,
) -> Result<FnnParams> {
    require_sparse(tp)?;
    let rows = (tp.score_map().transpose() * x).transpose();
    let d = rows.ncols() - 1;
    let w = rows.columns(0, d).into_owned();
    let b = rows.column(d).into_owned();
    let a = tp.f() * x + tp.u() * y;
    FnnParams::new(a, w, b, activation)
}

/// Uniform gap between the attention readout of `(x, y)` and `target` over `points`.
pub fn embedding_gap(
    tp: &TransformerParams,
    emb: &EmbeddingResult,
    target: &FnnParams,
    points: &[Vec<f64>],
) -> Result<f64> {
    let act = emb.readout_activation(target.activation());
    let mut worst = 0.0_f64;
    for p in points {
        let asm = emb.assemble(p)?;
        let got = transformer_readout(tp, &asm, &act)?;
        let want = fnn_forward(target, p)?;
        worst = worst.max(linalg::max_abs_diff(got.as_slice(), want.as_slice()));
    }
    Ok(worst)
}

fn sup_output(fnn: &FnnParams, points: &[Vec<f64>]) -> Result<f64> {
    let mut m = 0.0_f64;
    for p in points {
        m = m.max(linalg::inf_norm(fnn_forward(fnn, p)?.as_slice()));
    }
    Ok(m)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", "must be positive and finite"));
    }
    Ok(())
}

fn check_grid(fnn: &FnnParams, grid: &Grid) -> Result<()> {
    if grid.dim() != fnn.input_dim() {
        return Err(Error::dim(format!(
            "grid dimension {} differs from network input dimension {}",
            grid.dim(),
            fnn.input_dim()
        )));
    }
    Ok(())
}

/// A softmax network with one extra silent neuron, close to an exp network.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLift {
    pub fnn: FnnParams,
    /// `max ‖src‖ · max E/(1+E)` on the audit grid, `E = Σ e^{w′ᵢ·x+b′ᵢ}`.
    pub certified_sup_error: f64,
}

/// Rewrites `Σ aᵢ e^{wᵢ·x+bᵢ}` as a `(k+1)`-neuron softmax network within `epsilon` on `grid`.
pub fn exp_to_softmax_fnn(src: &FnnParams, grid: &Grid, epsilon: f64) -> Result<SoftmaxLift> {
    check_epsilon(epsilon)?;
    check_grid(src, grid)?;
    if *src.activation() != ActivationKind::Exp {
        return Err(Error::invalid("activation", "source network must use exp"));
    }
    let audit = grid.refined(AUDIT_REFINEMENT);
    let pts = audit.points();
    let k = src.k();
    let m_src = sup_output(src, pts)?;
    let (d, dy) = (src.input_dim(), src.output_dim());
    let mut w = Matrix::zeros(k + 1, d);
    let mut b = Vector::zeros(k + 1);
    let mut a = Matrix::zeros(dy, k + 1);
    if k > 0 {
        let per_neuron = (epsilon / (2.0 * k as f64 * (1.0 + m_src))).ln() - MARGIN;
        for i in 0..k {
            let wi = src.w().row(i);
            let top = pts
                .iter()
                .map(|p| p.iter().enumerate().map(|(c, v)| wi[c] * v).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let bi = per_neuron - top;
            let scale = (src.b()[i] - bi).exp();
            for c in 0..d {
                w[(i, c)] = wi[c];
            }
            b[i] = bi;
            for o in 0..dy {
                a[(o, i)] = src.a()[(o, i)] * scale;
            }
            if !(bi.is_finite() && scale.is_finite()) || a.column(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "epsilon = {epsilon:e} puts neuron {i}'s lifted bias {bi:e} out of floating-point range"
                )));
            }
        }
    }
    let fnn = FnnParams::new(a, w, b, ActivationKind::Softmax)?;
    let mut worst_e = 0.0_f64;
    for p in pts {
        let z = fnn.pre_activations(p);
        let e: f64 = z[..k].iter().map(|v| v.exp()).sum();
        worst_e = worst_e.max(e / (1.0 + e));
    }
    Ok(SoftmaxLift {
        fnn,
        certified_sup_error: m_src * worst_e,
    })
}

/// Softmax embedding with an explicit shift `s`; `fnn` must be a softmax network.
pub fn embed_softmax_fnn_with_shift(
    tp: &TransformerParams,
    fnn: &FnnParams,
    s: f64,
) -> Result<EmbeddingResult> {
    require_sparse(tp)?;
    check_dims(tp, fnn)?;
    if *fnn.activation() != ActivationKind::Softmax {
        return Err(Error::invalid("activation", "explicit shifts apply to softmax networks"));
    }
    if !s.is_finite() {
        return Err(Error::Numerical("normalization shift is not finite".into()));
    }
    let mut rows = fnn.augmented_rows();
    let last = rows.ncols() - 1;
    for i in 0..rows.nrows() {
        rows[(i, last)] += s;
    }
    let (x, y) = tokens_for(tp, &rows, fnn.a())?;
    let y_norm = linalg::matrix_inf_norm(&y);
    Ok(EmbeddingResult {
        x,
        y,
        shift_s: Some(s),
        certified_sup_error: f64::NAN,
        y_norm,
        measured_sup_error: None,
    })
}

/// `max ‖N‖ · max r/(1+r)` with `r = e^{q−s}/D`, `q = x̃ᵀSx̃`, `D = Σ e^{wᵢ·x+bᵢ}`.
fn shift_bound(tp: &TransformerParams, fnn: &FnnParams, s: f64, pts: &[Vec<f64>], m_n: f64) -> f64 {
    let sm = tp.score_map();
    let mut worst = 0.0_f64;
    for p in pts {
        let log_r = query_score(&sm, p) - s - log_sum_exp(&fnn.pre_activations(p));
        let r = log_r.exp();
        worst = worst.max(if r.is_finite() { r / (1.0 + r) } else { 1.0 });
    }
    m_n * worst
}

fn query_score(sm: &Matrix, p: &[f64]) -> f64 {
    let mut xt = p.to_vec();
    xt.push(1.0);
    let xt = Vector::from_vec(xt);
    xt.dot(&(sm * &xt))
}

/// Smallest shift meeting `e^{q−s}/D < ε/(2(1+M))` on the audit points, plus the margin.
fn required_shift(
    tp: &TransformerParams,
    fnn: &FnnParams,
    pts: &[Vec<f64>],
    m_n: f64,
    epsilon: f64,
) -> f64 {
    let sm = tp.score_map();
    let top = pts
        .iter()
        .map(|p| query_score(&sm, p) - log_sum_exp(&fnn.pre_activations(p)))
        .fold(f64::NEG_INFINITY, f64::max);
    top - (epsilon / (2.0 * (1.0 + m_n))).ln() + MARGIN
}

fn shift_precision_check(s: f64, fnn: &FnnParams, m_n: f64, epsilon: f64) -> Result<()> {
    let top_bias = fnn.b().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    // Rounding `b + s` perturbs each score by about ulp(s); the output moves by roughly M·ulp.
    let drift = 4.0 * m_n.max(1.0) * (s.abs() + top_bias) * f64::EPSILON;
    if !s.is_finite() || drift > 0.1 * epsilon {
        return Err(Error::Numerical(format!(
            "required shift s = {s:e} exceeds floating-point range for epsilon = {epsilon:e}"
        )));
    }
    Ok(())
}

/// Embedding into softmax attention.
///
/// A softmax source keeps `n = k`: the query's own score plays the role of the extra
/// all-zero neuron. An exp source is first lifted, spending half of `epsilon` there,
/// and its silent neuron becomes one extra token, so `n = k + 1`.
pub fn embed_softmax_fnn(
    tp: &TransformerParams,
    fnn: &FnnParams,
    grid: &Grid,
    epsilon: f64,
) -> Result<EmbeddingResult> {
    require_sparse(tp)?;
    check_dims(tp, fnn)?;
    check_epsilon(epsilon)?;
    check_grid(fnn, grid)?;
    let (target, lift_bound, budget) = match fnn.activation() {
        ActivationKind::Softmax => (fnn.clone(), 0.0, epsilon),
        ActivationKind::Exp => {
            let lift = exp_to_softmax_fnn(fnn, grid, epsilon / 2.0)?;
            (lift.fnn, lift.certified_sup_error, epsilon / 2.0)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "softmax embedding needs a softmax or exp network, got {}",
                other.name()
            )))
        }
    };
    let audit = grid.refined(AUDIT_REFINEMENT);
    let pts = audit.points();
    let m_n = sup_output(&target, pts)?;
    let s = required_shift(tp, &target, pts, m_n, budget);
    shift_precision_check(s, &target, m_n, budget)?;
    let mut emb = embed_softmax_fnn_with_shift(tp, &target, s)?;
    emb.certified_sup_error = lift_bound + shift_bound(tp, &target, s, pts, m_n);
    if emb.certified_sup_error > epsilon {
        return Err(Error::Budget {
            stage: "softmax embedding".into(),
            achieved: emb.certified_sup_error,
            budget: epsilon,
        });
    }
    emb.measured_sup_error = Some(embedding_gap(tp, &emb, fnn, pts)?);
    Ok(emb)
}

/// Softmax-network output from the shifted scores alone, used by tests as an oracle.
#[doc(hidden)]
pub fn shifted_softmax_value(fnn: &FnnParams, query_score: f64, s: f64, x: &[f64]) -> Vec<f64> {
    let mut z: Vec<f64> = fnn.pre_activations(x).iter().map(|v| v + s).collect();
    z.push(query_score);
    let mut p = softmax(&z);
    p.pop();
    (0..fnn.output_dim())
        .map(|o| (0..fnn.k()).map(|i| fnn.a()[(o, i)] * p[i]).sum())
        .collect()
}
