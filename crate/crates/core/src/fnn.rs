//! One-hidden-layer networks `A σ(W x + b)` and the softmax form
//! `Σ aᵢ e^{wᵢ·x+bᵢ} / Σ e^{wⱼ·x+bⱼ}`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// A scalar function applied entrywise, identified by name for equality and reports.
#[derive(Clone)]
pub struct CustomActivation {
    name: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CustomActivation {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomActivation {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Clone)]
pub enum ActivationKind {
    Relu,
    Exp,
    /// Normalized over the hidden units (FNN) or over a score column (attention).
    Softmax,
    Custom(CustomActivation),
}

impl ActivationKind {
    pub fn name(&self) -> &str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Exp => "exp",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Custom(c) => c.name(),
        }
    }

    pub fn is_elementwise(&self) -> bool {
        !matches!(self, ActivationKind::Softmax)
    }

    /// Entrywise application; `None` for softmax.
    pub fn scalar(&self, z: f64) -> Option<f64> {
        match self {
            ActivationKind::Relu => Some(z.max(0.0)),
            ActivationKind::Exp => Some(z.exp()),
            ActivationKind::Softmax => None,
            ActivationKind::Custom(c) => Some((c.f)(z)),
        }
    }

    /// Applies the activation to a vector of pre-activations.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::Softmax => softmax(z),
            _ => z.iter().map(|&v| self.scalar(v).unwrap()).collect(),
        }
    }

    /// Lipschitz constant on `[lo, hi]`; numeric for custom activations.
    pub fn lipschitz_on(&self, lo: f64, hi: f64) -> Result<f64> {
        match self {
            ActivationKind::Relu => Ok(1.0),
            ActivationKind::Exp => Ok(hi.exp()),
            ActivationKind::Softmax => Err(Error::Unsupported(
                "softmax has no entrywise Lipschitz constant".into(),
            )),
            ActivationKind::Custom(c) => {
                let n = 4096;
                let h = (hi - lo) / n as f64;
                if h <= 0.0 {
                    return Ok(0.0);
                }
                let mut best = 0.0_f64;
                let mut prev = (c.f)(lo);
                for i in 1..=n {
                    let cur = (c.f)(lo + h * i as f64);
                    best = best.max((cur - prev).abs() / h);
                    prev = cur;
                }
                Ok(best)
            }
        }
    }
}

impl fmt::Debug for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl PartialEq for ActivationKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ActivationKind::Custom(a), ActivationKind::Custom(b)) => {
                a.name == b.name && Arc::ptr_eq(&a.f, &b.f)
            }
            (a, b) => std::mem::discriminant(a) == std::mem::discriminant(b),
        }
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ActivationKind::Custom(c) => Err(serde::ser::Error::custom(format!(
                "custom activation `{}` cannot be serialized",
                c.name
            ))),
            a => s.serialize_str(a.name()),
        }
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "exp" => Ok(ActivationKind::Exp),
            "softmax" => Ok(ActivationKind::Softmax),
            other => Err(Error::invalid(
                "activation",
                format!("unknown activation `{other}` (expected relu, exp or softmax)"),
            )),
        }
    }
}

/// Log-sum-exp shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnParams {
    #[serde(rename = "A", with = "linalg::row_major")]
    a: Matrix,
    #[serde(rename = "W", with = "linalg::row_major")]
    w: Matrix,
    #[serde(with = "linalg::vector")]
    b: Vector,
    activation: ActivationKind,
}

impl FnnParams {
    /// `a`: d_y × k, `w`: k × d_in, `b`: k.
    pub fn new(a: Matrix, w: Matrix, b: Vector, activation: ActivationKind) -> Result<Self> {
        let p = FnnParams {
            a,
            w,
            b,
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.w.nrows();
        if self.a.ncols() != k || self.b.len() != k {
            return Err(Error::dim(format!(
                "A has {} columns, W has {} rows, b has {} entries",
                self.a.ncols(),
                k,
                self.b.len()
            )));
        }
        if self.a.nrows() == 0 || self.w.ncols() == 0 {
            return Err(Error::dim("output and input dimensions must be positive"));
        }
        if k == 0 && !self.activation.is_elementwise() {
            return Err(Error::invalid("k", "softmax network needs at least one neuron"));
        }
        let finite = self.a.iter().chain(self.w.iter()).chain(self.b.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fnn", "non-finite parameter"));
        }
        Ok(())
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn w(&self) -> &Matrix {
        &self.w
    }
    pub fn b(&self) -> &Vector {
        &self.b
    }
    pub fn activation(&self) -> &ActivationKind {
        &self.activation
    }
    pub fn k(&self) -> usize {
        self.w.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    /// The k × (d_in + 1) matrix `[W b]` whose rows act on `x̃ = (x, 1)`.
    pub fn augmented_rows(&self) -> Matrix {
        let (k, d) = (self.k(), self.input_dim());
        Matrix::from_fn(k, d + 1, |i, j| if j < d { self.w[(i, j)] } else { self.b[i] })
    }

    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|i| {
                let mut z = self.b[i];
                for (j, xj) in x.iter().enumerate() {
                    z += self.w[(i, j)] * xj;
                }
                z
            })
            .collect()
    }

    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.activation.apply(&self.pre_activations(x))
    }

    pub fn with_activation(&self, activation: ActivationKind) -> Result<Self> {
        FnnParams::new(self.a.clone(), self.w.clone(), self.b.clone(), activation)
    }
}

pub fn fnn_forward(params: &FnnParams, x: &[f64]) -> Result<Vector> {
    if x.len() != params.input_dim() {
        return Err(Error::dim(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let h = params.hidden(x);
    let out = params.a() * Vector::from_vec(h);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite network output".into()));
    }
    Ok(out)
}

/// Largest uniform-norm output over the points.
pub fn sup_norm_on(params: &FnnParams, points: &[Vec<f64>]) -> Result<f64> {
    let mut m = 0.0_f64;
    for x in points {
        m = m.max(fnn_forward(params, x)?.amax());
    }
    Ok(m)
}

/// max over the grid of `‖N₁(x) − N₂(x)‖∞`.
pub fn perturbation_gap(p1: &FnnParams, p2: &FnnParams, grid: &[Vec<f64>]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "empty grid"));
    }
    if p1.k() != p2.k()
        || p1.input_dim() != p2.input_dim()
        || p1.output_dim() != p2.output_dim()
        || p1.activation() != p2.activation()
    {
        return Err(Error::dim("networks differ in shape or activation"));
    }
    let mut gap = 0.0_f64;
    for x in grid {
        let d = fnn_forward(p1, x)? - fnn_forward(p2, x)?;
        gap = gap.max(d.amax());
    }
    Ok(gap)
}

/// The perturbation radius `ε / (2 M₁ k)` below which any parameter change keeps
/// the output within `ε`. `m1` bounds `|σ(w̃ᵢ·x + b̃ᵢ)|` over the grid.
pub fn perturbation_delta(epsilon: f64, m1: f64, k: usize) -> f64 {
    epsilon / (2.0 * m1 * k as f64)
}

/// How hidden biases are drawn by [`fit_fnn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSampling {
    /// `bᵢ ~ U[-scale, scale]`.
    Uniform { scale: f64 },
    /// `bᵢ = -wᵢ·cᵢ` with `cᵢ` uniform in the bounding box of the inputs, so every
    /// hyperplane `wᵢ·x + bᵢ = 0` crosses the data.
    DataCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Rows of `W` are drawn from `U[-weight_scale, weight_scale]^{d_in}`.
    pub weight_scale: f64,
    pub bias: BiasSampling,
    /// Ridge added to the normal equations, relative to the largest squared
    /// singular value of the feature matrix.
    pub ridge: f64,
    /// Full-batch Adam steps on the mean squared error over `W` and `b`
    /// (entrywise activations only); output weights are re-solved afterwards.
    pub refine_iters: usize,
    pub learning_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weight_scale: 1.0,
            bias: BiasSampling::Uniform { scale: 1.0 },
            ridge: 1e-12,
            refine_iters: 0,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub params: FnnParams,
    /// Uniform-norm error over the samples.
    pub sup_error: f64,
    pub rms_error: f64,
    pub ridge: f64,
    /// Set when the feature matrix has relative singular values below `1e-10`.
    pub rank_deficient: bool,
}

pub type Sample = (Vec<f64>, Vec<f64>);

/// Random-feature hidden layer followed by least squares for the output weights.
pub fn fit_fnn(
    samples: &[Sample],
    k: usize,
    activation: &ActivationKind,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult> {
    if samples.is_empty() || samples.len() < k {
        return Err(Error::invalid(
            "samples",
            format!("need at least k = {k} samples, got {}", samples.len()),
        ));
    }
    if k == 0 {
        return Err(Error::invalid("k", "at least one neuron required"));
    }
    let d_in = samples[0].0.len();
    let d_y = samples[0].1.len();
    if d_in == 0 || d_y == 0 || samples.iter().any(|(x, y)| x.len() != d_in || y.len() != d_y) {
        return Err(Error::dim("samples must share input and output dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = opts.weight_scale;
    let w = Matrix::from_fn(k, d_in, |_, _| rng.gen_range(-s..=s));
    let b = match opts.bias {
        BiasSampling::Uniform { scale } => Vector::from_fn(k, |_, _| rng.gen_range(-scale..=scale)),
        BiasSampling::DataCentered => {
            let (lo, hi) = input_bounds(samples);
            Vector::from_fn(k, |i, _| {
                let mut acc = 0.0;
                for c in 0..d_in {
                    let ci = if hi[c] > lo[c] { rng.gen_range(lo[c]..=hi[c]) } else { lo[c] };
                    acc -= w[(i, c)] * ci;
                }
                acc
            })
        }
    };
    let mut params = FnnParams::new(Matrix::zeros(d_y, k), w, b, activation.clone())?;
    let (mut a, mut ridge, mut deficient) = solve_output_weights(samples, &params, opts.ridge)?;
    params.a = a;
    if opts.refine_iters > 0 {
        if !activation.is_elementwise() {
            return Err(Error::Unsupported("descent refinement needs an entrywise activation".into()));
        }
        refine(samples, &mut params, opts);
        (a, ridge, deficient) = solve_output_weights(samples, &params, opts.ridge)?;
        params.a = a;
    }
    let (sup_error, rms_error) = sample_errors(samples, &params)?;
    Ok(FitResult {
        params,
        sup_error,
        rms_error,
        ridge,
        rank_deficient: deficient,
    })
}

fn input_bounds(samples: &[Sample]) -> (Vec<f64>, Vec<f64>) {
    let d = samples[0].0.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (x, _) in samples {
        for c in 0..d {
            lo[c] = lo[c].min(x[c]);
            hi[c] = hi[c].max(x[c]);
        }
    }
    (lo, hi)
}

fn feature_matrix(samples: &[Sample], params: &FnnParams) -> Matrix {
    let k = params.k();
    let mut h = Matrix::zeros(samples.len(), k);
    for (r, (x, _)) in samples.iter().enumerate() {
        for (c, v) in params.hidden(x).into_iter().enumerate() {
            h[(r, c)] = v;
        }
    }
    h
}

fn solve_output_weights(
    samples: &[Sample],
    params: &FnnParams,
    ridge_rel: f64,
) -> Result<(Matrix, f64, bool)> {
    let h = feature_matrix(samples, params);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite hidden features".into()));
    }
    let d_y = samples[0].1.len();
    let f = Matrix::from_fn(samples.len(), d_y, |r, c| samples[r].1[c]);
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let sv = &svd.singular_values;
    let smax = sv.max();
    let ridge = ridge_rel * smax * smax;
    let deficient = smax == 0.0 || sv.min() / smax < 1e-10;
    // A^T = V diag(s / (s^2 + ridge)) U^T F
    let utf = u.transpose() * f;
    let mut scaled = utf;
    for i in 0..sv.len() {
        let s = sv[i];
        let g = if s * s + ridge > 0.0 { s / (s * s + ridge) } else { 0.0 };
        scaled.row_mut(i).scale_mut(g);
    }
    let at = vt.transpose() * scaled;
    Ok((at.transpose(), ridge, deficient))
}

fn sample_errors(samples: &[Sample], params: &FnnParams) -> Result<(f64, f64)> {
    let mut sup = 0.0_f64;
    let mut sq = 0.0;
    for (x, y) in samples {
        let out = fnn_forward(params, x)?;
        for (o, t) in out.iter().zip(y) {
            let e = o - t;
            sup = sup.max(e.abs());
            sq += e * e;
        }
    }
    let count = (samples.len() * samples[0].1.len()) as f64;
    Ok((sup, (sq / count).sqrt()))
}

fn activation_derivative(act: &ActivationKind, z: f64) -> f64 {
    match act {
        ActivationKind::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Exp => z.exp(),
        ActivationKind::Softmax => unreachable!("refinement is entrywise only"),
        ActivationKind::Custom(c) => {
            let h = 1e-6 * (1.0 + z.abs());
            ((c.f)(z + h) - (c.f)(z - h)) / (2.0 * h)
        }
    }
}

fn refine(samples: &[Sample], params: &mut FnnParams, opts: &FitOptions) {
    let (k, d) = (params.k(), params.input_dim());
    let m = samples.len() as f64;
    let n_par = k * (d + 1);
    let (mut m1, mut m2) = (vec![0.0; n_par], vec![0.0; n_par]);
    let (beta1, beta2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    for it in 1..=opts.refine_iters {
        let mut grad = vec![0.0; n_par];
        for (x, y) in samples {
            let z = params.pre_activations(x);
            let hv: Vec<f64> = z.iter().map(|&v| params.activation.scalar(v).unwrap()).collect();
            let out = &params.a * Vector::from_vec(hv);
            for i in 0..k {
                let mut back = 0.0;
                for r in 0..out.len() {
                    back += (out[r] - y[r]) * params.a[(r, i)];
                }
                let g = 2.0 * back * activation_derivative(&params.activation, z[i]) / m;
                for c in 0..d {
                    grad[i * (d + 1) + c] += g * x[c];
                }
                grad[i * (d + 1) + d] += g;
            }
        }
        let t = it as i32;
        for p in 0..n_par {
            m1[p] = beta1 * m1[p] + (1.0 - beta1) * grad[p];
            m2[p] = beta2 * m2[p] + (1.0 - beta2) * grad[p] * grad[p];
            let mh = m1[p] / (1.0 - beta1.powi(t));
            let vh = m2[p] / (1.0 - beta2.powi(t));
            let step = opts.learning_rate * mh / (vh.sqrt() + eps);
            let (i, c) = (p / (d + 1), p % (d + 1));
            if c < d {
                params.w[(i, c)] -= step;
            } else {
                params.b[i] -= step;
            }
        }
        if let Ok((a, _, _)) = solve_output_weights(samples, params, opts.ridge) {
            params.a = a;
        }
    }
}
