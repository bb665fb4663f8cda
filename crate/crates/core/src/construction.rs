//! Building finite-vocabulary contexts whose readout approximates a target.
//!
//! The pipeline fits a one-hidden-layer network, rounds every output coefficient to
//! `q√2 ± l`, and realizes each neuron's row with `q + l` context positions whose
//! mapped rows `(x + P(j))ᵀ BᵀC` fall within a tolerance of it. Other positions are
//! nulled with `y = 0`. Errors are tracked per stage in output space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ScanEvidence};
use crate::fnn::{fit_fnn, ActivationKind, BiasSampling, FitOptions, FnnParams, Sample};
use crate::grid::Grid;
use crate::kronecker::{coefficient_decompose, CoefficientDecomposition, TokenRole};
use crate::linalg::{self, Matrix, Vector};
use crate::transformer::TransformerParams;
use crate::vocab_pe::{PeScheme, VocabIndex, Vocabulary};

/// Absolute error allowances of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub fit: f64,
    pub perturb: f64,
    pub tokens: f64,
}

impl Budgets {
    pub fn even(epsilon: f64) -> Self {
        Budgets {
            fit: epsilon / 3.0,
            perturb: epsilon / 3.0,
            tokens: epsilon / 3.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.fit + self.perturb + self.tokens
    }

    fn validate(&self, epsilon: f64) -> Result<()> {
        let parts = [self.perturb, self.tokens];
        if !(self.fit >= 0.0 && parts.iter().all(|&b| b > 0.0) && self.total().is_finite()) {
            return Err(Error::invalid("budgets", "need fit ≥ 0 and positive perturb and token budgets"));
        }
        if self.total() > epsilon {
            return Err(Error::invalid(
                "budgets",
                format!("stage budgets sum to {} > epsilon = {epsilon}", self.total()),
            ));
        }
        Ok(())
    }
}

/// How the per-token row tolerance is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TolerancePolicy {
    /// Worst case: every token error aligned, `τ = ε_t / (max‖x̃‖ · L_σ · Σ|y|)`.
    Certified,
    /// Root-sum-square start `τ = ε_t / (√3 · max‖x̃‖ · L_σ · ‖y‖₂)`, halved until the
    /// token-stage error measured on the audit grid is within budget.
    Audited { max_refinements: u32 },
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        TolerancePolicy::Audited { max_refinements: 8 }
    }
}

/// Network sizes and seeds tried, in order, until the fit meets 90% of its budget.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSchedule {
    pub neurons: Vec<usize>,
    pub seeds_per_size: u64,
    pub options: FitOptions,
}

impl Default for FitSchedule {
    fn default() -> Self {
        FitSchedule {
            neurons: vec![4, 8, 12, 16, 24, 32, 48, 64],
            seeds_per_size: 3,
            options: FitOptions {
                bias: BiasSampling::DataCentered,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstructionConfig {
    pub epsilon: f64,
    /// `None` splits `epsilon` evenly.
    pub budgets: Option<Budgets>,
    pub activation: ActivationKind,
    pub fit: FitSchedule,
    pub tolerance: TolerancePolicy,
    pub q_cap: u64,
    /// Largest position the scan may reach.
    pub j_cap: u64,
    pub audit_refinement: usize,
    pub seed: u64,
}

impl ConstructionConfig {
    pub fn new(epsilon: f64, activation: ActivationKind) -> Self {
        ConstructionConfig {
            epsilon,
            budgets: None,
            activation,
            fit: FitSchedule::default(),
            tolerance: TolerancePolicy::default(),
            q_cap: 1 << 32,
            j_cap: 200_000_000,
            audit_refinement: 10,
            seed: 0,
        }
    }

    fn budgets(&self) -> Budgets {
        self.budgets.unwrap_or_else(|| Budgets::even(self.epsilon))
    }
}

/// What the context should approximate.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    /// Evaluated at the fit samples and on the audit grid.
    Function {
        f: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
        d_y: usize,
    },
    /// Used as the stage-one network directly.
    Network(&'a FnnParams),
}

impl Target<'_> {
    fn d_y(&self) -> usize {
        match self {
            Target::Function { d_y, .. } => *d_y,
            Target::Network(n) => n.output_dim(),
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = match self {
            Target::Function { f, d_y } => {
                let v = f(x);
                if v.len() != *d_y {
                    return Err(Error::dim(format!("target returned {} values, expected {d_y}", v.len())));
                }
                v
            }
            Target::Network(n) => crate::fnn::fnn_forward(n, x)?.as_slice().to_vec(),
        };
        if v.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!("target is not finite at {x:?}")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaPolicy {
    /// Smallest `λ ≥ 1` putting every row preimage in `[−1, 1]^{d_x}`.
    MinimalCube,
    Fixed(f64),
}

/// A context column's token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub position: u64,
    pub vocab_index: usize,
    pub vy_index: usize,
    pub role: TokenRole,
    pub component: usize,
    pub neuron: usize,
    pub y: Vec<f64>,
}

/// Context of length `n` stored by its non-null tokens; every other column is
/// `V_x[0] + P(j)` with `y = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTokens {
    pub n: u64,
    pub d_x: usize,
    pub d_y: usize,
    pub tokens: Vec<Token>,
}

/// Position, encoded token value and its image `x_Pᵀ BᵀC`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedRow {
    pub position: u64,
    pub token_value: Vec<f64>,
    pub row: Vec<f64>,
}

/// Largest context that [`ContextTokens::materialize`] will build.
pub const MATERIALIZE_LIMIT: u64 = 5_000_000;

impl ContextTokens {
    fn empty(d_x: usize, d_y: usize) -> Self {
        ContextTokens {
            n: 0,
            d_x,
            d_y,
            tokens: Vec::new(),
        }
    }

    fn token_at(&self, j: u64) -> Option<&Token> {
        self.tokens
            .binary_search_by_key(&j, |t| t.position)
            .ok()
            .map(|i| &self.tokens[i])
    }

    /// `(x_j + P(j), y_j)` for column `j ∈ 1..=n`.
    pub fn column(&self, j: u64, vocab: &Vocabulary, scheme: &PeScheme) -> (Vec<f64>, Vec<f64>) {
        assert!((1..=self.n).contains(&j), "column {j} outside 1..={}", self.n);
        let (vi, y) = match self.token_at(j) {
            Some(t) => (t.vocab_index, t.y.clone()),
            None => (0, vec![0.0; self.d_y]),
        };
        (encode(&vocab.vx()[vi], &scheme.value(j)), y)
    }

    /// Dense `(X, Y)` with columns in position order.
    pub fn materialize(&self, vocab: &Vocabulary, scheme: &PeScheme) -> Result<(Matrix, Matrix)> {
        if self.n > MATERIALIZE_LIMIT {
            return Err(Error::invalid(
                "n",
                format!("context of length {} exceeds the materialization limit", self.n),
            ));
        }
        let n = self.n as usize;
        let mut x = Matrix::zeros(self.d_x, n);
        let mut y = Matrix::zeros(self.d_y, n);
        for (c, (j, p)) in scheme.cursor(1).take(n).enumerate() {
            let (vi, yv) = match self.token_at(j) {
                Some(t) => (t.vocab_index, Some(&t.y)),
                None => (0, None),
            };
            for (r, v) in encode(&vocab.vx()[vi], &p).into_iter().enumerate() {
                x[(r, c)] = v;
            }
            if let Some(yv) = yv {
                for (r, v) in yv.iter().enumerate() {
                    y[(r, c)] = *v;
                }
            }
        }
        Ok((x, y))
    }

    /// Positions used by each `(component, neuron)`.
    pub fn index_sets(&self) -> BTreeMap<(usize, usize), Vec<u64>> {
        let mut out: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
        for t in &self.tokens {
            out.entry((t.component, t.neuron)).or_default().push(t.position);
        }
        out
    }
}

fn encode(x: &[f64], p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRecord {
    pub component: usize,
    pub neuron: usize,
    /// `[wᵢ bᵢ]` after any rescaling.
    pub target_row: Vec<f64>,
    /// Coefficient in `U⁻¹`-space before rounding.
    pub coefficient: f64,
    /// `max |σ(w̃ᵢ·x̃)|` on the audit grid.
    pub sigma_max: f64,
    /// Allowed coefficient error.
    pub delta: f64,
    pub witness: Option<CoefficientDecomposition>,
    /// Positions holding `√2` tokens.
    pub q_positions: Vec<u64>,
    /// Positions holding signed unit tokens.
    pub l_positions: Vec<u64>,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub component: usize,
    pub neurons: usize,
    pub fit_seed: Option<u64>,
    /// Row tolerance of the accepted scan.
    pub tolerance: f64,
    pub refinements: u32,
    pub first_position: u64,
    pub last_position: u64,
    /// Coefficient-space stage errors of this component.
    pub stage_errors: Budgets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub epsilon: f64,
    pub epsilon_budget: Budgets,
    /// Measured stage errors in output space.
    pub stage_errors: Budgets,
    pub achieved_sup_error: f64,
    pub n: u64,
    pub max_tokens_per_neuron: u64,
    pub activation: String,
    pub lambda: Option<f64>,
    pub audit_points: usize,
    pub components: Vec<ComponentRecord>,
    pub per_neuron: Vec<NeuronRecord>,
    pub context: ContextTokens,
    /// `(position, sup error)` after each token, in position order.
    pub error_vs_n: Vec<(u64, f64)>,
}

impl ConstructionReport {
    /// Attention readout of the stored context at `x`, summing only non-null tokens.
    pub fn readout(&self, tp: &TransformerParams, vocab: &Vocabulary, scheme: &PeScheme, act: &ActivationKind, x: &[f64]) -> Vector {
        let mut xt = x.to_vec();
        xt.push(1.0);
        let g = tp.score_map() * Vector::from_vec(xt);
        let mut acc = Vector::zeros(self.context.d_y);
        for t in &self.context.tokens {
            let xp = encode(&vocab.vx()[t.vocab_index], &scheme.value(t.position));
            let z: f64 = xp.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let s = act.scalar(z).expect("entrywise activation");
            for (o, v) in t.y.iter().enumerate() {
                acc[o] += v * s;
            }
        }
        tp.u() * acc
    }
}

/// Finds tokens whose mapped rows approach target rows.
pub struct PositionScanner<'a> {
    vocab: &'a Vocabulary,
    scheme: &'a PeScheme,
    index: VocabIndex,
    st: Matrix,
    st_inv: Matrix,
    inv_row_norms: Vec<f64>,
}

/// A target row with its search box in token space.
#[derive(Debug, Clone)]
pub struct ScanTarget {
    row: Vec<f64>,
    tol: f64,
    centre: Vec<f64>,
    half: Vec<f64>,
}

impl<'a> PositionScanner<'a> {
    pub fn new(vocab: &'a Vocabulary, scheme: &'a PeScheme, tp: &TransformerParams) -> Result<Self> {
        if !tp.is_sparse() {
            return Err(Error::Unsupported("construction needs the sparse partition".into()));
        }
        let d = tp.d_x();
        if vocab.d_x() != d || scheme.dim() != d {
            return Err(Error::dim(format!(
                "V_x has dimension {}, scheme {}, transformer d_x = {d}",
                vocab.d_x(),
                scheme.dim()
            )));
        }
        let st = tp.score_map().transpose();
        linalg::check_conditioning("CᵀB", &st)?;
        let st_inv = st
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("CᵀB is not invertible".into()))?;
        let inv_row_norms = (0..d).map(|r| st_inv.row(r).norm()).collect();
        Ok(PositionScanner {
            vocab,
            scheme,
            index: VocabIndex::new(vocab.vx(), None)?,
            st,
            st_inv,
            inv_row_norms,
        })
    }

    pub fn target(&self, row: &[f64], tol: f64) -> Result<ScanTarget> {
        if !(tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if row.len() != self.st.nrows() {
            return Err(Error::dim("target row length differs from d_x"));
        }
        let centre = (&self.st_inv * Vector::from_column_slice(row)).as_slice().to_vec();
        let half = self
            .inv_row_norms
            .iter()
            .zip(&centre)
            .map(|(n, c)| tol * n * (1.0 + 1e-9) + 1e-12 * c.abs().max(1e-300))
            .collect();
        Ok(ScanTarget {
            row: row.to_vec(),
            tol,
            centre,
            half,
        })
    }

    /// `(xᵢ + p)ᵀ BᵀC`.
    pub fn mapped(&self, vocab_index: usize, p: &[f64]) -> Vec<f64> {
        let xp = encode(&self.vocab.vx()[vocab_index], p);
        self.row_of(&xp)
    }

    fn row_of(&self, xp: &[f64]) -> Vec<f64> {
        (&self.st * Vector::from_column_slice(xp)).as_slice().to_vec()
    }

    pub fn mapped_row(&self, vocab_index: usize, j: u64) -> MappedRow {
        let p = self.scheme.value(j);
        let token_value = encode(&self.vocab.vx()[vocab_index], &p);
        let row = self.row_of(&token_value);
        MappedRow {
            position: j,
            token_value,
            row,
        }
    }

    /// Lowest vocabulary index valid at encoding `p`, with its distance; also the closest miss seen.
    fn match_at(&self, t: &ScanTarget, p: &[f64], scratch: &mut Scratch) -> (Option<usize>, f64) {
        let d = p.len();
        scratch.lo.clear();
        scratch.hi.clear();
        for c in 0..d {
            scratch.lo.push(t.centre[c] - t.half[c] - p[c]);
            scratch.hi.push(t.centre[c] + t.half[c] - p[c]);
        }
        self.index.in_box_into(&scratch.lo, &scratch.hi, &mut scratch.cands);
        let mut closest = f64::INFINITY;
        for &i in &scratch.cands {
            let r = self.mapped(i, p);
            let dist = r.iter().zip(&t.row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist < t.tol {
                return (Some(i), dist);
            }
            closest = closest.min(dist);
        }
        (None, closest)
    }
}

/// Positions re-examined, ending at the last one scanned, when a scan is exhausted.
const EVIDENCE_WINDOW: u64 = 1 << 20;

impl PositionScanner<'_> {
    /// Row distance to the token whose encoding lies closest to the box centre at `p`.
    fn nearest_distance(&self, t: &ScanTarget, p: &[f64]) -> f64 {
        let shifted: Vec<f64> = t.centre.iter().zip(p).map(|(c, q)| c - q).collect();
        let (i, _) = self.index.nearest(&shifted);
        let r = self.mapped(i, p);
        r.iter().zip(&t.row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Smallest [`Self::nearest_distance`] over the last scanned positions in `start..=end`.
    fn evidence_distance(&self, t: &ScanTarget, start: u64, end: u64) -> f64 {
        let from = start.max(end.saturating_sub(EVIDENCE_WINDOW - 1));
        self.scheme
            .cursor(from)
            .take_while(|(j, _)| *j <= end)
            .map(|(_, p)| self.nearest_distance(t, &p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Default)]
struct Scratch {
    lo: Vec<f64>,
    hi: Vec<f64>,
    cands: Vec<usize>,
}

/// First `j ≥ start_j` where some `xᵢ ∈ V_x` has `‖(xᵢ + P(j))ᵀBᵀC − row‖₂ < tol`;
/// positions `start_j..j` are left nulled.
pub fn scan_valid_position(
    target_row: &[f64],
    vocab: &Vocabulary,
    scheme: &PeScheme,
    tp: &TransformerParams,
    tol: f64,
    start_j: u64,
    j_cap: u64,
) -> Result<(u64, usize)> {
    let scanner = PositionScanner::new(vocab, scheme, tp)?;
    let t = scanner.target(target_row, tol)?;
    let mut scratch = Scratch::default();
    let mut best = f64::INFINITY;
    let start = start_j.max(1);
    for (j, p) in scheme.cursor(start) {
        if j > j_cap {
            break;
        }
        let (hit, miss) = scanner.match_at(&t, &p, &mut scratch);
        if let Some(i) = hit {
            return Ok((j, i));
        }
        best = best.min(miss);
    }
    Err(Error::ScanExhausted(Box::new(ScanEvidence {
        component: 0,
        neuron: 0,
        hits_found: 0,
        hits_needed: 1,
        positions_scanned: j_cap.saturating_sub(start) + 1,
        last_position: j_cap,
        tolerance: tol,
        best_distance: best.min(scanner.evidence_distance(&t, start, j_cap)),
    })))
}

/// Stage-one network for one output coordinate in `U⁻¹`-space.
#[derive(Debug, Clone)]
struct ComponentNet {
    rows: Matrix,
    coeffs: Vec<f64>,
    fit_seed: Option<u64>,
}

struct Audit {
    /// Augmented audit points `x̃`.
    xt: Vec<Vec<f64>>,
    /// Target in `U⁻¹`-space, one vector per point.
    g: Vec<Vec<f64>>,
    /// Target in output space.
    f: Vec<Vec<f64>>,
    m_x: f64,
}

fn augmented(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_over<F: Fn(usize) -> f64 + Sync + Send>(count: usize, f: F) -> f64 {
    (0..count).into_par_iter().map(f).reduce(|| 0.0, f64::max)
}

/// Values of `Σᵢ cᵢ σ(rowᵢ·x̃)` at every audit point.
fn net_values(rows: &[Vec<f64>], coeffs: &[f64], act: &ActivationKind, xt: &[Vec<f64>]) -> Vec<f64> {
    xt.par_iter()
        .map(|x| {
            rows.iter()
                .zip(coeffs)
                .filter(|(_, c)| **c != 0.0)
                .map(|(r, c)| c * act.scalar(dot(r, x)).unwrap())
                .sum()
        })
        .collect()
}

struct Shared<'a> {
    vocab: &'a Vocabulary,
    scheme: &'a PeScheme,
    tp: &'a TransformerParams,
    cfg: &'a ConstructionConfig,
    scanner: PositionScanner<'a>,
    audit: Audit,
    comp_scale: f64,
    budgets: Budgets,
}

fn check_inputs(
    target: &Target<'_>,
    grid: &Grid,
    vocab: &Vocabulary,
    tp: &TransformerParams,
    cfg: &ConstructionConfig,
) -> Result<()> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", "must be positive and finite"));
    }
    cfg.budgets().validate(cfg.epsilon)?;
    if !cfg.activation.is_elementwise() {
        return Err(Error::Unsupported(
            "constructions use an entrywise activation; softmax is not covered".into(),
        ));
    }
    if !tp.is_sparse() {
        return Err(Error::Unsupported("construction needs the sparse partition".into()));
    }
    if tp.f().iter().any(|&v| v != 0.0) {
        return Err(Error::Unsupported("construction needs F = 0".into()));
    }
    if grid.dim() + 1 != tp.d_x() {
        return Err(Error::dim(format!(
            "grid dimension {} needs d_x = {}, transformer has {}",
            grid.dim(),
            grid.dim() + 1,
            tp.d_x()
        )));
    }
    if target.d_y() != tp.d_y() || vocab.d_y() != tp.d_y() {
        return Err(Error::dim(format!(
            "target d_y = {}, V_y dimension {}, transformer d_y = {}",
            target.d_y(),
            vocab.d_y(),
            tp.d_y()
        )));
    }
    if !vocab.has_signed_units() {
        return Err(Error::invalid(
            "V_y",
            "must contain 0 and ±e_o, √2·e_o for every output coordinate",
        ));
    }
    if let Target::Network(n) = target {
        if n.activation() != &cfg.activation {
            return Err(Error::invalid("activation", "network target uses a different activation"));
        }
        if n.input_dim() + 1 != tp.d_x() {
            return Err(Error::dim("network input dimension must be d_x − 1"));
        }
    }
    if cfg.audit_refinement == 0 {
        return Err(Error::invalid("audit_refinement", "must be at least 1"));
    }
    Ok(())
}

fn prepare<'a>(
    target: &Target<'_>,
    grid: &Grid,
    vocab: &'a Vocabulary,
    scheme: &'a PeScheme,
    tp: &'a TransformerParams,
    cfg: &'a ConstructionConfig,
) -> Result<Shared<'a>> {
    check_inputs(target, grid, vocab, tp, cfg)?;
    let scanner = PositionScanner::new(vocab, scheme, tp)?;
    let audit_grid = grid.refined(cfg.audit_refinement);
    let pts = audit_grid.points();
    let f: Vec<Vec<f64>> = pts.iter().map(|p| target.eval(p)).collect::<Result<_>>()?;
    let g = to_coefficient_space(tp, &f)?;
    let xt: Vec<Vec<f64>> = pts.iter().map(|p| augmented(p)).collect();
    let m_x = xt.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max);
    let u_norm = tp.u().clone().svd(false, false).singular_values.max();
    let d_y = tp.d_y() as f64;
    Ok(Shared {
        vocab,
        scheme,
        tp,
        cfg,
        scanner,
        audit: Audit { xt, g, f, m_x },
        comp_scale: 1.0 / (d_y.sqrt() * u_norm),
        budgets: cfg.budgets(),
    })
}

fn to_coefficient_space(tp: &TransformerParams, f: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d_y = tp.d_y();
    let fm = Matrix::from_fn(d_y, f.len(), |r, c| f[c][r]);
    let g = linalg::solve("U", tp.u(), &fm)?;
    Ok((0..f.len()).map(|c| g.column(c).iter().copied().collect()).collect())
}

/// Stage one for every component.
fn stage_one(sh: &Shared<'_>, target: &Target<'_>, grid: &Grid) -> Result<Vec<ComponentNet>> {
    let d_y = sh.tp.d_y();
    match target {
        Target::Network(n) => {
            let c = linalg::solve("U", sh.tp.u(), n.a())?;
            let rows = n.augmented_rows();
            Ok((0..d_y)
                .map(|o| ComponentNet {
                    rows: rows.clone(),
                    coeffs: c.row(o).iter().copied().collect(),
                    fit_seed: None,
                })
                .collect())
        }
        Target::Function { .. } => {
            let pts = grid.points();
            let fs: Vec<Vec<f64>> = pts.iter().map(|p| target.eval(p)).collect::<Result<_>>()?;
            let gs = to_coefficient_space(sh.tp, &fs)?;
            (0..d_y).map(|o| fit_component(sh, o, pts, &gs)).collect()
        }
    }
}

fn fit_component(sh: &Shared<'_>, o: usize, pts: &[Vec<f64>], gs: &[Vec<f64>]) -> Result<ComponentNet> {
    let d_x = sh.tp.d_x();
    if sh.audit.g.iter().all(|v| v[o] == 0.0) && gs.iter().all(|v| v[o] == 0.0) {
        return Ok(ComponentNet {
            rows: Matrix::zeros(0, d_x),
            coeffs: Vec::new(),
            fit_seed: None,
        });
    }
    let budget = sh.budgets.fit * sh.comp_scale;
    let samples: Vec<Sample> = pts.iter().zip(gs).map(|(p, g)| (p.clone(), vec![g[o]])).collect();
    let mut best = f64::INFINITY;
    for &k in &sh.cfg.fit.neurons {
        if k > samples.len() {
            continue;
        }
        for s in 0..sh.cfg.fit.seeds_per_size {
            let seed = sh.cfg.seed.wrapping_mul(1_000_003).wrapping_add((o as u64) << 40 | (k as u64) << 16 | s);
            let fit = match fit_fnn(&samples, k, &sh.cfg.activation, seed, &sh.cfg.fit.options) {
                Ok(f) => f,
                Err(Error::Numerical(_)) => continue,
                Err(e) => return Err(e),
            };
            let rows = fit.params.augmented_rows();
            let coeffs: Vec<f64> = fit.params.a().row(0).iter().copied().collect();
            let row_list: Vec<Vec<f64>> = (0..k).map(|i| rows.row(i).iter().copied().collect()).collect();
            let vals = net_values(&row_list, &coeffs, &sh.cfg.activation, &sh.audit.xt);
            let err = sup_over(vals.len(), |p| (vals[p] - sh.audit.g[p][o]).abs());
            if err <= 0.9 * budget {
                return Ok(ComponentNet {
                    rows,
                    coeffs,
                    fit_seed: Some(seed),
                });
            }
            best = best.min(err);
        }
    }
    Err(Error::Budget {
        stage: format!("fit (component {o})"),
        achieved: best,
        budget,
    })
}

/// Result of steps two and three for one component.
struct ComponentBuild {
    records: Vec<NeuronRecord>,
    tokens: Vec<Token>,
    record: ComponentRecord,
}

struct Group {
    neuron: usize,
    target: ScanTarget,
    q: u64,
    l: u64,
    unit_role: TokenRole,
    q_pos: Vec<u64>,
    l_pos: Vec<u64>,
    found: Vec<(u64, usize)>,
    closest: f64,
}

impl Group {
    fn needed(&self) -> u64 {
        self.q + self.l
    }
    fn done(&self) -> bool {
        self.found.len() as u64 >= self.needed()
    }
}

fn lipschitz_bound(act: &ActivationKind, rows: &[Vec<f64>], xt: &[Vec<f64>]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in rows {
        for x in xt {
            let z = dot(r, x);
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    if rows.is_empty() {
        return Ok(0.0);
    }
    act.lipschitz_on(lo - 1.0, hi + 1.0)
}

fn build_component(sh: &Shared<'_>, o: usize, net: &ComponentNet, start_j: u64) -> Result<ComponentBuild> {
    let act = &sh.cfg.activation;
    let xt = &sh.audit.xt;
    let k = net.rows.nrows();
    let rows: Vec<Vec<f64>> = (0..k).map(|i| net.rows.row(i).iter().copied().collect()).collect();
    let b_perturb = sh.budgets.perturb * sh.comp_scale;
    let b_tokens = sh.budgets.tokens * sh.comp_scale;
    let fitted = net_values(&rows, &net.coeffs, act, xt);
    let fit_err = sup_over(xt.len(), |p| (fitted[p] - sh.audit.g[p][o]).abs());

    // Step two: round coefficients.
    let active = net.coeffs.iter().filter(|c| **c != 0.0).count().max(1) as f64;
    let mut records = Vec::with_capacity(k);
    let mut rounded = vec![0.0; k];
    for i in 0..k {
        let sigma_max = xt
            .iter()
            .map(|x| act.scalar(dot(&rows[i], x)).unwrap().abs())
            .fold(0.0, f64::max);
        let c = net.coeffs[i];
        let delta = if sigma_max > 0.0 { b_perturb / (active * sigma_max) } else { f64::INFINITY };
        let pruned = c == 0.0 || sigma_max == 0.0 || c.abs() < delta;
        let witness = if pruned {
            None
        } else {
            let d = coefficient_decompose(c, delta, sh.cfg.q_cap)?;
            rounded[i] = d.value();
            Some(d)
        };
        records.push(NeuronRecord {
            component: o,
            neuron: i,
            target_row: rows[i].clone(),
            coefficient: c,
            sigma_max,
            delta,
            witness,
            q_positions: Vec::new(),
            l_positions: Vec::new(),
            pruned,
        });
    }
    let perturbed = net_values(&rows, &rounded, act, xt);
    let perturb_err = sup_over(xt.len(), |p| (perturbed[p] - fitted[p]).abs());

    // Step three: realize rows by scanning positions.
    let live: Vec<usize> = (0..k).filter(|&i| records[i].witness.is_some()).collect();
    let sqrt2 = std::f64::consts::SQRT_2;
    let abs_sum: f64 = live
        .iter()
        .map(|&i| {
            let w = records[i].witness.as_ref().unwrap();
            w.q as f64 * sqrt2 + w.l as f64
        })
        .sum();
    let sq_sum: f64 = live
        .iter()
        .map(|&i| {
            let w = records[i].witness.as_ref().unwrap();
            2.0 * w.q as f64 + w.l as f64
        })
        .sum();
    let live_rows: Vec<Vec<f64>> = live.iter().map(|&i| rows[i].clone()).collect();
    let lip = lipschitz_bound(act, &live_rows, xt)?;
    let mx = sh.audit.m_x;
    let (mut tol, max_ref) = match sh.cfg.tolerance {
        TolerancePolicy::Certified => (b_tokens / (mx * lip * abs_sum), 0),
        TolerancePolicy::Audited { max_refinements } => {
            (b_tokens / (3f64.sqrt() * mx * lip * sq_sum.sqrt()), max_refinements)
        }
    };
    // Keep every realized pre-activation within the range the Lipschitz bound covers.
    tol = tol.min(1.0 / mx);
    let mut refinements = 0;
    loop {
        if live.is_empty() {
            break;
        }
        let groups = scan_groups(sh, o, &live, &rows, &records, tol, start_j)?;
        let (tokens, token_err) = realize(sh, o, &groups, &perturbed)?;
        if token_err <= b_tokens || refinements >= max_ref {
            if token_err > b_tokens {
                return Err(Error::Budget {
                    stage: format!("tokens (component {o})"),
                    achieved: token_err,
                    budget: b_tokens,
                });
            }
            for g in &groups {
                records[g.neuron].q_positions = g.q_pos.clone();
                records[g.neuron].l_positions = g.l_pos.clone();
            }
            let last = tokens.iter().map(|t| t.position).max().unwrap_or(start_j - 1);
            return Ok(ComponentBuild {
                records,
                tokens,
                record: ComponentRecord {
                    component: o,
                    neurons: k,
                    fit_seed: net.fit_seed,
                    tolerance: tol,
                    refinements,
                    first_position: start_j,
                    last_position: last,
                    stage_errors: Budgets {
                        fit: fit_err,
                        perturb: perturb_err,
                        tokens: token_err,
                    },
                },
            });
        }
        tol /= 2.0;
        refinements += 1;
    }
    Ok(ComponentBuild {
        records,
        tokens: Vec::new(),
        record: ComponentRecord {
            component: o,
            neurons: k,
            fit_seed: net.fit_seed,
            tolerance: tol,
            refinements: 0,
            first_position: start_j,
            last_position: start_j - 1,
            stage_errors: Budgets {
                fit: fit_err,
                perturb: perturb_err,
                tokens: 0.0,
            },
        },
    })
}

/// One increasing sweep over positions; each position goes to the first unfinished
/// neuron (lowest index) it is valid for.
fn scan_groups(
    sh: &Shared<'_>,
    o: usize,
    live: &[usize],
    rows: &[Vec<f64>],
    records: &[NeuronRecord],
    tol: f64,
    start_j: u64,
) -> Result<Vec<Group>> {
    let mut groups: Vec<Group> = live
        .iter()
        .map(|&i| {
            let w = records[i].witness.as_ref().unwrap();
            Ok(Group {
                neuron: i,
                target: sh.scanner.target(&rows[i], tol)?,
                q: w.q,
                l: w.l,
                unit_role: w.unit_role(),
                q_pos: Vec::new(),
                l_pos: Vec::new(),
                found: Vec::new(),
                closest: f64::INFINITY,
            })
        })
        .collect::<Result<_>>()?;
    let mut pending: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].done()).collect();
    let mut scratch = Scratch::default();
    let mut last = start_j;
    for (j, p) in sh.scheme.cursor(start_j) {
        if pending.is_empty() {
            break;
        }
        if j > sh.cfg.j_cap {
            let g = &groups[pending[0]];
            return Err(Error::ScanExhausted(Box::new(ScanEvidence {
                component: o,
                neuron: g.neuron,
                hits_found: g.found.len() as u64,
                hits_needed: g.needed(),
                positions_scanned: j - start_j,
                last_position: j - 1,
                tolerance: tol,
                best_distance: g.closest.min(sh.scanner.evidence_distance(&g.target, start_j, j - 1)),
            })));
        }
        last = j;
        for (slot, &gi) in pending.iter().enumerate() {
            let g = &mut groups[gi];
            let (hit, miss) = sh.scanner.match_at(&g.target, &p, &mut scratch);
            if let Some(vi) = hit {
                if (g.q_pos.len() as u64) < g.q {
                    g.q_pos.push(j);
                } else {
                    g.l_pos.push(j);
                }
                g.found.push((j, vi));
                if g.done() {
                    pending.remove(slot);
                }
                break;
            }
            g.closest = g.closest.min(miss);
        }
    }
    let _ = last;
    Ok(groups)
}

/// Tokens of a scanned component and their measured coefficient-space error.
fn realize(sh: &Shared<'_>, o: usize, groups: &[Group], perturbed: &[f64]) -> Result<(Vec<Token>, f64)> {
    let d_y = sh.tp.d_y();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut tokens = Vec::new();
    for g in groups {
        for &(j, vi) in &g.found {
            let (role, v) = if g.q_pos.contains(&j) {
                (TokenRole::Sqrt2, sqrt2)
            } else {
                (g.unit_role, g.unit_role.value())
            };
            let mut y = vec![0.0; d_y];
            y[o] = v;
            let vy_index = sh
                .vocab
                .vy_index(&y)
                .ok_or_else(|| Error::invalid("V_y", format!("missing token {y:?}")))?;
            tokens.push(Token {
                position: j,
                vocab_index: vi,
                vy_index,
                role,
                component: o,
                neuron: g.neuron,
                y,
            });
        }
    }
    tokens.sort_by_key(|t| t.position);
    let act = &sh.cfg.activation;
    let mapped: Vec<(Vec<f64>, f64)> = tokens
        .iter()
        .map(|t| {
            let p = sh.scheme.value(t.position);
            (sh.scanner.mapped(t.vocab_index, &p), t.y[o])
        })
        .collect();
    let xt = &sh.audit.xt;
    let err = sup_over(xt.len(), |p| {
        let v: f64 = mapped.iter().map(|(r, y)| y * act.scalar(dot(r, &xt[p])).unwrap()).sum();
        (v - perturbed[p]).abs()
    });
    Ok((tokens, err))
}

fn assemble_report(
    sh: &Shared<'_>,
    nets: &[ComponentNet],
    builds: Vec<ComponentBuild>,
    lambda: Option<f64>,
) -> Result<ConstructionReport> {
    let act = &sh.cfg.activation;
    let xt = &sh.audit.xt;
    let d_y = sh.tp.d_y();
    let u = sh.tp.u();
    let npts = xt.len();
    // Coefficient-space values per stage, [component][point].
    let mut stage = vec![vec![vec![0.0; npts]; d_y]; 3];
    for (o, (net, b)) in nets.iter().zip(&builds).enumerate() {
        let rows: Vec<Vec<f64>> = (0..net.rows.nrows()).map(|i| net.rows.row(i).iter().copied().collect()).collect();
        stage[0][o] = net_values(&rows, &net.coeffs, act, xt);
        let rounded: Vec<f64> = b.records.iter().map(|r| r.witness.as_ref().map_or(0.0, |w| w.value())).collect();
        stage[1][o] = net_values(&rows, &rounded, act, xt);
    }
    let mut tokens: Vec<Token> = builds.iter().flat_map(|b| b.tokens.iter().cloned()).collect();
    tokens.sort_by_key(|t| t.position);
    let mapped: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| sh.scanner.mapped(t.vocab_index, &sh.scheme.value(t.position)))
        .collect();
    // Running readout, recording the sup error after every token.
    let mut running = vec![vec![0.0; d_y]; npts];
    let out_err = |running: &[Vec<f64>]| -> f64 {
        sup_over(npts, |p| {
            let v = u * Vector::from_column_slice(&running[p]);
            let f = &sh.audit.f[p];
            v.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
    };
    let mut error_vs_n = Vec::with_capacity(tokens.len() + 1);
    error_vs_n.push((0, out_err(&running)));
    for (t, r) in tokens.iter().zip(&mapped) {
        running.par_iter_mut().zip(xt.par_iter()).for_each(|(acc, x)| {
            let s = act.scalar(dot(r, x)).unwrap();
            for (o, yv) in t.y.iter().enumerate() {
                acc[o] += yv * s;
            }
        });
        error_vs_n.push((t.position, out_err(&running)));
    }
    for o in 0..d_y {
        stage[2][o] = (0..npts).map(|p| running[p][o]).collect();
    }
    let diff = |a: &(dyn Fn(usize, usize) -> f64 + Sync), b: &(dyn Fn(usize, usize) -> f64 + Sync)| -> f64 {
        sup_over(npts, |p| {
            let v = Vector::from_fn(d_y, |o, _| a(o, p) - b(o, p));
            (u * v).norm()
        })
    };
    let g = &sh.audit.g;
    let fit = diff(&|o, p| stage[0][o][p], &|o, p| g[p][o]);
    let perturb = diff(&|o, p| stage[1][o][p], &|o, p| stage[0][o][p]);
    let tok = diff(&|o, p| stage[2][o][p], &|o, p| stage[1][o][p]);
    let achieved = error_vs_n.last().map_or(0.0, |e| e.1);
    let stage_errors = Budgets {
        fit,
        perturb,
        tokens: tok,
    };
    for (name, got, bud) in [
        ("fit", fit, sh.budgets.fit),
        ("perturb", perturb, sh.budgets.perturb),
        ("tokens", tok, sh.budgets.tokens),
    ] {
        if got > bud {
            return Err(Error::Budget {
                stage: name.into(),
                achieved: got,
                budget: bud,
            });
        }
    }
    if !(achieved < sh.cfg.epsilon) {
        return Err(Error::Budget {
            stage: "total".into(),
            achieved,
            budget: sh.cfg.epsilon,
        });
    }
    let n = tokens.last().map_or(0, |t| t.position);
    let per_neuron: Vec<NeuronRecord> = builds.iter().flat_map(|b| b.records.iter().cloned()).collect();
    let max_tokens_per_neuron = per_neuron
        .iter()
        .filter_map(|r| r.witness.as_ref().map(|w| w.token_count()))
        .max()
        .unwrap_or(0);
    Ok(ConstructionReport {
        epsilon: sh.cfg.epsilon,
        epsilon_budget: sh.budgets,
        stage_errors,
        achieved_sup_error: achieved,
        n,
        max_tokens_per_neuron,
        activation: act.name().to_string(),
        lambda,
        audit_points: npts,
        components: builds.iter().map(|b| b.record.clone()).collect(),
        per_neuron,
        context: ContextTokens {
            n,
            tokens,
            ..ContextTokens::empty(sh.tp.d_x(), d_y)
        },
        error_vs_n,
    })
}

fn run(
    target: Target<'_>,
    grid: &Grid,
    vocab: &Vocabulary,
    scheme: &PeScheme,
    tp: &TransformerParams,
    cfg: &ConstructionConfig,
    lambda: Option<LambdaPolicy>,
) -> Result<ConstructionReport> {
    let sh = prepare(&target, grid, vocab, scheme, tp, cfg)?;
    let mut nets = stage_one(&sh, &target, grid)?;
    let lam = match lambda {
        None => None,
        Some(policy) => Some(rescale(&sh, &mut nets, policy)?),
    };
    let mut builds = Vec::with_capacity(nets.len());
    let mut next = 1u64;
    for (o, net) in nets.iter().enumerate() {
        let b = build_component(&sh, o, net, next)?;
        next = b.record.last_position + 1;
        builds.push(b);
    }
    assemble_report(&sh, &nets, builds, lam)
}

/// Single-output construction.
pub fn construct_context(
    target: Target<'_>,
    grid: &Grid,
    vocab: &Vocabulary,
    scheme: &PeScheme,
    tp: &TransformerParams,
    cfg: &ConstructionConfig,
) -> Result<ConstructionReport> {
    if tp.d_y() != 1 {
        return Err(Error::invalid("d_y", "use construct_context_multi_output for d_y ≥ 2"));
    }
    run(target, grid, vocab, scheme, tp, cfg, None)
}

/// Per-coordinate constructions on consecutive position ranges, each with budget
/// `ε_stage / (√d_y · ‖U‖₂)` in `U⁻¹`-space.
pub fn construct_context_multi_output(
    target: Target<'_>,
    grid: &Grid,
    vocab: &Vocabulary,
    scheme: &PeScheme,
    tp: &TransformerParams,
    cfg: &ConstructionConfig,
) -> Result<ConstructionReport> {
    if tp.d_y() < 2 {
        return Err(Error::invalid("d_y", "multi-output construction needs d_y ≥ 2"));
    }
    run(target, grid, vocab, scheme, tp, cfg, None)
}

/// ReLU construction with rows scaled by `1/λ` into the cube and coefficients by `λ`.
pub fn construct_relu_rescaled(
    target: Target<'_>,
    grid: &Grid,
    vocab: &Vocabulary,
    scheme: &PeScheme,
    tp: &TransformerParams,
    cfg: &ConstructionConfig,
    policy: LambdaPolicy,
) -> Result<ConstructionReport> {
    if cfg.activation != ActivationKind::Relu {
        return Err(Error::invalid("activation", "rescaling relies on relu homogeneity"));
    }
    run(target, grid, vocab, scheme, tp, cfg, Some(policy))
}

fn rescale(sh: &Shared<'_>, nets: &mut [ComponentNet], policy: LambdaPolicy) -> Result<f64> {
    let inv = &sh.scanner.st_inv;
    let mut need = 1.0_f64;
    for net in nets.iter() {
        for i in 0..net.rows.nrows() {
            let pre = inv * net.rows.row(i).transpose();
            need = need.max(pre.amax());
        }
    }
    let lambda = match policy {
        LambdaPolicy::MinimalCube => need,
        LambdaPolicy::Fixed(l) => {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::invalid("lambda", "must be positive and finite"));
            }
            if l < need {
                return Err(Error::invalid(
                    "lambda",
                    format!("λ = {l} leaves row preimages outside [−1, 1]^d_x (needs {need})"),
                ));
            }
            l
        }
    };
    for net in nets.iter_mut() {
        net.rows /= lambda;
        for c in &mut net.coeffs {
            *c *= lambda;
        }
    }
    Ok(lambda)
}

/// Multi-index polynomial `Σ c_α x^α`.
pub type PolyCoeffs = BTreeMap<Vec<u32>, f64>;

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exp network approximating `P(x) e^{w*·x}` with forward differences in `w`:
/// `x^α e^{w*·x} ≈ λ^{−|α|} Σ_{β≤α} (−1)^{|α−β|} Πc C(α_c, β_c) e^{(w*+λβ)·x}`.
pub fn build_exp_fd_network(poly: &PolyCoeffs, w_star: &[f64], delta: f64, lambda: f64) -> Result<FnnParams> {
    let d = w_star.len();
    if d == 0 {
        return Err(Error::dim("w* must be non-empty"));
    }
    if !(lambda > 0.0 && lambda.is_finite() && delta > 0.0) {
        return Err(Error::invalid("lambda", "need 0 < λ and δ > 0"));
    }
    let max_degree = poly
        .iter()
        .filter(|(_, c)| **c != 0.0)
        .map(|(a, _)| a.iter().sum::<u32>())
        .max()
        .unwrap_or(0);
    if lambda * max_degree as f64 >= delta {
        return Err(Error::invalid(
            "lambda",
            format!("λ·|α|max = {} must stay below δ = {delta}", lambda * max_degree as f64),
        ));
    }
    let mut weights: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for (alpha, &c) in poly {
        if alpha.len() != d {
            return Err(Error::dim(format!("multi-index {alpha:?} needs {d} entries")));
        }
        if c == 0.0 {
            continue;
        }
        let order: u32 = alpha.iter().sum();
        let scale = c / lambda.powi(order as i32);
        let mut beta = vec![0u32; d];
        loop {
            let mut wgt = scale;
            for k in 0..d {
                wgt *= binomial(alpha[k], beta[k]);
            }
            if (order - beta.iter().sum::<u32>()) % 2 == 1 {
                wgt = -wgt;
            }
            *weights.entry(beta.clone()).or_default() += wgt;
            let mut k = 0;
            while k < d {
                beta[k] += 1;
                if beta[k] <= alpha[k] {
                    break;
                }
                beta[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
    }
    if weights.is_empty() {
        weights.insert(vec![0; d], 0.0);
    }
    let k = weights.len();
    let mut w = Matrix::zeros(k, d);
    let mut a = Matrix::zeros(1, k);
    for (i, (beta, wgt)) in weights.iter().enumerate() {
        for c in 0..d {
            w[(i, c)] = w_star[c] + lambda * beta[c] as f64;
        }
        a[(0, i)] = *wgt;
    }
    FnnParams::new(a, w, Vector::zeros(k), ActivationKind::Exp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: Vec<(Vec<u32>, f64)>,
    pub rms_residual: f64,
    pub max_residual: f64,
}

impl PolyFit {
    pub fn as_map(&self) -> PolyCoeffs {
        self.coeffs.iter().cloned().collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .map(|(a, c)| c * a.iter().zip(x).map(|(&e, v)| v.powi(e as i32)).product::<f64>())
            .sum()
    }
}

/// Monomial coefficients of the Legendre polynomial `P_n`.
fn legendre(n: usize) -> Vec<f64> {
    let mut prev = vec![1.0];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for m in 1..n {
        let mut next = vec![0.0; m + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += (2 * m + 1) as f64 * c / (m + 1) as f64;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= m as f64 * c / (m + 1) as f64;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// `p(a·x + b)` expanded in powers of `x`.
fn compose_affine(p: &[f64], a: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    let mut power = vec![1.0];
    for &c in p {
        for (i, v) in power.iter().enumerate() {
            out[i] += c * v;
        }
        let mut next = vec![0.0; power.len() + 1];
        for (i, v) in power.iter().enumerate() {
            next[i] += b * v;
            next[i + 1] += a * v;
        }
        power = next;
    }
    out
}

fn multi_indices(d: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    loop {
        if cur.iter().sum::<u32>() <= degree {
            out.push(cur.clone());
        }
        let mut k = 0;
        while k < d {
            cur[k] += 1;
            if cur[k] <= degree {
                break;
            }
            cur[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    out.sort_by_key(|a| (a.iter().sum::<u32>(), a.clone()));
    out
}

/// Least-squares polynomial of total degree `degree`, fitted in a tensor Legendre
/// basis on the samples' bounding box and returned in monomials.
pub fn fit_polynomial(samples: &[(Vec<f64>, f64)], degree: u32) -> Result<PolyFit> {
    let Some((x0, _)) = samples.first() else {
        return Err(Error::invalid("samples", "no samples"));
    };
    let d = x0.len();
    if d == 0 || samples.iter().any(|(x, _)| x.len() != d) {
        return Err(Error::dim("samples must share a positive input dimension"));
    }
    let basis = multi_indices(d, degree);
    if samples.len() < basis.len() {
        return Err(Error::invalid(
            "samples",
            format!("{} samples cannot determine {} coefficients", samples.len(), basis.len()),
        ));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (x, _) in samples {
        for c in 0..d {
            lo[c] = lo[c].min(x[c]);
            hi[c] = hi[c].max(x[c]);
        }
    }
    // t = a x + b maps [lo, hi] onto [−1, 1]; degenerate axes map to 0.
    let (a, b): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|c| {
            let w = hi[c] - lo[c];
            if w > 0.0 {
                (2.0 / w, -(hi[c] + lo[c]) / w)
            } else {
                (0.0, 0.0)
            }
        })
        .unzip();
    let leg: Vec<Vec<f64>> = (0..=degree as usize).map(legendre).collect();
    let eval_leg = |n: usize, t: f64| leg[n].iter().rev().fold(0.0, |acc, c| acc * t + c);
    let m = Matrix::from_fn(samples.len(), basis.len(), |r, k| {
        let x = &samples[r].0;
        (0..d).map(|c| eval_leg(basis[k][c] as usize, a[c] * x[c] + b[c])).product()
    });
    let rhs = Vector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > linalg::CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            name: "polynomial design matrix".into(),
            cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    let coef = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    let fitted = &m * &coef;
    let resid: Vec<f64> = (0..samples.len()).map(|r| fitted[r] - rhs[r]).collect();
    let rms = (resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64).sqrt();
    let max = linalg::inf_norm(&resid);
    // Expand each basis product into monomials.
    let per_axis: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|c| leg.iter().map(|p| compose_affine(p, a[c], b[c])).collect())
        .collect();
    let mut mono: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for (k, alpha) in basis.iter().enumerate() {
        let mut terms: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), coef[k])];
        for c in 0..d {
            let poly = &per_axis[c][alpha[c] as usize];
            let mut next = Vec::new();
            for (idx, v) in &terms {
                for (e, pc) in poly.iter().enumerate() {
                    if *pc != 0.0 {
                        let mut i2 = idx.clone();
                        i2.push(e as u32);
                        next.push((i2, v * pc));
                    }
                }
            }
            terms = next;
        }
        for (idx, v) in terms {
            *mono.entry(idx).or_default() += v;
        }
    }
    Ok(PolyFit {
        coeffs: mono.into_iter().collect(),
        rms_residual: rms,
        max_residual: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnn::fnn_forward;
    use crate::transformer::{transformer_readout, InputAssembly};
    use crate::vocab_pe::{lattice_vx, reduced_vy, Region};
    use proptest::prelude::*;

    fn lattice_setup(d_y: usize) -> (Vocabulary, PeScheme) {
        let vocab = Vocabulary::new(lattice_vx(-8.0, 8.0, 0.25, 2).unwrap(), reduced_vy(d_y)).unwrap();
        let scheme = PeScheme::calkin_wilf(Region::cube(0.0, 0.25, 2)).unwrap();
        (vocab, scheme)
    }

    #[test]
    fn exact_hit_returns_start() {
        let (vocab, scheme) = lattice_setup(1);
        let tp = TransformerParams::identity(2, 1);
        let scanner = PositionScanner::new(&vocab, &scheme, &tp).unwrap();
        let r = scanner.mapped_row(7, 5);
        let (j, i) = scan_valid_position(&r.row, &vocab, &scheme, &tp, 1e-9, 5, 100).unwrap();
        assert_eq!(j, 5);
        assert_eq!(vocab.vx()[i], vocab.vx()[7]);
    }

    #[test]
    fn dyadic_scan_matches_brute_force() {
        let vocab = Vocabulary::new(vec![vec![0.0]], vec![vec![0.0]]).unwrap();
        let scheme = PeScheme::dyadic(Region::cube(-1.0, 1.0, 1)).unwrap();
        let tp = TransformerParams::identity(1, 1);
        let tol = 2f64.powi(-6);
        let (j, _) = scan_valid_position(&[0.3], &vocab, &scheme, &tp, tol, 1, 10_000).unwrap();
        let brute = (1..10_000u64).find(|&j| (scheme.value(j)[0] - 0.3).abs() < tol).unwrap();
        assert_eq!(j, brute);
    }

    #[test]
    fn huge_tolerance_accepts_start() {
        let vocab = Vocabulary::new(vec![vec![0.0, 0.0]], vec![vec![0.0]]).unwrap();
        let scheme = PeScheme::calkin_wilf(Region::cube(-1.0, 1.0, 2)).unwrap();
        let tp = TransformerParams::identity(2, 1);
        let (j, _) = scan_valid_position(&[0.2, -0.7], &vocab, &scheme, &tp, 10.0, 17, 100).unwrap();
        assert_eq!(j, 17);
    }

    #[test]
    fn exhausted_scan_reports_evidence() {
        let vocab = Vocabulary::new(vec![vec![0.0]], vec![vec![0.0]]).unwrap();
        let scheme = PeScheme::dyadic(Region::cube(-1.0, 1.0, 1)).unwrap();
        let tp = TransformerParams::identity(1, 1);
        match scan_valid_position(&[5.0], &vocab, &scheme, &tp, 1e-3, 1, 50) {
            Err(Error::ScanExhausted(ev)) => {
                assert_eq!(ev.last_position, 50);
                assert_eq!(ev.hits_found, 0);
                // Levels complete by j = 50 reach 1 − 2⁻⁴; the partial fifth level stays below.
                assert_eq!(ev.best_distance, 4.0 + 2f64.powi(-4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_target_gives_empty_context() {
        let (vocab, scheme) = lattice_setup(1);
        let tp = TransformerParams::identity(2, 1);
        let zero = |_: &[f64]| vec![0.0];
        let grid = Grid::cube(0.0, 1.0, 1, 21).unwrap();
        let cfg = ConstructionConfig::new(0.1, ActivationKind::Relu);
        let rep = construct_context(Target::Function { f: &zero, d_y: 1 }, &grid, &vocab, &scheme, &tp, &cfg).unwrap();
        assert_eq!(rep.n, 0);
        assert!(rep.context.tokens.is_empty());
        assert_eq!(rep.achieved_sup_error, 0.0);
    }

    #[test]
    fn realizable_single_neuron_needs_one_token() {
        let (vocab, scheme) = lattice_setup(1);
        let tp = TransformerParams::sparse(
            Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            Matrix::from_row_slice(2, 2, &[0.9, 0.0, 0.2, 1.0]),
            Matrix::identity(1, 1),
        )
        .unwrap();
        let scanner = PositionScanner::new(&vocab, &scheme, &tp).unwrap();
        let base = vocab.vx_index(&[0.5, -0.25]).unwrap();
        let r = scanner.mapped_row(base, 1).row;
        let net = FnnParams::new(
            Matrix::from_element(1, 1, std::f64::consts::SQRT_2),
            Matrix::from_element(1, 1, r[0]),
            Vector::from_element(1, r[1]),
            ActivationKind::Relu,
        )
        .unwrap();
        let grid = Grid::cube(0.0, 1.0, 1, 21).unwrap();
        let cfg = ConstructionConfig::new(0.01, ActivationKind::Relu);
        let rep = construct_context(Target::Network(&net), &grid, &vocab, &scheme, &tp, &cfg).unwrap();
        assert_eq!(rep.n, 1);
        assert_eq!(rep.context.tokens.len(), 1);
        let t = &rep.context.tokens[0];
        assert_eq!(t.y, vec![std::f64::consts::SQRT_2]);
        assert_eq!(t.vocab_index, base);
        assert_eq!(rep.achieved_sup_error, 0.0);
    }

    fn sine_target(x: &[f64]) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        vec![(2.0 * pi * x[0]).sin() + 0.5 * (pi * x[0]).cos()]
    }

    #[test]
    fn sine_pipeline_meets_budget_and_invariants() {
        let (vocab, scheme) = lattice_setup(1);
        let tp = TransformerParams::identity(2, 1);
        let grid = Grid::cube(0.0, 1.0, 1, 101).unwrap();
        let mut cfg = ConstructionConfig::new(0.3, ActivationKind::Relu);
        cfg.budgets = Some(Budgets {
            fit: 0.12,
            perturb: 0.08,
            tokens: 0.08,
        });
        let rep = construct_context(Target::Function { f: &sine_target, d_y: 1 }, &grid, &vocab, &scheme, &tp, &cfg)
            .unwrap();
        assert!(rep.achieved_sup_error < 0.3);
        assert!(rep.stage_errors.fit <= 0.12 && rep.stage_errors.perturb <= 0.08 && rep.stage_errors.tokens <= 0.08);
        assert!(rep.achieved_sup_error <= rep.stage_errors.total() * (1.0 + 1e-12));
        // Disjoint index sets, sizes matching the witnesses.
        let sets = rep.context.index_sets();
        let mut all: Vec<u64> = sets.values().flatten().copied().collect();
        let len = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), len);
        for r in &rep.per_neuron {
            if let Some(w) = &r.witness {
                assert_eq!(r.q_positions.len() as u64, w.q);
                assert_eq!(r.l_positions.len() as u64, w.l);
            }
        }
        // Token legality.
        for t in &rep.context.tokens {
            let (x, y) = rep.context.column(t.position, &vocab, &scheme);
            let p = scheme.value(t.position);
            let rebuilt: Vec<f64> = vocab.vx()[t.vocab_index].iter().zip(&p).map(|(a, b)| a + b).collect();
            assert_eq!(x, rebuilt);
            assert_eq!(vocab.vy()[t.vy_index], y);
        }
        // The compressed readout agrees with the full attention layer.
        if rep.n <= 200_000 {
            let (x, y) = rep.context.materialize(&vocab, &scheme).unwrap();
            for q in [0.0, 0.137, 0.5, 0.91] {
                let full = transformer_readout(&tp, &InputAssembly::new(x.clone(), y.clone(), &[q]).unwrap(), &ActivationKind::Relu)
                    .unwrap();
                let fast = rep.readout(&tp, &vocab, &scheme, &ActivationKind::Relu, &[q]);
                assert!((full[0] - fast[0]).abs() <= 1e-10 * (1.0 + fast[0].abs()));
            }
        }
        let again = construct_context(Target::Function { f: &sine_target, d_y: 1 }, &grid, &vocab, &scheme, &tp, &cfg)
            .unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn multi_output_one_zero_component() {
        let (vocab, scheme) = lattice_setup(2);
        let tp = TransformerParams::identity(2, 2);
        let f = |x: &[f64]| vec![(x[0] - 0.5).max(0.0) * 2.0, 0.0];
        let grid = Grid::cube(0.0, 1.0, 1, 41).unwrap();
        let cfg = ConstructionConfig::new(0.2, ActivationKind::Relu);
        let rep = construct_context_multi_output(Target::Function { f: &f, d_y: 2 }, &grid, &vocab, &scheme, &tp, &cfg)
            .unwrap();
        assert!(rep.context.tokens.iter().all(|t| t.component == 0 && t.y[1] == 0.0));
        assert!(rep.achieved_sup_error < 0.2);
    }

    #[test]
    fn budgets_must_fit_epsilon() {
        let (vocab, scheme) = lattice_setup(1);
        let tp = TransformerParams::identity(2, 1);
        let grid = Grid::cube(0.0, 1.0, 1, 11).unwrap();
        let mut cfg = ConstructionConfig::new(0.1, ActivationKind::Relu);
        cfg.budgets = Some(Budgets {
            fit: 0.05,
            perturb: 0.05,
            tokens: 0.05,
        });
        let r = construct_context(Target::Function { f: &sine_target, d_y: 1 }, &grid, &vocab, &scheme, &tp, &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn missing_units_rejected() {
        let (_, scheme) = lattice_setup(1);
        let vocab = Vocabulary::new(lattice_vx(-1.0, 1.0, 0.25, 2).unwrap(), vec![vec![0.0], vec![1.0]]).unwrap();
        let tp = TransformerParams::identity(2, 1);
        let grid = Grid::cube(0.0, 1.0, 1, 11).unwrap();
        let cfg = ConstructionConfig::new(0.3, ActivationKind::Relu);
        let r = construct_context(Target::Function { f: &sine_target, d_y: 1 }, &grid, &vocab, &scheme, &tp, &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn rescaling_reduces_to_plain_when_rows_fit() {
        let vocab = Vocabulary::new(lattice_vx(-1.0, 1.0, 0.25, 2).unwrap(), reduced_vy(1)).unwrap();
        let scheme = PeScheme::calkin_wilf(Region::cube(0.0, 0.25, 2)).unwrap();
        let tp = TransformerParams::identity(2, 1);
        let net = FnnParams::new(
            Matrix::from_row_slice(1, 2, &[1.0, -0.5]),
            Matrix::from_row_slice(2, 1, &[0.75, -0.5]),
            Vector::from_vec(vec![-0.25, 0.5]),
            ActivationKind::Relu,
        )
        .unwrap();
        let grid = Grid::cube(0.0, 1.0, 1, 21).unwrap();
        let cfg = ConstructionConfig::new(0.05, ActivationKind::Relu);
        let a = construct_relu_rescaled(Target::Network(&net), &grid, &vocab, &scheme, &tp, &cfg, LambdaPolicy::MinimalCube)
            .unwrap();
        assert_eq!(a.lambda, Some(1.0));
        let b = construct_context(Target::Network(&net), &grid, &vocab, &scheme, &tp, &cfg).unwrap();
        assert_eq!(a.context, b.context);
        assert!(a.achieved_sup_error < 0.05);
    }

    #[test]
    fn rescaling_brings_wide_rows_into_cube() {
        let vocab = Vocabulary::new(lattice_vx(-1.0, 1.0, 0.25, 2).unwrap(), reduced_vy(1)).unwrap();
        let scheme = PeScheme::calkin_wilf(Region::cube(0.0, 0.25, 2)).unwrap();
        let tp = TransformerParams::identity(2, 1);
        let net = FnnParams::new(
            Matrix::from_row_slice(1, 1, &[0.25]),
            Matrix::from_row_slice(1, 1, &[4.0]),
            Vector::from_vec(vec![-2.0]),
            ActivationKind::Relu,
        )
        .unwrap();
        let grid = Grid::cube(0.0, 1.0, 1, 21).unwrap();
        let cfg = ConstructionConfig::new(0.05, ActivationKind::Relu);
        let rep = construct_relu_rescaled(Target::Network(&net), &grid, &vocab, &scheme, &tp, &cfg, LambdaPolicy::MinimalCube)
            .unwrap();
        assert_eq!(rep.lambda, Some(4.0));
        assert!(rep.per_neuron.iter().all(|r| r.target_row.iter().all(|v| v.abs() <= 1.0)));
        assert!(rep.achieved_sup_error < 0.05);
        let bad = construct_relu_rescaled(Target::Network(&net), &grid, &vocab, &scheme, &tp, &cfg, LambdaPolicy::Fixed(2.0));
        assert!(matches!(bad, Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn fd_constant_polynomial_is_exact() {
        let poly: PolyCoeffs = [(vec![0, 0], 1.0)].into_iter().collect();
        let net = build_exp_fd_network(&poly, &[0.5, -0.3], 0.1, 0.01).unwrap();
        assert_eq!(net.k(), 1);
        let x = [0.3, 0.8];
        let want = (0.5 * 0.3 - 0.3 * 0.8f64).exp();
        assert_eq!(fnn_forward(&net, &x).unwrap()[0], want);
    }

    fn fd_error(poly: &PolyCoeffs, p: &dyn Fn(&[f64]) -> f64, lambda: f64) -> f64 {
        let w = [0.5, -0.3];
        let net = build_exp_fd_network(poly, &w, 1.0, lambda).unwrap();
        let grid = Grid::cube(-1.0, 1.0, 2, 21).unwrap();
        grid.points()
            .iter()
            .map(|x| (fnn_forward(&net, x).unwrap()[0] - p(x) * (w[0] * x[0] + w[1] * x[1]).exp()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fd_first_and_second_order_stencils_converge_linearly() {
        let px1: PolyCoeffs = [(vec![1, 0], 1.0)].into_iter().collect();
        let px1x2: PolyCoeffs = [(vec![1, 1], 1.0)].into_iter().collect();
        let n1 = build_exp_fd_network(&px1, &[0.5, -0.3], 0.1, 0.01).unwrap();
        assert_eq!(n1.k(), 2);
        let n2 = build_exp_fd_network(&px1x2, &[0.5, -0.3], 0.1, 0.01).unwrap();
        assert_eq!(n2.k(), 4);
        for (poly, f) in [(&px1, &(|x: &[f64]| x[0]) as &dyn Fn(&[f64]) -> f64), (&px1x2, &|x: &[f64]| x[0] * x[1])] {
            for m in 4..8 {
                let l = 2f64.powi(-m);
                let ratio = fd_error(poly, f, l / 2.0) / fd_error(poly, f, l);
                assert!((0.35..=0.65).contains(&ratio), "m {m}: {ratio}");
            }
        }
    }

    #[test]
    fn fd_rows_stay_in_ball() {
        let poly: PolyCoeffs = [(vec![2, 1], 0.5), (vec![0, 1], -1.0)].into_iter().collect();
        let w = [0.2, 0.1];
        let net = build_exp_fd_network(&poly, &w, 0.1, 0.03).unwrap();
        for i in 0..net.k() {
            let d: f64 = (0..2).map(|c| (net.w()[(i, c)] - w[c]).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.1, "row {i} outside the ball");
            assert!(d <= 3.0 * 0.03 + 1e-15);
        }
        assert!(build_exp_fd_network(&poly, &w, 0.1, 0.04).is_err());
    }

    #[test]
    fn polynomial_fit_recovers_monomials() {
        let w = 0.7;
        let xs = crate::grid::linspace(0.0, 1.0, 50);
        let exp_only: Vec<(Vec<f64>, f64)> = xs.iter().map(|&x| (vec![x], (w * x).exp() * (-w * x).exp())).collect();
        let p = fit_polynomial(&exp_only, 3).unwrap();
        assert!(p.max_residual < 1e-12);
        let m = p.as_map();
        assert!((m[&vec![0]] - 1.0).abs() < 1e-10);
        let lin: Vec<(Vec<f64>, f64)> = xs.iter().map(|&x| (vec![x], x)).collect();
        let p = fit_polynomial(&lin, 4).unwrap();
        let m = p.as_map();
        assert!((m[&vec![1]] - 1.0).abs() < 1e-8);
        for (a, c) in &m {
            if a != &vec![1] {
                assert!(c.abs() < 1e-8, "{a:?}: {c}");
            }
        }
    }

    #[test]
    fn degree_zero_fit_is_the_mean() {
        let xs = crate::grid::linspace(0.0, 1.0, 40);
        let s: Vec<(Vec<f64>, f64)> = xs.iter().map(|&x| (vec![x], (3.0 * x).sin())).collect();
        let p = fit_polynomial(&s, 0).unwrap();
        let mean = s.iter().map(|v| v.1).sum::<f64>() / s.len() as f64;
        assert!((p.as_map()[&vec![0]] - mean).abs() < 1e-12);
        let max = s.iter().map(|v| (v.1 - mean).abs()).fold(0.0, f64::max);
        let rms = (s.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        assert!((p.max_residual - max).abs() < 1e-12);
        assert!((p.rms_residual - rms).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_polynomial_fit() {
        let g = Grid::cube(-0.5, 1.5, 2, 9).unwrap();
        let s: Vec<(Vec<f64>, f64)> = g.points().iter().map(|x| (x.clone(), 1.0 - 2.0 * x[0] * x[1] + x[1] * x[1])).collect();
        let p = fit_polynomial(&s, 2).unwrap();
        let m = p.as_map();
        assert!((m[&vec![0, 0]] - 1.0).abs() < 1e-10);
        assert!((m[&vec![1, 1]] + 2.0).abs() < 1e-10);
        assert!((m[&vec![0, 2]] - 1.0).abs() < 1e-10);
        assert!(m[&vec![2, 0]].abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn relu_rescaling_identity(z in -50.0f64..50.0, c in -5.0f64..5.0, lam in 1.0f64..64.0) {
            let relu = ActivationKind::Relu;
            let lhs = lam * c * relu.scalar(z / lam).unwrap();
            let rhs = c * relu.scalar(z).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn legendre_affine_expansion(x in -2.0f64..2.0, n in 0usize..7) {
            let p = legendre(n);
            let q = compose_affine(&p, 0.5, -0.25);
            let direct = p.iter().rev().fold(0.0, |acc, c| acc * (0.5 * x - 0.25) + c);
            let expanded = q.iter().rev().fold(0.0, |acc, c| acc * x + c);
            prop_assert!((direct - expanded).abs() < 1e-10);
        }
    }
}
