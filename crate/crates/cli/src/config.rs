//! JSON run configurations, one document per run.

use serde::{Deserialize, Serialize};
use vicl::construction::{Budgets, LambdaPolicy, TolerancePolicy};
use vicl::fnn::{ActivationKind, FnnParams};
use vicl::nonuap::FiniteFamilySpec;
use vicl::transformer::TransformerParams;
use vicl::vocab_pe::PeScheme;

use crate::expr::Expr;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformerSpec {
    Identity,
    /// Seeded draw near the identity; the seed defaults to the run seed.
    Random {
        seed: Option<u64>,
        #[serde(default = "default_condition")]
        max_condition: f64,
    },
    Params {
        params: TransformerParams,
    },
}

fn default_condition() -> f64 {
    1e6
}

impl TransformerSpec {
    pub fn build(&self, d_x: usize, d_y: usize, run_seed: u64) -> Result<TransformerParams, CliError> {
        let tp = match self {
            TransformerSpec::Identity => TransformerParams::identity(d_x, d_y),
            TransformerSpec::Random { seed, max_condition } => {
                vicl::random::sparse_transformer(d_x, d_y, seed.unwrap_or(run_seed), *max_condition)?
            }
            TransformerSpec::Params { params } => params.clone(),
        };
        if tp.d_x() != d_x || tp.d_y() != d_y {
            return Err(CliError::config(
                "transformer",
                format!("has d_x = {}, d_y = {}; the run needs {d_x}, {d_y}", tp.d_x(), tp.d_y()),
            ));
        }
        Ok(tp)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points_per_axis: Vec<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<vicl::grid::Grid, CliError> {
        Ok(vicl::grid::Grid::uniform(&self.lo, &self.hi, &self.points_per_axis)?)
    }
}

/// One expression per output coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprList {
    One(String),
    Many(Vec<String>),
}

impl ExprList {
    pub fn parse(&self, field: &str, dim: usize) -> Result<Vec<Expr>, CliError> {
        let srcs: Vec<&String> = match self {
            ExprList::One(s) => vec![s],
            ExprList::Many(v) => v.iter().collect(),
        };
        if srcs.is_empty() {
            return Err(CliError::config(field, "needs at least one expression"));
        }
        srcs.iter()
            .enumerate()
            .map(|(i, s)| {
                let e = Expr::parse(s).map_err(|e| CliError::config(format!("{field}[{i}]"), e.to_string()))?;
                if e.arity() > dim {
                    return Err(CliError::config(
                        format!("{field}[{i}]"),
                        format!("uses x{} but the domain has dimension {dim}", e.arity()),
                    ));
                }
                Ok(e)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Random {
        k: usize,
        activation: ActivationKind,
        #[serde(default = "one")]
        w_scale: f64,
        seed: Option<u64>,
    },
    Params {
        params: FnnParams,
    },
    /// Random-feature fit of expression targets on a uniform sample grid.
    Fit {
        target: ExprList,
        k: usize,
        activation: ActivationKind,
        samples: GridSpec,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedFlow {
    /// Entrywise activation, exact.
    Exact,
    /// Softmax attention; the source network uses softmax or exp.
    Softmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    #[serde(default)]
    pub seed: u64,
    /// Input dimension of the network; the transformer has `d_x = input_dim + 1`.
    pub input_dim: usize,
    pub d_y: usize,
    pub transformer: TransformerSpec,
    pub network: NetworkSpec,
    pub flow: EmbedFlow,
    pub epsilon: Option<f64>,
    /// Grid for the gap report; softmax flows build and audit on its 10× refinement.
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Expressions(ExprList),
    Network { network: FnnParams },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSet {
    Named(String),
    Points { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub lo: f64,
    pub hi: f64,
    pub spacing: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VxSpec {
    Lattice { lattice: LatticeSpec },
    Points { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularySpec {
    pub vx: VxSpec,
    /// `"reduced"`, `"product"` or `{"points": [...]}`.
    #[serde(default = "reduced")]
    pub vy: PointSet,
}

fn reduced() -> PointSet {
    PointSet::Named("reduced".into())
}

impl VocabularySpec {
    pub fn build(&self, d_x: usize, d_y: usize) -> Result<vicl::vocab_pe::Vocabulary, CliError> {
        use vicl::vocab_pe::{lattice_vx, product_vy, reduced_vy, Vocabulary};
        let vx = match &self.vx {
            VxSpec::Lattice { lattice } => lattice_vx(lattice.lo, lattice.hi, lattice.spacing, d_x)?,
            VxSpec::Points { points } => points.clone(),
        };
        let vy = match &self.vy {
            PointSet::Named(n) if n == "reduced" => reduced_vy(d_y),
            PointSet::Named(n) if n == "product" => product_vy(d_y),
            PointSet::Named(n) => {
                return Err(CliError::config("vocabulary.vy", format!("unknown set `{n}` (reduced, product)")))
            }
            PointSet::Points { points } => points.clone(),
        };
        Ok(Vocabulary::new(vx, vy)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub neurons: Option<Vec<usize>>,
    pub seeds_per_size: Option<u64>,
    pub weight_scale: Option<f64>,
    pub refine_iters: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructConfig {
    #[serde(default)]
    pub seed: u64,
    pub target: TargetSpec,
    pub domain: GridSpec,
    pub activation: ActivationKind,
    pub epsilon: f64,
    pub budgets: Option<Budgets>,
    #[serde(default = "identity")]
    pub transformer: TransformerSpec,
    pub vocabulary: VocabularySpec,
    pub scheme: PeScheme,
    pub tolerance: Option<TolerancePolicy>,
    pub q_cap: Option<u64>,
    pub j_cap: Option<u64>,
    pub audit_refinement: Option<usize>,
    pub fit: Option<FitSpec>,
    /// ReLU only: rescale rows into the unit cube.
    pub rescale: Option<LambdaPolicy>,
}

fn identity() -> TransformerSpec {
    TransformerSpec::Identity
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    #[serde(default)]
    pub seed: u64,
    pub vx: Vec<Vec<f64>>,
    pub scheme: PeScheme,
    pub probe_lo: Vec<f64>,
    pub probe_hi: Vec<f64>,
    pub probes_per_axis: usize,
    pub n_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "audit", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuditConfig {
    ZeroFuzz {
        #[serde(default)]
        seed: u64,
        trials: u64,
        separation: f64,
        grid_points: usize,
    },
    Nonuap {
        #[serde(default)]
        seed: u64,
        family: FiniteFamilySpec,
        /// One audit per context cap.
        max_context: Vec<usize>,
        trials: u64,
    },
    Density(DensityConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    List(Vec<f64>),
    Random { count: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KroneckerConfig {
    #[serde(default)]
    pub seed: u64,
    pub betas: BetaSpec,
    pub epsilon: f64,
    #[serde(default = "default_q_cap")]
    pub q_cap: u64,
}

fn default_q_cap() -> u64 {
    1 << 32
}
