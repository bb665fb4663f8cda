use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use vicl::construction::{
    construct_context, construct_context_multi_output, construct_relu_rescaled, ConstructionConfig, ConstructionReport,
    Target,
};
use vicl::embedding::{embed_fnn, embed_softmax_fnn, AUDIT_REFINEMENT};
use vicl::fnn::{fit_fnn, fnn_forward, BiasSampling, FitOptions, FnnParams, Sample};
use vicl::kronecker::{kronecker_search, verify_exact};
use vicl::nonuap::{nonuap_audit, zero_bound_fuzz};
use vicl::transformer::transformer_readout;
use vicl::vocab_pe::{density_audit, dyadic_covering_radius, PeKind, Region, Vocabulary};

use crate::config::{
    AuditConfig, BetaSpec, ConstructConfig, DensityConfig, EmbedConfig, EmbedFlow, KroneckerConfig, NetworkSpec,
    TargetSpec,
};
use crate::expr::Expr;
use crate::output::{header, numbered, Cell, Output};
use crate::CliError;

fn build_network(spec: &NetworkSpec, input_dim: usize, d_y: usize, run_seed: u64) -> Result<FnnParams, CliError> {
    let net = match spec {
        NetworkSpec::Random { k, activation, w_scale, seed } => {
            vicl::random::fnn(input_dim, d_y, *k, activation.clone(), *w_scale, seed.unwrap_or(run_seed))?
        }
        NetworkSpec::Params { params } => params.clone(),
        NetworkSpec::Fit { target, k, activation, samples } => {
            let grid = samples.build()?;
            if grid.dim() != input_dim {
                return Err(CliError::config("network.samples", "dimension differs from input_dim"));
            }
            let exprs = target.parse("network.target", input_dim)?;
            let data: Vec<Sample> = grid
                .points()
                .iter()
                .map(|p| (p.clone(), exprs.iter().map(|e| e.eval(p)).collect()))
                .collect();
            let opts = FitOptions {
                bias: BiasSampling::DataCentered,
                ..FitOptions::default()
            };
            fit_fnn(&data, *k, activation, run_seed, &opts)?.params
        }
    };
    if net.input_dim() != input_dim || net.output_dim() != d_y {
        return Err(CliError::config(
            "network",
            format!(
                "maps {} → {}; the run needs {input_dim} → {d_y}",
                net.input_dim(),
                net.output_dim()
            ),
        ));
    }
    Ok(net)
}

pub fn embed(cfg: EmbedConfig, out: &Output) -> Result<(), CliError> {
    let d_x = cfg.input_dim + 1;
    let tp = cfg.transformer.build(d_x, cfg.d_y, cfg.seed)?;
    let net = build_network(&cfg.network, cfg.input_dim, cfg.d_y, cfg.seed)?;
    let grid = cfg.grid.build()?;
    if grid.dim() != cfg.input_dim {
        return Err(CliError::config("grid", "dimension differs from input_dim"));
    }
    let (emb, points) = match cfg.flow {
        EmbedFlow::Exact => (embed_fnn(&tp, &net)?, grid.points().to_vec()),
        EmbedFlow::Softmax => {
            let eps = cfg
                .epsilon
                .ok_or_else(|| CliError::config("epsilon", "required for the softmax flow"))?;
            let emb = embed_softmax_fnn(&tp, &net, &grid, eps)?;
            (emb, grid.refined(AUDIT_REFINEMENT).points().to_vec())
        }
    };
    let act = emb.readout_activation(net.activation());
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = points
        .par_iter()
        .map(|p| -> Result<_, vicl::Error> {
            let got = transformer_readout(&tp, &emb.assemble(p)?, &act)?;
            let want = fnn_forward(&net, p)?;
            let gap = vicl::linalg::max_abs_diff(got.as_slice(), want.as_slice());
            let mut vals = want.as_slice().to_vec();
            vals.extend_from_slice(got.as_slice());
            Ok((vals, p.clone(), gap))
        })
        .collect::<Result<_, _>>()?;
    let max_gap = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let mut cols = numbered("x", cfg.input_dim);
    cols.extend(numbered("fnn", cfg.d_y));
    cols.extend(numbered("readout", cfg.d_y));
    cols.push("gap".into());
    out.csv(
        "gap.csv",
        &cols,
        rows.iter().map(|(vals, p, gap)| {
            p.iter().chain(vals).map(|&v| Cell::F(v)).chain([Cell::F(*gap)]).collect()
        }),
    )?;
    out.json(
        "embedding.json",
        &json!({
            "flow": cfg.flow,
            "transformer": tp,
            "network": net,
            "embedding": emb,
            "audit_points": points.len(),
            "max_gap": max_gap,
        }),
    )
}

fn construct_report(cfg: &ConstructConfig) -> Result<ConstructionReport, CliError> {
    let grid = cfg.domain.build()?;
    let dim = grid.dim();
    let d_x = dim + 1;
    let exprs: Vec<Expr>;
    let (target, d_y) = match &cfg.target {
        TargetSpec::Expressions(list) => {
            exprs = list.parse("target", dim)?;
            (None, exprs.len())
        }
        TargetSpec::Network { network } => {
            exprs = Vec::new();
            (Some(network), network.output_dim())
        }
    };
    let tp = cfg.transformer.build(d_x, d_y, cfg.seed)?;
    let vocab = cfg.vocabulary.build(d_x, d_y)?;
    let mut cc = ConstructionConfig::new(cfg.epsilon, cfg.activation.clone());
    cc.budgets = cfg.budgets;
    cc.seed = cfg.seed;
    if let Some(t) = cfg.tolerance {
        cc.tolerance = t;
    }
    if let Some(q) = cfg.q_cap {
        cc.q_cap = q;
    }
    if let Some(j) = cfg.j_cap {
        cc.j_cap = j;
    }
    if let Some(r) = cfg.audit_refinement {
        cc.audit_refinement = r;
    }
    if let Some(f) = &cfg.fit {
        if let Some(n) = &f.neurons {
            cc.fit.neurons = n.clone();
        }
        if let Some(s) = f.seeds_per_size {
            cc.fit.seeds_per_size = s;
        }
        if let Some(w) = f.weight_scale {
            cc.fit.options.weight_scale = w;
        }
        if let Some(r) = f.refine_iters {
            cc.fit.options.refine_iters = r;
        }
    }
    let f = |x: &[f64]| exprs.iter().map(|e| e.eval(x)).collect::<Vec<f64>>();
    let target = match target {
        Some(net) => Target::Network(net),
        None => Target::Function { f: &f, d_y },
    };
    let scheme = &cfg.scheme;
    let report = match cfg.rescale {
        Some(policy) => construct_relu_rescaled(target, &grid, &vocab, scheme, &tp, &cc, policy)?,
        None if d_y == 1 => construct_context(target, &grid, &vocab, scheme, &tp, &cc)?,
        None => construct_context_multi_output(target, &grid, &vocab, scheme, &tp, &cc)?,
    };
    Ok(report)
}

pub fn construct(cfg: ConstructConfig, out: &Output) -> Result<(), CliError> {
    let report = construct_report(&cfg)?;
    let d_y = report.context.d_y;
    let mut cols = header(&["position", "vocab_index", "vy_index", "role", "component", "neuron"]);
    cols.extend(numbered("y", d_y));
    out.csv(
        "tokens.csv",
        &cols,
        report.context.tokens.iter().map(|t| {
            let mut row = vec![
                Cell::from(t.position),
                Cell::from(t.vocab_index),
                Cell::from(t.vy_index),
                Cell::from(t.role.as_str()),
                Cell::from(t.component),
                Cell::from(t.neuron),
            ];
            row.extend(t.y.iter().map(|&v| Cell::F(v)));
            row
        }),
    )?;
    out.csv(
        "error_vs_n.csv",
        &header(&["n", "sup_error"]),
        report.error_vs_n.iter().map(|&(n, e)| vec![Cell::from(n), Cell::F(e)]),
    )?;
    out.json("report.json", &report)
}

#[derive(Serialize)]
struct DensitySummary {
    probes: usize,
    vocab_size: usize,
    n_max: usize,
    final_radius: f64,
    first_below: Vec<(f64, Option<usize>)>,
    closed_form_max_deviation: Option<f64>,
}

/// Closed-form radius at `n = 2^m − 1` for a one-dimensional dyadic scheme over `{0}`.
fn dyadic_closed_form(cfg: &DensityConfig, n: usize) -> Option<f64> {
    let one_d_origin = cfg.vx.len() == 1 && cfg.vx[0] == [0.0];
    let (PeKind::DyadicLattice, Region::Box { lo, hi }) = (cfg.scheme.kind(), cfg.scheme.region()) else {
        return None;
    };
    let same_box = cfg.probe_lo == *lo && cfg.probe_hi == *hi;
    if !one_d_origin || !same_box || !(n + 1).is_power_of_two() {
        return None;
    }
    Some(dyadic_covering_radius(lo[0], hi[0], (n + 1).trailing_zeros()))
}

pub fn density(cfg: &DensityConfig, out: &Output) -> Result<(), CliError> {
    let dim = cfg.scheme.dim();
    let vocab = Vocabulary::new(cfg.vx.clone(), vec![vec![0.0]])?;
    if vocab.d_x() != dim {
        return Err(CliError::config("vx", format!("points must have dimension {dim}")));
    }
    let profile = density_audit(&vocab, &cfg.scheme, (&cfg.probe_lo, &cfg.probe_hi), cfg.n_max, cfg.probes_per_axis)?;
    let mut deviation: Option<f64> = None;
    let rows: Vec<Vec<Cell>> = profile
        .rows()
        .map(|(n, r)| {
            let cf = dyadic_closed_form(cfg, n);
            if let Some(c) = cf {
                deviation = Some(deviation.unwrap_or(0.0).max((c - r).abs()));
            }
            vec![Cell::from(n), Cell::F(r), cf.map_or(Cell::S(String::new()), Cell::F)]
        })
        .collect();
    out.csv("density.csv", &header(&["n", "covering_radius", "closed_form"]), rows)?;
    let summary = DensitySummary {
        probes: profile.probes,
        vocab_size: profile.vocab_size,
        n_max: profile.n_max(),
        final_radius: profile.radius(profile.n_max()),
        first_below: [0.5, 0.2, 0.1, 0.05, 0.02].iter().map(|&t| (t, profile.first_below(t))).collect(),
        closed_form_max_deviation: deviation,
    };
    out.json("density.json", &summary)
}

pub fn audit(cfg: AuditConfig, out: &Output) -> Result<(), CliError> {
    match cfg {
        AuditConfig::ZeroFuzz { seed, trials, separation, grid_points } => {
            let r = zero_bound_fuzz(trials, seed, separation, grid_points)?;
            out.csv(
                "zero_fuzz.csv",
                &header(&["trial", "k", "sign_changes", "violation"]),
                r.records.iter().map(|t| {
                    vec![Cell::from(t.trial), Cell::from(t.k), Cell::from(t.sign_changes), Cell::from(t.violation)]
                }),
            )?;
            out.json(
                "zero_fuzz.json",
                &json!({
                    "trials": r.trials,
                    "violations": r.violations,
                    "max_sign_changes_minus_k": r.max_sign_changes_minus_k,
                    "separation": separation,
                    "grid_points": grid_points,
                }),
            )
        }
        AuditConfig::Nonuap { seed, family, max_context, trials } => {
            if max_context.is_empty() {
                return Err(CliError::config("max_context", "needs at least one cap"));
            }
            let audits = max_context
                .iter()
                .map(|&m| nonuap_audit(&family, m, trials, seed))
                .collect::<Result<Vec<_>, _>>()?;
            out.csv(
                "nonuap.csv",
                &header(&["max_context", "trial", "context_length", "minmax_error", "distinct_terms"]),
                audits.iter().flat_map(|a| {
                    a.records.iter().map(move |r| {
                        vec![
                            Cell::from(a.max_context),
                            Cell::from(r.trial),
                            Cell::from(r.context_length),
                            Cell::F(r.minmax_error),
                            Cell::from(r.distinct_terms),
                        ]
                    })
                }),
            )?;
            let summaries: Vec<_> = audits
                .iter()
                .map(|a| {
                    json!({
                        "max_context": a.max_context,
                        "trials": a.trials,
                        "n": a.n,
                        "term_cap_holds": a.term_cap_holds,
                        "max_distinct_terms": a.max_distinct_terms,
                        "certified_floor": a.certified_floor,
                        "empirical_floor": a.empirical_floor,
                    })
                })
                .collect();
            out.json("nonuap.json", &json!({"family": family, "audits": summaries}))
        }
        AuditConfig::Density(d) => density(&d, out),
    }
}

#[derive(Serialize)]
struct KroneckerRow {
    beta: f64,
    q: u64,
    l: i64,
    achieved_error: f64,
    verified: bool,
}

pub fn kronecker(cfg: KroneckerConfig, out: &Output) -> Result<(), CliError> {
    let betas = match &cfg.betas {
        BetaSpec::List(v) => v.clone(),
        BetaSpec::Random { count, lo, hi } => {
            if !(lo < hi) {
                return Err(CliError::config("betas", "need lo < hi"));
            }
            let mut rng = vicl::random::rng(cfg.seed);
            (0..*count).map(|_| rng.gen_range(*lo..*hi)).collect()
        }
    };
    let rows: Vec<KroneckerRow> = betas
        .par_iter()
        .map(|&beta| {
            let w = kronecker_search(beta, cfg.epsilon, cfg.q_cap)?;
            Ok(KroneckerRow {
                beta,
                q: w.q,
                l: w.l,
                achieved_error: w.achieved_error,
                verified: verify_exact(beta, cfg.epsilon, w.q, w.l),
            })
        })
        .collect::<Result<_, vicl::Error>>()?;
    out.csv(
        "kronecker.csv",
        &header(&["beta", "q", "l", "achieved_error", "verified"]),
        rows.iter().map(|r| {
            vec![Cell::F(r.beta), Cell::from(r.q), Cell::from(r.l), Cell::F(r.achieved_error), Cell::from(r.verified)]
        }),
    )?;
    let all_verified = rows.iter().all(|r| r.verified);
    out.json(
        "kronecker.json",
        &json!({"epsilon": cfg.epsilon, "q_cap": cfg.q_cap, "all_verified": all_verified, "witnesses": rows}),
    )?;
    if !all_verified {
        return Err(vicl::Error::Numerical("a witness failed exact verification".into()).into());
    }
    Ok(())
}
