//! End-to-end training: load, plan, aggregate, assemble, solve, report.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::aggregator::{compute_aggregates, AggregateOptions, RootAggregates};
use crate::catalog::{parse_config, validate_catalog, Catalog, ModelKind, VarKind};
use crate::error::{Error, Result};
use crate::fd::{determined_features, extract_fd_maps, reduce_components, FdContext};
use crate::gram::{GramSystem, Layout};
use crate::planner::{enumerate_components, Component, Plan};
use crate::solver::{bgd_train, Model, Objective, SolverOptions, TrainResult};
use crate::storage::Database;

/// Reads and validates a config file; relation paths resolve against its directory.
pub fn load_catalog(path: &Path) -> Result<(Catalog, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let catalog = validate_catalog(parse_config(&text)?)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((catalog, base))
}

pub fn load_database(catalog: &Catalog, base: &Path) -> Result<Database> {
    Ok(Database::load(catalog, base, b',')?)
}

/// Planned, aggregated and assembled system for the catalog's model.
pub struct Prepared {
    pub full_components: Vec<Component>,
    pub plan: Plan,
    pub roots: RootAggregates,
    pub system: GramSystem,
    pub fd: Option<FdContext>,
    pub plan_time: Duration,
    pub aggregate_time: Duration,
}

pub fn prepare(catalog: &Catalog, db: &Database, options: AggregateOptions) -> Result<Prepared> {
    let full_components = enumerate_components(catalog, catalog.model.kind);
    let maps = if catalog.model.use_fd { Some(extract_fd_maps(catalog, db)?) } else { None };
    let components = match &maps {
        Some(_) => reduce_components(&full_components, &determined_features(catalog)),
        None => full_components.clone(),
    };
    let t = Instant::now();
    let plan = Plan::build(catalog, components)?;
    let plan_time = t.elapsed();
    let t = Instant::now();
    let roots = compute_aggregates(&plan.vorder, &plan.registers, db, options);
    let aggregate_time = t.elapsed();
    let system = GramSystem::assemble(&plan.aggregates, roots.maps.clone(), &plan.components, &plan.names)?;
    let fd = match &maps {
        Some(m) => Some(FdContext::build(catalog, m, &plan.components, &system.layout)?),
        None => None,
    };
    Ok(Prepared { full_components, plan, roots, system, fd, plan_time, aggregate_time })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub load_ms: f64,
    pub plan_ms: f64,
    pub aggregate_ms: f64,
    pub train_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub model: &'static str,
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    pub distinct_aggregates: usize,
    pub aggregate_entries: usize,
    pub register_entries: usize,
    pub cache_hits: usize,
    pub parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<Timings>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockEntry {
    pub key: Vec<String>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamBlock {
    pub component: String,
    pub entries: Vec<BlockEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorBlock {
    pub rank: usize,
    pub feature: String,
    pub entries: Vec<BlockEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelOutput {
    pub model: &'static str,
    pub lambda: f64,
    pub blocks: Vec<ParamBlock>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactorBlock>,
}

pub struct TrainOutcome {
    pub result: TrainResult,
    /// Parameters laid out by `layout`, mapped back to the full component list
    /// on the FD path. Factorization machines append their factor blocks.
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub model: ModelOutput,
    pub report: RunReport,
}

fn entries(db: &Database, layout: &Layout, i: usize, values: &[f64]) -> Vec<BlockEntry> {
    let dom = &layout.domains[i];
    (0..dom.len())
        .map(|s| BlockEntry {
            key: dom
                .cat
                .iter()
                .zip(dom.key(s))
                .map(|(&v, &id)| db.dict.label(v, id).unwrap_or("?").to_string())
                .collect(),
            value: values[s],
        })
        .collect()
}

/// Runs the whole pipeline; `timings` adds wall-clock timings to the report.
pub fn train(catalog: &Catalog, base: &Path, timings: bool) -> Result<TrainOutcome> {
    let t0 = Instant::now();
    let db = load_database(catalog, base)?;
    let t_load = t0.elapsed();
    let prepared = prepare(catalog, &db, AggregateOptions::default())?;
    let (t_plan, t_agg) = (prepared.plan_time, prepared.aggregate_time);

    let spec = &catalog.model;
    let system = &prepared.system;
    let mut objective = match spec.kind {
        ModelKind::Lr | ModelKind::Pr2 => Objective::linear(system, spec.lambda),
        ModelKind::Fama => Objective::fama(system, spec.rank, spec.lambda),
    };
    if let Some(ctx) = &prepared.fd {
        objective = objective.with_fd(ctx);
    }
    let opts = SolverOptions {
        max_iters: spec.max_iters,
        tolerance: spec.tolerance,
        seed: spec.seed,
        ..SolverOptions::default()
    };
    let t3 = Instant::now();
    let result = bgd_train(&objective, &opts)?;
    let t_train = t3.elapsed();
    log::info!(
        "trained {} in {} iterations, J = {:.6e}, converged = {}",
        spec.kind.as_str(),
        result.iterations,
        result.objective,
        result.converged
    );

    let names = &prepared.plan.names;
    let (layout, theta) = match &prepared.fd {
        Some(ctx) => ctx.theta_from_gamma(&prepared.plan.components, &system.layout, &result.theta, &prepared.full_components)?,
        None => (system.layout.clone(), result.theta.clone()),
    };
    let direct_blocks = match &objective.model {
        Model::Linear => prepared.full_components.len(),
        Model::Fama(_) => prepared.full_components.iter().filter(|h| h.factors.len() <= 1).count(),
    };
    let blocks = (0..direct_blocks)
        .map(|i| ParamBlock {
            component: prepared.full_components[i].name(names),
            entries: entries(&db, &layout, i, &theta[layout.range(i)]),
        })
        .collect();
    let mut factors = Vec::new();
    if let Model::Fama(f) = &objective.model {
        for l in 0..f.rank {
            for (fi, i) in (1..direct_blocks).enumerate() {
                let len = layout.domains[i].len();
                factors.push(FactorBlock {
                    rank: l + 1,
                    feature: prepared.full_components[i].name(names),
                    entries: entries(&db, &layout, i, f.factor_block(&result.theta, l, fi, len)),
                });
            }
        }
    }
    let model = ModelOutput { model: spec.kind.as_str(), lambda: spec.lambda, blocks, factors };
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let report = RunReport {
        model: spec.kind.as_str(),
        iterations: result.iterations,
        final_objective: result.objective,
        converged: result.converged,
        distinct_aggregates: prepared.plan.aggregates.monomials.len(),
        aggregate_entries: prepared.roots.total_entries(),
        register_entries: prepared.plan.registers.total_entries(),
        cache_hits: prepared.roots.stats.cache_hits,
        parameters: result.theta.len(),
        timings_ms: timings.then(|| Timings {
            load_ms: ms(t_load),
            plan_ms: ms(t_plan),
            aggregate_ms: ms(t_agg),
            train_ms: ms(t_train),
        }),
    };
    log::info!(
        "timings: load {:.3} ms, plan {:.3} ms, aggregate {:.3} ms, train {:.3} ms",
        ms(t_load),
        ms(t_plan),
        ms(t_agg),
        ms(t_train)
    );
    Ok(TrainOutcome { result, layout, theta, model, report })
}

/// Human-readable dump of every root aggregate with category labels.
pub fn describe_aggregates(prepared: &Prepared, db: &Database) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let names = &prepared.plan.names;
    for (m, map) in prepared.plan.aggregates.monomials.iter().zip(&prepared.roots.maps) {
        let _ = writeln!(out, "{} [{} entries]", m.display(names), map.len());
        for (key, v) in map.iter() {
            let labels: Vec<String> = map
                .group_by
                .iter()
                .zip(key)
                .map(|(&var, &id)| format!("{}={}", names[var], db.dict.label(var, id).unwrap_or("?")))
                .collect();
            let _ = writeln!(out, "  ({}) {}", labels.join(", "), v);
        }
    }
    let s = prepared.roots.stats;
    let _ = writeln!(out, "cache hits {} misses {}", s.cache_hits, s.cache_misses);
    out
}

/// Per FD group: determinant domain size, nonzeros and the diagonal of `B`.
pub fn describe_fds(catalog: &Catalog, prepared: &Prepared, db: &Database) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let Some(ctx) = &prepared.fd else {
        return out;
    };
    let layout = &prepared.system.layout;
    for g in &ctx.groups {
        let f = &catalog.variables[g.determinant].name;
        let det: Vec<&str> = g.determined.iter().map(|(c, _)| catalog.variables[*c].name.as_str()).collect();
        let _ = writeln!(out, "{f} -> {}: domain {} nnz {}", det.join(", "), g.b.dim(), g.b.nnz());
        let dom = &layout.domains[g.block];
        for (s, d) in g.b.diagonal().iter().enumerate() {
            let label = db.dict.label(g.determinant, dom.key(s)[0]).unwrap_or("?");
            let _ = writeln!(out, "  {label} {d}");
        }
    }
    out
}

/// Dense oracle dump over the full component list.
pub fn describe_oracle(catalog: &Catalog, db: &Database) -> Result<String> {
    use std::fmt::Write as _;
    let kinds: Vec<VarKind> = catalog.variables.iter().map(|v| v.kind).collect();
    let components = enumerate_components(catalog, catalog.model.kind);
    let join = crate::oracle::materialize_join(db, catalog.variables.len());
    let response = catalog.response().expect("validated catalog has a response");
    let dense = crate::oracle::dense_gram(&join, &components, &kinds, response)?;
    let mut out = String::new();
    let _ = writeln!(out, "count {}", dense.count);
    let _ = writeln!(out, "s_y {}", dense.s_y);
    for row in &dense.sigma {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "sigma {}", cells.join(" "));
    }
    let cells: Vec<String> = dense.c.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "c {}", cells.join(" "));
    Ok(out)
}
