//! The data-dependent part of the objective: the sparse Σ, the vector c and
//! the scalar s_Y, stored as the distinct root aggregates plus the cells each
//! one serves.
//!
//! Parameter vectors are flat: component `i` owns a contiguous block with one
//! slot per key of its active domain (one slot for all-continuous components).
//! Payloads stay unnormalized; every product divides by the count once.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::aggregator::AggregateMap;
use crate::catalog::VarId;
use crate::par::{self, Exec};
use crate::planner::{AggregatePlan, Component};

#[derive(Debug, Error, PartialEq)]
pub enum GramError {
    #[error("the join is empty; there is nothing to train on")]
    EmptyTrainingSet,
    #[error("expected {expected} root aggregates, got {got}")]
    AggregateCount { expected: usize, got: usize },
    #[error("Σ cell ({0}, {1}) is not claimed by exactly one aggregate")]
    Coverage(usize, usize),
    #[error("parameter vector has length {got}, the layout needs {expected}")]
    LayoutMismatch { expected: usize, got: usize },
}

/// Active domain of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDomain {
    pub cat: Vec<VarId>,
    keys: Vec<u32>,
    len: usize,
}

impl BlockDomain {
    pub fn scalar() -> Self {
        BlockDomain { cat: Vec::new(), keys: Vec::new(), len: 1 }
    }

    /// Domain from sorted, distinct keys of arity `cat.len()`.
    pub fn from_sorted_keys(cat: Vec<VarId>, keys: Vec<u32>) -> Self {
        if cat.is_empty() {
            return BlockDomain::scalar();
        }
        let len = keys.len() / cat.len();
        let d = BlockDomain { cat, keys, len };
        debug_assert!((1..d.len).all(|i| d.key(i - 1) < d.key(i)), "domain keys sorted");
        d
    }

    fn of_map(map: &AggregateMap) -> Self {
        let keys = map.iter().flat_map(|(k, _)| k.iter().copied()).collect();
        BlockDomain::from_sorted_keys(map.group_by.clone(), keys)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key(&self, i: usize) -> &[u32] {
        let a = self.cat.len();
        &self.keys[i * a..(i + 1) * a]
    }

    pub fn position(&self, key: &[u32]) -> Option<usize> {
        if self.cat.is_empty() {
            return Some(0);
        }
        let (mut lo, mut hi) = (0, self.len);
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.key(mid).cmp(key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }
}

/// Block offsets of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub domains: Vec<BlockDomain>,
    pub offsets: Vec<usize>,
}

impl Layout {
    pub fn new(domains: Vec<BlockDomain>) -> Self {
        let mut offsets = Vec::with_capacity(domains.len() + 1);
        let mut at = 0;
        for d in &domains {
            offsets.push(at);
            at += d.len();
        }
        offsets.push(at);
        Layout { domains, offsets }
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().expect("sentinel offset")
    }

    pub fn blocks(&self) -> usize {
        self.domains.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn check(&self, v: &[f64]) -> Result<(), GramError> {
        if v.len() == self.dim() {
            Ok(())
        } else {
            Err(GramError::LayoutMismatch { expected: self.dim(), got: v.len() })
        }
    }
}

/// One side of a cell: the component and, per aggregate entry, the slot in
/// that component's block.
#[derive(Debug, Clone)]
struct CellSide {
    comp: usize,
    proj: usize,
}

#[derive(Debug, Clone)]
struct SigmaCell {
    i: CellSide,
    j: CellSide,
}

#[derive(Debug, Clone)]
pub struct GramAggregate {
    pub monomial_name: String,
    pub map: AggregateMap,
    pub sigma_cells: Vec<(usize, usize)>,
    pub c_cells: Vec<usize>,
    /// Entry → block-slot projections, shared by cells with equal categorical sets.
    projections: Vec<Vec<u32>>,
    cells: Vec<SigmaCell>,
    c_sides: Vec<CellSide>,
}

/// Where a component's block receives contributions from.
#[derive(Debug, Clone, Copy)]
struct Gather {
    aggregate: usize,
    cell: usize,
    /// `true` when this component is the cell's `i` side.
    as_i: bool,
}

#[derive(Debug)]
pub struct GramSystem {
    pub components: Vec<Component>,
    pub component_names: Vec<String>,
    pub layout: Layout,
    pub aggregates: Vec<GramAggregate>,
    pub count: f64,
    pub sum_y2: f64,
    c: Vec<f64>,
    gathers: Vec<Vec<Gather>>,
    exec: Exec,
    sigma_products: AtomicUsize,
}

impl GramSystem {
    /// Builds the system from the root aggregates, in plan order.
    pub fn assemble(
        plan: &AggregatePlan,
        roots: Vec<AggregateMap>,
        components: &[Component],
        names: &[String],
    ) -> Result<GramSystem, GramError> {
        if roots.len() != plan.monomials.len() {
            return Err(GramError::AggregateCount { expected: plan.monomials.len(), got: roots.len() });
        }
        let count = roots[plan.count].total();
        if count <= 0.0 {
            return Err(GramError::EmptyTrainingSet);
        }
        let m = components.len();

        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (a, cells) in plan.sigma_cells.iter().enumerate() {
            for &cell in cells {
                if owner.insert(cell, a).is_some() {
                    return Err(GramError::Coverage(cell.0, cell.1));
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                if !owner.contains_key(&(i, j)) {
                    return Err(GramError::Coverage(i, j));
                }
            }
        }

        let domains: Vec<BlockDomain> = (0..m).map(|i| BlockDomain::of_map(&roots[owner[&(i, i)]])).collect();
        let layout = Layout::new(domains);

        let mut aggregates = Vec::with_capacity(roots.len());
        for (a, map) in roots.into_iter().enumerate() {
            let mut projections: Vec<Vec<u32>> = Vec::new();
            let mut proj_of: HashMap<Vec<VarId>, usize> = HashMap::new();
            let mut side = |comp: usize| -> CellSide {
                let cat = &components[comp].cat;
                let proj = *proj_of.entry(cat.clone()).or_insert_with(|| {
                    let cols: Vec<usize> =
                        cat.iter().map(|v| map.group_by.iter().position(|g| g == v).expect("component key in aggregate")).collect();
                    let dom = &layout.domains[comp];
                    let mut key = vec![0u32; cols.len()];
                    projections.push(
                        map.iter()
                            .map(|(k, _)| {
                                for (t, &c) in key.iter_mut().zip(&cols) {
                                    *t = k[c];
                                }
                                dom.position(&key).expect("aggregate key inside active domain") as u32
                            })
                            .collect(),
                    );
                    projections.len() - 1
                });
                CellSide { comp, proj }
            };
            let cells: Vec<SigmaCell> = plan.sigma_cells[a].iter().map(|&(i, j)| SigmaCell { i: side(i), j: side(j) }).collect();
            let c_sides: Vec<CellSide> = plan.c_cells[a].iter().map(|&i| side(i)).collect();
            aggregates.push(GramAggregate {
                monomial_name: plan.monomials[a].display(names),
                map,
                sigma_cells: plan.sigma_cells[a].clone(),
                c_cells: plan.c_cells[a].clone(),
                projections,
                cells,
                c_sides,
            });
        }

        let mut gathers: Vec<Vec<Gather>> = vec![Vec::new(); m];
        for (a, agg) in aggregates.iter().enumerate() {
            for (ci, cell) in agg.cells.iter().enumerate() {
                gathers[cell.i.comp].push(Gather { aggregate: a, cell: ci, as_i: true });
                if cell.i.comp != cell.j.comp {
                    gathers[cell.j.comp].push(Gather { aggregate: a, cell: ci, as_i: false });
                }
            }
        }

        let mut c = vec![0.0; layout.dim()];
        for agg in &aggregates {
            for side in &agg.c_sides {
                let off = layout.offsets[side.comp];
                for (e, &slot) in agg.projections[side.proj].iter().enumerate() {
                    c[off + slot as usize] += agg.map.value(e);
                }
            }
        }
        for x in &mut c {
            *x /= count;
        }
        let sum_y2 = plan.y_squared.map_or(0.0, |i| aggregates[i].map.total());

        Ok(GramSystem {
            components: components.to_vec(),
            component_names: components.iter().map(|h| h.name(names)).collect(),
            layout,
            aggregates,
            count,
            sum_y2,
            c,
            gathers,
            exec: Exec::default(),
            sigma_products: AtomicUsize::new(0),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// `s_Y`: mean of the squared response.
    pub fn s_y(&self) -> f64 {
        self.sum_y2 / self.count
    }

    /// Number of Σ-vector products evaluated so far.
    pub fn sigma_products(&self) -> usize {
        self.sigma_products.load(Ordering::Relaxed)
    }

    /// `p = Σ g`. Each block gathers its own contributions in a fixed order, so
    /// the result does not depend on the execution mode.
    pub fn sigma_times(&self, g: &[f64]) -> Result<Vec<f64>, GramError> {
        self.layout.check(g)?;
        self.sigma_products.fetch_add(1, Ordering::Relaxed);
        let blocks = par::map_indices(self.exec, self.layout.blocks(), |i| self.gather_block(i, g));
        Ok(blocks.concat())
    }

    fn gather_block(&self, i: usize, g: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.domains[i].len()];
        for gather in &self.gathers[i] {
            let agg = &self.aggregates[gather.aggregate];
            let cell = &agg.cells[gather.cell];
            let (mine, other) = if gather.as_i { (&cell.i, &cell.j) } else { (&cell.j, &cell.i) };
            let src = &g[self.layout.range(other.comp)];
            let to = &agg.projections[mine.proj];
            let from = &agg.projections[other.proj];
            for (e, &v) in agg.map.values().iter().enumerate() {
                p[to[e] as usize] += v * src[from[e] as usize];
            }
        }
        for x in &mut p {
            *x /= self.count;
        }
        p
    }

    /// `uᵀ Σ v`.
    pub fn quadratic_form(&self, u: &[f64], v: &[f64]) -> Result<f64, GramError> {
        self.layout.check(u)?;
        Ok(dot(u, &self.sigma_times(v)?))
    }

    /// `⟨u, c⟩`.
    pub fn dot_c(&self, u: &[f64]) -> Result<f64, GramError> {
        self.layout.check(u)?;
        Ok(dot(u, &self.c))
    }

    /// Expands Σ to a dense symmetric matrix in layout order.
    pub fn dense_sigma(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut s = vec![vec![0.0; n]; n];
        for agg in &self.aggregates {
            for cell in &agg.cells {
                let (oi, oj) = (self.layout.offsets[cell.i.comp], self.layout.offsets[cell.j.comp]);
                let (pi, pj) = (&agg.projections[cell.i.proj], &agg.projections[cell.j.proj]);
                for (e, &v) in agg.map.values().iter().enumerate() {
                    let (r, c) = (oi + pi[e] as usize, oj + pj[e] as usize);
                    s[r][c] += v;
                    if cell.i.comp != cell.j.comp {
                        s[c][r] += v;
                    }
                }
            }
        }
        for row in &mut s {
            for x in row.iter_mut() {
                *x /= self.count;
            }
        }
        s
    }

    /// Total entries over all distinct aggregate maps.
    pub fn total_entries(&self) -> usize {
        self.aggregates.iter().map(|a| a.map.len()).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}
