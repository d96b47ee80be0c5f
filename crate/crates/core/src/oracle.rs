//! Brute-force reference. Materializes the join with nested loops, one-hot
//! encodes every component and evaluates Σ, c and s_Y literally. Slow on
//! purpose and shares no code path with the factorized engine beyond loading.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use thiserror::Error;

use crate::aggregator::AggregateMap;
use crate::catalog::{VarId, VarKind};
use crate::gram::{GramError, Layout};
use crate::planner::{Component, Monomial};
use crate::storage::{decode_f64, Database};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error("the regularized system is singular")]
    SingularSystem,
}

/// Every tuple of the join as a full assignment, one raw value per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedJoin {
    pub tuples: Vec<Vec<u64>>,
}

impl MaterializedJoin {
    pub fn count(&self) -> usize {
        self.tuples.len()
    }
}

pub fn materialize_join(db: &Database, nvars: usize) -> MaterializedJoin {
    let mut partial: Vec<Vec<Option<u64>>> = vec![vec![None; nvars]];
    for rel in &db.relations {
        let mut next = Vec::new();
        for p in &partial {
            for r in 0..rel.row_count {
                let row = rel.row(r);
                if rel.vars.iter().zip(&row).all(|(&v, &x)| p[v].is_none_or(|y| y == x)) {
                    let mut q = p.clone();
                    for (&v, &x) in rel.vars.iter().zip(&row) {
                        q[v] = Some(x);
                    }
                    next.push(q);
                }
            }
        }
        partial = next;
    }
    let mut tuples: Vec<Vec<u64>> =
        partial.into_iter().map(|p| p.into_iter().map(|x| x.expect("every variable housed")).collect()).collect();
    tuples.sort();
    tuples.dedup();
    MaterializedJoin { tuples }
}

/// `SUM(∏ continuous^e) GROUP BY categorical` for one monomial.
pub fn aggregate(join: &MaterializedJoin, m: &Monomial, kinds: &[VarKind], rank: &[usize]) -> AggregateMap {
    let group_by = m.group_by(kinds, rank);
    AggregateMap::from_entries(
        group_by.clone(),
        join.tuples.iter().map(|x| {
            let key = group_by.iter().map(|&v| x[v] as u32).collect();
            let val = m
                .0
                .iter()
                .filter(|&&(v, _)| kinds[v] == VarKind::Continuous)
                .fold(1.0, |acc, &(v, e)| acc * decode_f64(x[v]).powi(e as i32));
            (key, val)
        }),
    )
}

fn component_key(h: &Component, x: &[u64]) -> Vec<u32> {
    h.cat.iter().map(|&v| x[v] as u32).collect()
}

fn component_value(h: &Component, kinds: &[VarKind], x: &[u64]) -> f64 {
    h.factors.iter().filter(|&&v| kinds[v] == VarKind::Continuous).fold(1.0, |acc, &v| acc * decode_f64(x[v]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGram {
    pub sigma: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub s_y: f64,
    pub count: usize,
    /// Per component, its observed keys in ascending order.
    pub domains: Vec<Vec<Vec<u32>>>,
}

impl DenseGram {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `½ θᵀΣθ − ⟨θ, c⟩ + s_Y/2 + λ/2 ‖θ‖²`.
    pub fn objective(&self, theta: &[f64], lambda: f64) -> f64 {
        let n = self.dim();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += theta[i] * self.sigma[i][j] * theta[j];
            }
        }
        let lin: f64 = (0..n).map(|i| theta[i] * self.c[i]).sum();
        let ridge: f64 = theta.iter().map(|t| t * t).sum();
        0.5 * quad - lin + 0.5 * self.s_y + 0.5 * lambda * ridge
    }
}

pub fn dense_gram(
    join: &MaterializedJoin,
    components: &[Component],
    kinds: &[VarKind],
    response: VarId,
) -> Result<DenseGram, OracleError> {
    let n = join.count();
    if n == 0 {
        return Err(GramError::EmptyTrainingSet.into());
    }
    let domains: Vec<Vec<Vec<u32>>> = components
        .iter()
        .map(|h| join.tuples.iter().map(|x| component_key(h, x)).collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    let mut offsets = vec![0];
    for d in &domains {
        offsets.push(offsets.last().unwrap() + d.len());
    }
    let dim = *offsets.last().unwrap();
    let mut sigma = vec![vec![0.0; dim]; dim];
    let mut c = vec![0.0; dim];
    let mut sum_y2 = 0.0;
    for x in &join.tuples {
        let mut h = vec![0.0; dim];
        for (i, comp) in components.iter().enumerate() {
            let pos = domains[i].binary_search(&component_key(comp, x)).expect("key observed");
            h[offsets[i] + pos] = component_value(comp, kinds, x);
        }
        let y = decode_f64(x[response]);
        for a in 0..dim {
            for b in 0..dim {
                sigma[a][b] += h[a] * h[b];
            }
            c[a] += y * h[a];
        }
        sum_y2 += y * y;
    }
    let nf = n as f64;
    for row in &mut sigma {
        for v in row.iter_mut() {
            *v /= nf;
        }
    }
    for v in &mut c {
        *v /= nf;
    }
    Ok(DenseGram { sigma, c, s_y: sum_y2 / nf, count: n, domains })
}

/// Solves `(Σ + λI) θ = c` by LU decomposition with partial pivoting.
pub fn ridge_closed_form(dense: &DenseGram, lambda: f64) -> Result<Vec<f64>, OracleError> {
    let n = dense.dim();
    let a = DMatrix::from_fn(n, n, |i, j| dense.sigma[i][j] + if i == j { lambda } else { 0.0 });
    let b = DVector::from_column_slice(&dense.c);
    let x = a.clone().lu().solve(&b).ok_or(OracleError::SingularSystem)?;
    let residual = (&a * &x - &b).amax();
    let scale = a.amax().max(1.0) * x.amax().max(1.0);
    if !(residual <= 1e-10 * scale) {
        return Err(OracleError::SingularSystem);
    }
    Ok(x.iter().copied().collect())
}

/// `⟨θ, h(x)⟩` for every join tuple, with `θ` laid out by `layout`.
pub fn predict(join: &MaterializedJoin, components: &[Component], kinds: &[VarKind], layout: &Layout, theta: &[f64]) -> Vec<f64> {
    join.tuples
        .iter()
        .map(|x| {
            components
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let pos = layout.domains[i].position(&component_key(h, x)).expect("tuple key in layout");
                    theta[layout.offsets[i] + pos] * component_value(h, kinds, x)
                })
                .sum()
        })
        .collect()
}
