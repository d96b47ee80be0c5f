//! Reparameterization of linear regression under groups of simple functional
//! dependencies `f -> S`.
//!
//! The parameters of the determined features are folded into a new block
//! `γ_f = Σ_{c ∈ {f} ∪ S} R_cᵀ θ_c` and the ridge penalty becomes
//! `⟨γ_f, B⁻¹ γ_f⟩` with `B = I + Σ_{c ∈ S} R_cᵀ R_c` over the active domain of
//! `f`. Training happens entirely over `γ`; `theta_from_gamma` maps back.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::catalog::{Catalog, VarId, VarRole};
use crate::gram::{BlockDomain, GramError, Layout};
use crate::planner::Component;
use crate::storage::Database;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("`{determinant}` -> `{determined}` does not hold: value `{value}` maps to two values")]
    Violation { determinant: String, determined: String, value: String },
    #[error("no relation contains both `{determinant}` and `{determined}`")]
    MissingCooccurrence { determinant: String, determined: String },
    #[error("determinant `{0}` must be a feature of the model")]
    DeterminantNotFeature(String),
    #[error("value `{value}` of `{determinant}` has no `{determined}` value")]
    MissingImage { determinant: String, determined: String, value: String },
    #[error(transparent)]
    Layout(#[from] GramError),
}

/// The observed function `determinant value -> determined value`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdMap {
    pub determined: VarId,
    pub image: BTreeMap<u32, u32>,
}

impl FdMap {
    /// Inverse view: determined value -> determinant values, both ascending.
    pub fn groups(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&f, &c) in &self.image {
            out.entry(c).or_default().push(f);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGroupMaps {
    pub determinant: VarId,
    pub maps: Vec<FdMap>,
}

/// Reads each FD off a relation carrying both sides and checks that it holds.
pub fn extract_fd_maps(catalog: &Catalog, db: &Database) -> Result<Vec<FdGroupMaps>, FdError> {
    let name = |v: VarId| catalog.variables[v].name.clone();
    let mut out = Vec::with_capacity(catalog.fds.len());
    for fd in &catalog.fds {
        let f = fd.determinant;
        let mut maps = Vec::with_capacity(fd.determined.len());
        for &c in &fd.determined {
            let rel = db
                .relations
                .iter()
                .find(|r| r.column(f).is_some() && r.column(c).is_some())
                .ok_or_else(|| FdError::MissingCooccurrence { determinant: name(f), determined: name(c) })?;
            let (fs, cs) = (rel.column(f).expect("checked"), rel.column(c).expect("checked"));
            let mut image = BTreeMap::new();
            for (&fv, &cv) in fs.iter().zip(cs) {
                let (fv, cv) = (fv as u32, cv as u32);
                if let Some(prev) = image.insert(fv, cv) {
                    if prev != cv {
                        return Err(FdError::Violation {
                            determinant: name(f),
                            determined: name(c),
                            value: db.dict.label(f, fv).unwrap_or("?").to_string(),
                        });
                    }
                }
            }
            maps.push(FdMap { determined: c, image });
        }
        out.push(FdGroupMaps { determinant: f, maps });
    }
    Ok(out)
}

/// Feature variables some FD determines.
pub fn determined_features(catalog: &Catalog) -> BTreeSet<VarId> {
    catalog
        .fds
        .iter()
        .flat_map(|fd| fd.determined.iter().copied())
        .filter(|&v| catalog.variables[v].role == VarRole::Feature)
        .collect()
}

/// Drops every component that mentions a determined feature.
pub fn reduce_components(components: &[Component], determined: &BTreeSet<VarId>) -> Vec<Component> {
    components.iter().filter(|h| !h.factors.iter().any(|v| determined.contains(v))).cloned().collect()
}

/// `I + Σ_c R_cᵀ R_c` as sparse rows, with a Cholesky factorization per
/// connected block of positions linked by shared determined values.
#[derive(Debug, Clone)]
pub struct BMatrix {
    n: usize,
    rows: Vec<BTreeMap<usize, f64>>,
    blocks: Vec<Vec<usize>>,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl BMatrix {
    /// `images[c][j]` is the determined value of `c` at domain position `j`.
    pub fn assemble(n: usize, images: &[Vec<u32>]) -> BMatrix {
        let mut rows: Vec<BTreeMap<usize, f64>> = (0..n).map(|j| BTreeMap::from([(j, 1.0)])).collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for img in images {
            assert_eq!(img.len(), n, "one image per domain position");
            let mut by_value: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (j, &v) in img.iter().enumerate() {
                by_value.entry(v).or_default().push(j);
            }
            for members in by_value.values() {
                for &j in members {
                    for &k in members {
                        *rows[j].entry(k).or_insert(0.0) += 1.0;
                    }
                }
                for w in members.windows(2) {
                    let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut block_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for j in 0..n {
            let r = find(&mut parent, j);
            block_of.entry(r).or_default().push(j);
        }
        let blocks: Vec<Vec<usize>> = block_of.into_values().collect();
        let factors = blocks
            .iter()
            .map(|b| {
                let m = DMatrix::from_fn(b.len(), b.len(), |i, j| rows[b[i]].get(&b[j]).copied().unwrap_or(0.0));
                Cholesky::new(m).expect("identity plus a Gram matrix is positive definite")
            })
            .collect();
        BMatrix { n, rows, blocks, factors }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.rows[j].get(&k).copied().unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, j)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|j| (0..self.n).map(|k| self.get(j, k)).collect()).collect()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(&k, &b)| b * x[k]).sum()).collect()
    }

    /// `B⁻¹ v`, one triangular solve pair per block.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (block, chol) in self.blocks.iter().zip(&self.factors) {
            let y = chol.solve(&DVector::from_iterator(block.len(), block.iter().map(|&j| v[j])));
            for (&j, &yi) in block.iter().zip(y.iter()) {
                x[j] = yi;
            }
        }
        x
    }

    /// `‖B x − v‖∞`.
    pub fn residual(&self, x: &[f64], v: &[f64]) -> f64 {
        self.mul(x).iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct FdGroup {
    pub determinant: VarId,
    /// Determined features, each with its value at every domain position.
    pub determined: Vec<(VarId, Vec<u32>)>,
    /// Block of the determinant in the reduced layout.
    pub block: usize,
    pub b: BMatrix,
}

/// Everything the γ-space penalty and the map back to θ need.
#[derive(Debug, Clone, Default)]
pub struct FdContext {
    pub groups: Vec<FdGroup>,
}

impl FdContext {
    /// Builds `B` for every group over the determinant's block domain in the
    /// reduced layout.
    pub fn build(
        catalog: &Catalog,
        maps: &[FdGroupMaps],
        components: &[Component],
        layout: &Layout,
    ) -> Result<FdContext, FdError> {
        let name = |v: VarId| catalog.variables[v].name.clone();
        let mut groups = Vec::with_capacity(maps.len());
        for g in maps {
            let f = g.determinant;
            let block = components
                .iter()
                .position(|h| h.factors == [f])
                .ok_or_else(|| FdError::DeterminantNotFeature(name(f)))?;
            let dom = &layout.domains[block];
            let mut determined = Vec::new();
            for m in &g.maps {
                if catalog.variables[m.determined].role != VarRole::Feature {
                    continue;
                }
                let img = (0..dom.len())
                    .map(|j| {
                        let fv = dom.key(j)[0];
                        m.image.get(&fv).copied().ok_or_else(|| FdError::MissingImage {
                            determinant: name(f),
                            determined: name(m.determined),
                            value: fv.to_string(),
                        })
                    })
                    .collect::<Result<Vec<u32>, _>>()?;
                determined.push((m.determined, img));
            }
            let images: Vec<Vec<u32>> = determined.iter().map(|(_, i)| i.clone()).collect();
            let b = BMatrix::assemble(dom.len(), &images);
            groups.push(FdGroup { determinant: f, determined, block, b });
        }
        Ok(FdContext { groups })
    }

    /// `Ω(γ)` and `½ ∂Ω/∂γ`.
    pub fn penalty_and_grad(&self, layout: &Layout, gamma: &[f64]) -> Result<(f64, Vec<f64>), FdError> {
        layout.check(gamma)?;
        let mut half = gamma.to_vec();
        for g in &self.groups {
            let r = layout.range(g.block);
            let x = g.b.solve(&gamma[r.clone()]);
            debug_assert!(g.b.residual(&x, &gamma[r.clone()]) <= 1e-10 * (1.0 + crate::gram::norm2(&gamma[r.clone()]).sqrt()));
            half[r].copy_from_slice(&x);
        }
        Ok((crate::gram::dot(gamma, &half), half))
    }

    /// `½ ∂Ω` applied to an arbitrary direction; linear in `v`.
    pub fn half_grad(&self, layout: &Layout, v: &[f64]) -> Result<Vec<f64>, FdError> {
        Ok(self.penalty_and_grad(layout, v)?.1)
    }

    /// Maps `γ` over the reduced components back to `θ` over the full ones.
    pub fn theta_from_gamma(
        &self,
        reduced: &[Component],
        reduced_layout: &Layout,
        gamma: &[f64],
        full: &[Component],
    ) -> Result<(Layout, Vec<f64>), FdError> {
        reduced_layout.check(gamma)?;
        let mut solved: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for g in &self.groups {
            solved.insert(g.block, g.b.solve(&gamma[reduced_layout.range(g.block)]));
        }
        let mut domains = Vec::with_capacity(full.len());
        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(full.len());
        for h in full {
            if let Some(r) = reduced.iter().position(|x| x.factors == h.factors) {
                domains.push(reduced_layout.domains[r].clone());
                blocks.push(match solved.get(&r) {
                    Some(x) => x.clone(),
                    None => gamma[reduced_layout.range(r)].to_vec(),
                });
                continue;
            }
            let (g, img) = self
                .groups
                .iter()
                .find_map(|g| g.determined.iter().find(|(c, _)| h.factors == [*c]).map(|(_, img)| (g, img)))
                .expect("dropped components are determined features");
            let x = &solved[&g.block];
            let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
            for (j, &cv) in img.iter().enumerate() {
                *sums.entry(cv).or_insert(0.0) += x[j];
            }
            domains.push(BlockDomain::from_sorted_keys(h.cat.clone(), sums.keys().copied().collect()));
            blocks.push(sums.into_values().collect());
        }
        Ok((Layout::new(domains), blocks.concat()))
    }
}
