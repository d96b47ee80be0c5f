//! Factorized computation of all registered aggregates in one depth-first pass
//! over the variable order.
//!
//! At every node the values common to all relations carrying the node's
//! variable are enumerated in ascending order, the relation ranges are narrowed
//! to each value, and the node's register entries are updated as products of a
//! local aggregate and one aggregate per child subtree. Subtrees that depend on
//! fewer ancestors than they have are cached by their `dep` assignment.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::catalog::VarId;
use crate::planner::{LocalKind, NodeId, Registers, VariableOrder};
use crate::storage::{decode_f64, intersect_values, narrow_range, Database, Range};

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("group-by layouts of the factors do not partition the target layout")]
    LayoutMismatch,
}

/// Sparse map from group-by key tuples (category ids) to payloads, stored as
/// flat sorted arrays. Absent keys mean 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMap {
    pub group_by: Vec<VarId>,
    keys: Vec<u32>,
    vals: Vec<f64>,
}

impl AggregateMap {
    pub fn empty(group_by: Vec<VarId>) -> Self {
        AggregateMap { group_by, keys: Vec::new(), vals: Vec::new() }
    }

    pub fn scalar(v: f64) -> Self {
        AggregateMap { group_by: Vec::new(), keys: Vec::new(), vals: vec![v] }
    }

    /// Builds a map from unsorted entries, summing duplicate keys.
    pub fn from_entries(group_by: Vec<VarId>, entries: impl IntoIterator<Item = (Vec<u32>, f64)>) -> Self {
        let mut acc = Accumulator::new(group_by.len());
        for (k, v) in entries {
            assert_eq!(k.len(), group_by.len(), "key arity");
            acc.add(&k, v);
        }
        acc.finish(group_by)
    }

    pub fn arity(&self) -> usize {
        self.group_by.len()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn key(&self, i: usize) -> &[u32] {
        let a = self.arity();
        &self.keys[i * a..(i + 1) * a]
    }

    pub fn value(&self, i: usize) -> f64 {
        self.vals[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], f64)> + '_ {
        (0..self.len()).map(move |i| (self.key(i), self.vals[i]))
    }

    pub fn get(&self, key: &[u32]) -> Option<f64> {
        if self.arity() == 0 {
            return self.vals.first().copied();
        }
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.key(mid).cmp(key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(self.vals[mid]),
            }
        }
        None
    }

    /// Sum over all groups.
    pub fn total(&self) -> f64 {
        self.vals.iter().sum()
    }
}

/// Collects `(key, value)` contributions; `finish` sorts keys and sums equal
/// keys in insertion order, so results do not depend on hashing.
#[derive(Debug)]
pub(crate) struct Accumulator {
    arity: usize,
    keys: Vec<u32>,
    vals: Vec<f64>,
}

impl Accumulator {
    pub(crate) fn new(arity: usize) -> Self {
        Accumulator { arity, keys: Vec::new(), vals: Vec::new() }
    }

    #[inline]
    pub(crate) fn add(&mut self, key: &[u32], v: f64) {
        if self.arity == 0 {
            match self.vals.first_mut() {
                Some(s) => *s += v,
                None => self.vals.push(v),
            }
        } else {
            self.keys.extend_from_slice(key);
            self.vals.push(v);
        }
    }

    pub(crate) fn finish(self, group_by: Vec<VarId>) -> AggregateMap {
        let a = self.arity;
        if a == 0 || self.vals.len() <= 1 {
            return AggregateMap { group_by, keys: self.keys, vals: self.vals };
        }
        let key = |i: usize| &self.keys[i * a..(i + 1) * a];
        let mut order: Vec<usize> = (0..self.vals.len()).collect();
        order.sort_by(|&x, &y| key(x).cmp(key(y)));
        let mut keys = Vec::with_capacity(self.keys.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.vals.len());
        let mut last: Option<usize> = None;
        for i in order {
            match last {
                Some(l) if key(l) == key(i) => *vals.last_mut().expect("run started") += self.vals[i],
                _ => {
                    keys.extend_from_slice(key(i));
                    vals.push(self.vals[i]);
                }
            }
            last = Some(i);
        }
        AggregateMap { group_by, keys, vals }
    }
}

/// Adds the Cartesian product of `factors` into `acc`; `scatter[f][p]` is the
/// target key position of column `p` of factor `f`.
fn accumulate_product(acc: &mut Accumulator, factors: &[&AggregateMap], scatter: &[Vec<usize>], key: &mut [u32]) {
    if factors.iter().any(|f| f.is_empty()) {
        return;
    }
    if factors.iter().all(|f| f.arity() == 0) {
        let p = factors.iter().fold(1.0, |p, f| p * f.vals[0]);
        acc.add(&[], p);
        return;
    }
    fn rec(depth: usize, prod: f64, factors: &[&AggregateMap], scatter: &[Vec<usize>], key: &mut [u32], acc: &mut Accumulator) {
        if depth == factors.len() {
            acc.add(key, prod);
            return;
        }
        let f = factors[depth];
        for e in 0..f.len() {
            for (p, &t) in scatter[depth].iter().enumerate() {
                key[t] = f.key(e)[p];
            }
            rec(depth + 1, prod * f.vals[e], factors, scatter, key, acc);
        }
    }
    rec(0, 1.0, factors, scatter, key, acc);
}

/// `target += ⊗ factors`, the factors' group-by sets partitioning the target's.
pub fn tensor_product_update(target: &mut AggregateMap, factors: &[&AggregateMap]) -> Result<(), AggregateError> {
    let mut covered = vec![false; target.arity()];
    let mut scatter = Vec::with_capacity(factors.len());
    for f in factors {
        let mut pos = Vec::with_capacity(f.arity());
        for v in &f.group_by {
            let t = target.group_by.iter().position(|g| g == v).ok_or(AggregateError::LayoutMismatch)?;
            if covered[t] {
                return Err(AggregateError::LayoutMismatch);
            }
            covered[t] = true;
            pos.push(t);
        }
        scatter.push(pos);
    }
    if covered.iter().any(|c| !c) {
        return Err(AggregateError::LayoutMismatch);
    }
    let mut acc = Accumulator::new(target.arity());
    for (k, v) in target.iter() {
        acc.add(k, v);
    }
    let mut key = vec![0u32; target.arity()];
    accumulate_product(&mut acc, factors, &scatter, &mut key);
    let group_by = std::mem::take(&mut target.group_by);
    *target = acc.finish(group_by);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AggregateOptions {
    pub caching: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        AggregateOptions { caching: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregateStats {
    pub cache_hits: usize,
    pub cache_misses: usize,
    /// Product updates run, and skipped because some child join was empty.
    pub inner_updates: usize,
    pub skipped_updates: usize,
}

#[derive(Debug, Clone)]
pub struct RootAggregates {
    /// One map per root register entry.
    pub maps: Vec<AggregateMap>,
    pub stats: AggregateStats,
    /// Cache hits recorded per node id.
    pub node_hits: Vec<usize>,
}

impl RootAggregates {
    pub fn total_entries(&self) -> usize {
        self.maps.iter().map(|m| m.len()).sum()
    }
}

type Cached = Rc<Vec<AggregateMap>>;

struct Descent<'a> {
    vorder: &'a VariableOrder,
    registers: &'a Registers,
    db: &'a Database,
    options: AggregateOptions,
    /// Per node, `(relation, sort-key column)` for relations carrying its variable.
    probes: Vec<Vec<(usize, usize)>>,
    ranges: Vec<Range>,
    assignment: Vec<u64>,
    caches: Vec<HashMap<Vec<u64>, Cached>>,
    stats: AggregateStats,
    node_hits: Vec<usize>,
    key_buf: Vec<u32>,
}

/// Computes every root register aggregate over the join of `db`.
pub fn compute_aggregates(vorder: &VariableOrder, registers: &Registers, db: &Database, options: AggregateOptions) -> RootAggregates {
    let probes = vorder
        .nodes
        .iter()
        .map(|n| match n.var {
            None => Vec::new(),
            Some(v) => n
                .relations
                .iter()
                .map(|&r| (r, db.relations[r].key_position(v).expect("relation carries node variable")))
                .collect(),
        })
        .collect();
    let max_arity = registers
        .nodes
        .iter()
        .flat_map(|n| n.entries.iter().map(|e| e.group_by.len()))
        .max()
        .unwrap_or(0);
    let mut d = Descent {
        vorder,
        registers,
        db,
        options,
        probes,
        ranges: db.relations.iter().map(|r| r.full_range()).collect(),
        assignment: vec![0; vorder.rank.len()],
        caches: vec![HashMap::new(); vorder.nodes.len()],
        stats: AggregateStats::default(),
        node_hits: vec![0; vorder.nodes.len()],
        key_buf: vec![0; max_arity],
    };
    let root = d.visit(vorder.root());
    let maps = Rc::try_unwrap(root).unwrap_or_else(|rc| (*rc).clone());
    RootAggregates { maps, stats: d.stats, node_hits: d.node_hits }
}

impl<'a> Descent<'a> {
    fn visit(&mut self, id: NodeId) -> Cached {
        let node = self.vorder.node(id);
        let cache_key = (self.options.caching && node.cacheable())
            .then(|| node.dep.iter().map(|&v| self.assignment[v]).collect::<Vec<u64>>());
        if let Some(k) = &cache_key {
            if let Some(hit) = self.caches[id].get(k) {
                self.stats.cache_hits += 1;
                self.node_hits[id] += 1;
                return Rc::clone(hit);
            }
            self.stats.cache_misses += 1;
        }

        let reg = &self.registers.nodes[id];
        let mut accs: Vec<Accumulator> = reg.entries.iter().map(|e| Accumulator::new(e.group_by.len())).collect();

        let db = self.db;
        let probes = self.probes[id].clone();
        let values: Box<dyn Iterator<Item = u64>> = match node.var {
            None => Box::new(std::iter::once(0)),
            Some(_) => Box::new(intersect_values(
                probes.iter().map(|&(r, k)| (db.relations[r].columns[k].as_slice(), self.ranges[r])),
            )),
        };

        let mut saved: Vec<Range> = Vec::with_capacity(probes.len());
        for value in values {
            saved.clear();
            for &(r, k) in &probes {
                saved.push(self.ranges[r]);
                self.ranges[r] = narrow_range(&db.relations[r].columns[k], self.ranges[r], value);
            }
            if let Some(v) = node.var {
                self.assignment[v] = value;
            }

            let local: Vec<AggregateMap> = reg
                .local_kinds
                .iter()
                .zip(&reg.local)
                .map(|(kind, m)| match kind {
                    LocalKind::One => AggregateMap::scalar(1.0),
                    LocalKind::Power(e) => AggregateMap::scalar(decode_f64(value).powi(*e as i32)),
                    LocalKind::Indicator => AggregateMap {
                        group_by: m.vars().collect(),
                        keys: vec![value as u32],
                        vals: vec![1.0],
                    },
                })
                .collect();

            if node.children.is_empty() {
                for (acc, e) in accs.iter_mut().zip(&reg.entries) {
                    let l = &local[e.indices[0] as usize];
                    for (k, v) in l.iter() {
                        if l.arity() == 0 {
                            acc.add(&[], v);
                        } else {
                            self.key_buf[e.scatter[0][0]] = k[0];
                            acc.add(&self.key_buf[..e.group_by.len()], v);
                        }
                    }
                }
            } else {
                let children: Vec<Cached> = node.children.iter().map(|&c| self.visit(c)).collect();
                let nonempty = node
                    .children
                    .iter()
                    .zip(&children)
                    .all(|(&c, res)| !res[self.registers.nodes[c].count_entry].is_empty());
                if nonempty {
                    self.stats.inner_updates += 1;
                    let mut factors: Vec<&AggregateMap> = Vec::with_capacity(children.len() + 1);
                    for (acc, e) in accs.iter_mut().zip(&reg.entries) {
                        factors.clear();
                        factors.push(&local[e.indices[0] as usize]);
                        for (j, res) in children.iter().enumerate() {
                            factors.push(&res[e.indices[j + 1] as usize]);
                        }
                        accumulate_product(acc, &factors, &e.scatter, &mut self.key_buf[..e.group_by.len()]);
                    }
                } else {
                    self.stats.skipped_updates += 1;
                }
            }

            for (&(r, _), &old) in probes.iter().zip(&saved) {
                self.ranges[r] = old;
            }
        }

        let maps: Cached = Rc::new(accs.into_iter().zip(&reg.entries).map(|(a, e)| a.finish(e.group_by.clone())).collect());
        if let Some(k) = cache_key {
            self.caches[id].insert(k, Rc::clone(&maps));
        }
        maps
    }
}
