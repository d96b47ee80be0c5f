//! Compile-time planning: the annotated variable order, the model components,
//! the distinct aggregates they require and the per-node aggregate registers.
//!
//! Nothing here touches data. The registers are an index structure: each
//! entry of `R_X` names the local aggregate in `Λ_X` and one aggregate in the
//! register of every child whose product yields it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::catalog::{Catalog, ModelKind, VarId, VarKind, VarRole};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("variable `{0}` of a monomial is not housed under its register node")]
    UnhousedVariable(String),
    #[error("variables of relation `{0}` do not lie on one root-to-leaf path")]
    PathViolation(String),
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct OrderNode {
    /// `None` only for the synthetic root that joins a forest into a tree.
    pub var: Option<VarId>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub anc: Vec<VarId>,
    pub dep: Vec<VarId>,
    /// Relations whose schema contains this node's variable.
    pub relations: Vec<usize>,
    /// Variables in the subtree rooted here, this node's included.
    pub subtree: Vec<VarId>,
}

impl OrderNode {
    /// Caching pays off when the subtree depends on fewer ancestors than it has.
    pub fn cacheable(&self) -> bool {
        self.dep.len() != self.anc.len()
    }
}

/// A rooted variable order annotated with `anc`/`dep`. Node ids follow
/// depth-first preorder, so the root is node 0.
#[derive(Debug, Clone)]
pub struct VariableOrder {
    pub nodes: Vec<OrderNode>,
    pub node_of: Vec<NodeId>,
    /// Preorder rank of every catalog variable.
    pub rank: Vec<usize>,
}

impl VariableOrder {
    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &OrderNode {
        &self.nodes[id]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].children.is_empty()
    }
}

/// Builds the annotated order. A forest is wrapped under a synthetic root.
pub fn annotate_vorder(catalog: &Catalog) -> Result<VariableOrder, PlanError> {
    let nvars = catalog.variables.len();
    let mut nodes: Vec<OrderNode> = Vec::new();
    let mut node_of = vec![usize::MAX; nvars];

    fn push(
        tree: &crate::catalog::OrderTree,
        parent: Option<NodeId>,
        nodes: &mut Vec<OrderNode>,
        node_of: &mut [NodeId],
    ) -> NodeId {
        let id = nodes.len();
        nodes.push(OrderNode {
            var: Some(tree.var),
            parent,
            children: Vec::new(),
            anc: Vec::new(),
            dep: Vec::new(),
            relations: Vec::new(),
            subtree: Vec::new(),
        });
        node_of[tree.var] = id;
        for child in &tree.children {
            let c = push(child, Some(id), nodes, node_of);
            nodes[id].children.push(c);
        }
        id
    }

    if catalog.vorder.len() == 1 {
        push(&catalog.vorder[0], None, &mut nodes, &mut node_of);
    } else {
        nodes.push(OrderNode {
            var: None,
            parent: None,
            children: Vec::new(),
            anc: Vec::new(),
            dep: Vec::new(),
            relations: Vec::new(),
            subtree: Vec::new(),
        });
        for tree in &catalog.vorder {
            let c = push(tree, Some(0), &mut nodes, &mut node_of);
            nodes[0].children.push(c);
        }
    }

    let mut rank = vec![usize::MAX; nvars];
    let mut pos = 0;
    for n in &nodes {
        if let Some(v) = n.var {
            rank[v] = pos;
            pos += 1;
        }
    }

    // ancestors, top-down (preorder guarantees parents come first)
    for id in 0..nodes.len() {
        if let Some(p) = nodes[id].parent {
            let mut anc = nodes[p].anc.clone();
            if let Some(v) = nodes[p].var {
                anc.push(v);
            }
            nodes[id].anc = anc;
        }
    }
    // subtrees, bottom-up
    for id in (0..nodes.len()).rev() {
        let mut sub: Vec<VarId> = nodes[id].var.into_iter().collect();
        for &c in &nodes[id].children.clone() {
            sub.extend(nodes[c].subtree.iter().copied());
        }
        sub.sort_by_key(|&v| rank[v]);
        nodes[id].subtree = sub;
    }

    for (ri, r) in catalog.relations.iter().enumerate() {
        for &v in &r.variables {
            if node_of[v] == usize::MAX {
                return Err(PlanError::PathViolation(r.name.clone()));
            }
            nodes[node_of[v]].relations.push(ri);
        }
        // all variables on one root-to-leaf path: the deepest one has all others as ancestors
        let deepest = *r.variables.iter().max_by_key(|&&v| nodes[node_of[v]].anc.len()).expect("nonempty schema");
        let anc = &nodes[node_of[deepest]].anc;
        if r.variables.iter().any(|&v| v != deepest && !anc.contains(&v)) {
            return Err(PlanError::PathViolation(r.name.clone()));
        }
    }

    for id in 0..nodes.len() {
        let sub = &nodes[id].subtree;
        let dep: Vec<VarId> = nodes[id]
            .anc
            .iter()
            .copied()
            .filter(|&a| {
                catalog
                    .relations
                    .iter()
                    .any(|r| r.variables.contains(&a) && r.variables.iter().any(|v| sub.contains(v)))
            })
            .collect();
        nodes[id].dep = dep;
    }

    Ok(VariableOrder { nodes, node_of, rank })
}

// ---------------------------------------------------------------------------
// Monomials

/// A product of variable powers, sorted by variable id. Categorical variables
/// always carry exponent 1 and act as group-by columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Monomial(pub Vec<(VarId, u8)>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn var(v: VarId) -> Self {
        Monomial(vec![(v, 1)])
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&(_, e)| e as u32).sum()
    }

    pub fn exponent(&self, v: VarId) -> u8 {
        self.0.iter().find(|&&(w, _)| w == v).map_or(0, |&(_, e)| e)
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.0.iter().map(|&(v, _)| v)
    }

    /// Product with categorical exponents capped at 1.
    pub fn times(&self, other: &Monomial, kinds: &[VarKind]) -> Monomial {
        let mut acc: BTreeMap<VarId, u8> = self.0.iter().copied().collect();
        for &(v, e) in &other.0 {
            *acc.entry(v).or_insert(0) += e;
        }
        Monomial(
            acc.into_iter()
                .map(|(v, e)| if kinds[v] == VarKind::Categorical { (v, 1) } else { (v, e) })
                .collect(),
        )
    }

    /// Restriction to a set of variables (the empty restriction is `1`).
    pub fn project(&self, keep: &[VarId]) -> Monomial {
        Monomial(self.0.iter().copied().filter(|(v, _)| keep.contains(v)).collect())
    }

    /// Categorical variables in preorder rank: the key layout of this aggregate.
    pub fn group_by(&self, kinds: &[VarKind], rank: &[usize]) -> Vec<VarId> {
        let mut g: Vec<VarId> = self.vars().filter(|&v| kinds[v] == VarKind::Categorical).collect();
        g.sort_by_key(|&v| rank[v]);
        g
    }

    pub fn name_seq<'a>(&self, names: &'a [String]) -> Vec<&'a str> {
        let mut seq: Vec<&str> = Vec::with_capacity(self.degree() as usize);
        for &(v, e) in &self.0 {
            for _ in 0..e {
                seq.push(&names[v]);
            }
        }
        seq.sort_unstable();
        seq
    }

    /// `1`, or the variable names in lexicographic order joined with `*`.
    pub fn display(&self, names: &[String]) -> String {
        if self.is_one() {
            "1".to_string()
        } else {
            self.name_seq(names).join("*")
        }
    }
}

/// Register order: total degree, then the sorted name sequence.
pub fn canonical_cmp(a: &Monomial, b: &Monomial, names: &[String]) -> Ordering {
    a.degree().cmp(&b.degree()).then_with(|| a.name_seq(names).cmp(&b.name_seq(names)))
}

fn sort_dedup(ms: &mut Vec<Monomial>, names: &[String]) {
    ms.sort_by(|a, b| canonical_cmp(a, b, names));
    ms.dedup();
}

// ---------------------------------------------------------------------------
// Components

/// One component function `h_i`: the intercept, a feature, or a product of
/// two features. `cat` holds its categorical variables in preorder rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub factors: Vec<VarId>,
    pub monomial: Monomial,
    pub cat: Vec<VarId>,
}

impl Component {
    pub fn name(&self, names: &[String]) -> String {
        if self.factors.is_empty() {
            "1".to_string()
        } else {
            self.factors.iter().map(|&v| names[v].as_str()).collect::<Vec<_>>().join("*")
        }
    }

    pub fn is_interaction(&self) -> bool {
        self.factors.len() == 2
    }
}

pub fn kinds_of(catalog: &Catalog) -> Vec<VarKind> {
    catalog.variables.iter().map(|v| v.kind).collect()
}

/// Components of the catalog's model over its feature variables.
pub fn enumerate_components(catalog: &Catalog, kind: ModelKind) -> Vec<Component> {
    enumerate_components_for(&catalog.features(), &kinds_of(catalog), &crate::storage::preorder_rank(catalog), kind)
}

/// Intercept, then each feature, then (for degree-2 models) all pairs in
/// lexicographic order of feature position. Categorical self-pairs are never
/// produced; continuous squares only for polynomial regression.
pub fn enumerate_components_for(features: &[VarId], kinds: &[VarKind], rank: &[usize], kind: ModelKind) -> Vec<Component> {
    let make = |factors: Vec<VarId>| {
        let monomial = factors.iter().fold(Monomial::one(), |m, &v| m.times(&Monomial::var(v), kinds));
        let cat = monomial.group_by(kinds, rank);
        Component { factors, monomial, cat }
    };
    let mut out = vec![make(Vec::new())];
    out.extend(features.iter().map(|&f| make(vec![f])));
    if kind.degree() == 2 {
        for (i, &a) in features.iter().enumerate() {
            for &b in &features[i..] {
                if a == b && (kinds[a] == VarKind::Categorical || kind == ModelKind::Fama) {
                    continue;
                }
                out.push(make(vec![a, b]));
            }
        }
    }
    out
}

/// The distinct aggregates a model needs and which Σ / c cells each serves.
#[derive(Debug, Clone)]
pub struct AggregatePlan {
    /// Distinct monomials in canonical order; equals the root register order.
    pub monomials: Vec<Monomial>,
    /// Per monomial, the `(i, j)` Σ cells with `i <= j` it provides.
    pub sigma_cells: Vec<Vec<(usize, usize)>>,
    /// Per monomial, the `c` cells it provides.
    pub c_cells: Vec<Vec<usize>>,
    pub count: usize,
    pub y_squared: Option<usize>,
}

impl AggregatePlan {
    pub fn index_of(&self, m: &Monomial, names: &[String]) -> Option<usize> {
        self.monomials.binary_search_by(|x| canonical_cmp(x, m, names)).ok()
    }
}

pub fn enumerate_aggregates(
    components: &[Component],
    response: Option<VarId>,
    kinds: &[VarKind],
    names: &[String],
) -> AggregatePlan {
    let mut sigma: HashMap<Monomial, Vec<(usize, usize)>> = HashMap::new();
    let mut c: HashMap<Monomial, Vec<usize>> = HashMap::new();
    for (i, hi) in components.iter().enumerate() {
        for (j, hj) in components.iter().enumerate().skip(i) {
            sigma.entry(hi.monomial.times(&hj.monomial, kinds)).or_default().push((i, j));
        }
    }
    let mut monomials: Vec<Monomial> = sigma.keys().cloned().collect();
    monomials.push(Monomial::one());
    if let Some(y) = response {
        let ym = Monomial::var(y);
        for (i, h) in components.iter().enumerate() {
            let m = h.monomial.times(&ym, kinds);
            c.entry(m.clone()).or_default().push(i);
            monomials.push(m);
        }
        monomials.push(ym.times(&ym, kinds));
    }
    sort_dedup(&mut monomials, names);

    let sigma_cells = monomials.iter().map(|m| sigma.get(m).cloned().unwrap_or_default()).collect();
    let c_cells = monomials.iter().map(|m| c.get(m).cloned().unwrap_or_default()).collect();
    let find = |m: &Monomial| monomials.binary_search_by(|x| canonical_cmp(x, m, names)).ok();
    let count = find(&Monomial::one()).expect("count aggregate present");
    let y_squared = response.and_then(|y| find(&Monomial(vec![(y, 2)])));
    AggregatePlan { monomials, sigma_cells, c_cells, count, y_squared }
}

// ---------------------------------------------------------------------------
// Registers

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalKind {
    One,
    Power(u8),
    Indicator,
}

#[derive(Debug, Clone)]
pub struct RegisterEntry {
    pub monomial: Monomial,
    /// `[i_0, i_1, ..., i_k]`: index into `Λ_X`, then one per child register.
    pub indices: Vec<u32>,
    pub group_by: Vec<VarId>,
    /// For each factor (local first, then children), where each of its key
    /// columns lands in this entry's key.
    pub scatter: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct NodeRegister {
    pub entries: Vec<RegisterEntry>,
    pub local: Vec<Monomial>,
    pub local_kinds: Vec<LocalKind>,
    /// Index of the count monomial `1` in `entries`.
    pub count_entry: usize,
}

/// Registers for every node of a variable order, indexed by node id.
#[derive(Debug, Clone)]
pub struct Registers {
    pub nodes: Vec<NodeRegister>,
}

impl Registers {
    pub fn root(&self) -> &NodeRegister {
        &self.nodes[0]
    }

    pub fn total_entries(&self) -> usize {
        self.nodes.iter().map(|n| n.entries.len()).sum()
    }
}

pub fn build_registers(
    vorder: &VariableOrder,
    monomials: &[Monomial],
    kinds: &[VarKind],
    names: &[String],
) -> Result<Registers, PlanError> {
    let mut slots: Vec<Option<NodeRegister>> = vec![None; vorder.nodes.len()];
    let mut demanded = monomials.to_vec();
    demanded.push(Monomial::one());
    sort_dedup(&mut demanded, names);
    build_node(vorder, vorder.root(), demanded, kinds, names, &mut slots)?;
    Ok(Registers { nodes: slots.into_iter().map(|s| s.expect("every node visited")).collect() })
}

fn build_node(
    vorder: &VariableOrder,
    id: NodeId,
    demanded: Vec<Monomial>,
    kinds: &[VarKind],
    names: &[String],
    slots: &mut [Option<NodeRegister>],
) -> Result<(), PlanError> {
    let node = vorder.node(id);
    for m in &demanded {
        if let Some(v) = m.vars().find(|v| !node.subtree.contains(v)) {
            return Err(PlanError::UnhousedVariable(names[v].clone()));
        }
    }
    let here: Vec<VarId> = node.var.into_iter().collect();

    let mut local: Vec<Monomial> = demanded.iter().map(|m| m.project(&here)).collect();
    sort_dedup(&mut local, names);

    let child_parts: Vec<Vec<Monomial>> = node
        .children
        .iter()
        .map(|&c| {
            let sub = &vorder.node(c).subtree;
            let mut parts: Vec<Monomial> = demanded.iter().map(|m| m.project(sub)).collect();
            sort_dedup(&mut parts, names);
            parts
        })
        .collect();

    for (&c, parts) in node.children.iter().zip(&child_parts) {
        build_node(vorder, c, parts.clone(), kinds, names, slots)?;
    }

    let lookup = |set: &[Monomial], m: &Monomial| -> u32 {
        set.binary_search_by(|x| canonical_cmp(x, m, names)).expect("projection registered") as u32
    };
    let rank = &vorder.rank;
    let entries: Vec<RegisterEntry> = demanded
        .iter()
        .map(|m| {
            let group_by = m.group_by(kinds, rank);
            let mut indices = Vec::with_capacity(node.children.len() + 1);
            let mut scatter = Vec::with_capacity(node.children.len() + 1);
            let l = m.project(&here);
            indices.push(lookup(&local, &l));
            scatter.push(positions(&l.group_by(kinds, rank), &group_by));
            for (&c, parts) in node.children.iter().zip(&child_parts) {
                let p = m.project(&vorder.node(c).subtree);
                indices.push(lookup(parts, &p));
                scatter.push(positions(&p.group_by(kinds, rank), &group_by));
            }
            RegisterEntry { monomial: m.clone(), indices, group_by, scatter }
        })
        .collect();

    let local_kinds = local
        .iter()
        .map(|m| match m.0.as_slice() {
            [] => LocalKind::One,
            [(v, _)] if kinds[*v] == VarKind::Categorical => LocalKind::Indicator,
            [(_, e)] => LocalKind::Power(*e),
            _ => unreachable!("local monomials mention one variable"),
        })
        .collect();
    let count_entry = lookup(&demanded, &Monomial::one()) as usize;
    slots[id] = Some(NodeRegister { entries, local, local_kinds, count_entry });
    Ok(())
}

fn positions(part: &[VarId], whole: &[VarId]) -> Vec<usize> {
    part.iter().map(|v| whole.iter().position(|w| w == v).expect("group-by subset")).collect()
}

// ---------------------------------------------------------------------------
// Whole plan

/// Everything computed before touching data.
#[derive(Debug, Clone)]
pub struct Plan {
    pub vorder: VariableOrder,
    pub components: Vec<Component>,
    pub aggregates: AggregatePlan,
    pub registers: Registers,
    pub kinds: Vec<VarKind>,
    pub names: Vec<String>,
}

impl Plan {
    /// Plans the given components against the catalog's variable order.
    pub fn build(catalog: &Catalog, components: Vec<Component>) -> Result<Plan, PlanError> {
        let vorder = annotate_vorder(catalog)?;
        let kinds = kinds_of(catalog);
        let names: Vec<String> = catalog.variables.iter().map(|v| v.name.clone()).collect();
        let response = catalog.variables.iter().position(|v| v.role == VarRole::Response);
        let aggregates = enumerate_aggregates(&components, response, &kinds, &names);
        let registers = build_registers(&vorder, &aggregates.monomials, &kinds, &names)?;
        Ok(Plan { vorder, components, aggregates, registers, kinds, names })
    }

    /// Text dump: register sizes per node, then the root monomials.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (id, node) in self.vorder.nodes.iter().enumerate() {
            let name = node.var.map_or("<root>", |v| self.names[v].as_str());
            let reg = &self.registers.nodes[id];
            let _ = writeln!(out, "node {name} registers={} local={}", reg.entries.len(), reg.local.len());
        }
        for m in &self.aggregates.monomials {
            let _ = writeln!(out, "{}", m.display(&self.names));
        }
        out
    }
}
