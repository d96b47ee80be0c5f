//! Run configuration: variables, relation schemas, functional dependencies,
//! the variable order and the model to train.
//!
//! The configuration is a single JSON document. Names are resolved to dense
//! [`VarId`]s while parsing; every unresolved name is an error.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a variable in [`Catalog::variables`].
pub type VarId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("duplicate {kind} `{name}`")]
    DuplicateName { kind: &'static str, name: String },
    #[error("invalid role: {0}")]
    InvalidRole(String),
    #[error("functional dependency groups overlap on `{0}`")]
    FdOverlap(String),
    #[error("composite functional dependency on {0:?} is not supported")]
    CompositeFd(Vec<String>),
    #[error("invalid functional dependency: {0}")]
    InvalidFd(String),
    #[error("variables of relation `{0}` do not lie on one root-to-leaf path of the variable order")]
    PathViolation(String),
    #[error("invalid variable order: {0}")]
    InvalidOrder(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarRole {
    Feature,
    Response,
    JoinOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub role: VarRole,
}

impl Variable {
    pub fn is_categorical(&self) -> bool {
        self.kind == VarKind::Categorical
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationSchema {
    pub name: String,
    pub variables: Vec<VarId>,
    /// CSV source, relative paths are resolved against the config directory.
    pub source: PathBuf,
}

/// A group of simple FDs `determinant -> determined`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSpec {
    pub determinant: VarId,
    pub determined: Vec<VarId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lr,
    Pr2,
    Fama,
}

impl ModelKind {
    pub fn degree(self) -> u32 {
        match self {
            ModelKind::Lr => 1,
            ModelKind::Pr2 | ModelKind::Fama => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Pr2 => "pr2",
            ModelKind::Fama => "fama",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(ModelKind::Lr),
            "pr2" => Ok(ModelKind::Pr2),
            "fama" => Ok(ModelKind::Fama),
            other => Err(CatalogError::InvalidModel(format!("unknown model kind `{other}`"))),
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_FAMA_MAX_ITERS: usize = 300;
pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub degree: u32,
    pub rank: usize,
    pub lambda: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub use_fd: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            degree: kind.degree(),
            rank: DEFAULT_RANK,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            max_iters: match kind {
                ModelKind::Fama => DEFAULT_FAMA_MAX_ITERS,
                _ => DEFAULT_MAX_ITERS,
            },
            tolerance: DEFAULT_TOLERANCE,
            use_fd: false,
        }
    }

    fn check(&self, has_fds: bool) -> Result<(), CatalogError> {
        if self.degree != self.kind.degree() {
            return Err(CatalogError::InvalidModel(format!(
                "model {} requires degree {}, got {}",
                self.kind.as_str(),
                self.kind.degree(),
                self.degree
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CatalogError::InvalidModel(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.kind == ModelKind::Fama && self.rank == 0 {
            return Err(CatalogError::InvalidModel("rank must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(CatalogError::InvalidModel(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        if self.use_fd && self.kind != ModelKind::Lr {
            return Err(CatalogError::InvalidModel(format!(
                "functional-dependency reparameterization is only available for lr, not {}",
                self.kind.as_str()
            )));
        }
        if self.use_fd && !has_fds {
            return Err(CatalogError::InvalidModel("useFd requires at least one functional dependency".into()));
        }
        Ok(())
    }
}

/// One node of the declared variable order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderTree {
    pub var: VarId,
    pub children: Vec<OrderTree>,
}

impl OrderTree {
    fn visit(&self, parent: Option<VarId>, out: &mut Vec<(VarId, Option<VarId>)>) {
        out.push((self.var, parent));
        for child in &self.children {
            child.visit(Some(self.var), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub variables: Vec<Variable>,
    pub relations: Vec<RelationSchema>,
    pub fds: Vec<FdSpec>,
    /// A forest; a single tree is the common case.
    pub vorder: Vec<OrderTree>,
    pub model: ModelSpec,
}

impl Catalog {
    pub fn var(&self, id: VarId) -> &Variable {
        &self.variables[id]
    }

    pub fn var_id(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn response(&self) -> Option<VarId> {
        self.variables.iter().position(|v| v.role == VarRole::Response)
    }

    /// Feature variables in declaration order.
    pub fn features(&self) -> Vec<VarId> {
        (0..self.variables.len())
            .filter(|&v| self.variables[v].role == VarRole::Feature)
            .collect()
    }

    /// `(variable, parent)` pairs in depth-first preorder of the variable order.
    pub fn order_preorder(&self) -> Vec<(VarId, Option<VarId>)> {
        let mut out = Vec::new();
        for tree in &self.vorder {
            tree.visit(None, &mut out);
        }
        out
    }

    /// Serializes back to the config document grammar.
    pub fn to_config_string(&self) -> String {
        let doc = self.to_doc();
        serde_json::to_string_pretty(&doc).expect("config document serializes")
    }

    fn to_doc(&self) -> ConfigDoc {
        let name = |v: VarId| self.variables[v].name.clone();
        fn order(t: &OrderTree, name: &dyn Fn(VarId) -> String) -> serde_json::Value {
            let mut items = vec![serde_json::Value::String(name(t.var))];
            items.extend(t.children.iter().map(|c| order(c, name)));
            serde_json::Value::Array(items)
        }
        let vorder = if self.vorder.len() == 1 {
            order(&self.vorder[0], &name)
        } else {
            serde_json::Value::Array(self.vorder.iter().map(|t| order(t, &name)).collect())
        };
        ConfigDoc {
            relations: self
                .relations
                .iter()
                .map(|r| RelationDoc {
                    name: r.name.clone(),
                    columns: r.variables.iter().map(|&v| name(v)).collect(),
                    file: r.source.to_string_lossy().into_owned(),
                })
                .collect(),
            variables: self
                .variables
                .iter()
                .map(|v| VariableDoc { name: v.name.clone(), kind: v.kind, role: v.role })
                .collect(),
            fds: self
                .fds
                .iter()
                .map(|fd| FdDoc {
                    determines: Determinant::One(name(fd.determinant)),
                    determined: fd.determined.iter().map(|&v| name(v)).collect(),
                })
                .collect(),
            vorder,
            model: ModelDoc {
                kind: self.model.kind,
                degree: Some(self.model.degree),
                rank: Some(self.model.rank),
                lambda: Some(self.model.lambda),
                seed: Some(self.model.seed),
                max_iters: Some(self.model.max_iters),
                tolerance: Some(self.model.tolerance),
                use_fd: Some(self.model.use_fd),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Document grammar

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    relations: Vec<RelationDoc>,
    variables: Vec<VariableDoc>,
    #[serde(default)]
    fds: Vec<FdDoc>,
    vorder: serde_json::Value,
    model: ModelDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationDoc {
    name: String,
    columns: Vec<String>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableDoc {
    name: String,
    kind: VarKind,
    role: VarRole,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Determinant {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FdDoc {
    determines: Determinant,
    determined: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct ModelDoc {
    kind: ModelKind,
    #[serde(default)]
    degree: Option<u32>,
    #[serde(default)]
    rank: Option<usize>,
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    tolerance: Option<f64>,
    #[serde(default)]
    use_fd: Option<bool>,
}

/// Parses a configuration document and resolves every name.
///
/// The result still has to go through [`validate_catalog`].
pub fn parse_config(text: &str) -> Result<Catalog, CatalogError> {
    let doc: ConfigDoc = serde_json::from_str(text).map_err(|e| CatalogError::Syntax(e.to_string()))?;

    let mut ids: HashMap<String, VarId> = HashMap::new();
    let mut variables = Vec::with_capacity(doc.variables.len());
    for v in doc.variables {
        if ids.insert(v.name.clone(), variables.len()).is_some() {
            return Err(CatalogError::DuplicateName { kind: "variable", name: v.name });
        }
        variables.push(Variable { name: v.name, kind: v.kind, role: v.role });
    }
    let resolve = |name: &str| -> Result<VarId, CatalogError> {
        ids.get(name)
            .copied()
            .ok_or_else(|| CatalogError::UnknownName { kind: "variable", name: name.to_string() })
    };

    let mut relation_names = HashSet::new();
    let mut relations = Vec::with_capacity(doc.relations.len());
    for r in doc.relations {
        if !relation_names.insert(r.name.clone()) {
            return Err(CatalogError::DuplicateName { kind: "relation", name: r.name });
        }
        let mut seen = HashSet::new();
        let mut vars = Vec::with_capacity(r.columns.len());
        for c in &r.columns {
            let id = resolve(c)?;
            if !seen.insert(id) {
                return Err(CatalogError::DuplicateName { kind: "column", name: format!("{}.{}", r.name, c) });
            }
            vars.push(id);
        }
        relations.push(RelationSchema { name: r.name, variables: vars, source: PathBuf::from(r.file) });
    }

    let mut fds = Vec::with_capacity(doc.fds.len());
    for fd in doc.fds {
        let determinant = match fd.determines {
            Determinant::One(name) => resolve(&name)?,
            Determinant::Many(names) if names.len() == 1 => resolve(&names[0])?,
            Determinant::Many(names) => return Err(CatalogError::CompositeFd(names)),
        };
        let determined = fd.determined.iter().map(|n| resolve(n)).collect::<Result<Vec<_>, _>>()?;
        fds.push(FdSpec { determinant, determined });
    }

    let vorder = parse_order(&doc.vorder, &resolve)?;

    let m = doc.model;
    let defaults = ModelSpec::new(m.kind);
    let model = ModelSpec {
        kind: m.kind,
        degree: m.degree.unwrap_or(defaults.degree),
        rank: m.rank.unwrap_or(defaults.rank),
        lambda: m.lambda.unwrap_or(defaults.lambda),
        seed: m.seed.unwrap_or(defaults.seed),
        max_iters: m.max_iters.unwrap_or(defaults.max_iters),
        tolerance: m.tolerance.unwrap_or(defaults.tolerance),
        use_fd: m.use_fd.unwrap_or(defaults.use_fd),
    };

    Ok(Catalog { variables, relations, fds, vorder, model })
}

/// A tree is `[var, child...]`; a forest is `[[var, ...], [var, ...]]`.
fn parse_order(
    value: &serde_json::Value,
    resolve: &dyn Fn(&str) -> Result<VarId, CatalogError>,
) -> Result<Vec<OrderTree>, CatalogError> {
    let items = value
        .as_array()
        .ok_or_else(|| CatalogError::Syntax("vorder must be a nested list".into()))?;
    match items.first() {
        None => Err(CatalogError::Syntax("vorder must not be empty".into())),
        Some(serde_json::Value::String(_)) => Ok(vec![parse_tree(value, resolve)?]),
        Some(serde_json::Value::Array(_)) => items.iter().map(|t| parse_tree(t, resolve)).collect(),
        Some(other) => Err(CatalogError::Syntax(format!("unexpected vorder element {other}"))),
    }
}

fn parse_tree(
    value: &serde_json::Value,
    resolve: &dyn Fn(&str) -> Result<VarId, CatalogError>,
) -> Result<OrderTree, CatalogError> {
    let items = value
        .as_array()
        .ok_or_else(|| CatalogError::Syntax(format!("vorder subtree must be a list, got {value}")))?;
    let name = items
        .first()
        .and_then(|v| v.as_str())
        .ok_or_else(|| CatalogError::Syntax(format!("vorder subtree must start with a variable name, got {value}")))?;
    let children = items[1..].iter().map(|c| parse_tree(c, resolve)).collect::<Result<_, _>>()?;
    Ok(OrderTree { var: resolve(name)?, children })
}

/// Checks roles, FD groups, the model section and the variable-order
/// constraints. Returns the catalog unchanged when it is valid.
pub fn validate_catalog(catalog: Catalog) -> Result<Catalog, CatalogError> {
    check_catalog(&catalog)?;
    Ok(catalog)
}

pub fn check_catalog(catalog: &Catalog) -> Result<(), CatalogError> {
    let vars = &catalog.variables;

    let responses: Vec<_> = vars.iter().filter(|v| v.role == VarRole::Response).collect();
    match responses.as_slice() {
        [r] if r.kind == VarKind::Continuous => {}
        [r] => return Err(CatalogError::InvalidRole(format!("response `{}` must be continuous", r.name))),
        [] => return Err(CatalogError::InvalidRole("no response variable declared".into())),
        _ => return Err(CatalogError::InvalidRole("more than one response variable declared".into())),
    }

    let mut used = vec![false; vars.len()];
    for r in &catalog.relations {
        for &v in &r.variables {
            used[v] = true;
        }
    }
    if let Some(v) = used.iter().position(|u| !u) {
        return Err(CatalogError::InvalidRole(format!("variable `{}` appears in no relation", vars[v].name)));
    }

    // Variable order: every declared variable exactly once.
    let preorder = catalog.order_preorder();
    let mut parent = vec![None; vars.len()];
    let mut placed = vec![false; vars.len()];
    for &(v, p) in &preorder {
        if placed[v] {
            return Err(CatalogError::InvalidOrder(format!("`{}` appears twice", vars[v].name)));
        }
        placed[v] = true;
        parent[v] = p;
    }
    if let Some(v) = placed.iter().position(|p| !p) {
        return Err(CatalogError::InvalidOrder(format!("`{}` is missing from the variable order", vars[v].name)));
    }
    let is_ancestor = |a: VarId, mut b: VarId| {
        while let Some(p) = parent[b] {
            if p == a {
                return true;
            }
            b = p;
        }
        false
    };
    for r in &catalog.relations {
        for (i, &a) in r.variables.iter().enumerate() {
            for &b in &r.variables[i + 1..] {
                if !is_ancestor(a, b) && !is_ancestor(b, a) {
                    return Err(CatalogError::PathViolation(r.name.clone()));
                }
            }
        }
    }

    let mut grouped: BTreeSet<VarId> = BTreeSet::new();
    for fd in &catalog.fds {
        if fd.determined.is_empty() {
            return Err(CatalogError::InvalidFd(format!("`{}` determines nothing", vars[fd.determinant].name)));
        }
        if fd.determined.contains(&fd.determinant) {
            return Err(CatalogError::InvalidFd(format!("`{}` determines itself", vars[fd.determinant].name)));
        }
        let mut group: Vec<VarId> = fd.determined.clone();
        group.push(fd.determinant);
        for &v in &group {
            if !vars[v].is_categorical() {
                return Err(CatalogError::InvalidFd(format!("`{}` is not categorical", vars[v].name)));
            }
        }
        let mut local = BTreeSet::new();
        for &v in &group {
            if !local.insert(v) || !grouped.insert(v) {
                return Err(CatalogError::FdOverlap(vars[v].name.clone()));
            }
        }
    }

    catalog.model.check(!catalog.fds.is_empty())
}
