//! Columnar relation storage.
//!
//! Every cell is stored as an order-preserving `u64`: categorical values are
//! dense interned ids, continuous values are IEEE-754 bit patterns remapped so
//! that unsigned comparison matches numeric comparison. Rows are sorted
//! lexicographically by the relation's variables taken in variable-order
//! preorder, so fixing a prefix of the sort key always selects one contiguous
//! row range.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{Catalog, RelationSchema, VarId, VarKind};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{relation}: cannot parse `{value}` in column `{column}` (row {row}) as a number")]
    Parse { relation: String, column: String, row: usize, value: String },
    #[error("{relation}: column `{column}` missing from header")]
    MissingColumn { relation: String, column: String },
    #[error("{relation}: unexpected column `{column}` in header")]
    UnexpectedColumn { relation: String, column: String },
    #[error("{relation}: malformed csv: {message}")]
    Csv { relation: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps an `f64` to a `u64` whose unsigned order is the numeric order.
pub fn encode_f64(x: f64) -> u64 {
    let x = if x == 0.0 { 0.0 } else { x };
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

pub fn decode_f64(v: u64) -> f64 {
    if v >> 63 == 1 {
        f64::from_bits(v & !(1 << 63))
    } else {
        f64::from_bits(!v)
    }
}

#[derive(Debug, Clone, Default)]
struct Interner {
    labels: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_string());
        self.ids.insert(label.to_string(), id);
        id
    }
}

/// Per categorical variable, a bijection between labels and dense ids in
/// first-seen order.
#[derive(Debug, Clone)]
pub struct CategoryDictionary {
    per_var: Vec<Option<Interner>>,
}

impl CategoryDictionary {
    pub fn new(catalog: &Catalog) -> Self {
        CategoryDictionary {
            per_var: catalog
                .variables
                .iter()
                .map(|v| (v.kind == VarKind::Categorical).then(Interner::default))
                .collect(),
        }
    }

    pub fn intern(&mut self, var: VarId, label: &str) -> u32 {
        self.per_var[var].as_mut().expect("variable is categorical").intern(label)
    }

    pub fn id(&self, var: VarId, label: &str) -> Option<u32> {
        self.per_var[var].as_ref()?.ids.get(label).copied()
    }

    pub fn label(&self, var: VarId, id: u32) -> Option<&str> {
        self.per_var[var].as_ref()?.labels.get(id as usize).map(String::as_str)
    }

    /// Number of distinct labels seen for `var` (0 for continuous variables).
    pub fn domain_size(&self, var: VarId) -> usize {
        self.per_var[var].as_ref().map_or(0, |i| i.labels.len())
    }
}

/// Rank of every variable in the depth-first preorder of the variable order.
pub fn preorder_rank(catalog: &Catalog) -> Vec<usize> {
    let mut rank = vec![usize::MAX; catalog.variables.len()];
    for (pos, (v, _)) in catalog.order_preorder().into_iter().enumerate() {
        rank[v] = pos;
    }
    rank
}

#[derive(Debug, Clone)]
pub struct Relation {
    pub schema: RelationSchema,
    /// Schema variables in sort-key order.
    pub vars: Vec<VarId>,
    /// `columns[k]` holds the values of `vars[k]`.
    pub columns: Vec<Vec<u64>>,
    pub row_count: usize,
}

impl Relation {
    /// Position of `var` in the sort key, if the relation has it.
    pub fn key_position(&self, var: VarId) -> Option<usize> {
        self.vars.iter().position(|&v| v == var)
    }

    pub fn column(&self, var: VarId) -> Option<&[u64]> {
        self.key_position(var).map(|k| self.columns[k].as_slice())
    }

    pub fn full_range(&self) -> Range {
        Range { begin: 0, end: self.row_count }
    }

    pub fn row(&self, i: usize) -> Vec<u64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Builds a relation from rows given in schema column order, sorting and
    /// removing duplicate rows.
    pub fn from_rows(schema: RelationSchema, rows: Vec<Vec<u64>>, rank: &[usize]) -> Relation {
        let mut perm: Vec<usize> = (0..schema.variables.len()).collect();
        perm.sort_by_key(|&k| rank[schema.variables[k]]);
        let vars: Vec<VarId> = perm.iter().map(|&k| schema.variables[k]).collect();
        let mut keyed: Vec<Vec<u64>> = rows.into_iter().map(|r| perm.iter().map(|&k| r[k]).collect()).collect();
        keyed.sort_unstable();
        keyed.dedup();
        let row_count = keyed.len();
        let mut columns = vec![Vec::with_capacity(row_count); vars.len()];
        for row in keyed {
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        Relation { schema, vars, columns, row_count }
    }
}

/// Half-open row range `[begin, end)` of one relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Range {
    pub begin: usize,
    pub end: usize,
}

impl Range {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }
}

/// Parses CSV text into a sorted relation. The header must name exactly the
/// schema's columns, in any order.
pub fn load_relation<R: Read>(
    input: R,
    schema: &RelationSchema,
    catalog: &Catalog,
    dict: &mut CategoryDictionary,
    rank: &[usize],
    delimiter: u8,
) -> Result<Relation, StorageError> {
    let rel = schema.name.clone();
    let mut reader = csv::ReaderBuilder::new().delimiter(delimiter).has_headers(true).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| StorageError::Csv { relation: rel.clone(), message: e.to_string() })?
        .clone();

    let mut source_col = Vec::with_capacity(schema.variables.len());
    for &v in &schema.variables {
        let name = &catalog.var(v).name;
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => source_col.push(i),
            None => return Err(StorageError::MissingColumn { relation: rel, column: name.clone() }),
        }
    }
    if let Some(extra) = headers
        .iter()
        .find(|h| !schema.variables.iter().any(|&v| catalog.var(v).name == h.trim()))
    {
        return Err(StorageError::UnexpectedColumn { relation: rel, column: extra.to_string() });
    }

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| StorageError::Csv { relation: rel.clone(), message: e.to_string() })?;
        let mut row = Vec::with_capacity(schema.variables.len());
        for (&v, &src) in schema.variables.iter().zip(&source_col) {
            let raw = record.get(src).unwrap_or("").trim();
            let variable = catalog.var(v);
            let cell = match variable.kind {
                VarKind::Categorical => dict.intern(v, raw) as u64,
                VarKind::Continuous => match raw.parse::<f64>() {
                    Ok(x) if x.is_finite() => encode_f64(x),
                    _ => {
                        return Err(StorageError::Parse {
                            relation: rel,
                            column: variable.name.clone(),
                            row: line + 1,
                            value: raw.to_string(),
                        })
                    }
                },
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(Relation::from_rows(schema.clone(), rows, rank))
}

/// All relations of a catalog plus the shared category dictionary.
#[derive(Debug, Clone)]
pub struct Database {
    pub relations: Vec<Relation>,
    pub dict: CategoryDictionary,
}

impl Database {
    /// Loads every relation, resolving relative sources against `base_dir`.
    pub fn load(catalog: &Catalog, base_dir: &Path, delimiter: u8) -> Result<Database, StorageError> {
        let mut dict = CategoryDictionary::new(catalog);
        let rank = preorder_rank(catalog);
        let mut relations = Vec::with_capacity(catalog.relations.len());
        for schema in &catalog.relations {
            let path = base_dir.join(&schema.source);
            let file = std::fs::File::open(&path)
                .map_err(|source| StorageError::Io { path: path.display().to_string(), source })?;
            relations.push(load_relation(file, schema, catalog, &mut dict, &rank, delimiter)?);
        }
        Ok(Database { relations, dict })
    }

    /// Loads relations from in-memory CSV texts, one per catalog relation.
    pub fn from_csv_texts(catalog: &Catalog, texts: &[String]) -> Result<Database, StorageError> {
        let mut dict = CategoryDictionary::new(catalog);
        let rank = preorder_rank(catalog);
        let relations = catalog
            .relations
            .iter()
            .zip(texts)
            .map(|(schema, text)| load_relation(text.as_bytes(), schema, catalog, &mut dict, &rank, b','))
            .collect::<Result<_, _>>()?;
        Ok(Database { relations, dict })
    }
}

/// Narrows `range` to the maximal run of rows carrying `value` in the sort-key
/// column `column`. The column must be the next unfixed sort key, so rows in
/// `range` are sorted on it.
pub fn narrow_range(column: &[u64], range: Range, value: u64) -> Range {
    let slice = &column[range.begin..range.end];
    let lo = slice.partition_point(|&v| v < value);
    let hi = lo + slice[lo..].partition_point(|&v| v <= value);
    Range { begin: range.begin + lo, end: range.begin + hi }
}

/// Ascending stream of the values present in every input column slice.
///
/// Each slice must be sorted. Cursors skip forward with binary search to the
/// largest current head, so each value of the intersection is produced once.
pub struct ValueIntersection<'a> {
    cursors: Vec<&'a [u64]>,
}

impl<'a> Iterator for ValueIntersection<'a> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.cursors.is_empty() {
            return None;
        }
        loop {
            let mut target = 0u64;
            for c in &self.cursors {
                target = target.max(*c.first()?);
            }
            let mut agreed = true;
            for c in self.cursors.iter_mut() {
                let skip = c.partition_point(|&v| v < target);
                *c = &c[skip..];
                match c.first() {
                    None => return None,
                    Some(&v) if v != target => agreed = false,
                    _ => {}
                }
            }
            if agreed {
                for c in self.cursors.iter_mut() {
                    let skip = c.partition_point(|&v| v <= target);
                    *c = &c[skip..];
                }
                return Some(target);
            }
        }
    }
}

/// Values common to all `(column, range)` pairs, ascending, each once.
pub fn intersect_values<'a>(inputs: impl IntoIterator<Item = (&'a [u64], Range)>) -> ValueIntersection<'a> {
    ValueIntersection { cursors: inputs.into_iter().map(|(col, r)| &col[r.begin..r.end]).collect() }
}
