#![allow(dead_code)]

use std::path::Path;

use acdc::aggregator::{compute_aggregates, AggregateOptions, RootAggregates};
use acdc::catalog::{parse_config, validate_catalog, Catalog, ModelKind, VarKind};
use acdc::gram::GramSystem;
use acdc::planner::{enumerate_components, kinds_of, Plan};
use acdc::storage::Database;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}

pub fn load_fixture(name: &str) -> (Catalog, Database) {
    let text = std::fs::read_to_string(fixtures().join(name)).unwrap();
    let c = validate_catalog(parse_config(&text).unwrap()).unwrap();
    let db = Database::load(&c, fixtures(), b',').unwrap();
    (c, db)
}

pub fn with_model(mut c: Catalog, kind: ModelKind, lambda: f64) -> Catalog {
    let mut spec = acdc::catalog::ModelSpec::new(kind);
    spec.lambda = lambda;
    spec.rank = c.model.rank;
    c.model = spec;
    c
}

pub struct Instance {
    pub catalog: Catalog,
    pub db: Database,
    pub config: String,
    pub csvs: Vec<String>,
    pub integer: bool,
}

/// A random schema with at most 5 variables and 3 relations, each relation
/// holding at most 50 rows over small domains so that joins are nonempty
/// most of the time.
pub fn random_instance(rng: &mut ChaCha8Rng, integer: bool) -> Instance {
    let names = ["A", "B", "C", "D", "E"];
    loop {
        let n = rng.gen_range(2..=5);
        // parent[i] < i, or None for a new tree
        let parent: Vec<Option<usize>> =
            (0..n).map(|i| if i == 0 || rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..i)) }).collect();
        let leaves: Vec<usize> = (0..n).filter(|&v| !parent.contains(&Some(v))).collect();
        if leaves.len() > 3 {
            continue;
        }
        let path = |mut v: usize| {
            let mut p = vec![v];
            while let Some(u) = parent[v] {
                p.push(u);
                v = u;
            }
            p.reverse();
            p
        };
        let mut relations: Vec<Vec<usize>> = leaves.iter().map(|&l| path(l)).collect();
        // thin relations while every variable stays housed
        for r in 0..relations.len() {
            let candidates = relations[r].clone();
            for v in candidates {
                if relations[r].len() > 1 && rng.gen_bool(0.3) {
                    let housed_elsewhere = relations.iter().enumerate().any(|(q, rel)| q != r && rel.contains(&v));
                    if housed_elsewhere {
                        relations[r].retain(|&w| w != v);
                    }
                }
            }
        }

        let kinds: Vec<VarKind> =
            (0..n).map(|_| if rng.gen_bool(0.4) { VarKind::Categorical } else { VarKind::Continuous }).collect();
        let continuous: Vec<usize> = (0..n).filter(|&v| kinds[v] == VarKind::Continuous).collect();
        let Some(&response) = continuous.choose(rng) else {
            continue;
        };
        let roles: Vec<&str> = (0..n)
            .map(|v| if v == response { "response" } else if rng.gen_bool(0.1) { "join-only" } else { "feature" })
            .collect();
        if !roles.contains(&"feature") {
            continue;
        }

        fn tree(v: usize, parent: &[Option<usize>], names: &[&str]) -> String {
            let mut s = format!("[\"{}\"", names[v]);
            for w in 0..parent.len() {
                if parent[w] == Some(v) {
                    s.push_str(", ");
                    s.push_str(&tree(w, parent, names));
                }
            }
            s.push(']');
            s
        }
        let roots: Vec<usize> = (0..n).filter(|&v| parent[v].is_none()).collect();
        let vorder = if roots.len() == 1 {
            tree(roots[0], &parent, &names)
        } else {
            format!("[{}]", roots.iter().map(|&r| tree(r, &parent, &names)).collect::<Vec<_>>().join(", "))
        };

        let rel_json: Vec<String> = relations
            .iter()
            .enumerate()
            .map(|(i, vars)| {
                let cols: Vec<String> = vars.iter().map(|&v| format!("\"{}\"", names[v])).collect();
                format!("{{\"name\": \"R{i}\", \"columns\": [{}], \"file\": \"r{i}.csv\"}}", cols.join(", "))
            })
            .collect();
        let var_json: Vec<String> = (0..n)
            .map(|v| {
                let kind = if kinds[v] == VarKind::Categorical { "categorical" } else { "continuous" };
                format!("{{\"name\": \"{}\", \"kind\": \"{kind}\", \"role\": \"{}\"}}", names[v], roles[v])
            })
            .collect();
        let config = format!(
            "{{\"relations\": [{}], \"variables\": [{}], \"vorder\": {vorder}, \"model\": {{\"kind\": \"lr\", \"lambda\": 0.001}}}}",
            rel_json.join(", "),
            var_json.join(", ")
        );

        // small per-variable domains keep the join populated
        let domain: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
        let values: Vec<Vec<String>> = (0..n)
            .map(|v| {
                (0..domain[v])
                    .map(|k| match kinds[v] {
                        VarKind::Categorical => format!("c{k}"),
                        VarKind::Continuous if integer => rng.gen_range(-3i32..=4).to_string(),
                        VarKind::Continuous => format!("{:.3}", rng.gen_range(-2.0f64..2.0)),
                    })
                    .collect()
            })
            .collect();
        let csvs: Vec<String> = relations
            .iter()
            .map(|vars| {
                let mut s = vars.iter().map(|&v| names[v]).collect::<Vec<_>>().join(",");
                s.push('\n');
                for _ in 0..rng.gen_range(1..=50) {
                    let row: Vec<&str> = vars.iter().map(|&v| values[v].choose(rng).unwrap().as_str()).collect();
                    s.push_str(&row.join(","));
                    s.push('\n');
                }
                s
            })
            .collect();

        let catalog = match parse_config(&config).and_then(validate_catalog) {
            Ok(c) => c,
            Err(e) => panic!("generated config rejected: {e}\n{config}"),
        };
        let db = Database::from_csv_texts(&catalog, &csvs).unwrap();
        return Instance { catalog, db, config, csvs, integer };
    }
}

pub struct Prepared {
    pub plan: Plan,
    pub roots: RootAggregates,
}

pub fn plan_and_aggregate(c: &Catalog, db: &Database, kind: ModelKind, caching: bool) -> Prepared {
    let plan = Plan::build(c, enumerate_components(c, kind)).unwrap();
    let roots = compute_aggregates(&plan.vorder, &plan.registers, db, AggregateOptions { caching });
    Prepared { plan, roots }
}

pub fn gram(c: &Catalog, db: &Database, kind: ModelKind) -> Option<GramSystem> {
    let p = plan_and_aggregate(c, db, kind, true);
    GramSystem::assemble(&p.plan.aggregates, p.roots.maps, &p.plan.components, &p.plan.names).ok()
}

pub fn kinds(c: &Catalog) -> Vec<VarKind> {
    kinds_of(c)
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sales over cities in countries; `city -> country` holds by construction.
pub fn city_country(cities: usize, countries: usize, rows: usize, seed: u64) -> (Catalog, Database) {
    let config = r#"{
      "relations": [
        {"name": "Geo", "columns": ["city", "country"], "file": "geo.csv"},
        {"name": "Sales", "columns": ["city", "item", "y"], "file": "sales.csv"},
        {"name": "Items", "columns": ["item", "price"], "file": "items.csv"}
      ],
      "variables": [
        {"name": "city", "kind": "categorical", "role": "feature"},
        {"name": "country", "kind": "categorical", "role": "feature"},
        {"name": "item", "kind": "categorical", "role": "feature"},
        {"name": "price", "kind": "continuous", "role": "feature"},
        {"name": "y", "kind": "continuous", "role": "response"}
      ],
      "fds": [{"determines": "city", "determined": ["country"]}],
      "vorder": ["city", ["country"], ["item", ["price"], ["y"]]],
      "model": {"kind": "lr", "lambda": 0.001}
    }"#;
    let c = validate_catalog(parse_config(config).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = 6;
    let mut geo = String::from("city,country\n");
    for k in 0..cities {
        geo.push_str(&format!("city{k},country{}\n", k % countries));
    }
    let mut sales = String::from("city,item,y\n");
    for _ in 0..rows {
        let (k, i) = (rng.gen_range(0..cities), rng.gen_range(0..items));
        let y = 0.5 * (k % countries) as f64 + 0.3 * i as f64 + rng.gen_range(-1.0..1.0);
        sales.push_str(&format!("city{k},item{i},{y:.4}\n"));
    }
    let mut item_rows = String::from("item,price\n");
    for i in 0..items {
        item_rows.push_str(&format!("item{i},{:.2}\n", 1.0 + 0.75 * i as f64));
    }
    let db = Database::from_csv_texts(&c, &[geo, sales, item_rows]).unwrap();
    (c, db)
}
