mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use acdc::aggregator::AggregateOptions;
use acdc::catalog::{parse_config, validate_catalog, ModelKind};
use acdc::fd::BMatrix;
use acdc::oracle::{aggregate, dense_gram, materialize_join, predict, ridge_closed_form};
use acdc::pipeline::prepare;
use acdc::planner::{annotate_vorder, build_registers, enumerate_aggregates, enumerate_components_for, kinds_of};
use acdc::solver::{bgd_train, Objective, SolverOptions};
use acdc::storage::{preorder_rank, Database};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn within(start: Instant, limit: Duration, what: &str) {
    let took = start.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
}

#[test]
fn c1_register_sizes_and_monomials() {
    let start = Instant::now();
    let (c, _) = load_fixture("f1.json");
    let names: Vec<String> = c.variables.iter().map(|v| v.name.clone()).collect();
    let kinds = kinds_of(&c);
    let all: Vec<usize> = (0..5).collect();
    let comps = enumerate_components_for(&all, &kinds, &preorder_rank(&c), ModelKind::Lr);
    let plan = enumerate_aggregates(&comps, None, &kinds, &names);
    let vo = annotate_vorder(&c).unwrap();
    let regs = build_registers(&vo, &plan.monomials, &kinds, &names).unwrap();
    within(start, Duration::from_millis(50), "planning");

    let set = |ms: Vec<String>| ms.into_iter().collect::<BTreeSet<String>>();
    let want = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<String>>();
    let at = |n: &str| &regs.nodes[vo.node_of[c.var_id(n).unwrap()]];
    let entries = |n: &str| set(at(n).entries.iter().map(|e| e.monomial.display(&names)).collect());
    let local = |n: &str| set(at(n).local.iter().map(|m| m.display(&names)).collect());

    assert_eq!(
        entries("A"),
        want(&[
            "1", "A", "B", "C", "D", "E", "A*A", "A*B", "A*C", "A*D", "A*E", "B*C", "B*D", "B*E", "C*C", "C*D", "C*E",
            "D*D", "D*E"
        ])
    );
    assert_eq!(entries("B"), want(&["1", "B", "C", "D", "B*C", "B*D", "C*C", "C*D", "D*D"]));
    assert_eq!(local("A"), want(&["1", "A", "A*A"]));
    assert_eq!(local("B"), want(&["1", "B"]));
    assert_eq!(entries("C"), want(&["1", "C", "C*C"]));
    assert_eq!(entries("D"), want(&["1", "D", "D*D"]));
    assert_eq!(entries("E"), want(&["1", "E"]));
    assert_eq!(
        [at("A").entries.len(), at("B").entries.len(), at("A").local.len(), at("B").local.len()],
        [19, 9, 3, 2]
    );
    assert_eq!([at("C").entries.len(), at("D").entries.len(), at("E").entries.len()], [3, 3, 2]);
}

#[test]
fn c2_randomized_oracle_equivalence() {
    let start = Instant::now();
    let mut instances = 0;
    for seed in 0..150u64 {
        let integer = seed % 3 != 0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, integer);
        let c = &inst.catalog;
        let kinds = kinds_of(c);
        let rank = preorder_rank(c);
        let join = materialize_join(&inst.db, c.variables.len());
        for kind in [ModelKind::Lr, ModelKind::Pr2] {
            let p = plan_and_aggregate(c, &inst.db, kind, true);
            for (m, got) in p.plan.aggregates.monomials.iter().zip(&p.roots.maps) {
                let want = aggregate(&join, m, &kinds, &rank);
                assert_eq!(got.group_by, want.group_by, "seed {seed}");
                assert_eq!(got.len(), want.len(), "seed {seed} {}", m.display(&p.plan.names));
                for ((kg, vg), (kw, vw)) in got.iter().zip(want.iter()) {
                    assert_eq!(kg, kw, "seed {seed}");
                    if integer {
                        assert_eq!(vg, vw, "seed {seed} {}", m.display(&p.plan.names));
                    } else {
                        assert!(close(vg, vw, 1e-9), "seed {seed}: {vg} vs {vw}");
                    }
                }
            }
            if join.count() == 0 {
                continue;
            }
            let sys = gram(c, &inst.db, kind).expect("nonempty join assembles");
            let response = c.response().unwrap();
            let dense = dense_gram(&join, &p.plan.components, &kinds, response).unwrap();
            assert_eq!(sys.dim(), dense.dim(), "seed {seed}");
            let sigma = sys.dense_sigma();
            let cmp = |a: f64, b: f64| if integer { a == b } else { close(a, b, 1e-9) };
            for i in 0..dense.dim() {
                assert!(cmp(sys.c()[i], dense.c[i]), "seed {seed} c[{i}]");
                for j in 0..dense.dim() {
                    assert!(cmp(sigma[i][j], dense.sigma[i][j]), "seed {seed} Σ[{i}][{j}]: {} vs {}", sigma[i][j], dense.sigma[i][j]);
                }
            }
            assert!(cmp(sys.s_y(), dense.s_y), "seed {seed} s_y");
        }
        if join.count() > 0 {
            instances += 1;
        }
    }
    println!("{instances} instances with a nonempty join");
    assert!(instances >= 100, "only {instances} instances with a nonempty join");
    within(start, Duration::from_secs(10), "oracle suite");
}

#[test]
fn c3_gradient_finite_differences() {
    let start = Instant::now();
    let (c, db) = load_fixture("f1.json");
    let h = 1e-5;
    let mut models: Vec<(ModelKind, usize)> = vec![(ModelKind::Lr, 0), (ModelKind::Pr2, 0)];
    models.extend([1, 2, 8].map(|r| (ModelKind::Fama, r)));
    for (kind, rank) in models {
        let sys = gram(&with_model(c.clone(), kind, 1e-3), &db, kind).unwrap();
        let obj = match kind {
            ModelKind::Fama => Objective::fama(&sys, rank, 1e-3),
            _ => Objective::linear(&sys, 1e-3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let grad = obj.grad(&theta).unwrap();
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (obj.value(&up).unwrap() - obj.value(&down).unwrap()) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(rel <= 1e-4, "{kind:?} r={rank} coordinate {k}: analytic {} vs numeric {fd}", grad[k]);
        }
    }
    within(start, Duration::from_secs(1), "gradient checks");
}

fn ridge_check(c: &acdc::catalog::Catalog, db: &Database, label: &str) {
    let c = with_model(c.clone(), ModelKind::Lr, 1e-3);
    let sys = gram(&c, db, ModelKind::Lr).unwrap();
    let p = plan_and_aggregate(&c, db, ModelKind::Lr, true);
    let join = materialize_join(db, c.variables.len());
    let dense = dense_gram(&join, &p.plan.components, &kinds_of(&c), c.response().unwrap()).unwrap();
    let want = ridge_closed_form(&dense, 1e-3).unwrap();
    let r = bgd_train(&Objective::linear(&sys, 1e-3), &SolverOptions::default()).unwrap();
    assert!(r.converged, "{label}: no convergence in {} iterations", r.iterations);
    let err = max_abs_diff(&r.theta, &want);
    assert!(err <= 1e-6, "{label}: max coordinate error {err:e}");
}

#[test]
fn c4_lr_matches_ridge_closed_form() {
    let start = Instant::now();
    let (c, db) = load_fixture("f1.json");
    ridge_check(&c, &db, "fixture");
    let mut done = 0;
    let mut seed = 1000;
    while done < 20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, seed % 2 == 0);
        seed += 1;
        if materialize_join(&inst.db, inst.catalog.variables.len()).count() == 0 {
            continue;
        }
        ridge_check(&inst.catalog, &inst.db, &format!("seed {}", seed - 1));
        done += 1;
    }
    within(start, Duration::from_secs(5), "ridge comparison");
}

#[test]
fn c5_fd_reparameterization_equivalence() {
    let start = Instant::now();
    let (c, db) = city_country(12, 4, 160, 5);
    let opts = SolverOptions::default();

    let plain = prepare(&c, &db, AggregateOptions::default()).unwrap();
    let r_plain = bgd_train(&Objective::linear(&plain.system, 1e-3), &opts).unwrap();
    assert!(r_plain.converged);

    let mut c_fd = c.clone();
    c_fd.model.use_fd = true;
    let c_fd = validate_catalog(c_fd).unwrap();
    let fd = prepare(&c_fd, &db, AggregateOptions::default()).unwrap();
    let ctx = fd.fd.as_ref().unwrap();
    let r_fd = bgd_train(&Objective::linear(&fd.system, 1e-3).with_fd(ctx), &opts).unwrap();
    assert!(r_fd.converged);
    let (layout, theta) =
        ctx.theta_from_gamma(&fd.plan.components, &fd.system.layout, &r_fd.theta, &fd.full_components).unwrap();
    assert_eq!(layout, plain.system.layout);

    let j_mapped = Objective::linear(&plain.system, 1e-3).value(&theta).unwrap();
    assert!((r_fd.objective - r_plain.objective).abs() <= 1e-6, "{} vs {}", r_fd.objective, r_plain.objective);
    assert!((j_mapped - r_plain.objective).abs() <= 1e-6, "{j_mapped} vs {}", r_plain.objective);

    let join = materialize_join(&db, c.variables.len());
    let kinds = kinds_of(&c);
    let p_plain = predict(&join, &plain.full_components, &kinds, &plain.system.layout, &r_plain.theta);
    let p_fd = predict(&join, &fd.full_components, &kinds, &layout, &theta);
    assert!(max_abs_diff(&p_plain, &p_fd) <= 1e-6, "prediction gap {:e}", max_abs_diff(&p_plain, &p_fd));

    let (full, reduced) = (plain.plan.aggregates.monomials.len(), fd.plan.aggregates.monomials.len());
    assert!(reduced < full, "reduced {reduced} vs full {full}");
    assert!(ctx.groups[0].b.dim() >= 10);
    within(start, Duration::from_secs(5), "fd equivalence");
}

#[test]
fn c6_fast_path_matches_naive_iterates() {
    let start = Instant::now();
    let mut done = 0;
    let mut seed = 2000;
    while done < 20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, seed % 2 == 0);
        seed += 1;
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Lr) else {
            continue;
        };
        let obj = Objective::linear(&sys, 1e-3);
        let base = SolverOptions { record_iterates: true, ..SolverOptions::default() };
        let fast = bgd_train(&obj, &SolverOptions { fast_path: true, ..base.clone() }).unwrap();
        let naive = bgd_train(&obj, &SolverOptions { fast_path: false, ..base }).unwrap();
        assert_eq!(fast.backtrack_sigma_products, 0, "seed {}", seed - 1);
        assert_eq!(fast.iterates.len(), naive.iterates.len(), "seed {}: iterate counts differ", seed - 1);
        for (k, (a, b)) in fast.iterates.iter().zip(&naive.iterates).enumerate() {
            let gap = max_abs_diff(a, b);
            assert!(gap <= 1e-10, "seed {} iterate {k}: gap {gap:e}", seed - 1);
        }
        done += 1;
    }
    within(start, Duration::from_secs(5), "fast path comparison");
}

#[test]
fn c7_subtree_cache_hits_and_is_transparent() {
    let start = Instant::now();
    let (c, db) = load_fixture("f1.json");
    let all: Vec<usize> = (0..5).collect();
    let names: Vec<String> = c.variables.iter().map(|v| v.name.clone()).collect();
    let kinds = kinds_of(&c);
    let comps = enumerate_components_for(&all, &kinds, &preorder_rank(&c), ModelKind::Lr);
    let plan = enumerate_aggregates(&comps, None, &kinds, &names);
    let vo = annotate_vorder(&c).unwrap();
    let regs = build_registers(&vo, &plan.monomials, &kinds, &names).unwrap();
    let on = acdc::aggregator::compute_aggregates(&vo, &regs, &db, AggregateOptions { caching: true });
    let off = acdc::aggregator::compute_aggregates(&vo, &regs, &db, AggregateOptions { caching: false });
    let d = vo.node_of[c.var_id("D").unwrap()];
    assert!(on.node_hits[d] >= 1, "D subtree cache hits: {}", on.node_hits[d]);
    for (a, b) in on.maps.iter().zip(&off.maps) {
        assert_eq!(a.group_by, b.group_by);
        let bits = |m: &acdc::aggregator::AggregateMap| m.iter().map(|(k, v)| (k.to_vec(), v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    within(start, Duration::from_secs(1), "cache check");
}

#[test]
fn c8_train_runs_are_byte_identical() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("train.json");
    for model in ["lr", "fama"] {
        let run = |tag: &str| {
            let out = dir.path().join(format!("{model}-{tag}-model.json"));
            let report = dir.path().join(format!("{model}-{tag}-report.json"));
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_acdc"))
                .args(["train", "--config", config.to_str().unwrap(), "--model", model, "--rank", "2", "--seed", "7"])
                .args(["--max-iters", "200", "--out", out.to_str().unwrap(), "--report", report.to_str().unwrap()])
                .status()
                .unwrap();
            assert!(status.success(), "{model} run failed");
            (std::fs::read(out).unwrap(), std::fs::read(report).unwrap())
        };
        let (m1, r1) = run("a");
        let (m2, r2) = run("b");
        assert!(!m1.is_empty() && !r1.is_empty());
        assert_eq!(m1, m2, "{model} model files differ");
        assert_eq!(r1, r2, "{model} report files differ");
    }
    within(start, Duration::from_secs(2), "determinism runs");
}

#[test]
fn c9_b_matrix_algebra() {
    let start = Instant::now();
    let config = r#"{
      "relations": [
        {"name": "Geo", "columns": ["city", "country"], "file": "geo.csv"},
        {"name": "Obs", "columns": ["city", "y"], "file": "obs.csv"}
      ],
      "variables": [
        {"name": "city", "kind": "categorical", "role": "feature"},
        {"name": "country", "kind": "categorical", "role": "feature"},
        {"name": "y", "kind": "continuous", "role": "response"}
      ],
      "fds": [{"determines": "city", "determined": ["country"]}],
      "vorder": ["city", ["country"], ["y"]],
      "model": {"kind": "lr", "useFd": true}
    }"#;
    let c = validate_catalog(parse_config(config).unwrap()).unwrap();
    let geo = "city,country\nsaigon,vietnam\nhanoi,vietnam\nlondon,england\nleeds,england\nbristol,england\n";
    let obs = "city,y\nsaigon,1\nhanoi,2\nlondon,3\nleeds,4\nbristol,5\n";
    let db = Database::from_csv_texts(&c, &[geo.into(), obs.into()]).unwrap();

    let maps = acdc::fd::extract_fd_maps(&c, &db).unwrap();
    let (city, country) = (c.var_id("city").unwrap(), c.var_id("country").unwrap());
    let label = |v, id| db.dict.label(v, id).unwrap().to_string();
    let groups: Vec<(String, Vec<String>)> = maps[0].maps[0]
        .groups()
        .into_iter()
        .map(|(k, fs)| (label(country, k), fs.into_iter().map(|f| label(city, f)).collect()))
        .collect();
    assert_eq!(
        groups,
        vec![
            ("vietnam".to_string(), vec!["saigon".to_string(), "hanoi".to_string()]),
            ("england".to_string(), vec!["london".to_string(), "leeds".to_string(), "bristol".to_string()]),
        ]
    );

    let prepared = prepare(&c, &db, AggregateOptions::default()).unwrap();
    let b: &BMatrix = &prepared.fd.as_ref().unwrap().groups[0].b;
    let dense = b.to_dense();
    for j in 0..5 {
        for k in 0..5 {
            let same = (j < 2) == (k < 2);
            let want = if j == k { 2.0 } else if same { 1.0 } else { 0.0 };
            assert_eq!(dense[j][k], want, "B[{j}][{k}]");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let back = b.mul(&b.solve(&v));
        let res = max_abs_diff(&back, &v);
        assert!(res <= 1e-10, "residual {res:e}");
    }
    within(start, Duration::from_secs(1), "B algebra");
}
