mod common;

use acdc::aggregator::AggregateOptions;
use acdc::catalog::ModelKind;
use acdc::fd::BMatrix;
use acdc::gram::{dot, norm2};
use acdc::oracle::{dense_gram, materialize_join, ridge_closed_form};
use acdc::par::Exec;
use acdc::pipeline::prepare;
use acdc::planner::kinds_of;
use acdc::solver::{armijo_fast_check, bgd_train, next_grad_linear, LineTerms, Objective, SolverOptions};
use acdc::storage::{decode_f64, encode_f64};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> Instance {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), seed.is_multiple_of(2))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_preserves_order_and_round_trips(a in -1e12f64..1e12, b in -1e12f64..1e12) {
        prop_assert_eq!(decode_f64(encode_f64(a)), a);
        prop_assert_eq!(a < b, encode_f64(a) < encode_f64(b));
    }

    #[test]
    fn sigma_product_matches_dense_oracle(seed in any::<u64>(), pr2 in any::<bool>()) {
        let inst = instance(seed);
        let kind = if pr2 { ModelKind::Pr2 } else { ModelKind::Lr };
        let Some(sys) = gram(&inst.catalog, &inst.db, kind) else { return Ok(()) };
        let p = plan_and_aggregate(&inst.catalog, &inst.db, kind, true);
        let join = materialize_join(&inst.db, inst.catalog.variables.len());
        let dense = dense_gram(&join, &p.plan.components, &kinds_of(&inst.catalog), inst.catalog.response().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let g = random_vec(&mut rng, sys.dim());
        let got = sys.sigma_times(&g).unwrap();
        for (i, row) in dense.sigma.iter().enumerate() {
            let want = dot(row, &g);
            let scale: f64 = row.iter().zip(&g).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1.0);
            prop_assert!((got[i] - want).abs() <= 1e-12 * scale, "row {}: {} vs {}", i, got[i], want);
        }
    }

    #[test]
    fn quadratic_form_is_symmetric(seed in any::<u64>()) {
        let inst = instance(seed);
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Pr2) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (u, v) = (random_vec(&mut rng, sys.dim()), random_vec(&mut rng, sys.dim()));
        let (uv, vu) = (sys.quadratic_form(&u, &v).unwrap(), sys.quadratic_form(&v, &u).unwrap());
        prop_assert!((uv - vu).abs() <= 1e-12 * uv.abs().max(1.0));
        prop_assert!(sys.quadratic_form(&u, &u).unwrap() >= -1e-12);
    }

    #[test]
    fn execution_modes_are_bit_identical(seed in any::<u64>()) {
        let inst = instance(seed);
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Pr2) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let g = random_vec(&mut rng, sys.dim());
        let par = sys.sigma_times(&g).unwrap();
        let seq = sys.with_exec(Exec::Sequential).sigma_times(&g).unwrap();
        prop_assert_eq!(par.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), seq.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn cache_never_changes_aggregates(seed in any::<u64>()) {
        let inst = instance(seed);
        let on = plan_and_aggregate(&inst.catalog, &inst.db, ModelKind::Pr2, true);
        let off = plan_and_aggregate(&inst.catalog, &inst.db, ModelKind::Pr2, false);
        prop_assert_eq!(off.roots.stats.cache_hits, 0);
        for (a, b) in on.roots.maps.iter().zip(&off.roots.maps) {
            prop_assert_eq!(a.len(), b.len());
            for ((ka, va), (kb, vb)) in a.iter().zip(b.iter()) {
                prop_assert_eq!(ka, kb);
                prop_assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn fast_armijo_check_agrees_with_direct_evaluation(seed in any::<u64>(), alpha in 1e-4f64..10.0, lambda in 0.0f64..1.0) {
        let inst = instance(seed);
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Lr) else { return Ok(()) };
        let obj = Objective::linear(&sys, lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let theta = random_vec(&mut rng, sys.dim());
        let d = random_vec(&mut rng, sys.dim());
        let sigma_d = sys.sigma_times(&d).unwrap();
        let terms = LineTerms::new(&theta, &d, &sigma_d, &d, sys.c());
        let j = obj.value(&theta).unwrap();
        let trial: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t - alpha * d).collect();
        let jt = obj.value(&trial).unwrap();
        prop_assert!((terms.delta(alpha, lambda) - (jt - j)).abs() <= 1e-9 * j.abs().max(jt.abs()).max(1.0));
        let margin = j - 0.5 * alpha * norm2(&d) - jt;
        if margin.abs() > 1e-9 * j.abs().max(jt.abs()).max(1.0) {
            prop_assert_eq!(armijo_fast_check(&terms, alpha, lambda, 0.0), margin <= 0.0);
        }
    }

    #[test]
    fn gradient_recurrence_matches_fresh_gradient(seed in any::<u64>(), alpha in 1e-4f64..2.0, lambda in 0.0f64..1.0) {
        let inst = instance(seed);
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Lr) else { return Ok(()) };
        let obj = Objective::linear(&sys, lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let theta = random_vec(&mut rng, sys.dim());
        let d = obj.grad(&theta).unwrap();
        let sigma_d = sys.sigma_times(&d).unwrap();
        let next: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t - alpha * d).collect();
        let fresh = obj.grad(&next).unwrap();
        let rec = next_grad_linear(&d, &sigma_d, &d, alpha, lambda);
        prop_assert!(max_abs_diff(&fresh, &rec) <= 1e-12, "gap {:e}", max_abs_diff(&fresh, &rec));
    }

    #[test]
    fn both_fast_modes_reach_ridge_solution(seed in any::<u64>()) {
        let inst = instance(seed);
        let Some(sys) = gram(&inst.catalog, &inst.db, ModelKind::Lr) else { return Ok(()) };
        let p = plan_and_aggregate(&inst.catalog, &inst.db, ModelKind::Lr, true);
        let join = materialize_join(&inst.db, inst.catalog.variables.len());
        let dense = dense_gram(&join, &p.plan.components, &kinds_of(&inst.catalog), inst.catalog.response().unwrap()).unwrap();
        let want = ridge_closed_form(&dense, 1e-3).unwrap();
        let j_star = dense.objective(&want, 1e-3);
        let obj = Objective::linear(&sys, 1e-3);

        let r = bgd_train(&obj, &SolverOptions::default()).unwrap();
        prop_assert!(r.converged);
        prop_assert!(max_abs_diff(&r.theta, &want) <= 1e-6, "gap {:e}", max_abs_diff(&r.theta, &want));

        // the recurrence stops within rounding drift of the optimum
        let opts = SolverOptions { gradient_recurrence: true, ..SolverOptions::default() };
        let r = bgd_train(&obj, &opts).unwrap();
        prop_assert!(r.converged);
        prop_assert_eq!(r.backtrack_sigma_products, 0);
        let j = obj.value(&r.theta).unwrap();
        prop_assert!((j - j_star).abs() <= 1e-9 * j_star.abs().max(1.0), "{} vs {}", j, j_star);
    }

    #[test]
    fn objective_never_increases(seed in any::<u64>(), fama in any::<bool>()) {
        let inst = instance(seed);
        let kind = if fama { ModelKind::Fama } else { ModelKind::Pr2 };
        let Some(sys) = gram(&inst.catalog, &inst.db, kind) else { return Ok(()) };
        let obj = if fama { Objective::fama(&sys, 2, 1e-2) } else { Objective::linear(&sys, 1e-2) };
        let opts = SolverOptions { record_iterates: true, max_iters: 200, ..SolverOptions::default() };
        let r = bgd_train(&obj, &opts).unwrap();
        let values: Vec<f64> = r.iterates.iter().map(|t| obj.value(t).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn b_solve_inverts_multiply(n in 1usize..30, groups in 1u32..6, maps in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Vec<u32>> = (0..maps).map(|_| (0..n).map(|_| rng.gen_range(0..groups)).collect()).collect();
        let b = BMatrix::assemble(n, &images);
        for j in 0..n {
            prop_assert_eq!(b.get(j, j), 1.0 + maps as f64);
            for k in 0..n {
                prop_assert_eq!(b.get(j, k), b.get(k, j));
            }
        }
        let v = random_vec(&mut rng, n);
        prop_assert!(b.residual(&b.solve(&v), &v) <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Mapping γ back to θ recovers γ through the dependency and attains the
    /// penalty with the smallest θ norm.
    #[test]
    fn fd_map_back_is_minimum_norm(cities in 3usize..15, countries in 1usize..5, seed in any::<u64>()) {
        let (mut c, db) = city_country(cities, countries, 60, seed);
        c.model.use_fd = true;
        let p = prepare(&c, &db, AggregateOptions::default()).unwrap();
        let ctx = p.fd.as_ref().unwrap();
        let layout = &p.system.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let gamma = random_vec(&mut rng, layout.dim());
        let (omega, _) = ctx.penalty_and_grad(layout, &gamma).unwrap();
        let (full, theta) = ctx.theta_from_gamma(&p.plan.components, layout, &gamma, &p.full_components).unwrap();

        let block = |name: &str| p.full_components.iter().position(|h| h.name(&p.plan.names) == name).unwrap();
        let (city, country) = (block("city"), block("country"));
        let g = &ctx.groups[0];
        let img = &g.determined[0].1;
        let th_city = &theta[full.range(city)];
        let th_country = &theta[full.range(country)];
        let gamma_city = &gamma[layout.range(g.block)];
        for (j, &k) in img.iter().enumerate() {
            let pos = full.domains[country].position(&[k]).unwrap();
            prop_assert!((th_city[j] + th_country[pos] - gamma_city[j]).abs() <= 1e-10);
        }
        let rest: f64 = norm2(&gamma) - norm2(gamma_city);
        let attained = norm2(th_city) + norm2(th_country) + rest;
        prop_assert!((attained - omega).abs() <= 1e-9 * omega.max(1.0), "{} vs {}", attained, omega);
    }
}
