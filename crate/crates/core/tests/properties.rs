use std::collections::BTreeSet;

use nalgebra::DMatrix;
use panel_ate::dgp::oracle_ate_did;
use panel_ate::estimator::{ate_from_weights, estimate_block};
use panel_ate::ingest::{
    apply_sample_filters, build_outcome_panel, per_100k, FilterConfig, Metric, MetricRecord,
    PopulationTable, Span, TreatmentRoster,
};
use panel_ate::panel::{validate_block, BlockDesign, Panel};
use panel_ate::weights::sigma_hat_sq;
use panel_ate::{bootstrap_se, BootstrapOptions, Method, SolverOptions};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    y: DMatrix<f64>,
    design: BlockDesign,
}

fn case(
    n0: std::ops::Range<usize>,
    n1: std::ops::Range<usize>,
    t0: std::ops::Range<usize>,
    t1: std::ops::Range<usize>,
) -> impl Strategy<Value = Case> {
    (n0, n1, t0, t1).prop_flat_map(|(n0, n1, t0, t1)| {
        let n = n0 + n1;
        let t = t0 + t1;
        prop::collection::vec(-50.0..50.0f64, n * t).prop_map(move |v| Case {
            y: DMatrix::from_row_slice(n, t, &v),
            design: BlockDesign::new(n0, n1, t0, t1),
        })
    })
}

fn panel_of(c: &Case) -> Panel {
    let units: Vec<String> = (0..c.design.n()).map(|i| format!("u{i:02}")).collect();
    let periods: Vec<String> = (0..c.design.t()).map(|j| (j + 1).to_string()).collect();
    let treated = units[c.design.n0..].to_vec();
    Panel::from_matrix(c.y.clone(), units, periods.clone())
        .unwrap()
        .with_treatment(&treated, &periods[c.design.t0])
        .unwrap()
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-8 * scale.max(1.0)
}

fn max_abs(y: &DMatrix<f64>) -> f64 {
    y.iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn records_round_trip(c in case(1..5, 1..4, 1..5, 1..4), seed in any::<u64>()) {
        let p = panel_of(&c);
        let mut records: Vec<(String, String, f64)> = Vec::new();
        for (i, u) in p.unit_ids().iter().enumerate() {
            for (j, per) in p.period_ids().iter().enumerate() {
                records.push((u.clone(), per.clone(), c.y[(i, j)]));
            }
        }
        // Deterministic shuffle.
        let k = records.len();
        for i in 0..k {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % k as u64) as usize;
            records.swap(i, j);
        }
        let q = Panel::from_records(&records).unwrap();
        for (u, per, v) in &records {
            prop_assert_eq!(q.value(u, per), Some(*v));
        }
    }

    #[test]
    fn block_ordering_is_valid(c in case(1..6, 1..4, 1..5, 1..4), seed in any::<u64>()) {
        // Scatter the treated units among the controls.
        let n = c.design.n();
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let j = (seed.rotate_left(i as u32) % n as u64) as usize;
            order.swap(i, j);
        }
        let p = panel_of(&c).select_rows(&order);
        let design = p.to_block().unwrap();
        prop_assert!(validate_block(&p, &design).is_ok());
        prop_assert!(design.row_order[..design.n0].iter().all(|&i| !p.is_treated(i)));
        prop_assert!(design.row_order[design.n0..].iter().all(|&i| p.is_treated(i)));
        let (y, _) = p.block().unwrap();
        let orig = estimate_block(&c.y, &c.design, Method::Did, &SolverOptions::default()).unwrap().0;
        let shuffled = estimate_block(&y, &design, Method::Did, &SolverOptions::default()).unwrap().0;
        prop_assert!(close(orig, shuffled, max_abs(&c.y)));
    }

    #[test]
    fn did_is_four_means(c in case(1..8, 1..5, 1..6, 1..4)) {
        let (ate, w, _) = estimate_block(&c.y, &c.design, Method::Did, &SolverOptions::default()).unwrap();
        prop_assert!(w.check().is_empty());
        prop_assert!(close(ate, oracle_ate_did(&c.y, &c.design), max_abs(&c.y)));
    }

    #[test]
    fn sigma_shift_and_scale(c in case(1..6, 1..3, 2..6, 1..3), shift in -100.0..100.0f64, k in 0.1..10.0f64) {
        let s = sigma_hat_sq(&c.y, &c.design).unwrap();
        let shifted = sigma_hat_sq(&c.y.add_scalar(shift), &c.design).unwrap();
        let scaled = sigma_hat_sq(&(&c.y * k), &c.design).unwrap();
        prop_assert!(close(s, shifted, s));
        prop_assert!(close(k * k * s, scaled, k * k * s));
    }

    // t0 >= n0 keeps the SC program strictly convex for generic data.
    #[test]
    fn sc_affine_invariance(c in case(1..5, 1..4, 5..8, 1..3), shift in -100.0..100.0f64, k in 0.1..10.0f64) {
        let opts = SolverOptions::default();
        let (ate, w, _) = estimate_block(&c.y, &c.design, Method::Sc, &opts).unwrap();
        let y2 = (&c.y * k).add_scalar(shift);
        let (ate2, w2, _) = estimate_block(&y2, &c.design, Method::Sc, &opts).unwrap();
        prop_assert!(close(k * ate, ate2, k * max_abs(&c.y)), "{} vs {}", k * ate, ate2);
        for (a, b) in w.omega.iter().zip(&w2.omega) {
            prop_assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", w.omega, w2.omega);
        }
    }

    // n0 > t0 keeps the SDID time-weight program strictly convex.
    #[test]
    fn sdid_affine_invariance(c in case(5..9, 1..4, 2..5, 1..3), shift in -100.0..100.0f64, k in 0.1..10.0f64) {
        let opts = SolverOptions::default();
        let (ate, w, _) = estimate_block(&c.y, &c.design, Method::Sdid, &opts).unwrap();
        let y2 = (&c.y * k).add_scalar(shift);
        let (ate2, w2, _) = estimate_block(&y2, &c.design, Method::Sdid, &opts).unwrap();
        prop_assert!(close(k * ate, ate2, k * max_abs(&c.y)), "{} vs {}", k * ate, ate2);
        for (a, b) in w.omega.iter().chain(&w.lambda).zip(w2.omega.iter().chain(&w2.lambda)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn sc_ate_is_post_gap(c in case(1..6, 1..4, 2..7, 1..3)) {
        let (ate, w, _) = estimate_block(&c.y, &c.design, Method::Sc, &SolverOptions::default()).unwrap();
        prop_assert!(w.check().is_empty());
        let d = &c.design;
        let post_mean = |i: usize| (d.t0..d.t()).map(|t| c.y[(i, t)]).sum::<f64>() / d.t1 as f64;
        let treated = d.treated_rows().map(post_mean).sum::<f64>() / d.n1 as f64;
        let synthetic: f64 = d.control_rows().zip(&w.omega).map(|(i, o)| o * post_mean(i)).sum();
        prop_assert!(close(ate, treated - synthetic, max_abs(&c.y)));
    }

    #[test]
    fn control_permutation(c in case(5..9, 1..3, 2..5, 1..3), seed in any::<u64>()) {
        let d = &c.design;
        let mut perm: Vec<usize> = (0..d.n0).collect();
        for i in 0..d.n0 {
            let j = (seed.rotate_right(i as u32) % d.n0 as u64) as usize;
            perm.swap(i, j);
        }
        let rows: Vec<usize> = perm.iter().copied().chain(d.n0..d.n()).collect();
        let y2 = DMatrix::from_fn(d.n(), d.t(), |i, t| c.y[(rows[i], t)]);
        for m in [Method::Did, Method::Sdid] {
            let (ate, w, _) = estimate_block(&c.y, d, m, &SolverOptions::default()).unwrap();
            let (ate2, w2, _) = estimate_block(&y2, d, m, &SolverOptions::default()).unwrap();
            prop_assert!(close(ate, ate2, max_abs(&c.y)), "{m}: {ate} vs {ate2}");
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((w2.omega[k] - w.omega[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn ate_matches_own_weights(c in case(1..6, 1..4, 2..6, 1..3)) {
        for m in Method::ALL {
            let (ate, w, _) = estimate_block(&c.y, &c.design, m, &SolverOptions::default()).unwrap();
            prop_assert_eq!(ate, ate_from_weights(&c.y, &c.design, &w).unwrap());
        }
    }
}

fn assert_se_scales(
    p: &Panel,
    m: Method,
    k: f64,
    seed: u64,
    scale: f64,
) -> Result<(), TestCaseError> {
    let q = p.map_outcomes(|v| k * v + 3.0);
    let a = bootstrap_se(p, m, 20, seed, &BootstrapOptions::default()).unwrap();
    let b = bootstrap_se(&q, m, 20, seed, &BootstrapOptions::default()).unwrap();
    prop_assert_eq!(a.redraws, b.redraws);
    prop_assert!(
        close(k * a.se, b.se, k * scale),
        "{m}: {} vs {}",
        k * a.se,
        b.se
    );
    Ok(())
}

// Each method is checked on designs where its weight programs stay
// identified under resampling: SC needs more pre-periods than controls,
// SDID time weights need more distinct controls than pre-periods.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bootstrap_scale_equivariance_did(c in case(2..7, 2..5, 1..5, 1..3), k in 0.5..4.0f64, seed in any::<u64>()) {
        assert_se_scales(&panel_of(&c), Method::Did, k, seed, max_abs(&c.y))?;
    }

    #[test]
    fn bootstrap_scale_equivariance_sc(c in case(2..4, 2..5, 6..9, 1..3), k in 0.5..4.0f64, seed in any::<u64>()) {
        assert_se_scales(&panel_of(&c), Method::Sc, k, seed, max_abs(&c.y))?;
    }

    #[test]
    fn bootstrap_scale_equivariance_sdid(c in case(16..20, 2..5, 2..4, 1..3), k in 0.5..4.0f64, seed in any::<u64>()) {
        assert_se_scales(&panel_of(&c), Method::Sdid, k, seed, max_abs(&c.y))?;
    }
}

fn metric_records(c: &Case, missing: &[(usize, usize)]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for i in 0..c.design.n() {
        for t in 0..c.design.t() {
            if missing.contains(&(i, t)) {
                continue;
            }
            out.push(MetricRecord {
                economy: format!("E{i}"),
                period: format!("{}Q{}", 2020 + t / 4, t % 4 + 1),
                metric: Metric::Pushes,
                language: None,
                value: c.y[(i, t)].abs(),
            });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn filters_idempotent_and_partition(
        c in case(2..6, 1..4, 2..5, 1..3),
        holes in prop::collection::vec((0usize..9, 0usize..8), 0..4),
        eu in any::<bool>(),
    ) {
        let mut recs = metric_records(&c, &holes);
        if eu {
            recs.extend(metric_records(&c, &[]).into_iter().take(c.design.t()).map(|r| MetricRecord { economy: "EU".into(), ..r }));
        }
        let periods: Vec<&str> = recs.iter().map(|r| r.period.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
        let span = Span::new(periods[0], periods[periods.len() - 1]).unwrap();
        let input: BTreeSet<String> = recs.iter().map(|r| r.economy.clone()).collect();
        match apply_sample_filters(&recs, &span, &FilterConfig::default()) {
            Ok((kept, log)) => {
                let kept_set: BTreeSet<String> = kept.iter().map(|r| r.economy.clone()).collect();
                let logged: Vec<String> = log.iter().map(|e| e.economy.clone()).collect();
                let logged_set: BTreeSet<String> = logged.iter().cloned().collect();
                prop_assert_eq!(logged.len(), logged_set.len());
                prop_assert!(kept_set.is_disjoint(&logged_set));
                prop_assert_eq!(kept_set.union(&logged_set).cloned().collect::<BTreeSet<_>>(), input);
                let (again, log2) = apply_sample_filters(&kept, &span, &FilterConfig::default()).unwrap();
                prop_assert_eq!(again, kept);
                prop_assert!(log2.is_empty());
            }
            Err(e) => prop_assert_eq!(e, panel_ate::ingest::IngestError::EmptyAfterFilters),
        }
    }

    #[test]
    fn normalization_commutes_with_panel_building(c in case(1..6, 1..4, 1..5, 1..3), pops in prop::collection::vec(1.0e3..1.0e8f64, 9)) {
        let recs = metric_records(&c, &[]);
        let mut pop = PopulationTable::default();
        for (i, &v) in pops.iter().take(c.design.n()).enumerate() {
            pop.populations.insert(format!("E{i}"), v);
        }
        let treated: Vec<String> = (c.design.n0..c.design.n()).map(|i| format!("E{i}")).collect();
        let start = &recs[c.design.t0].period;
        let roster = TreatmentRoster::new(treated, start).unwrap();
        let (a, _) = build_outcome_panel(&per_100k(&recs, &pop).unwrap(), &roster, Metric::Pushes, None).unwrap();
        let (raw, _) = build_outcome_panel(&recs, &roster, Metric::Pushes, None).unwrap();
        for (i, u) in raw.unit_ids().iter().enumerate() {
            for (j, p) in raw.period_ids().iter().enumerate() {
                let expect = raw.outcomes()[(i, j)] / pop.get(u).unwrap() * 100_000.0;
                prop_assert_eq!(a.value(u, p), Some(expect));
            }
        }
    }
}
