use crossed_lmm::gls::{cls_fit, efficiency_lower_bounds, ols_fit, rls_fit};
use crossed_lmm::inference::{var_beta_cls, var_beta_ols_sandwich, var_beta_rls};
use crossed_lmm::linalg::rel_diff;
use crossed_lmm::oracle::{dense_gls, dense_sandwich, exact_efficiency, naive_u_statistics, DenseDesign};
use crossed_lmm::{compute_u_statistics, DedupPolicy, IndexedDataset, Observation, ScanPlan, VarianceComponents};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn design(r: usize, c: usize, p: usize, fill: f64, seed: u64) -> Option<IndexedDataset> {
    let mut s = seed | 1;
    let mut u = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut obs = Vec::new();
    for i in 0..r {
        for j in 0..c {
            if u() < fill {
                let mut x = vec![1.0];
                x.extend((0..p).map(|_| 2.0 * u() - 1.0));
                obs.push(Observation::new(format!("{i}"), format!("{j}"), x, 5.0 * u()));
            }
        }
    }
    if obs.len() < 3 * (p + 1) {
        return None;
    }
    IndexedDataset::from_observations(&obs, DedupPolicy::Error).ok()
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn vc() -> impl Strategy<Value = VarianceComponents> {
    (0.0..3.0f64, 0.0..3.0f64, 0.05..2.0f64).prop_map(|(a, b, e)| VarianceComponents::known(a, b, e).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn u_statistics_match_two_pass(r in 2usize..30, c in 2usize..30, p in 0usize..4,
                                   fill in 0.1..0.9f64, seed in any::<u64>(), shards in 1usize..5) {
        let Some(ds) = design(r, c, p, fill, seed) else { return Ok(()) };
        let beta: Vec<f64> = (0..=p).map(|k| 0.3 * k as f64 - 0.4).collect();
        let fast = compute_u_statistics(&ds, &beta, ScanPlan::sharded(shards)).unwrap();
        let slow = naive_u_statistics(&ds.collect_records().unwrap(), &beta);
        prop_assert!(rel_diff(&[fast.u_a, fast.u_b, fast.u_e], &[slow.u_a, slow.u_b, slow.u_e]) < 1e-10);
    }

    #[test]
    fn grouped_gls_matches_dense(r in 3usize..20, c in 3usize..20, p in 1usize..4,
                                 fill in 0.2..0.9f64, seed in any::<u64>(), comps in vc()) {
        let Some(ds) = design(r, c, p, fill, seed) else { return Ok(()) };
        if ols_fit(&ds, ScanPlan::default()).is_err() { return Ok(()) }
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let (rls, neq_r) = rls_fit(&ds, &comps, ScanPlan::default()).unwrap();
        let (cls, neq_c) = cls_fit(&ds, &comps, ScanPlan::default()).unwrap();
        let (dr, _) = dense_gls(&d.x, &d.y, &d.v_a(&comps)).unwrap();
        let (dc, _) = dense_gls(&d.x, &d.y, &d.v_b(&comps)).unwrap();
        prop_assert!(rel_diff(&rls, dr.as_slice()) < 1e-8);
        prop_assert!(rel_diff(&cls, dc.as_slice()) < 1e-8);

        let cov_r = var_beta_rls(&ds, &comps, &neq_r, ScanPlan::default()).unwrap();
        let cov_c = var_beta_cls(&ds, &comps, &neq_c, ScanPlan::default()).unwrap();
        let vr = d.v_r(&comps);
        prop_assert!(rel_diff(&flat(&cov_r), &flat(&dense_sandwich(&d.x, &d.v_a(&comps), &vr).unwrap())) < 1e-8);
        prop_assert!(rel_diff(&flat(&cov_c), &flat(&dense_sandwich(&d.x, &d.v_b(&comps), &vr).unwrap())) < 1e-8);
        prop_assert!(cov_r == cov_r.transpose());
    }

    #[test]
    fn ols_sandwich_matches_dense(r in 3usize..15, c in 3usize..15, p in 1usize..3,
                                  seed in any::<u64>(), comps in vc()) {
        let Some(ds) = design(r, c, p, 0.5, seed) else { return Ok(()) };
        let Ok(ols) = ols_fit(&ds, ScanPlan::default()) else { return Ok(()) };
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let cov = var_beta_ols_sandwich(&ds, &comps, &ols.xtx, ScanPlan::default()).unwrap();
        let eye = DMatrix::identity(d.n(), d.n());
        prop_assert!(rel_diff(&flat(&cov), &flat(&dense_sandwich(&d.x, &eye, &d.v_r(&comps)).unwrap())) < 1e-8);
    }

    #[test]
    fn efficiency_respects_lower_bound(r in 2usize..15, c in 2usize..15, seed in any::<u64>(), comps in vc()) {
        let Some(ds) = design(r, c, 1, 0.5, seed) else { return Ok(()) };
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let x: DVector<f64> = d.x.column(1).into_owned();
        let (eff_r, eff_c) = exact_efficiency(&x, &comps, &d).unwrap();
        let (lb_r, lb_c) = efficiency_lower_bounds(&comps, ds.profile());
        prop_assert!(eff_r > 0.0 && eff_r <= 1.0 + 1e-12);
        prop_assert!(eff_c > 0.0 && eff_c <= 1.0 + 1e-12);
        prop_assert!(eff_r >= lb_r - 1e-12, "{} < {}", eff_r, lb_r);
        prop_assert!(eff_c >= lb_c - 1e-12, "{} < {}", eff_c, lb_c);
    }
}
