//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crossed_lmm::gls::{cls_fit, efficiency_lower_bounds, ols_fit, rls_fit};
use crossed_lmm::inference::var_beta_rls;
use crossed_lmm::ingest::OwnedRecord;
use crossed_lmm::linalg::rel_diff;
use crossed_lmm::moments::{residual_moments, solve_moment_system};
use crossed_lmm::oracle::{
    adversarial_direction, dense_gls, dense_sandwich, exact_efficiency, naive_u_statistics, DenseDesign,
};
use crossed_lmm::simulator::{loglog_slope, mc_study, mse_slopes, run_replicates, ReplicateOutcome, StudyCell};
use crossed_lmm::{
    build_moment_matrix, compute_u_statistics, fit, simulate_crossed, solve_variance_components, DedupPolicy,
    EffectDist, Fill, FitOptions, GlsMode, IndexedDataset, Observation, ScanPlan, SimConfig, VarianceComponents,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = LIVE.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                LIVE.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated while running `f`, above what was live before.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

/// Largest fit working set allowed, in units of (R + C) * (p + 1) doubles.
const MEMORY_FACTOR: f64 = 16.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn vc(a: f64, b: f64, e: f64) -> VarianceComponents {
    VarianceComponents::known(a, b, e).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Random crossed design with standard normal covariates and an arbitrary
/// response. Retries until OLS is identifiable.
fn random_design(rng: &mut ChaCha8Rng, max_side: usize, p: usize, fill: f64, max_n: usize) -> IndexedDataset {
    loop {
        let r = rng.random_range(2..=max_side);
        let c = rng.random_range(2..=max_side);
        let q = fill.min(max_n as f64 / (r * c) as f64);
        let mut obs = Vec::new();
        for i in 0..r {
            for j in 0..c {
                if rng.random::<f64>() < q {
                    let mut x = vec![1.0];
                    x.extend((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                    let y = 3.0 * rng.random::<f64>() + x.iter().sum::<f64>();
                    obs.push(Observation::new(format!("r{i}"), format!("c{j}"), x, y));
                }
            }
        }
        if obs.len() <= 2 * (p + 1) || obs.len() > max_n {
            continue;
        }
        let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
        if ols_fit(&ds, ScanPlan::default()).is_ok() {
            return ds;
        }
    }
}

fn random_vc(rng: &mut ChaCha8Rng) -> VarianceComponents {
    vc(
        3.0 * rng.random::<f64>(),
        3.0 * rng.random::<f64>(),
        0.1 + 2.0 * rng.random::<f64>(),
    )
}

fn u_statistics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.random_range(0..=5);
        let fill = rng.random_range(0.1..0.9);
        let ds = random_design(&mut rng, 40, p, fill, usize::MAX);
        let beta: Vec<f64> = (0..=p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let shards = rng.random_range(1..=4);
        let fast = compute_u_statistics(&ds, &beta, ScanPlan::sharded(shards)).unwrap();
        let recs: Vec<OwnedRecord> = ds.collect_records().unwrap();
        let slow = naive_u_statistics(&recs, &beta);
        worst = worst.max(max_rel(
            &[fast.u_a, fast.u_b, fast.u_e],
            &[slow.u_a, slow.u_b, slow.u_e],
        ));
    }
    verdict(
        worst <= 1e-10,
        format!("100 designs, max relative error {worst:.2e} (limit 1e-10)"),
    )
}

struct GlsCheck {
    beta_err: f64,
    cov_err: f64,
}

fn gls_oracle() -> GlsCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut beta_err, mut cov_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = rng.random_range(1..=5);
        let fill = rng.random_range(0.1..0.9);
        let ds = random_design(&mut rng, 40, p, fill, 600);
        let comps = random_vc(&mut rng);
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let (rls, neq) = rls_fit(&ds, &comps, ScanPlan::default()).unwrap();
        let (cls, _) = cls_fit(&ds, &comps, ScanPlan::default()).unwrap();
        let va = d.v_a(&comps);
        let (dr, _) = dense_gls(&d.x, &d.y, &va).unwrap();
        let (dc, _) = dense_gls(&d.x, &d.y, &d.v_b(&comps)).unwrap();
        beta_err = beta_err
            .max(rel_diff(&rls, dr.as_slice()))
            .max(rel_diff(&cls, dc.as_slice()));
        let cov = var_beta_rls(&ds, &comps, &neq, ScanPlan::default()).unwrap();
        let dense = dense_sandwich(&d.x, &va, &d.v_r(&comps)).unwrap();
        cov_err = cov_err.max(rel_diff(&flat(&cov), &flat(&dense)));
    }
    GlsCheck { beta_err, cov_err }
}

fn worked_case() -> Verdict {
    let obs = [
        Observation::new("r1", "c1", vec![1.0], 1.0),
        Observation::new("r1", "c2", vec![1.0], 3.0),
        Observation::new("r2", "c1", vec![1.0], 5.0),
    ];
    let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
    let u = residual_moments(&ds, &[0.0], ScanPlan::default()).unwrap().u;
    let m = build_moment_matrix(ds.profile());
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    let u_ok = close(&[u.u_a, u.u_b, u.u_e], &[2.0, 8.0, 8.0]);
    let m_ok = close(m.m.as_flattened(), &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 4.0, 4.0, 6.0]);
    let vcs = solve_variance_components(&m, &u).unwrap();
    let raw_ok = close(&vcs.raw(), &[-8.0, -14.0, 16.0]);
    let clamped_ok = close(&vcs.feasible(), &[0.0, 0.0, 16.0]);
    let bare = solve_moment_system(&m.m, [2.0, 8.0, 8.0]).unwrap();
    let mark = |ok: bool| if ok { "ok" } else { "MISMATCH" };
    verdict(
        u_ok && m_ok && raw_ok && clamped_ok,
        format!(
            "U {} {:?}; M {}; raw {} {:?} (expected [-8, -14, 16]); clamped {} {:?} (expected [0, 0, 16]); \
             M^-1 (2, 8, 8) = {:?}",
            mark(u_ok),
            [u.u_a, u.u_b, u.u_e],
            mark(m_ok),
            mark(raw_ok),
            vcs.raw(),
            mark(clamped_ok),
            vcs.feasible(),
            bare
        ),
    )
}

fn unbiasedness(outcomes: &mut Vec<ReplicateOutcome>) -> Verdict {
    let opts = FitOptions::default();
    let truth = [2.0, 0.5, 1.0];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, dist) in [EffectDist::Gaussian, EffectDist::Laplace, EffectDist::T5]
        .into_iter()
        .enumerate()
    {
        let cfg = SimConfig {
            rows: 40,
            cols: 40,
            fill: Fill::Count(400),
            p: 0,
            beta: vec![1.0],
            vc: truth,
            dist: [dist; 3],
            seed: 500 + k as u64,
            fix_pattern: false,
        };
        let reps: Vec<ReplicateOutcome> = run_replicates(&cfg, 1000, &opts, threads())
            .into_iter()
            .map(|(_, r)| r.unwrap())
            .collect();
        let n = reps.len() as f64;
        let mut zs = Vec::new();
        for t in 0..3 {
            let vals: Vec<f64> = reps.iter().map(|o| o.vc_raw[t]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let z = (mean - truth[t]) / (sd / n.sqrt());
            pass &= z.abs() <= 3.0;
            zs.push(format!("{:.3}(z={z:+.2})", mean));
        }
        parts.push(format!("{dist:?}: {}", zs.join(" ")));
        outcomes.extend(reps);
    }
    verdict(
        pass,
        format!("mean raw (a, b, e) vs (2, 0.5, 1) over 1000 reps; {}", parts.join("; ")),
    )
}

fn study(sizes: &[usize], reps: usize, seed: u64) -> Vec<StudyCell> {
    let grid: Vec<SimConfig> = sizes
        .iter()
        .map(|&n| SimConfig::square_design(n, 5, seed + n as u64))
        .collect();
    let cells = mc_study(&grid, reps, &FitOptions::default(), threads()).unwrap();
    for c in &cells {
        assert!(c.failures.is_empty(), "{:?}", c.failures);
    }
    cells
}

fn mse_scaling(cells: &[StudyCell]) -> Verdict {
    let slopes = mse_slopes(cells);
    let mut pass = true;
    let mut parts = Vec::new();
    for (param, s) in &slopes {
        let (lo, hi) = match param.as_str() {
            "sigma2_a" | "sigma2_b" => (-0.80, -0.20),
            _ => (-1.25, -0.75),
        };
        let ok = (lo..=hi).contains(s);
        pass &= ok;
        parts.push(format!("{param} {s:+.3}{}", if ok { "" } else { " (out of window)" }));
    }
    verdict(pass, format!("slopes over N = 400..25600: {}", parts.join(", ")))
}

fn coverage(cells: &[StudyCell]) -> Verdict {
    let rows: Vec<_> = cells[0]
        .rows
        .iter()
        .filter(|r| r.param.starts_with("beta") && r.param != "beta0")
        .collect();
    let pass = rows
        .iter()
        .all(|r| r.coverage.is_some_and(|c| (0.92..=0.975).contains(&c)));
    let list: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.3}", r.param, r.coverage.unwrap()))
        .collect();
    let intercept = cells[0]
        .rows
        .iter()
        .find(|r| r.param == "beta0")
        .and_then(|r| r.coverage);
    verdict(
        pass,
        format!(
            "N=6400, 500 reps: {} (intercept, not part of the criterion: {:.3})",
            list.join(", "),
            intercept.unwrap_or(f64::NAN)
        ),
    )
}

fn linear_scaling() -> Verdict {
    let sizes = [10_000usize, 40_000, 160_000, 640_000];
    let opts = FitOptions {
        emit_diagnostics: true,
        ..FitOptions::default()
    };
    let p = 5;
    let mut ns = Vec::new();
    let mut secs = Vec::new();
    let mut ratios = Vec::new();
    for &n in &sizes {
        let (ds, _) = simulate_crossed(&SimConfig::square_design(n, p, 800 + n as u64)).unwrap();
        let units = ((ds.profile().rows() + ds.profile().cols()) * (p + 1) * 8) as f64;
        let mut best = f64::INFINITY;
        let mut peak = 0usize;
        for _ in 0..3 {
            let start = Instant::now();
            let (res, bytes) = peak_during(|| fit(&ds, &opts).unwrap());
            best = best.min(start.elapsed().as_secs_f64());
            peak = peak.max(bytes);
            assert!(res.passes <= 6);
        }
        ns.push(ds.n() as f64);
        secs.push(best);
        ratios.push(peak as f64 / units);
    }
    let slope = loglog_slope(&ns, &secs).unwrap();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = slope <= 1.15 && max_ratio <= MEMORY_FACTOR && max_ratio / min_ratio <= 2.0;
    let timing: Vec<String> = ns.iter().zip(&secs).map(|(n, s)| format!("{n}:{s:.4}s")).collect();
    let mem: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    verdict(
        pass,
        format!(
            "time slope {slope:.3} (limit 1.15) [{}]; peak fit bytes / ((R+C)(p+1)*8) = [{}] (limit {MEMORY_FACTOR}, spread <= 2)",
            timing.join(" "),
            mem.join(" ")
        ),
    )
}

fn efficiency_bounds() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..200 {
        let fill = rng.random_range(0.1..0.9);
        let ds = random_design(&mut rng, 40, 1, fill, 500);
        let comps = random_vc(&mut rng);
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let x: DVector<f64> = DVector::from_fn(d.n(), |_, _| rng.sample(StandardNormal));
        let (eff_r, eff_c) = exact_efficiency(&x, &comps, &d).unwrap();
        let (lb_r, lb_c) = efficiency_lower_bounds(&comps, ds.profile());
        if eff_r < lb_r - 1e-12 || eff_c < lb_c - 1e-12 {
            violations += 1;
        }
    }
    // Adversarial search: mix the extreme eigenvectors of the whitened
    // covariance, over designs and components with a range of spectra.
    let mut searched = 0;
    for k in 0..60 {
        let fill = rng.random_range(0.2..0.9);
        let ds = random_design(&mut rng, 14, 1, fill, 150);
        let sa = if k % 2 == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
        let comps = vc(sa, rng.random_range(0.1..5.0), rng.random_range(0.2..2.0));
        let d = DenseDesign::from_dataset(&ds).unwrap();
        let x = adversarial_direction(&d, &comps);
        let (eff_r, _) = exact_efficiency(&x, &comps, &d).unwrap();
        let (lb_r, _) = efficiency_lower_bounds(&comps, ds.profile());
        if eff_r < lb_r - 1e-12 {
            violations += 1;
        }
        tightest = tightest.min(eff_r - lb_r);
        searched += 1;
    }
    verdict(
        violations == 0 && tightest < 0.05,
        format!("200 random + {searched} adversarial instances, {violations} violations, smallest gap {tightest:.2e} (limit 0.05)"),
    )
}

fn mode_rule(outcomes: &[ReplicateOutcome]) -> Verdict {
    let mut bad = 0;
    for o in outcomes {
        let expected = o.vc_step2.map(|s| {
            if s.sigma2_a * o.max_row as f64 >= s.sigma2_b * o.max_col as f64 {
                GlsMode::RowGls
            } else {
                GlsMode::ColumnGls
            }
        });
        if expected.is_none() || expected != o.mode {
            bad += 1;
        }
    }
    verdict(
        bad == 0,
        format!("{} fits checked, {bad} disagreements", outcomes.len()),
    )
}

fn sandwich_direction(outcomes: &[ReplicateOutcome]) -> Verdict {
    let wider = outcomes
        .iter()
        .filter(|o| o.ols_sandwich_se[0] >= o.ols_naive_se[0])
        .count();
    let share = wider as f64 / outcomes.len() as f64;
    let ratio = outcomes
        .iter()
        .map(|o| o.ols_sandwich_se[0] / o.ols_naive_se[0])
        .sum::<f64>()
        / outcomes.len() as f64;
    verdict(
        share >= 0.99,
        format!(
            "{wider}/{} replicates ({:.1}%), mean intercept se ratio {ratio:.2}",
            outcomes.len(),
            100.0 * share
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict, f64, Option<f64>)> = Vec::new();
    let mut record = |id: usize, name: &'static str, limit: Option<f64>, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let mut v = f();
        let secs = start.elapsed().as_secs_f64();
        if let Some(l) = limit {
            if secs > l {
                v.pass = false;
                v.detail.push_str(&format!("; runtime {secs:.1}s over {l}s"));
            }
        }
        println!(
            "[{}] {id:>2} {name}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v, secs, limit));
    };

    record(
        1,
        "U-statistics match the two-pass oracle",
        Some(10.0),
        &mut u_statistics_oracle,
    );

    let start = Instant::now();
    let gls = gls_oracle();
    let gls_secs = start.elapsed().as_secs_f64();
    record(2, "row/column GLS match dense GLS", None, &mut || {
        let mut v = verdict(
            gls.beta_err <= 1e-8,
            format!(
                "100 instances (N <= 600), max relative error {:.2e} (limit 1e-8), computed in {gls_secs:.1}s",
                gls.beta_err
            ),
        );
        if gls_secs > 30.0 {
            v.pass = false;
            v.detail.push_str(&format!("; runtime {gls_secs:.1}s over 30s"));
        }
        v
    });
    record(3, "row GLS covariance matches the dense sandwich", None, &mut || {
        verdict(
            gls.cov_err <= 1e-8,
            format!("same instances, max relative error {:.2e} (limit 1e-8)", gls.cov_err),
        )
    });
    record(4, "three-record worked case", None, &mut worked_case);

    let mut outcomes: Vec<ReplicateOutcome> = Vec::new();
    record(5, "unbiased moment estimates", Some(300.0), &mut || {
        unbiasedness(&mut outcomes)
    });

    let mut square_outcomes: Vec<ReplicateOutcome> = Vec::new();
    let mut scaling_cells = Vec::new();
    record(6, "MSE scaling with N", Some(1200.0), &mut || {
        scaling_cells = study(&[400, 1600, 6400, 25600], 100, 600);
        mse_scaling(&scaling_cells)
    });
    let mut coverage_cells = Vec::new();
    record(7, "95% interval coverage", None, &mut || {
        coverage_cells = study(&[6400], 500, 700);
        coverage(&coverage_cells)
    });
    for c in scaling_cells.iter().chain(&coverage_cells) {
        square_outcomes.extend(c.outcomes.iter().cloned());
    }
    record(8, "linear time and O(R+C) memory", None, &mut linear_scaling);
    record(9, "efficiency lower bound", None, &mut efficiency_bounds);
    outcomes.extend(square_outcomes.iter().cloned());
    record(10, "mode selection rule", None, &mut || mode_rule(&outcomes));
    record(11, "OLS sandwich se exceeds naive se", None, &mut || {
        sandwich_direction(&square_outcomes)
    });

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({failed:?})")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
