//! Synthetic crossed random-effects data with known truth, and Monte Carlo
//! studies of the fit.
//!
//! Every replicate draws from its own ChaCha8 stream of the configured
//! seed, so replicates can run in any order or in parallel and still give
//! the same numbers.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::GlsMode;
use crate::ingest::{DedupPolicy, IndexedDataset, MemoryRecords};
use crate::model::VarianceComponents;
use crate::pipeline::{fit, FitOptions, Stopwatch};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Exactly this many cells, chosen uniformly without replacement.
    Count(u64),
    /// Each cell independently with this probability.
    Prob(f64),
}

/// Zero-mean, unit-variance effect distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectDist {
    #[default]
    Gaussian,
    Uniform,
    Laplace,
    /// Student t with 5 degrees of freedom, rescaled to unit variance.
    T5,
}

impl EffectDist {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" | "normal" => Some(Self::Gaussian),
            "uniform" => Some(Self::Uniform),
            "laplace" => Some(Self::Laplace),
            "t5" => Some(Self::T5),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => StandardNormal.sample(rng),
            Self::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            Self::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -std::f64::consts::FRAC_1_SQRT_2 * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Self::T5 => {
                let t = StudentT::new(5.0).expect("valid degrees of freedom");
                t.sample(rng) * (3.0f64 / 5.0).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rows: usize,
    pub cols: usize,
    pub fill: Fill,
    /// Covariates besides the intercept.
    pub p: usize,
    /// Intercept first; length `p + 1`.
    pub beta: Vec<f64>,
    /// (sigma2_a, sigma2_b, sigma2_e)
    pub vc: [f64; 3],
    /// Distribution of the row effect, column effect and noise.
    pub dist: [EffectDist; 3],
    pub seed: u64,
    /// Reuse the observation pattern of replicate 0 in every replicate.
    pub fix_pattern: bool,
}

impl SimConfig {
    /// Square design with `R = C = 2 sqrt(N)`, a quarter of the cells
    /// observed, standard normal covariates, all coefficients 1 and
    /// components (2, 0.5, 1).
    pub fn square_design(n: usize, p: usize, seed: u64) -> Self {
        let side = (2.0 * (n as f64).sqrt()).round() as usize;
        Self {
            rows: side,
            cols: side,
            fill: Fill::Count((side * side / 4) as u64),
            p,
            beta: vec![1.0; p + 1],
            vc: [2.0, 0.5, 1.0],
            dist: [EffectDist::Gaussian; 3],
            seed,
            fix_pattern: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive".into());
        }
        if self.beta.len() != self.p + 1 {
            return bad(format!(
                "beta has {} entries, expected p + 1 = {}",
                self.beta.len(),
                self.p + 1
            ));
        }
        if self.vc.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("variance components must be finite and nonnegative".into());
        }
        match self.fill {
            Fill::Count(m) if m == 0 || m > (self.rows * self.cols) as u64 => {
                bad(format!("fill count {m} outside 1..={}", self.rows * self.cols))
            }
            Fill::Prob(q) if !(q > 0.0 && q <= 1.0) => bad(format!("fill probability {q} outside (0, 1]")),
            _ => Ok(()),
        }
    }
}

/// Realized random effects of one replicate, indexed by generator row and
/// column (before dropping unobserved ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
    pub vc: [f64; 3],
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pattern(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let cells = cfg.rows * cfg.cols;
    let mut picked: Vec<usize> = match cfg.fill {
        Fill::Count(m) => sample(rng, cells, m as usize).into_vec(),
        Fill::Prob(q) => (0..cells).filter(|_| rng.random::<f64>() < q).collect(),
    };
    picked.sort_unstable();
    picked.into_iter().map(|k| (k / cfg.cols, k % cfg.cols)).collect()
}

/// Replicate `rep` of `cfg`: an in-memory dataset and the realized effects.
pub fn simulate_replicate(cfg: &SimConfig, rep: u64) -> Result<(IndexedDataset, TruthRecord)> {
    cfg.validate()?;
    let mut prng = stream(cfg.seed, 2 * if cfg.fix_pattern { 0 } else { rep });
    let cells = pattern(cfg, &mut prng);
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream(cfg.seed, 2 * rep + 1);
    let sd = cfg.vc.map(f64::sqrt);
    let a: Vec<f64> = (0..cfg.rows).map(|_| sd[0] * cfg.dist[0].sample(&mut rng)).collect();
    let b: Vec<f64> = (0..cfg.cols).map(|_| sd[1] * cfg.dist[1].sample(&mut rng)).collect();

    let width = cfg.p + 1;
    let mut row_id: HashMap<usize, u32> = HashMap::new();
    let mut col_id: HashMap<usize, u32> = HashMap::new();
    let (mut row_keys, mut col_keys) = (Vec::new(), Vec::new());
    let mut mem = MemoryRecords::default();
    mem.x.reserve(cells.len() * width);
    let mut x = vec![1.0; width];
    for (i, j) in cells {
        let r = *row_id.entry(i).or_insert_with(|| {
            row_keys.push(format!("r{i}"));
            row_keys.len() as u32 - 1
        });
        let c = *col_id.entry(j).or_insert_with(|| {
            col_keys.push(format!("c{j}"));
            col_keys.len() as u32 - 1
        });
        for v in x.iter_mut().skip(1) {
            *v = StandardNormal.sample(&mut rng);
        }
        let e = sd[2] * cfg.dist[2].sample(&mut rng);
        let mean: f64 = x.iter().zip(&cfg.beta).map(|(u, v)| u * v).sum();
        mem.rows.push(r);
        mem.cols.push(c);
        mem.x.extend_from_slice(&x);
        mem.y.push(mean + a[i] + b[j] + e);
    }
    let ds = IndexedDataset::from_memory(mem, width, row_keys, col_keys, DedupPolicy::AssumeUnique)?;
    Ok((
        ds,
        TruthRecord {
            a,
            b,
            beta: cfg.beta.clone(),
            vc: cfg.vc,
        },
    ))
}

/// Replicate 0 of `cfg`.
pub fn simulate_crossed(cfg: &SimConfig) -> Result<(IndexedDataset, TruthRecord)> {
    simulate_replicate(cfg, 0)
}

/// What one replicate fit produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub n: u64,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Raw step-4 components.
    pub vc_raw: [f64; 3],
    pub vc_step2: Option<VarianceComponents>,
    pub mode: Option<GlsMode>,
    pub max_row: u64,
    pub max_col: u64,
    pub ols_naive_se: Vec<f64>,
    pub ols_sandwich_se: Vec<f64>,
    pub secs: f64,
}

/// Summary of one parameter in one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub param: String,
    pub truth: f64,
    pub mean_est: f64,
    pub mse: f64,
    /// Empirical coverage of the 95% interval; absent for variance components.
    pub coverage: Option<f64>,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub config: SimConfig,
    pub outcomes: Vec<ReplicateOutcome>,
    pub failures: Vec<String>,
    pub rows: Vec<StudyRow>,
}

fn run_replicate(cfg: &SimConfig, rep: u64, opts: &FitOptions) -> Result<ReplicateOutcome> {
    let (ds, _) = simulate_replicate(cfg, rep)?;
    let clock = Stopwatch::start();
    let fit = fit(&ds, opts)?;
    let secs = clock.seconds();
    Ok(ReplicateOutcome {
        n: ds.n(),
        beta: fit.beta,
        se: fit.se_beta,
        vc_raw: fit.vc.raw(),
        vc_step2: fit.steps.vc_step2,
        mode: fit.mode,
        max_row: ds.profile().max_row,
        max_col: ds.profile().max_col,
        ols_naive_se: fit.ols_naive_se,
        ols_sandwich_se: fit.ols_sandwich_se,
        secs,
    })
}

/// Fits `reps` replicates of `cfg`, spread over `threads` workers.
pub fn run_replicates(
    cfg: &SimConfig,
    reps: usize,
    opts: &FitOptions,
    threads: usize,
) -> Vec<(u64, Result<ReplicateOutcome>)> {
    let threads = threads.clamp(1, reps.max(1));
    if threads == 1 {
        return (0..reps as u64).map(|r| (r, run_replicate(cfg, r, opts))).collect();
    }
    let mut out: Vec<(u64, Result<ReplicateOutcome>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..reps)
                        .step_by(threads)
                        .map(|r| (r as u64, run_replicate(cfg, r as u64, opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("replicate worker panicked"))
            .collect()
    });
    out.sort_by_key(|(r, _)| *r);
    out
}

fn summarize(cfg: &SimConfig, outcomes: &[ReplicateOutcome]) -> Vec<StudyRow> {
    if outcomes.is_empty() {
        return Vec::new();
    }
    let k = outcomes.len() as f64;
    let n = outcomes.iter().map(|o| o.n as f64).sum::<f64>() / k;
    let secs = outcomes.iter().map(|o| o.secs).sum::<f64>() / k;
    let row = |param: String,
               truth: f64,
               est: &dyn Fn(&ReplicateOutcome) -> f64,
               cover: Option<&dyn Fn(&ReplicateOutcome) -> bool>| {
        StudyRow {
            n,
            r: cfg.rows,
            c: cfg.cols,
            param,
            truth,
            mean_est: outcomes.iter().map(est).sum::<f64>() / k,
            mse: outcomes.iter().map(|o| (est(o) - truth).powi(2)).sum::<f64>() / k,
            coverage: cover.map(|f| outcomes.iter().filter(|o| f(o)).count() as f64 / k),
            secs,
        }
    };
    let mut rows = Vec::new();
    for (t, &truth) in cfg.beta.iter().enumerate() {
        let est = move |o: &ReplicateOutcome| o.beta[t];
        let cover = move |o: &ReplicateOutcome| (o.beta[t] - truth).abs() <= Z_95 * o.se[t];
        rows.push(row(format!("beta{t}"), truth, &est, Some(&cover)));
    }
    for (t, name) in ["sigma2_a", "sigma2_b", "sigma2_e"].iter().enumerate() {
        let est = move |o: &ReplicateOutcome| o.vc_raw[t];
        rows.push(row((*name).to_owned(), cfg.vc[t], &est, None));
    }
    rows
}

/// Monte Carlo study over a grid of configurations. Failed replicates are
/// recorded and left out of the summaries.
pub fn mc_study(grid: &[SimConfig], reps: usize, opts: &FitOptions, threads: usize) -> Result<Vec<StudyCell>> {
    if reps < 2 {
        return Err(Error::InvalidConfig("a study needs at least two replicates".into()));
    }
    grid.iter()
        .map(|cfg| {
            cfg.validate()?;
            let mut outcomes = Vec::with_capacity(reps);
            let mut failures = Vec::new();
            for (rep, res) in run_replicates(cfg, reps, opts, threads) {
                match res {
                    Ok(o) => outcomes.push(o),
                    Err(e) => failures.push(format!("replicate {rep}: {e}")),
                }
            }
            Ok(StudyCell {
                rows: summarize(cfg, &outcomes),
                config: cfg.clone(),
                outcomes,
                failures,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` on `ln x`. `None` with fewer than two
/// usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// MSE slope against N for each parameter present in every cell.
pub fn mse_slopes(cells: &[StudyCell]) -> Vec<(String, f64)> {
    let Some(first) = cells.first() else {
        return Vec::new();
    };
    first
        .rows
        .iter()
        .filter_map(|r| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter_map(|c| c.rows.iter().find(|q| q.param == r.param).map(|q| (q.n, q.mse)))
                .unzip();
            if xs.len() != cells.len() {
                return None;
            }
            loglog_slope(&xs, &ys).map(|s| (r.param.clone(), s))
        })
        .collect()
}

pub fn write_study_csv<W: Write>(cells: &[StudyCell], mut out: W) -> std::io::Result<()> {
    writeln!(out, "N,R,C,param,truth,mean_est,mse,coverage,secs")?;
    for row in cells.iter().flat_map(|c| &c.rows) {
        let cov = row.coverage.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.n, row.r, row.c, row.param, row.truth, row.mean_est, row.mse, cov, row.secs
        )?;
    }
    Ok(())
}

/// Fit time for one simulated size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// Fastest of the repeated fits.
    pub secs: f64,
    pub beta: Vec<f64>,
}

/// Simulates the square design of size `n` (untimed) and times `repeats`
/// fits of it, keeping the fastest.
pub fn bench_one(n: usize, p: usize, seed: u64, repeats: usize, opts: &FitOptions) -> Result<BenchRow> {
    let cfg = SimConfig::square_design(n, p, seed);
    let (ds, _) = simulate_crossed(&cfg)?;
    let mut best = f64::INFINITY;
    let mut beta = Vec::new();
    for _ in 0..repeats.max(1) {
        let clock = Stopwatch::start();
        let res = fit(&ds, opts)?;
        best = best.min(clock.seconds());
        beta = res.beta;
    }
    Ok(BenchRow {
        n: ds.n(),
        r: cfg.rows,
        c: cfg.cols,
        secs: best,
        beta,
    })
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "N,secs")?;
    for r in rows {
        writeln!(out, "{},{}", r.n, r.secs)?;
    }
    Ok(())
}
