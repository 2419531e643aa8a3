//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string. The `*_json` functions hold the
//! logic and work natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use crossed_lmm::gls::{efficiency_lower_bound, efficiency_lower_bounds};
use crossed_lmm::ingest::ScanSource;
use crossed_lmm::{
    fit, index_dataset, simulate_crossed, upsilon_diagnostic, DedupPolicy, EffectDist, Fill, FitOptions, ModeChoice,
    Schema, SimConfig,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest simulated table the page will generate.
pub const MAX_CELLS: usize = 4_000_000;

#[derive(Serialize)]
struct Truth {
    beta: Vec<f64>,
    vc: [f64; 3],
}

#[derive(Serialize)]
struct SimulatedFit {
    n: u64,
    rows: usize,
    cols: usize,
    truth: Truth,
    fit: crossed_lmm::FitResult,
    upsilon: f64,
    eff_rls_lb: f64,
    eff_cls_lb: f64,
}

#[derive(Serialize)]
struct BoundCurve {
    /// `sigma2_ignored * max_count / sigma2_e` at each point.
    ratio: Vec<f64>,
    bound: Vec<f64>,
    at: f64,
    value: f64,
}

fn parse_mode(mode: &str) -> Result<ModeChoice, String> {
    match mode {
        "auto" => Ok(ModeChoice::Auto),
        "row" => Ok(ModeChoice::Row),
        "col" => Ok(ModeChoice::Col),
        "both-compare" => Ok(ModeChoice::BothCompare),
        other => Err(format!("unknown mode {other:?}")),
    }
}

/// Simulates a crossed design (Gaussian covariates, coefficients
/// `0.5, 1, -1, 1, ...`) and fits it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_and_fit_json(
    rows: usize,
    cols: usize,
    fill_prob: f64,
    p: usize,
    vc: [f64; 3],
    dist: &str,
    seed: u64,
    mode: &str,
) -> Result<String, String> {
    if rows.saturating_mul(cols) > MAX_CELLS {
        return Err(format!("at most {MAX_CELLS} cells in the browser"));
    }
    let dist = EffectDist::parse(dist).ok_or_else(|| format!("unknown distribution {dist:?}"))?;
    let beta: Vec<f64> = (0..=p)
        .map(|k| match k {
            0 => 0.5,
            k if k % 2 == 1 => 1.0,
            _ => -1.0,
        })
        .collect();
    let cfg = SimConfig {
        rows,
        cols,
        fill: Fill::Prob(fill_prob),
        p,
        beta: beta.clone(),
        vc,
        dist: [dist; 3],
        seed,
        fix_pattern: false,
    };
    let (ds, _) = simulate_crossed(&cfg).map_err(|e| e.to_string())?;
    let opts = FitOptions {
        mode: parse_mode(mode)?,
        emit_diagnostics: true,
        ..FitOptions::default()
    };
    let result = fit(&ds, &opts).map_err(|e| e.to_string())?;
    let (eff_rls_lb, eff_cls_lb) = efficiency_lower_bounds(&result.vc, ds.profile());
    let out = SimulatedFit {
        n: ds.n(),
        rows: ds.profile().rows(),
        cols: ds.profile().cols(),
        truth: Truth { beta, vc },
        upsilon: upsilon_diagnostic(&result.vc, ds.profile()),
        fit: result,
        eff_rls_lb,
        eff_cls_lb,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Lower bound on the efficiency of one-factor GLS as the ignored factor's
/// variance times its largest group grows, with the point for the given
/// inputs marked.
pub fn efficiency_bounds_json(
    sigma2_e: f64,
    sigma2_ignored: f64,
    max_count: u64,
    points: usize,
) -> Result<String, String> {
    if !(sigma2_e > 0.0) || !(sigma2_ignored >= 0.0) {
        return Err("need sigma2_e > 0 and sigma2_ignored >= 0".into());
    }
    let points = points.clamp(2, 2000);
    let at = sigma2_ignored * max_count as f64 / sigma2_e;
    let top = (2.0 * at).max(20.0);
    let ratio: Vec<f64> = (0..points).map(|k| top * k as f64 / (points - 1) as f64).collect();
    let bound = ratio.iter().map(|&t| efficiency_lower_bound(1.0, t, 1)).collect();
    let curve = BoundCurve {
        ratio,
        bound,
        at,
        value: efficiency_lower_bound(sigma2_e, sigma2_ignored, max_count),
    };
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

/// Fits pasted CSV text (`row_id,col_id,y,x1..xp` with a header line).
pub fn fit_csv_json(text: &str, mode: &str, dedup: &str) -> Result<String, String> {
    let dedup = match dedup {
        "assume-unique" => DedupPolicy::AssumeUnique,
        "keep-last" => DedupPolicy::KeepLast,
        "keep-first" => DedupPolicy::KeepFirst,
        "error" => DedupPolicy::Error,
        other => return Err(format!("unknown duplicate policy {other:?}")),
    };
    let source = ScanSource::from_bytes(text.as_bytes().to_vec(), &Schema::default()).map_err(|e| e.to_string())?;
    let ds = index_dataset(source, dedup).map_err(|e| e.to_string())?;
    let opts = FitOptions {
        mode: parse_mode(mode)?,
        dedup_policy: dedup,
        emit_diagnostics: true,
        ..FitOptions::default()
    };
    let result = fit(&ds, &opts).map_err(|e| e.to_string())?;
    serde_json::to_string(&result).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_and_fit(
    rows: usize,
    cols: usize,
    fill_prob: f64,
    p: usize,
    sigma2_a: f64,
    sigma2_b: f64,
    sigma2_e: f64,
    dist: &str,
    seed: u32,
    mode: &str,
) -> Result<String, JsError> {
    simulate_and_fit_json(
        rows,
        cols,
        fill_prob,
        p,
        [sigma2_a, sigma2_b, sigma2_e],
        dist,
        seed as u64,
        mode,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn efficiency_bounds(sigma2_e: f64, sigma2_ignored: f64, max_count: u32, points: usize) -> Result<String, JsError> {
    efficiency_bounds_json(sigma2_e, sigma2_ignored, max_count as u64, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fit_csv(text: &str, mode: &str, dedup: &str) -> Result<String, JsError> {
    fit_csv_json(text, mode, dedup).map_err(|e| JsError::new(&e))
}
