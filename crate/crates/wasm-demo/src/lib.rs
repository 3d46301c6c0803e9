//! Browser bindings. Each export returns a JSON string for `www/main.js`.

use rkhs_conformal::approx::{thickness_bound, ApproxConformal, ApproxKind, ApproxMethod};
use rkhs_conformal::conformal::{full_pvalue_curve, YGrid};
use rkhs_conformal::data::{derive_seed, friedman1};
use rkhs_conformal::kernels::KernelSpec;
use rkhs_conformal::losses::LossSpec;
use rkhs_conformal::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn loss_from(family: &str, a: f64, t: f64) -> Result<LossSpec> {
    let loss = match family {
        "logcosh" => LossSpec::Logcosh { a },
        "pseudo_huber" => LossSpec::PseudoHuber { a },
        "smoothed_pinball" => LossSpec::SmoothedPinball { a, t },
        other => return Err(Error::Input(format!("unknown loss `{other}`"))),
    };
    loss.validate()?;
    Ok(loss)
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Exact full-conformal p-values next to the upper and lower curves of every method.
pub fn pvalue_curves_json(n: usize, seed: u64, lambda: f64, loss: LossSpec, alpha: f64, m: usize) -> Result<Value> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input("alpha must lie in (0, 1)".into()));
    }
    let (task, y_true) = friedman1(n + 1, 0.0, seed)?.into_task(KernelSpec::default(), loss, lambda)?;
    let grid = YGrid::covering(&task.y, 0.5, m)?;
    let full = full_pvalue_curve(&task, grid)?;
    let base = ApproxConformal::new(&task, ApproxMethod::new(ApproxKind::UniformStability))?;
    let mut methods = Vec::new();
    for kind in ApproxKind::ALL {
        let c = base.with_kind(kind)?.curve(grid);
        let (upper, lower) = (c.upper_region(alpha), c.lower_region(alpha));
        methods.push(json!({
            "name": kind.display_name(),
            "upper": c.upper,
            "lower": c.lower,
            "upper_measure": upper.measure(),
            "lower_measure": lower.measure(),
        }));
    }
    Ok(json!({
        "y": grid.points().collect::<Vec<f64>>(),
        "full": full.upper,
        "full_measure": full.upper_region(alpha).measure(),
        "methods": methods,
        "y_true": y_true,
        "alpha": alpha,
    }))
}

/// Loss value and first two derivatives in `u` at `y = 0`, with the smoothness constants.
pub fn loss_profile_json(loss: LossSpec, half_width: f64, points: usize) -> Result<Value> {
    if points < 2 || half_width.is_nan() || half_width <= 0.0 {
        return Err(Error::Input("need at least 2 points and a positive width".into()));
    }
    let c = loss.smoothness_constants()?;
    let u: Vec<f64> = (0..points)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
        .collect();
    Ok(json!({
        "u": u,
        "value": u.iter().map(|&x| loss.value(0.0, x)).collect::<Vec<f64>>(),
        "d1": u.iter().map(|&x| loss.d1(0.0, x)).collect::<Vec<f64>>(),
        "d2": u.iter().map(|&x| loss.d2(0.0, x)).collect::<Vec<f64>>(),
        "rho": c.rho,
        "beta2": c.beta2,
        "xi": c.xi,
    }))
}

/// Refined thickness gap and bound per method over a small log-spaced schedule.
pub fn thickness_sweep_json(loss: LossSpec, seed: u64, alpha: f64, r: f64) -> Result<Value> {
    let ns = [16usize, 24, 36, 54, 80];
    let c0 = 0.5 * 129f64.powf(r);
    let mut rows = Vec::new();
    for &n in &ns {
        let lambda = c0 * ((n + 1) as f64).powf(-r);
        let (task, _) = friedman1(n + 1, 0.0, derive_seed(seed, n as u64))?.into_task(KernelSpec::default(), loss, lambda)?;
        let grid = YGrid::covering(&task.y, 0.5, 256)?;
        let base = ApproxConformal::new(&task, ApproxMethod::new(ApproxKind::UniformStability))?;
        for kind in ApproxKind::ALL {
            let a = base.with_kind(kind)?;
            let (mu, ml) = a.refined_measures(grid, alpha);
            let sup = if kind == ApproxKind::InfluenceFunction { a.tau_sup(grid) } else { 0.0 };
            let bound = thickness_bound(kind, a.gram(), a.constants(), lambda, sup)?;
            rows.push(json!({
                "n": n,
                "method": kind.display_name(),
                "delta": (mu - ml).max(0.0),
                "bound": bound.value,
            }));
        }
    }
    Ok(json!({ "rows": rows }))
}

#[wasm_bindgen]
pub fn pvalue_curves(
    n: usize,
    seed: u64,
    lambda: f64,
    family: &str,
    a: f64,
    t: f64,
    alpha: f64,
) -> std::result::Result<String, JsValue> {
    to_js(loss_from(family, a, t).and_then(|l| pvalue_curves_json(n, seed, lambda, l, alpha, 200)))
}

#[wasm_bindgen]
pub fn loss_profile(family: &str, a: f64, t: f64) -> std::result::Result<String, JsValue> {
    to_js(loss_from(family, a, t).and_then(|l| loss_profile_json(l, 6.0 * a.max(0.5), 241)))
}

#[wasm_bindgen]
pub fn thickness_sweep(family: &str, a: f64, t: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(loss_from(family, a, t).and_then(|l| thickness_sweep_json(l, seed, 0.1, 0.33)))
}
