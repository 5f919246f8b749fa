//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::element::Element;
use super::error::AutodiffError;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Largest parameter the checker will perturb entry by entry.
pub const MAX_CHECK_ENTRIES: usize = 10_000;

/// Lower bound of a parameter's gradient scale, as a fraction of the largest
/// gradient in the whole check. Parameters whose true gradient vanishes
/// (a bias feeding a training-mode batch normalization) are then judged
/// against the computation's scale rather than pure rounding noise.
pub const GLOBAL_SCALE_FRACTION: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub dtype: &'static str,
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

/// Finite-difference step: a power of two so dyadic inputs perturb exactly.
pub fn default_step<T: Element>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        (2.0f64).powi(-10)
    } else {
        (2.0f64).powi(-20)
    }
}

/// Relative error of one gradient entry, with the denominator floored at
/// `scale_floor`.
pub fn relative_error(analytic: f64, numeric: f64, scale_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(scale_floor)
}

/// Checks the gradient of the scalar produced by `build` against central
/// differences for every named parameter.
pub fn gradient_check<T, F>(
    params: &[(&str, Tensor<T>)],
    build: F,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Element,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var, AutodiffError>,
{
    gradient_check_with_step(params, build, tolerance, default_step::<T>())
}

pub fn gradient_check_with_step<T, F>(
    params: &[(&str, Tensor<T>)],
    build: F,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Element,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var, AutodiffError>,
{
    for (name, p) in params {
        if p.numel() > MAX_CHECK_ENTRIES {
            return Err(AutodiffError::Contract(format!(
                "parameter {name} has {} entries; gradient checks are limited to {MAX_CHECK_ENTRIES}",
                p.numel()
            )));
        }
    }

    let evaluate = |values: &[Tensor<T>]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf_ref(t, false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item().to_f64().unwrap_or(f64::NAN))
    };

    let analytic: Vec<Tensor<T>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf_ref(t, true)).collect();
        let out = build(&mut tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .map(|v| grads.take(*v).expect("leaf gradient"))
            .collect()
    };

    let mut values: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
    let h = T::from_f64_lossy(step);
    let mut numeric_all = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut numeric = Vec::with_capacity(values[pi].numel());
        for i in 0..values[pi].numel() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + h;
            let plus = evaluate(&values)?;
            values[pi].data_mut()[i] = orig - h;
            let minus = evaluate(&values)?;
            values[pi].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        numeric_all.push(numeric);
    }

    let magnitude = |a: &Tensor<T>, n: &[f64]| {
        a.data()
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN).abs())
            .chain(n.iter().map(|v| v.abs()))
            .fold(f64::MIN_POSITIVE, f64::max)
    };
    let global = analytic
        .iter()
        .zip(&numeric_all)
        .map(|(a, n)| magnitude(a, n))
        .fold(f64::MIN_POSITIVE, f64::max);
    let reports = params
        .iter()
        .zip(analytic.iter().zip(&numeric_all))
        .map(|((name, p), (a, n))| {
            let scale = magnitude(a, n).max(GLOBAL_SCALE_FRACTION * global);
            let worst = a
                .data()
                .iter()
                .zip(n)
                .map(|(x, y)| relative_error(x.to_f64().unwrap_or(f64::NAN), *y, scale))
                .fold(0.0f64, |w, e| if e.is_nan() { f64::INFINITY } else { w.max(e) });
            ParamCheck {
                name: name.to_string(),
                entries: p.numel(),
                max_rel_error: worst,
                passed: worst < tolerance,
            }
        })
        .collect();
    Ok(GradCheckReport {
        dtype: T::NAME,
        step,
        tolerance,
        params: reports,
    })
}
