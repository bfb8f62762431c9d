use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default central-difference step at f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over every checked coordinate.
    pub max_rel_err: f64,
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of a scalar function against central
/// differences at every coordinate of `x`, returning the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_err)
}

/// Multi-input gradient check.
///
/// With `max_coords = Some(k)`, at most `k` coordinates per input are checked,
/// drawn deterministically; otherwise every coordinate is.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::numeric(
                "grad_check",
                format!("non-finite value {v}"),
            ));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::numeric("grad_check", "non-finite analytic gradient"));
    }

    let mut rng = Rng::new(0x6772_6164);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => rng.sample_indices(n, k),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = input.data()[c];
            work[idx].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].data()[c];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        coords_checked += coords.len();
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_input,
        coords_checked,
    })
}
