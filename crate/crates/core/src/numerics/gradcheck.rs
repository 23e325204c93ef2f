use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step is `rel_step * max(1, |θ_i|)`.
    pub rel_step: f64,
    /// Upper bound on coordinates checked per tensor; `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is zero are judged by absolute error.
    pub abs_floor: f64,
    /// Fourth-order stencil instead of the two-point one. It tolerates a
    /// larger step, which matters when the loss value is large relative to
    /// the gradient coordinates being checked.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_step: 1e-5,
            max_coords_per_tensor: None,
            abs_floor: 1e-6,
            five_point: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub coords_checked: usize,
    /// `(tensor index, coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Argument("grad_check loss must be scalar".into()));
    }
    Ok(v.item())
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let stride = len as f64 / c as f64;
            (0..c).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` must be deterministic in its parameters: any randomness has to
/// come from fixed stream keys. A loss that changes between two evaluations at
/// the same point is rejected as a contract violation.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss_fn(&mut g, &vars)?;
    let base = g.value(out).item();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v, &g)).collect();
    drop(g);

    let again = eval(&loss_fn, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic under frozen draws: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in coords(params[ti].len(), cfg.max_coords_per_tensor) {
            let theta = params[ti].data()[i];
            let h = cfg.rel_step * theta.abs().max(1.0);
            let mut at = |delta: f64| -> Result<f64> {
                work[ti].data_mut()[i] = theta + delta;
                let f = eval(&loss_fn, &work);
                work[ti].data_mut()[i] = theta;
                f
            };
            let numeric = if cfg.five_point {
                let (f2p, f1p, f1m, f2m) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            let a = grad.data()[i];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some((ti, i));
            }
        }
    }
    Ok(report)
}
