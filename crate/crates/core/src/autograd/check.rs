use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    /// Coordinate where `max_rel_err` occurs.
    pub worst_index: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a unit floor on the denominator: components with
/// magnitude below one are compared absolutely, since the `O(h²)` truncation
/// error of central differences does not shrink with the gradient itself.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks `d f / d x` for a scalar-valued `f` built only from smooth ops.
///
/// Each coordinate is perturbed by `±h`; the divisor is the step actually
/// representable in `T`. Functions containing a custom-gradient node are
/// rejected because finite differences do not estimate a surrogate.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let leaf = x.with_requires_grad(true);
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    if y.has_custom_node() {
        return Err(Error::contract(
            "grad_check: function contains a custom-gradient node; finite differences do not apply",
        ));
    }
    y.backward()?;
    let analytic: Vec<f64> = match leaf.grad() {
        Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; x.numel()],
    };

    let step = T::lit(h);
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] = plus[i] + step;
        minus[i] = minus[i] - step;
        let span = (plus[i] - minus[i]).to_f64_lossy();
        let fp = f(&Tensor::new(x.shape(), plus)?)?.item()?.to_f64_lossy();
        let fm = f(&Tensor::new(x.shape(), minus)?)?.item()?.to_f64_lossy();
        numeric.push((fp - fm) / span);
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        worst_index,
        tol,
    })
}
