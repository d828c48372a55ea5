//! Central finite-difference gradient checks.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

/// Denominator floor for the elementwise relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
    pub max_rel_error: f64,
}

/// Compares the autodiff gradient of the scalar `loss()` w.r.t. `var`
/// with `(f(x + h) - f(x - h)) / 2h`, element by element.
///
/// `var` must be double precision; its value is restored afterwards.
pub fn check_var(var: &Var, loss: impl Fn() -> Result<Tensor>, h: f64) -> Result<GradCheck> {
    if var.dtype() != DType::F64 {
        return Err(Error::config("gradient checks need f64 tensors"));
    }
    let eval = |l: Tensor| -> Result<f64> { Ok(l.to_scalar::<f64>()?) };
    let l = loss()?;
    if l.elem_count() != 1 {
        return Err(Error::shape("loss must be a scalar"));
    }
    let grads = l.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => to_f64_vec(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let original = var.as_tensor().copy()?;
    let base = to_f64_vec(&original)?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        var.set(&Tensor::from_vec(v.clone(), original.shape(), original.device())?)?;
        let plus = eval(loss()?.reshape(())?)?;
        v[i] = base[i] - h;
        var.set(&Tensor::from_vec(v, original.shape(), original.device())?)?;
        let minus = eval(loss()?.reshape(())?)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    var.set(&original)?;
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cubic_gradient_matches() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap()).unwrap();
        let r = check_var(&x, || Ok(x.as_tensor().powf(3.0)?.sum_all()?), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.analytic[2] - 12.0).abs() < 1e-12);
    }
}
