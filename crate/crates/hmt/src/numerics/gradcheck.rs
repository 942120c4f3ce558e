//! Central finite-difference gradient oracle.
//!
//! The closure re-evaluates the loss after each in-place perturbation of the
//! parameter buffer, so it must be pure and deterministic in that buffer.

use crate::error::{HmtError, Result};
use crate::numerics::tensor::Tensor;

/// Full central-difference gradient: (f(θ+h·e_i) − f(θ−h·e_i)) / 2h per
/// coordinate. Returns a tensor with the parameter's shape.
pub fn finite_diff_grad<F>(f: F, param: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut() -> Result<f64>,
{
    let idx: Vec<usize> = (0..param.numel()).collect();
    let vals = finite_diff_grad_at(f, param, &idx, h)?;
    Tensor::from_vec(param.shape(), vals)
}

/// Central differences restricted to a subset of coordinates; the workhorse
/// for spot checks on large parameter tensors.
pub fn finite_diff_grad_at<F>(
    mut f: F,
    param: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<f64>,
{
    if h <= 0.0 {
        return Err(HmtError::Contract(format!(
            "finite differences require h > 0, got {h}"
        )));
    }
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let fp = f()?;
        param.data_mut()[i] = orig - h;
        let fm = f()?;
        param.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(HmtError::NumericDomain {
                op: "finite_diff_grad",
                message: format!("non-finite loss at coordinate {i}: f+={fp}, f-={fm}"),
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Agreement metric used throughout: the error budget is the larger of the
/// relative allowance `rel_tol·max(|a|,|r|)` and the absolute floor
/// `abs_tol` (which is what "absolute tolerance for tiny magnitudes" means
/// once made monotone in |r|). `small` marks where the floor is intended to
/// take over; it is implied by `abs_tol`/`rel_tol` and kept for readability.
pub fn grads_agree(autodiff: f64, reference: f64, rel_tol: f64, abs_tol: f64, _small: f64) -> bool {
    let denom = autodiff.abs().max(reference.abs());
    (autodiff - reference).abs() < (rel_tol * denom).max(abs_tol)
}

/// Largest disagreement over paired coordinates, as (worst_rel, worst_abs).
/// Coordinates under the `small` magnitude report into the absolute slot.
pub fn worst_disagreement(autodiff: &[f64], reference: &[f64], small: f64) -> (f64, f64) {
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for (&a, &r) in autodiff.iter().zip(reference) {
        if r.abs() < small {
            worst_abs = worst_abs.max((a - r).abs());
        } else {
            let denom = a.abs().max(r.abs());
            worst_rel = worst_rel.max((a - r).abs() / denom);
        }
    }
    (worst_rel, worst_abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_gives_six() {
        let x = Tensor::leaf(&[1], vec![3.0], true).unwrap();
        let g = finite_diff_grad(
            || {
                let y = x.mul(&x)?;
                y.item()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.to_vec()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_gives_zero_vector() {
        let x = Tensor::leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let g = finite_diff_grad(|| Ok(7.25), &x, 1e-5).unwrap();
        assert!(g.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonpositive_h_is_rejected() {
        let x = Tensor::leaf(&[1], vec![0.0], true).unwrap();
        assert!(finite_diff_grad(|| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_a_domain_error() {
        let x = Tensor::leaf(&[1], vec![0.0], true).unwrap();
        let err = finite_diff_grad(|| Ok(f64::NAN), &x, 1e-5).unwrap_err();
        assert!(matches!(
            err,
            crate::error::HmtError::NumericDomain { .. }
        ));
    }
}
