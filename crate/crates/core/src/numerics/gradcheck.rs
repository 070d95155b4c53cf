use super::matrix::DenseMatrix;
use super::Real;
use crate::error::{Error, Result};

/// Floor on the analytic magnitude in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Maximum relative error between central finite differences and an analytic
/// gradient, over every entry of every parameter tensor.
///
/// The error for one entry is `|numeric - analytic| / max(|analytic|, 1e-8)`.
pub fn fd_gradcheck<T, F>(
    mut loss_fn: F,
    params: &[DenseMatrix<T>],
    analytic_grad: &[DenseMatrix<T>],
    eps: T,
) -> Result<T>
where
    T: Real,
    F: FnMut(&[DenseMatrix<T>]) -> T,
{
    if !(T::lit(1e-7)..=T::lit(1e-3)).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic_grad.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic_grad) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    let base = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }

    let mut work: Vec<DenseMatrix<T>> = params.to_vec();
    let two = T::lit(2.0);
    let floor = T::lit(REL_FLOOR);
    let mut worst = T::zero();
    for t in 0..work.len() {
        for i in 0..work[t].as_slice().len() {
            let orig = work[t].as_slice()[i];
            work[t].as_mut_slice()[i] = orig + eps;
            let plus = loss_fn(&work);
            work[t].as_mut_slice()[i] = orig - eps;
            let minus = loss_fn(&work);
            work[t].as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed entry {i} of tensor {t}"
                )));
            }
            let numeric = (plus - minus) / (two * eps);
            let analytic = analytic_grad[t].as_slice()[i];
            let rel = (numeric - analytic).abs() / analytic.abs().max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    fn scalar(x: f64) -> Vec<DenseMatrix<f64>> {
        vec![DenseMatrix::column(&[x])]
    }

    #[test]
    fn square() {
        let err = fd_gradcheck(
            |p: &[DenseMatrix<f64>]| p[0][(0, 0)].powi(2),
            &scalar(3.0),
            &scalar(6.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let err = fd_gradcheck(
            |p: &[DenseMatrix<f64>]| sigmoid(p[0][(0, 0)]),
            &scalar(0.0),
            &scalar(0.25),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = fd_gradcheck(
            |p: &[DenseMatrix<f64>]| p[0][(0, 0)].powi(2),
            &scalar(3.0),
            &scalar(5.0),
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = |p: &[DenseMatrix<f64>]| p[0][(0, 0)];
        assert!(fd_gradcheck(f, &scalar(1.0), &scalar(1.0), 1e-2).is_err());
        let g = |_: &[DenseMatrix<f64>]| f64::NAN;
        assert!(matches!(
            fd_gradcheck(g, &scalar(1.0), &scalar(1.0), 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
