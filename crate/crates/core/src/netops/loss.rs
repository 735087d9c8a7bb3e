use ndarray::Array2;

use super::graph::{bce_value, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared error over all elements.
pub fn mse<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    let rows = g.row_mse(a, b)?;
    g.mean(rows)
}

/// Mean binary cross-entropy over all elements, predictions clamped at 1e-7.
pub fn bce<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    g.bce(pred, target)
}

/// Plain-array mean squared error.
pub fn mse_value<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Result<F> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let d = a - b;
    Ok((&d * &d).mean().unwrap_or_else(F::zero))
}

/// Plain-array mean binary cross-entropy.
pub fn bce_array<F: Scalar>(pred: &Array2<F>, target: &Array2<F>) -> Result<F> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("bce", format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    Ok(bce_value(pred, target, F::of(1e-7)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn mse_of_identical_is_zero() {
        let x = arr2(&[[1.0f64, -2.0], [0.5, 3.0]]);
        assert_eq!(mse_value(&x, &x).unwrap(), 0.0);
        let mut g = Graph::new();
        let a = g.constant(x.clone()).unwrap();
        let b = g.constant(x).unwrap();
        let l = mse(&mut g, a, b).unwrap();
        assert_eq!(g.value(l)[[0, 0]], 0.0);
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let pred = Array2::from_elem((3, 4), 0.5f64);
        let target = arr2(&[[0.0, 1.0, 0.3, 0.9], [1.0, 1.0, 0.0, 0.0], [0.2, 0.4, 0.6, 0.8]]);
        let v = bce_array(&pred, &target).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array2::<f32>::zeros((2, 3));
        let b = Array2::<f32>::zeros((3, 2));
        assert!(mse_value(&a, &b).is_err());
        assert!(bce_array(&a, &b).is_err());
    }
}
