//! Elementwise activations as free function pairs; callers keep the forward
//! input (or output) around for the backward call.

use ndarray::{ArrayBase, Data, Dimension};

use super::Scalar;

pub fn leaky_relu<F: Scalar, S: Data<Elem = F>, D: Dimension>(
    x: &ArrayBase<S, D>,
    slope: F,
) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

/// dx given the forward *input*.
pub fn leaky_relu_backward<F: Scalar, S: Data<Elem = F>, D: Dimension>(
    x: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
    slope: F,
) -> ndarray::Array<F, D> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= F::zero() {
            *d *= slope;
        }
    });
    dx
}

pub fn relu<F: Scalar, S: Data<Elem = F>, D: Dimension>(x: &ArrayBase<S, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar, S: Data<Elem = F>, D: Dimension>(
    x: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid<F: Scalar, S: Data<Elem = F>, D: Dimension>(x: &ArrayBase<S, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// dx given the forward *output*.
pub fn sigmoid_backward<F: Scalar, S: Data<Elem = F>, D: Dimension>(
    y: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        *d *= v * (F::one() - v);
    });
    dx
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: Scalar, S: Data<Elem = F>, D: Dimension>(x: &ArrayBase<S, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.max(F::zero()) + (-v.abs()).exp().ln_1p())
}

/// dx given the forward *input* (derivative is the logistic function).
pub fn softplus_backward<F: Scalar, S: Data<Elem = F>, D: Dimension>(
    x: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        *d *= F::one() / (F::one() + (-v).exp());
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let y = softplus(&arr1(&[0.0f64]));
        assert!((y[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_positive_everywhere() {
        let y = softplus(&arr1(&[-50.0f64, -3.0, 0.0, 3.0, 50.0]));
        assert!(y.iter().all(|&v| v > 0.0));
        assert!((y[4] - 50.0).abs() < 1e-9);
    }
}
