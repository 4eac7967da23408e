//! Stateless activations and pooling with explicit backward passes.

use ndarray::{Array, Array2, Array4, Dimension};

/// ReLU with a boolean pass-through mask for the backward pass.
pub fn relu<D: Dimension>(x: &Array<f64, D>) -> (Array<f64, D>, Array<bool, D>) {
    let mask = x.mapv(|v| v > 0.0);
    let y = x.mapv(|v| v.max(0.0));
    (y, mask)
}

pub fn relu_backward<D: Dimension>(gy: &Array<f64, D>, mask: &Array<bool, D>) -> Array<f64, D> {
    let mut dx = gy.clone();
    dx.zip_mut_with(mask, |g, &m| {
        if !m {
            *g = 0.0;
        }
    });
    dx
}

/// Global average pool NCHW -> (n, c).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            y[[i, ch]] = x
                .index_axis(ndarray::Axis(0), i)
                .index_axis(ndarray::Axis(0), ch)
                .sum()
                / area;
        }
    }
    y
}

/// Spread (n, c) gradients uniformly back over the pooled area.
pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = gy.dim();
    let share = 1.0 / (h * w) as f64;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            dx.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), ch)
                .fill(gy[[i, ch]] * share);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array4};

    #[test]
    fn relu_roundtrip() {
        let x = ndarray::arr1(&[-1.0, 0.0, 2.0]);
        let (y, mask) = relu(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 2.0]);
        let g = ndarray::arr1(&[5.0, 5.0, 5.0]);
        let dx = relu_backward(&g, &mask);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn gap_mean_and_backward() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        x.index_axis_mut(ndarray::Axis(1), 0)
            .assign(&ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
        x.index_axis_mut(ndarray::Axis(1), 1).fill(7.0);
        let y = global_avg_pool(&x);
        assert_abs_diff_eq!(y[[0, 0]], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[0, 1]], 7.0, epsilon = 1e-12);

        let gy = arr2(&[[4.0, 8.0]]);
        let dx = global_avg_pool_backward(&gy, 2, 2);
        assert_abs_diff_eq!(dx[[0, 0, 1, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[[0, 1, 0, 0]], 2.0, epsilon = 1e-12);
        // Sum of spread gradient equals the pooled gradient.
        assert_abs_diff_eq!(dx.index_axis(ndarray::Axis(1), 0).sum(), 4.0, epsilon = 1e-12);
    }
}
