//! Fully connected layer on `(batch, features)` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{Param, ParamKind};
use crate::error::{shape_error, Result};
use crate::seeds;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out,)
    cache_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((out_features, in_features), || seeds::normal(rng) * std);
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                ParamKind::Weight,
                weight.into_dyn(),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                ParamKind::BiasOrGain,
                Array1::<f64>::zeros(out_features).into_dyn(),
            ),
            cache_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn weight2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (self.out_features(), self.in_features()),
            self.weight.value.as_slice().unwrap(),
        )
        .unwrap()
    }

    fn run(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_features() {
            return Err(shape_error(
                (x.nrows(), self.in_features()),
                x.dim(),
            ));
        }
        let mut y = Array2::<f64>::zeros((x.nrows(), self.out_features()));
        general_mat_mul(1.0, x, &self.weight2().t(), 0.0, &mut y);
        let b = self.bias.value.as_slice().unwrap();
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[j];
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let y = self.run(x)?;
        self.cache_input = Some(x.clone());
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.run(x)
    }

    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache_input
            .take()
            .expect("linear backward called without forward_train");
        let (out_f, in_f) = (self.out_features(), self.in_features());
        {
            let mut wgrad = ndarray::ArrayViewMut2::from_shape(
                (out_f, in_f),
                self.weight.grad.as_slice_mut().unwrap(),
            )
            .unwrap();
            general_mat_mul(1.0, &gy.t(), &x.view(), 1.0, &mut wgrad);
        }
        let bgrad = self.bias.grad.as_slice_mut().unwrap();
        for row in gy.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                bgrad[j] += v;
            }
        }
        let mut dx = Array2::<f64>::zeros(x.raw_dim());
        general_mat_mul(1.0, gy, &self.weight2(), 0.0, &mut dx);
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
