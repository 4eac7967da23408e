//! Batch normalization over the channel axis of NCHW tensors.

use ndarray::{Array1, Array4, Axis};

use super::{Param, ParamKind};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel affine batch norm. Training mode normalizes with batch
/// statistics (biased variance) and updates running estimates; eval mode
/// uses the running estimates and is side-effect free.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                ParamKind::BiasOrGain,
                Array1::<f64>::ones(channels).into_dyn(),
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ParamKind::BiasOrGain,
                Array1::<f64>::zeros(channels).into_dyn(),
            ),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Layer name, recovered from the gamma parameter's name; used to key
    /// running statistics in checkpoints.
    pub fn name(&self) -> &str {
        self.gamma.name.strip_suffix(".gamma").unwrap_or(&self.gamma.name)
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels());
        let count = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let m = lane.sum() / count;
            mean[ch] = m;
            var[ch] = lane.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / count;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());

        // One fused pass writes the normalized cache and the affine
        // output together; this layer is bandwidth-bound at stem
        // resolution.
        let mut x_hat = Array4::<f64>::zeros((n, c, h, w));
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        for ch in 0..c {
            let m = mean[ch];
            let s = inv_std[ch];
            let (g, b) = (gamma[ch], beta[ch]);
            ndarray::Zip::from(x_hat.index_axis_mut(Axis(1), ch))
                .and(y.index_axis_mut(Axis(1), ch))
                .and(x.index_axis(Axis(1), ch))
                .for_each(|xh, yo, &xv| {
                    let v = (xv - m) * s;
                    *xh = v;
                    *yo = g * v + b;
                });
        }

        // Unbiased variance for the running estimate, matching the usual
        // train/eval convention.
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] = (1.0 - MOMENTUM) * self.running_mean[ch] + MOMENTUM * mean[ch];
            self.running_var[ch] =
                (1.0 - MOMENTUM) * self.running_var[ch] + MOMENTUM * var[ch] * unbias;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let c = self.channels();
        assert_eq!(x.len_of(Axis(1)), c);
        let mut y = Array4::<f64>::zeros(x.dim());
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        for ch in 0..c {
            let m = self.running_mean[ch];
            let s = 1.0 / (self.running_var[ch] + EPS).sqrt();
            let (g, b) = (gamma[ch], beta[ch]);
            ndarray::Zip::from(y.index_axis_mut(Axis(1), ch))
                .and(x.index_axis(Axis(1), ch))
                .for_each(|yo, &xv| *yo = (xv - m) * s * g + b);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let BnCache { x_hat, inv_std } = self
            .cache
            .take()
            .expect("batchnorm backward called without forward_train");
        let (n, c, h, w) = x_hat.dim();
        let count = (n * h * w) as f64;
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let ggrad = self.gamma.grad.as_slice_mut().unwrap();
        let bgrad = self.beta.grad.as_slice_mut().unwrap();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let xh = x_hat.index_axis(Axis(1), ch);
            let g = gy.index_axis(Axis(1), ch);
            let (sum_g, sum_gx) = ndarray::Zip::from(&g)
                .and(&xh)
                .fold((0.0, 0.0), |(a, b), &gv, &xv| (a + gv, b + gv * xv));
            ggrad[ch] += sum_gx;
            bgrad[ch] += sum_g;
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            let scale = gamma[ch] * inv_std[ch];
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&g)
                .and(&xh)
                .for_each(|dv, &gv, &xv| {
                    *dv = scale * (gv - mean_g - xv * mean_gx);
                });
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
