//! 2-D convolution via im2col and GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::Rng;

use super::{Param, ParamKind, DET_CHUNK};
use crate::error::{shape_error, Result};
use crate::seeds;

/// Convolution with square kernel, symmetric zero padding `(k-1)/2` and a
/// configurable stride. Weight layout is `(c_out, c_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    /// He-normal initialized convolution. `with_bias` is used by the
    /// evidence head; backbone convolutions are followed by batch norm and
    /// carry no bias.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn(
            (out_channels, in_channels, kernel, kernel),
            || seeds::normal(rng) * std,
        );
        let bias = with_bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                ParamKind::BiasOrGain,
                Array1::<f64>::zeros(out_channels).into_dyn(),
            )
        });
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                ParamKind::Weight,
                weight.into_dyn(),
            ),
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: (kernel - 1) / 2,
            cache_input: None,
        }
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let y = self.run(x)?;
        self.cache_input = Some(x.clone());
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.run(x)
    }

    fn run(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(shape_error(
                (n, self.in_channels, h, w),
                x.dim(),
            ));
        }
        let (ho, wo) = self.out_hw(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let w2 = view2(&self.weight.value, self.out_channels, ckk);
        let mut y = Array4::<f64>::zeros((n, self.out_channels, ho, wo));

        let dims = Dims {
            c_in: self.in_channels,
            c_out: self.out_channels,
            h,
            w,
            ho,
            wo,
            stride: self.stride,
        };
        let wts = self.weight.value.as_slice().expect("contiguous weight");

        let y_chunks: Vec<_> = y.axis_chunks_iter_mut(Axis(0), DET_CHUNK).collect();
        y_chunks
            .into_par_iter()
            .enumerate()
            .for_each(|(ci, mut yc)| {
                let lo = ci * DET_CHUNK;
                let mut col =
                    (self.kernel != 1).then(|| Array2::<f64>::zeros((ckk, ho * wo)));
                for i in 0..yc.len_of(Axis(0)) {
                    let xi = x.index_axis(Axis(0), lo + i);
                    let yi = yc.index_axis_mut(Axis(0), i);
                    let mut y2 = flat2_mut(yi, self.out_channels, ho * wo);
                    if self.kernel == 1 {
                        // Pointwise: plane-wise accumulation beats the
                        // im2col round trip at backbone channel counts.
                        let xs = xi.to_slice().expect("contiguous image view");
                        direct1_fwd(xs, wts, y2.as_slice_mut().unwrap(), &dims);
                    } else {
                        let col = col.as_mut().unwrap();
                        im2col(xi, self.kernel, self.stride, self.pad, col);
                        general_mat_mul(1.0, &w2, &col.view(), 0.0, &mut y2);
                    }
                    if let Some(bias) = &self.bias {
                        let b = bias.value.as_slice().expect("contiguous bias");
                        for (co, mut row) in y2.axis_iter_mut(Axis(0)).enumerate() {
                            row += b[co];
                        }
                    }
                }
            });
        Ok(y)
    }

    /// Backward pass; accumulates weight/bias gradients and returns the
    /// gradient with respect to the cached input.
    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache_input
            .take()
            .expect("conv backward called without forward_train");
        let (_, _, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let w2 = view2(&self.weight.value, self.out_channels, ckk);
        let mut dx = Array4::<f64>::zeros(x.raw_dim());

        let dims = Dims {
            c_in: self.in_channels,
            c_out: self.out_channels,
            h,
            w,
            ho,
            wo,
            stride: self.stride,
        };
        let wts = self.weight.value.as_slice().expect("contiguous weight");

        let dx_chunks: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), DET_CHUNK).collect();
        let partials: Vec<(Array2<f64>, Array1<f64>)> = dx_chunks
            .into_par_iter()
            .enumerate()
            .map(|(ci, mut dxc)| {
                let lo = ci * DET_CHUNK;
                let mut dw = Array2::<f64>::zeros((self.out_channels, ckk));
                let mut db = Array1::<f64>::zeros(self.out_channels);
                let mut scratch = (self.kernel != 1).then(|| {
                    (
                        Array2::<f64>::zeros((ckk, ho * wo)),
                        Array2::<f64>::zeros((ckk, ho * wo)),
                    )
                });
                for i in 0..dxc.len_of(Axis(0)) {
                    let xi = x.index_axis(Axis(0), lo + i);
                    let gyi = gy.index_axis(Axis(0), lo + i);
                    let gy2 = flat2(gyi, self.out_channels, ho * wo);
                    let dxi = dxc.index_axis_mut(Axis(0), i);
                    if self.kernel == 1 {
                        let xs = xi.to_slice().expect("contiguous image view");
                        let gys = gy2.to_slice().unwrap();
                        let dxs = dxi.into_slice().expect("contiguous grad view");
                        direct1_bwd(xs, gys, wts, dw.as_slice_mut().unwrap(), dxs, &dims);
                    } else {
                        let (col, dcol) = scratch.as_mut().unwrap();
                        im2col(xi, self.kernel, self.stride, self.pad, col);
                        general_mat_mul(1.0, &gy2, &col.t(), 1.0, &mut dw.view_mut());
                        general_mat_mul(1.0, &w2.t(), &gy2, 0.0, &mut dcol.view_mut());
                        col2im(dcol, self.kernel, self.stride, self.pad, dxi);
                    }
                    if self.bias.is_some() {
                        for (co, row) in gy2.axis_iter(Axis(0)).enumerate() {
                            db[co] += row.sum();
                        }
                    }
                }
                (dw, db)
            })
            .collect();

        // Combine in chunk order for run-to-run determinism.
        let mut wgrad = grad2_mut(&mut self.weight.grad, self.out_channels, ckk);
        for (dw, _) in &partials {
            wgrad += dw;
        }
        if let Some(bias) = &mut self.bias {
            let bg = bias.grad.as_slice_mut().expect("contiguous bias grad");
            for (_, db) in &partials {
                for (i, v) in db.iter().enumerate() {
                    bg[i] += v;
                }
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Shapes and geometry shared by the direct convolution kernels.
struct Dims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

/// Direct 1x1 convolution: per (ci, co) scalar-times-plane accumulation.
fn direct1_fwd(x: &[f64], wts: &[f64], y: &mut [f64], d: &Dims) {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    y.fill(0.0);
    for ci in 0..d.c_in {
        let x_ch = &x[ci * hw..(ci + 1) * hw];
        for co in 0..d.c_out {
            let wv = wts[co * d.c_in + ci];
            let y_ch = &mut y[co * ohw..(co + 1) * ohw];
            if d.stride == 1 {
                for (yv, &xv) in y_ch.iter_mut().zip(x_ch) {
                    *yv += wv * xv;
                }
            } else {
                for i in 0..d.ho {
                    let x_row = &x_ch[i * d.stride * d.w..];
                    let y_row = &mut y_ch[i * d.wo..(i + 1) * d.wo];
                    for (j, yv) in y_row.iter_mut().enumerate() {
                        *yv += wv * x_row[j * d.stride];
                    }
                }
            }
        }
    }
}

fn direct1_bwd(x: &[f64], gy: &[f64], wts: &[f64], dw: &mut [f64], dx: &mut [f64], d: &Dims) {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    for ci in 0..d.c_in {
        let x_ch = &x[ci * hw..(ci + 1) * hw];
        for co in 0..d.c_out {
            let wv = wts[co * d.c_in + ci];
            let gy_ch = &gy[co * ohw..(co + 1) * ohw];
            let dx_ch = &mut dx[ci * hw..(ci + 1) * hw];
            let mut acc = 0.0;
            if d.stride == 1 {
                for ((dv, &gv), &xv) in dx_ch.iter_mut().zip(gy_ch).zip(x_ch) {
                    acc += gv * xv;
                    *dv += wv * gv;
                }
            } else {
                for i in 0..d.ho {
                    let base = i * d.stride * d.w;
                    let g_row = &gy_ch[i * d.wo..(i + 1) * d.wo];
                    for (j, &gv) in g_row.iter().enumerate() {
                        let src = base + j * d.stride;
                        acc += gv * x_ch[src];
                        dx_ch[src] += wv * gv;
                    }
                }
            }
            dw[co * d.c_in + ci] += acc;
        }
    }
}

fn view2(arr: &ndarray::ArrayD<f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), arr.as_slice().expect("contiguous param")).unwrap()
}

fn grad2_mut(arr: &mut ndarray::ArrayD<f64>, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), arr.as_slice_mut().expect("contiguous grad")).unwrap()
}

fn flat2(v: ArrayView3<'_, f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), v.to_slice().expect("contiguous image view")).unwrap()
}

fn flat2_mut(v: ArrayViewMut3<'_, f64>, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), v.into_slice().expect("contiguous image view")).unwrap()
}

/// Unfold one image `(c, h, w)` into `(c*k*k, ho*wo)`; out-of-image taps
/// are written as zeros.
fn im2col(x: ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize, col: &mut Array2<f64>) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    debug_assert_eq!(col.dim(), (c * k * k, ho * wo));
    let xs = x.to_slice().expect("contiguous image view");
    let cs = col.as_slice_mut().unwrap();
    for ch in 0..c {
        let x_ch = &xs[ch * h * w..(ch + 1) * h * w];
        for di in 0..k {
            for dj in 0..k {
                let row = (ch * k + di) * k + dj;
                let out = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                // Valid output columns: 0 <= j*stride + dj - pad < w.
                let (jlo, jhi) = col_span(wo, w, stride, dj, pad);
                for i in 0..ho {
                    let iy = (i * stride + di) as isize - pad as isize;
                    let dst = &mut out[i * wo..(i + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                    dst[..jlo].fill(0.0);
                    dst[jhi..].fill(0.0);
                    if stride == 1 {
                        let s0 = jlo + dj - pad;
                        dst[jlo..jhi].copy_from_slice(&src_row[s0..s0 + (jhi - jlo)]);
                    } else {
                        for (d, j) in dst[jlo..jhi].iter_mut().zip(jlo..) {
                            *d = src_row[j * stride + dj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open output-column range whose source index `j*stride + off - pad`
/// falls inside `[0, len)`.
fn col_span(n_out: usize, len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off + stride - 1) / stride
    };
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Scatter-add inverse of [`im2col`].
fn col2im(col: &Array2<f64>, k: usize, stride: usize, pad: usize, dx: ArrayViewMut3<'_, f64>) {
    let (c, h, w) = dx.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cs = col.as_slice().unwrap();
    let dxs = dx.into_slice().expect("contiguous grad view");
    for ch in 0..c {
        let dx_ch = &mut dxs[ch * h * w..(ch + 1) * h * w];
        for di in 0..k {
            for dj in 0..k {
                let row = (ch * k + di) * k + dj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                let (jlo, jhi) = col_span(wo, w, stride, dj, pad);
                for i in 0..ho {
                    let iy = (i * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dx_ch[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[i * wo..(i + 1) * wo];
                    if stride == 1 {
                        let s0 = jlo + dj - pad;
                        for (d, &v) in dst_row[s0..s0 + (jhi - jlo)]
                            .iter_mut()
                            .zip(&src_row[jlo..jhi])
                        {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in (jlo..).zip(&src_row[jlo..jhi]) {
                            dst_row[j * stride + dj - pad] += v;
                        }
                    }
                }
            }
        }
    }
}
