//! BagNet-style encoder: a ResNet-like backbone whose receptive field is
//! kept deliberately small by replacing most 3x3 convolutions with 1x1.
//!
//! Each position of the output feature map therefore describes one image
//! patch of exactly `receptive_field` pixels, which is what makes the
//! downstream evidence maps readable: evidence at (i, j) can only come
//! from the pixels inside that patch.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, relu, relu_backward, BatchNorm2d, Conv2d, Param,
};
use crate::seeds::{self, tag};

/// Stage strides; the final stage keeps stride 1 so the feature stride
/// stays at 8 regardless of receptive field.
const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];

/// Receptive fields realizable by the four-stage plan: placing a 3x3 in
/// the first block of the first `t` stages (plus the stem's fixed 3x3)
/// yields 9, 17 or 33 pixels for t = 2, 3, 4.
const REALIZABLE_RF: [(usize, usize); 3] = [(9, 2), (17, 3), (33, 4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub receptive_field: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            receptive_field: 9,
            input_channels: 3,
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }
}

impl EncoderConfig {
    /// Output feature dimension D (the last stage width).
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Number of leading stages whose first block carries a 3x3 kernel.
    fn three_by_three_stages(&self) -> Result<usize> {
        REALIZABLE_RF
            .iter()
            .find(|(rf, _)| *rf == self.receptive_field)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let realizable: Vec<String> =
                    REALIZABLE_RF.iter().map(|(rf, _)| rf.to_string()).collect();
                Error::Config(format!(
                    "receptive_field {} not realizable by the block plan; realizable values: {}",
                    self.receptive_field,
                    realizable.join(", ")
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.three_by_three_stages()?;
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config(
                "blocks_per_stage must have at least one block per stage".into(),
            ));
        }
        Ok(())
    }

    /// Kernel/stride sequence of the plan, used for the analytic
    /// receptive-field computation.
    fn layer_plan(&self) -> Result<Vec<(usize, usize)>> {
        let threes = self.three_by_three_stages()?;
        let mut plan = vec![(1, 1), (3, 1)]; // stem
        for s in 0..4 {
            let first_kernel = if s < threes { 3 } else { 1 };
            plan.push((first_kernel, STAGE_STRIDES[s]));
            plan.push((1, 1)); // second conv of the first block
            for _ in 1..self.blocks_per_stage[s] {
                plan.push((1, 1));
                plan.push((1, 1));
            }
        }
        Ok(plan)
    }

    /// Propagate receptive-field arithmetic through the plan. Returns
    /// (receptive_field, stride, center offset of patch (0,0)). Padding is
    /// always (k-1)/2 so the first patch center stays at pixel 0.
    pub fn analytic_geometry(&self) -> Result<PatchGeometry> {
        let mut rf = 1usize;
        let mut jump = 1usize;
        let mut start = 0f64;
        for (k, s) in self.layer_plan()? {
            let pad = (k - 1) / 2;
            rf += (k - 1) * jump;
            start += ((k - 1) as f64 / 2.0 - pad as f64) * jump as f64;
            jump *= s;
        }
        debug_assert_eq!(start, 0.0);
        Ok(PatchGeometry {
            receptive_field: rf,
            stride: jump,
            center0: start.round() as i64,
        })
    }
}

/// Maps feature-map positions to input-pixel rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub receptive_field: usize,
    pub stride: usize,
    pub center0: i64,
}

impl PatchGeometry {
    pub fn center(&self, i: usize, j: usize) -> (i64, i64) {
        (
            self.center0 + (i * self.stride) as i64,
            self.center0 + (j * self.stride) as i64,
        )
    }

    /// Half-open pixel rectangle `(y0, x0, y1, x1)` of patch (i, j),
    /// clipped to an `h` x `w` image.
    pub fn rect(&self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let half = (self.receptive_field as i64 - 1) / 2;
        let (cy, cx) = self.center(i, j);
        let y0 = (cy - half).max(0) as usize;
        let x0 = (cx - half).max(0) as usize;
        let y1 = ((cy + half + 1).max(0) as usize).min(h);
        let x1 = ((cx + half + 1).max(0) as usize).min(w);
        (y0, x0, y1, x1)
    }

    /// True if the full (unclipped) rectangle of patch (i, j) lies inside
    /// an `h` x `w` image.
    pub fn is_interior(&self, i: usize, j: usize, h: usize, w: usize) -> bool {
        let half = (self.receptive_field as i64 - 1) / 2;
        let (cy, cx) = self.center(i, j);
        cy - half >= 0 && cx - half >= 0 && cy + half < h as i64 && cx + half < w as i64
    }
}

/// Spatial grid of local descriptors in NHWC layout plus the geometry
/// needed to trace each position back to its image patch.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array4<f64>, // (N, h, w, D)
    pub geometry: PatchGeometry,
    pub image_hw: (usize, usize),
}

impl FeatureMap {
    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

/// Mean over spatial positions: `out[n, d] = mean_{i,j} fm[n, i, j, d]`.
pub fn feature_map_gap(fm: &FeatureMap) -> Array2<f64> {
    let (n, h, w, d) = fm.values.dim();
    let area = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, d));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    out[[b, k]] += fm.values[[b, i, j, k]];
                }
            }
        }
    }
    out.mapv_inplace(|v| v / area);
    out
}

struct BlockCache {
    mask1: Array4<bool>,
    mask_out: Array4<bool>,
}

/// Two-convolution residual block. The first convolution carries the
/// block's kernel/stride; the second is always 1x1. A 1x1 projection
/// shortcut is used whenever the shape changes.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    cache: Option<BlockCache>,
}

impl ResidualBlock {
    fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, kernel, stride, false, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 1, 1, false, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), out_ch);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), in_ch, out_ch, 1, stride, false, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_ch),
            )
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            cache: None,
        }
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let a = self.bn1.forward_train(&self.conv1.forward_train(x)?);
        let (a, mask1) = relu(&a);
        let b = self.bn2.forward_train(&self.conv2.forward_train(&a)?);
        let res = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward_train(&conv.forward_train(x)?),
            None => x.clone(),
        };
        let (y, mask_out) = relu(&(b + res));
        self.cache = Some(BlockCache { mask1, mask_out });
        Ok(y)
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let a = self.bn1.forward_eval(&self.conv1.forward_eval(x)?);
        let (a, _) = relu(&a);
        let b = self.bn2.forward_eval(&self.conv2.forward_eval(&a)?);
        let res = match &self.shortcut {
            Some((conv, bn)) => bn.forward_eval(&conv.forward_eval(x)?),
            None => x.clone(),
        };
        Ok((b + res).mapv(|v| v.max(0.0)))
    }

    fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let BlockCache { mask1, mask_out } =
            self.cache.take().expect("block backward without forward");
        let g = relu_backward(gy, &mask_out);
        // Main branch.
        let gb = self.bn2.backward(&g);
        let ga = self.conv2.backward(&gb);
        let ga = relu_backward(&ga, &mask1);
        let g1 = self.bn1.backward(&ga);
        let mut dx = self.conv1.backward(&g1);
        // Residual branch.
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let gr = bn.backward(&g);
                dx += &conv.backward(&gr);
            }
            None => dx += &g,
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.shortcut {
            v.extend(conv.params());
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.shortcut {
            v.extend(conv.params_mut());
            v.extend(bn.params_mut());
        }
        v
    }

    fn running_stats_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }

    fn running_stats(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.shortcut {
            v.push(bn);
        }
        v
    }
}

struct StemCache {
    mask1: Array4<bool>,
    mask2: Array4<bool>,
}

pub struct BagNetEncoder {
    pub config: EncoderConfig,
    geometry: PatchGeometry,
    stem_conv1: Conv2d,
    stem_bn1: BatchNorm2d,
    stem_conv2: Conv2d,
    stem_bn2: BatchNorm2d,
    stages: Vec<Vec<ResidualBlock>>,
    stem_cache: Option<StemCache>,
}

impl BagNetEncoder {
    /// Build with deterministic He-normal initialization. The geometry is
    /// computed analytically from the layer plan, never assumed.
    pub fn build(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = config.analytic_geometry()?;
        if geometry.receptive_field != config.receptive_field {
            return Err(Error::Config(format!(
                "layer plan yields receptive field {}, requested {}",
                geometry.receptive_field, config.receptive_field
            )));
        }
        let threes = config.three_by_three_stages()?;
        let mut rng = seeds::rng_for(init_seed, &[tag::INIT_ENCODER]);
        let stem_conv1 = Conv2d::new(
            "stem.conv1",
            config.input_channels,
            config.stem_channels,
            1,
            1,
            false,
            &mut rng,
        );
        let stem_bn1 = BatchNorm2d::new("stem.bn1", config.stem_channels);
        let stem_conv2 = Conv2d::new(
            "stem.conv2",
            config.stem_channels,
            config.stem_channels,
            3,
            1,
            false,
            &mut rng,
        );
        let stem_bn2 = BatchNorm2d::new("stem.bn2", config.stem_channels);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.stem_channels;
        for s in 0..4 {
            let out_ch = config.stage_channels[s];
            let mut blocks = Vec::with_capacity(config.blocks_per_stage[s]);
            for b in 0..config.blocks_per_stage[s] {
                let (kernel, stride) = if b == 0 {
                    (if s < threes { 3 } else { 1 }, STAGE_STRIDES[s])
                } else {
                    (1, 1)
                };
                blocks.push(ResidualBlock::new(
                    &format!("stage{}.block{}", s + 1, b),
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    &mut rng,
                ));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(BagNetEncoder {
            config,
            geometry,
            stem_conv1,
            stem_bn1,
            stem_conv2,
            stem_bn2,
            stages,
            stem_cache: None,
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    /// Spatial size of the feature map for an `h` x `w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        // SAME padding with strides 2,2,2,1: ceil division by 8.
        let s = self.geometry.stride;
        (h.div_ceil(s), w.div_ceil(s))
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(crate::error::shape_error(
                (n, self.config.input_channels, h, w),
                x.dim(),
            ));
        }
        Ok(())
    }

    /// Training-mode forward on NCHW input, returning the NCHW feature
    /// map `(N, D, h, w)`. Caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let a = self.stem_bn1.forward_train(&self.stem_conv1.forward_train(x)?);
        let (a, mask1) = relu(&a);
        let b = self.stem_bn2.forward_train(&self.stem_conv2.forward_train(&a)?);
        let (mut y, mask2) = relu(&b);
        self.stem_cache = Some(StemCache { mask1, mask2 });
        for stage in &mut self.stages {
            for block in stage {
                y = block.forward_train(&y)?;
            }
        }
        Ok(y)
    }

    /// Pure evaluation-mode forward (running batch-norm statistics, no
    /// caches, no mutation).
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let a = self.stem_bn1.forward_eval(&self.stem_conv1.forward_eval(x)?);
        let (a, _) = relu(&a);
        let b = self.stem_bn2.forward_eval(&self.stem_conv2.forward_eval(&a)?);
        let mut y = b.mapv(|v| v.max(0.0));
        for stage in &self.stages {
            for block in stage {
                y = block.forward_eval(&y)?;
            }
        }
        Ok(y)
    }

    /// Backward from a feature-map gradient; accumulates parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = grad.clone();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
        }
        let StemCache { mask1, mask2 } =
            self.stem_cache.take().expect("encoder backward without forward");
        let g = relu_backward(&g, &mask2);
        let g = self.stem_bn2.backward(&g);
        let g = self.stem_conv2.backward(&g);
        let g = relu_backward(&g, &mask1);
        let g = self.stem_bn1.backward(&g);
        self.stem_conv1.backward(&g)
    }

    /// Public NHWC entry point: encode images `(N, H, W, C)` into a
    /// [`FeatureMap`] using evaluation-mode statistics.
    pub fn encode(&self, images: &Array4<f64>) -> Result<FeatureMap> {
        let (n, h, w, c) = images.dim();
        if c != self.config.input_channels {
            return Err(crate::error::shape_error(
                (n, h, w, self.config.input_channels),
                images.dim(),
            ));
        }
        let x = nhwc_to_nchw(images);
        let y = self.forward_eval(&x)?;
        Ok(FeatureMap {
            values: nchw_to_nhwc(&y),
            geometry: self.geometry,
            image_hw: (h, w),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.stem_conv1.params();
        v.extend(self.stem_bn1.params());
        v.extend(self.stem_conv2.params());
        v.extend(self.stem_bn2.params());
        for stage in &self.stages {
            for block in stage {
                v.extend(block.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem_conv1.params_mut();
        v.extend(self.stem_bn1.params_mut());
        v.extend(self.stem_conv2.params_mut());
        v.extend(self.stem_bn2.params_mut());
        for stage in &mut self.stages {
            for block in stage {
                v.extend(block.params_mut());
            }
        }
        v
    }

    /// Batch-norm layers in parameter order, for running-stat
    /// serialization.
    pub fn batchnorms(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.stem_bn1, &self.stem_bn2];
        for stage in &self.stages {
            for block in stage {
                v.extend(block.running_stats());
            }
        }
        v
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.stem_bn1, &mut self.stem_bn2];
        for stage in &mut self.stages {
            for block in stage {
                v.extend(block.running_stats_mut());
            }
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub fn nhwc_to_nchw(x: &Array4<f64>) -> Array4<f64> {
    x.view().permuted_axes([0, 3, 1, 2]).to_owned()
}

pub fn nchw_to_nhwc(x: &Array4<f64>) -> Array4<f64> {
    x.view().permuted_axes([0, 2, 3, 1]).to_owned()
}

/// GAP on the internal NCHW map, reusing the shared pooling op.
pub fn pooled_features(feature_map_nchw: &Array4<f64>) -> Array2<f64> {
    global_avg_pool(feature_map_nchw)
}
