//! Projection head g mapping pooled encoder features into the contrastive
//! space: 128-D during the first pretraining stage, 2-D after
//! dimensionality annealing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Linear, Param};
use crate::seeds::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            hidden_dims: vec![128],
            out_dim: 128,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim != 128 && self.out_dim != 2 {
            return Err(Error::Config(format!(
                "projector out_dim must be 128 or 2, got {}",
                self.out_dim
            )));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("projector hidden_dims must be nonempty".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("projector hidden_dims must be positive".into()));
        }
        Ok(())
    }
}

/// MLP of Linear/ReLU pairs with a linear output layer.
pub struct Projector {
    pub config: ProjectorConfig,
    pub in_dim: usize,
    layers: Vec<Linear>,
    masks: Vec<Array2<bool>>,
    last_only_input: Option<Array2<f64>>,
}

impl Projector {
    pub fn build(in_dim: usize, config: ProjectorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng_for(init_seed, &[tag::INIT_PROJECTOR]);
        let mut dims = vec![in_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.out_dim);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(&format!("proj.fc{i}"), dims[i], dims[i + 1], &mut rng))
            .collect();
        Ok(Projector {
            config,
            in_dim,
            layers,
            masks: Vec::new(),
            last_only_input: None,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(crate::error::shape_error(
                (x.nrows(), self.in_dim),
                x.dim(),
            ));
        }
        Ok(())
    }

    /// Evaluation-mode projection; the public `project` operation.
    pub fn project(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let mut x = features.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_eval(&x)?;
            if i != last {
                x.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(x)
    }

    /// Activations entering the final layer, used to verify that annealing
    /// preserves the prefix bit-exactly.
    pub fn penultimate(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let mut x = features.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.forward_eval(&x)?;
            x.mapv_inplace(|v| v.max(0.0));
        }
        Ok(x)
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        self.masks.clear();
        self.last_only_input = None;
        let mut y = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            y = layer.forward_train(&y)?;
            if i != last {
                let (a, m) = relu(&y);
                y = a;
                self.masks.push(m);
            }
        }
        Ok(y)
    }

    /// Backward through the whole MLP; returns the gradient w.r.t. the
    /// input features.
    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        assert!(
            self.last_only_input.is_none(),
            "mixed backward modes: last forward was last-layer-only"
        );
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&g);
            if i > 0 {
                g = relu_backward(&g, &self.masks[i - 1]);
            }
        }
        self.masks.clear();
        g
    }

    /// Stage-two forward: the prefix runs in evaluation mode, only the
    /// final layer records training caches.
    pub fn forward_train_last_only(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        self.masks.clear();
        let h = self.penultimate(x)?;
        self.last_only_input = Some(h.clone());
        let last = self.layers.len() - 1;
        self.layers[last].forward_train(&h)
    }

    /// Backward matching [`Self::forward_train_last_only`]: accumulates
    /// gradients in the final layer only.
    pub fn backward_last_only(&mut self, gy: &Array2<f64>) {
        self.last_only_input
            .take()
            .expect("last-only backward without last-only forward");
        let last = self.layers.len() - 1;
        let _ = self.layers[last].backward(gy);
    }

    /// Replace the final layer by a freshly initialized 2-output layer;
    /// everything else is copied bit-exactly. Small-magnitude init keeps
    /// the new embedding near the origin where the Cauchy similarity has
    /// useful gradients.
    pub fn anneal_to_2d(&self, seed: u64) -> Result<Projector> {
        if self.config.out_dim == 2 {
            return Err(Error::Config(
                "projector already has out_dim 2; annealing applies to the 128-D head".into(),
            ));
        }
        let mut rng = seeds::rng_for(seed, &[tag::ANNEAL]);
        let last = self.layers.len() - 1;
        let in_features = self.layers[last].in_features();
        let mut new_last = Linear::new(&format!("proj.fc{last}"), in_features, 2, &mut rng);
        new_last
            .weight
            .value
            .mapv_inplace(|_| seeds::normal(&mut rng) * 0.01);
        let mut layers: Vec<Linear> = self.layers[..last].to_vec();
        layers.push(new_last);
        Ok(Projector {
            config: ProjectorConfig {
                hidden_dims: self.config.hidden_dims.clone(),
                out_dim: 2,
            },
            in_dim: self.in_dim,
            layers,
            masks: Vec::new(),
            last_only_input: None,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Final-layer parameters, the only trainable set during stage two.
    pub fn last_layer_params_mut(&mut self) -> Vec<&mut Param> {
        let last = self.layers.len() - 1;
        self.layers[last].params_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff_grad, rel_error};
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;
    use rand::Rng;

    fn cfg(out_dim: usize) -> ProjectorConfig {
        ProjectorConfig {
            hidden_dims: vec![5, 4],
            out_dim,
        }
    }

    fn random_features(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = seeds::rng_for(seed, &[7]);
        Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() - 0.3)
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ProjectorConfig {
            hidden_dims: vec![8],
            out_dim: 64
        }
        .validate()
        .is_err());
        assert!(ProjectorConfig {
            hidden_dims: vec![],
            out_dim: 128
        }
        .validate()
        .is_err());
        assert!(cfg(128).validate().is_ok());
        assert!(cfg(2).validate().is_ok());
    }

    #[test]
    fn zero_features_give_identical_rows() {
        let p = Projector::build(6, cfg(128), 3).unwrap();
        let x = Array2::<f64>::zeros((4, 6));
        let z = p.project(&x).unwrap();
        let row0 = z.index_axis(Axis(0), 0).to_owned();
        for r in 1..4 {
            assert_eq!(z.index_axis(Axis(0), r), row0.view());
        }
    }

    #[test]
    fn batch_independence() {
        let p = Projector::build(6, cfg(128), 3).unwrap();
        let big = random_features(1, 5, 6);
        let zb = p.project(&big).unwrap();
        for r in 0..5 {
            let solo = big.index_axis(Axis(0), r).to_owned().insert_axis(Axis(0));
            let zs = p.project(&solo).unwrap();
            for (a, b) in zs.index_axis(Axis(0), 0).iter().zip(zb.index_axis(Axis(0), r)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matches_hand_rolled_affine_relu_chain() {
        let p = Projector::build(3, cfg(128), 9).unwrap();
        let x = random_features(2, 4, 3);
        let z = p.project(&x).unwrap();

        // Independent reimplementation from the raw parameter tensors.
        let params = p.params();
        let mut cur = x.clone();
        let n_layers = params.len() / 2;
        for li in 0..n_layers {
            let w = &params[2 * li].value;
            let b = &params[2 * li + 1].value;
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            let mut next = Array2::<f64>::zeros((cur.nrows(), out_f));
            for r in 0..cur.nrows() {
                for o in 0..out_f {
                    let mut acc = b[[o]];
                    for i in 0..in_f {
                        acc += w[[o, i]] * cur[[r, i]];
                    }
                    next[[r, o]] = if li + 1 < n_layers { acc.max(0.0) } else { acc };
                }
            }
            cur = next;
        }
        for (a, b) in z.iter().zip(cur.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let p = Projector::build(6, cfg(128), 3).unwrap();
        assert!(p.project(&Array2::<f64>::zeros((2, 7))).is_err());
    }

    #[test]
    fn anneal_preserves_prefix_and_replaces_last_layer() {
        let p = Projector::build(6, cfg(128), 3).unwrap();
        let p2 = p.anneal_to_2d(77).unwrap();
        assert_eq!(p2.out_dim(), 2);
        let x = random_features(3, 5, 6);
        let pre = p.penultimate(&x).unwrap();
        let post = p2.penultimate(&x).unwrap();
        assert_eq!(pre, post);
        let z = p2.project(&x).unwrap();
        assert_eq!(z.dim(), (5, 2));
        // Deterministic under the seed; different seed differs.
        let p3 = p.anneal_to_2d(77).unwrap();
        assert_eq!(
            p2.params().last().unwrap().value,
            p3.params().last().unwrap().value
        );
        let p4 = p.anneal_to_2d(78).unwrap();
        assert_ne!(
            p2.params()[p2.params().len() - 2].value,
            p4.params()[p4.params().len() - 2].value
        );
    }

    #[test]
    fn anneal_twice_is_error() {
        let p = Projector::build(6, cfg(128), 3).unwrap();
        let p2 = p.anneal_to_2d(1).unwrap();
        assert!(p2.anneal_to_2d(1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p0 = Projector::build(4, cfg(2), 5).unwrap();
        let x = random_features(4, 3, 4);
        let weights = random_features(5, 3, 2);

        let mut p = Projector::build(4, cfg(2), 5).unwrap();
        let z = p.forward_train(&x).unwrap();
        let _ = z;
        let dx = p.backward(&weights);
        let mut analytic: Vec<f64> = Vec::new();
        for q in p.params() {
            analytic.extend(q.grad.iter().copied());
        }
        analytic.extend(dx.iter().copied());

        let mut theta0: Vec<f64> = Vec::new();
        for q in p0.params() {
            theta0.extend(q.value.iter().copied());
        }
        theta0.extend(x.iter().copied());
        let fd = central_diff_grad(
            |t| {
                let mut pp = Projector::build(4, cfg(2), 5).unwrap();
                let mut off = 0;
                for q in pp.params_mut() {
                    let n = q.value.len();
                    q.value
                        .as_slice_mut()
                        .unwrap()
                        .copy_from_slice(&t[off..off + n]);
                    off += n;
                }
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap().copy_from_slice(&t[off..]);
                (&pp.project(&xp).unwrap() * &weights).sum()
            },
            &theta0,
        );
        let err = rel_error(&analytic, &fd);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn last_only_mode_updates_only_final_layer_grads() {
        let mut p = Projector::build(4, cfg(2), 5).unwrap();
        let x = random_features(6, 3, 4);
        let z = p.forward_train_last_only(&x).unwrap();
        p.backward_last_only(&z.mapv(|_| 1.0));
        let params = p.params();
        let n = params.len();
        for (i, q) in params.iter().enumerate() {
            let nonzero = q.grad.iter().any(|&g| g != 0.0);
            if i >= n - 2 {
                assert!(nonzero, "last-layer grad should be populated: {}", q.name);
            } else {
                assert!(!nonzero, "prefix grad must stay zero: {}", q.name);
            }
        }

        // And the last-only forward agrees with the eval projection.
        let z_eval = p.project(&x).unwrap();
        let z2 = p.forward_train_last_only(&x).unwrap();
        for (a, b) in z2.iter().zip(z_eval.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
