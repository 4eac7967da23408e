//! Contrastive objectives over batches of 2B augmented views.
//!
//! Rows 2k and 2k+1 of a batch are the two views of image k. Stage one
//! uses NT-Xent (cosine similarity, temperature); stages two and three use
//! the Cauchy similarity q(a, b) = 1 / (1 + ||a - b||²) with no
//! temperature, which is what makes the 2-D embedding directly readable
//! as a t-SNE-like map.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    NtXent { temperature: f64 },
    Cauchy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::NtXent { .. } => "nt_xent",
            LossKind::Cauchy => "cauchy",
        }
    }
}

/// Batch of embeddings with interleaved positive pairs.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Array2<f64>,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        let rows = embeddings.nrows();
        if rows % 2 != 0 {
            return Err(Error::Training(format!(
                "contrastive batch needs an even row count, got {rows}"
            )));
        }
        if rows < 4 {
            return Err(Error::Training(format!(
                "contrastive batch needs at least two image pairs (4 rows), got {rows}"
            )));
        }
        Ok(ContrastiveBatch { embeddings })
    }

    pub fn pairs(&self) -> usize {
        self.embeddings.nrows() / 2
    }

    /// Index of the positive partner of anchor `i`.
    fn partner(i: usize) -> usize {
        i ^ 1
    }
}

/// NT-Xent: mean over anchors of -log softmax of the positive's cosine
/// similarity (temperature-scaled) against all 2B-1 candidates.
pub fn nt_xent_loss(batch: &ContrastiveBatch, temperature: f64) -> Result<f64> {
    nt_xent_inner(batch, temperature).map(|(loss, _)| loss)
}

/// Cauchy contrastive loss; defined even for coincident points.
pub fn cauchy_contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(cauchy_inner(batch).0)
}

/// Loss plus its gradient with respect to the raw embeddings.
pub fn loss_gradient(kind: LossKind, batch: &ContrastiveBatch) -> Result<(f64, Array2<f64>)> {
    match kind {
        LossKind::NtXent { temperature } => nt_xent_inner(batch, temperature),
        LossKind::Cauchy => Ok(cauchy_inner(batch)),
    }
}

fn nt_xent_inner(batch: &ContrastiveBatch, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "nt_xent temperature must be positive, got {temperature}"
        )));
    }
    let z = &batch.embeddings;
    let (n, d) = z.dim();
    if d < 2 {
        return Err(Error::Training(format!(
            "nt_xent needs embedding dim >= 2, got {d}"
        )));
    }

    // Normalize rows; cosine similarity is undefined for zero-norm rows
    // and epsilon-fudging would hide a dead encoder, so fail loudly.
    let mut norms = Array1::<f64>::zeros(n);
    for (i, row) in z.axis_iter(Axis(0)).enumerate() {
        let r = row.dot(&row).sqrt();
        if r == 0.0 || !r.is_finite() {
            return Err(Error::Training(format!(
                "embedding row {i} has zero or non-finite norm; cosine similarity undefined"
            )));
        }
        norms[i] = r;
    }
    let mut u = z.clone();
    for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v / norms[i]);
    }

    // Similarity logits s_ik = cos(u_i, u_k) / tau, diagonal unused.
    let s = u.dot(&u.t()) / temperature;

    // Softmax over k != i with the diagonal excluded, stabilized per row.
    let mut p = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                max = max.max(s[[i, k]]);
            }
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                let e = (s[[i, k]] - max).exp();
                p[[i, k]] = e;
                denom += e;
            }
        }
        for k in 0..n {
            p[[i, k]] /= denom;
        }
        let j = ContrastiveBatch::partner(i);
        loss -= (s[[i, j]] - max) - denom.ln();
    }
    loss /= n as f64;

    // dL/ds_ik = (p_ik - [k = partner(i)]) / n; s = U U^T / tau, so
    // dL/dU = (G + G^T) U / tau.
    let mut g = p;
    for i in 0..n {
        let j = ContrastiveBatch::partner(i);
        g[[i, j]] -= 1.0;
    }
    g.mapv_inplace(|v| v / n as f64);
    let gu = (&g + &g.t()).dot(&u) / temperature;

    // Through the normalization: dz = (g_u - (g_u . u) u) / ||z||.
    let mut grad = gu;
    for i in 0..n {
        let ui = u.index_axis(Axis(0), i);
        let gi = grad.index_axis(Axis(0), i);
        let proj = gi.dot(&ui);
        let r = norms[i];
        let mut gi = grad.index_axis_mut(Axis(0), i);
        gi.zip_mut_with(&ui, |gv, &uv| *gv = (*gv - proj * uv) / r);
    }
    Ok((loss, grad))
}

fn cauchy_inner(batch: &ContrastiveBatch) -> (f64, Array2<f64>) {
    let z = &batch.embeddings;
    let n = z.nrows();

    // Pairwise q_ik = 1 / (1 + ||z_i - z_k||^2), diagonal unused.
    let mut q = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for k in (i + 1)..n {
            let diff = &z.index_axis(Axis(0), i) - &z.index_axis(Axis(0), k);
            let d2 = diff.dot(&diff);
            let v = 1.0 / (1.0 + d2);
            q[[i, k]] = v;
            q[[k, i]] = v;
        }
    }

    let mut loss = 0.0;
    let mut row_sum = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += q[[i, k]];
            }
        }
        row_sum[i] = denom;
        let j = ContrastiveBatch::partner(i);
        loss += -(q[[i, j]].ln()) + denom.ln();
    }
    loss /= n as f64;

    // dL/d(d2_ik) = ([k = partner(i)] q_ij - q_ik^2 / row_sum_i) / n for
    // each ordered pair; d(d2)/dz_i = 2 (z_i - z_k).
    let inv_n = 1.0 / n as f64;
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let j = ContrastiveBatch::partner(i);
        for k in 0..n {
            if k == i {
                continue;
            }
            let mut v = -q[[i, k]] * q[[i, k]] / row_sum[i];
            if k == j {
                v += q[[i, j]];
            }
            a[[i, k]] = v * inv_n;
        }
    }
    let mut grad = Array2::<f64>::zeros(z.raw_dim());
    for i in 0..n {
        for k in 0..n {
            if k == i {
                continue;
            }
            let w = 2.0 * (a[[i, k]] + a[[k, i]]);
            if w == 0.0 {
                continue;
            }
            let zi = z.index_axis(Axis(0), i).to_owned();
            let zk = z.index_axis(Axis(0), k);
            let mut gi = grad.index_axis_mut(Axis(0), i);
            gi.zip_mut_with(&(&zi - &zk), |g, &dv| *g += w * dv);
        }
    }
    (loss, grad)
}
