//! Evaluation stack: rank-based AUROC, kNN AUROC on low-dimensional
//! embeddings, an elastic-net logistic probe, and lesion-patch precision.

use ndarray::{Array1, Array2, Array4, ArrayView2};

use crate::data::DatasetManifest;
use crate::encoder::PatchGeometry;
use crate::error::{Error, Result};
use crate::trainer::SslModel;

/// Binary AUROC from scores and class membership, ties counted one half.
/// Computed via average ranks, which matches the exhaustive pairwise
/// comparison exactly.
fn binary_auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n = scores.len();
    let p = positive.iter().filter(|&&b| b).count();
    let neg = n - p;
    if p == 0 || neg == 0 {
        return Err(Error::Data(
            "AUROC undefined: only one class present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &b)| b)
        .map(|(r, _)| r)
        .sum();
    Ok((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * neg as f64))
}

/// AUROC of per-class scores. Two classes use the standard rank statistic
/// on the positive-class column; more classes are macro-averaged
/// one-vs-rest.
pub fn auroc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (m, c) = scores.dim();
    if m != labels.len() {
        return Err(Error::Data(format!(
            "scores have {m} rows but {} labels given",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(Error::Data("scores need at least two class columns".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("scores contain non-finite values".into()));
    }
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::Data("label out of range of score columns".into()));
    }
    let distinct = {
        let mut seen = vec![false; c];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data(
            "AUROC undefined: only one class present".into(),
        ));
    }
    if c == 2 {
        let col: Vec<f64> = scores.column(1).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return binary_auroc(&col, &pos);
    }
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..c {
        let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if pos.iter().all(|&b| !b) {
            continue; // class absent from this evaluation set
        }
        let col: Vec<f64> = scores.column(class).to_vec();
        total += binary_auroc(&col, &pos)?;
        used += 1;
    }
    Ok(total / used as f64)
}

/// A low-dimensional embedding of a dataset; labels stay optional so
/// unlabeled points can still be mapped and plotted.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub ids: Vec<String>,
    pub points: Array2<f64>,
    pub labels: Vec<Option<usize>>,
}

/// Indices of the k nearest training points to `q`, distance ties broken
/// by index order.
fn k_nearest(points: &Array2<f64>, train: &[usize], q: &[f64], k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .map(|&t| {
            let d = points
                .row(t)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (d, t)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_by(cmp);
    dist.into_iter().map(|(_, t)| t).collect()
}

/// Class scores from k-nearest-neighbor label fractions, reduced to AUROC.
pub fn knn_auroc(
    data: &EmbeddingDataset,
    k: usize,
    train: &[usize],
    test: &[usize],
) -> Result<f64> {
    if k == 0 || k >= train.len() {
        return Err(Error::Data(format!(
            "k = {k} must be in 1..{} (training set size)",
            train.len()
        )));
    }
    let label_of = |i: usize| -> Result<usize> {
        data.labels[i].ok_or_else(|| {
            Error::Data(format!("point {} ({}) has no label", i, data.ids[i]))
        })
    };
    let n_classes = data
        .labels
        .iter()
        .flatten()
        .copied()
        .max()
        .map_or(0, |m| m + 1)
        .max(2);
    let mut scores = Array2::<f64>::zeros((test.len(), n_classes));
    for (row, &t) in test.iter().enumerate() {
        let q: Vec<f64> = data.points.row(t).to_vec();
        for nb in k_nearest(&data.points, train, &q, k) {
            scores[[row, label_of(nb)?]] += 1.0 / k as f64;
        }
    }
    let test_labels = test.iter().map(|&t| label_of(t)).collect::<Result<Vec<_>>>()?;
    auroc(&scores, &test_labels)
}

/// Precision of the k most activated evidence positions against a lesion
/// mask: a position counts iff any lesion pixel lies inside its
/// receptive-field rectangle. Ties in activation break in row-major
/// order.
pub fn patch_precision_at_k(
    evidence: ArrayView2<'_, f64>,
    geometry: &PatchGeometry,
    image_hw: (usize, usize),
    mask: &ndarray::Array2<bool>,
    k: usize,
) -> Result<f64> {
    let (h, w) = evidence.dim();
    if k == 0 || k > h * w {
        return Err(Error::Data(format!(
            "k = {k} must be in 1..={} (evidence positions)",
            h * w
        )));
    }
    if mask.dim() != image_hw {
        return Err(crate::error::shape_error(
            [image_hw.0, image_hw.1],
            mask.shape(),
        ));
    }
    let mut order: Vec<usize> = (0..h * w).collect();
    // Stable sort keeps row-major order among equal activations.
    order.sort_by(|&a, &b| {
        evidence[[b / w, b % w]]
            .partial_cmp(&evidence[[a / w, a % w]])
            .unwrap()
    });
    let mut tp = 0;
    for &pos in &order[..k] {
        let (i, j) = (pos / w, pos % w);
        let (r0, c0, r1, c1) = geometry.rect(i, j, image_hw.0, image_hw.1);
        let hit = (r0..r1).any(|r| (c0..c1).any(|c| mask[[r, c]]));
        if hit {
            tp += 1;
        }
    }
    Ok(tp as f64 / k as f64)
}

/// Elastic-net multinomial logistic probe settings.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// L1/L2 mix; 1.0 is pure lasso.
    pub alpha: f64,
    /// Regularization strength grid, selected on validation AUROC.
    pub strengths: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            alpha: 0.5,
            strengths: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "probe alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.strengths.is_empty() {
            return Err(Error::Config("probe strength grid is empty".into()));
        }
        if self.strengths.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::Config("probe strengths must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Row index sets for probe fitting; the caller guarantees the three
/// parts are participant-disjoint.
#[derive(Debug, Clone)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub test_auroc: f64,
    pub val_auroc: f64,
    pub chosen_strength: f64,
}

struct ProbeModel {
    /// (classes, features + 1); last column is the unpenalized bias.
    w: Array2<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl ProbeModel {
    fn scores(&self, x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let d = x.ncols();
        let c = self.w.nrows();
        let mut out = Array2::<f64>::zeros((rows.len(), c));
        for (r, &i) in rows.iter().enumerate() {
            let xi = x.row(i);
            for cl in 0..c {
                let mut z = self.w[[cl, d]];
                for j in 0..d {
                    z += self.w[[cl, j]] * (xi[j] - self.mean[j]) / self.std[j];
                }
                out[[r, cl]] = z;
            }
            // Softmax per row: probabilities are the conventional score.
            let mx = out.row(r).fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut s = 0.0;
            for cl in 0..c {
                out[[r, cl]] = (out[[r, cl]] - mx).exp();
                s += out[[r, cl]];
            }
            for cl in 0..c {
                out[[r, cl]] /= s;
            }
        }
        out
    }
}

/// Weighted multinomial objective value and gradient at `w` (smooth part:
/// cross-entropy plus the L2 half of the elastic net).
fn probe_smooth(
    w: &Array2<f64>,
    x: &Array2<f64>,
    y: &[usize],
    sample_w: &[f64],
    l2: f64,
) -> (f64, Array2<f64>) {
    let (n, d) = x.dim();
    let c = w.nrows();
    let wsum: f64 = sample_w.iter().sum();
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(w.raw_dim());
    for i in 0..n {
        let xi = x.row(i);
        let mut z = vec![0.0; c];
        for cl in 0..c {
            z[cl] = w[[cl, d]];
            for j in 0..d {
                z[cl] += w[[cl, j]] * xi[j];
            }
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in z.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        let sw = sample_w[i] / wsum;
        loss -= sw * (z[y[i]] / denom).ln();
        for cl in 0..c {
            let p = z[cl] / denom;
            let target = if cl == y[i] { 1.0 } else { 0.0 };
            let coeff = sw * (p - target);
            for j in 0..d {
                grad[[cl, j]] += coeff * xi[j];
            }
            grad[[cl, d]] += coeff;
        }
    }
    if l2 > 0.0 {
        for cl in 0..c {
            for j in 0..d {
                loss += 0.5 * l2 * w[[cl, j]] * w[[cl, j]];
                grad[[cl, j]] += l2 * w[[cl, j]];
            }
        }
    }
    (loss, grad)
}

fn soft_threshold(w: &mut Array2<f64>, thresh: f64) {
    if thresh <= 0.0 {
        return;
    }
    let d = w.ncols() - 1; // bias column exempt
    for mut row in w.rows_mut() {
        for j in 0..d {
            let v = row[j];
            row[j] = if v > thresh {
                v - thresh
            } else if v < -thresh {
                v + thresh
            } else {
                0.0
            };
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_probe(
    x: &Array2<f64>,
    y: &[usize],
    sample_w: &[f64],
    n_classes: usize,
    strength: f64,
    alpha: f64,
    max_iter: usize,
    tol: f64,
) -> Array2<f64> {
    let d = x.ncols();
    let l1 = alpha * strength;
    let l2 = (1.0 - alpha) * strength;
    let mut w = Array2::<f64>::zeros((n_classes, d + 1));
    let mut v = w.clone();
    let mut theta = 1.0f64;
    let mut step = 1.0f64;
    let (mut f_prev, _) = probe_smooth(&w, x, y, sample_w, l2);
    for _ in 0..max_iter {
        let (fv, gv) = probe_smooth(&v, x, y, sample_w, l2);
        // Backtracking line search on the FISTA majorizer.
        let mut w_next;
        loop {
            w_next = &v - &gv.mapv(|g| g * step);
            soft_threshold(&mut w_next, step * l1);
            let (f_next, _) = probe_smooth(&w_next, x, y, sample_w, l2);
            let diff = &w_next - &v;
            let quad = fv
                + gv.iter().zip(diff.iter()).map(|(a, b)| a * b).sum::<f64>()
                + diff.iter().map(|a| a * a).sum::<f64>() / (2.0 * step);
            if f_next <= quad + 1e-12 || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        let momentum = (theta - 1.0) / theta_next;
        v = &w_next + &(&w_next - &w).mapv(|d| d * momentum);
        let (f_now, _) = probe_smooth(&w_next, x, y, sample_w, l2);
        w = w_next;
        theta = theta_next;
        if (f_prev - f_now).abs() <= tol * f_now.abs().max(1.0) {
            break;
        }
        f_prev = f_now;
    }
    w
}

/// Per-class balanced weights `total / (classes * count)`.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "class {empty} has no samples; balanced weights undefined"
        )));
    }
    let total = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| total / (n_classes as f64 * c as f64))
        .collect())
}

/// Fit the elastic-net probe on standardized training features, select a
/// strength on the validation part, report test AUROC.
pub fn linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    split: &ProbeSplit,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Data("features/labels length mismatch".into()));
    }
    for part in [&split.train, &split.val, &split.test] {
        if part.is_empty() {
            return Err(Error::Data("probe split has an empty part".into()));
        }
        if let Some(&bad) = part.iter().find(|&&i| i >= features.nrows()) {
            return Err(Error::Data(format!("probe split index {bad} out of range")));
        }
    }
    let d = features.ncols();
    let n_classes = labels.iter().copied().max().unwrap() + 1;

    // Standardize with training statistics.
    let mut mean = Array1::<f64>::zeros(d);
    let mut std = Array1::<f64>::zeros(d);
    for j in 0..d {
        let vals: Vec<f64> = split.train.iter().map(|&i| features[[i, j]]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        mean[j] = m;
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let mut x_train = Array2::<f64>::zeros((split.train.len(), d));
    let mut y_train = Vec::with_capacity(split.train.len());
    for (r, &i) in split.train.iter().enumerate() {
        for j in 0..d {
            x_train[[r, j]] = (features[[i, j]] - mean[j]) / std[j];
        }
        y_train.push(labels[i]);
    }
    let per_class = class_weights(&y_train, n_classes)?;
    let sample_w: Vec<f64> = y_train.iter().map(|&l| per_class[l]).collect();

    let mut best: Option<(f64, f64, ProbeModel)> = None;
    for &s in &cfg.strengths {
        let w = fit_probe(
            &x_train, &y_train, &sample_w, n_classes, s, cfg.alpha, cfg.max_iter, cfg.tol,
        );
        let model = ProbeModel {
            w,
            mean: mean.clone(),
            std: std.clone(),
        };
        let val_scores = model.scores(features, &split.val);
        let val_labels: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
        let val = auroc(&val_scores, &val_labels)?;
        let better = match &best {
            None => true,
            Some((bv, _, _)) => val > *bv,
        };
        if better {
            best = Some((val, s, model));
        }
    }
    let (val_auroc, chosen_strength, model) = best.unwrap();
    let test_scores = model.scores(features, &split.test);
    let test_labels: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    Ok(ProbeOutcome {
        test_auroc: auroc(&test_scores, &test_labels)?,
        val_auroc,
        chosen_strength,
    })
}

/// Embed every record through the frozen encoder and projector at
/// whatever dimension the projector has. A pure map: no statistics are
/// fitted, so previously embedded points never move when the dataset
/// grows.
pub fn embed_features(model: &SslModel, manifest: &DatasetManifest) -> Result<EmbeddingDataset> {
    let n = manifest.len();
    if n == 0 {
        return Err(Error::Data("nothing to embed: dataset is empty".into()));
    }
    let d = model.projector.out_dim();
    let mut points = Array2::<f64>::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    const CHUNK: usize = 64;
    for (ci, chunk) in manifest.records.chunks(CHUNK).enumerate() {
        let first = chunk[0].pixels()?;
        let (h, w, _) = first.dim();
        let mut x = Array4::<f64>::zeros((chunk.len(), 3, h, w));
        for (k, rec) in chunk.iter().enumerate() {
            let p = rec.pixels()?;
            if p.dim() != (h, w, 3) {
                return Err(Error::Data(format!(
                    "record {} has size {:?}, expected {:?}",
                    rec.id,
                    p.dim(),
                    (h, w, 3)
                )));
            }
            for i in 0..h {
                for j in 0..w {
                    for c in 0..3 {
                        x[[k, c, i, j]] = p[[i, j, c]];
                    }
                }
            }
        }
        let z = model.embed_eval(&x)?;
        for (kk, rec) in chunk.iter().enumerate() {
            let row = ci * CHUNK + kk;
            for col in 0..d {
                points[[row, col]] = z[[kk, col]];
            }
            ids.push(rec.id.clone());
            labels.push(rec.label);
        }
    }
    Ok(EmbeddingDataset { ids, points, labels })
}

/// The 2-D interpretable map of a dataset. Requires the annealed
/// projector; a 128-D checkpoint is rejected with instructions.
pub fn embed_dataset(model: &SslModel, manifest: &DatasetManifest) -> Result<EmbeddingDataset> {
    if model.projector.out_dim() != 2 {
        return Err(Error::Data(format!(
            "projector is {}-D; anneal to 2-D (pretraining stages 2-3) before embedding",
            model.projector.out_dim()
        )));
    }
    embed_features(model, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_col(scores: &[f64]) -> Array2<f64> {
        let n = scores.len();
        let mut m = Array2::<f64>::zeros((n, 2));
        for (i, &s) in scores.iter().enumerate() {
            m[[i, 0]] = -s;
            m[[i, 1]] = s;
        }
        m
    }

    /// Exhaustive pairwise oracle with ties counted one half.
    fn pairwise_auroc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_ranking_gives_one() {
        let scores = [0.1, 0.2, 0.35, 0.8, 0.9];
        let labels = [0, 0, 0, 1, 1];
        let a = auroc(&two_col(&scores), &labels).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_give_half() {
        let scores = [0.4; 6];
        let labels = [0, 1, 0, 1, 1, 0];
        let a = auroc(&two_col(&scores), &labels).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn six_point_toy_matches_pairwise_oracle() {
        let scores = [0.3, 0.3, 0.9, 0.1, 0.5, 0.7];
        let labels = [0, 1, 1, 0, 0, 1];
        let a = auroc(&two_col(&scores), &labels).unwrap();
        let want = pairwise_auroc(&scores, &labels);
        assert!((a - want).abs() < 1e-12, "{a} vs {want}");
    }

    #[test]
    fn single_class_is_error() {
        let scores = two_col(&[0.1, 0.2, 0.3]);
        assert!(auroc(&scores, &[1, 1, 1]).is_err());
    }

    #[test]
    fn multiclass_macro_matches_manual_average() {
        let scores = array![
            [0.8, 0.1, 0.1],
            [0.2, 0.6, 0.2],
            [0.1, 0.2, 0.7],
            [0.5, 0.3, 0.2],
            [0.2, 0.5, 0.3],
            [0.3, 0.3, 0.4],
        ];
        let labels = [0usize, 1, 2, 0, 1, 2];
        let got = auroc(&scores, &labels).unwrap();
        let mut want = 0.0;
        for c in 0..3 {
            let col: Vec<f64> = scores.column(c).to_vec();
            let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
            want += pairwise_auroc(&col, &bin);
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn auroc_matches_pairwise_oracle_on_small_instances(
            n in 2usize..=12,
            seed in 0u64..1_000_000,
        ) {
            let mut rng = crate::seeds::rng_for(seed, &[41]);
            // Coarse grid of scores so ties actually occur.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1; // both classes present
            let got = auroc(&two_col(&scores), &labels).unwrap();
            let want = pairwise_auroc(&scores, &labels);
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_k1_matches_hand_enumeration() {
        let data = EmbeddingDataset {
            ids: (0..3).map(|i| format!("p{i}")).collect(),
            points: array![[0.0, 0.0], [1.0, 0.0], [0.4, 0.0]],
            labels: vec![Some(0), Some(1), Some(0)],
        };
        // Test point 2 is nearest to train point 0 (label 0).
        let a = knn_auroc(&data, 1, &[0, 1], &[2, 1]).unwrap();
        // One test point per class; scores [1,0] for idx2(label0), [0,1] for idx1.
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn knn_distance_ties_break_by_index() {
        let data = EmbeddingDataset {
            ids: (0..4).map(|i| format!("p{i}")).collect(),
            points: array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
            labels: vec![Some(0), Some(1), Some(1), Some(0)],
        };
        // Query 3 is equidistant from 0 and 1; k=1 must pick index 0.
        let nbrs = k_nearest(&data.points, &[0, 1, 2], &data.points.row(3).to_vec(), 1);
        assert_eq!(nbrs, vec![0]);
    }

    #[test]
    fn knn_k_too_large_is_error() {
        let data = EmbeddingDataset {
            ids: vec!["a".into(), "b".into()],
            points: array![[0.0, 0.0], [1.0, 1.0]],
            labels: vec![Some(0), Some(1)],
        };
        assert!(knn_auroc(&data, 2, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn knn_separated_blobs_score_high() {
        let mut rng = crate::seeds::rng_for(5, &[9]);
        let n = 120;
        let mut points = Array2::<f64>::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let cx = if class == 0 { -3.0 } else { 3.0 };
            points[[i, 0]] = cx + crate::seeds::normal(&mut rng) * 0.5;
            points[[i, 1]] = crate::seeds::normal(&mut rng) * 0.5;
            labels.push(Some(class));
        }
        let data = EmbeddingDataset {
            ids: (0..n).map(|i| i.to_string()).collect(),
            points,
            labels,
        };
        let train: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let a = knn_auroc(&data, 15, &train, &test).unwrap();
        assert!(a >= 0.99, "blob AUROC {a}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn neighbor_selection_matches_full_sort(
            n in 20usize..200,
            k in 1usize..15,
            seed in 0u64..100_000,
        ) {
            let mut rng = crate::seeds::rng_for(seed, &[42]);
            let mut points = Array2::<f64>::zeros((n, 2));
            for i in 0..n {
                // Quantized coordinates force distance ties.
                points[[i, 0]] = rng.gen_range(0..6) as f64;
                points[[i, 1]] = rng.gen_range(0..6) as f64;
            }
            let train: Vec<usize> = (1..n).collect();
            prop_assume!(k < train.len());
            let q: Vec<f64> = points.row(0).to_vec();
            let got = k_nearest(&points, &train, &q, k);
            let mut all: Vec<(f64, usize)> = train
                .iter()
                .map(|&t| {
                    let d: f64 = points
                        .row(t)
                        .iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, t)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..k].iter().map(|&(_, t)| t).collect();
            prop_assert_eq!(got, want);
        }
    }

    fn geom9() -> PatchGeometry {
        PatchGeometry {
            receptive_field: 9,
            stride: 8,
            center0: 0,
        }
    }

    #[test]
    fn full_mask_gives_precision_one_and_empty_mask_zero() {
        let ev = Array2::<f64>::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let full = ndarray::Array2::from_elem((32, 32), true);
        let empty = ndarray::Array2::from_elem((32, 32), false);
        for k in [1, 5, 16] {
            let p = patch_precision_at_k(ev.view(), &geom9(), (32, 32), &full, k).unwrap();
            assert_eq!(p, 1.0);
            let p = patch_precision_at_k(ev.view(), &geom9(), (32, 32), &empty, k).unwrap();
            assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn delta_evidence_at_planted_blob_hits_at_k1() {
        // Lesion pixel at (17, 17) sits in the receptive field of patch
        // (2, 2) (centers at 16, rf 9 spans 12..21).
        let mut mask = ndarray::Array2::from_elem((32, 32), false);
        mask[[17, 17]] = true;
        let mut ev = Array2::<f64>::zeros((4, 4));
        ev[[2, 2]] = 5.0;
        let p = patch_precision_at_k(ev.view(), &geom9(), (32, 32), &mask, 1).unwrap();
        assert_eq!(p, 1.0);
        // k=2 adds a non-hitting patch (ties at 0 resolve row-major: (0,0)).
        let p2 = patch_precision_at_k(ev.view(), &geom9(), (32, 32), &mask, 2).unwrap();
        assert_eq!(p2, 0.5);
    }

    #[test]
    fn precision_monotone_when_hits_rank_first() {
        // All hitting patches rank above all misses: precision@k is
        // non-increasing in k. Rows/cols < 12 touch only the receptive
        // fields of the four top-left patches (centers 0 and 8, rf 9).
        let mut mask = ndarray::Array2::from_elem((32, 32), false);
        for r in 0..12 {
            for c in 0..12 {
                mask[[r, c]] = true;
            }
        }
        let mut ev = Array2::<f64>::zeros((4, 4));
        for i in 0..2 {
            for j in 0..2 {
                ev[[i, j]] = 10.0 - (i * 2 + j) as f64;
            }
        }
        let mut prev = f64::INFINITY;
        for k in 1..=16 {
            let p = patch_precision_at_k(ev.view(), &geom9(), (32, 32), &mask, k).unwrap();
            assert!(p <= prev + 1e-12, "k={k}: {p} > {prev}");
            prev = p;
        }
    }

    #[test]
    fn class_weights_match_balanced_formula() {
        let labels: Vec<usize> = std::iter::repeat(0)
            .take(90)
            .chain(std::iter::repeat(1).take(10))
            .collect();
        let w = class_weights(&labels, 2).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-12);
        assert!((w[1] - 5.0).abs() < 1e-12);
        let balanced = class_weights(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(balanced, vec![1.0, 1.0]);
        assert!(class_weights(&[0, 0], 2).is_err());
    }

    fn toy_probe_data() -> (Array2<f64>, Vec<usize>, ProbeSplit) {
        let mut rng = crate::seeds::rng_for(2, &[13]);
        let n = 90;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Vec::new();
        for i in 0..n {
            let class = i % 2;
            x[[i, 0]] = if class == 0 { -2.0 } else { 2.0 } + crate::seeds::normal(&mut rng) * 0.3;
            x[[i, 1]] = crate::seeds::normal(&mut rng);
            y.push(class);
        }
        let split = ProbeSplit {
            train: (0..n).filter(|i| i % 3 == 0).collect(),
            val: (0..n).filter(|i| i % 3 == 1).collect(),
            test: (0..n).filter(|i| i % 3 == 2).collect(),
        };
        (x, y, split)
    }

    #[test]
    fn separable_features_probe_to_auroc_one() {
        let (x, y, split) = toy_probe_data();
        let out = linear_probe(&x, &y, &split, &ProbeConfig::default()).unwrap();
        assert!(
            (out.test_auroc - 1.0).abs() < 1e-9,
            "test AUROC {}",
            out.test_auroc
        );
    }

    #[test]
    fn infinite_strength_shrinks_to_half() {
        let (x, y, split) = toy_probe_data();
        let cfg = ProbeConfig {
            strengths: vec![1e9],
            ..ProbeConfig::default()
        };
        let out = linear_probe(&x, &y, &split, &cfg).unwrap();
        assert!((out.test_auroc - 0.5).abs() < 1e-9, "{}", out.test_auroc);
    }

    #[test]
    fn shuffled_labels_probe_near_half() {
        let (x, y, split) = toy_probe_data();
        let cfg = ProbeConfig {
            strengths: vec![1e-2, 1.0],
            max_iter: 150,
            ..ProbeConfig::default()
        };
        let mut sum = 0.0;
        let runs = 20;
        for s in 0..runs {
            let mut rng = crate::seeds::rng_for(s, &[77]);
            let mut perm = y.clone();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            // Skip degenerate shuffles that empty a split of one class.
            match linear_probe(&x, &perm, &split, &cfg) {
                Ok(out) => sum += out.test_auroc,
                Err(_) => sum += 0.5,
            }
        }
        let mean = sum / runs as f64;
        assert!((mean - 0.5).abs() < 0.1, "permutation mean {mean}");
    }
}
