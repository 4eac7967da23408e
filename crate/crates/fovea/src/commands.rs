//! The operations behind the command-line interface, as plain library
//! functions. The binary is a thin argument parser over these, so a
//! script calling the CLI and a program calling this module produce
//! identical numbers and identical files.

use std::path::{Path, PathBuf};

use crate::classifier::{
    classifier_from_checkpoint, finetune, holdout_validation, mean_precision_at_k,
    sparsity_sweep, FinetuneReport, SweepReport,
};
use crate::config::Config;
use crate::data::{
    default_lesions, generate_synthetic_dataset, load_manifest, save_manifest,
    stratified_participant_split, DatasetManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{
    auroc, embed_dataset, embed_features, knn_auroc, linear_probe, EmbeddingDataset,
    ProbeOutcome, ProbeSplit,
};
use crate::plot::{evidence_overlay, scatter_plot};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::{model_from_checkpoint, pretrain, resume};

/// A dataset directory as written by `generate`: images plus
/// `labels.csv`.
pub fn load_data_dir(dir: &Path) -> Result<DatasetManifest> {
    load_manifest(dir, &dir.join("labels.csv"))
}

/// One metric row of `dataset,metric,value` output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
}

fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(["dataset", "metric", "value"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        writer
            .write_record([r.dataset.as_str(), r.metric.as_str(), &format!("{:.6}", r.value)])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Synthesize a dataset into `out_dir` (images, masks, labels.csv) and
/// record the resolved configuration beside it. An empty
/// `data.lesions_per_grade` picks the built-in progression for the
/// requested class count; the recorded config holds the resolved list.
pub fn cmd_generate(cfg: &Config, out_dir: &Path) -> Result<DatasetManifest> {
    let n_classes = cfg.usize("data.n_classes")?;
    let mut lesions = cfg.usize_list("data.lesions_per_grade")?;
    let mut cfg = cfg.clone();
    if lesions.is_empty() {
        lesions = default_lesions(n_classes);
        let rendered: Vec<String> = lesions.iter().map(|n| n.to_string()).collect();
        cfg.set(
            "data.lesions_per_grade",
            &format!("[{}]", rendered.join(", ")),
        )?;
    }
    let data = generate_synthetic_dataset(
        cfg.usize("data.n_images")?,
        n_classes,
        cfg.usize("data.image_size")?,
        &lesions,
        cfg.seed()?,
    )?;
    save_manifest(&data, out_dir)?;
    cfg.write_resolved(out_dir)?;
    Ok(data)
}

/// Run (or resume) the three pretraining stages; returns the stage-3
/// final checkpoint.
pub fn cmd_pretrain(
    cfg: &Config,
    data_dir: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<Checkpoint> {
    let pt = cfg.pretrain_config()?;
    let manifest = load_data_dir(data_dir)?;
    cfg.write_resolved(out_dir)?;
    match resume_from {
        None => pretrain(&manifest, &pt, out_dir),
        Some(ck) => resume(ck, &manifest, &pt, out_dir),
    }
}

/// Cross-validated fine-tuning of an evidence head on a pretraining
/// checkpoint.
pub fn cmd_finetune(
    cfg: &Config,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<FinetuneReport> {
    let ft = cfg.finetune_config()?;
    let manifest = load_data_dir(data_dir)?;
    let pre = Checkpoint::load(checkpoint)?;
    let split = stratified_participant_split(&manifest, ft.folds, cfg.seed()?)?;
    cfg.write_resolved(out_dir)?;
    finetune(&pre, &manifest, &split, &ft, out_dir)
}

/// Sweep the evidence sparsity penalty.
pub fn cmd_sweep(
    cfg: &Config,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<SweepReport> {
    let ft = cfg.finetune_config()?;
    let lambdas = cfg.f64_list("sweep.lambdas")?;
    let tolerance = cfg.f64("sweep.tolerance")?;
    let fold_cap = match cfg.usize("sweep.fold_cap")? {
        0 => None,
        n => Some(n),
    };
    let k = cfg.usize("eval.precision_k")?;
    let manifest = load_data_dir(data_dir)?;
    let pre = Checkpoint::load(checkpoint)?;
    let split = stratified_participant_split(&manifest, ft.folds, cfg.seed()?)?;
    cfg.write_resolved(out_dir)?;
    sparsity_sweep(
        &pre, &manifest, &split, &ft, &lambdas, k, tolerance, fold_cap, out_dir,
    )
}

fn labeled_indices(data: &EmbeddingDataset, idx: &[usize]) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| data.labels[i].is_some())
        .collect()
}

/// Elastic-net probe of the embeddings under a participant-disjoint
/// train/validation/test split (fold 0 of the configured split is the
/// test part).
pub fn cmd_probe(
    cfg: &Config,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<(ProbeOutcome, Vec<MetricRow>)> {
    let probe_cfg = cfg.probe_config()?;
    let folds = cfg.usize("split.folds")?;
    let manifest = load_data_dir(data_dir)?;
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let embedded = embed_features(&model, &manifest)?;

    let split = stratified_participant_split(&manifest, folds, cfg.seed()?)?;
    let test = split.test_indices(&manifest, 0);
    let pool = split.train_indices(&manifest, 0);
    let (train, val) = holdout_validation(
        &manifest,
        &pool,
        cfg.f64("finetune.val_fraction")?,
        cfg.seed()?,
        0,
    );
    let probe_split = ProbeSplit {
        train: labeled_indices(&embedded, &train),
        val: labeled_indices(&embedded, &val),
        test: labeled_indices(&embedded, &test),
    };
    let labels: Vec<usize> = embedded
        .labels
        .iter()
        .map(|l| l.unwrap_or(usize::MAX))
        .collect();
    let outcome = linear_probe(&embedded.points, &labels, &probe_split, &probe_cfg)?;

    let rows = vec![
        MetricRow {
            dataset: manifest.name.clone(),
            metric: "probe_auroc".into(),
            value: outcome.test_auroc,
        },
        MetricRow {
            dataset: manifest.name.clone(),
            metric: "probe_strength".into(),
            value: outcome.chosen_strength,
        },
    ];
    cfg.write_resolved(out_dir)?;
    write_metrics(&rows, &out_dir.join("metrics.csv"))?;
    Ok((outcome, rows))
}

/// One measure selectable via `eval --metric`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvalMetric {
    Auroc,
    KnnAuroc,
    Precision,
}

fn parse_metric(m: &str) -> Result<EvalMetric> {
    match m.trim().to_ascii_lowercase().replace('-', "_").as_str() {
        "auroc" => Ok(EvalMetric::Auroc),
        "knn_auroc" => Ok(EvalMetric::KnnAuroc),
        "precision" | "precision_at_k" => Ok(EvalMetric::Precision),
        other => Err(Error::Config(format!(
            "unknown metric {other:?}; expected auroc, knn-auroc or precision"
        ))),
    }
}

/// Score a checkpoint against a dataset. Pretraining checkpoints get a
/// k-nearest-neighbor AUROC on their embeddings; fine-tuned classifiers
/// get AUROC plus lesion precision of their evidence maps. `metric`
/// restricts the output to one measure ("auroc", "knn-auroc" or
/// "precision").
pub fn cmd_eval(
    cfg: &Config,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    metric: Option<&str>,
) -> Result<Vec<MetricRow>> {
    let want = metric.map(parse_metric).transpose()?;
    let manifest = load_data_dir(data_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    let name = manifest.name.clone();
    let mut rows = Vec::new();

    if ck.meta.n_classes.is_some() {
        if want == Some(EvalMetric::KnnAuroc) {
            return Err(Error::Config(
                "knn-auroc scores a pretraining checkpoint's embedding; \
                 this checkpoint is a fine-tuned classifier"
                    .into(),
            ));
        }
        let model = classifier_from_checkpoint(&ck)?;
        let idx: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.records[i].label.is_some())
            .collect();
        if idx.is_empty() {
            return Err(Error::Data("no labeled images to evaluate".into()));
        }
        if want != Some(EvalMetric::Precision) {
            let scores = crate::classifier::predict_proba(&model, &manifest, &idx)?;
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| manifest.records[i].label.unwrap())
                .collect();
            rows.push(MetricRow {
                dataset: name.clone(),
                metric: "auroc".into(),
                value: auroc(&scores, &labels)?,
            });
        }
        if want != Some(EvalMetric::Auroc) {
            let k = cfg.usize("eval.precision_k")?;
            match mean_precision_at_k(&model, &manifest, &idx, k)? {
                Some(p) => rows.push(MetricRow {
                    dataset: name.clone(),
                    metric: format!("precision_at_{k}"),
                    value: p,
                }),
                None if want == Some(EvalMetric::Precision) => {
                    return Err(Error::Data(
                        "no labeled image has a lesion mask; precision@k is undefined".into(),
                    ))
                }
                None => {}
            }
        }
    } else {
        if matches!(want, Some(EvalMetric::Auroc) | Some(EvalMetric::Precision)) {
            return Err(Error::Config(
                "this pretraining checkpoint has no classifier head; only knn-auroc applies"
                    .into(),
            ));
        }
        let model = model_from_checkpoint(&ck)?;
        let embedded = embed_features(&model, &manifest)?;
        let folds = cfg.usize("split.folds")?;
        let split = stratified_participant_split(&manifest, folds, cfg.seed()?)?;
        let train = labeled_indices(&embedded, &split.train_indices(&manifest, 0));
        let test = labeled_indices(&embedded, &split.test_indices(&manifest, 0));
        let k = cfg.usize("eval.knn_k")?;
        rows.push(MetricRow {
            dataset: name.clone(),
            metric: format!("knn{k}_auroc"),
            value: knn_auroc(&embedded, k, &train, &test)?,
        });
    }

    cfg.write_resolved(out_dir)?;
    write_metrics(&rows, &out_dir.join("metrics.csv"))?;
    Ok(rows)
}

/// Write the 2-D embedding of a dataset as `id,x,y,label`.
pub fn cmd_embed(
    cfg: &Config,
    data_dir: &Path,
    checkpoint: &Path,
    out_csv: &Path,
) -> Result<EmbeddingDataset> {
    let _ = cfg.seed()?; // configuration is validated even though the map is pure
    let manifest = load_data_dir(data_dir)?;
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let embedded = embed_dataset(&model, &manifest)?;
    if let Some(dir) = out_csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(out_csv)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", out_csv.display())))?;
    writer
        .write_record(["id", "x", "y", "label"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for i in 0..embedded.ids.len() {
        let label = embedded.labels[i].map(|l| l.to_string()).unwrap_or_default();
        writer
            .write_record([
                embedded.ids[i].as_str(),
                &format!("{:.9}", embedded.points[[i, 0]]),
                &format!("{:.9}", embedded.points[[i, 1]]),
                &label,
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(embedded)
}

/// Read an `id,x,y,label` file back into an embedding.
pub fn read_embedding_csv(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers != ["id", "x", "y", "label"] {
        return Err(Error::Data(format!(
            "embedding file header must be id,x,y,label; got {}",
            headers.join(",")
        )));
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("bad row in {}: {e}", path.display())))?;
        ids.push(row.get(0).unwrap_or("").to_string());
        for col in [1, 2] {
            let v: f64 = row
                .get(col)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad coordinate in {}", path.display())))?;
            coords.push(v);
        }
        labels.push(match row.get(3).unwrap_or("").trim() {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| {
                Error::Data(format!("bad label {s:?} in {}", path.display()))
            })?),
        });
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{} contains no points", path.display())));
    }
    let points = ndarray::Array2::from_shape_vec((ids.len(), 2), coords)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(EmbeddingDataset { ids, points, labels })
}

/// Scatter plot of a stored embedding.
pub fn cmd_plot_scatter(embeddings_csv: &Path, out_png: &Path) -> Result<()> {
    let data = read_embedding_csv(embeddings_csv)?;
    scatter_plot(&data, out_png)
}

/// Evidence overlay of one image under a fine-tuned classifier. `class`
/// defaults to the record's own label.
pub fn cmd_plot_evidence(
    data_dir: &Path,
    checkpoint: &Path,
    image_id: &str,
    class: Option<usize>,
    out_png: &Path,
) -> Result<PathBuf> {
    let manifest = load_data_dir(data_dir)?;
    let rec = manifest
        .records
        .iter()
        .find(|r| r.id == image_id)
        .ok_or_else(|| Error::Data(format!("no record with id {image_id}")))?;
    let model = classifier_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let class = match class.or(rec.label) {
        Some(c) if c < model.n_classes() => c,
        Some(c) => {
            return Err(Error::Config(format!(
                "class {c} out of range for {} classes",
                model.n_classes()
            )))
        }
        None => {
            return Err(Error::Config(format!(
                "record {image_id} is unlabeled; pass an explicit class"
            )))
        }
    };
    let pixels = rec.pixels()?;
    let (h, w, _) = pixels.dim();
    let mut x = ndarray::Array4::<f64>::zeros((1, 3, h, w));
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                x[[0, c, i, j]] = pixels[[i, j, c]];
            }
        }
    }
    let (maps, _) = model.forward_with_evidence(&x)?;
    evidence_overlay(pixels, &maps, 0, class, rec.lesion_mask()?, out_png)?;
    Ok(out_png.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(extra: &[&str]) -> Config {
        let mut overrides: Vec<String> = vec![
            "data.n_images=48",
            "data.n_classes=2",
            "data.image_size=36",
            "data.lesions_per_grade=[0, 4]",
            "encoder.stem_channels=4",
            "encoder.stage_channels=[4, 6, 8, 8]",
            "projector.hidden_dims=[16]",
            "pretrain.batch_size=16",
            "pretrain.base_lr=0.05",
            "pretrain.out_size=36",
            "pretrain.warmup_epochs=1",
            "stage1.epochs=2",
            "stage2.epochs=1",
            "stage3.epochs=1",
            "finetune.head_lr=0.005",
            "finetune.encoder_lr=0.0005",
            "finetune.head_only_epochs=1",
            "finetune.max_epochs=2",
            "finetune.batch_size=16",
            "split.folds=3",
            "seed=21",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        overrides.extend(extra.iter().map(|s| s.to_string()));
        Config::resolve(None, &overrides).unwrap()
    }

    #[test]
    fn generate_writes_a_loadable_dataset_with_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&[]);
        let data = cmd_generate(&cfg, dir.path()).unwrap();
        assert_eq!(data.len(), 48);
        assert!(dir.path().join("labels.csv").is_file());
        assert!(dir.path().join("config.toml").is_file());
        let back = load_data_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 48);
        assert_eq!(back.n_classes, 2);
    }

    #[test]
    fn pipeline_runs_end_to_end_through_the_command_layer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&[]);
        let data_dir = dir.path().join("data");
        cmd_generate(&cfg, &data_dir).unwrap();

        let pre_dir = dir.path().join("pretrain");
        let ck = cmd_pretrain(&cfg, &data_dir, &pre_dir, None).unwrap();
        assert_eq!(ck.meta.stage_id, 3);
        let ck_path = crate::trainer::final_ckpt_path(&pre_dir, 3);
        assert!(ck_path.is_file());

        // Embedding requires the annealed 2-D head and writes id,x,y,label.
        let emb_csv = dir.path().join("emb.csv");
        let embedded = cmd_embed(&cfg, &data_dir, &ck_path, &emb_csv).unwrap();
        assert_eq!(embedded.points.ncols(), 2);
        let text = std::fs::read_to_string(&emb_csv).unwrap();
        assert!(text.starts_with("id,x,y,label\n"));
        assert_eq!(text.lines().count(), 49);

        // A 128-D checkpoint is refused with advice to anneal.
        let stage1 = crate::trainer::final_ckpt_path(&pre_dir, 1);
        let err = cmd_embed(&cfg, &data_dir, &stage1, &emb_csv).unwrap_err();
        assert!(err.to_string().contains("anneal"), "{err}");

        // Scatter from the stored embedding.
        let png = dir.path().join("map.png");
        cmd_plot_scatter(&emb_csv, &png).unwrap();
        assert!(png.is_file());

        // kNN eval on the pretraining checkpoint.
        let eval_dir = dir.path().join("eval");
        let rows = cmd_eval(&cfg, &data_dir, &ck_path, &eval_dir, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].metric.starts_with("knn"));
        assert!(eval_dir.join("metrics.csv").is_file());
        let err =
            cmd_eval(&cfg, &data_dir, &ck_path, &eval_dir, Some("auroc")).unwrap_err();
        assert!(err.to_string().contains("knn-auroc"), "{err}");

        // Probe the embeddings.
        let probe_dir = dir.path().join("probe");
        let (outcome, rows) = cmd_probe(&cfg, &data_dir, &ck_path, &probe_dir).unwrap();
        assert!((0.0..=1.0).contains(&outcome.test_auroc));
        assert_eq!(rows[0].metric, "probe_auroc");

        // Fine-tune, then classifier eval and an evidence overlay.
        let ft_dir = dir.path().join("ft");
        let report = cmd_finetune(&cfg, &data_dir, &ck_path, &ft_dir).unwrap();
        assert_eq!(report.folds.len(), 3);
        let best = &report.folds[0].checkpoint;
        let eval2 = dir.path().join("eval2");
        let rows = cmd_eval(&cfg, &data_dir, best, &eval2, None).unwrap();
        assert!(rows.iter().any(|r| r.metric == "auroc"));
        assert!(rows.iter().any(|r| r.metric.starts_with("precision_at_")));
        let only = cmd_eval(&cfg, &data_dir, best, &eval2, Some("precision")).unwrap();
        assert_eq!(only.len(), 1);
        assert!(only[0].metric.starts_with("precision_at_"));
        assert!(cmd_eval(&cfg, &data_dir, best, &eval2, Some("entropy")).is_err());

        let masked = load_data_dir(&data_dir)
            .unwrap()
            .records
            .iter()
            .find(|r| r.has_mask())
            .map(|r| r.id.clone())
            .unwrap();
        let overlay = dir.path().join("ev.png");
        cmd_plot_evidence(&data_dir, best, &masked, None, &overlay).unwrap();
        assert!(overlay.is_file());
    }

    #[test]
    fn knn_k_flows_from_config_to_metric_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&["eval.knn_k=3"]);
        let data_dir = dir.path().join("data");
        cmd_generate(&cfg, &data_dir).unwrap();
        let pre_dir = dir.path().join("pre");
        cmd_pretrain(&cfg, &data_dir, &pre_dir, None).unwrap();
        let ck = crate::trainer::final_ckpt_path(&pre_dir, 3);
        let rows =
            cmd_eval(&cfg, &data_dir, &ck, &dir.path().join("e"), Some("knn-auroc")).unwrap();
        assert_eq!(rows[0].metric, "knn3_auroc");
    }

    #[test]
    fn generate_derives_lesion_counts_for_the_requested_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::resolve(
            None,
            &[
                "data.n_images=8".into(),
                "data.n_classes=4".into(),
                "data.image_size=36".into(),
            ],
        )
        .unwrap();
        let data = cmd_generate(&cfg, dir.path()).unwrap();
        assert_eq!(data.n_classes, 4);
        let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert!(
            text.contains("\"data.lesions_per_grade\" = [0, 4, 9, 15]"),
            "{text}"
        );
    }

    #[test]
    fn embedding_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "id,x,y,label\na,0.5,-1.25,0\nb,1.0,2.0,\n").unwrap();
        let data = read_embedding_csv(&path).unwrap();
        assert_eq!(data.ids, vec!["a", "b"]);
        assert_eq!(data.labels, vec![Some(0), None]);
        assert!((data.points[[0, 1]] + 1.25).abs() < 1e-12);
        std::fs::write(&path, "id,x,label\n").unwrap();
        assert!(read_embedding_csv(&path).is_err());
    }

    #[test]
    fn plot_evidence_rejects_missing_ids_and_bad_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&[]);
        let data_dir = dir.path().join("data");
        cmd_generate(&cfg, &data_dir).unwrap();
        let pre_dir = dir.path().join("pre");
        cmd_pretrain(&cfg, &data_dir, &pre_dir, None).unwrap();
        let ck = crate::trainer::final_ckpt_path(&pre_dir, 3);
        let ft_dir = dir.path().join("ft");
        let report = cmd_finetune(&cfg, &data_dir, &ck, &ft_dir).unwrap();
        let best = &report.folds[0].checkpoint;
        let out = dir.path().join("x.png");
        let err = cmd_plot_evidence(&data_dir, best, "ghost.png", None, &out).unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
        let some_id = load_data_dir(&data_dir).unwrap().records[0].id.clone();
        let err = cmd_plot_evidence(&data_dir, best, &some_id, Some(9), &out).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }
}
