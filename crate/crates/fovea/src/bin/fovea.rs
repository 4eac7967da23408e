//! Command-line front end. Every subcommand is a thin wrapper over the
//! same-named function in [`fovea::commands`], so scripted runs and
//! in-process callers see identical numbers and files. Metric rows go
//! to stdout as `dataset,metric,value`; status notes go to stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fovea::commands::{self, MetricRow};
use fovea::config::Config;
use fovea::Result;

#[derive(Parser)]
#[command(
    name = "fovea",
    version,
    about = "Contrastive pretraining with 2-D embeddings and class evidence maps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Shared configuration flags: an optional TOML file layered under
/// repeatable key=value overrides.
#[derive(Args)]
struct Conf {
    /// Configuration file (TOML; flat dotted keys or nested tables)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set stage1.epochs=50 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Conf {
    /// Resolve with `extra` overrides appended after `--set` values, so
    /// dedicated flags beat generic overrides.
    fn resolve(&self, extra: Vec<String>) -> Result<Config> {
        let mut overrides = self.set.clone();
        overrides.extend(extra);
        Config::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic graded dataset (images, lesion masks, labels.csv)
    Generate {
        /// Output dataset directory
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        /// Number of images (shorthand for --set data.n_images=N)
        #[arg(long)]
        n: Option<usize>,
        /// Number of disease grades (shorthand for --set data.n_classes=K)
        #[arg(long)]
        classes: Option<usize>,
        /// Image side length in pixels
        #[arg(long)]
        size: Option<usize>,
        /// Master seed
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        conf: Conf,
    },
    /// Run the three contrastive pretraining stages
    Pretrain {
        /// Dataset directory (as written by generate)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved checkpoint
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        conf: Conf,
    },
    /// Cross-validated fine-tuning of an evidence head
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        conf: Conf,
    },
    /// Sweep the evidence sparsity penalty and recommend a setting
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint to fine-tune at each penalty
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        conf: Conf,
    },
    /// Elastic-net linear probe of the frozen embedding
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        conf: Conf,
    },
    /// Score a checkpoint against a dataset
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint (knn-auroc) or classifier (auroc, precision)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one metric: auroc, knn-auroc or precision
        #[arg(long)]
        metric: Option<String>,
        /// Neighbor count (knn-auroc) or patch count (precision)
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        conf: Conf,
    },
    /// Write the 2-D embedding of a dataset as id,x,y,label
    Embed {
        #[arg(long)]
        data: PathBuf,
        /// Stage-3 (2-D) pretraining checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        conf: Conf,
    },
    /// Render static figures
    Plot {
        #[command(subcommand)]
        what: PlotCmd,
    },
}

#[derive(Subcommand)]
enum PlotCmd {
    /// Scatter a stored 2-D embedding, colored by label
    Scatter {
        /// Embedding CSV (id,x,y,label)
        #[arg(long)]
        embeddings: PathBuf,
        /// Output PNG path
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay one image's class-evidence map, with lesion contours when
    /// a mask exists
    Evidence {
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned classifier checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image id (as listed in labels.csv)
        #[arg(long)]
        image: String,
        /// Class whose evidence to show (default: the image's own label)
        #[arg(long)]
        class: Option<usize>,
        /// Output PNG path
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_rows(rows: &[MetricRow]) {
    println!("dataset,metric,value");
    for r in rows {
        println!("{},{},{:.6}", r.dataset, r.metric, r.value);
    }
}

fn dataset_name(data: &Path) -> String {
    data.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate {
            out,
            n,
            classes,
            size,
            seed,
            conf,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(format!("data.n_images={n}"));
            }
            if let Some(k) = classes {
                extra.push(format!("data.n_classes={k}"));
            }
            if let Some(s) = size {
                extra.push(format!("data.image_size={s}"));
            }
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            let cfg = conf.resolve(extra)?;
            let data = commands::cmd_generate(&cfg, &out)?;
            eprintln!("wrote {} images to {}", data.len(), out.display());
        }
        Cmd::Pretrain {
            data,
            out,
            resume,
            conf,
        } => {
            let cfg = conf.resolve(Vec::new())?;
            let ck = commands::cmd_pretrain(&cfg, &data, &out, resume.as_deref())?;
            eprintln!(
                "finished stage {} at epoch {}; checkpoints in {}",
                ck.meta.stage_id,
                ck.meta.epoch,
                out.display()
            );
        }
        Cmd::Finetune {
            data,
            checkpoint,
            out,
            conf,
        } => {
            let cfg = conf.resolve(Vec::new())?;
            let report = commands::cmd_finetune(&cfg, &data, &checkpoint, &out)?;
            let name = dataset_name(&data);
            let mut rows: Vec<MetricRow> = report
                .folds
                .iter()
                .map(|f| MetricRow {
                    dataset: name.clone(),
                    metric: format!("fold{}_auroc", f.fold),
                    value: f.auroc,
                })
                .collect();
            rows.push(MetricRow {
                dataset: name,
                metric: "mean_auroc".into(),
                value: report.mean_auroc,
            });
            print_rows(&rows);
        }
        Cmd::Sweep {
            data,
            checkpoint,
            out,
            conf,
        } => {
            let cfg = conf.resolve(Vec::new())?;
            let report = commands::cmd_sweep(&cfg, &data, &checkpoint, &out)?;
            let name = dataset_name(&data);
            let mut rows = Vec::new();
            for row in &report.rows {
                rows.push(MetricRow {
                    dataset: name.clone(),
                    metric: format!("lambda_{}_auroc", row.lambda),
                    value: row.mean_auroc,
                });
                rows.push(MetricRow {
                    dataset: name.clone(),
                    metric: format!("lambda_{}_precision", row.lambda),
                    value: row.mean_precision_at_k,
                });
            }
            rows.push(MetricRow {
                dataset: name,
                metric: "recommended_lambda".into(),
                value: report.recommended_lambda,
            });
            print_rows(&rows);
        }
        Cmd::Probe {
            data,
            checkpoint,
            out,
            conf,
        } => {
            let cfg = conf.resolve(Vec::new())?;
            let (_, rows) = commands::cmd_probe(&cfg, &data, &checkpoint, &out)?;
            print_rows(&rows);
        }
        Cmd::Eval {
            data,
            checkpoint,
            out,
            metric,
            k,
            conf,
        } => {
            let mut extra = Vec::new();
            if let Some(k) = k {
                extra.push(format!("eval.knn_k={k}"));
                extra.push(format!("eval.precision_k={k}"));
            }
            let cfg = conf.resolve(extra)?;
            let rows = commands::cmd_eval(&cfg, &data, &checkpoint, &out, metric.as_deref())?;
            print_rows(&rows);
        }
        Cmd::Embed {
            data,
            checkpoint,
            out,
            conf,
        } => {
            let cfg = conf.resolve(Vec::new())?;
            let embedded = commands::cmd_embed(&cfg, &data, &checkpoint, &out)?;
            eprintln!("wrote {} points to {}", embedded.ids.len(), out.display());
        }
        Cmd::Plot { what } => match what {
            PlotCmd::Scatter { embeddings, out } => {
                commands::cmd_plot_scatter(&embeddings, &out)?;
                eprintln!("wrote {}", out.display());
            }
            PlotCmd::Evidence {
                data,
                checkpoint,
                image,
                class,
                out,
            } => {
                commands::cmd_plot_evidence(&data, &checkpoint, &image, class, &out)?;
                eprintln!("wrote {}", out.display());
            }
        },
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
