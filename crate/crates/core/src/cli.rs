//! Command-line driver. Flags override the configuration file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{generator_to_archive, load_model, save_model, ModelArchive};
use crate::bns::per_image_bns_batch;
use crate::cluster::{export_bns_csv, mean_silhouette_per_layer, BnsStatistic, LabeledBnsDataset};
use crate::config::Config;
use crate::data::{make_toy_dataset, Dataset};
use crate::error::{Error, Result};
use crate::trainer::{evaluate, pretrain_classifier, run_fdda};

#[derive(Debug, Parser)]
#[command(name = "fdda", version, about = "Data-free 4-bit quantization guided by BN statistics")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the full-precision classifier on the toy dataset.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Quantize a pretrained classifier.
    Quantize(QuantizeArgs),
    /// Per-layer silhouette of per-image BN statistics, with optional CSV export.
    AnalyzeBns {
        #[arg(long)]
        model: PathBuf,
        /// Directory receiving one `layer_<l>.csv` per BN layer.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        /// Training images per class to analyze.
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Top-1 accuracy of an archive on the toy test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Archive for the best quantized model.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report; defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also save the trained generator here.
    #[arg(long)]
    pub generator_out: Option<PathBuf>,
    #[arg(long)]
    pub wbits: Option<u32>,
    #[arg(long)]
    pub abits: Option<u32>,
    #[arg(long)]
    pub first_bits: Option<u32>,
    #[arg(long)]
    pub last_bits: Option<u32>,
    #[arg(long)]
    pub no_cbns: bool,
    #[arg(long)]
    pub no_dbns: bool,
    /// Calibration data only; the generator is not used.
    #[arg(long)]
    pub no_synthetic: bool,
    /// Label calibration images by the full-precision model's prediction.
    #[arg(long)]
    pub predict_labels: bool,
    /// Calibration images come from classes `0..N` only.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn require_classifier(a: &ModelArchive, path: &Path) -> Result<()> {
    if a.kind == "generator" {
        return Err(Error::Invalid(format!("{} holds a generator, not a classifier", path.display())));
    }
    Ok(())
}

fn datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    make_toy_dataset(&cfg.dataset)
}

/// Runs a parsed command, writing human-readable results to `out`.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Some(seed) = cli.seed {
        cfg.pretrain.seed = seed;
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Pretrain { out: path, epochs } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            cfg.validate()?;
            let (train, test) = datasets(&cfg)?;
            let (net, _) = pretrain_classifier(&train, &cfg.pretrain)?;
            let train_acc = evaluate(&net, None, &train)?;
            let test_acc = evaluate(&net, None, &test)?;
            let mut a = ModelArchive::new("classifier", net);
            a.metadata.insert("train_acc".into(), format!("{train_acc:.6}"));
            a.metadata.insert("test_acc".into(), format!("{test_acc:.6}"));
            a.metadata.insert("seed".into(), cfg.pretrain.seed.to_string());
            save_model(&a, &path)?;
            writeln!(out, "train_acc={train_acc:.4} test_acc={test_acc:.4} bn_layers={}", a.model.bn_layer_count())?;
        }
        Command::Quantize(args) => quantize(cfg, args, out)?,
        Command::AnalyzeBns { model, csv_dir, per_class } => {
            cfg.validate()?;
            let a = load_model(&model)?;
            require_classifier(&a, &model)?;
            let (train, _) = datasets(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut picked = Vec::new();
            for class in 0..train.num_classes {
                let mut rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
                rows.shuffle(&mut rng);
                picked.extend(rows.into_iter().take(per_class));
            }
            let subset = train.subset(&picked)?;
            let stats = per_image_bns_batch(&a.model, &subset.images)?;
            let ds = LabeledBnsDataset { samples: stats.into_iter().zip(subset.labels.iter().copied()).collect() };
            let sc_mean = mean_silhouette_per_layer(&ds, BnsStatistic::Mean)?;
            let sc_var = mean_silhouette_per_layer(&ds, BnsStatistic::Variance)?;
            writeln!(out, "layer,sc_mean,sc_var")?;
            for (l, (m, v)) in sc_mean.iter().zip(&sc_var).enumerate() {
                writeln!(out, "{},{m:.6},{v:.6}", l + 1)?;
            }
            if let Some(dir) = csv_dir {
                std::fs::create_dir_all(&dir)?;
                for l in 1..=ds.num_layers() {
                    export_bns_csv(&ds, l, &dir.join(format!("layer_{l}.csv")))?;
                }
            }
        }
        Command::Eval { model } => {
            cfg.validate()?;
            let a = load_model(&model)?;
            require_classifier(&a, &model)?;
            let (_, test) = datasets(&cfg)?;
            let acc = evaluate(&a.model, a.quant.as_ref(), &test)?;
            writeln!(out, "accuracy={acc:.4}")?;
        }
    }
    Ok(())
}

fn quantize(mut cfg: Config, args: QuantizeArgs, out: &mut impl Write) -> Result<()> {
    let p = &mut cfg.policy;
    p.weight_bits = args.wbits.unwrap_or(p.weight_bits);
    p.activation_bits = args.abits.unwrap_or(p.activation_bits);
    p.first_layer_bits = args.first_bits.unwrap_or(p.first_layer_bits);
    p.last_layer_bits = args.last_bits.unwrap_or(p.last_layer_bits);
    let ab = &mut cfg.ablation;
    ab.cbns &= !args.no_cbns;
    ab.dbns &= !args.no_dbns;
    ab.synthetic &= !args.no_synthetic;
    ab.predict_labels |= args.predict_labels;
    if args.classes.is_some() {
        ab.classes = args.classes;
    }
    if let Some(e) = args.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(w) = args.warmup {
        cfg.train.warmup_epochs = w;
    }
    cfg.validate()?;

    let teacher = load_model(&args.model)?;
    require_classifier(&teacher, &args.model)?;
    let (train, test) = datasets(&cfg)?;
    if teacher.model.output_shape() != [train.num_classes] {
        return Err(Error::Invalid(format!(
            "model predicts {:?} classes but the dataset has {}",
            teacher.model.output_shape(),
            train.num_classes
        )));
    }
    let outcome = run_fdda(&teacher.model, &train, &test, &cfg.train, cfg.policy, &cfg.ablation)?;
    let report = &outcome.report;

    let mut a = ModelArchive::new("quantized", outcome.best.clone());
    a.quant = Some(outcome.quant.clone());
    a.centroids = Some(outcome.centroids.clone());
    let mut meta = BTreeMap::new();
    meta.insert("best_epoch".to_string(), report.best_epoch.to_string());
    meta.insert("best_acc".to_string(), format!("{:.6}", report.best_acc));
    a.metadata = meta;
    save_model(&a, &args.out)?;
    if let Some(g) = &args.generator_out {
        save_model(&generator_to_archive(&outcome.generator)?, g)?;
    }
    let report_path = args.report.clone().unwrap_or_else(|| args.out.with_extension("json"));
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(&report_path, json + "\n")?;
    writeln!(
        out,
        "float_acc={:.4} final_acc={:.4} best_acc={:.4} best_epoch={}",
        report.float_acc, report.final_acc, report.best_acc, report.best_epoch
    )?;
    Ok(())
}
