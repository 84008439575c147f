//! Implementations of the CLI subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protovae::dataio::{load_idx, Dataset};
use protovae::eval::{
    self, MetricsFingerprint, MetricsRecord, MASK_FRACTION,
};
use protovae::explain::{lrp_explain, FillPolicy, LrpConfig};
use protovae::model::{ModelConfig, ProtoVaeModel};
use protovae::pgm;
use protovae::tensor::Tensor;
use protovae::trainer::{
    self, evaluate_accuracy, load_checkpoint, save_checkpoint, seeded_model, EpochRecord,
    ProgressSink, TrainConfig,
};
use protovae::{Error, Result};

use crate::config::ConfigFile;
use crate::manifest::{default_out_dir, ensure_out_dir, Manifest};

fn load_dataset(images: &Path, labels: &Path) -> Result<Dataset<f32>> {
    load_idx::<f32>(images, labels)
}

fn load_model(path: &Path) -> Result<(ProtoVaeModel<f32>, TrainConfig)> {
    let (model, config, _) = load_checkpoint::<f32>(path)?;
    Ok((model, config))
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::InvalidArgument {
        op: "cli",
        message: format!("missing required input: {what}"),
    })
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TrainArgs {
    /// Training images (IDX u8, magic 0x00000803).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Training labels (IDX u8, magic 0x00000801).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Optional held-out images for per-epoch accuracy.
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Dataset name used in metric records.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prototypes per class (M).
    #[arg(long, short = 'm')]
    m: Option<usize>,
    /// Latent dimension (d).
    #[arg(long, short = 'd')]
    d: Option<usize>,
    /// Similarity ε, 0 < ε < 1.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    w_pred: Option<f64>,
    #[arg(long)]
    w_orth: Option<f64>,
    #[arg(long)]
    w_recon: Option<f64>,
    #[arg(long)]
    w_kl: Option<f64>,
    /// Ablation: drop the KL term of the VAE loss.
    #[arg(long)]
    disable_kl: bool,
    /// Ablation: drop the orthonormalization term.
    #[arg(long)]
    disable_orth: bool,
    /// Let gradients flow through the normalized similarity weights.
    #[arg(long)]
    grad_through_sim_weights: bool,
    /// Flat key=value config file (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default runs/<timestamp>-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct ConsoleSink;

impl ProgressSink for ConsoleSink {
    fn on_batch(&mut self, epoch: usize, batch: usize, num_batches: usize, total: f64) {
        if batch % 50 == 0 {
            eprintln!("epoch {epoch} batch {batch}/{num_batches} loss {total:.4}");
        }
    }
    fn on_epoch(&mut self, record: &EpochRecord) {
        match record.test_accuracy {
            Some(acc) => eprintln!(
                "epoch {} done: total {:.4}, test accuracy {:.4}",
                record.epoch, record.total, acc
            ),
            None => eprintln!("epoch {} done: total {:.4}", record.epoch, record.total),
        }
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let images = require(file.resolve_path(args.images, "images"), "--images")?;
    let labels = require(file.resolve_path(args.labels, "labels"), "--labels")?;
    let test_images = file.resolve_path(args.test_images, "test_images");
    let test_labels = file.resolve_path(args.test_labels, "test_labels");

    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        epochs: file.resolve(args.epochs, "epochs", defaults.epochs)?,
        batch_size: file.resolve(args.batch_size, "batch_size", defaults.batch_size)?,
        learning_rate: file.resolve(args.lr, "learning_rate", defaults.learning_rate)?,
        seed: file.resolve(args.seed, "seed", defaults.seed)?,
        w_pred: file.resolve(args.w_pred, "w_pred", defaults.w_pred)?,
        w_orth: file.resolve(args.w_orth, "w_orth", defaults.w_orth)?,
        w_recon: file.resolve(args.w_recon, "w_recon", defaults.w_recon)?,
        w_kl: file.resolve(args.w_kl, "w_kl", defaults.w_kl)?,
        disable_orth: file.resolve_flag(args.disable_orth, "disable_orth")?,
        disable_kl: file.resolve_flag(args.disable_kl, "disable_kl")?,
        grad_through_sim_weights: file
            .resolve_flag(args.grad_through_sim_weights, "grad_through_sim_weights")?,
    };

    let train_set = load_dataset(&images, &labels)?;
    let test_set = match (&test_images, &test_labels) {
        (Some(i), Some(l)) => Some(load_dataset(i, l)?),
        (None, None) => None,
        _ => {
            return Err(Error::InvalidArgument {
                op: "cli",
                message: "--test-images and --test-labels must be given together".into(),
            })
        }
    };

    let meta = &train_set.meta;
    let mut model_config = ModelConfig::new(
        meta.num_classes,
        file.resolve(args.m, "prototypes_per_class", 5)?,
        file.resolve(args.d, "latent_dim", 256)?,
        (meta.channels, meta.height, meta.width),
    );
    model_config.epsilon = file.resolve(args.epsilon, "epsilon", model_config.epsilon)?;

    let dataset_name = args.dataset.unwrap_or_else(|| meta.name.clone());
    let out = args.out.unwrap_or_else(|| default_out_dir(train_config.seed));
    ensure_out_dir(&out)?;

    let mut manifest = Manifest::new("train");
    manifest.set("dataset", &dataset_name);
    manifest.input("images", &images)?;
    manifest.input("labels", &labels)?;
    if let (Some(i), Some(l)) = (&test_images, &test_labels) {
        manifest.input("test_images", i)?;
        manifest.input("test_labels", l)?;
    }
    for line in trainer::render_config(&model_config, &train_config).lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.set(&format!("config.{k}"), v);
        }
    }
    manifest.output("checkpoint", "checkpoint.pvae");
    manifest.output("metrics", "metrics.csv");
    manifest.write(&out)?;

    let mut model = seeded_model::<f32>(model_config, train_config.seed)?;
    let mut sink = ConsoleSink;
    let (records, rng_state) = trainer::train(
        &mut model,
        &train_set,
        test_set.as_ref(),
        &train_config,
        &mut sink,
    )?;

    save_checkpoint(out.join("checkpoint.pvae"), &model, &train_config, rng_state)?;
    write_metrics_csv(&out.join("metrics.csv"), &records)?;
    println!("checkpoint written to {}", out.join("checkpoint.pvae").display());
    Ok(())
}

/// metrics.csv: epoch, pred, orth, recon, kl, total, test_acc.
fn write_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);
    writeln!(w, "epoch,pred,orth,recon,kl,total,test_acc").map_err(io)?;
    for r in records {
        let acc = r
            .test_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.pred, r.orth, r.recon, r.kl, r.total, acc
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

// ── prototypes ──────────────────────────────────────────────────────────

#[derive(Args)]
pub struct PrototypesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a K×M grid montage.
    #[arg(long)]
    montage: bool,
}

pub fn prototypes(args: PrototypesArgs) -> Result<()> {
    let (model, config) = load_model(&args.checkpoint)?;
    let out = args.out.unwrap_or_else(|| default_out_dir(config.seed));
    ensure_out_dir(&out)?;
    let mut manifest = Manifest::new("prototypes");
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.output("prototypes", "prototypes/proto_k{K}_j{J}.pgm");
    manifest.write(&out)?;
    let proto_dir = out.join("prototypes");
    ensure_out_dir(&proto_dir)?;

    let k = model.config.num_classes;
    let m = model.config.prototypes_per_class;
    let mut images = Vec::with_capacity(k * m);
    for class in 0..k {
        for j in 0..m {
            let img = model.decode_prototype(class, j)?;
            pgm::write_pgm_fixed(proto_dir.join(format!("proto_k{class}_j{j}.pgm")), &img)?;
            images.push(img);
        }
    }
    if args.montage {
        let grid = pgm::montage(&images, m)?;
        pgm::write_pgm_fixed(proto_dir.join("montage.pgm"), &grid)?;
    }
    println!("{} prototype images written to {}", k * m, out.display());
    Ok(())
}

// ── explain ─────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset images to pick --index from.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Index of the image to explain.
    #[arg(long)]
    index: Option<usize>,
    /// Alternatively, a single PGM image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of most similar prototypes to explain.
    #[arg(long, default_value_t = 3)]
    top: usize,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let (model, config) = load_model(&args.checkpoint)?;
    let out = args.out.unwrap_or_else(|| default_out_dir(config.seed));
    ensure_out_dir(&out)?;

    let mut manifest = Manifest::new("explain");
    manifest.input("checkpoint", &args.checkpoint)?;

    let x: Tensor<f32> = match (&args.input, &args.images, args.index) {
        (Some(pgm_path), None, None) => {
            manifest.input("image", pgm_path)?;
            pgm::read_pgm(pgm_path)?
        }
        (None, Some(images), Some(index)) => {
            let labels = require(args.labels.clone(), "--labels")?;
            manifest.input("images", images)?;
            manifest.set("index", index);
            let ds = load_dataset(images, &labels)?;
            if index >= ds.len() {
                return Err(Error::InvalidArgument {
                    op: "cli",
                    message: format!("index {index} out of range for {} images", ds.len()),
                });
            }
            ds.image(index)
        }
        _ => {
            return Err(Error::InvalidArgument {
                op: "cli",
                message: "give either --input FILE.pgm, or --images/--labels with --index".into(),
            })
        }
    };

    let mut cfg = LrpConfig::<f32>::default();
    if let (Some(a), Some(b)) = (args.alpha, args.beta) {
        cfg = LrpConfig::with_alpha_beta(a as f32, b as f32)?;
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta as f32;
    }
    manifest.set("eta", cfg.eta);
    manifest.set("alpha", cfg.alpha);
    manifest.set("beta", cfg.beta);
    manifest.output("maps", "maps/map_rank{R}_k{K}_j{J}.pgm");
    manifest.output("scores", "scores.csv");
    manifest.write(&out)?;
    let maps_dir = out.join("maps");
    ensure_out_dir(&maps_dir)?;

    let total = model.config.num_classes * model.config.prototypes_per_class;
    let top = if args.top > total {
        eprintln!("warning: --top {} clamped to {} prototypes", args.top, total);
        total
    } else {
        args.top
    };

    let s = model.similarities_eval(&x)?;
    let m = model.config.prototypes_per_class;
    let mut ranked: Vec<(usize, f32)> = s.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let scores_path = out.join("scores.csv");
    let display = scores_path.display().to_string();
    let mut scores =
        BufWriter::new(File::create(&scores_path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);
    writeln!(scores, "rank,class,prototype,similarity").map_err(io)?;
    for (rank, &(flat, sim)) in ranked.iter().take(top).enumerate() {
        let (class, j) = (flat / m, flat % m);
        let map = lrp_explain(&model, &x, (class, j), &cfg)?;
        pgm::write_pgm_autoscale(
            maps_dir.join(format!("map_rank{rank}_k{class}_j{j}.pgm")),
            &map.values,
        )?;
        pgm::write_map_csv(
            maps_dir.join(format!("map_rank{rank}_k{class}_j{j}.csv")),
            &map.values,
        )?;
        writeln!(scores, "{rank},{class},{j},{sim}").map_err(io)?;
    }
    scores.flush().map_err(io)?;
    println!("{top} maps written to {}", out.display());
    Ok(())
}

// ── interpolate ─────────────────────────────────────────────────────────

#[derive(Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Start prototype as k,j.
    #[arg(long)]
    from: String,
    /// End prototype as k,j.
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_proto(raw: &str) -> Result<(usize, usize)> {
    let (k, j) = raw.split_once(',').ok_or_else(|| Error::InvalidArgument {
        op: "cli",
        message: format!("expected k,j but got {raw:?}"),
    })?;
    let parse = |s: &str| {
        s.trim().parse::<usize>().map_err(|_| Error::InvalidArgument {
            op: "cli",
            message: format!("invalid prototype index {s:?}"),
        })
    };
    Ok((parse(k)?, parse(j)?))
}

pub fn interpolate(args: InterpolateArgs) -> Result<()> {
    let (model, config) = load_model(&args.checkpoint)?;
    let from = parse_proto(&args.from)?;
    let to = parse_proto(&args.to)?;
    let out = args.out.unwrap_or_else(|| default_out_dir(config.seed));
    ensure_out_dir(&out)?;
    let mut manifest = Manifest::new("interpolate");
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.set("from", &args.from);
    manifest.set("to", &args.to);
    manifest.set("steps", args.steps);
    manifest.output("strip", "strip.pgm");
    manifest.write(&out)?;

    let frames = model.interpolate(from, to, args.steps)?;
    for (i, frame) in frames.iter().enumerate() {
        pgm::write_pgm_fixed(out.join(format!("step_{i:02}.pgm")), frame)?;
    }
    let strip = pgm::montage(&frames, frames.len())?;
    pgm::write_pgm_fixed(out.join("strip.pgm"), &strip)?;
    println!("{} frames written to {}", frames.len(), out.display());
    Ok(())
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum WhichMetric {
    Accuracy,
    Adai,
    Ordering,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    which: WhichMetric,
    /// Images per evaluation subset.
    #[arg(long)]
    num_images: Option<usize>,
    /// Number of AD/AI subsets (one row per seed).
    #[arg(long, default_value_t = 5)]
    num_seeds: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    let (model, config) = load_model(&args.checkpoint)?;
    let seed = args.seed.unwrap_or(config.seed);
    let out = args.out.unwrap_or_else(|| default_out_dir(seed));
    ensure_out_dir(&out)?;
    let dataset = load_dataset(&args.images, &args.labels)?;
    let name = args.dataset.unwrap_or_else(|| dataset.meta.name.clone());

    let mut manifest = Manifest::new("metrics");
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("images", &args.images)?;
    manifest.input("labels", &args.labels)?;
    manifest.set("which", format!("{:?}", args.which).to_lowercase());
    manifest.set("seed", seed);

    let cfg = LrpConfig::<f32>::default();
    let fingerprint = MetricsFingerprint {
        seed,
        epsilon: model.config.epsilon,
        eta: cfg.eta as f64,
        alpha: cfg.alpha as f64,
        beta: cfg.beta as f64,
        fraction: MASK_FRACTION,
    };

    match args.which {
        WhichMetric::Accuracy => {
            manifest.output("accuracy", "accuracy.csv");
            manifest.write(&out)?;
            let acc = evaluate_accuracy(&model, &dataset);
            let path = out.join("accuracy.csv");
            let display = path.display().to_string();
            let mut w =
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&display, e))?);
            writeln!(w, "dataset,n,accuracy").map_err(|e| Error::io(&display, e))?;
            writeln!(w, "{},{},{}", name, dataset.len(), acc)
                .map_err(|e| Error::io(&display, e))?;
            println!("accuracy {acc:.4}");
        }
        WhichMetric::Adai => {
            manifest.output("ad_ai", "ad_ai.csv");
            manifest.write(&out)?;
            let per_subset = args.num_images.unwrap_or(1000).min(dataset.len());
            let mut records = Vec::with_capacity(args.num_seeds);
            for run in 0..args.num_seeds {
                let run_seed = seed.wrapping_add(run as u64);
                let indices = sample_indices(dataset.len(), per_subset, run_seed);
                let maps = eval::explain_all_prototypes(&model, &dataset, &indices, &cfg)?;
                let images: Vec<Tensor<f32>> =
                    indices.iter().map(|&i| dataset.image(i)).collect();
                let (orig, masked) = eval::masked_similarity_scores(
                    &model,
                    &images,
                    &maps,
                    MASK_FRACTION,
                    FillPolicy::Zero,
                )?;
                let (ad, ai) = eval::ad_ai_from_scores(&orig, &masked);
                eprintln!("seed {run_seed}: AD {ad:.3}, AI {ai:.3}");
                records.push(MetricsRecord {
                    metric: "ad_ai".into(),
                    dataset: name.clone(),
                    values: vec![ad, ai],
                    fingerprint: MetricsFingerprint {
                        seed: run_seed,
                        ..fingerprint
                    },
                });
            }
            eval::write_ad_ai_csv(out.join("ad_ai.csv"), &records)?;
        }
        WhichMetric::Ordering => {
            manifest.output("ordering", "ordering.csv");
            manifest.write(&out)?;
            let count = args.num_images.unwrap_or(100).min(dataset.len());
            let indices = sample_indices(dataset.len(), count, seed);
            let grid = eval::default_grid();
            let (lrp, random) =
                eval::ordering_test(&model, &dataset, &indices, &grid, &cfg, seed)?;
            eprintln!(
                "area lrp {:.4}, random {:.4}",
                eval::trapezoid_area(&lrp),
                eval::trapezoid_area(&random)
            );
            eval::write_ordering_csv(out.join("ordering.csv"), &[lrp, random], &fingerprint)?;
        }
    }
    println!("metrics written to {}", out.display());
    Ok(())
}

/// Deterministic subset of a dataset.
fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5b5e7);
    indices.shuffle(&mut rng);
    indices.truncate(count);
    indices
}

// ── export-embeddings ───────────────────────────────────────────────────

#[derive(Args)]
pub struct ExportEmbeddingsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn export_embeddings(args: ExportEmbeddingsArgs) -> Result<()> {
    let (model, config) = load_model(&args.checkpoint)?;
    let out = args.out.unwrap_or_else(|| default_out_dir(config.seed));
    ensure_out_dir(&out)?;
    let dataset = load_dataset(&args.images, &args.labels)?;

    let mut manifest = Manifest::new("export-embeddings");
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("images", &args.images)?;
    manifest.input("labels", &args.labels)?;
    manifest.output("embeddings", "embeddings.csv");
    manifest.write(&out)?;

    let d = model.config.latent_dim;
    let path = out.join("embeddings.csv");
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);
    let mut header = String::from("kind,index,label");
    for i in 0..d {
        header.push_str(&format!(",e{i}"));
    }
    writeln!(w, "{header}").map_err(io)?;

    let block = 256;
    for lo in (0..dataset.len()).step_by(block) {
        let hi = (lo + block).min(dataset.len());
        let indices: Vec<usize> = (lo..hi).collect();
        let (xs, _) = protovae::dataio::gather_batch(&dataset, &indices);
        let (mu, _) = model.encode(&xs)?;
        for (row, &idx) in indices.iter().enumerate() {
            let mut line = format!("image,{},{}", idx, dataset.label(idx));
            for &v in &mu.data()[row * d..(row + 1) * d] {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    let m = model.config.prototypes_per_class;
    for class in 0..model.config.num_classes {
        for j in 0..m {
            let mut line = format!("proto,{},{}", class * m + j, class);
            for &v in model.prototypes.get(class, j) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    println!(
        "{} rows written to {}",
        dataset.len() + model.config.total_prototypes(),
        path.display()
    );
    Ok(())
}
