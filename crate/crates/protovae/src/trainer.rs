//! End-to-end optimization with Adam, deterministic seeding and chunked
//! batch parallelism, plus checkpoint serialization.
//!
//! Reproducibility contract: with a fixed seed the whole run is bit-exact
//! regardless of worker count. Reparameterization noise is drawn up front on
//! the driver thread, batches are split into fixed-size chunks with one tape
//! each, and chunk gradients are reduced in chunk order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{epoch_batches, gather_batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{build_loss, LossBreakdown, LossOptions, LossWeights};
use crate::model::{ModelConfig, ProtoVaeModel, PrototypeBank};
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Samples processed per tape; fixed so the gradient reduction order does
/// not depend on the worker count.
const CHUNK: usize = 16;

/// RNG stream ids derived from the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub w_pred: f64,
    pub w_orth: f64,
    pub w_recon: f64,
    pub w_kl: f64,
    pub disable_orth: bool,
    pub disable_kl: bool,
    pub grad_through_sim_weights: bool,
}

impl Default for TrainConfig {
    /// The MNIST configuration: 10 epochs, batch 128, learning rate 0.001.
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.001,
            seed: 0,
            w_pred: 1.0,
            w_orth: 1.0,
            w_recon: 1.0,
            w_kl: 1.0,
            disable_orth: false,
            disable_kl: false,
            grad_through_sim_weights: false,
        }
    }
}

impl TrainConfig {
    /// Loss weights with the ablation switches applied.
    pub fn effective_weights<F: Element>(&self) -> LossWeights<F> {
        LossWeights {
            pred: F::from_f64(self.w_pred),
            orth: if self.disable_orth {
                F::ZERO
            } else {
                F::from_f64(self.w_orth)
            },
            recon: F::from_f64(self.w_recon),
            kl: if self.disable_kl {
                F::ZERO
            } else {
                F::from_f64(self.w_kl)
            },
        }
    }
}

/// The MNIST model defaults: M = 5 prototypes per class, d = 256.
pub fn mnist_model_config() -> ModelConfig {
    ModelConfig::new(10, 5, 256, (1, 28, 28))
}

/// Model with parameters drawn from the dedicated init stream of `seed`.
pub fn seeded_model<F: Element>(config: ModelConfig, seed: u64) -> Result<ProtoVaeModel<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    ProtoVaeModel::new(config, &mut rng)
}

// ── Adam ────────────────────────────────────────────────────────────────

pub struct Adam<F: Element> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(learning_rate: F, shapes: &[Vec<usize>]) -> Self {
        Self {
            learning_rate,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One update over parameters and their gradients, in canonical order.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<F>)], grads: &[Tensor<F>]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = F::ONE - self.beta1.powi(t);
        let bias2 = F::ONE - self.beta2.powi(t);
        for ((m, v), ((_, p), g)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(params.iter_mut().zip(grads.iter()))
        {
            for (((m, v), p), &g) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(p.data_mut().iter_mut())
                .zip(g.data().iter())
            {
                *m = self.beta1 * *m + (F::ONE - self.beta1) * g;
                *v = self.beta2 * *v + (F::ONE - self.beta2) * g * g;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

// ── progress reporting ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pred: f64,
    pub orth: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub test_accuracy: Option<f64>,
}

pub trait ProgressSink {
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _num_batches: usize, _total: f64) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

/// Discards all progress events.
pub struct NullSink;

impl ProgressSink for NullSink {}

// ── training loop ───────────────────────────────────────────────────────

/// Gradients of the batch loss for every parameter, canonical order, plus
/// the loss breakdown. Deterministic for fixed inputs and noise.
pub fn batch_gradients<F: Element>(
    model: &ProtoVaeModel<F>,
    images: &Tensor<F>,
    labels: &Tensor<F>,
    noise: &Tensor<F>,
    weights: &LossWeights<F>,
    options: &LossOptions,
) -> Result<(LossBreakdown<F>, Vec<Tensor<F>>)> {
    let n = images.shape()[0];
    let inv_n = F::ONE / F::from_f64(n as f64);
    let k = labels.shape()[1];
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let d = model.config.latent_dim;
    let plane = c * h * w;

    let chunk_count = n.div_ceil(CHUNK);
    let chunks: Vec<(usize, usize)> = (0..chunk_count)
        .map(|i| (i * CHUNK, ((i + 1) * CHUNK).min(n)))
        .collect();

    struct ChunkOut<F: Element> {
        grads: Vec<Tensor<F>>,
        ce: F,
        recon: F,
        kl: F,
        orth: Option<F>,
    }

    let results: Vec<Result<ChunkOut<F>>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, &(lo, hi))| {
            let len = hi - lo;
            let xs = Tensor::new(
                vec![len, c, h, w],
                images.data()[lo * plane..hi * plane].to_vec(),
            )?;
            let ys = Tensor::new(vec![len, k], labels.data()[lo * k..hi * k].to_vec())?;
            let eps = Tensor::new(vec![len, d], noise.data()[lo * d..hi * d].to_vec())?;
            let mut tape = Tape::new();
            let leaves = model.leaves_on_tape(&mut tape);
            let fwd = model.forward_on_tape(&mut tape, &leaves, &xs, Some(&eps))?;
            // probabilities reveal NaN in the encoder path even when the
            // cross-entropy clamp would mask it
            if !tape.value(fwd.probs).all_finite() {
                return Err(Error::NumericalFailure {
                    context: "forward probabilities",
                    batch_index: None,
                });
            }
            let loss = build_loss(
                &mut tape, model, &leaves, &fwd, &ys, weights, options, ci == 0, inv_n,
            )?;
            let ce = tape.value(loss.ce_sum).item();
            let recon = tape.value(loss.recon_sum).item();
            let kl = tape.value(loss.kl_sum).item();
            let orth = loss.orth.map(|id| tape.value(id).item());
            let mut grads = tape.backward(loss.root)?;
            let grads = leaves
                .all()
                .iter()
                .map(|&id| grads.take(id).expect("tracked leaf gradient"))
                .collect();
            Ok(ChunkOut {
                grads,
                ce,
                recon,
                kl,
                orth,
            })
        })
        .collect();

    let mut total_grads: Option<Vec<Tensor<F>>> = None;
    let mut ce = F::ZERO;
    let mut recon = F::ZERO;
    let mut kl = F::ZERO;
    let mut orth = F::ZERO;
    for res in results {
        let out = res?;
        ce += out.ce;
        recon += out.recon;
        kl += out.kl;
        if let Some(o) = out.orth {
            orth = o;
        }
        total_grads = Some(match total_grads {
            None => out.grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(out.grads.iter()) {
                    for (av, &gv) in a.data_mut().iter_mut().zip(g.data().iter()) {
                        *av += gv;
                    }
                }
                acc
            }
        });
    }

    let pred = ce * inv_n;
    let recon = recon * inv_n;
    let kl = kl * inv_n;
    let total = weights.pred * pred + weights.orth * orth + weights.recon * recon + weights.kl * kl;
    Ok((
        LossBreakdown {
            pred,
            orth,
            recon,
            kl,
            total,
        },
        total_grads.expect("at least one chunk"),
    ))
}

/// Trains in place; returns per-epoch records and the final noise-RNG state
/// for checkpointing.
pub fn train<F: Element>(
    model: &mut ProtoVaeModel<F>,
    train_set: &Dataset<F>,
    test_set: Option<&Dataset<F>>,
    config: &TrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<(Vec<EpochRecord>, RngState)> {
    let weights: LossWeights<F> = config.effective_weights();
    let options = LossOptions {
        grad_through_sim_weights: config.grad_through_sim_weights,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(STREAM_NOISE);
    let d = model.config.latent_dim;

    let shapes: Vec<Vec<usize>> = model
        .param_entries()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = Adam::new(F::from_f64(config.learning_rate), &shapes);

    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train_set.len(), config.batch_size, config.seed, epoch);
        let num_batches = batches.len();
        let mut sums = LossBreakdown::<f64>::default();
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let (xs, ys) = gather_batch(train_set, batch);
            let noise = Tensor::<F>::randn(vec![batch.len(), d], F::ONE, &mut noise_rng);
            let global_batch = epoch * num_batches + bi;
            let (breakdown, grads) = batch_gradients(model, &xs, &ys, &noise, &weights, &options)
                .map_err(|e| match e {
                    Error::NumericalFailure { context, .. } => Error::NumericalFailure {
                        context,
                        batch_index: Some(global_batch),
                    },
                    other => other,
                })?;
            if !breakdown.all_finite() {
                return Err(Error::NumericalFailure {
                    context: "training loss",
                    batch_index: Some(global_batch),
                });
            }
            let mut params = model.param_entries_mut();
            adam.step(&mut params, &grads);

            let n = batch.len() as f64;
            sums.pred += breakdown.pred.to_f64() * n;
            sums.orth += breakdown.orth.to_f64() * n;
            sums.recon += breakdown.recon.to_f64() * n;
            sums.kl += breakdown.kl.to_f64() * n;
            sums.total += breakdown.total.to_f64() * n;
            seen += batch.len();
            sink.on_batch(epoch, bi, num_batches, breakdown.total.to_f64());
        }
        let inv = 1.0 / seen as f64;
        let test_accuracy = test_set.map(|t| evaluate_accuracy(model, t));
        let record = EpochRecord {
            epoch,
            pred: sums.pred * inv,
            orth: sums.orth * inv,
            recon: sums.recon * inv,
            kl: sums.kl * inv,
            total: sums.total * inv,
            test_accuracy,
        };
        sink.on_epoch(&record);
        records.push(record);
    }

    let rng_state = RngState {
        seed: config.seed,
        word_pos: noise_rng.get_word_pos(),
    };
    Ok((records, rng_state))
}

/// Fraction of samples whose argmax prediction matches the label, using the
/// deterministic eval-mode forward (z = μ, no decoder).
pub fn evaluate_accuracy<F: Element>(model: &ProtoVaeModel<F>, dataset: &Dataset<F>) -> f64 {
    let n = dataset.len();
    if n == 0 {
        return 0.0;
    }
    let block = 256;
    let blocks: Vec<(usize, usize)> = (0..n.div_ceil(block))
        .map(|i| (i * block, ((i + 1) * block).min(n)))
        .collect();
    let correct: usize = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let indices: Vec<usize> = (lo..hi).collect();
            let (xs, _) = gather_batch(dataset, &indices);
            let s = model.similarities_eval(&xs).expect("eval forward");
            let yhat = model.classify(&s).expect("classifier shapes");
            let k = yhat.shape()[1];
            indices
                .iter()
                .enumerate()
                .filter(|&(row, &idx)| {
                    let probs = &yhat.data()[row * k..(row + 1) * k];
                    // total order so a degenerate (NaN) model scores low
                    // instead of panicking
                    let pred = probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.to_f64().total_cmp(&b.1.to_f64()))
                        .map(|(i, _)| i)
                        .expect("non-empty row");
                    pred == dataset.label(idx)
                })
                .count()
        })
        .sum();
    correct as f64 / n as f64
}

/// Mean over classes of the minimum pairwise distance between same-class
/// prototypes; shrinks when prototypes collapse.
pub fn mean_min_intra_class_distance<F: Element>(bank: &PrototypeBank<F>) -> f64 {
    let m = bank.per_class();
    if m < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..bank.num_classes() {
        let mut min = f64::INFINITY;
        for a in 0..m {
            for b in (a + 1)..m {
                let pa = bank.get(k, a);
                let pb = bank.get(k, b);
                let dist: f64 = pa
                    .iter()
                    .zip(pb.iter())
                    .map(|(&x, &y)| (x - y).to_f64().powi(2))
                    .sum();
                min = min.min(dist.sqrt());
            }
        }
        acc += min;
    }
    acc / bank.num_classes() as f64
}

// ── checkpointing ───────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the training RNG, sufficient to reproduce the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

fn bool_str(v: bool) -> &'static str {
    if v {
        "true"
    } else {
        "false"
    }
}

/// Canonical flat key=value rendering of both configs; the checkpoint
/// stores these bytes verbatim so save→load→save round-trips exactly.
pub fn render_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let channels = model
        .encoder_channels
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "num_classes={}\nprototypes_per_class={}\nlatent_dim={}\nimg_channels={}\nimg_height={}\nimg_width={}\nencoder_channels={}\nkernel={}\nstride={}\npadding={}\nepsilon={}\nleaky_slope={}\nepochs={}\nbatch_size={}\nlearning_rate={}\nseed={}\nw_pred={}\nw_orth={}\nw_recon={}\nw_kl={}\ndisable_orth={}\ndisable_kl={}\ngrad_through_sim_weights={}\n",
        model.num_classes,
        model.prototypes_per_class,
        model.latent_dim,
        model.image.0,
        model.image.1,
        model.image.2,
        channels,
        model.kernel,
        model.stride,
        model.padding,
        model.epsilon,
        model.leaky_slope,
        train.epochs,
        train.batch_size,
        train.learning_rate,
        train.seed,
        train.w_pred,
        train.w_orth,
        train.w_recon,
        train.w_kl,
        bool_str(train.disable_orth),
        bool_str(train.disable_kl),
        bool_str(train.grad_through_sim_weights),
    )
}

/// Parses the key=value block produced by [`render_config`].
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut map = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Checkpoint {
            message: format!("config line {} lacks '=': {line:?}", lineno + 1),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        map.get(key).ok_or_else(|| Error::Checkpoint {
            message: format!("config key {key} missing"),
        })
    };
    fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| Error::Checkpoint {
            message: format!("config key {key} has invalid value {raw:?}"),
        })
    }
    let channels: Vec<usize> = get("encoder_channels")?
        .split(',')
        .map(|c| num("encoder_channels", c.trim()))
        .collect::<Result<_>>()?;
    let model = ModelConfig {
        num_classes: num("num_classes", get("num_classes")?)?,
        prototypes_per_class: num("prototypes_per_class", get("prototypes_per_class")?)?,
        latent_dim: num("latent_dim", get("latent_dim")?)?,
        image: (
            num("img_channels", get("img_channels")?)?,
            num("img_height", get("img_height")?)?,
            num("img_width", get("img_width")?)?,
        ),
        encoder_channels: channels,
        kernel: num("kernel", get("kernel")?)?,
        stride: num("stride", get("stride")?)?,
        padding: num("padding", get("padding")?)?,
        epsilon: num("epsilon", get("epsilon")?)?,
        leaky_slope: num("leaky_slope", get("leaky_slope")?)?,
    };
    let train = TrainConfig {
        epochs: num("epochs", get("epochs")?)?,
        batch_size: num("batch_size", get("batch_size")?)?,
        learning_rate: num("learning_rate", get("learning_rate")?)?,
        seed: num("seed", get("seed")?)?,
        w_pred: num("w_pred", get("w_pred")?)?,
        w_orth: num("w_orth", get("w_orth")?)?,
        w_recon: num("w_recon", get("w_recon")?)?,
        w_kl: num("w_kl", get("w_kl")?)?,
        disable_orth: get("disable_orth")? == "true",
        disable_kl: get("disable_kl")? == "true",
        grad_through_sim_weights: get("grad_through_sim_weights")? == "true",
    };
    Ok((model, train))
}

/// Writes model parameters, config snapshot and RNG state. Values are
/// stored as little-endian f32 regardless of the build's element type.
pub fn save_checkpoint<F: Element>(
    path: impl AsRef<Path>,
    model: &ProtoVaeModel<F>,
    train: &TrainConfig,
    rng: RngState,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let config = render_config(&model.config, train);
    w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(config.as_bytes()).map_err(io)?;
    w.write_all(&rng.seed.to_le_bytes()).map_err(io)?;
    w.write_all(&rng.word_pos.to_le_bytes()).map_err(io)?;

    let entries = model.param_entries();
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_f32().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint back into a model plus its config snapshot.
pub fn load_checkpoint<F: Element>(
    path: impl AsRef<Path>,
) -> Result<(ProtoVaeModel<F>, TrainConfig, RngState)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            message: format!("bad magic {magic:?}, not a checkpoint"),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            message: format!("unsupported version {version}"),
        });
    }
    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(&mut r, &mut config_bytes, "config block")?;
    let config_text = String::from_utf8(config_bytes).map_err(|_| Error::Checkpoint {
        message: "config block is not UTF-8".into(),
    })?;
    let (model_config, train_config) = parse_config(&config_text)?;

    let mut seed = [0u8; 8];
    read_exact(&mut r, &mut seed, "rng seed")?;
    let mut word_pos = [0u8; 16];
    read_exact(&mut r, &mut word_pos, "rng position")?;
    let rng = RngState {
        seed: u64::from_le_bytes(seed),
        word_pos: u128::from_le_bytes(word_pos),
    };

    let mut scaffold_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ProtoVaeModel::<F>::new(model_config, &mut scaffold_rng)?;

    let tensor_count = read_u32(&mut r, "tensor count")? as usize;
    let mut entries = model.param_entries_mut();
    if tensor_count != entries.len() {
        return Err(Error::Checkpoint {
            message: format!(
                "checkpoint has {tensor_count} tensors, model expects {}",
                entries.len()
            ),
        });
    }
    for (name, tensor) in entries.iter_mut() {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let got = String::from_utf8(name_bytes).map_err(|_| Error::Checkpoint {
            message: "tensor name is not UTF-8".into(),
        })?;
        if got != *name {
            return Err(Error::Checkpoint {
                message: format!("tensor {got:?} where {name:?} was expected"),
            });
        }
        let ndim = read_u32(&mut r, "rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, "dimension")? as usize);
        }
        if dims != tensor.shape() {
            return Err(Error::Checkpoint {
                message: format!(
                    "tensor {name} has shape {dims:?}, expected {:?}",
                    tensor.shape()
                ),
            });
        }
        let mut raw = vec![0u8; tensor.numel() * 4];
        read_exact(&mut r, &mut raw, "tensor values")?;
        for (v, bytes) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = F::from_f32(f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&display, e))? != 0 {
        return Err(Error::Checkpoint {
            message: "trailing bytes after tensor data".into(),
        });
    }
    drop(entries);
    Ok((model, train_config, rng))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint {
        message: format!("truncated while reading {what}"),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
