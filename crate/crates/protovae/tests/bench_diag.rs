//! Manual diagnostic: per-epoch loss breakdown on a training subset.

use protovae::dataio::load_idx;
use protovae::model::ModelConfig;
use protovae::trainer::{
    evaluate_accuracy, seeded_model, train, EpochRecord, ProgressSink, TrainConfig,
};

struct Print;
impl ProgressSink for Print {
    fn on_epoch(&mut self, r: &EpochRecord) {
        eprintln!(
            "epoch {}: pred {:.4} orth {:.4} recon {:.2} kl {:.3} total {:.2} acc {:?}",
            r.epoch, r.pred, r.orth, r.recon, r.kl, r.total, r.test_accuracy
        );
    }
}

#[test]
#[ignore]
fn subset_training_breakdown() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let full = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test = load_idx::<f32>(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let subset: Vec<usize> = (0..10_000).collect();
    let train_set = full.subset(&subset, "mnist-10k");
    let test_idx: Vec<usize> = (0..2_000).collect();
    let test_set = test.subset(&test_idx, "mnist-t2k");

    let config = TrainConfig {
        epochs: 3,
        seed: 7,
        ..Default::default()
    };
    let mut model = seeded_model::<f32>(ModelConfig::new(10, 5, 64, (1, 28, 28)), 7).unwrap();
    train(&mut model, &train_set, Some(&test_set), &config, &mut Print).unwrap();
    let acc = evaluate_accuracy(&model, &test_set);
    eprintln!("final subset accuracy {acc:.4}");
}

#[test]
#[ignore]
fn subset_geometry_probe() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let full = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let subset: Vec<usize> = (0..10_000).collect();
    let train_set = full.subset(&subset, "mnist-10k");

    let config = TrainConfig {
        epochs: 3,
        seed: 7,
        ..Default::default()
    };
    let mut model = seeded_model::<f32>(ModelConfig::new(10, 5, 28 * 0 + 64, (1, 28, 28)), 7).unwrap();
    train(&mut model, &train_set, None, &config, &mut Print).unwrap();

    // latent geometry after training
    let idx: Vec<usize> = (0..512).collect();
    let (xs, _) = protovae::dataio::gather_batch(&train_set, &idx);
    let (mu, sigma) = model.encode(&xs).unwrap();
    let d = 64;
    let mu_norm: f32 = (0..512)
        .map(|i| mu.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt())
        .sum::<f32>()
        / 512.0;
    let sig_mean: f32 = sigma.data().iter().sum::<f32>() / sigma.numel() as f32;
    let phi = model.prototypes.matrix();
    let phi_norm: f32 = (0..50)
        .map(|i| phi.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt())
        .sum::<f32>()
        / 50.0;
    let s = model.similarities(&mu);
    let smin = s.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let smax = s.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    eprintln!("mean ‖mu‖ {mu_norm:.3}, mean sigma {sig_mean:.3}, mean ‖phi‖ {phi_norm:.3}, s range [{smin:.4}, {smax:.4}]");
}

#[test]
#[ignore]
fn subset_training_recon_downweighted() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let full = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test = load_idx::<f32>(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let subset: Vec<usize> = (0..10_000).collect();
    let train_set = full.subset(&subset, "mnist-10k");
    let test_idx: Vec<usize> = (0..2_000).collect();
    let test_set = test.subset(&test_idx, "mnist-t2k");

    let config = TrainConfig {
        epochs: 3,
        seed: 7,
        w_recon: 1.0 / 784.0,
        w_kl: 1.0 / 64.0,
        ..Default::default()
    };
    let mut model = seeded_model::<f32>(ModelConfig::new(10, 5, 64, (1, 28, 28)), 7).unwrap();
    train(&mut model, &train_set, Some(&test_set), &config, &mut Print).unwrap();
    let acc = evaluate_accuracy(&model, &test_set);
    eprintln!("final subset accuracy (balanced weights) {acc:.4}");
}

#[test]
#[ignore]
fn subset_training_pure_ce() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let full = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test = load_idx::<f32>(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let subset: Vec<usize> = (0..10_000).collect();
    let train_set = full.subset(&subset, "mnist-10k");
    let test_idx: Vec<usize> = (0..2_000).collect();
    let test_set = test.subset(&test_idx, "mnist-t2k");

    let config = TrainConfig {
        epochs: 3,
        seed: 7,
        w_recon: 0.0,
        w_kl: 0.0,
        w_orth: 0.0,
        ..Default::default()
    };
    let mut model = seeded_model::<f32>(ModelConfig::new(10, 5, 64, (1, 28, 28)), 7).unwrap();
    train(&mut model, &train_set, Some(&test_set), &config, &mut Print).unwrap();
    let acc = evaluate_accuracy(&model, &test_set);
    eprintln!("final subset accuracy (pure CE) {acc:.4}");
}

#[test]
#[ignore]
fn inspect_first_steps() {
    use protovae::losses::{build_loss, LossOptions, LossWeights};
    use protovae::tensor::tape::Tape;
    use protovae::tensor::Tensor;
    use rand::SeedableRng;

    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let full = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let model = seeded_model::<f32>(ModelConfig::new(10, 5, 64, (1, 28, 28)), 7).unwrap();

    let idx: Vec<usize> = (0..8).collect();
    let (xs, ys) = protovae::dataio::gather_batch(&full, &idx);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let noise = Tensor::<f32>::randn(vec![8, 64], 1.0, &mut rng);

    let mut tape = Tape::new();
    let leaves = model.leaves_on_tape(&mut tape);
    let fwd = model.forward_on_tape(&mut tape, &leaves, &xs, Some(&noise)).unwrap();
    let s = tape.value(fwd.s);
    let srow = &s.data()[..50];
    let smin = srow.iter().cloned().fold(f32::INFINITY, f32::min);
    let smax = srow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    eprintln!("sample0 s range [{smin:.4}, {smax:.4}] first8 {:?}", &srow[..8]);
    let logits = tape.value(fwd.logits);
    eprintln!("sample0 logits {:?}", &logits.data()[..10]);
    let probs = tape.value(fwd.probs);
    eprintln!("sample0 probs {:?}", &probs.data()[..10]);

    let loss = build_loss(
        &mut tape, &model, &leaves, &fwd, &ys,
        &LossWeights::default(), &LossOptions::default(), true, 1.0 / 8.0,
    )
    .unwrap();
    eprintln!(
        "ce_sum {:.4} recon_sum {:.2} kl_sum {:.3} orth {:.4}",
        tape.value(loss.ce_sum).item(),
        tape.value(loss.recon_sum).item(),
        tape.value(loss.kl_sum).item(),
        tape.value(loss.orth.unwrap()).item()
    );
    let mut grads = tape.backward(loss.root).unwrap();
    let names: Vec<String> = model.param_entries().iter().map(|(n, _)| n.clone()).collect();
    for (i, id) in leaves.all().iter().enumerate() {
        let g = grads.take(*id).unwrap();
        let norm: f32 = g.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        let max = g.data().iter().cloned().fold(0.0f32, |a, b| a.max(b.abs()));
        eprintln!("grad {:28} l2 {norm:.6} linf {max:.6}", names[i]);
    }
}
