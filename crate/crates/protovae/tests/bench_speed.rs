//! Manual throughput probe; run with --ignored.

use std::time::Instant;

use protovae::dataio::{epoch_batches, gather_batch, load_idx};
use protovae::losses::LossOptions;
use protovae::model::ModelConfig;
use protovae::tensor::Tensor;
use protovae::trainer::{batch_gradients, seeded_model};

#[test]
#[ignore]
fn time_training_batches() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let ds = load_idx::<f32>(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let config = ModelConfig::new(10, 5, 64, (1, 28, 28));
    let model = seeded_model::<f32>(config, 1).unwrap();
    let weights = protovae::trainer::TrainConfig::default().effective_weights();
    let options = LossOptions::default();

    let batches = epoch_batches(ds.len(), 128, 1, 0);
    let n_bench = 20;
    let start = Instant::now();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for batch in batches.iter().take(n_bench) {
        let (xs, ys) = gather_batch(&ds, batch);
        let noise = Tensor::<f32>::randn(vec![batch.len(), 64], 1.0, &mut rng);
        let (breakdown, _grads) =
            batch_gradients(&model, &xs, &ys, &noise, &weights, &options).unwrap();
        assert!(breakdown.all_finite());
    }
    let dt = start.elapsed().as_secs_f64();
    let per_batch = dt / n_bench as f64;
    let per_epoch = per_batch * batches.len() as f64;
    println!(
        "batch {per_batch:.3}s, epoch {per_epoch:.1}s, 3 epochs {:.1} min",
        3.0 * per_epoch / 60.0
    );
}
