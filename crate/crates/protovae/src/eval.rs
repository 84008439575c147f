//! Quantitative explanation-faithfulness metrics: Average Drop, Average
//! Increase, and the relevance-ordering test.
//!
//! All metric loops run eval-mode forwards (z = μ), so results are
//! noise-free; parallelism is over images with an ordered reduction, which
//! keeps runs reproducible for a fixed seed.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::explain::{lrp_explain, mask_pixels, FillPolicy, LrpConfig, RelevanceMap};
use crate::model::ProtoVaeModel;
use crate::tensor::{Element, Tensor};

/// Reproducibility fingerprint attached to every metric record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsFingerprint {
    pub seed: u64,
    pub epsilon: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fraction: f64,
}

/// One metric result row with its full configuration fingerprint.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub metric: String,
    pub dataset: String,
    pub values: Vec<f64>,
    pub fingerprint: MetricsFingerprint,
}

/// Pixel masking fraction of the AD/AI protocol.
pub const MASK_FRACTION: f64 = 0.5;

// ── Average Drop / Average Increase ─────────────────────────────────────

/// AD and AI from aligned original/masked similarity scores.
///
/// AD = (100/n) Σ max(0, s − s') / s, clamped at zero per term;
/// AI = (1/n) Σ [[s < s']].
pub fn ad_ai_from_scores(original: &[f64], masked: &[f64]) -> (f64, f64) {
    assert_eq!(original.len(), masked.len());
    let n = original.len() as f64;
    let mut drop = 0.0;
    let mut increase = 0usize;
    for (&s, &s50) in original.iter().zip(masked.iter()) {
        drop += (s - s50).max(0.0) / s;
        if s < s50 {
            increase += 1;
        }
    }
    (100.0 * drop / n, increase as f64 / n)
}

/// Masked-vs-original similarity scores for every (image, prototype) pair.
/// `maps[i]` holds the K·M relevance maps of image i in row-major (k, j)
/// order.
pub fn masked_similarity_scores<F: Element>(
    model: &ProtoVaeModel<F>,
    images: &[Tensor<F>],
    maps: &[Vec<RelevanceMap<F>>],
    fraction: f64,
    fill: FillPolicy,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if images.len() != maps.len() {
        return Err(Error::InvalidArgument {
            op: "ad_ai",
            message: format!("{} images but {} map sets", images.len(), maps.len()),
        });
    }
    let per_image: Vec<Result<(Vec<f64>, Vec<f64>)>> = images
        .par_iter()
        .zip(maps.par_iter())
        .map(|(x, image_maps)| {
            let s = model.similarities_eval(x)?;
            let total = s.numel();
            if image_maps.len() != total {
                return Err(Error::InvalidArgument {
                    op: "ad_ai",
                    message: format!("expected {total} maps per image, got {}", image_maps.len()),
                });
            }
            let mut orig = Vec::with_capacity(total);
            let mut masked = Vec::with_capacity(total);
            for (p, map) in image_maps.iter().enumerate() {
                let xm = mask_pixels(x, map, fraction, fill)?;
                let sm = model.similarities_eval(&xm)?;
                orig.push(s.data()[p].to_f64());
                masked.push(sm.data()[p].to_f64());
            }
            Ok((orig, masked))
        })
        .collect();

    let mut orig = Vec::new();
    let mut masked = Vec::new();
    for r in per_image {
        let (o, m) = r?;
        orig.extend(o);
        masked.extend(m);
    }
    Ok((orig, masked))
}

/// Average Drop in percent over all (image, prototype) pairs.
pub fn average_drop<F: Element>(
    model: &ProtoVaeModel<F>,
    images: &[Tensor<F>],
    maps: &[Vec<RelevanceMap<F>>],
    fraction: f64,
    fill: FillPolicy,
) -> Result<f64> {
    let (o, m) = masked_similarity_scores(model, images, maps, fraction, fill)?;
    Ok(ad_ai_from_scores(&o, &m).0)
}

/// Average Increase in [0, 1] over all (image, prototype) pairs.
pub fn average_increase<F: Element>(
    model: &ProtoVaeModel<F>,
    images: &[Tensor<F>],
    maps: &[Vec<RelevanceMap<F>>],
    fraction: f64,
    fill: FillPolicy,
) -> Result<f64> {
    let (o, m) = masked_similarity_scores(model, images, maps, fraction, fill)?;
    Ok(ad_ai_from_scores(&o, &m).1)
}

/// LRP maps for every prototype of every listed image.
pub fn explain_all_prototypes<F: Element>(
    model: &ProtoVaeModel<F>,
    dataset: &Dataset<F>,
    indices: &[usize],
    cfg: &LrpConfig<F>,
) -> Result<Vec<Vec<RelevanceMap<F>>>> {
    let k = model.config.num_classes;
    let m = model.config.prototypes_per_class;
    indices
        .par_iter()
        .map(|&idx| {
            let x = dataset.image(idx);
            let mut maps = Vec::with_capacity(k * m);
            for class in 0..k {
                for j in 0..m {
                    let mut map = lrp_explain(model, &x, (class, j), cfg)?;
                    map.source = Some(idx);
                    maps.push(map);
                }
            }
            Ok(maps)
        })
        .collect()
}

// ── relevance-ordering test ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Lrp,
    Random,
}

impl CurveKind {
    pub fn label(self) -> &'static str {
        match self {
            CurveKind::Lrp => "lrp",
            CurveKind::Random => "random",
        }
    }
}

/// Mean predicted-class probability as a function of the revealed pixel
/// fraction.
#[derive(Clone, Debug)]
pub struct OrderingCurve {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub baseline: CurveKind,
}

/// 30-point grid on [0, 1], denser near zero where curves move fastest:
/// 0, a 14-point geometric ramp to 0.1, then 15 linear steps to 1.
pub fn default_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    let (start, knee, geo) = (0.002f64, 0.1f64, 14);
    let ratio = (knee / start).powf(1.0 / (geo as f64 - 1.0));
    let mut v = start;
    for _ in 0..geo {
        grid.push(v);
        v *= ratio;
    }
    let linear = 15;
    for i in 1..=linear {
        grid.push(knee + (1.0 - knee) * i as f64 / linear as f64);
    }
    grid
}

/// Pixel indices by descending relevance; ties break on pixel index.
pub fn descending_pixel_order<F: Element>(map: &Tensor<F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.numel()).collect();
    order.sort_by(|&a, &b| {
        map.data()[b]
            .partial_cmp(&map.data()[a])
            .expect("finite relevance")
            .then(a.cmp(&b))
    });
    order
}

/// Eval-mode probability assigned to one class for one image.
pub fn class_probability<F: Element>(
    model: &ProtoVaeModel<F>,
    x: &Tensor<F>,
    label: usize,
) -> Result<f64> {
    let s = model.similarities_eval(x)?;
    let yhat = model.classify(&s)?;
    Ok(yhat.data()[label].to_f64())
}

/// Reveals pixels of `x` over `base` in the given order and records the
/// probability of `label` at each grid fraction. All grid points go
/// through the encoder as one batch.
fn reveal_curve<F: Element>(
    model: &ProtoVaeModel<F>,
    x: &Tensor<F>,
    base: &Tensor<F>,
    order: &[usize],
    label: usize,
    grid: &[f64],
    kind: CurveKind,
) -> Result<OrderingCurve> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument {
            op: "relevance_ordering",
            message: "fraction grid must be non-decreasing".into(),
        });
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut batch = Vec::with_capacity(grid.len() * c * plane);
    let mut composite = base.clone();
    let mut revealed = 0usize;
    for &p in grid {
        let reveal = ((p * plane as f64).ceil() as usize).min(plane);
        // each composite extends the previous one along the ascending grid
        for &pix in order[revealed.min(reveal)..reveal].iter() {
            for ch in 0..c {
                composite.data_mut()[ch * plane + pix] = x.data()[ch * plane + pix];
            }
        }
        revealed = revealed.max(reveal);
        batch.extend_from_slice(composite.data());
    }
    let batch = Tensor::new(vec![grid.len(), c, h, w], batch)?;
    let s = model.similarities_eval(&batch)?;
    let yhat = model.classify(&s)?;
    let k = yhat.shape()[1];
    let probabilities = (0..grid.len())
        .map(|i| yhat.data()[i * k + label].to_f64())
        .collect();
    Ok(OrderingCurve {
        fractions: grid.to_vec(),
        probabilities,
        baseline: kind,
    })
}

/// Relevance-ordering test for one image and one map: starts from a random
/// image and reveals pixels in decreasing relevance order, plus a baseline
/// with the same pixels revealed in random order.
pub fn relevance_ordering_curves<F: Element>(
    model: &ProtoVaeModel<F>,
    x: &Tensor<F>,
    label: usize,
    map: &RelevanceMap<F>,
    grid: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(OrderingCurve, OrderingCurve)> {
    let base = Tensor::rand_uniform(x.shape().to_vec(), -F::ONE, F::ONE, rng);
    let order = descending_pixel_order(&map.values);
    let lrp = reveal_curve(model, x, &base, &order, label, grid, CurveKind::Lrp)?;
    let mut shuffled = order;
    shuffled.shuffle(rng);
    let random = reveal_curve(model, x, &base, &shuffled, label, grid, CurveKind::Random)?;
    Ok((lrp, random))
}

/// Pointwise mean of curves sharing one grid and kind.
pub fn mean_curve(curves: &[OrderingCurve]) -> OrderingCurve {
    let first = curves.first().expect("at least one curve");
    let mut probabilities = vec![0.0; first.fractions.len()];
    for c in curves {
        for (acc, &p) in probabilities.iter_mut().zip(c.probabilities.iter()) {
            *acc += p;
        }
    }
    for p in probabilities.iter_mut() {
        *p /= curves.len() as f64;
    }
    OrderingCurve {
        fractions: first.fractions.clone(),
        probabilities,
        baseline: first.baseline,
    }
}

/// Trapezoidal area under a curve over its fraction grid.
pub fn trapezoid_area(curve: &OrderingCurve) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.fractions.len() {
        let dx = curve.fractions[i] - curve.fractions[i - 1];
        area += dx * (curve.probabilities[i] + curve.probabilities[i - 1]) / 2.0;
    }
    area
}

/// Full ordering protocol over a set of images, averaged over every
/// prototype's map. Deterministic per (seed, image index).
pub fn ordering_test<F: Element>(
    model: &ProtoVaeModel<F>,
    dataset: &Dataset<F>,
    indices: &[usize],
    grid: &[f64],
    cfg: &LrpConfig<F>,
    seed: u64,
) -> Result<(OrderingCurve, OrderingCurve)> {
    let k = model.config.num_classes;
    let m = model.config.prototypes_per_class;
    let per_image: Vec<Result<(OrderingCurve, OrderingCurve)>> = indices
        .par_iter()
        .map(|&idx| {
            let x = dataset.image(idx);
            let label = dataset.label(idx);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x0dde_0000 ^ idx as u64);
            let mut lrp_curves = Vec::with_capacity(k * m);
            let mut random_curves = Vec::with_capacity(k * m);
            for class in 0..k {
                for j in 0..m {
                    let map = lrp_explain(model, &x, (class, j), cfg)?;
                    let (l, r) =
                        relevance_ordering_curves(model, &x, label, &map, grid, &mut rng)?;
                    lrp_curves.push(l);
                    random_curves.push(r);
                }
            }
            Ok((mean_curve(&lrp_curves), mean_curve(&random_curves)))
        })
        .collect();

    let mut lrp_all = Vec::with_capacity(indices.len());
    let mut random_all = Vec::with_capacity(indices.len());
    for r in per_image {
        let (l, rd) = r?;
        lrp_all.push(l);
        random_all.push(rd);
    }
    Ok((mean_curve(&lrp_all), mean_curve(&random_all)))
}

// ── CSV emission ────────────────────────────────────────────────────────

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let display = path.display().to_string();
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(display, e))?,
    ))
}

/// ad_ai.csv: one row per record with the full fingerprint.
pub fn write_ad_ai_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "dataset,seed,ad,ai,epsilon,eta,alpha,beta,fraction").map_err(io)?;
    for r in records {
        let f = &r.fingerprint;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.dataset, f.seed, r.values[0], r.values[1], f.epsilon, f.eta, f.alpha, f.beta, f.fraction
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// ordering.csv: (p, mean_prob, baseline) rows; the fingerprint rides in a
/// leading comment so the column set stays as specified.
pub fn write_ordering_csv(
    path: impl AsRef<Path>,
    curves: &[OrderingCurve],
    fingerprint: &MetricsFingerprint,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(
        w,
        "# seed={} epsilon={} eta={} alpha={} beta={} fraction={}",
        fingerprint.seed,
        fingerprint.epsilon,
        fingerprint.eta,
        fingerprint.alpha,
        fingerprint.beta,
        fingerprint.fraction
    )
    .map_err(io)?;
    writeln!(w, "p,mean_prob,baseline").map_err(io)?;
    for c in curves {
        for (&p, &prob) in c.fractions.iter().zip(c.probabilities.iter()) {
            writeln!(w, "{},{},{}", p, prob, c.baseline.label()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> ProtoVaeModel<f64> {
        let mut config = ModelConfig::new(2, 2, 4, (1, 6, 6));
        config.encoder_channels = vec![2, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProtoVaeModel::new(config, &mut rng).unwrap()
    }

    fn toy_images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::rand_uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng))
            .collect()
    }

    #[test]
    fn ad_ai_formula_examples() {
        // unchanged scores → zero drop, zero increase
        let (ad, ai) = ad_ai_from_scores(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(ad, 0.0);
        assert_eq!(ai, 0.0);
        // single term s=2, s'=1 → AD 50%
        let (ad, _) = ad_ai_from_scores(&[2.0], &[1.0]);
        assert!((ad - 50.0).abs() < 1e-12);
        // increases clamp to zero drop and count toward AI
        let (ad, ai) = ad_ai_from_scores(&[1.0, 1.0], &[2.0, 3.0]);
        assert_eq!(ad, 0.0);
        assert_eq!(ai, 1.0);
        // exactly half the terms increase
        let (_, ai) = ad_ai_from_scores(&[1.0, 1.0], &[2.0, 0.5]);
        assert_eq!(ai, 0.5);
        // AD bounded in [0, 100], AI in [0, 1]
        let (ad, ai) = ad_ai_from_scores(&[2.0, 4.0], &[0.0, 0.0]);
        assert!(ad <= 100.0 && (0.0..=1.0).contains(&ai));
    }

    #[test]
    fn ad_ai_invariant_to_positive_map_rescaling() {
        let model = tiny_model(1);
        let images = toy_images(2, 2);
        let cfg = LrpConfig::default();
        let maps: Vec<Vec<RelevanceMap<f64>>> = images
            .iter()
            .map(|x| {
                let mut v = Vec::new();
                for class in 0..2 {
                    for j in 0..2 {
                        v.push(lrp_explain(&model, x, (class, j), &cfg).unwrap());
                    }
                }
                v
            })
            .collect();
        let scaled: Vec<Vec<RelevanceMap<f64>>> = maps
            .iter()
            .map(|v| v.iter().map(|m| m.scaled(37.5)).collect())
            .collect();
        let (o1, m1) =
            masked_similarity_scores(&model, &images, &maps, 0.5, FillPolicy::Zero).unwrap();
        let (o2, m2) =
            masked_similarity_scores(&model, &images, &scaled, 0.5, FillPolicy::Zero).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(m1, m2);
        let a = ad_ai_from_scores(&o1, &m1);
        let b = ad_ai_from_scores(&o2, &m2);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mask_fraction_gives_zero_drop() {
        let model = tiny_model(3);
        let images = toy_images(1, 4);
        let cfg = LrpConfig::default();
        let maps = vec![(0..4)
            .map(|p| lrp_explain(&model, &images[0], (p / 2, p % 2), &cfg).unwrap())
            .collect::<Vec<_>>()];
        let ad = average_drop(&model, &images, &maps, 0.0, FillPolicy::Zero).unwrap();
        let ai = average_increase(&model, &images, &maps, 0.0, FillPolicy::Zero).unwrap();
        assert_eq!(ad, 0.0);
        assert_eq!(ai, 0.0);
    }

    #[test]
    fn grid_covers_unit_interval_with_thirty_points() {
        let g = default_grid();
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], 0.0);
        assert!((g[g.len() - 1] - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ordering_curve_endpoints() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let map = lrp_explain(&model, &x, (0, 0), &LrpConfig::default()).unwrap();
        let grid = [0.0, 0.5, 1.0];
        let mut curve_rng = ChaCha8Rng::seed_from_u64(7);
        let (lrp, random) =
            relevance_ordering_curves(&model, &x, 1, &map, &grid, &mut curve_rng).unwrap();

        // p = 1 reveals the full image: exactly the model's probability on x
        let full = class_probability(&model, &x, 1).unwrap();
        assert_eq!(*lrp.probabilities.last().unwrap(), full);
        assert_eq!(*random.probabilities.last().unwrap(), full);

        // p = 0 scores the pure random base image for both curves
        assert_eq!(lrp.probabilities[0], random.probabilities[0]);

        // fixed seed reproduces the whole curve
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let (lrp2, _) = relevance_ordering_curves(&model, &x, 1, &map, &grid, &mut rng2).unwrap();
        assert_eq!(lrp.probabilities, lrp2.probabilities);
    }

    #[test]
    fn trapezoid_and_mean_curve() {
        let c = OrderingCurve {
            fractions: vec![0.0, 0.5, 1.0],
            probabilities: vec![0.0, 1.0, 1.0],
            baseline: CurveKind::Lrp,
        };
        assert!((trapezoid_area(&c) - 0.75).abs() < 1e-12);
        let d = OrderingCurve {
            fractions: vec![0.0, 0.5, 1.0],
            probabilities: vec![1.0, 0.0, 0.0],
            baseline: CurveKind::Lrp,
        };
        let m = mean_curve(&[c, d]);
        assert_eq!(m.probabilities, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn descending_order_breaks_ties_by_index() {
        let map = crate::tensor::tensor(&[2, 2], &[0.5f64, 0.9, 0.5, 0.1]);
        assert_eq!(descending_pixel_order(&map), vec![1, 0, 2, 3]);
    }

    #[test]
    fn csv_written_with_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let fp = MetricsFingerprint {
            seed: 7,
            epsilon: 1e-4,
            eta: 1e-6,
            alpha: 1.0,
            beta: 0.0,
            fraction: 0.5,
        };
        let rec = MetricsRecord {
            metric: "ad_ai".into(),
            dataset: "toy".into(),
            values: vec![12.5, 0.25],
            fingerprint: fp,
        };
        let p = dir.path().join("ad_ai.csv");
        write_ad_ai_csv(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("dataset,seed,ad,ai,"));
        assert!(text.contains("toy,7,12.5,0.25,"));

        let curve = OrderingCurve {
            fractions: vec![0.0, 1.0],
            probabilities: vec![0.1, 0.9],
            baseline: CurveKind::Random,
        };
        let p = dir.path().join("ordering.csv");
        write_ordering_csv(&p, &[curve], &fp).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("p,mean_prob,baseline"));
        assert!(text.contains("1,0.9,random"));
    }
}
