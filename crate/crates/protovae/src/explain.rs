//! Local pixel-wise explanations: per-dimension similarity relevances at
//! the μ head, backpropagated through the encoder with the αβ rule and the
//! box-constrained z^B rule at the pixel layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ProtoVaeModel;
use crate::tensor::kernels;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LrpConfig<F: Element> {
    pub alpha: F,
    pub beta: F,
    /// Stabilizer added to denominators; also the η of the pointwise
    /// similarity initialization.
    pub eta: F,
    /// Input box bounds of the z^B rule.
    pub low: F,
    pub high: F,
}

impl<F: Element> Default for LrpConfig<F> {
    fn default() -> Self {
        Self {
            alpha: F::ONE,
            beta: F::ZERO,
            eta: F::from_f64(1e-6),
            low: -F::ONE,
            high: F::ONE,
        }
    }
}

impl<F: Element> LrpConfig<F> {
    /// Relevance conservation requires α − β = 1.
    pub fn with_alpha_beta(alpha: F, beta: F) -> Result<Self> {
        if ((alpha - beta) - F::ONE).abs() > F::from_f64(1e-9) {
            return Err(Error::InvalidArgument {
                op: "lrp_config",
                message: format!("alpha - beta must equal 1, got {alpha} - {beta}"),
            });
        }
        Ok(Self {
            alpha,
            beta,
            ..Default::default()
        })
    }
}

/// Signed per-pixel relevance for one (image, prototype) pair.
#[derive(Clone, Debug)]
pub struct RelevanceMap<F: Element> {
    /// (H, W)
    pub values: Tensor<F>,
    /// (class, index) of the explained prototype.
    pub prototype: (usize, usize),
    /// Caller-assigned id of the explained image.
    pub source: Option<usize>,
}

impl<F: Element> RelevanceMap<F> {
    pub fn scaled(&self, factor: F) -> Self {
        Self {
            values: self.values.map(|v| v * factor),
            prototype: self.prototype,
            source: self.source,
        }
    }
}

/// Per-dimension similarity of a mean vector to one prototype:
/// γ_d = 1 / ((μ_d − φ_d)² + η).
pub fn pointwise_similarity<F: Element>(mu: &[F], phi: &[F], eta: F) -> Tensor<F> {
    debug_assert_eq!(mu.len(), phi.len());
    let data = mu
        .iter()
        .zip(phi.iter())
        .map(|(&m, &p)| {
            let d = (m - p) * (m - p);
            F::ONE / (d + eta)
        })
        .collect();
    Tensor::new(vec![mu.len()], data).expect("gamma vector")
}

// ── layer-local propagation rules ───────────────────────────────────────

/// One propagation step of the αβ rule through a linear layer.
///
/// `activation` is the layer input (1, in); `relevance` sits at the layer
/// output (1, out). Bias contributions enter the denominators only, so
/// biased layers absorb relevance.
pub fn linear_alpha_beta<F: Element>(
    activation: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    relevance: &Tensor<F>,
    cfg: &LrpConfig<F>,
) -> Tensor<F> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    debug_assert_eq!(activation.numel(), in_dim);
    debug_assert_eq!(relevance.numel(), out_dim);
    let a = activation.data();
    let mut out = Tensor::zeros(vec![1, in_dim]);
    for j in 0..out_dim {
        let wrow = weight.row(j);
        let mut zp = F::ZERO;
        let mut zn = F::ZERO;
        for (&av, &wv) in a.iter().zip(wrow.iter()) {
            let c = av * wv;
            if c > F::ZERO {
                zp += c;
            } else {
                zn += c;
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[j];
            if bv > F::ZERO {
                zp += bv;
            } else {
                zn += bv;
            }
        }
        let r = relevance.data()[j];
        let sp = cfg.alpha * r / (zp + cfg.eta);
        let sn = cfg.beta * r / (zn - cfg.eta);
        for ((o, &av), &wv) in out.data_mut().iter_mut().zip(a.iter()).zip(wrow.iter()) {
            let c = av * wv;
            if c > F::ZERO {
                *o += c * sp;
            } else {
                *o -= c * sn;
            }
        }
    }
    out
}

fn positive_part<F: Element>(t: &Tensor<F>) -> Tensor<F> {
    t.map(|v| v.max(F::ZERO))
}

fn negative_part<F: Element>(t: &Tensor<F>) -> Tensor<F> {
    t.map(|v| v.min(F::ZERO))
}

/// αβ rule through a convolution, with activations and weights split by
/// sign so mixed-sign layers redistribute correctly.
pub fn conv_alpha_beta<F: Element>(
    activation: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
    relevance: &Tensor<F>,
    cfg: &LrpConfig<F>,
) -> Result<Tensor<F>> {
    let a_pos = positive_part(activation);
    let a_neg = negative_part(activation);
    let w_pos = positive_part(weight);
    let w_neg = negative_part(weight);
    let b_pos = bias.map(positive_part);
    let b_neg = bias.map(negative_part);

    let mut zp = kernels::conv2d(&a_pos, &w_pos, b_pos.as_ref(), stride, padding)?;
    let zp2 = kernels::conv2d(&a_neg, &w_neg, None, stride, padding)?;
    for (z, &v) in zp.data_mut().iter_mut().zip(zp2.data().iter()) {
        *z += v;
    }
    let mut zn = kernels::conv2d(&a_pos, &w_neg, b_neg.as_ref(), stride, padding)?;
    let zn2 = kernels::conv2d(&a_neg, &w_pos, None, stride, padding)?;
    for (z, &v) in zn.data_mut().iter_mut().zip(zn2.data().iter()) {
        *z += v;
    }

    let mut sp = relevance.clone();
    for (s, &z) in sp.data_mut().iter_mut().zip(zp.data().iter()) {
        *s = cfg.alpha * *s / (z + cfg.eta);
    }
    let mut sn = relevance.clone();
    for (s, &z) in sn.data_mut().iter_mut().zip(zn.data().iter()) {
        *s = cfg.beta * *s / (z - cfg.eta);
    }

    let shape = activation.shape();
    let cpp = kernels::conv2d_input_grad(shape, &w_pos, &sp, stride, padding);
    let cpm = kernels::conv2d_input_grad(shape, &w_neg, &sp, stride, padding);
    let cnm = kernels::conv2d_input_grad(shape, &w_neg, &sn, stride, padding);
    let cnp = kernels::conv2d_input_grad(shape, &w_pos, &sn, stride, padding);

    let mut out = Tensor::zeros(shape.to_vec());
    for ((((((o, &ap), &an), &xpp), &xpm), &xnm), &xnp) in out
        .data_mut()
        .iter_mut()
        .zip(a_pos.data())
        .zip(a_neg.data())
        .zip(cpp.data())
        .zip(cpm.data())
        .zip(cnm.data())
        .zip(cnp.data())
    {
        *o = ap * xpp + an * xpm - (ap * xnm + an * xnp);
    }
    Ok(out)
}

/// αβ rule through average pooling: every window cell contributes
/// a/(k·k), redistributed proportionally.
pub fn avg_pool_alpha_beta<F: Element>(
    activation: &Tensor<F>,
    kernel: usize,
    stride: usize,
    relevance: &Tensor<F>,
    cfg: &LrpConfig<F>,
) -> Result<Tensor<F>> {
    let a_pos = positive_part(activation);
    let a_neg = negative_part(activation);
    let zp = kernels::avg_pool2d(&a_pos, kernel, stride)?;
    let zn = kernels::avg_pool2d(&a_neg, kernel, stride)?;

    let mut sp = relevance.clone();
    for (s, &z) in sp.data_mut().iter_mut().zip(zp.data().iter()) {
        *s = cfg.alpha * *s / (z + cfg.eta);
    }
    let mut sn = relevance.clone();
    for (s, &z) in sn.data_mut().iter_mut().zip(zn.data().iter()) {
        *s = cfg.beta * *s / (z - cfg.eta);
    }
    let shape = activation.shape();
    let up_p = kernels::avg_pool2d_grad(shape, kernel, stride, &sp);
    let up_n = kernels::avg_pool2d_grad(shape, kernel, stride, &sn);
    let mut out = Tensor::zeros(shape.to_vec());
    for ((((o, &ap), &an), &up), &un) in out
        .data_mut()
        .iter_mut()
        .zip(a_pos.data())
        .zip(a_neg.data())
        .zip(up_p.data())
        .zip(up_n.data())
    {
        *o = ap * up - an * un;
    }
    Ok(out)
}

/// z^B rule for the layer touching pixels, with box bounds [low, high].
pub fn conv_zb<F: Element>(
    activation: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
    relevance: &Tensor<F>,
    cfg: &LrpConfig<F>,
) -> Result<Tensor<F>> {
    let w_pos = positive_part(weight);
    let w_neg = negative_part(weight);
    let lows = Tensor::full(activation.shape().to_vec(), cfg.low);
    let highs = Tensor::full(activation.shape().to_vec(), cfg.high);

    let z = kernels::conv2d(activation, weight, bias, stride, padding)?;
    let zl = kernels::conv2d(&lows, &w_pos, None, stride, padding)?;
    let zh = kernels::conv2d(&highs, &w_neg, None, stride, padding)?;
    let mut t = relevance.clone();
    for (((tv, &zv), &lv), &hv) in t
        .data_mut()
        .iter_mut()
        .zip(z.data().iter())
        .zip(zl.data().iter())
        .zip(zh.data().iter())
    {
        let denom = zv - lv - hv;
        let stab = if denom >= F::ZERO { cfg.eta } else { -cfg.eta };
        *tv = *tv / (denom + stab);
    }

    let shape = activation.shape();
    let c = kernels::conv2d_input_grad(shape, weight, &t, stride, padding);
    let cl = kernels::conv2d_input_grad(shape, &w_pos, &t, stride, padding);
    let ch = kernels::conv2d_input_grad(shape, &w_neg, &t, stride, padding);
    let mut out = Tensor::zeros(shape.to_vec());
    for ((((o, &av), &cv), &clv), &chv) in out
        .data_mut()
        .iter_mut()
        .zip(activation.data())
        .zip(c.data())
        .zip(cl.data())
        .zip(ch.data())
    {
        *o = av * cv - cfg.low * clv - cfg.high * chv;
    }
    Ok(out)
}

// ── full encoder propagation ────────────────────────────────────────────

/// Backpropagates a relevance vector sitting at the μ head down to the
/// input pixels. Returns the signed per-channel relevance (1, C, H, W).
pub fn propagate_encoder<F: Element>(
    model: &ProtoVaeModel<F>,
    x: &Tensor<F>,
    relevance_at_mu: &Tensor<F>,
    cfg: &LrpConfig<F>,
) -> Result<Tensor<F>> {
    let encoder = &model.encoder;
    let slope = encoder.slope;

    // forward replay, caching the input activation of every conv
    let mut acts = vec![x.clone()];
    let mut t = x.clone();
    for conv in &encoder.convs {
        t = kernels::conv2d(&t, &conv.weight, Some(&conv.bias), conv.stride, conv.padding)?;
        t = t.map(|v| if v >= F::ZERO { v } else { v * slope });
        acts.push(t.clone());
    }
    if !acts.iter().all(|a| a.all_finite()) {
        return Err(Error::NumericalFailure {
            context: "lrp forward replay",
            batch_index: None,
        });
    }
    let last = acts.last().expect("at least the input");
    let flat = last.reshaped(vec![1, encoder.feature_len()])?;

    // μ head
    let r = relevance_at_mu.reshaped(vec![1, relevance_at_mu.numel()])?;
    let r = linear_alpha_beta(
        &flat,
        &encoder.mu_head.weight,
        encoder.mu_head.bias.as_ref(),
        &r,
        cfg,
    );
    let mut r = r.reshaped(last.shape().to_vec())?;

    // conv stack; the first layer (touching pixels) uses the z^B rule
    for (i, conv) in encoder.convs.iter().enumerate().rev() {
        let a = &acts[i];
        r = if i == 0 {
            conv_zb(
                a,
                &conv.weight,
                Some(&conv.bias),
                conv.stride,
                conv.padding,
                &r,
                cfg,
            )?
        } else {
            conv_alpha_beta(
                a,
                &conv.weight,
                Some(&conv.bias),
                conv.stride,
                conv.padding,
                &r,
                cfg,
            )?
        };
    }
    Ok(r)
}

/// Pixel-wise explanation of image `x` with respect to prototype (k, j):
/// the pointwise similarity γ at the μ head, propagated through the
/// encoder, summed over input channels.
pub fn lrp_explain<F: Element>(
    model: &ProtoVaeModel<F>,
    x: &Tensor<F>,
    prototype: (usize, usize),
    cfg: &LrpConfig<F>,
) -> Result<RelevanceMap<F>> {
    let (class, index) = prototype;
    let (mu, _) = model.encode(x)?;
    let gamma = pointwise_similarity(mu.row(0), model.prototypes.get(class, index), cfg.eta);
    let relevance = propagate_encoder(model, x, &gamma, cfg)?;

    let (c, h, w) = (
        relevance.shape()[1],
        relevance.shape()[2],
        relevance.shape()[3],
    );
    let mut values = Tensor::zeros(vec![h, w]);
    for ch in 0..c {
        let plane = &relevance.data()[ch * h * w..(ch + 1) * h * w];
        for (o, &v) in values.data_mut().iter_mut().zip(plane.iter()) {
            *o += v;
        }
    }
    if !values.all_finite() {
        return Err(Error::NumericalFailure {
            context: "lrp relevance map",
            batch_index: None,
        });
    }
    Ok(RelevanceMap {
        values,
        prototype,
        source: None,
    })
}

// ── pixel masking ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum FillPolicy {
    /// Grayscale convention: masked pixels become 0.
    Zero,
    /// Color convention: masked pixels are redrawn uniformly in [-1, 1].
    UniformRandom { seed: u64 },
}

/// Pixel indices ordered by ascending relevance; ties break on the pixel
/// index so the order is total and deterministic.
pub fn ascending_pixel_order<F: Element>(map: &Tensor<F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.numel()).collect();
    order.sort_by(|&a, &b| {
        map.data()[a]
            .partial_cmp(&map.data()[b])
            .expect("finite relevance")
            .then(a.cmp(&b))
    });
    order
}

/// Replaces the ⌊fraction·H·W⌋ least-relevant pixels across all channels.
pub fn mask_pixels<F: Element>(
    x: &Tensor<F>,
    map: &RelevanceMap<F>,
    fraction: f64,
    fill: FillPolicy,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument {
            op: "mask_pixels",
            message: format!("fraction {fraction} outside [0, 1]"),
        });
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    if map.values.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "mask_pixels",
            dim: 0,
            expected: h,
            got: map.values.shape()[0],
        });
    }
    let count = (fraction * (h * w) as f64).floor() as usize;
    let order = ascending_pixel_order(&map.values);
    let mut out = x.clone();
    let mut rng = match fill {
        FillPolicy::UniformRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        FillPolicy::Zero => None,
    };
    for &p in order.iter().take(count) {
        for ch in 0..c {
            let v = match &mut rng {
                None => F::ZERO,
                Some(r) => F::uniform(r, -F::ONE, F::ONE),
            };
            out.data_mut()[ch * h * w + p] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> ProtoVaeModel<f64> {
        let mut config = ModelConfig::new(2, 2, 4, (1, 6, 6));
        config.encoder_channels = vec![2, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProtoVaeModel::new(config, &mut rng).unwrap()
    }

    #[test]
    fn pointwise_similarity_values() {
        let eta = 1e-6;
        let mu = [1.0f64, 2.0, 3.0];
        let gamma = pointwise_similarity(&mu, &mu, eta);
        for &g in gamma.data() {
            assert!((g - 1.0 / eta).abs() < 1e-3);
        }
        let shifted = [2.0f64, 2.0, 3.0];
        let gamma = pointwise_similarity(&mu, &shifted, eta);
        assert!((gamma.data()[0] - 0.999999).abs() < 1e-6);
        // strictly decreasing in |μ − φ|
        let far = pointwise_similarity(&mu, &[4.0, 2.0, 3.0], eta);
        assert!(far.data()[0] < gamma.data()[0]);
    }

    #[test]
    fn linear_rule_hand_example_and_conservation() {
        // all-positive two-neuron layer, α=1, β=0
        let a = tensor(&[1, 2], &[1.0f64, 2.0]);
        let w = tensor(&[2, 2], &[1.0f64, 1.0, 2.0, 0.5]);
        let r = tensor(&[1, 2], &[0.6f64, 0.4]);
        let cfg = LrpConfig::default();
        let out = linear_alpha_beta(&a, &w, None, &r, &cfg);
        // z1 = 3, z2 = 3: R_in = [1/3·0.6 + 2/3·0.4, 2/3·0.6 + 1/3·0.4]
        let want = [0.6 / 3.0 + 0.8 / 3.0, 1.2 / 3.0 + 0.4 / 3.0];
        for (o, w) in out.data().iter().zip(want.iter()) {
            assert!((o - w).abs() < 1e-6);
        }
        let sum_in: f64 = out.data().iter().sum();
        assert!((sum_in - 1.0).abs() < 1e-5);
    }

    #[test]
    fn alpha_beta_conserves_relevance_on_bias_free_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let w1 = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let w2 = Tensor::randn(vec![4, 3, 3, 3], 0.5, &mut rng);
        let wl = Tensor::randn(vec![5, 4 * 2 * 2], 0.5, &mut rng);
        let cfg = LrpConfig::default();

        let a1 = kernels::conv2d(&x, &w1, None, 2, 1).unwrap();
        let a2 = kernels::conv2d(&a1, &w2, None, 2, 1).unwrap();
        let flat = a2.reshaped(vec![1, 16]).unwrap();
        let out = kernels::linear(&flat, &wl, None).unwrap();

        let r_top = Tensor::rand_uniform(vec![1, 5], 0.1, 1.0, &mut rng);
        let r2 = linear_alpha_beta(&flat, &wl, None, &r_top, &cfg);
        let sum = |t: &Tensor<f64>| t.data().iter().sum::<f64>();
        assert!((sum(&r2) - sum(&r_top)).abs() / sum(&r_top).abs() < 1e-5);

        let r2 = r2.reshaped(a2.shape().to_vec()).unwrap();
        let r1 = conv_alpha_beta(&a1, &w2, None, 2, 1, &r2, &cfg).unwrap();
        assert!((sum(&r1) - sum(&r2)).abs() / sum(&r2).abs() < 1e-5);

        let r0 = conv_alpha_beta(&x, &w1, None, 2, 1, &r1, &cfg).unwrap();
        assert!((sum(&r0) - sum(&r1)).abs() / sum(&r1).abs() < 1e-5);
        let _ = out;
    }

    #[test]
    fn avg_pool_rule_conserves_on_positive_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4], 0.1, 1.0, &mut rng);
        let r = Tensor::rand_uniform(vec![1, 2, 2, 2], 0.1, 1.0, &mut rng);
        let cfg = LrpConfig::default();
        let back = avg_pool_alpha_beta(&x, 2, 2, &r, &cfg).unwrap();
        let sum = |t: &Tensor<f64>| t.data().iter().sum::<f64>();
        assert!((sum(&back) - sum(&r)).abs() / sum(&r) < 1e-5);
    }

    #[test]
    fn alpha_beta_config_validation() {
        assert!(LrpConfig::with_alpha_beta(2.0, 1.0).is_ok());
        assert!(LrpConfig::<f64>::with_alpha_beta(1.5, 1.0).is_err());
    }

    #[test]
    fn propagation_is_linear_in_initial_relevance() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let cfg = LrpConfig::default();

        let zero = Tensor::zeros(vec![4]);
        let map0 = propagate_encoder(&model, &x, &zero, &cfg).unwrap();
        assert!(map0.data().iter().all(|&v| v == 0.0));

        let gamma = Tensor::rand_uniform(vec![4], 0.1, 2.0, &mut rng);
        let base = propagate_encoder(&model, &x, &gamma, &cfg).unwrap();
        let scaled_in = gamma.map(|v| v * 3.25);
        let scaled = propagate_encoder(&model, &x, &scaled_in, &cfg).unwrap();
        for (s, b) in scaled.data().iter().zip(base.data().iter()) {
            assert!((s - 3.25 * b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn explain_produces_finite_map_of_image_shape() {
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::rand_uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let map = lrp_explain(&model, &x, (1, 0), &LrpConfig::default()).unwrap();
        assert_eq!(map.values.shape(), &[6, 6]);
        assert!(map.values.all_finite());
        assert_eq!(map.prototype, (1, 0));
    }

    #[test]
    fn mask_fraction_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let map = RelevanceMap {
            values: Tensor::rand_uniform(vec![3, 3], -1.0, 1.0, &mut rng),
            prototype: (0, 0),
            source: None,
        };
        let same = mask_pixels(&x, &map, 0.0, FillPolicy::Zero).unwrap();
        assert_eq!(same.data(), x.data());
        let gone = mask_pixels(&x, &map, 1.0, FillPolicy::Zero).unwrap();
        assert!(gone.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_replaces_exactly_the_lowest_half() {
        let x = tensor(&[1, 1, 2, 2], &[0.9f64, 0.8, 0.7, 0.6]);
        let map = RelevanceMap {
            values: tensor(&[2, 2], &[0.5f64, 0.1, 0.9, 0.2]),
            prototype: (0, 0),
            source: None,
        };
        let masked = mask_pixels(&x, &map, 0.5, FillPolicy::Zero).unwrap();
        // lowest two relevances sit at pixels 1 and 3
        assert_eq!(masked.data(), &[0.9, 0.0, 0.7, 0.0]);
    }

    #[test]
    fn mask_tie_break_is_stable_by_index() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let map = RelevanceMap {
            values: Tensor::zeros(vec![2, 2]),
            prototype: (0, 0),
            source: None,
        };
        let masked = mask_pixels(&x, &map, 0.5, FillPolicy::Zero).unwrap();
        // all-equal relevance: the first two pixel indices are masked
        assert_eq!(masked.data(), &[0.0, 0.0, 1.0, 1.0]);
        let again = mask_pixels(&x, &map, 0.5, FillPolicy::Zero).unwrap();
        assert_eq!(masked.data(), again.data());
    }

    #[test]
    fn random_fill_is_seed_deterministic_and_in_range() {
        let x = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.5);
        let map = RelevanceMap {
            values: Tensor::zeros(vec![4, 4]),
            prototype: (0, 0),
            source: None,
        };
        let a = mask_pixels(&x, &map, 0.5, FillPolicy::UniformRandom { seed: 3 }).unwrap();
        let b = mask_pixels(&x, &map, 0.5, FillPolicy::UniformRandom { seed: 3 }).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
