//! The three-term objective: cross-entropy prediction loss, class-wise
//! prototype orthonormalization, and the mixture-of-VAEs term whose KL
//! component is weighted by normalized similarities to the true-class
//! prototypes.

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ModelLeaves, ProtoVaeModel, PrototypeBank, TapedForward};
use crate::tensor::tape::{Tape, ValueId};
use crate::tensor::{Element, Tensor};

/// Floor applied to probabilities inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<F: Element> {
    pub pred: F,
    pub orth: F,
    pub recon: F,
    pub kl: F,
}

impl<F: Element> Default for LossWeights<F> {
    /// All ones: the unweighted three-term sum.
    fn default() -> Self {
        Self {
            pred: F::ONE,
            orth: F::ONE,
            recon: F::ONE,
            kl: F::ONE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<F: Element> {
    pub pred: F,
    pub orth: F,
    pub recon: F,
    pub kl: F,
    pub total: F,
}

impl<F: Element> LossBreakdown<F> {
    pub fn all_finite(&self) -> bool {
        self.pred.is_finite()
            && self.orth.is_finite()
            && self.recon.is_finite()
            && self.kl.is_finite()
            && self.total.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    /// When set, gradients flow through the normalized similarity weights
    /// s̃ of the KL term instead of treating them as fixed mixture
    /// responsibilities.
    pub grad_through_sim_weights: bool,
}

// ── value-level terms ───────────────────────────────────────────────────

/// Mean cross-entropy of probability rows against one-hot labels.
pub fn loss_pred<F: Element>(yhat: &Tensor<F>, y: &Tensor<F>) -> F {
    let k = yhat.shape()[1];
    let n = yhat.shape()[0];
    let floor = F::from_f64(PROB_FLOOR);
    let mut acc = F::ZERO;
    for (prow, yrow) in yhat
        .data()
        .chunks_exact(k)
        .zip(y.data().chunks_exact(k))
    {
        let mut ce = F::ZERO;
        for (&p, &t) in prow.iter().zip(yrow.iter()) {
            ce -= t * p.max(floor).ln();
        }
        acc += ce;
    }
    acc / F::from_f64(n as f64)
}

/// ‖A·Aᵀ − I‖_F² for a matrix of row vectors.
pub fn gram_penalty<F: Element>(rows: &Tensor<F>) -> F {
    let m = rows.shape()[0];
    let mut acc = F::ZERO;
    for a in 0..m {
        for b in 0..m {
            let mut dot = F::ZERO;
            for (&x, &y) in rows.row(a).iter().zip(rows.row(b).iter()) {
                dot += x * y;
            }
            let target = if a == b { F::ONE } else { F::ZERO };
            let diff = dot - target;
            acc += diff * diff;
        }
    }
    acc
}

/// Rows of a class block minus their arithmetic mean.
pub fn center_rows<F: Element>(rows: &Tensor<F>) -> Tensor<F> {
    let (m, d) = (rows.shape()[0], rows.shape()[1]);
    let inv = F::ONE / F::from_f64(m as f64);
    let mut mean = vec![F::ZERO; d];
    for row in rows.data().chunks_exact(d) {
        for (s, &v) in mean.iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    for s in mean.iter_mut() {
        *s *= inv;
    }
    let mut out = rows.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (v, &mu) in row.iter_mut().zip(mean.iter()) {
            *v -= mu;
        }
    }
    out
}

/// Class-wise orthonormalization penalty over mean-centered prototypes.
pub fn loss_orth<F: Element>(bank: &PrototypeBank<F>) -> F {
    let m = bank.per_class();
    let d = bank.latent_dim();
    let mut acc = F::ZERO;
    for k in 0..bank.num_classes() {
        let block = Tensor::new(
            vec![m, d],
            bank.matrix().data()[k * m * d..(k + 1) * m * d].to_vec(),
        )
        .expect("class block");
        acc += gram_penalty(&center_rows(&block));
    }
    acc
}

/// Closed-form D_KL( N(μ, diag σ²) ‖ N(φ, I) ).
pub fn kl_unit_gaussian<F: Element>(mu: &[F], sigma: &[F], phi: &[F]) -> F {
    let half = F::from_f64(0.5);
    let mut acc = F::ZERO;
    for ((&m, &s), &p) in mu.iter().zip(sigma.iter()).zip(phi.iter()) {
        let diff = m - p;
        acc += s * s + diff * diff - F::ONE - (s * s).ln();
    }
    half * acc
}

/// Similarity weights of the true-class block, normalized over the M
/// prototypes: s̃(k*, j) = s(k*, j) / Σ_l s(k*, l).
pub fn normalized_class_weights<F: Element>(
    s: &Tensor<F>,
    labels: &[usize],
    per_class: usize,
) -> Tensor<F> {
    let cols = s.shape()[1];
    let mut out = Tensor::zeros(vec![labels.len(), per_class]);
    for (i, &k) in labels.iter().enumerate() {
        let block = &s.data()[i * cols + k * per_class..i * cols + (k + 1) * per_class];
        let denom: F = block.iter().copied().sum();
        let orow = out.row_mut(i);
        for (o, &v) in orow.iter_mut().zip(block.iter()) {
            *o = v / denom;
        }
    }
    out
}

/// Mixture-of-VAEs term: mean squared reconstruction error plus the
/// similarity-weighted KL to the true-class prototypes.
pub fn loss_vae<F: Element>(
    x: &Tensor<F>,
    xhat: &Tensor<F>,
    mu: &Tensor<F>,
    sigma: &Tensor<F>,
    s: &Tensor<F>,
    labels: &[usize],
    bank: &PrototypeBank<F>,
) -> (F, F) {
    let n = labels.len();
    let inv_n = F::ONE / F::from_f64(n as f64);
    let recon = x.sq_dist(xhat) * inv_n;

    let d = bank.latent_dim();
    let m = bank.per_class();
    let weights = normalized_class_weights(s, labels, m);
    let mut kl = F::ZERO;
    for (i, &k) in labels.iter().enumerate() {
        let murow = &mu.data()[i * d..(i + 1) * d];
        let sigrow = &sigma.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let w = weights.data()[i * m + j];
            kl += w * kl_unit_gaussian(murow, sigrow, bank.get(k, j));
        }
    }
    (recon, kl * inv_n)
}

/// Reconstruction term with the per-prototype weights left in place; equals
/// the plain mean squared error because the weights sum to one per sample.
pub fn recon_with_weights<F: Element>(
    x: &Tensor<F>,
    xhat: &Tensor<F>,
    s: &Tensor<F>,
    labels: &[usize],
    per_class: usize,
) -> F {
    let n = labels.len();
    let plane: usize = x.shape()[1..].iter().product();
    let weights = normalized_class_weights(s, labels, per_class);
    let inv_n = F::ONE / F::from_f64(n as f64);
    let mut acc = F::ZERO;
    for i in 0..n {
        let xi = &x.data()[i * plane..(i + 1) * plane];
        let xhi = &xhat.data()[i * plane..(i + 1) * plane];
        let mut err = F::ZERO;
        for (&a, &b) in xi.iter().zip(xhi.iter()) {
            let diff = a - b;
            err += diff * diff;
        }
        for j in 0..per_class {
            acc += weights.data()[i * per_class + j] * err;
        }
    }
    acc * inv_n
}

/// One-hot rows to class indices.
pub fn label_indices<F: Element>(y: &Tensor<F>) -> Vec<usize> {
    let k = y.shape()[1];
    y.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .position(|&v| v == F::ONE)
                .expect("one-hot label row")
        })
        .collect()
}

/// Weighted total over a batch of forward outputs.
pub fn total_loss<F: Element>(
    x: &Tensor<F>,
    y: &Tensor<F>,
    outputs: &ForwardOutput<F>,
    model: &ProtoVaeModel<F>,
    weights: &LossWeights<F>,
) -> LossBreakdown<F> {
    let labels = label_indices(y);
    let pred = loss_pred(&outputs.yhat, y);
    let orth = loss_orth(&model.prototypes);
    let (recon, kl) = loss_vae(
        x,
        &outputs.xhat,
        &outputs.mu,
        &outputs.sigma,
        &outputs.s,
        &labels,
        &model.prototypes,
    );
    let total = weights.pred * pred + weights.orth * orth + weights.recon * recon + weights.kl * kl;
    LossBreakdown {
        pred,
        orth,
        recon,
        kl,
        total,
    }
}

// ── taped batch loss ────────────────────────────────────────────────────

/// Ids of the batch loss terms on a tape. The sums are unnormalized; the
/// root already carries the 1/N factor and the term weights.
pub struct TapedLoss {
    pub root: ValueId,
    pub ce_sum: ValueId,
    pub recon_sum: ValueId,
    pub kl_sum: ValueId,
    pub orth: Option<ValueId>,
}

/// Builds the weighted batch loss on a tape.
///
/// `inv_n` is 1/N of the full batch (chunked callers pass the size of the
/// whole batch, not the chunk, so chunk gradients sum to the batch
/// gradient). `include_orth` attaches the prototype orthonormalization term
/// exactly once per optimization step.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<F: Element>(
    tape: &mut Tape<F>,
    model: &ProtoVaeModel<F>,
    leaves: &ModelLeaves,
    fwd: &TapedForward,
    y: &Tensor<F>,
    weights: &LossWeights<F>,
    options: &LossOptions,
    include_orth: bool,
    inv_n: F,
) -> Result<TapedLoss> {
    let labels = label_indices(y);
    let m = model.config.prototypes_per_class;
    let d = model.config.latent_dim;
    // terms with zero weight are not built at all: an ablated term must
    // neither steer the optimizer nor poison the finiteness checks when its
    // untrained quantities blow up
    let zero = tape.constant(Tensor::scalar(F::ZERO));

    // prediction: -sum y ⊙ ln(max(probs, floor))
    let ce_sum = if weights.pred != F::ZERO {
        let clamped = tape.clamp_min(fwd.probs, F::from_f64(PROB_FLOOR))?;
        let logp = tape.ln(clamped)?;
        let y_id = tape.constant(y.clone());
        let picked = tape.mul(logp, y_id)?;
        let picked_sum = tape.sum(picked)?;
        tape.mul_scalar(picked_sum, -F::ONE)?
    } else {
        zero
    };

    // reconstruction: sum ‖x − x̂‖²
    let recon_sum = if weights.recon != F::ZERO {
        let diff = tape.sub(fwd.x, fwd.xhat)?;
        let sq = tape.square(diff)?;
        tape.sum(sq)?
    } else {
        zero
    };

    // KL to true-class prototypes, weighted by normalized similarities
    let kl_sum = if weights.kl != F::ZERO {
        let starts: Vec<usize> = labels.iter().map(|&k| k * m).collect();
        let sig2 = tape.square(fwd.sigma)?;
        let sig2_rows = tape.sum_axis(sig2, 1)?;
        let dist = tape.pairwise_sq_dist(fwd.mu, leaves.phi())?;
        let dist_block = tape.row_blocks(dist, starts.clone(), m)?;
        let logsig_rows = tape.sum_axis(fwd.logsig, 1)?;
        let neg2log = tape.mul_scalar(logsig_rows, F::from_f64(-2.0))?;
        let t = tape.add_col_vec(dist_block, sig2_rows)?;
        let t = tape.add_col_vec(t, neg2log)?;
        let t = tape.add_scalar(t, -F::from_f64(d as f64))?;
        let kl_mat = tape.mul_scalar(t, F::from_f64(0.5))?;

        let weighted = if options.grad_through_sim_weights {
            let s_block = tape.row_blocks(fwd.s, starts, m)?;
            let denom = tape.sum_axis(s_block, 1)?;
            let ones = tape.constant(Tensor::full(vec![labels.len()], F::ONE));
            let recip = tape.div(ones, denom)?;
            let snorm = tape.mul_col_vec(s_block, recip)?;
            tape.mul(kl_mat, snorm)?
        } else {
            // mixture responsibilities held fixed: read the similarity
            // values off the tape and re-enter them as a constant
            let sim = normalized_class_weights(tape.value(fwd.s), &labels, m);
            let sim_id = tape.constant(sim);
            tape.mul(kl_mat, sim_id)?
        };
        tape.sum(weighted)?
    } else {
        zero
    };

    let orth = if include_orth && weights.orth != F::ZERO {
        Some(build_orth(tape, model, leaves)?)
    } else {
        None
    };

    let pred_term = tape.mul_scalar(ce_sum, weights.pred * inv_n)?;
    let recon_term = tape.mul_scalar(recon_sum, weights.recon * inv_n)?;
    let kl_term = tape.mul_scalar(kl_sum, weights.kl * inv_n)?;
    let mut root = tape.add(pred_term, recon_term)?;
    root = tape.add(root, kl_term)?;
    if let Some(orth_id) = orth {
        let orth_term = tape.mul_scalar(orth_id, weights.orth)?;
        root = tape.add(root, orth_term)?;
    }

    Ok(TapedLoss {
        root,
        ce_sum,
        recon_sum,
        kl_sum,
        orth,
    })
}

/// Orthonormalization term on the tape: Σ_k ‖C_k C_kᵀ − I‖_F² over
/// mean-centered class blocks.
pub fn build_orth<F: Element>(
    tape: &mut Tape<F>,
    model: &ProtoVaeModel<F>,
    leaves: &ModelLeaves,
) -> Result<ValueId> {
    let m = model.config.prototypes_per_class;
    let eye = Tensor::eye(m);
    let inv_m = F::ONE / F::from_f64(m as f64);
    let mut total: Option<ValueId> = None;
    for k in 0..model.config.num_classes {
        let block = tape.slice_rows(leaves.phi(), k * m, m)?;
        let col_sums = tape.sum_axis(block, 0)?;
        let neg_mean = tape.mul_scalar(col_sums, -inv_m)?;
        let centered = tape.add_row_vec(block, neg_mean)?;
        let gram = tape.matmul_nt(centered, centered)?;
        let eye_id = tape.constant(eye.clone());
        let diff = tape.sub(gram, eye_id)?;
        let sq = tape.square(diff)?;
        let term = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument {
        op: "loss_orth",
        message: "model has no classes".into(),
    })
}
