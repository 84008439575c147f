//! The ProtoVAE network: convolutional encoder with μ/log σ heads, a
//! mirrored transposed-convolution decoder, a bank of M prototypes per
//! class, the log-ratio similarity, and a bias-free linear classifier over
//! the flattened similarity matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::tape::{Tape, ValueId};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub latent_dim: usize,
    /// (channels, height, width) of the input images.
    pub image: (usize, usize, usize),
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// ε of the similarity log-ratio, 0 < ε < 1.
    pub epsilon: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(
        num_classes: usize,
        prototypes_per_class: usize,
        latent_dim: usize,
        image: (usize, usize, usize),
    ) -> Self {
        Self {
            num_classes,
            prototypes_per_class,
            latent_dim,
            image,
            encoder_channels: vec![32, 64, 128, 256],
            kernel: 3,
            stride: 2,
            padding: 1,
            epsilon: 1e-4,
            leaky_slope: 0.01,
        }
    }

    pub fn total_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    /// Spatial extents after each encoder conv, starting at the input.
    pub fn spatial_plan(&self) -> Result<Vec<(usize, usize)>> {
        let (_, mut h, mut w) = self.image;
        let mut plan = vec![(h, w)];
        for i in 0..self.encoder_channels.len() {
            let oh = kernels::conv_out_extent(h, self.kernel, self.stride, self.padding);
            let ow = kernels::conv_out_extent(w, self.kernel, self.stride, self.padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                    h = oh;
                    w = ow;
                    plan.push((h, w));
                }
                _ => {
                    return Err(Error::InvalidArgument {
                        op: "model_config",
                        message: format!(
                            "encoder stage {i} underflows the image ({h}x{w} with kernel {}, stride {})",
                            self.kernel, self.stride
                        ),
                    })
                }
            }
        }
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument {
                op: "model_config",
                message: format!("epsilon {} must satisfy 0 < epsilon < 1", self.epsilon),
            });
        }
        if self.num_classes == 0 || self.prototypes_per_class == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument {
                op: "model_config",
                message: "K, M and d must be positive".into(),
            });
        }
        self.spatial_plan().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer<F: Element> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeLayer<F: Element> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

#[derive(Clone, Debug)]
pub struct LinearLayer<F: Element> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Encoder<F: Element> {
    pub convs: Vec<ConvLayer<F>>,
    pub mu_head: LinearLayer<F>,
    pub logsig_head: LinearLayer<F>,
    pub slope: F,
    /// (channels, height, width) entering the linear heads.
    pub conv_output: (usize, usize, usize),
}

impl<F: Element> Encoder<F> {
    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.conv_output;
        c * h * w
    }

    /// Convolutional trunk up to the flattened feature vector.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut t = x.clone();
        for conv in &self.convs {
            t = kernels::conv2d(&t, &conv.weight, Some(&conv.bias), conv.stride, conv.padding)?;
            let s = self.slope;
            t = t.map(|v| if v >= F::ZERO { v } else { v * s });
        }
        let n = t.shape()[0];
        t.reshaped(vec![n, self.feature_len()])
    }

    /// (μ, σ) rows for a batch.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let feats = self.features(x)?;
        let mu = kernels::linear(&feats, &self.mu_head.weight, self.mu_head.bias.as_ref())?;
        let logsig = kernels::linear(
            &feats,
            &self.logsig_head.weight,
            self.logsig_head.bias.as_ref(),
        )?;
        Ok((mu, logsig.map(|v| v.exp())))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<F: Element> {
    pub input: LinearLayer<F>,
    pub convs: Vec<ConvTransposeLayer<F>>,
    pub slope: F,
    /// (channels, height, width) after the input linear layer.
    pub conv_input: (usize, usize, usize),
}

impl<F: Element> Decoder<F> {
    /// Decodes latent rows (N, d) into images in [-1, 1].
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let z2 = if z.shape().len() == 1 {
            z.reshaped(vec![1, z.numel()])?
        } else {
            z.clone()
        };
        let n = z2.shape()[0];
        let h = kernels::linear(&z2, &self.input.weight, self.input.bias.as_ref())?;
        let s = self.slope;
        let h = h.map(|v| if v >= F::ZERO { v } else { v * s });
        let (c, hh, ww) = self.conv_input;
        let mut t = h.reshaped(vec![n, c, hh, ww])?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            t = kernels::conv_transpose2d(
                &t,
                &conv.weight,
                Some(&conv.bias),
                conv.stride,
                conv.padding,
                conv.output_padding,
            )?;
            t = if i == last {
                t.map(|v| v.tanh())
            } else {
                t.map(|v| if v >= F::ZERO { v } else { v * s })
            };
        }
        Ok(t)
    }
}

/// The learned prototype vectors, positionally assigned: row k·M + j is the
/// j-th prototype of class k for the whole lifetime of the model.
#[derive(Clone, Debug)]
pub struct PrototypeBank<F: Element> {
    phi: Tensor<F>,
    num_classes: usize,
    per_class: usize,
}

impl<F: Element> PrototypeBank<F> {
    pub fn new(num_classes: usize, per_class: usize, phi: Tensor<F>) -> Result<Self> {
        if phi.shape() != [num_classes * per_class, phi.shape()[1]] {
            return Err(Error::InvalidArgument {
                op: "prototype_bank",
                message: format!(
                    "expected ({} * {}, d) matrix, got {:?}",
                    num_classes,
                    per_class,
                    phi.shape()
                ),
            });
        }
        Ok(Self {
            phi,
            num_classes,
            per_class,
        })
    }

    /// Random init sitting exactly on the orthonormality-penalty floor:
    /// per class, centered orthonormal directions. Starting anywhere else
    /// floods Adam's second-moment estimates with the penalty's gradient
    /// and the prototypes barely move for the rest of training.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        per_class: usize,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut phi = Tensor::zeros(vec![num_classes * per_class, latent_dim]);
        for k in 0..num_classes {
            let basis = orthonormal_rows(per_class, latent_dim, rng);
            // center the rows: the Gram becomes I − 11ᵀ/M, the minimum of
            // ‖Φ̄ᵀΦ̄ − I‖² under mean-centering
            let inv_m = F::ONE / F::from_f64(per_class as f64);
            let mut mean = vec![F::ZERO; latent_dim];
            for row in basis.data().chunks_exact(latent_dim) {
                for (s, &v) in mean.iter_mut().zip(row.iter()) {
                    *s += v;
                }
            }
            for s in mean.iter_mut() {
                *s *= inv_m;
            }
            for j in 0..per_class {
                let dst = phi.row_mut(k * per_class + j);
                for ((d, &b), &m) in dst
                    .iter_mut()
                    .zip(basis.row(j).iter())
                    .zip(mean.iter())
                {
                    *d = b - m;
                }
            }
        }
        Self {
            phi,
            num_classes,
            per_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn latent_dim(&self) -> usize {
        self.phi.shape()[1]
    }

    /// Prototype (k, j) as a flat vector.
    pub fn get(&self, class: usize, index: usize) -> &[F] {
        self.phi.row(class * self.per_class + index)
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.phi
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<F> {
        &mut self.phi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Per-batch outputs threading through losses, metrics and explanations.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F: Element> {
    /// (N, d)
    pub mu: Tensor<F>,
    /// (N, d), strictly positive
    pub sigma: Tensor<F>,
    /// (N, d); equals mu in eval mode
    pub z: Tensor<F>,
    /// (N, C, H, W)
    pub xhat: Tensor<F>,
    /// (N, K·M) similarity scores, row-major over (k, j)
    pub s: Tensor<F>,
    /// (N, K) class probabilities
    pub yhat: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct ProtoVaeModel<F: Element> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    pub prototypes: PrototypeBank<F>,
    pub classifier: LinearLayer<F>,
}

impl<F: Element> ProtoVaeModel<F> {
    /// Deterministic initialization from an explicit RNG.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = config.spatial_plan()?;
        let (img_c, _, _) = config.image;
        let slope = F::from_f64(config.leaky_slope);
        let k = config.kernel;

        let mut convs = Vec::new();
        let mut in_ch = img_c;
        for &out_ch in &config.encoder_channels {
            let fan_in = (in_ch * k * k) as f64;
            let std = F::from_f64((2.0 / fan_in).sqrt());
            convs.push(ConvLayer {
                weight: Tensor::randn(vec![out_ch, in_ch, k, k], std, rng),
                bias: Tensor::zeros(vec![out_ch]),
                stride: config.stride,
                padding: config.padding,
            });
            in_ch = out_ch;
        }
        let (fh, fw) = *plan.last().expect("plan has input entry");
        let conv_output = (in_ch, fh, fw);
        let feat = in_ch * fh * fw;
        // Calibrate the head scale against the trunk's actual output: the
        // nominal He variance analysis is far off on heavily non-centered
        // inputs, and everything downstream assumes μ starts near the unit
        // shell the prototypes occupy (where the log-ratio similarity still
        // has usable slope). σ likewise starts near 1.
        let feat_rms = {
            let probe = Tensor::rand_uniform(
                vec![4, img_c, config.image.1, config.image.2],
                -F::ONE,
                F::ONE,
                rng,
            );
            let mut t = probe;
            for conv in &convs {
                t = kernels::conv2d(&t, &conv.weight, Some(&conv.bias), conv.stride, conv.padding)
                    .expect("probe forward");
                t = t.map(|v| if v >= F::ZERO { v } else { v * slope });
            }
            let ms = t.data().iter().map(|&v| v * v).sum::<F>()
                / F::from_f64(t.numel() as f64);
            ms.sqrt().max(F::from_f64(1e-6))
        };
        let head_std =
            F::from_f64(0.1 * (1.0 / feat as f64).sqrt()) / feat_rms;
        let mu_head = LinearLayer {
            weight: Tensor::randn(vec![config.latent_dim, feat], head_std, rng),
            bias: Some(Tensor::zeros(vec![config.latent_dim])),
        };
        let logsig_head = LinearLayer {
            weight: Tensor::randn(vec![config.latent_dim, feat], head_std, rng),
            bias: Some(Tensor::zeros(vec![config.latent_dim])),
        };
        let encoder = Encoder {
            convs,
            mu_head,
            logsig_head,
            slope,
            conv_output,
        };

        // Low-gain decoder input: reconstruction pressure on μ scales with
        // these weights, and under Adam the strongest pull owns μ's
        // direction. Starting small leaves μ to the KL term (which anchors
        // it at the prototype shell, where similarities carry signal) while
        // the decoder grows its own gain to recover reconstruction.
        let dec_in_std = F::from_f64(0.1 * (1.0 / config.latent_dim as f64).sqrt());
        let input = LinearLayer {
            weight: Tensor::randn(vec![feat, config.latent_dim], dec_in_std, rng),
            bias: Some(Tensor::zeros(vec![feat])),
        };
        let mut dec_convs = Vec::new();
        // Mirror the encoder stages back in reverse; output_padding restores
        // the rows lost to conv's floor division.
        for i in (0..config.encoder_channels.len()).rev() {
            let from_ch = config.encoder_channels[i];
            let to_ch = if i == 0 {
                img_c
            } else {
                config.encoder_channels[i - 1]
            };
            let (target_h, _) = plan[i];
            let (src_h, _) = plan[i + 1];
            let base = kernels::conv_transpose_out_extent(src_h, k, config.stride, config.padding, 0);
            let output_padding = target_h - base;
            let fan_in = (from_ch * k * k) as f64;
            let std = F::from_f64((2.0 / fan_in).sqrt());
            dec_convs.push(ConvTransposeLayer {
                weight: Tensor::randn(vec![from_ch, to_ch, k, k], std, rng),
                bias: Tensor::zeros(vec![to_ch]),
                stride: config.stride,
                padding: config.padding,
                output_padding,
            });
        }
        let decoder = Decoder {
            input,
            convs: dec_convs,
            slope,
            conv_input: conv_output,
        };

        let prototypes = PrototypeBank::init(
            config.num_classes,
            config.prototypes_per_class,
            config.latent_dim,
            rng,
        );
        let cls_std = F::from_f64((1.0 / config.total_prototypes() as f64).sqrt());
        let classifier = LinearLayer {
            weight: Tensor::randn(
                vec![config.num_classes, config.total_prototypes()],
                cls_std,
                rng,
            ),
            bias: None,
        };

        Ok(Self {
            config,
            encoder,
            decoder,
            prototypes,
            classifier,
        })
    }

    // ── value-level operations ──────────────────────────────────────────

    /// (μ, σ) for a batch; σ is strictly positive by construction.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_image("encode", x)?;
        self.encoder.encode(x)
    }

    /// z = μ + σ ⊙ ε with ε drawn from the provided RNG.
    pub fn reparameterize<R: Rng + ?Sized>(
        mu: &Tensor<F>,
        sigma: &Tensor<F>,
        rng: &mut R,
    ) -> Tensor<F> {
        let eps = Tensor::randn(mu.shape().to_vec(), F::ONE, rng);
        let mut z = mu.clone();
        for ((z, &s), &e) in z
            .data_mut()
            .iter_mut()
            .zip(sigma.data().iter())
            .zip(eps.data().iter())
        {
            *z += s * e;
        }
        z
    }

    /// Decodes latent rows into images.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.decoder.decode(z)
    }

    /// Similarity rows s(k, j) for latent rows (N, d) → (N, K·M).
    pub fn similarities(&self, z: &Tensor<F>) -> Tensor<F> {
        similarity_matrix(z, &self.prototypes, F::from_f64(self.config.epsilon))
    }

    /// Softmax over the linear readout of flattened similarities.
    pub fn classify(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        let s2 = if s.shape().len() == 1 {
            s.reshaped(vec![1, s.numel()])?
        } else {
            s.clone()
        };
        let logits = kernels::linear(&s2, &self.classifier.weight, None)?;
        Ok(kernels::softmax_rows(&logits))
    }

    /// Full forward pass. Train mode samples z; eval mode sets z = μ and is
    /// fully deterministic.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<F>,
        mode: ForwardMode,
        rng: Option<&mut R>,
    ) -> Result<ForwardOutput<F>> {
        let (mu, sigma) = self.encode(x)?;
        let z = match mode {
            ForwardMode::Train => {
                let rng = rng.ok_or_else(|| Error::InvalidArgument {
                    op: "forward",
                    message: "train mode requires an RNG".into(),
                })?;
                Self::reparameterize(&mu, &sigma, rng)
            }
            ForwardMode::Eval => mu.clone(),
        };
        let xhat = self.decode(&z)?;
        let s = self.similarities(&z);
        let yhat = self.classify(&s)?;
        Ok(ForwardOutput {
            mu,
            sigma,
            z,
            xhat,
            s,
            yhat,
        })
    }

    /// Encoder-plus-similarity shortcut used by metric loops (no decoder).
    pub fn similarities_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (mu, _) = self.encode(x)?;
        Ok(self.similarities(&mu))
    }

    /// Decoded image of prototype (k, j).
    pub fn decode_prototype(&self, class: usize, index: usize) -> Result<Tensor<F>> {
        self.check_prototype_index("decode_prototype", class, index)?;
        let phi = Tensor::new(
            vec![1, self.config.latent_dim],
            self.prototypes.get(class, index).to_vec(),
        )?;
        self.decode(&phi)
    }

    /// Decodes an affine path between two prototypes, endpoints included.
    pub fn interpolate(
        &self,
        a: (usize, usize),
        b: (usize, usize),
        steps: usize,
    ) -> Result<Vec<Tensor<F>>> {
        if steps < 2 {
            return Err(Error::InvalidArgument {
                op: "interpolate",
                message: format!("steps {steps} must be at least 2"),
            });
        }
        self.check_prototype_index("interpolate", a.0, a.1)?;
        self.check_prototype_index("interpolate", b.0, b.1)?;
        let pa = self.prototypes.get(a.0, a.1).to_vec();
        let pb = self.prototypes.get(b.0, b.1).to_vec();
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = F::from_f64(i as f64 / (steps - 1) as f64);
            let mix: Vec<F> = pa
                .iter()
                .zip(pb.iter())
                .map(|(&x, &y)| (F::ONE - t) * x + t * y)
                .collect();
            let z = Tensor::new(vec![1, self.config.latent_dim], mix)?;
            out.push(self.decode(&z)?);
        }
        Ok(out)
    }

    fn check_image(&self, op: &'static str, x: &Tensor<F>) -> Result<()> {
        let (c, h, w) = self.config.image;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            let (dim, expected, got) = if shape.len() != 4 {
                (0, 4, shape.len())
            } else if shape[1] != c {
                (1, c, shape[1])
            } else if shape[2] != h {
                (2, h, shape[2])
            } else {
                (3, w, shape[3])
            };
            return Err(Error::ShapeMismatch {
                op,
                dim,
                expected,
                got,
            });
        }
        Ok(())
    }

    fn check_prototype_index(&self, op: &'static str, class: usize, index: usize) -> Result<()> {
        if class >= self.config.num_classes || index >= self.config.prototypes_per_class {
            return Err(Error::InvalidArgument {
                op,
                message: format!(
                    "prototype ({class}, {index}) out of range for K={}, M={}",
                    self.config.num_classes, self.config.prototypes_per_class
                ),
            });
        }
        Ok(())
    }

    // ── parameter traversal (canonical order) ───────────────────────────

    pub fn param_entries(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.weight"), &c.weight));
            out.push((format!("enc.conv{i}.bias"), &c.bias));
        }
        out.push(("enc.mu.weight".into(), &self.encoder.mu_head.weight));
        out.push((
            "enc.mu.bias".into(),
            self.encoder.mu_head.bias.as_ref().expect("mu bias"),
        ));
        out.push(("enc.logsig.weight".into(), &self.encoder.logsig_head.weight));
        out.push((
            "enc.logsig.bias".into(),
            self.encoder.logsig_head.bias.as_ref().expect("logsig bias"),
        ));
        out.push(("dec.input.weight".into(), &self.decoder.input.weight));
        out.push((
            "dec.input.bias".into(),
            self.decoder.input.bias.as_ref().expect("decoder bias"),
        ));
        for (i, c) in self.decoder.convs.iter().enumerate() {
            out.push((format!("dec.conv{i}.weight"), &c.weight));
            out.push((format!("dec.conv{i}.bias"), &c.bias));
        }
        out.push(("prototypes.phi".into(), self.prototypes.matrix()));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, c) in self.encoder.convs.iter_mut().enumerate() {
            out.push((format!("enc.conv{i}.weight"), &mut c.weight));
            out.push((format!("enc.conv{i}.bias"), &mut c.bias));
        }
        out.push(("enc.mu.weight".into(), &mut self.encoder.mu_head.weight));
        out.push((
            "enc.mu.bias".into(),
            self.encoder.mu_head.bias.as_mut().expect("mu bias"),
        ));
        out.push((
            "enc.logsig.weight".into(),
            &mut self.encoder.logsig_head.weight,
        ));
        out.push((
            "enc.logsig.bias".into(),
            self.encoder.logsig_head.bias.as_mut().expect("logsig bias"),
        ));
        out.push(("dec.input.weight".into(), &mut self.decoder.input.weight));
        out.push((
            "dec.input.bias".into(),
            self.decoder.input.bias.as_mut().expect("decoder bias"),
        ));
        for (i, c) in self.decoder.convs.iter_mut().enumerate() {
            out.push((format!("dec.conv{i}.weight"), &mut c.weight));
            out.push((format!("dec.conv{i}.bias"), &mut c.bias));
        }
        out.push(("prototypes.phi".into(), self.prototypes.matrix_mut()));
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out
    }

    // ── taped forward for training and gradient checks ──────────────────

    /// Registers every parameter as a tracked leaf, in canonical order.
    pub fn leaves_on_tape(&self, tape: &mut Tape<F>) -> ModelLeaves {
        let ids: Vec<ValueId> = self
            .param_entries()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        ModelLeaves {
            num_enc_convs: self.encoder.convs.len(),
            num_dec_convs: self.decoder.convs.len(),
            ids,
        }
    }

    /// Batched forward on a tape. `noise` of shape (N, d) selects train mode
    /// (z = μ + σ ⊙ ε); `None` selects eval mode (z = μ).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        leaves: &ModelLeaves,
        x: &Tensor<F>,
        noise: Option<&Tensor<F>>,
    ) -> Result<TapedForward> {
        self.check_image("forward", x)?;
        let n = x.shape()[0];
        let eps_sim = F::from_f64(self.config.epsilon);
        let slope = self.encoder.slope;

        let x_id = tape.constant(x.clone());
        let mut t = x_id;
        for i in 0..self.encoder.convs.len() {
            let (w, b) = leaves.enc_conv(i);
            let conv = &self.encoder.convs[i];
            t = tape.conv2d(t, w, Some(b), conv.stride, conv.padding)?;
            t = tape.leaky_relu(t, slope)?;
        }
        let flat = tape.reshape(t, vec![n, self.encoder.feature_len()])?;
        let (wmu, bmu) = leaves.mu_head();
        let mu = tape.linear(flat, wmu, Some(bmu))?;
        let (wls, bls) = leaves.logsig_head();
        let logsig = tape.linear(flat, wls, Some(bls))?;
        let sigma = tape.exp(logsig)?;

        let z = match noise {
            Some(eps) => {
                let eps = tape.constant(eps.clone());
                let scaled = tape.mul(sigma, eps)?;
                tape.add(mu, scaled)?
            }
            None => mu,
        };

        let (wd, bd) = leaves.dec_input();
        let h = tape.linear(z, wd, Some(bd))?;
        let h = tape.leaky_relu(h, slope)?;
        let (c0, h0, w0) = self.decoder.conv_input;
        let mut d = tape.reshape(h, vec![n, c0, h0, w0])?;
        let last = self.decoder.convs.len() - 1;
        for i in 0..self.decoder.convs.len() {
            let (w, b) = leaves.dec_conv(i);
            let conv = &self.decoder.convs[i];
            d = tape.conv_transpose2d(
                d,
                w,
                Some(b),
                conv.stride,
                conv.padding,
                conv.output_padding,
            )?;
            d = if i == last {
                tape.tanh(d)?
            } else {
                tape.leaky_relu(d, slope)?
            };
        }
        let xhat = d;

        let dist = tape.pairwise_sq_dist(z, leaves.phi())?;
        let num = tape.add_scalar(dist, F::ONE)?;
        let num = tape.ln(num)?;
        let den = tape.add_scalar(dist, eps_sim)?;
        let den = tape.ln(den)?;
        let s = tape.sub(num, den)?;
        let logits = tape.linear(s, leaves.classifier(), None)?;
        let probs = tape.softmax(logits)?;

        Ok(TapedForward {
            x: x_id,
            mu,
            logsig,
            sigma,
            z,
            xhat,
            s,
            logits,
            probs,
        })
    }
}

/// Parameter leaves of one taped forward, canonical order.
pub struct ModelLeaves {
    num_enc_convs: usize,
    num_dec_convs: usize,
    ids: Vec<ValueId>,
}

impl ModelLeaves {
    pub fn all(&self) -> &[ValueId] {
        &self.ids
    }

    fn enc_conv(&self, i: usize) -> (ValueId, ValueId) {
        (self.ids[2 * i], self.ids[2 * i + 1])
    }

    fn mu_head(&self) -> (ValueId, ValueId) {
        let base = 2 * self.num_enc_convs;
        (self.ids[base], self.ids[base + 1])
    }

    fn logsig_head(&self) -> (ValueId, ValueId) {
        let base = 2 * self.num_enc_convs + 2;
        (self.ids[base], self.ids[base + 1])
    }

    fn dec_input(&self) -> (ValueId, ValueId) {
        let base = 2 * self.num_enc_convs + 4;
        (self.ids[base], self.ids[base + 1])
    }

    fn dec_conv(&self, i: usize) -> (ValueId, ValueId) {
        let base = 2 * self.num_enc_convs + 6;
        (self.ids[base + 2 * i], self.ids[base + 2 * i + 1])
    }

    pub fn phi(&self) -> ValueId {
        self.ids[2 * self.num_enc_convs + 6 + 2 * self.num_dec_convs]
    }

    pub fn classifier(&self) -> ValueId {
        self.ids[2 * self.num_enc_convs + 6 + 2 * self.num_dec_convs + 1]
    }
}

/// Value ids of one taped batch forward.
pub struct TapedForward {
    pub x: ValueId,
    pub mu: ValueId,
    pub logsig: ValueId,
    pub sigma: ValueId,
    pub z: ValueId,
    pub xhat: ValueId,
    /// (N, K·M) similarities
    pub s: ValueId,
    pub logits: ValueId,
    pub probs: ValueId,
}

/// Random orthonormal rows via Gram-Schmidt on Gaussian draws; falls back
/// to unit-norm random rows when more rows than dimensions are requested.
fn orthonormal_rows<F: Element, R: Rng + ?Sized>(
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> Tensor<F> {
    let mut out = Tensor::randn(vec![rows, dim], F::ONE, rng);
    for i in 0..rows {
        for _ in 0..2 {
            // re-orthogonalize once for numerical cleanliness
            for j in 0..i.min(dim) {
                let dot: F = out
                    .row(i)
                    .iter()
                    .zip(out.row(j).iter())
                    .map(|(&a, &b)| a * b)
                    .sum();
                let prev: Vec<F> = out.row(j).to_vec();
                for (v, &p) in out.row_mut(i).iter_mut().zip(prev.iter()) {
                    *v -= dot * p;
                }
            }
            if i >= dim {
                break;
            }
        }
        let norm: F = out
            .row(i)
            .iter()
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt();
        let inv = if norm > F::from_f64(1e-12) {
            F::ONE / norm
        } else {
            F::ONE
        };
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    out
}

/// Eq. log-ratio similarity of latent rows against every prototype.
///
/// Strictly decreasing in the squared distance; bounded by (0, log(1/ε)]
/// with the maximum attained exactly at z = φ.
pub fn similarity_matrix<F: Element>(
    z: &Tensor<F>,
    bank: &PrototypeBank<F>,
    epsilon: F,
) -> Tensor<F> {
    let z2 = if z.shape().len() == 1 {
        z.reshaped(vec![1, z.numel()]).expect("latent row")
    } else {
        z.clone()
    };
    let n = z2.shape()[0];
    let p = bank.matrix().shape()[0];
    let mut out = Tensor::zeros(vec![n, p]);
    for i in 0..n {
        let zrow = z2.row(i);
        for j in 0..p {
            let prow = bank.matrix().row(j);
            let mut dist = F::ZERO;
            for (&a, &b) in zrow.iter().zip(prow.iter()) {
                let d = a - b;
                dist += d * d;
            }
            out.data_mut()[i * p + j] = (dist + F::ONE).ln() - (dist + epsilon).ln();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(2, 2, 4, (1, 6, 6));
        c.encoder_channels = vec![2, 4];
        c
    }

    fn tiny_model(seed: u64) -> ProtoVaeModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProtoVaeModel::new(tiny_config(), &mut rng).unwrap()
    }

    #[test]
    fn encode_shapes_and_positive_sigma() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(vec![3, 1, 6, 6], -1.0, 1.0, &mut rng);
        let (mu, sigma) = model.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[3, 4]);
        assert_eq!(sigma.shape(), &[3, 4]);
        assert!(sigma.data().iter().all(|&v| v > 0.0));
        // encoding is deterministic
        let (mu2, _) = model.encode(&x).unwrap();
        assert_eq!(mu.data(), mu2.data());
    }

    #[test]
    fn encode_rejects_wrong_spatial_shape() {
        let model = tiny_model(1);
        let x = Tensor::<f64>::zeros(vec![1, 1, 5, 6]);
        assert!(matches!(
            model.encode(&x),
            Err(crate::Error::ShapeMismatch { dim: 2, .. })
        ));
    }

    #[test]
    fn reparameterize_zero_sigma_returns_mu() {
        let mu = tensor(&[1, 4], &[0.5f64, -1.0, 2.0, 0.0]);
        let sigma = Tensor::zeros(vec![1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = ProtoVaeModel::reparameterize(&mu, &sigma, &mut rng);
        assert_eq!(z.data(), mu.data());
    }

    #[test]
    fn reparameterize_seeded_is_reproducible() {
        let mu = Tensor::<f64>::zeros(vec![1, 4]);
        let sigma = Tensor::full(vec![1, 4], 1.0);
        let z1 = ProtoVaeModel::reparameterize(&mu, &sigma, &mut ChaCha8Rng::seed_from_u64(4));
        let z2 = ProtoVaeModel::reparameterize(&mu, &sigma, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let d = 4;
        let mu = tensor(&[1, 4], &[0.3f64, -0.7, 1.1, 0.0]);
        let sigma = Tensor::full(vec![1, d], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 100_000;
        let mut acc = vec![0.0; d];
        for _ in 0..trials {
            let z = ProtoVaeModel::reparameterize(&mu, &sigma, &mut rng);
            for (a, &v) in acc.iter_mut().zip(z.data().iter()) {
                *a += v;
            }
        }
        let tol = 3.0 * 0.5 / (trials as f64).sqrt();
        for (a, &m) in acc.iter().zip(mu.data().iter()) {
            assert!((a / trials as f64 - m).abs() < tol);
        }
    }

    #[test]
    fn similarity_at_prototype_and_unit_distance() {
        let bank =
            PrototypeBank::new(1, 1, tensor(&[1, 2], &[0.0f64, 0.0])).unwrap();
        let at = similarity_matrix(&tensor(&[1, 2], &[0.0, 0.0]), &bank, 1e-4);
        assert!((at.item() - (1.0f64 / 1e-4).ln()).abs() < 1e-9);
        assert!((at.item() - 9.21034).abs() < 1e-5);
        let unit = similarity_matrix(&tensor(&[1, 2], &[1.0, 0.0]), &bank, 1e-4);
        assert!((unit.item() - ((2.0f64).ln() - (1.0001f64).ln())).abs() < 1e-9);
        assert!((unit.item() - 0.69305).abs() < 1e-4);
    }

    #[test]
    fn similarity_vanishes_at_infinity() {
        let bank = PrototypeBank::new(1, 1, tensor(&[1, 2], &[0.0f64, 0.0])).unwrap();
        let far = similarity_matrix(&tensor(&[1, 2], &[1e6, 0.0]), &bank, 1e-4);
        assert!(far.item() > 0.0);
        assert!(far.item() < 1e-9);
    }

    proptest! {
        // monotone decrease in squared distance, range (0, log(1/ε)]
        #[test]
        fn similarity_monotone_and_bounded(d1 in 0.0f64..50.0, d2 in 0.0f64..50.0, eps in 1e-6f64..0.9) {
            let bank = PrototypeBank::new(1, 1, tensor(&[1, 1], &[0.0f64])).unwrap();
            let s1 = similarity_matrix(&tensor(&[1, 1], &[d1.sqrt()]), &bank, eps).item();
            let s2 = similarity_matrix(&tensor(&[1, 1], &[d2.sqrt()]), &bank, eps).item();
            prop_assert!(s1 > 0.0 && s1 <= (1.0 / eps).ln() + 1e-12);
            if d1 < d2 {
                prop_assert!(s1 > s2);
            }
        }
    }

    #[test]
    fn classifier_uniform_for_zero_weights() {
        let mut model = tiny_model(7);
        for v in model.classifier.weight.data_mut() {
            *v = 0.0;
        }
        let s = tensor(&[1, 4], &[3.0f64, 1.0, 0.5, 2.0]);
        let yhat = model.classify(&s).unwrap();
        for &p in yhat.data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_shift_invariance_and_scaling_argmax() {
        let model = tiny_model(8);
        let s = tensor(&[1, 4], &[3.0f64, 1.0, 0.5, 2.0]);
        let base = model.classify(&s).unwrap();

        // adding a constant to all logits leaves softmax unchanged: emulate
        // by a classifier whose rows each gain the same constant row vector
        let mut shifted = model.clone();
        let cols = shifted.classifier.weight.shape()[1];
        for r in 0..shifted.classifier.weight.shape()[0] {
            for c in 0..cols {
                // logits_k += sum_j s_j * 0.37 for every k equally
                shifted.classifier.weight.data_mut()[r * cols + c] += 0.37;
            }
        }
        let out = shifted.classify(&s).unwrap();
        for (a, b) in base.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }

        // argmax invariant to positive rescaling of W
        let mut scaled = model.clone();
        for v in scaled.classifier.weight.data_mut() {
            *v *= 5.0;
        }
        let argmax = |t: &Tensor<f64>| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&base), argmax(&scaled.classify(&s).unwrap()));
    }

    #[test]
    fn classifier_linearity_before_softmax() {
        let model = tiny_model(9);
        let s1 = tensor(&[1, 4], &[1.0f64, 2.0, 0.5, 0.1]);
        let s2 = tensor(&[1, 4], &[0.3f64, 0.7, 1.5, 2.0]);
        let logits = |s: &Tensor<f64>| {
            kernels::linear(s, &model.classifier.weight, None).unwrap()
        };
        let (a, b) = (2.0, -0.5);
        let mix = Tensor::new(
            vec![1, 4],
            s1.data()
                .iter()
                .zip(s2.data().iter())
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let lmix = logits(&mix);
        let l1 = logits(&s1);
        let l2 = logits(&s2);
        for ((m, x), y) in lmix.data().iter().zip(l1.data()).zip(l2.data()) {
            assert!((m - (a * x + b * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_matches_sigma_zero_train() {
        let model = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let a = model
            .forward::<ChaCha8Rng>(&x, ForwardMode::Eval, None)
            .unwrap();
        let b = model
            .forward::<ChaCha8Rng>(&x, ForwardMode::Eval, None)
            .unwrap();
        assert_eq!(a.yhat.data(), b.yhat.data());
        assert_eq!(a.xhat.data(), b.xhat.data());
        // all similarities strictly positive, yhat on the simplex
        assert!(a.s.data().iter().all(|&v| v > 0.0));
        let total: f64 = a.yhat.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        // σ → 0 makes train mode coincide with eval mode
        let mut squashed = model.clone();
        for v in squashed.encoder.logsig_head.weight.data_mut() {
            *v = 0.0;
        }
        if let Some(b) = &mut squashed.encoder.logsig_head.bias {
            for v in b.data_mut() {
                *v = -60.0; // σ = e^-60 ≈ 0
            }
        }
        let t = squashed
            .forward(&x, ForwardMode::Train, Some(&mut rng))
            .unwrap();
        let e = squashed
            .forward::<ChaCha8Rng>(&x, ForwardMode::Eval, None)
            .unwrap();
        for (a, b) in t.z.data().iter().zip(e.z.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_prototype_shape_and_range() {
        let model = tiny_model(12);
        let img = model.decode_prototype(1, 0).unwrap();
        assert_eq!(img.shape(), &[1, 1, 6, 6]);
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let model = tiny_model(13);
        let steps = model.interpolate((0, 0), (0, 1), 5).unwrap();
        assert_eq!(steps.len(), 5);
        let a = model.decode_prototype(0, 0).unwrap();
        let b = model.decode_prototype(0, 1).unwrap();
        assert_eq!(steps[0].data(), a.data());
        assert_eq!(steps[4].data(), b.data());

        let two = model.interpolate((0, 0), (0, 1), 2).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].data(), a.data());
        assert_eq!(two[1].data(), b.data());

        // affine latent path: decoded midpoint equals decode((φa+φb)/2)
        let mid: Vec<f64> = model
            .prototypes
            .get(0, 0)
            .iter()
            .zip(model.prototypes.get(0, 1).iter())
            .map(|(&x, &y)| 0.5 * (x + y))
            .collect();
        let mid = model
            .decode(&Tensor::new(vec![1, 4], mid).unwrap())
            .unwrap();
        for (m, s) in mid.data().iter().zip(steps[2].data().iter()) {
            assert!((m - s).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_eval_forward_matches_value_forward_bitwise() {
        let model = tiny_model(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::rand_uniform(vec![2, 1, 6, 6], -1.0, 1.0, &mut rng);
        let value = model
            .forward::<ChaCha8Rng>(&x, ForwardMode::Eval, None)
            .unwrap();
        let mut tape = Tape::new();
        let leaves = model.leaves_on_tape(&mut tape);
        let taped = model.forward_on_tape(&mut tape, &leaves, &x, None).unwrap();
        assert_eq!(tape.value(taped.mu).data(), value.mu.data());
        assert_eq!(tape.value(taped.sigma).data(), value.sigma.data());
        assert_eq!(tape.value(taped.xhat).data(), value.xhat.data());
        assert_eq!(tape.value(taped.s).data(), value.s.data());
        assert_eq!(tape.value(taped.probs).data(), value.yhat.data());
    }
}
