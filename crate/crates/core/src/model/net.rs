//! Forward graph of the tracker, bound to a parameter store.
//!
//! Binding copies the named parameter data into graph leaves (trainable) or
//! constants (inference), so a `Model` lives on one thread while the plain
//! `ModelParams` snapshot is shared across workers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::params::{ModelParams, ParamKind};
use super::posenc::sinusoidal_2d;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::event::BBoxN;
use crate::grid::Volume;
use crate::scalar::Scalar;
use crate::tensor::{
    batch_norm, conv2d, depthwise_xcorr, ffn, multi_head_attention, AttentionConfig,
    AttentionWeights, BnMode, BnStats, FfnWeights, Tensor,
};

/// Per-call forward context: mode, dropout RNG, and the batch-norm
/// statistics observed in training mode (to be folded into the running
/// state by the owner of the parameters).
pub struct Fwd<S: Scalar> {
    training: bool,
    rng: Option<ChaCha12Rng>,
    pub bn_updates: Vec<(String, BnStats<S>)>,
}

impl<S: Scalar> Fwd<S> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training mode; the seed drives dropout masks for this call.
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: Some(ChaCha12Rng::seed_from_u64(seed)),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn dropout_rng(&mut self) -> Option<&mut dyn RngCore> {
        if self.training {
            self.rng.as_mut().map(|r| r as &mut dyn RngCore)
        } else {
            None
        }
    }
}

/// Differentiable box prediction in search-crop coordinates.
pub struct PredBox<S: Scalar> {
    pub cx: Tensor<S>,
    pub cy: Tensor<S>,
    pub w: Tensor<S>,
    pub h: Tensor<S>,
}

impl<S: Scalar> PredBox<S> {
    pub fn values(&self) -> BBoxN {
        BBoxN::new(
            self.cx.item().as_f64(),
            self.cy.item().as_f64(),
            self.w.item().as_f64(),
            self.h.item().as_f64(),
        )
    }
}

pub struct ModelOutput<S: Scalar> {
    pub bbox: PredBox<S>,
    /// Softmax over the center logits, `[1, G*G]`.
    pub center_probs: Tensor<S>,
    /// Fused feature map `[d, G, G]` entering the regression head.
    pub fused: Tensor<S>,
}

struct ConvP<S: Scalar> {
    w: Tensor<S>,
    b: Option<Tensor<S>>,
}

struct BnP<S: Scalar> {
    name: String,
    gamma: Tensor<S>,
    beta: Tensor<S>,
    running: BnStats<S>,
}

struct StageP<S: Scalar> {
    conv: ConvP<S>,
    bn: BnP<S>,
    stride: usize,
}

struct EncoderP<S: Scalar> {
    attn: AttentionWeights<S>,
    ffn: FfnWeights<S>,
}

struct DecoderP<S: Scalar> {
    self_attn: AttentionWeights<S>,
    cross_attn: AttentionWeights<S>,
    ffn: FfnWeights<S>,
}

struct HeadP<S: Scalar> {
    hidden: Vec<(ConvP<S>, BnP<S>)>,
    out: ConvP<S>,
}

pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    attn_cfg: AttentionConfig,
    stages: Vec<StageP<S>>,
    phi: ConvP<S>,
    varphi: ConvP<S>,
    bottleneck: ConvP<S>,
    tan_encoders: Vec<EncoderP<S>>,
    tan_decoders: Vec<DecoderP<S>>,
    target_query: Tensor<S>,
    man_compress: ConvP<S>,
    man_encoders: Vec<EncoderP<S>>,
    head_center: HeadP<S>,
    head_size: HeadP<S>,
    posenc: Option<Tensor<S>>,
    ordered: Vec<(String, Tensor<S>)>,
}

struct Binder<'a, S: Scalar> {
    params: &'a ModelParams<S>,
    trainable: bool,
    ordered: Vec<(String, Tensor<S>)>,
}

impl<'a, S: Scalar> Binder<'a, S> {
    fn tensor(&mut self, name: &str) -> Result<Tensor<S>> {
        let e = self
            .params
            .entry(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        let t = if self.trainable && e.kind == ParamKind::Weight {
            Tensor::leaf(e.shape.clone(), e.data.clone())
        } else {
            Tensor::constant(e.shape.clone(), e.data.clone())
        };
        if e.kind == ParamKind::Weight {
            self.ordered.push((name.to_string(), t.clone()));
        }
        Ok(t)
    }

    fn buffer(&self, name: &str) -> Result<Vec<S>> {
        let e = self
            .params
            .entry(name)
            .ok_or_else(|| Error::Model(format!("missing buffer {name}")))?;
        Ok(e.data.clone())
    }

    fn conv(&mut self, prefix: &str, bias: bool) -> Result<ConvP<S>> {
        Ok(ConvP {
            w: self.tensor(&format!("{prefix}.weight"))?,
            b: if bias {
                Some(self.tensor(&format!("{prefix}.bias"))?)
            } else {
                None
            },
        })
    }

    fn bn(&mut self, prefix: &str) -> Result<BnP<S>> {
        Ok(BnP {
            name: prefix.to_string(),
            gamma: self.tensor(&format!("{prefix}.gamma"))?,
            beta: self.tensor(&format!("{prefix}.beta"))?,
            running: BnStats {
                mean: self.buffer(&format!("{prefix}.running_mean"))?,
                var: self.buffer(&format!("{prefix}.running_var"))?,
            },
        })
    }

    fn attn(&mut self, prefix: &str) -> Result<AttentionWeights<S>> {
        Ok(AttentionWeights {
            wq: self.tensor(&format!("{prefix}.wq"))?,
            wk: self.tensor(&format!("{prefix}.wk"))?,
            wv: self.tensor(&format!("{prefix}.wv"))?,
            wo: self.tensor(&format!("{prefix}.wo"))?,
        })
    }

    fn ffn(&mut self, prefix: &str) -> Result<FfnWeights<S>> {
        Ok(FfnWeights {
            w1: self.tensor(&format!("{prefix}.w1"))?,
            b1: self.tensor(&format!("{prefix}.b1"))?,
            w2: self.tensor(&format!("{prefix}.w2"))?,
            b2: self.tensor(&format!("{prefix}.b2"))?,
        })
    }

    fn head(&mut self, prefix: &str, channels: &[usize]) -> Result<HeadP<S>> {
        let mut hidden = Vec::new();
        for i in 0..channels.len() {
            hidden.push((
                self.conv(&format!("{prefix}.{i}.conv"), false)?,
                self.bn(&format!("{prefix}.{i}.bn"))?,
            ));
        }
        Ok(HeadP {
            hidden,
            out: self.conv(&format!("{prefix}.out"), true)?,
        })
    }
}

impl<S: Scalar> Model<S> {
    /// Build the forward structure from a parameter snapshot. `trainable`
    /// turns the weights into gradient-accumulating leaves.
    pub fn bind(params: &ModelParams<S>, trainable: bool) -> Result<Self> {
        let cfg = params.config().clone();
        cfg.validate()?;
        let mut b = Binder {
            params,
            trainable,
            ordered: Vec::new(),
        };
        let stages = cfg
            .backbone
            .iter()
            .enumerate()
            .map(|(i, stage)| {
                Ok(StageP {
                    conv: b.conv(&format!("backbone.{i}.conv"), false)?,
                    bn: b.bn(&format!("backbone.{i}.bn"))?,
                    stride: stage.stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let phi = b.conv("tan.phi", true)?;
        let varphi = b.conv("tan.varphi", true)?;
        let bottleneck = b.conv("tan.bottleneck", true)?;
        let tan_encoders = (0..cfg.tan_encoders)
            .map(|i| {
                Ok(EncoderP {
                    attn: b.attn(&format!("tan.encoder.{i}.attn"))?,
                    ffn: b.ffn(&format!("tan.encoder.{i}.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tan_decoders = (0..cfg.tan_decoders)
            .map(|i| {
                Ok(DecoderP {
                    self_attn: b.attn(&format!("tan.decoder.{i}.self_attn"))?,
                    cross_attn: b.attn(&format!("tan.decoder.{i}.cross_attn"))?,
                    ffn: b.ffn(&format!("tan.decoder.{i}.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target_query = b.tensor("tan.target_query")?;
        let man_compress = b.conv("man.compress", true)?;
        let man_encoders = (0..cfg.man_encoders)
            .map(|i| {
                Ok(EncoderP {
                    attn: b.attn(&format!("man.encoder.{i}.attn"))?,
                    ffn: b.ffn(&format!("man.encoder.{i}.ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_center = b.head("head.center", &cfg.head_channels)?;
        let head_size = b.head("head.size", &cfg.head_channels)?;

        let posenc = cfg
            .positional_encoding
            .then(|| sinusoidal_2d(cfg.search_grid(), cfg.embed_dim));
        Ok(Self {
            attn_cfg: AttentionConfig::split(cfg.embed_dim, cfg.heads),
            cfg,
            stages,
            phi,
            varphi,
            bottleneck,
            tan_encoders,
            tan_decoders,
            target_query,
            man_compress,
            man_encoders,
            head_center,
            head_size,
            posenc,
            ordered: b.ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Weight tensors in parameter-store order.
    pub fn weight_tensors(&self) -> &[(String, Tensor<S>)] {
        &self.ordered
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.ordered {
            t.zero_grad();
        }
    }

    /// Concatenated weight gradients aligned with the parameter store
    /// (zeros where no gradient flowed).
    pub fn grad_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for (_, t) in &self.ordered {
            match t.grad_vec() {
                Some(g) => out.extend(g),
                None => out.extend(std::iter::repeat_n(S::zero(), t.len())),
            }
        }
        out
    }

    // Normalization always uses the sample's own statistics (instance
    // style). With one sample per forward pass, running-average statistics
    // drift far from any particular event crop's statistics (crops differ
    // wildly in event density), which breaks inference; per-sample stats
    // keep training and tracking consistent and stay deterministic. The
    // running buffers are still maintained during training and stored in
    // checkpoints.
    fn conv_bn_relu(
        &self,
        x: &Tensor<S>,
        conv: &ConvP<S>,
        bn: &BnP<S>,
        stride: usize,
        fwd: &mut Fwd<S>,
    ) -> Result<Tensor<S>> {
        let y = conv2d(x, &conv.w, conv.b.as_ref(), stride, 1)?;
        let (y, stats) = batch_norm(&y, &bn.gamma, &bn.beta, &bn.running, BnMode::Train)?;
        if fwd.is_training() {
            if let Some(stats) = stats {
                fwd.bn_updates.push((bn.name.clone(), stats));
            }
        }
        Ok(y.relu())
    }

    /// Shared Siamese feature extractor: `[c_in, H, W]` to `[C, H/s, W/s]`.
    pub fn extract_features(&self, input: &Volume<S>, fwd: &mut Fwd<S>) -> Result<Tensor<S>> {
        if input.channels != self.cfg.input_channels {
            return Err(Error::Model(format!(
                "input has {} channels, model expects {}",
                input.channels, self.cfg.input_channels
            )));
        }
        let s = self.cfg.stride();
        if input.height % s != 0 || input.width % s != 0 {
            return Err(Error::Model(format!(
                "input {}x{} not divisible by stride {s}",
                input.height, input.width
            )));
        }
        let mut x = Tensor::constant(
            vec![input.channels, input.height, input.width],
            input.data().to_vec(),
        );
        for stage in &self.stages {
            x = self.conv_bn_relu(&x, &stage.conv, &stage.bn, stage.stride, fwd)?;
        }
        Ok(x)
    }

    /// Depth-wise cross-correlation of conv-refined template and search
    /// features, then a 1x1 bottleneck from C to d channels.
    pub fn tan_correlate(&self, f_z: &Tensor<S>, f_x: &Tensor<S>) -> Result<Tensor<S>> {
        let k = self.cfg.kernel_size();
        let &[_, hz, wz] = f_z.shape() else {
            return Err(Error::Model(format!(
                "template features must be [C,h,w], got {:?}",
                f_z.shape()
            )));
        };
        if k > hz || k > wz {
            return Err(Error::Model(format!(
                "kernel {k} exceeds template feature grid {hz}x{wz}"
            )));
        }
        let phi_z = conv2d(f_z, &self.phi.w, self.phi.b.as_ref(), 1, 1)?;
        let phi_x = conv2d(f_x, &self.varphi.w, self.varphi.b.as_ref(), 1, 1)?;
        let kernel = phi_z.crop_spatial((hz - k) / 2, (wz - k) / 2, k, k)?;
        let r = depthwise_xcorr(&phi_x, &kernel, (k - 1) / 2)?;
        Ok(conv2d(&r, &self.bottleneck.w, self.bottleneck.b.as_ref(), 1, 0)?)
    }

    fn tokens_from_map(&self, map: &Tensor<S>) -> Result<Tensor<S>> {
        let &[d, gh, gw] = map.shape() else {
            return Err(Error::Model(format!(
                "expected [d,G,G] map, got {:?}",
                map.shape()
            )));
        };
        let tokens = map.reshape(vec![d, gh * gw])?.transpose()?;
        match &self.posenc {
            Some(pe) => Ok(tokens.add(pe)?),
            None => Ok(tokens),
        }
    }

    fn encoder_stack(
        &self,
        mut tokens: Tensor<S>,
        blocks: &[EncoderP<S>],
        self_attention: bool,
        fwd: &mut Fwd<S>,
    ) -> Result<Tensor<S>> {
        for block in blocks {
            let fe = if self_attention {
                let attn =
                    multi_head_attention(&tokens, &tokens, &tokens, &self.attn_cfg, &block.attn)?;
                tokens.add(&attn)?
            } else {
                tokens
            };
            let f = ffn(&fe, &block.ffn, self.cfg.dropout, fwd.dropout_rng())?;
            tokens = fe.add(&f)?;
        }
        Ok(tokens)
    }

    /// Flatten the correlation map to tokens and run the target-branch
    /// encoder stack: `F_e = R + MHA(R,R,R)`, `R' = F_e + FFN(F_e)`.
    pub fn tan_encode(&self, r: &Tensor<S>, fwd: &mut Fwd<S>) -> Result<Tensor<S>> {
        let tokens = self.tokens_from_map(r)?;
        self.encoder_stack(
            tokens,
            &self.tan_encoders,
            self.cfg.ablation.tan_self_attention,
            fwd,
        )
    }

    /// Decoder over the single target query: per block,
    /// `A = X + MHA(X+TQ, X+TQ, X)`, `F_d = A + MHA(A+TQ, R', R')`,
    /// `T = F_d + FFN(F_d)`, starting from `X = TQ`, with the query
    /// re-added as the positional term at every block.
    pub fn tan_decode(&self, r_prime: &Tensor<S>, fwd: &mut Fwd<S>) -> Result<Tensor<S>> {
        let tq = &self.target_query;
        let mut x = tq.clone();
        for block in &self.tan_decoders {
            let a = if self.cfg.ablation.tan_self_attention {
                let qk = x.add(tq)?;
                let attn = multi_head_attention(&qk, &qk, &x, &self.attn_cfg, &block.self_attn)?;
                x.add(&attn)?
            } else {
                x
            };
            let q = a.add(tq)?;
            let cross = multi_head_attention(&q, r_prime, r_prime, &self.attn_cfg, &block.cross_attn)?;
            let f_d = a.add(&cross)?;
            let f = ffn(&f_d, &block.ffn, self.cfg.dropout, fwd.dropout_rng())?;
            x = f_d.add(&f)?;
        }
        Ok(x)
    }

    /// Compress search features to d channels and run the motion-branch
    /// encoder stack.
    pub fn man_encode(&self, f_x: &Tensor<S>, fwd: &mut Fwd<S>) -> Result<Tensor<S>> {
        let m = conv2d(
            f_x,
            &self.man_compress.w,
            self.man_compress.b.as_ref(),
            self.cfg.man_stride,
            1,
        )?;
        let g = self.cfg.search_grid();
        if m.shape() != [self.cfg.embed_dim, g, g] {
            return Err(Error::Model(format!(
                "motion grid {:?} does not match correlation grid {g}",
                &m.shape()[1..]
            )));
        }
        let tokens = self.tokens_from_map(&m)?;
        self.encoder_stack(
            tokens,
            &self.man_encoders,
            self.cfg.ablation.man_self_attention,
            fwd,
        )
    }

    /// Gate token features by their similarity to the target embedding and
    /// add the target-branch shortcut:
    /// `gate_j = sigmoid(<motion_j, T> / sqrt(d))`,
    /// `fused_j = motion_j * gate_j + R'_j`.
    pub fn fuse(
        &self,
        t: &Tensor<S>,
        m_prime: Option<&Tensor<S>>,
        r_prime: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let d = self.cfg.embed_dim;
        let g = self.cfg.search_grid();
        let motion = m_prime.unwrap_or(r_prime);
        let scores = motion
            .matmul(&t.transpose()?)?
            .scale(S::from_f64(1.0 / (d as f64).sqrt()));
        let gate = scores.sigmoid();
        let ones = Tensor::constant(vec![1, d], vec![S::one(); d]);
        let gated = motion.mul(&gate.matmul(&ones)?)?;
        let fused_tokens = if self.cfg.ablation.tfm_shortcut {
            gated.add(r_prime)?
        } else {
            gated
        };
        Ok(fused_tokens.transpose()?.reshape(vec![d, g, g])?)
    }

    fn head_forward(&self, x: &Tensor<S>, head: &HeadP<S>, fwd: &mut Fwd<S>) -> Result<Tensor<S>> {
        let mut y = x.clone();
        for (conv, bn) in &head.hidden {
            y = self.conv_bn_relu(&y, conv, bn, 1, fwd)?;
        }
        Ok(conv2d(&y, &head.out.w, head.out.b.as_ref(), 1, 1)?)
    }

    /// Soft-argmax box regression over the fused map. The center is the
    /// softmax-weighted expectation of the cell coordinate grid
    /// (`(i/G) * s` pixels for i in 1..=G) normalized by the crop size;
    /// width/height pool the sigmoid size maps with the same distribution.
    pub fn regress(&self, fused: &Tensor<S>, fwd: &mut Fwd<S>) -> Result<(PredBox<S>, Tensor<S>)> {
        let g = self.cfg.search_grid();
        let s = self.cfg.stride();
        let crop = self.cfg.search_size as f64;
        let center_logits = self.head_forward(fused, &self.head_center, fwd)?;
        let size_logits = self.head_forward(fused, &self.head_size, fwd)?;

        let p = center_logits.reshape(vec![1, g * g])?.softmax_last();
        let mut wx = vec![S::zero(); g * g];
        let mut wy = vec![S::zero(); g * g];
        for row in 0..g {
            for col in 0..g {
                wx[row * g + col] = S::from_f64((col + 1) as f64 * s as f64 / crop);
                wy[row * g + col] = S::from_f64((row + 1) as f64 * s as f64 / crop);
            }
        }
        let wx = Tensor::constant(vec![1, g * g], wx);
        let wy = Tensor::constant(vec![1, g * g], wy);
        let cx = p.mul(&wx)?.sum();
        let cy = p.mul(&wy)?.sum();

        let sig = size_logits.reshape(vec![2, g * g])?.sigmoid();
        let sig_t = sig.transpose()?;
        let w_map = sig_t.slice_cols(0, 1)?.reshape(vec![1, g * g])?;
        let h_map = sig_t.slice_cols(1, 1)?.reshape(vec![1, g * g])?;
        let w = p.mul(&w_map)?.sum();
        let h = p.mul(&h_map)?.sum();

        Ok((PredBox { cx, cy, w, h }, p))
    }

    /// Full forward from cached template features and search features.
    pub fn forward_features(
        &self,
        f_z: &Tensor<S>,
        f_x: &Tensor<S>,
        fwd: &mut Fwd<S>,
    ) -> Result<ModelOutput<S>> {
        let r = self.tan_correlate(f_z, f_x)?;
        let r_prime = self.tan_encode(&r, fwd)?;
        let t = self.tan_decode(&r_prime, fwd)?;
        let m_prime = if self.cfg.ablation.use_man {
            Some(self.man_encode(f_x, fwd)?)
        } else {
            None
        };
        let fused = self.fuse(&t, m_prime.as_ref(), &r_prime)?;
        let (bbox, center_probs) = self.regress(&fused, fwd)?;
        Ok(ModelOutput {
            bbox,
            center_probs,
            fused,
        })
    }

    /// Forward from raw template and search crops.
    pub fn forward_pair(
        &self,
        template: &Volume<S>,
        search: &Volume<S>,
        fwd: &mut Fwd<S>,
    ) -> Result<ModelOutput<S>> {
        let f_z = self.extract_features(template, fwd)?;
        let f_x = self.extract_features(search, fwd)?;
        self.forward_features(&f_z, &f_x, fwd)
    }
}
