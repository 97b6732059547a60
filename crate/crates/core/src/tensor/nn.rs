//! Neural building blocks: multi-head attention, feed-forward, batch norm,
//! dropout. All are compositions of (or peers to) the primitive ops, so
//! gradients come for free or are derived locally.

use rand::RngCore;

use super::{make_op, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Attention geometry: model width `d_m`, head count `n_h`, per-head key
/// and value widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_width: usize,
    pub heads: usize,
    pub key_width: usize,
    pub value_width: usize,
}

impl AttentionConfig {
    /// Even split: `d_k = d_v = d_m / n_h`.
    pub fn split(model_width: usize, heads: usize) -> Self {
        assert!(heads > 0 && model_width % heads == 0, "model width must divide by heads");
        Self {
            model_width,
            heads,
            key_width: model_width / heads,
            value_width: model_width / heads,
        }
    }
}

/// Projection weights for one attention module.
#[derive(Debug, Clone)]
pub struct AttentionWeights<S: Scalar> {
    /// `[d_m, n_h * d_k]`
    pub wq: Tensor<S>,
    /// `[d_m, n_h * d_k]`
    pub wk: Tensor<S>,
    /// `[d_m, n_h * d_v]`
    pub wv: Tensor<S>,
    /// `[n_h * d_v, d_m]`
    pub wo: Tensor<S>,
}

/// Scaled dot-product attention over `n_h` heads:
/// `H_i = softmax(Q W_q_i (K W_k_i)^T / sqrt(d_k)) V W_v_i`, heads
/// concatenated and mixed by `W_o`.
pub fn multi_head_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    cfg: &AttentionConfig,
    w: &AttentionWeights<S>,
) -> Result<Tensor<S>> {
    let d = cfg.model_width;
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        match t.shape() {
            [_, width] if *width == d => {}
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "attention {name}: expected [n, {d}], got {s:?}"
                )))
            }
        }
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(TensorError::ShapeMismatch(format!(
            "attention: K rows {} vs V rows {}",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    let qp = q.matmul(&w.wq)?;
    let kp = k.matmul(&w.wk)?;
    let vp = v.matmul(&w.wv)?;
    let inv_sqrt_dk = S::from_f64(1.0 / (cfg.key_width as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qi = qp.slice_cols(i * cfg.key_width, cfg.key_width)?;
        let ki = kp.slice_cols(i * cfg.key_width, cfg.key_width)?;
        let vi = vp.slice_cols(i * cfg.value_width, cfg.value_width)?;
        let scores = qi.matmul(&ki.transpose()?)?.scale(inv_sqrt_dk);
        let attn = scores.softmax_last();
        heads.push(attn.matmul(&vi)?);
    }
    Tensor::concat_cols(&heads)?.matmul(&w.wo)
}

/// Feed-forward weights: two linear maps with a ReLU between.
#[derive(Debug, Clone)]
pub struct FfnWeights<S: Scalar> {
    /// `[d, hidden]`
    pub w1: Tensor<S>,
    /// `[hidden]`
    pub b1: Tensor<S>,
    /// `[hidden, d]`
    pub w2: Tensor<S>,
    /// `[d]`
    pub b2: Tensor<S>,
}

/// `max(0, x W1 + b1) W2 + b2`, with inverted dropout on the hidden layer
/// when an RNG is supplied (training mode only).
pub fn ffn<S: Scalar>(
    x: &Tensor<S>,
    w: &FfnWeights<S>,
    dropout_rate: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<Tensor<S>> {
    let hidden = x.matmul(&w.w1)?.add_row_bias(&w.b1)?.relu();
    let hidden = match rng {
        Some(rng) if dropout_rate > 0.0 => dropout(&hidden, dropout_rate, rng),
        _ => hidden,
    };
    hidden.matmul(&w.w2)?.add_row_bias(&w.b2)
}

/// Inverted dropout: zero each element with probability `rate`, scale the
/// survivors by `1 / (1 - rate)`. Call only in training mode.
pub fn dropout<S: Scalar>(x: &Tensor<S>, rate: f64, rng: &mut dyn RngCore) -> Tensor<S> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    if rate == 0.0 {
        return x.clone();
    }
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.len())
        .map(|_| {
            let u = rand::Rng::random::<f64>(rng);
            if u < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    let data: Vec<S> = x
        .data_ref()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    make_op(x.shape().to_vec(), data, vec![x.clone()], move |ctx| {
        let g = ctx.out_grad;
        ctx.add_to(0, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i] * mask[i];
            }
        });
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics (biased variance), plain data for running state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    /// Exponential update toward `batch` with the given momentum.
    pub fn update(&mut self, batch: &BnStats<S>, momentum: f64) {
        let m = S::from_f64(momentum);
        let keep = S::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `[c, h, w]`: per-channel statistics across the
/// spatial field. Train mode normalizes by the observed batch statistics
/// and returns them so the caller can fold them into the running state;
/// eval mode normalizes by `running`.
pub fn batch_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &BnStats<S>,
    mode: BnMode,
) -> Result<(Tensor<S>, Option<BnStats<S>>)> {
    let &[c, h, w] = x.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm: expected [c,h,w], got {:?}",
            x.shape()
        )));
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm: gamma {:?} / beta {:?} vs {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let n = h * w;
    let eps = S::from_f64(BN_EPS);
    let inv_n = S::from_f64(1.0 / n as f64);

    let (mean, var) = match mode {
        BnMode::Train => {
            let xd = x.data_ref();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let plane = &xd[ci * n..(ci + 1) * n];
                let m: S = plane.iter().copied().sum::<S>() * inv_n;
                let v: S = plane.iter().map(|&x| (x - m) * (x - m)).sum::<S>() * inv_n;
                mean[ci] = m;
                var[ci] = v;
            }
            (mean, var)
        }
        BnMode::Eval => (running.mean.clone(), running.var.clone()),
    };

    let xd = x.data_ref();
    let gd = gamma.data_ref();
    let bd = beta.data_ref();
    let mut data = vec![S::zero(); c * n];
    for ci in 0..c {
        let inv_std = S::one() / (var[ci] + eps).sqrt();
        let (m, g, b) = (mean[ci], gd[ci], bd[ci]);
        for i in 0..n {
            data[ci * n + i] = (xd[ci * n + i] - m) * inv_std * g + b;
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let stats = BnStats {
        mean: mean.clone(),
        var: var.clone(),
    };
    let train = mode == BnMode::Train;
    let out = make_op(
        vec![c, h, w],
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let xd = ctx.parents[0].data_ref();
            let gd = ctx.parents[1].data_ref();
            let g = ctx.out_grad;
            // d_beta and d_gamma are shared by both modes.
            ctx.add_to(2, |buf| {
                for ci in 0..c {
                    let mut acc = S::zero();
                    for i in 0..n {
                        acc += g[ci * n + i];
                    }
                    buf[ci] += acc;
                }
            });
            ctx.add_to(1, |buf| {
                for ci in 0..c {
                    let inv_std = S::one() / (var[ci] + eps).sqrt();
                    let m = mean[ci];
                    let mut acc = S::zero();
                    for i in 0..n {
                        acc += g[ci * n + i] * (xd[ci * n + i] - m) * inv_std;
                    }
                    buf[ci] += acc;
                }
            });
            ctx.add_to(0, |buf| {
                for ci in 0..c {
                    let inv_std = S::one() / (var[ci] + eps).sqrt();
                    let m = mean[ci];
                    let scale = gd[ci] * inv_std;
                    if train {
                        // Gradient through the batch statistics.
                        let mut g_mean = S::zero();
                        let mut g_dot_xhat = S::zero();
                        for i in 0..n {
                            let xhat = (xd[ci * n + i] - m) * inv_std;
                            g_mean += g[ci * n + i];
                            g_dot_xhat += g[ci * n + i] * xhat;
                        }
                        g_mean *= inv_n;
                        g_dot_xhat *= inv_n;
                        for i in 0..n {
                            let xhat = (xd[ci * n + i] - m) * inv_std;
                            buf[ci * n + i] +=
                                scale * (g[ci * n + i] - g_mean - xhat * g_dot_xhat);
                        }
                    } else {
                        for i in 0..n {
                            buf[ci * n + i] += scale * g[ci * n + i];
                        }
                    }
                }
            });
        },
    );
    Ok((out, if train { Some(stats) } else { None }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn eye(n: usize) -> Tensor<f64> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::constant(vec![n, n], data)
    }

    #[test]
    fn single_token_identity_attention_returns_v() {
        // one token, one head, identity projections: softmax of a scalar is 1
        let d = 4;
        let cfg = AttentionConfig {
            model_width: d,
            heads: 1,
            key_width: d,
            value_width: d,
        };
        let w = AttentionWeights {
            wq: eye(d),
            wk: eye(d),
            wv: eye(d),
            wo: eye(d),
        };
        let q = Tensor::constant(vec![1, d], vec![3.0, -7.0, 0.5, 100.0]);
        let v = Tensor::constant(vec![1, d], vec![1.0, 2.0, 3.0, 4.0]);
        let out = multi_head_attention(&q, &q, &v, &cfg, &w).unwrap();
        for (a, b) in out.data_vec().iter().zip(v.data_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_zero_weights_and_relu_gate() {
        let d = 3;
        let hidden = 5;
        let x = Tensor::constant(vec![2, d], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let zero = FfnWeights {
            w1: Tensor::zeros(vec![d, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, d]),
            b2: Tensor::zeros(vec![d]),
        };
        let y = ffn(&x, &zero, 0.0, None).unwrap();
        assert!(y.data_vec().iter().all(|&v| v == 0.0));

        // all-negative pre-activations: the ReLU kills W2's input, so b2 wins
        let gated = FfnWeights {
            w1: Tensor::zeros(vec![d, hidden]),
            b1: Tensor::full(vec![hidden], -1.0),
            w2: Tensor::full(vec![hidden, d], 9.0),
            b2: Tensor::constant(vec![d], vec![0.25, 0.5, 0.75]),
        };
        let y = ffn(&x, &gated, 0.0, None).unwrap();
        assert_eq!(y.data_vec(), vec![0.25, 0.5, 0.75, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn batch_norm_normalized_input_passes_through() {
        // zero-mean unit-variance channel (biased variance = 1)
        let vals: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::constant(vec![1, 2, 2], vals.to_vec());
        let gamma = Tensor::constant(vec![1], vec![1.0]);
        let beta = Tensor::constant(vec![1], vec![0.0]);
        let (y, stats) = batch_norm(&x, &gamma, &beta, &BnStats::identity(1), BnMode::Train).unwrap();
        for (a, b) in y.data_vec().iter().zip(vals) {
            assert!((a - b).abs() < 1e-4);
        }
        let stats = stats.unwrap();
        assert!((stats.mean[0]).abs() < 1e-12);
        assert!((stats.var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_channel_outputs_beta() {
        let x = Tensor::<f64>::constant(vec![1, 2, 2], vec![5.0; 4]);
        let gamma = Tensor::constant(vec![1], vec![2.0]);
        let beta = Tensor::constant(vec![1], vec![0.7]);
        let (y, _) = batch_norm(&x, &gamma, &beta, &BnStats::identity(1), BnMode::Train).unwrap();
        for v in y.data_vec() {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::constant(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let gamma = Tensor::constant(vec![1], vec![1.5]);
        let beta = Tensor::constant(vec![1], vec![-0.5]);
        let running = BnStats::identity(1); // mean 0, var 1
        let (y, stats) = batch_norm(&x, &gamma, &beta, &running, BnMode::Eval).unwrap();
        assert!(stats.is_none());
        for (v, &xv) in y.data_vec().iter().zip(&[1.0, 2.0, 3.0]) {
            let expect = (xv - 0.0) / (1.0f64 + BN_EPS).sqrt() * 1.5 - 0.5;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_scales_survivors_and_is_seed_deterministic() {
        let x = Tensor::<f64>::constant(vec![100], vec![1.0; 100]);
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            dropout(&x, 0.4, &mut rng).data_vec()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a.iter().any(|&v| v != 0.0));
    }
}
