//! Model parameters as named plain-data entries, their initialization
//! schema, and the checkpoint format.
//!
//! Checkpoint layout (all little-endian): magic `EVCK`, version u32, JSON
//! manifest (length-prefixed; model config + seed + step), entry count,
//! then per entry: name (u16 length + UTF-8), kind byte, rank byte, dims as
//! u32, payload as f64 words. Payloads are stored in f64 regardless of the
//! in-memory scalar.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight.
    Weight,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamEntry<S> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

/// Ordered, named parameter store. Plain data (`Send + Sync`), so training
/// workers can share a snapshot and rebuild graph tensors locally.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    config: ModelConfig,
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

enum Init {
    /// Normal(0, sqrt(2 / fan_in)) — conv layers feeding ReLUs.
    ConvHe(usize),
    /// Normal(0, sqrt(1 / fan_in)) — linear projections.
    Linear(usize),
    Zeros,
    Ones,
    /// Normal(0, 0.02) — the learnable target query.
    Query,
}

struct Spec {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    init: Init,
}

fn attention_specs(prefix: &str, d: usize, specs: &mut Vec<Spec>) {
    for part in ["wq", "wk", "wv", "wo"] {
        specs.push(Spec {
            name: format!("{prefix}.{part}"),
            kind: ParamKind::Weight,
            shape: vec![d, d],
            init: Init::Linear(d),
        });
    }
}

fn ffn_specs(prefix: &str, d: usize, hidden: usize, specs: &mut Vec<Spec>) {
    specs.push(Spec {
        name: format!("{prefix}.w1"),
        kind: ParamKind::Weight,
        shape: vec![d, hidden],
        init: Init::Linear(d),
    });
    specs.push(Spec {
        name: format!("{prefix}.b1"),
        kind: ParamKind::Weight,
        shape: vec![hidden],
        init: Init::Zeros,
    });
    specs.push(Spec {
        name: format!("{prefix}.w2"),
        kind: ParamKind::Weight,
        shape: vec![hidden, d],
        init: Init::Linear(hidden),
    });
    specs.push(Spec {
        name: format!("{prefix}.b2"),
        kind: ParamKind::Weight,
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn conv_specs(prefix: &str, out_c: usize, in_c: usize, k: usize, bias: bool, specs: &mut Vec<Spec>) {
    specs.push(Spec {
        name: format!("{prefix}.weight"),
        kind: ParamKind::Weight,
        shape: vec![out_c, in_c, k, k],
        init: Init::ConvHe(in_c * k * k),
    });
    if bias {
        specs.push(Spec {
            name: format!("{prefix}.bias"),
            kind: ParamKind::Weight,
            shape: vec![out_c],
            init: Init::Zeros,
        });
    }
}

fn bn_specs(prefix: &str, c: usize, specs: &mut Vec<Spec>) {
    specs.push(Spec {
        name: format!("{prefix}.gamma"),
        kind: ParamKind::Weight,
        shape: vec![c],
        init: Init::Ones,
    });
    specs.push(Spec {
        name: format!("{prefix}.beta"),
        kind: ParamKind::Weight,
        shape: vec![c],
        init: Init::Zeros,
    });
    specs.push(Spec {
        name: format!("{prefix}.running_mean"),
        kind: ParamKind::Buffer,
        shape: vec![c],
        init: Init::Zeros,
    });
    specs.push(Spec {
        name: format!("{prefix}.running_var"),
        kind: ParamKind::Buffer,
        shape: vec![c],
        init: Init::Ones,
    });
}

fn head_specs(prefix: &str, d: usize, hidden: &[usize], out_c: usize, specs: &mut Vec<Spec>) {
    let mut in_c = d;
    for (i, &c) in hidden.iter().enumerate() {
        conv_specs(&format!("{prefix}.{i}.conv"), c, in_c, 3, false, specs);
        bn_specs(&format!("{prefix}.{i}.bn"), c, specs);
        in_c = c;
    }
    conv_specs(&format!("{prefix}.out"), out_c, in_c, 3, true, specs);
}

/// The full parameter schema, in creation order, derived from the config.
fn schema(cfg: &ModelConfig) -> Vec<Spec> {
    let mut specs = Vec::new();
    let (c, d) = (cfg.feature_channels(), cfg.embed_dim);

    let mut in_c = cfg.input_channels;
    for (i, stage) in cfg.backbone.iter().enumerate() {
        conv_specs(&format!("backbone.{i}.conv"), stage.channels, in_c, 3, false, &mut specs);
        bn_specs(&format!("backbone.{i}.bn"), stage.channels, &mut specs);
        in_c = stage.channels;
    }

    conv_specs("tan.phi", c, c, 3, true, &mut specs);
    conv_specs("tan.varphi", c, c, 3, true, &mut specs);
    conv_specs("tan.bottleneck", d, c, 1, true, &mut specs);
    for i in 0..cfg.tan_encoders {
        attention_specs(&format!("tan.encoder.{i}.attn"), d, &mut specs);
        ffn_specs(&format!("tan.encoder.{i}.ffn"), d, cfg.ffn_hidden, &mut specs);
    }
    for i in 0..cfg.tan_decoders {
        attention_specs(&format!("tan.decoder.{i}.self_attn"), d, &mut specs);
        attention_specs(&format!("tan.decoder.{i}.cross_attn"), d, &mut specs);
        ffn_specs(&format!("tan.decoder.{i}.ffn"), d, cfg.ffn_hidden, &mut specs);
    }
    specs.push(Spec {
        name: "tan.target_query".into(),
        kind: ParamKind::Weight,
        shape: vec![1, d],
        init: Init::Query,
    });

    conv_specs("man.compress", d, c, 3, true, &mut specs);
    for i in 0..cfg.man_encoders {
        attention_specs(&format!("man.encoder.{i}.attn"), d, &mut specs);
        ffn_specs(&format!("man.encoder.{i}.ffn"), d, cfg.ffn_hidden, &mut specs);
    }

    head_specs("head.center", d, &cfg.head_channels, 1, &mut specs);
    head_specs("head.size", d, &cfg.head_channels, 2, &mut specs);
    specs
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for spec in schema(config) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::ConvHe(fan_in) => sample_normal(&mut rng, n, (2.0 / fan_in as f64).sqrt()),
                Init::Linear(fan_in) => sample_normal(&mut rng, n, (1.0 / fan_in as f64).sqrt()),
                Init::Query => sample_normal(&mut rng, n, 0.02),
            };
            entries.push(ParamEntry {
                name: spec.name,
                kind: spec.kind,
                shape: spec.shape,
                data,
            });
        }
        Ok(Self::from_entries(config.clone(), entries))
    }

    fn from_entries(config: ModelConfig, entries: Vec<ParamEntry<S>>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self {
            config,
            entries,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn weights(&self) -> impl Iterator<Item = &ParamEntry<S>> {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight)
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<S>> {
        self.entries
            .iter_mut()
            .filter(|e| e.kind == ParamKind::Weight)
    }

    /// Total scalar count across trainable weights.
    pub fn weight_len(&self) -> usize {
        self.weights().map(|e| e.len()).sum()
    }

    pub fn save<W: Write>(&self, mut w: W, meta: &CheckpointMeta) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(meta)?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[match e.kind {
                ParamKind::Weight => 0u8,
                ParamKind::Buffer => 1u8,
            }])?;
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<(Self, CheckpointMeta)> {
        let bad = |msg: &str| Error::Model(format!("checkpoint: {msg}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        if u32::from_le_bytes(u32b) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut u32b)?;
        let mlen = u32::from_le_bytes(u32b) as usize;
        let mut manifest = vec![0u8; mlen];
        r.read_exact(&mut manifest)?;
        let meta: CheckpointMeta = serde_json::from_slice(&manifest)?;
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let nlen = u16::from_le_bytes(u16b) as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name not UTF-8"))?;
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)?;
            let kind = match byte[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                _ => return Err(bad("unknown entry kind")),
            };
            r.read_exact(&mut byte)?;
            let rank = byte[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u32b)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut f64b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut f64b)?;
                data.push(S::from_f64(f64::from_le_bytes(f64b)));
            }
            entries.push(ParamEntry {
                name,
                kind,
                shape,
                data,
            });
        }
        let params = Self::from_entries(meta.config.clone(), entries);
        // The schema implied by the stored config must match the entries.
        let expect = schema(&meta.config);
        if expect.len() != params.entries.len()
            || expect
                .iter()
                .zip(&params.entries)
                .any(|(s, e)| s.name != e.name || s.shape != e.shape)
        {
            return Err(bad("entries do not match the stored model config"));
        }
        Ok((params, meta))
    }
}

fn sample_normal<S: Scalar>(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<S> {
    let dist = Normal::new(0.0f64, std).expect("valid normal");
    (0..n).map(|_| S::from_f64(dist.sample(rng))).collect()
}

/// Deterministic sub-seed derivation (splitmix64 over a combined key).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[allow(dead_code)]
fn _rng_is_send_sync(p: ModelParams<f64>) -> impl Send + Sync {
    p
}
