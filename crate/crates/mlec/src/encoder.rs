//! Contextual token encoder: ids + mask -> hidden states `[B, T, d]`.
//!
//! The built-in encoder is a small trainable transformer (token embedding,
//! positional signal, then masked multi-head self-attention blocks with
//! post-norm residuals). Anything honoring the same contract can replace
//! it; the decoder only sees the `[B, T, d]` output and the mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Binder, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("attention mask must be a prefix of ones (row {row})")]
    MalformedMask { row: usize },
    #[error("batch rows have unequal lengths")]
    RaggedBatch,
    #[error("sequence length {t} exceeds learned positional table ({max})")]
    PositionOutOfRange { t: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub positional: Positional,
    /// Capacity of the learned positional table; also the longest sequence
    /// a `Learned` encoder accepts.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 128,
            positional: Positional::Sinusoidal,
            max_positions: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_layers > 0 && self.embed_dim % self.num_heads != 0 {
            return Err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err("vocab_size and embed_dim must be positive".into());
        }
        Ok(())
    }
}

struct LayerParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln1_gain: Tensor,
    ln1_shift: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
    ln2_gain: Tensor,
    ln2_shift: Tensor,
}

/// The built-in trainable encoder.
pub struct Encoder {
    config: EncoderConfig,
    embedding: Tensor,
    positional_table: Option<Tensor>,
    layers: Vec<LayerParams>,
    frozen: bool,
}

const LN_EPS: f64 = 1e-5;

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Self {
        config.validate().expect("invalid encoder config");
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = Tensor::uniform(&[config.vocab_size, d], bound, rng);
        let positional_table = match config.positional {
            Positional::Sinusoidal => None,
            Positional::Learned => Some(Tensor::uniform(&[config.max_positions, d], bound, rng)),
        };
        let ff = config.feedforward_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: Tensor::uniform(&[d, d], bound, rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::uniform(&[d, d], bound, rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::uniform(&[d, d], bound, rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::uniform(&[d, d], bound, rng),
                bo: Tensor::zeros(&[d]),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_shift: Tensor::zeros(&[d]),
                ff_w1: Tensor::uniform(&[d, ff], bound, rng),
                ff_b1: Tensor::zeros(&[ff]),
                ff_w2: Tensor::uniform(&[ff, d], 1.0 / (ff as f64).sqrt(), rng),
                ff_b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_shift: Tensor::zeros(&[d]),
            })
            .collect();
        Encoder {
            config,
            embedding,
            positional_table,
            layers,
            frozen: false,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Excludes encoder parameters from optimizer updates. Forward output
    /// is unaffected.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Visits every parameter as `(name, tensor)`, in the same order as
    /// [`Encoder::bind`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("encoder/embedding".into(), &mut self.embedding);
        if let Some(p) = &mut self.positional_table {
            f("encoder/positional".into(), p);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut emit = |suffix: &str, t: &mut Tensor| f(format!("encoder/layer{i}/{suffix}"), t);
            emit("wq", &mut layer.wq);
            emit("bq", &mut layer.bq);
            emit("wk", &mut layer.wk);
            emit("bk", &mut layer.bk);
            emit("wv", &mut layer.wv);
            emit("bv", &mut layer.bv);
            emit("wo", &mut layer.wo);
            emit("bo", &mut layer.bo);
            emit("ln1_gain", &mut layer.ln1_gain);
            emit("ln1_shift", &mut layer.ln1_shift);
            emit("ff_w1", &mut layer.ff_w1);
            emit("ff_b1", &mut layer.ff_b1);
            emit("ff_w2", &mut layer.ff_w2);
            emit("ff_b2", &mut layer.ff_b2);
            emit("ln2_gain", &mut layer.ln2_gain);
            emit("ln2_shift", &mut layer.ln2_shift);
        }
    }

    /// Binds all parameters onto the tape behind `binder` and returns a
    /// forward-ready view.
    pub fn bind(&self, binder: &mut Binder<'_>) -> BoundEncoder {
        let embedding = binder.bind("encoder/embedding".into(), &self.embedding);
        let positional_table = self
            .positional_table
            .as_ref()
            .map(|p| binder.bind("encoder/positional".into(), p));
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| BoundLayer {
                wq: binder.bind(format!("encoder/layer{i}/wq"), &layer.wq),
                bq: binder.bind(format!("encoder/layer{i}/bq"), &layer.bq),
                wk: binder.bind(format!("encoder/layer{i}/wk"), &layer.wk),
                bk: binder.bind(format!("encoder/layer{i}/bk"), &layer.bk),
                wv: binder.bind(format!("encoder/layer{i}/wv"), &layer.wv),
                bv: binder.bind(format!("encoder/layer{i}/bv"), &layer.bv),
                wo: binder.bind(format!("encoder/layer{i}/wo"), &layer.wo),
                bo: binder.bind(format!("encoder/layer{i}/bo"), &layer.bo),
                ln1_gain: binder.bind(format!("encoder/layer{i}/ln1_gain"), &layer.ln1_gain),
                ln1_shift: binder.bind(format!("encoder/layer{i}/ln1_shift"), &layer.ln1_shift),
                ff_w1: binder.bind(format!("encoder/layer{i}/ff_w1"), &layer.ff_w1),
                ff_b1: binder.bind(format!("encoder/layer{i}/ff_b1"), &layer.ff_b1),
                ff_w2: binder.bind(format!("encoder/layer{i}/ff_w2"), &layer.ff_w2),
                ff_b2: binder.bind(format!("encoder/layer{i}/ff_b2"), &layer.ff_b2),
                ln2_gain: binder.bind(format!("encoder/layer{i}/ln2_gain"), &layer.ln2_gain),
                ln2_shift: binder.bind(format!("encoder/layer{i}/ln2_shift"), &layer.ln2_shift),
            })
            .collect();
        BoundEncoder {
            config: self.config.clone(),
            embedding,
            positional_table,
            layers,
        }
    }

    /// Serializes parameters in visit order.
    pub fn export_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Restores parameters from an export; shapes must match.
    pub fn import_params(&mut self, params: &[(String, Tensor)]) -> Result<(), String> {
        let mut iter = params.iter();
        let mut result = Ok(());
        self.visit_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            match iter.next() {
                Some((got_name, got)) if *got_name == name && got.shape() == t.shape() => {
                    *t = got.clone();
                }
                Some((got_name, _)) => {
                    result = Err(format!("expected param {name}, found {got_name}"));
                }
                None => result = Err(format!("missing param {name}")),
            }
        });
        if result.is_ok() && iter.next().is_some() {
            return Err("extra parameters in checkpoint".into());
        }
        result
    }
}

struct BoundLayer {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_gain: Var,
    ln1_shift: Var,
    ff_w1: Var,
    ff_b1: Var,
    ff_w2: Var,
    ff_b2: Var,
    ln2_gain: Var,
    ln2_shift: Var,
}

/// Encoder with parameters bound to a live tape.
pub struct BoundEncoder {
    config: EncoderConfig,
    embedding: Var,
    positional_table: Option<Var>,
    layers: Vec<BoundLayer>,
}

impl BoundEncoder {
    /// Full-sequence contextual embeddings `[B, T, d]`. PAD positions are
    /// excluded from attention through the mask; their output rows carry no
    /// information used downstream.
    pub fn forward(&self, input_ids: &[Vec<usize>], mask: &[Vec<u8>]) -> Result<Var, EncoderError> {
        let b = input_ids.len();
        assert!(b > 0, "empty batch");
        let t = input_ids[0].len();
        for (row, (ids, m)) in input_ids.iter().zip(mask).enumerate() {
            if ids.len() != t || m.len() != t {
                return Err(EncoderError::RaggedBatch);
            }
            let mut seen_pad = false;
            for &bit in m {
                match (bit, seen_pad) {
                    (0, _) => seen_pad = true,
                    (1, true) => return Err(EncoderError::MalformedMask { row }),
                    _ => {}
                }
            }
        }
        let d = self.config.embed_dim;

        let flat_ids: Vec<usize> = input_ids.iter().flatten().copied().collect();
        let embedded = self.embedding.embedding(&flat_ids)?; // [B*T, d]
        let mut x = match (&self.config.positional, &self.positional_table) {
            (Positional::Sinusoidal, _) => {
                let pos = sinusoidal(b, t, d);
                let pos_var = tape_of(&embedded).input(pos);
                embedded.add(&pos_var)?
            }
            (Positional::Learned, Some(table)) => {
                if t > self.config.max_positions {
                    return Err(EncoderError::PositionOutOfRange {
                        t,
                        max: self.config.max_positions,
                    });
                }
                let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
                let pos = table.embedding(&positions)?;
                embedded.add(&pos)?
            }
            (Positional::Learned, None) => unreachable!("learned positional without table"),
        };

        if !self.layers.is_empty() {
            let heads = self.config.num_heads;
            let dh = d / heads;
            let attn_mask = attention_mask(mask, heads, t);
            for layer in &self.layers {
                x = self.attention_block(layer, &x, &attn_mask, b, t, heads, dh)?;
            }
        }
        Ok(x.reshape(vec![b, t, d])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        layer: &BoundLayer,
        x: &Var,
        attn_mask: &Tensor,
        b: usize,
        t: usize,
        heads: usize,
        dh: usize,
    ) -> Result<Var, EncoderError> {
        let d = self.config.embed_dim;
        let split = |v: &Var| -> Result<Var, TensorError> {
            v.reshape(vec![b, t, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b * heads, t, dh])
        };
        let q = split(&x.matmul(&layer.wq)?.add_bias(&layer.bq)?)?;
        let k = split(&x.matmul(&layer.wk)?.add_bias(&layer.bk)?)?;
        let v = split(&x.matmul(&layer.wv)?.add_bias(&layer.bv)?)?;

        let scores = q
            .bmm(&k.permute(&[0, 2, 1])?)?
            .mul_scalar(1.0 / (dh as f64).sqrt());
        let alpha = scores.softmax(2, Some(attn_mask))?;
        let ctx = alpha
            .bmm(&v)?
            .reshape(vec![b, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b * t, d])?;
        let attended = ctx.matmul(&layer.wo)?.add_bias(&layer.bo)?;
        let x = x
            .add(&attended)?
            .layer_norm(&layer.ln1_gain, &layer.ln1_shift, LN_EPS)?;

        let hidden = x.matmul(&layer.ff_w1)?.add_bias(&layer.ff_b1)?.relu();
        let ff = hidden.matmul(&layer.ff_w2)?.add_bias(&layer.ff_b2)?;
        Ok(x.add(&ff)?
            .layer_norm(&layer.ln2_gain, &layer.ln2_shift, LN_EPS)?)
    }
}

fn tape_of(v: &Var) -> crate::tensor::Tape {
    v.tape_handle()
}

/// Key mask for scores `[B*heads, T(query), T(key)]`: entry is 1 iff the
/// key position is unmasked in its row.
fn attention_mask(mask: &[Vec<u8>], heads: usize, t: usize) -> Tensor {
    let b = mask.len();
    let mut out = vec![0.0; b * heads * t * t];
    for (row, rmask) in mask.iter().enumerate() {
        for h in 0..heads {
            let base = (row * heads + h) * t * t;
            for q in 0..t {
                for key in 0..t {
                    out[base + q * t + key] = f64::from(rmask[key]);
                }
            }
        }
    }
    Tensor::new(vec![b * heads, t, t], out).expect("attention mask shape")
}

/// Classic fixed sinusoidal position signal tiled over the batch.
fn sinusoidal(b: usize, t: usize, d: usize) -> Tensor {
    let mut row = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            row[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![b * t, d], data).expect("positional shape")
}
