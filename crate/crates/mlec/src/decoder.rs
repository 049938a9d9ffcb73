//! Recurrent classification heads over encoder states.
//!
//! Four kinds: GRU, LSTM, BiLSTM, and BiLSTM-A (BiLSTM pooled by additive
//! attention). The recurrence walks unmasked steps only - state freezes at
//! the first PAD step of each row, so PAD-extending a sample never changes
//! its logits. The summary vector is the final hidden state (concatenated
//! directions when bidirectional), or the attention context for BiLSTM-A;
//! it passes through dropout and a dense sigmoid layer to L labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Binder, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("mask does not match hidden states: {hidden:?} vs {rows} rows of {cols}")]
    MaskShape {
        hidden: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Gru,
    Lstm,
    BiLstm,
    BiLstmAttn,
}

impl DecoderKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "gru" => Some(DecoderKind::Gru),
            "lstm" => Some(DecoderKind::Lstm),
            "bilstm" => Some(DecoderKind::BiLstm),
            "bilstm-a" | "bilstm_attn" => Some(DecoderKind::BiLstmAttn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Gru => "gru",
            DecoderKind::Lstm => "lstm",
            DecoderKind::BiLstm => "bilstm",
            DecoderKind::BiLstmAttn => "bilstm-a",
        }
    }

    /// Whether the `bidirectional` flag applies; BiLSTM variants are
    /// inherently bidirectional and ignore it.
    pub fn uses_bidirectional_flag(&self) -> bool {
        matches!(self, DecoderKind::Gru | DecoderKind::Lstm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
    pub dropout_p: f64,
    /// Dropout on the encoder states before the recurrence; off by default.
    #[serde(default)]
    pub input_dropout_p: f64,
    pub label_count: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::Gru,
            hidden_size: 128,
            num_layers: 1,
            bidirectional: false,
            dropout_p: 0.1,
            input_dropout_p: 0.0,
            label_count: 11,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=2).contains(&self.num_layers) {
            return Err(format!("num_layers must be 1 or 2, got {}", self.num_layers));
        }
        if self.hidden_size == 0 || self.label_count == 0 {
            return Err("hidden_size and label_count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(0.0..1.0).contains(&self.input_dropout_p) {
            return Err("dropout probabilities must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Number of recurrence directions after resolving the kind.
    pub fn directions(&self) -> usize {
        match self.kind {
            DecoderKind::Gru | DecoderKind::Lstm => {
                if self.bidirectional {
                    2
                } else {
                    1
                }
            }
            DecoderKind::BiLstm | DecoderKind::BiLstmAttn => 2,
        }
    }

    /// Width of per-step states and of the summary vector.
    pub fn output_width(&self) -> usize {
        self.hidden_size * self.directions()
    }

    fn is_lstm_cell(&self) -> bool {
        !matches!(self.kind, DecoderKind::Gru)
    }
}

struct GateParams {
    w: Tensor,
    u: Tensor,
    b: Tensor,
}

impl GateParams {
    fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GateParams {
            w: Tensor::uniform(&[input, hidden], bound, rng),
            u: Tensor::uniform(&[hidden, hidden], bound, rng),
            b: Tensor::zeros(&[hidden]),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}/w"), &mut self.w);
        f(format!("{prefix}/u"), &mut self.u);
        f(format!("{prefix}/b"), &mut self.b);
    }
}

enum CellParams {
    Gru {
        update: GateParams,
        reset: GateParams,
        candidate: GateParams,
    },
    Lstm {
        input: GateParams,
        forget: GateParams,
        cell: GateParams,
        output: GateParams,
    },
}

impl CellParams {
    fn new<R: Rng>(lstm: bool, input: usize, hidden: usize, rng: &mut R) -> Self {
        if lstm {
            CellParams::Lstm {
                input: GateParams::new(input, hidden, rng),
                forget: GateParams::new(input, hidden, rng),
                cell: GateParams::new(input, hidden, rng),
                output: GateParams::new(input, hidden, rng),
            }
        } else {
            CellParams::Gru {
                update: GateParams::new(input, hidden, rng),
                reset: GateParams::new(input, hidden, rng),
                candidate: GateParams::new(input, hidden, rng),
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        match self {
            CellParams::Gru {
                update,
                reset,
                candidate,
            } => {
                update.visit_mut(&format!("{prefix}/update"), f);
                reset.visit_mut(&format!("{prefix}/reset"), f);
                candidate.visit_mut(&format!("{prefix}/candidate"), f);
            }
            CellParams::Lstm {
                input,
                forget,
                cell,
                output,
            } => {
                input.visit_mut(&format!("{prefix}/input"), f);
                forget.visit_mut(&format!("{prefix}/forget"), f);
                cell.visit_mut(&format!("{prefix}/cell"), f);
                output.visit_mut(&format!("{prefix}/output"), f);
            }
        }
    }
}

struct AttentionParams {
    w: Tensor,
    b: Tensor,
    v: Tensor,
}

/// The trainable decoder: stacked recurrent layers, optional attention
/// pooling, and the dense sigmoid head.
pub struct Decoder {
    config: DecoderConfig,
    input_dim: usize,
    /// `layers[l]` holds the forward cell and, when bidirectional, the
    /// backward cell.
    layers: Vec<(CellParams, Option<CellParams>)>,
    attention: Option<AttentionParams>,
    head_w: Tensor,
    head_b: Tensor,
}

impl Decoder {
    pub fn new<R: Rng>(config: DecoderConfig, input_dim: usize, rng: &mut R) -> Self {
        config.validate().expect("invalid decoder config");
        let dirs = config.directions();
        let lstm = config.is_lstm_cell();
        let dh = config.hidden_size;
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let input = if l == 0 { input_dim } else { dh * dirs };
            let fwd = CellParams::new(lstm, input, dh, rng);
            let bwd = (dirs == 2).then(|| CellParams::new(lstm, input, dh, rng));
            layers.push((fwd, bwd));
        }
        let width = config.output_width();
        let attention = matches!(config.kind, DecoderKind::BiLstmAttn).then(|| {
            let bound = 1.0 / (width as f64).sqrt();
            AttentionParams {
                w: Tensor::uniform(&[width, width], bound, rng),
                b: Tensor::zeros(&[width]),
                v: Tensor::uniform(&[width, 1], bound, rng),
            }
        });
        let bound = 1.0 / (width as f64).sqrt();
        Decoder {
            head_w: Tensor::uniform(&[width, config.label_count], bound, rng),
            head_b: Tensor::zeros(&[config.label_count]),
            config,
            input_dim,
            layers,
            attention,
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (l, (fwd, bwd)) in self.layers.iter_mut().enumerate() {
            fwd.visit_mut(&format!("decoder/layer{l}/fwd"), f);
            if let Some(bwd) = bwd {
                bwd.visit_mut(&format!("decoder/layer{l}/bwd"), f);
            }
        }
        if let Some(attn) = &mut self.attention {
            f("decoder/attention/w".into(), &mut attn.w);
            f("decoder/attention/b".into(), &mut attn.b);
            f("decoder/attention/v".into(), &mut attn.v);
        }
        f("decoder/head/w".into(), &mut self.head_w);
        f("decoder/head/b".into(), &mut self.head_b);
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> BoundDecoder {
        let bind_gate = |binder: &mut Binder<'_>, prefix: &str, g: &GateParams| BoundGate {
            w: binder.bind(format!("{prefix}/w"), &g.w),
            u: binder.bind(format!("{prefix}/u"), &g.u),
            b: binder.bind(format!("{prefix}/b"), &g.b),
        };
        let bind_cell = |binder: &mut Binder<'_>, prefix: &str, c: &CellParams| match c {
            CellParams::Gru {
                update,
                reset,
                candidate,
            } => BoundCell::Gru {
                update: bind_gate(binder, &format!("{prefix}/update"), update),
                reset: bind_gate(binder, &format!("{prefix}/reset"), reset),
                candidate: bind_gate(binder, &format!("{prefix}/candidate"), candidate),
            },
            CellParams::Lstm {
                input,
                forget,
                cell,
                output,
            } => BoundCell::Lstm {
                input: bind_gate(binder, &format!("{prefix}/input"), input),
                forget: bind_gate(binder, &format!("{prefix}/forget"), forget),
                cell: bind_gate(binder, &format!("{prefix}/cell"), cell),
                output: bind_gate(binder, &format!("{prefix}/output"), output),
            },
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, (fwd, bwd))| {
                (
                    bind_cell(binder, &format!("decoder/layer{l}/fwd"), fwd),
                    bwd.as_ref()
                        .map(|c| bind_cell(binder, &format!("decoder/layer{l}/bwd"), c)),
                )
            })
            .collect();
        let attention = self.attention.as_ref().map(|attn| BoundAttention {
            w: binder.bind("decoder/attention/w".into(), &attn.w),
            b: binder.bind("decoder/attention/b".into(), &attn.b),
            v: binder.bind("decoder/attention/v".into(), &attn.v),
        });
        BoundDecoder {
            config: self.config.clone(),
            layers,
            attention,
            head_w: binder.bind("decoder/head/w".into(), &self.head_w),
            head_b: binder.bind("decoder/head/b".into(), &self.head_b),
        }
    }

    pub fn export_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t.clone())));
        out
    }

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

pub struct BoundGate {
    w: Var,
    u: Var,
    b: Var,
}

impl BoundGate {
    /// `x W + h U + b`, the pre-activation shared by every gate.
    fn preact(&self, x: &Var, h: &Var) -> Result<Var, TensorError> {
        x.matmul(&self.w)?
            .add(&h.matmul(&self.u)?)?
            .add_bias(&self.b)
    }
}

pub enum BoundCell {
    Gru {
        update: BoundGate,
        reset: BoundGate,
        candidate: BoundGate,
    },
    Lstm {
        input: BoundGate,
        forget: BoundGate,
        cell: BoundGate,
        output: BoundGate,
    },
}

impl BoundCell {
    /// One gated recurrence step. For GRU the cell state passes through
    /// untouched.
    pub fn step(&self, x: &Var, h: &Var, c: &Var) -> Result<(Var, Var), TensorError> {
        match self {
            BoundCell::Gru {
                update,
                reset,
                candidate,
            } => {
                let z = update.preact(x, h)?.sigmoid();
                let r = reset.preact(x, h)?.sigmoid();
                let gated = r.mul(h)?;
                let n = candidate.preact(x, &gated)?.tanh();
                // h' = (1 - z) * n + z * h
                let keep_new = z.mul_scalar(-1.0).add_scalar(1.0).mul(&n)?;
                let h_next = keep_new.add(&z.mul(h)?)?;
                Ok((h_next, c.clone()))
            }
            BoundCell::Lstm {
                input,
                forget,
                cell,
                output,
            } => {
                let i = input.preact(x, h)?.sigmoid();
                let f = forget.preact(x, h)?.sigmoid();
                let g = cell.preact(x, h)?.tanh();
                let o = output.preact(x, h)?.sigmoid();
                let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
                let h_next = o.mul(&c_next.tanh())?;
                Ok((h_next, c_next))
            }
        }
    }
}

pub struct BoundAttention {
    w: Var,
    b: Var,
    v: Var,
}

/// Logits, probabilities, and (for BiLSTM-A) the attention weights for one
/// batch.
pub struct DecoderOutput {
    pub logits: Var,
    pub probabilities: Tensor,
    pub attention_weights: Option<Tensor>,
}

pub struct BoundDecoder {
    config: DecoderConfig,
    layers: Vec<(BoundCell, Option<BoundCell>)>,
    attention: Option<BoundAttention>,
    head_w: Var,
    head_b: Var,
}

impl BoundDecoder {
    /// Runs the stacked recurrence and returns per-step states
    /// `[B, T, width]` plus the summary `[B, width]`.
    pub fn run_sequence<R: Rng>(
        &self,
        hidden: &Var,
        mask: &[Vec<u8>],
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var), DecoderError> {
        let shape = hidden.shape();
        let (b, t) = (shape[0], shape[1]);
        if mask.len() != b || mask.iter().any(|m| m.len() != t) {
            return Err(DecoderError::MaskShape {
                hidden: shape,
                rows: mask.len(),
                cols: mask.first().map_or(0, Vec::len),
            });
        }
        for (row, m) in mask.iter().enumerate() {
            if m.iter().all(|&bit| bit == 0) {
                return Err(DecoderError::FullyMaskedRow { row });
            }
        }
        let dh = self.config.hidden_size;

        let mut layer_input = if self.config.input_dropout_p > 0.0 {
            hidden.dropout(self.config.input_dropout_p, training, rng)?
        } else {
            hidden.clone()
        };
        let mut summary = None;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            let (fwd_states, fwd_final) = run_direction(fwd, &layer_input, mask, dh, false)?;
            let (states, final_state) = match bwd {
                None => (fwd_states, fwd_final),
                Some(bwd_cell) => {
                    let (bwd_states, bwd_final) =
                        run_direction(bwd_cell, &layer_input, mask, dh, true)?;
                    let per_step: Vec<Var> = fwd_states
                        .iter()
                        .zip(&bwd_states)
                        .map(|(f, bk)| {
                            Var::concat(&[f.clone(), bk.clone()], 1)?.reshape(vec![b, 1, 2 * dh])
                        })
                        .collect::<Result<_, _>>()?;
                    let stacked = Var::concat(&per_step, 1)?;
                    (
                        vec![stacked],
                        Var::concat(&[fwd_final, bwd_final], 1)?,
                    )
                }
            };
            // Unidirectional states arrive per step; stack them to [B,T,dh].
            let stacked = if states.len() == 1 && states[0].shape().len() == 3 {
                states.into_iter().next().unwrap()
            } else {
                let per_step: Vec<Var> = states
                    .iter()
                    .map(|s| s.reshape(vec![b, 1, dh]))
                    .collect::<Result<_, _>>()?;
                Var::concat(&per_step, 1)?
            };
            summary = Some(final_state);
            layer_input = if l + 1 < self.layers.len() && self.config.dropout_p > 0.0 {
                stacked.dropout(self.config.dropout_p, training, rng)?
            } else {
                stacked
            };
        }
        Ok((layer_input, summary.expect("at least one layer")))
    }

    /// Additive attention pooling: `e_t = v^T tanh(W h_t + b)`, masked
    /// softmax over steps, context = weighted sum of states.
    pub fn attention_pool(
        &self,
        states: &Var,
        mask: &[Vec<u8>],
    ) -> Result<(Var, Var), DecoderError> {
        let attn = self
            .attention
            .as_ref()
            .expect("attention_pool requires a BiLSTM-A decoder");
        attention_pool_with(attn, states, mask)
    }

    /// Dropout -> dense -> sigmoid over the summary vector.
    pub fn classify<R: Rng>(
        &self,
        summary: &Var,
        training: bool,
        rng: &mut R,
    ) -> Result<DecoderOutput, DecoderError> {
        let dropped = summary.dropout(self.config.dropout_p, training, rng)?;
        let logits = dropped.matmul(&self.head_w)?.add_bias(&self.head_b)?;
        let probabilities = logits.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(DecoderOutput {
            logits,
            probabilities,
            attention_weights: None,
        })
    }

    /// Full head: recurrence, pooling, classification.
    pub fn forward<R: Rng>(
        &self,
        hidden: &Var,
        mask: &[Vec<u8>],
        training: bool,
        rng: &mut R,
    ) -> Result<DecoderOutput, DecoderError> {
        let (states, final_summary) = self.run_sequence(hidden, mask, training, rng)?;
        let (summary, attention_weights) = match &self.attention {
            Some(attn) => {
                let (context, alpha) = attention_pool_with(attn, &states, mask)?;
                (context, Some(alpha.value()))
            }
            None => (final_summary, None),
        };
        let mut out = self.classify(&summary, training, rng)?;
        out.attention_weights = attention_weights;
        Ok(out)
    }
}

fn attention_pool_with(
    attn: &BoundAttention,
    states: &Var,
    mask: &[Vec<u8>],
) -> Result<(Var, Var), DecoderError> {
    let shape = states.shape();
    let (b, t, width) = (shape[0], shape[1], shape[2]);
    for (row, m) in mask.iter().enumerate() {
        if m.iter().all(|&bit| bit == 0) {
            return Err(DecoderError::FullyMaskedRow { row });
        }
    }
    let flat = states.reshape(vec![b * t, width])?;
    let scores = flat
        .matmul(&attn.w)?
        .add_bias(&attn.b)?
        .tanh()
        .matmul(&attn.v)?
        .reshape(vec![b, t])?;
    let mask_data: Vec<f64> = mask
        .iter()
        .flat_map(|m| m.iter().map(|&bit| f64::from(bit)))
        .collect();
    let mask_tensor = Tensor::new(vec![b, t], mask_data)?;
    let alpha = scores.softmax(1, Some(&mask_tensor))?;
    let context = alpha
        .reshape(vec![b, 1, t])?
        .bmm(states)?
        .reshape(vec![b, width])?;
    Ok((context, alpha))
}

/// Walks one direction over the sequence. State freezes outside each row's
/// unmasked prefix, so the returned final state is the state at the last
/// unmasked step (forward) or the first step (backward).
fn run_direction(
    cell: &BoundCell,
    inputs: &Var,
    mask: &[Vec<u8>],
    dh: usize,
    reverse: bool,
) -> Result<(Vec<Var>, Var), DecoderError> {
    let shape = inputs.shape();
    let (b, t) = (shape[0], shape[1]);
    let tape = inputs.tape_handle();
    let mut h = tape.input(Tensor::zeros(&[b, dh]));
    let mut c = tape.input(Tensor::zeros(&[b, dh]));
    let mut states: Vec<Option<Var>> = vec![None; t];
    let steps: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in steps {
        let x_t = inputs.time_slice(step)?;
        let (h_new, c_new) = cell.step(&x_t, &h, &c)?;
        let live: Vec<f64> = mask.iter().map(|m| f64::from(m[step])).collect();
        let frozen: Vec<f64> = live.iter().map(|&v| 1.0 - v).collect();
        h = h_new.scale_rows(&live)?.add(&h.scale_rows(&frozen)?)?;
        c = c_new.scale_rows(&live)?.add(&c.scale_rows(&frozen)?)?;
        states[step] = Some(h.clone());
    }
    let states = states.into_iter().map(|s| s.expect("every step visited")).collect();
    Ok((states, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::{gradient_check, Binder, Tape};

    fn config(kind: DecoderKind) -> DecoderConfig {
        DecoderConfig {
            kind,
            hidden_size: 5,
            num_layers: 1,
            bidirectional: false,
            dropout_p: 0.0,
            input_dropout_p: 0.0,
            label_count: 3,
        }
    }

    fn zeroed(decoder: &mut Decoder) {
        decoder.visit_mut(&mut |_, t| *t = Tensor::zeros(t.shape()));
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut rng = stream_rng(1, "dec");
        let mut dec = Decoder::new(config(DecoderKind::Gru), 4, &mut rng);
        zeroed(&mut dec);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let x = tape.input(Tensor::zeros(&[2, 4]));
        let h = tape.input(Tensor::full(&[2, 5], 0.8));
        let c = tape.input(Tensor::zeros(&[2, 5]));
        let (h2, _) = bound.layers[0].0.step(&x, &h, &c).unwrap();
        for &v in h2.value().data() {
            assert!((v - 0.4).abs() < 1e-12, "expected 0.5*h, got {v}");
        }
    }

    #[test]
    fn lstm_zero_params_zeroes_state() {
        let mut rng = stream_rng(2, "dec");
        let mut dec = Decoder::new(config(DecoderKind::Lstm), 4, &mut rng);
        zeroed(&mut dec);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let x = tape.input(Tensor::full(&[1, 4], 0.3));
        let h = tape.input(Tensor::full(&[1, 5], 0.9));
        let c = tape.input(Tensor::zeros(&[1, 5]));
        let (h2, c2) = bound.layers[0].0.step(&x, &h, &c).unwrap();
        for &v in c2.value().data() {
            assert_eq!(v, 0.0);
        }
        for &v in h2.value().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gru_update_gate_saturation_copies_state() {
        let mut rng = stream_rng(3, "dec");
        let mut dec = Decoder::new(config(DecoderKind::Gru), 4, &mut rng);
        zeroed(&mut dec);
        // Huge update-gate bias forces z ~ 1, so h' ~ h.
        dec.visit_mut(&mut |name, t| {
            if name == "decoder/layer0/fwd/update/b" {
                *t = Tensor::full(t.shape(), 60.0);
            }
        });
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let x = tape.input(Tensor::full(&[1, 4], -0.4));
        let h = tape.input(Tensor::full(&[1, 5], 0.37));
        let c = tape.input(Tensor::zeros(&[1, 5]));
        let (h2, _) = bound.layers[0].0.step(&x, &h, &c).unwrap();
        for &v in h2.value().data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn cell_step_gradients_match_finite_differences() {
        for kind in [DecoderKind::Gru, DecoderKind::Lstm] {
            let mut rng = stream_rng(4, "dec");
            let dec = Decoder::new(config(kind), 4, &mut rng);
            let x0 = Tensor::uniform(&[2, 4], 1.0, &mut rng);
            let h0 = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let c0 = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let w = Tensor::uniform(&[2, 5], 1.0, &mut rng);

            // d loss / d x
            let err = gradient_check(
                |tape, xv| {
                    let mut binder = Binder::new(tape);
                    let bound = dec.bind(&mut binder);
                    let h = tape.input(h0.clone());
                    let c = tape.input(c0.clone());
                    let (h2, _) = bound.layers[0].0.step(xv, &h, &c)?;
                    let wv = tape.input(w.clone());
                    h2.mul(&wv)?.sum(None)
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?} d/dx err {err}");

            // d loss / d h
            let err = gradient_check(
                |tape, hv| {
                    let mut binder = Binder::new(tape);
                    let bound = dec.bind(&mut binder);
                    let x = tape.input(x0.clone());
                    let c = tape.input(c0.clone());
                    let (h2, _) = bound.layers[0].0.step(&x, hv, &c)?;
                    let wv = tape.input(w.clone());
                    h2.mul(&wv)?.sum(None)
                },
                &h0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?} d/dh err {err}");
        }
    }

    #[test]
    fn cell_weights_gradients_match_finite_differences() {
        for kind in [DecoderKind::Gru, DecoderKind::Lstm] {
            let mut rng = stream_rng(5, "dec");
            let mut dec = Decoder::new(config(kind), 3, &mut rng);
            let x0 = Tensor::uniform(&[2, 3], 1.0, &mut rng);
            let h0 = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let c0 = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let w = Tensor::uniform(&[2, 5], 1.0, &mut rng);

            let mut names = Vec::new();
            dec.visit_mut(&mut |name, _| {
                if name.starts_with("decoder/layer0/fwd") {
                    names.push(name);
                }
            });
            for name in names {
                let mut original = None;
                dec.visit_mut(&mut |n, t| {
                    if n == name {
                        original = Some(t.clone());
                    }
                });
                let err = gradient_check(
                    |tape, pv| {
                        let mut binder = Binder::new(tape);
                        let mut bound = dec.bind(&mut binder);
                        swap_cell_param(&mut bound, &name, pv);
                        let x = tape.input(x0.clone());
                        let h = tape.input(h0.clone());
                        let c = tape.input(c0.clone());
                        let (h2, _) = bound.layers[0].0.step(&x, &h, &c)?;
                        let wv = tape.input(w.clone());
                        h2.mul(&wv)?.sum(None)
                    },
                    &original.unwrap(),
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{kind:?} {name}: err {err}");
            }
        }
    }

    fn swap_cell_param(bound: &mut BoundDecoder, name: &str, x: &Var) {
        let suffix = name.strip_prefix("decoder/layer0/fwd/").unwrap();
        let (gate_name, field) = suffix.split_once('/').unwrap();
        let gate = match &mut bound.layers[0].0 {
            BoundCell::Gru {
                update,
                reset,
                candidate,
            } => match gate_name {
                "update" => update,
                "reset" => reset,
                "candidate" => candidate,
                _ => panic!("unknown gate {gate_name}"),
            },
            BoundCell::Lstm {
                input,
                forget,
                cell,
                output,
            } => match gate_name {
                "input" => input,
                "forget" => forget,
                "cell" => cell,
                "output" => output,
                _ => panic!("unknown gate {gate_name}"),
            },
        };
        match field {
            "w" => gate.w = x.clone(),
            "u" => gate.u = x.clone(),
            "b" => gate.b = x.clone(),
            _ => panic!("unknown field {field}"),
        }
    }

    fn forward_logits(dec: &Decoder, hidden: &Tensor, mask: &[Vec<u8>]) -> Tensor {
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let hv = tape.input(hidden.clone());
        let mut rng = stream_rng(0, "unused");
        let out = bound.forward(&hv, mask, false, &mut rng).unwrap();
        out.logits.value()
    }

    #[test]
    fn padding_invariance_for_every_kind() {
        for kind in [
            DecoderKind::Gru,
            DecoderKind::Lstm,
            DecoderKind::BiLstm,
            DecoderKind::BiLstmAttn,
        ] {
            let mut rng = stream_rng(6, "dec");
            let mut cfg = config(kind);
            cfg.num_layers = 2;
            cfg.dropout_p = 0.2; // eval mode must ignore it
            let dec = Decoder::new(cfg, 4, &mut rng);

            let base = Tensor::uniform(&[1, 3, 4], 1.0, &mut rng);
            let mut extended_data = base.data().to_vec();
            extended_data.extend(Tensor::uniform(&[1, 2, 4], 1.0, &mut rng).data());
            let extended = Tensor::new(vec![1, 5, 4], extended_data).unwrap();

            let a = forward_logits(&dec, &base, &[vec![1, 1, 1]]);
            let b = forward_logits(&dec, &extended, &[vec![1, 1, 1, 0, 0]]);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{kind:?} logits changed");
            }
        }
    }

    #[test]
    fn t1_summary_equals_cell_step() {
        let mut rng = stream_rng(7, "dec");
        let dec = Decoder::new(config(DecoderKind::Gru), 4, &mut rng);
        let hidden = Tensor::uniform(&[2, 1, 4], 1.0, &mut rng);

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let hv = tape.input(hidden.clone());
        let mut r = stream_rng(0, "unused");
        let (_, summary) = bound.run_sequence(&hv, &[vec![1], vec![1]], false, &mut r).unwrap();

        let x = tape.input(hidden.reshaped(vec![2, 4]).unwrap());
        let h0 = tape.input(Tensor::zeros(&[2, 5]));
        let c0 = tape.input(Tensor::zeros(&[2, 5]));
        let (h1, _) = bound.layers[0].0.step(&x, &h0, &c0).unwrap();
        assert_eq!(summary.value().data(), h1.value().data());
    }

    #[test]
    fn bidirectional_width_is_twice_hidden() {
        let mut rng = stream_rng(8, "dec");
        let mut cfg = config(DecoderKind::BiLstm);
        cfg.hidden_size = 6;
        assert_eq!(cfg.output_width(), 12);
        let dec = Decoder::new(cfg, 4, &mut rng);
        let hidden = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let hv = tape.input(hidden);
        let mut r = stream_rng(0, "unused");
        let mask = vec![vec![1u8; 4]; 3];
        let (states, summary) = bound.run_sequence(&hv, &mask, false, &mut r).unwrap();
        assert_eq!(states.shape(), vec![3, 4, 12]);
        assert_eq!(summary.shape(), vec![3, 12]);
    }

    #[test]
    fn attention_uniform_when_scores_equal() {
        let mut rng = stream_rng(9, "dec");
        let mut cfg = config(DecoderKind::BiLstmAttn);
        cfg.hidden_size = 3;
        let mut dec = Decoder::new(cfg, 4, &mut rng);
        // Zero attention parameters give equal scores at every step.
        dec.visit_mut(&mut |name, t| {
            if name.starts_with("decoder/attention") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let states = Tensor::uniform(&[1, 4, 6], 1.0, &mut rng);
        let sv = tape.input(states.clone());
        let mask = vec![vec![1u8, 1, 1, 0]];
        let (context, alpha) = bound.attention_pool(&sv, &mask).unwrap();
        let a = alpha.value();
        assert!((a.at(&[0, 0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.at(&[0, 3]), 0.0);
        // context = mean of the three unmasked states
        for j in 0..6 {
            let mean = (states.at(&[0, 0, j]) + states.at(&[0, 1, j]) + states.at(&[0, 2, j])) / 3.0;
            assert!((context.value().at(&[0, j]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_step_takes_that_state() {
        let mut rng = stream_rng(10, "dec");
        let cfg = config(DecoderKind::BiLstmAttn);
        let dec = Decoder::new(cfg, 4, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let states = Tensor::uniform(&[1, 3, 10], 1.0, &mut rng);
        let sv = tape.input(states.clone());
        let (context, alpha) = bound.attention_pool(&sv, &[vec![1, 0, 0]]).unwrap();
        assert_eq!(alpha.value().data()[0], 1.0);
        assert_eq!(alpha.value().data()[1], 0.0);
        for j in 0..10 {
            assert_eq!(context.value().at(&[0, j]), states.at(&[0, 0, j]));
        }
    }

    #[test]
    fn attention_pool_gradients_match_finite_differences() {
        let mut rng = stream_rng(11, "dec");
        let cfg = config(DecoderKind::BiLstmAttn);
        let dec = Decoder::new(cfg, 4, &mut rng);
        let states0 = Tensor::uniform(&[2, 3, 10], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 10], 1.0, &mut rng);
        let mask = vec![vec![1u8, 1, 1], vec![1, 1, 0]];
        let err = gradient_check(
            |tape, sv| {
                let mut binder = Binder::new(tape);
                let bound = dec.bind(&mut binder);
                let (context, _) = bound.attention_pool(sv, &mask).map_err(|e| match e {
                    DecoderError::Tensor(t) => t,
                    other => panic!("{other:?}"),
                })?;
                let wv = tape.input(w.clone());
                context.mul(&wv)?.sum(None)
            },
            &states0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "attention err {err}");
    }

    #[test]
    fn attention_rejects_fully_masked_row() {
        let mut rng = stream_rng(12, "dec");
        let dec = Decoder::new(config(DecoderKind::BiLstmAttn), 4, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let sv = tape.input(Tensor::zeros(&[1, 3, 10]));
        let err = bound.attention_pool(&sv, &[vec![0, 0, 0]]).unwrap_err();
        assert!(matches!(err, DecoderError::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn classify_zero_head_gives_half_probabilities() {
        let mut rng = stream_rng(13, "dec");
        let mut dec = Decoder::new(config(DecoderKind::Gru), 4, &mut rng);
        dec.visit_mut(&mut |name, t| {
            if name.starts_with("decoder/head") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let summary = tape.input(Tensor::uniform(&[2, 5], 1.0, &mut rng));
        let mut r = stream_rng(0, "unused");
        let out = bound.classify(&summary, false, &mut r).unwrap();
        for &p in out.probabilities.data() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn classify_saturates_with_large_bias() {
        let mut rng = stream_rng(14, "dec");
        let mut dec = Decoder::new(config(DecoderKind::Gru), 4, &mut rng);
        dec.visit_mut(&mut |name, t| {
            if name == "decoder/head/w" {
                *t = Tensor::zeros(t.shape());
            }
            if name == "decoder/head/b" {
                *t = Tensor::full(t.shape(), 100.0);
            }
        });
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = dec.bind(&mut binder);
        let summary = tape.input(Tensor::uniform(&[1, 5], 1.0, &mut rng));
        let mut r = stream_rng(0, "unused");
        let out = bound.classify(&summary, false, &mut r).unwrap();
        for &p in out.probabilities.data() {
            assert!(p >= 1.0 - 1e-40);
        }
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let mut rng = stream_rng(15, "dec");
        let mut cfg = config(DecoderKind::Gru);
        cfg.dropout_p = 0.5;
        let dec = Decoder::new(cfg, 4, &mut rng);
        let summary0 = Tensor::uniform(&[2, 5], 1.0, &mut rng);
        let run = |seed: u64| {
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let bound = dec.bind(&mut binder);
            let summary = tape.input(summary0.clone());
            let mut r = stream_rng(seed, "dropout");
            bound.classify(&summary, false, &mut r).unwrap().probabilities
        };
        assert_eq!(run(1).data(), run(2).data());
    }

    #[test]
    fn logits_shape_is_batch_by_labels_for_every_kind() {
        for kind in [
            DecoderKind::Gru,
            DecoderKind::Lstm,
            DecoderKind::BiLstm,
            DecoderKind::BiLstmAttn,
        ] {
            for (layers, bidir) in [(1, false), (2, true)] {
                let mut rng = stream_rng(16, "dec");
                let mut cfg = config(kind);
                cfg.num_layers = layers;
                cfg.bidirectional = bidir;
                let dec = Decoder::new(cfg, 4, &mut rng);
                let tape = Tape::new();
                let mut binder = Binder::new(&tape);
                let bound = dec.bind(&mut binder);
                let hv = tape.input(Tensor::uniform(&[3, 4, 4], 1.0, &mut rng));
                let mask = vec![vec![1u8, 1, 1, 1], vec![1, 1, 0, 0], vec![1, 0, 0, 0]];
                let mut r = stream_rng(0, "unused");
                let out = bound.forward(&hv, &mask, false, &mut r).unwrap();
                assert_eq!(out.logits.shape(), vec![3, 3], "{kind:?}");
            }
        }
    }
}
