//! Training: loss, the Adam optimizer with decoupled weight decay, the
//! epoch loop, thresholded prediction, and binary checkpoints.
//!
//! One [`Model`] couples the encoder, the decoder, both vocabularies, and
//! the sequence length, so a checkpoint is self-contained: reloading one
//! reproduces bit-identical eval-mode predictions.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, Dataset, LabelVocab};
use crate::decoder::{Decoder, DecoderConfig, DecoderError, DecoderOutput};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::metrics::{confusion, prf, Averaging, PredictionSet};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::{backward, read_tensor, write_tensor, Binder, Tape, Tensor, TensorError};
use crate::tokenizer::{encode, EncodedSample, TokenVocab};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split and validation split must be non-empty")]
    EmptySplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },
    #[error("optimizer state holds {state} parameters, step got {given}")]
    StateMismatch { state: usize, given: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match this build: {0}")]
    Import(String),
}

/// Fixed training settings (the tuner fills the searched ones in).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_batch_size: usize,
    pub val_batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay applied outside the Adam moments (the decoupled update); set
    /// false for classic L2-coupled Adam.
    pub decoupled_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            train_batch_size: 8,
            val_batch_size: 4,
            seed: 0,
            threshold: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_weight_decay: true,
        }
    }
}

/// One line per completed epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch index (0-based) with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("epoch record json"));
            out.push('\n');
        }
        out
    }
}

// ---- model ---------------------------------------------------------------

/// Encoder + decoder + vocabularies: everything needed to map raw code to
/// label probabilities.
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub token_vocab: TokenVocab,
    pub label_vocab: LabelVocab,
    pub max_seq_len: usize,
}

impl Model {
    /// Fresh model with seed-derived initialization.
    pub fn new(
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        token_vocab: TokenVocab,
        label_vocab: LabelVocab,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, "model/init");
        let mut encoder_config = encoder_config;
        encoder_config.vocab_size = token_vocab.size();
        let input_dim = encoder_config.embed_dim;
        let encoder = Encoder::new(encoder_config, &mut rng);
        let decoder = Decoder::new(decoder_config, input_dim, &mut rng);
        Model {
            encoder,
            decoder,
            token_vocab,
            label_vocab,
            max_seq_len,
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_mut(&mut |_, _| n += 1);
        n
    }

    /// Encodes every sample once; training batches slice into this.
    pub fn encode_dataset(&self, dataset: &Dataset) -> Vec<EncodedSample> {
        dataset
            .samples()
            .iter()
            .map(|s| encode(&s.code, &self.token_vocab, self.max_seq_len))
            .collect()
    }

    /// Forward pass for the given sample indices. Rows are trimmed to the
    /// longest unmasked prefix in the batch; trailing PAD never changes
    /// outputs, so this is purely a speedup.
    pub fn forward_batch<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        encoded: &[EncodedSample],
        indices: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(Binder<'t>, DecoderOutput), TrainError> {
        let t_max = indices
            .iter()
            .map(|&i| encoded[i].mask_len())
            .max()
            .expect("non-empty batch");
        let ids: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| encoded[i].input_ids[..t_max].to_vec())
            .collect();
        let mask: Vec<Vec<u8>> = indices
            .iter()
            .map(|&i| encoded[i].attention_mask[..t_max].to_vec())
            .collect();
        let mut binder = Binder::new(tape);
        let bound_encoder = self.encoder.bind(&mut binder);
        let bound_decoder = self.decoder.bind(&mut binder);
        let hidden = bound_encoder.forward(&ids, &mask)?;
        let output = bound_decoder.forward(&hidden, &mask, training, rng)?;
        Ok((binder, output))
    }
}

/// Batch target matrix for the given sample indices.
fn targets_for(dataset: &Dataset, indices: &[usize]) -> Tensor {
    let l = dataset.vocab().len();
    let mut data = Vec::with_capacity(indices.len() * l);
    for &i in indices {
        data.extend(dataset.samples()[i].labels.iter().map(|&b| f64::from(b)));
    }
    Tensor::new(vec![indices.len(), l], data).expect("targets shape")
}

// ---- optimizer -------------------------------------------------------

/// Adam with decoupled weight decay:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
/// With `decoupled_weight_decay` off, decay instead joins the gradient
/// before the moment updates (classic L2 regularization).
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    decoupled: bool,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            decoupled: cfg.decoupled_weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update. `params`, `grads`, and `frozen` are aligned;
    /// frozen parameters are skipped entirely.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
        frozen: &[bool],
    ) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || grads.len() != params.len() {
            return Err(TrainError::StateMismatch {
                state: self.m.len(),
                given: params.len(),
            });
        }
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (name, param)) in params.iter_mut().enumerate() {
            if frozen[idx] {
                continue;
            }
            if !grads[idx].all_finite() {
                return Err(TrainError::NonFiniteGrad { param: name.clone() });
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = param.data_mut();
            for i in 0..w.len() {
                let g = if self.decoupled {
                    grads[idx].data()[i]
                } else {
                    grads[idx].data()[i] + self.weight_decay * w[i]
                };
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = if self.decoupled {
                    m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[i]
                } else {
                    m_hat / (v_hat.sqrt() + self.eps)
                };
                w[i] -= self.lr * update;
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

// ---- training loop ---------------------------------------------------

/// Trains in place for the configured epochs and reports the per-epoch
/// history. The model keeps its final-epoch weights; the history names the
/// best-validation-loss epoch.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let train_encoded = model.encode_dataset(train_set);
    let val_encoded = model.encode_dataset(val_set);
    let frozen = frozen_flags(model);
    let mut optimizer = Adam::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let shuffle = derive_seed(cfg.seed, &format!("trainer/shuffle/{epoch}"));
        let batches = make_batches(train_set.len(), cfg.train_batch_size, Some(shuffle));
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut dropout_rng =
                stream_rng(cfg.seed, &format!("trainer/dropout/{epoch}/{bi}"));
            let tape = Tape::new();
            let (binder, output) =
                model.forward_batch(&tape, &train_encoded, batch, true, &mut dropout_rng)?;
            let targets = targets_for(train_set, batch);
            let loss = output.logits.bce_with_logits(&targets)?;
            let loss_value = loss.scalar_value();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss_value * batch.len() as f64;
            backward(&loss)?;
            let grads = binder.gradients();
            apply_step(model, &mut optimizer, &grads, &frozen)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_weighted_f1) =
            validate(model, val_set, &val_encoded, cfg.val_batch_size, cfg.threshold)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_weighted_f1,
        });
    }
    let best_epoch = history
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.val_loss.partial_cmp(&b.val_loss).expect("finite losses"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
    })
}

fn frozen_flags(model: &mut Model) -> Vec<bool> {
    let encoder_frozen = model.encoder.is_frozen();
    let mut flags = Vec::new();
    model.visit_mut(&mut |name, _| {
        flags.push(encoder_frozen && name.starts_with("encoder/"));
    });
    flags
}

fn apply_step(
    model: &mut Model,
    optimizer: &mut Adam,
    grads: &[Tensor],
    frozen: &[bool],
) -> Result<(), TrainError> {
    let mut refs: Vec<(String, *mut Tensor)> = Vec::with_capacity(grads.len());
    model.visit_mut(&mut |name, t| refs.push((name, t as *mut Tensor)));
    // visit_mut yields each parameter exactly once, so the raw pointers are
    // distinct and live for this call.
    let mut params: Vec<(String, &mut Tensor)> = refs
        .into_iter()
        .map(|(name, ptr)| (name, unsafe { &mut *ptr }))
        .collect();
    optimizer.step(&mut params, grads, frozen)
}

/// Mean validation loss and weighted F1 at the given threshold.
fn validate(
    model: &Model,
    val_set: &Dataset,
    val_encoded: &[EncodedSample],
    batch_size: usize,
    threshold: f64,
) -> Result<(f64, f64), TrainError> {
    let mut rng = stream_rng(0, "trainer/eval");
    let mut loss_sum = 0.0;
    let mut y_pred: Vec<Vec<u8>> = Vec::with_capacity(val_set.len());
    for batch in make_batches(val_set.len(), batch_size, None) {
        let tape = Tape::new();
        let (_, output) = model.forward_batch(&tape, val_encoded, &batch, false, &mut rng)?;
        let targets = targets_for(val_set, &batch);
        let loss = output.logits.bce_with_logits(&targets)?;
        loss_sum += loss.scalar_value() * batch.len() as f64;
        let l = val_set.vocab().len();
        for (row, _) in batch.iter().enumerate() {
            y_pred.push(
                (0..l)
                    .map(|j| u8::from(output.probabilities.at(&[row, j]) >= threshold))
                    .collect(),
            );
        }
    }
    let y_true: Vec<Vec<u8>> = val_set.samples().iter().map(|s| s.labels.clone()).collect();
    let scores: Vec<Vec<f64>> = y_pred.iter().map(|r| r.iter().map(|&b| b as f64).collect()).collect();
    let ps = PredictionSet::new(y_true, y_pred, scores).expect("validation shapes");
    let (_, _, f1) = prf(&confusion(&ps), Averaging::Weighted);
    Ok((loss_sum / val_set.len() as f64, f1))
}

/// Eval-mode probabilities (clamped to `[1e-12, 1 - 1e-12]` for reporting)
/// and thresholded binary predictions, `probability >= tau`.
pub fn predict(
    model: &Model,
    dataset: &Dataset,
    tau: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<u8>>), TrainError> {
    let encoded = model.encode_dataset(dataset);
    let l = model.label_vocab.len();
    let mut rng = stream_rng(0, "trainer/eval");
    let mut probabilities = Vec::with_capacity(dataset.len());
    let mut binary = Vec::with_capacity(dataset.len());
    for batch in make_batches(dataset.len(), 4, None) {
        let tape = Tape::new();
        let (_, output) = model.forward_batch(&tape, &encoded, &batch, false, &mut rng)?;
        for (row, _) in batch.iter().enumerate() {
            let probs: Vec<f64> = (0..l)
                .map(|j| output.probabilities.at(&[row, j]).clamp(1e-12, 1.0 - 1e-12))
                .collect();
            binary.push(probs.iter().map(|&p| u8::from(p >= tau)).collect());
            probabilities.push(probs);
        }
    }
    Ok((probabilities, binary))
}

// ---- checkpoint --------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"MLECCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    decoder_input_dim: usize,
    train_config: TrainConfig,
    label_vocab: Vec<String>,
    max_seq_len: usize,
    token_vocab: String,
    rng_digest: String,
}

/// Writes model + configs as one binary file with a trailing CRC-32.
pub fn save_checkpoint(path: &Path, model: &mut Model, cfg: &TrainConfig) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let vocab_tmp = path.with_extension("vocab.tmp");
    model.token_vocab.save(&vocab_tmp).map_err(|e| TrainError::Corrupt(e.to_string()))?;
    let token_vocab = fs::read_to_string(&vocab_tmp).map_err(io_err)?;
    fs::remove_file(&vocab_tmp).map_err(io_err)?;

    let meta = CheckpointMeta {
        format_version: CKPT_VERSION,
        encoder_config: model.encoder.config().clone(),
        decoder_config: model.decoder.config().clone(),
        decoder_input_dim: model.decoder.input_dim(),
        train_config: cfg.clone(),
        label_vocab: model.label_vocab.names().to_vec(),
        max_seq_len: model.max_seq_len,
        token_vocab,
        rng_digest: format!("{:016x}", derive_seed(cfg.seed, "trainer/rng-digest")),
    };
    let meta_json = serde_json::to_vec(&meta).expect("checkpoint meta json");

    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(CKPT_MAGIC);
    body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    body.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&meta_json);

    let params = {
        let mut out = Vec::new();
        model.visit_mut(&mut |name, t| out.push((name, t.clone())));
        out
    };
    body.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in &params {
        body.extend_from_slice(&(name.len() as u64).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        write_tensor(&mut body, tensor)?;
    }
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&body).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

/// Loads a checkpoint, rebuilding the model it was saved from.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig), TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = fs::read(path).map_err(io_err)?;
    if bytes.len() < CKPT_MAGIC.len() + 8 {
        return Err(TrainError::Corrupt("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32(body) != stored {
        return Err(TrainError::Corrupt("checksum mismatch".into()));
    }
    let mut cursor = std::io::Cursor::new(body);
    use std::io::Read as _;
    let mut magic = [0u8; 8];
    cursor.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    cursor.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let mut u64buf = [0u8; 8];
    cursor.read_exact(&mut u64buf).map_err(io_err)?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    cursor.read_exact(&mut meta_json).map_err(io_err)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| TrainError::Corrupt(format!("meta: {e}")))?;

    cursor.read_exact(&mut u64buf).map_err(io_err)?;
    let param_count = u64::from_le_bytes(u64buf) as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        cursor.read_exact(&mut u64buf).map_err(io_err)?;
        let name_len = u64::from_le_bytes(u64buf) as usize;
        let mut name = vec![0u8; name_len];
        cursor.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let tensor = read_tensor(&mut cursor)?;
        params.push((name, tensor));
    }

    let vocab_tmp = path.with_extension("vocab.tmp");
    fs::write(&vocab_tmp, &meta.token_vocab).map_err(io_err)?;
    let token_vocab = TokenVocab::load(&vocab_tmp)
        .map_err(|e| TrainError::Corrupt(format!("token vocab: {e}")))?;
    fs::remove_file(&vocab_tmp).map_err(io_err)?;

    let label_vocab = LabelVocab::new(meta.label_vocab)
        .map_err(|e| TrainError::Corrupt(format!("label vocab: {e}")))?;
    let mut rng = stream_rng(0, "checkpoint/rebuild");
    let encoder = Encoder::new(meta.encoder_config, &mut rng);
    let decoder = Decoder::new(meta.decoder_config, meta.decoder_input_dim, &mut rng);
    let mut model = Model {
        encoder,
        decoder,
        token_vocab,
        label_vocab,
        max_seq_len: meta.max_seq_len,
    };
    let split_at = params
        .iter()
        .position(|(name, _)| name.starts_with("decoder/"))
        .unwrap_or(params.len());
    model
        .encoder
        .import_params(&params[..split_at])
        .map_err(TrainError::Import)?;
    model
        .decoder
        .import_params(&params[split_at..])
        .map_err(TrainError::Import)?;
    Ok((model, meta.train_config))
}

/// CRC-32 (IEEE), table-free bitwise form.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xffff_ffff;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}
