//! Multi-label classification of program-code errors with a hybrid
//! encoder/recurrent-decoder pipeline.
//!
//! The pieces, in pipeline order:
//!
//! - [`dataset`] — record ingestion, code cleaning, label encoding,
//!   multi-label stratified splitting, synthetic corpus generation.
//! - [`tokenizer`] — rule-based code tokenizer, vocabulary building, and
//!   fixed-length encoding with attention masks.
//! - [`tensor`] — dense f64 arrays with tape-based reverse-mode gradients.
//! - [`encoder`] — a small trainable transformer producing per-token
//!   contextual embeddings behind a pluggable contract.
//! - [`decoder`] — GRU / LSTM / BiLSTM / attention-pooled BiLSTM heads
//!   mapping embeddings to per-label probabilities.
//! - [`trainer`] — BCE-with-logits loss, Adam with decoupled weight decay,
//!   the training loop, thresholded prediction, and checkpointing.
//! - [`tuner`] — random + Tree-structured Parzen Estimator search over the
//!   hyperparameter space.
//! - [`metrics`] — the multi-label evaluation suite (accuracy, exact match,
//!   one-error, P/R/F1, Hamming, Jaccard, ROC-AUC).
//! - [`cli`] — the batch command surface: prepare, tune, train, evaluate,
//!   report.
//!
//! See the crate `examples/` directory for one runnable walkthrough per
//! capability, and `mlec --help` for the batch CLI.

pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod tuner;
