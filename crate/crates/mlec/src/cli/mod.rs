//! Batch command surface: `prepare`, `tune`, `train`, `evaluate`,
//! `report`. Every command reads plain files, writes plain files under the
//! output directory, and is deterministic for a fixed seed.

mod config;

pub use config::{DataConfig, RunConfig, TuneSettings};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    clean_code, drop_invalid, generate_synthetic_with, load_dataset, save_records,
    stratified_split, Dataset, DatasetError, LabelVocab, LabeledSample, SplitConfig,
    SplitManifest, SyntheticConfig,
};
use crate::decoder::DecoderKind;
use crate::metrics::{full_report, MetricsReport, PredictionSet};
use crate::rng::derive_seed;
use crate::tokenizer::{build_vocab, TokenVocab};
use crate::trainer::{load_checkpoint, predict, save_checkpoint, train, Model, TrainConfig};
use crate::tuner::{
    append_log, apply_canonical, load_log, Objective, ParamValue, SearchSpace, Study,
    StudyConfig, Trial, TrialResult,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Tune(#[from] crate::tuner::TuneError),
    #[error("metrics: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{0}")]
    Usage(String),
    #[error("reports disagree on label vocabulary: {left} vs {right}")]
    VocabMismatch { left: String, right: String },
}

#[derive(Parser)]
#[command(name = "mlec", about = "Multi-label code error classification pipeline", version)]
struct Cli {
    /// Nested TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory overriding the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set train.epochs=5.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, label-encode, split, and tokenize a corpus.
    Prepare {
        /// Record file to ingest (line-delimited JSON).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Generate a synthetic corpus of this many samples instead.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Run a hyperparameter study for one decoder kind.
    Tune {
        /// Decoder kind: gru | lstm | bilstm | bilstm-a.
        #[arg(long)]
        kind: String,
        /// Number of trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Selection objective: val-loss | weighted-f1.
        #[arg(long)]
        objective: Option<String>,
        /// Narrow the learning-rate range to [1e-5, 5e-5].
        #[arg(long)]
        lr_narrow: bool,
    },
    /// Train a model, writing a checkpoint and a per-epoch history.
    Train {
        /// Decoder kind: gru | lstm | bilstm | bilstm-a.
        #[arg(long)]
        kind: String,
        /// Best-params file from `tune`; explicit config otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Epoch count override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a record file and write a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Decision threshold tau.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also render the report as a table on stdout.
        #[arg(long)]
        table: bool,
        /// Report file name (defaults to report.json in the out dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metric reports into one comparison table.
    Report {
        /// Report files produced by `evaluate`.
        files: Vec<PathBuf>,
        /// Column to sort rows by.
        #[arg(long, default_value = "F1_weighted")]
        sort_by: String,
        /// Write the rendered table here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    match cli.command {
        Command::Prepare { input, synthetic } => {
            if let Some(p) = input {
                cfg.data.input = Some(p.display().to_string());
            }
            if let Some(n) = synthetic {
                cfg.data.synthetic = Some(n);
            }
            cmd_prepare(&cfg)
        }
        Command::Tune {
            kind,
            trials,
            objective,
            lr_narrow,
        } => {
            let kind = parse_kind(&kind)?;
            if let Some(t) = trials {
                cfg.tune.trials = t;
            }
            if let Some(o) = objective {
                cfg.tune.objective = match o.as_str() {
                    "val-loss" => Objective::MinValLoss,
                    "weighted-f1" => Objective::MaxWeightedF1,
                    other => {
                        return Err(CliError::Usage(format!(
                            "unknown objective `{other}` (expected val-loss or weighted-f1)"
                        )))
                    }
                };
            }
            if lr_narrow {
                cfg.tune.lr_narrow = true;
            }
            cmd_tune(&cfg, kind)
        }
        Command::Train {
            kind,
            params,
            epochs,
        } => {
            let kind = parse_kind(&kind)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd_train(&cfg, kind, params.as_deref())
        }
        Command::Evaluate {
            checkpoint,
            data,
            threshold,
            table,
            out,
        } => cmd_evaluate(&cfg, &checkpoint, &data, threshold, table, out.as_deref()),
        Command::Report { files, sort_by, out } => cmd_report(&files, &sort_by, out.as_deref()),
    }
}

fn parse_kind(name: &str) -> Result<DecoderKind, CliError> {
    DecoderKind::parse(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown decoder kind `{name}` (expected gru, lstm, bilstm, or bilstm-a)"
        ))
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct OutPaths {
    dir: PathBuf,
}

impl OutPaths {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.out_dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(OutPaths { dir })
    }

    fn train_records(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }

    fn val_records(&self) -> PathBuf {
        self.dir.join("val.jsonl")
    }

    fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    fn manifest(&self) -> PathBuf {
        self.dir.join("split_manifest.json")
    }

    fn study_log(&self, kind: DecoderKind) -> PathBuf {
        self.dir.join(format!("study-{}.jsonl", kind.name()))
    }

    fn best_params(&self, kind: DecoderKind) -> PathBuf {
        self.dir.join(format!("best-params-{}.json", kind.name()))
    }

    fn checkpoint(&self, kind: DecoderKind) -> PathBuf {
        self.dir.join(format!("model-{}.ckpt", kind.name()))
    }

    fn history(&self, kind: DecoderKind) -> PathBuf {
        self.dir.join(format!("history-{}.jsonl", kind.name()))
    }
}

// ---- prepare ---------------------------------------------------------

/// Cleans, filters, splits, and tokenizes; writes the two record files,
/// the token vocabulary, and the split manifest.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<(), CliError> {
    let out = OutPaths::new(cfg)?;
    let vocab = LabelVocab::canonical();
    let raw = match (&cfg.data.synthetic, &cfg.data.input) {
        (Some(n), _) => generate_synthetic_with(
            *n,
            &vocab,
            derive_seed(cfg.seed, "cli/synthetic"),
            &SyntheticConfig {
                avg_labels_per_sample: cfg.data.avg_labels_per_sample,
                prevalence: None,
            },
        ),
        (None, Some(path)) => load_dataset(Path::new(path), &vocab)?,
        (None, None) => {
            return Err(CliError::Usage(
                "prepare needs --input FILE or --synthetic N".into(),
            ))
        }
    };

    let cleaned: Vec<LabeledSample> = raw
        .samples()
        .iter()
        .map(|s| LabeledSample {
            code: clean_code(&s.code),
            labels: s.labels.clone(),
        })
        .collect();
    let cleaned = Dataset::new(cleaned, vocab)?;
    let kept = drop_invalid(&cleaned, cfg.data.allow_zero_labels)?;

    let split_cfg = SplitConfig {
        train_fraction: cfg.data.train_fraction,
        seed: derive_seed(cfg.seed, "cli/split"),
    };
    let (train_set, val_set) = stratified_split(&kept, &split_cfg)?;
    let token_vocab = build_vocab(&train_set, cfg.data.max_vocab, cfg.data.min_token_freq);

    save_records(&out.train_records(), &train_set)?;
    save_records(&out.val_records(), &val_set)?;
    token_vocab.save(&out.vocab())?;
    let manifest = SplitManifest::from_split(&train_set, &val_set, &split_cfg);
    write_atomic(
        &out.manifest(),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest json")
            .as_bytes(),
    )?;
    println!(
        "prepared {} train / {} val samples into {}",
        train_set.len(),
        val_set.len(),
        out.dir.display()
    );
    Ok(())
}

// ---- tune ------------------------------------------------------------

/// Best-trial summary written next to the study log.
#[derive(Debug, Serialize, Deserialize)]
pub struct BestParams {
    pub kind: String,
    pub trial_id: usize,
    pub objective: Objective,
    pub val_loss: f64,
    pub weighted_f1: f64,
    pub params: BTreeMap<String, ParamValue>,
}

fn load_prepared(cfg: &RunConfig, out: &OutPaths) -> Result<(Dataset, Dataset, TokenVocab), CliError> {
    let vocab = LabelVocab::canonical();
    let train_set = load_dataset(&out.train_records(), &vocab)?;
    let val_set = load_dataset(&out.val_records(), &vocab)?;
    let token_vocab = TokenVocab::load(&out.vocab())?;
    let _ = cfg;
    Ok((train_set, val_set, token_vocab))
}

/// Runs (or resumes) the study for one decoder kind and writes the best
/// parameters.
pub fn cmd_tune(cfg: &RunConfig, kind: DecoderKind) -> Result<(), CliError> {
    let out = OutPaths::new(cfg)?;
    let (train_set, val_set, token_vocab) = load_prepared(cfg, &out)?;
    let space = SearchSpace::canonical(kind, cfg.tune.lr_narrow);
    let study_seed = derive_seed(cfg.seed, &format!("cli/tune/{}", kind.name()));
    let study_config = StudyConfig {
        n_trials: cfg.tune.trials,
        n_startup: cfg.tune.startup_trials,
        gamma: cfg.tune.gamma,
        n_candidates: cfg.tune.candidates,
        seed: study_seed,
        objective: cfg.tune.objective,
    };
    let log_path = out.study_log(kind);
    let existing = load_log(&log_path)?;
    let resumed = existing.len();
    let mut study = Study::with_trials(space, study_config, existing)?;

    let trial_epochs = cfg.tune.trial_epochs.unwrap_or(cfg.train.epochs);
    let mut runner = |params: &BTreeMap<String, ParamValue>, id: usize| {
        let mut decoder_cfg = cfg.decoder.clone();
        decoder_cfg.kind = kind;
        decoder_cfg.label_count = train_set.vocab().len();
        let mut train_cfg = cfg.train.clone();
        train_cfg.epochs = trial_epochs;
        train_cfg.seed = derive_seed(study_seed, &format!("trial-train/{id}"));
        apply_canonical(params, &mut decoder_cfg, &mut train_cfg);
        let mut model = Model::new(
            cfg.encoder.clone(),
            decoder_cfg,
            token_vocab.clone(),
            train_set.vocab().clone(),
            cfg.data.max_seq_len,
            derive_seed(study_seed, &format!("trial-model/{id}")),
        );
        match train(&mut model, &train_set, &val_set, &train_cfg) {
            Ok(history) => {
                let last = history.epochs.last().expect("at least one epoch");
                Ok(TrialResult {
                    val_loss: last.val_loss,
                    weighted_f1: last.val_weighted_f1,
                })
            }
            Err(e) => Err(e.to_string()),
        }
    };
    let mut log_trial = |trial: &Trial| {
        append_log(&log_path, trial).expect("study log append");
    };
    study.run(&mut runner, &mut log_trial)?;
    if resumed > 0 {
        println!("resumed study from {resumed} logged trials");
    }

    let best = study.best().expect("run guarantees a best trial");
    let best_params = BestParams {
        kind: kind.name().to_string(),
        trial_id: best.id,
        objective: cfg.tune.objective,
        val_loss: best.val_loss.expect("complete"),
        weighted_f1: best.weighted_f1.expect("complete"),
        params: best.params.clone(),
    };
    write_atomic(
        &out.best_params(kind),
        serde_json::to_string_pretty(&best_params)
            .expect("best params json")
            .as_bytes(),
    )?;
    println!(
        "best trial {} ({}): val_loss {:.6}, weighted F1 {:.4}",
        best.id,
        kind.name(),
        best_params.val_loss,
        best_params.weighted_f1
    );
    Ok(())
}

// ---- train ------------------------------------------------------------

/// Trains with the best (or configured) hyperparameters and writes the
/// checkpoint plus per-epoch history.
pub fn cmd_train(cfg: &RunConfig, kind: DecoderKind, params: Option<&Path>) -> Result<(), CliError> {
    let out = OutPaths::new(cfg)?;
    let (train_set, val_set, token_vocab) = load_prepared(cfg, &out)?;
    let mut decoder_cfg = cfg.decoder.clone();
    decoder_cfg.kind = kind;
    decoder_cfg.label_count = train_set.vocab().len();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, "cli/train");
    if let Some(path) = params {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let best: BestParams = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        apply_canonical(&best.params, &mut decoder_cfg, &mut train_cfg);
    }

    let mut model = Model::new(
        cfg.encoder.clone(),
        decoder_cfg,
        token_vocab,
        train_set.vocab().clone(),
        cfg.data.max_seq_len,
        derive_seed(cfg.seed, "cli/train-model"),
    );
    let history = train(&mut model, &train_set, &val_set, &train_cfg)?;
    save_checkpoint(&out.checkpoint(kind), &mut model, &train_cfg)?;
    write_atomic(&out.history(kind), history.to_jsonl().as_bytes())?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: train loss {:.6}, val loss {:.6}, val F1w {:.4} (best epoch {})",
        kind.name(),
        history.epochs.len(),
        last.train_loss,
        last.val_loss,
        last.val_weighted_f1,
        history.best_epoch
    );
    Ok(())
}

// ---- evaluate ----------------------------------------------------------

/// Predicts at the threshold and writes the full metrics report.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    threshold: Option<f64>,
    table: bool,
    out_file: Option<&Path>,
) -> Result<(), CliError> {
    let out = OutPaths::new(cfg)?;
    let (model, train_cfg) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data, &model.label_vocab)?;
    let tau = threshold.unwrap_or(train_cfg.threshold);
    let (scores, binary) = predict(&model, &dataset, tau)?;
    let y_true: Vec<Vec<u8>> = dataset.samples().iter().map(|s| s.labels.clone()).collect();
    let ps = PredictionSet::new(y_true, binary, scores)?;
    let report = full_report(&ps, model.label_vocab.names())?;
    let path = out_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.dir.join("report.json"));
    write_atomic(
        &path,
        serde_json::to_string_pretty(&report)
            .expect("report json")
            .as_bytes(),
    )?;
    if table {
        let name = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        println!("{}", render_table(&[(name, report.clone())], "F1_weighted")?);
    }
    println!(
        "evaluated {} samples at tau={}: F1w {:.4}, report {}",
        report.n_samples,
        tau,
        report.f1_weighted,
        path.display()
    );
    Ok(())
}

// ---- report ------------------------------------------------------------

/// Merges reports into one table with per-column best markers.
pub fn cmd_report(files: &[PathBuf], sort_by: &str, out_file: Option<&Path>) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Usage("report needs at least one report file".into()));
    }
    let mut rows = Vec::new();
    for path in files {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push((name, report));
    }
    for (name, report) in rows.iter().skip(1) {
        let labels = |r: &MetricsReport| {
            r.per_label
                .iter()
                .map(|l| l.label.clone())
                .collect::<Vec<_>>()
        };
        if labels(report) != labels(&rows[0].1) {
            return Err(CliError::VocabMismatch {
                left: rows[0].0.clone(),
                right: name.clone(),
            });
        }
    }
    let rendered = render_table(&rows, sort_by)?;
    println!("{rendered}");
    if let Some(path) = out_file {
        write_atomic(path, rendered.as_bytes())?;
    }
    Ok(())
}

/// Fixed-width table over the headline metric columns; the best value per
/// column carries a `*` marker.
pub fn render_table(rows: &[(String, MetricsReport)], sort_by: &str) -> Result<String, CliError> {
    let columns = MetricsReport::TABLE_COLUMNS;
    let higher = MetricsReport::TABLE_HIGHER_IS_BETTER;
    let sort_idx = columns
        .iter()
        .position(|c| *c == sort_by)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown sort column `{sort_by}` (expected one of {})",
                columns.join(", ")
            ))
        })?;

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let va = rows[a].1.table_values()[sort_idx];
        let vb = rows[b].1.table_values()[sort_idx];
        let cmp = va.partial_cmp(&vb).unwrap_or(std::cmp::Ordering::Equal);
        if higher[sort_idx] {
            cmp.reverse()
        } else {
            cmp
        }
    });

    let mut best = vec![f64::NAN; columns.len()];
    for (_, report) in rows {
        for (j, v) in report.table_values().into_iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            if best[j].is_nan() || (higher[j] && v > best[j]) || (!higher[j] && v < best[j]) {
                best[j] = v;
            }
        }
    }

    let name_width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once(5))
        .max()
        .expect("non-empty");
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "model"));
    for c in columns {
        out.push_str(&format!(" {c:>12}"));
    }
    out.push('\n');
    for &i in &order {
        let (name, report) = &rows[i];
        out.push_str(&format!("{name:<name_width$}"));
        for (j, v) in report.table_values().into_iter().enumerate() {
            let cell = if v.is_nan() {
                "-".to_string()
            } else if v == best[j] {
                format!("*{v:.4}*")
            } else {
                format!("{v:.4}")
            };
            out.push_str(&format!(" {cell:>12}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.display().to_string();
        cfg.seed = 7;
        cfg.data.synthetic = Some(48);
        cfg.data.max_seq_len = 48;
        cfg.data.max_vocab = 512;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.num_layers = 1;
        cfg.encoder.num_heads = 2;
        cfg.encoder.feedforward_dim = 32;
        cfg.decoder.hidden_size = 8;
        cfg.decoder.dropout_p = 0.1;
        cfg.train.epochs = 1;
        cfg.train.train_batch_size = 16;
        cfg
    }

    #[test]
    fn prepare_writes_all_outputs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_cfg(dir.path());
        cmd_prepare(&cfg).unwrap();
        for f in ["train.jsonl", "val.jsonl", "vocab.txt", "split_manifest.json"] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let read_all = || {
            ["train.jsonl", "val.jsonl", "vocab.txt", "split_manifest.json"]
                .map(|f| fs::read(dir.path().join(f)).unwrap())
        };
        let first = read_all();
        cmd_prepare(&cfg).unwrap();
        assert_eq!(first, read_all());

        // sizes follow the split rounding rule: round(0.8 * 48) = 38
        let manifest: SplitManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("split_manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.n_train, 38);
        assert_eq!(manifest.n_val, 10);
    }

    #[test]
    fn prepare_missing_input_fails_without_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_cfg(dir.path());
        cfg.data.synthetic = None;
        cfg.data.input = Some(dir.path().join("nope.jsonl").display().to_string());
        assert!(cmd_prepare(&cfg).is_err());
        assert!(!dir.path().join("train.jsonl").exists());
    }

    #[test]
    fn tune_then_train_then_evaluate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_cfg(dir.path());
        cfg.tune.trials = 2;
        cfg.tune.startup_trials = 1;
        cfg.tune.trial_epochs = Some(1);
        cmd_prepare(&cfg).unwrap();
        cmd_tune(&cfg, DecoderKind::Gru).unwrap();
        let log = load_log(&dir.path().join("study-gru.jsonl")).unwrap();
        assert_eq!(log.len(), 2);
        let best_path = dir.path().join("best-params-gru.json");
        assert!(best_path.exists());

        cmd_train(&cfg, DecoderKind::Gru, Some(&best_path)).unwrap();
        let ckpt = dir.path().join("model-gru.ckpt");
        assert!(ckpt.exists());
        let history = fs::read_to_string(dir.path().join("history-gru.jsonl")).unwrap();
        assert_eq!(history.lines().count(), 1);

        cmd_evaluate(&cfg, &ckpt, &dir.path().join("val.jsonl"), None, false, None).unwrap();
        let report: MetricsReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report.per_label.len(), 11);
    }

    #[test]
    fn tune_resume_reaches_identical_best() {
        let dir_a = tempfile::tempdir().unwrap();
        let mut cfg_a = base_cfg(dir_a.path());
        cfg_a.tune.trials = 3;
        cfg_a.tune.startup_trials = 2;
        cfg_a.tune.trial_epochs = Some(1);
        cmd_prepare(&cfg_a).unwrap();
        cmd_tune(&cfg_a, DecoderKind::Gru).unwrap();
        let full_log = fs::read_to_string(dir_a.path().join("study-gru.jsonl")).unwrap();

        // separate dir: run 2 trials, then resume to 3
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_b = base_cfg(dir_b.path());
        cfg_b.tune.trial_epochs = Some(1);
        cfg_b.tune.startup_trials = 2;
        cfg_b.tune.trials = 2;
        cmd_prepare(&cfg_b).unwrap();
        cmd_tune(&cfg_b, DecoderKind::Gru).unwrap();
        cfg_b.tune.trials = 3;
        cmd_tune(&cfg_b, DecoderKind::Gru).unwrap();
        let resumed_log = fs::read_to_string(dir_b.path().join("study-gru.jsonl")).unwrap();
        assert_eq!(full_log, resumed_log);
        assert_eq!(
            fs::read(dir_a.path().join("best-params-gru.json")).unwrap(),
            fs::read(dir_b.path().join("best-params-gru.json")).unwrap()
        );
    }

    #[test]
    fn lr_narrow_keeps_every_sampled_rate_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_cfg(dir.path());
        cfg.tune.trials = 4;
        cfg.tune.startup_trials = 2;
        cfg.tune.trial_epochs = Some(1);
        cfg.tune.lr_narrow = true;
        cmd_prepare(&cfg).unwrap();
        cmd_tune(&cfg, DecoderKind::Gru).unwrap();
        let log = load_log(&dir.path().join("study-gru.jsonl")).unwrap();
        assert_eq!(log.len(), 4);
        for trial in log {
            let lr = trial.params["learning_rate"].as_f64();
            assert!(
                (crate::tuner::LR_RANGE_NARROW.0..=crate::tuner::LR_RANGE_NARROW.1)
                    .contains(&lr),
                "lr {lr} outside the narrow range"
            );
        }
    }

    #[test]
    fn report_merges_and_marks_best() {
        let dir = tempfile::tempdir().unwrap();
        let ps_good = PredictionSet::new(
            vec![vec![1, 0], vec![0, 1]],
            vec![vec![1, 0], vec![0, 1]],
            vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        )
        .unwrap();
        let ps_bad = PredictionSet::new(
            vec![vec![1, 0], vec![0, 1]],
            vec![vec![1, 1], vec![0, 1]],
            vec![vec![0.9, 0.6], vec![0.1, 0.9]],
        )
        .unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let good = full_report(&ps_good, &names).unwrap();
        let bad = full_report(&ps_bad, &names).unwrap();
        let pa = dir.path().join("good.json");
        let pb = dir.path().join("bad.json");
        fs::write(&pa, serde_json::to_string(&good).unwrap()).unwrap();
        fs::write(&pb, serde_json::to_string(&bad).unwrap()).unwrap();

        cmd_report(&[pa.clone(), pb.clone()], "F1_weighted", None).unwrap();
        let rendered = render_table(
            &[("good".into(), good), ("bad".into(), bad)],
            "F1_weighted",
        )
        .unwrap();
        let first_row = rendered.lines().nth(1).unwrap();
        assert!(first_row.starts_with("good"));
        assert!(first_row.contains("*1.0000*"));
    }

    #[test]
    fn report_rejects_mismatched_vocabularies() {
        let dir = tempfile::tempdir().unwrap();
        let ps = PredictionSet::new(vec![vec![1, 0]], vec![vec![1, 0]], vec![vec![0.9, 0.1]])
            .unwrap();
        let r1 = full_report(&ps, &["a".into(), "b".into()]).unwrap();
        let r2 = full_report(&ps, &["a".into(), "c".into()]).unwrap();
        let p1 = dir.path().join("one.json");
        let p2 = dir.path().join("two.json");
        fs::write(&p1, serde_json::to_string(&r1).unwrap()).unwrap();
        fs::write(&p2, serde_json::to_string(&r2).unwrap()).unwrap();
        let err = cmd_report(&[p1, p2], "F1_weighted", None).unwrap_err();
        assert!(matches!(err, CliError::VocabMismatch { .. }));
    }

    #[test]
    fn single_report_renders_single_row() {
        let ps = PredictionSet::new(vec![vec![1, 0]], vec![vec![1, 0]], vec![vec![0.9, 0.1]])
            .unwrap();
        let report = full_report(&ps, &["a".into(), "b".into()]).unwrap();
        let rendered = render_table(&[("only".into(), report)], "AvgAcc").unwrap();
        assert_eq!(rendered.lines().count(), 2);
    }
}
