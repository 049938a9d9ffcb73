//! Hyperparameter search: random startup trials followed by a
//! Tree-structured Parzen Estimator sampler, over the canonical search
//! space (hidden size, layers, dropout, learning rate, batch size, weight
//! decay, and - for GRU/LSTM - bidirectionality).
//!
//! The TPE constants are stated, tunable defaults: the good/bad split takes
//! the gamma = 0.25 quantile, candidates per proposal = 24, startup = 5
//! random trials. Numeric densities are 1-D Gaussian Parzen estimates with
//! bandwidth `max(range/|set|, 0.1 * range)` (log-domain for log-uniform
//! dimensions); categorical dimensions use +1-smoothed frequencies. Each
//! dimension is modeled independently; candidates are drawn from the good
//! density and ranked by the likelihood ratio good/bad.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderKind};
use crate::rng::stream_rng;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
    #[error("study log io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("study log line {line} is malformed: {message}")]
    MalformedLog { line: usize, message: String },
    #[error("study log holds {found} trials but the study wants {want}")]
    LogAhead { found: usize, want: usize },
}

/// One sampled hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
}

impl ParamValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            ParamValue::Int(v) => *v as f64,
            ParamValue::Float(v) => *v,
            ParamValue::Bool(b) => f64::from(*b),
        }
    }

    pub fn as_usize(&self) -> usize {
        match self {
            ParamValue::Int(v) => *v as usize,
            ParamValue::Float(v) => *v as usize,
            ParamValue::Bool(b) => usize::from(*b),
        }
    }

    pub fn as_bool(&self) -> bool {
        match self {
            ParamValue::Bool(b) => *b,
            ParamValue::Int(v) => *v != 0,
            ParamValue::Float(v) => *v != 0.0,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamSpec {
    Categorical(Vec<ParamValue>),
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl ParamSpec {
    fn validate(&self) -> Result<(), String> {
        match self {
            ParamSpec::Categorical(values) => {
                if values.is_empty() {
                    return Err("empty categorical".into());
                }
            }
            ParamSpec::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(format!("uniform needs lo < hi, got [{lo}, {hi}]"));
                }
            }
            ParamSpec::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && lo < hi) {
                    return Err(format!("log-uniform needs 0 < lo < hi, got [{lo}, {hi}]"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match self {
            ParamSpec::Categorical(values) => values.contains(value),
            ParamSpec::Uniform { lo, hi } | ParamSpec::LogUniform { lo, hi } => {
                let v = value.as_f64();
                *lo <= v && v <= *hi
            }
        }
    }
}

/// Ordered named dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<(String, ParamSpec)>,
}

/// The broad learning-rate range and its narrowed variant for
/// stability-sensitive encoders.
pub const LR_RANGE_BROAD: (f64, f64) = (1e-5, 1e-1);
pub const LR_RANGE_NARROW: (f64, f64) = (1e-5, 5e-5);

impl SearchSpace {
    pub fn new(dims: Vec<(String, ParamSpec)>) -> Self {
        for (name, spec) in &dims {
            spec.validate().unwrap_or_else(|e| panic!("dimension {name}: {e}"));
        }
        SearchSpace { dims }
    }

    /// The experiment's search space. `bidirectional` appears only for the
    /// kinds where the flag means anything.
    pub fn canonical(kind: DecoderKind, lr_narrow: bool) -> Self {
        let (lr_lo, lr_hi) = if lr_narrow { LR_RANGE_NARROW } else { LR_RANGE_BROAD };
        let mut dims = vec![
            (
                "hidden_size".to_string(),
                ParamSpec::Categorical(vec![
                    ParamValue::Int(64),
                    ParamValue::Int(128),
                    ParamValue::Int(256),
                ]),
            ),
            (
                "num_layers".to_string(),
                ParamSpec::Categorical(vec![ParamValue::Int(1), ParamValue::Int(2)]),
            ),
            ("dropout".to_string(), ParamSpec::Uniform { lo: 0.1, hi: 0.3 }),
            (
                "learning_rate".to_string(),
                ParamSpec::LogUniform { lo: lr_lo, hi: lr_hi },
            ),
            (
                "train_batch_size".to_string(),
                ParamSpec::Categorical(vec![
                    ParamValue::Int(4),
                    ParamValue::Int(8),
                    ParamValue::Int(16),
                ]),
            ),
            (
                "weight_decay".to_string(),
                ParamSpec::LogUniform { lo: 1e-6, hi: 1e-3 },
            ),
        ];
        if kind.uses_bidirectional_flag() {
            dims.push((
                "bidirectional".to_string(),
                ParamSpec::Categorical(vec![ParamValue::Bool(true), ParamValue::Bool(false)]),
            ));
        }
        SearchSpace::new(dims)
    }

    pub fn dims(&self) -> &[(String, ParamSpec)] {
        &self.dims
    }

    pub fn contains(&self, params: &BTreeMap<String, ParamValue>) -> bool {
        self.dims.len() == params.len()
            && self.dims.iter().all(|(name, spec)| {
                params.get(name).is_some_and(|v| spec.contains(v))
            })
    }
}

/// Writes a sampled point into the decoder and train configs.
pub fn apply_canonical(
    params: &BTreeMap<String, ParamValue>,
    decoder: &mut DecoderConfig,
    train: &mut TrainConfig,
) {
    for (name, value) in params {
        match name.as_str() {
            "hidden_size" => decoder.hidden_size = value.as_usize(),
            "num_layers" => decoder.num_layers = value.as_usize(),
            "dropout" => decoder.dropout_p = value.as_f64(),
            "bidirectional" => decoder.bidirectional = value.as_bool(),
            "learning_rate" => train.learning_rate = value.as_f64(),
            "train_batch_size" => train.train_batch_size = value.as_usize(),
            "weight_decay" => train.weight_decay = value.as_f64(),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

/// Objective and secondary metric reported by one trial run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialResult {
    pub val_loss: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: BTreeMap<String, ParamValue>,
    pub val_loss: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub status: TrialStatus,
}

/// What the study minimizes (or maximizes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    MinValLoss,
    MaxWeightedF1,
}

impl Trial {
    /// Minimization score under the chosen objective; `None` for failures.
    fn score(&self, objective: Objective) -> Option<f64> {
        match objective {
            Objective::MinValLoss => self.val_loss,
            Objective::MaxWeightedF1 => self.weighted_f1.map(|f1| -f1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_trials: 10,
            n_startup: 5,
            gamma: 0.25,
            n_candidates: 24,
            seed: 0,
            objective: Objective::MinValLoss,
        }
    }
}

pub struct Study {
    pub space: SearchSpace,
    pub config: StudyConfig,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn new(space: SearchSpace, config: StudyConfig) -> Self {
        Study {
            space,
            config,
            trials: Vec::new(),
        }
    }

    /// Resumes from previously completed trials (for example a reloaded
    /// log).
    pub fn with_trials(
        space: SearchSpace,
        config: StudyConfig,
        trials: Vec<Trial>,
    ) -> Result<Self, TuneError> {
        if trials.len() > config.n_trials {
            return Err(TuneError::LogAhead {
                found: trials.len(),
                want: config.n_trials,
            });
        }
        Ok(Study {
            space,
            config,
            trials,
        })
    }

    /// Best completed trial under the study objective (argmin of the
    /// score; first on ties).
    pub fn best(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .min_by(|a, b| {
                let sa = a.score(self.config.objective).expect("complete trial");
                let sb = b.score(self.config.objective).expect("complete trial");
                sa.partial_cmp(&sb).expect("finite scores")
            })
    }

    /// Runs the remaining trials. Each trial's RNG derives from the study
    /// seed and the trial id, so an interrupted study resumes onto the
    /// exact same trajectory. `on_trial` sees every finished trial record.
    pub fn run(
        &mut self,
        runner: &mut dyn FnMut(&BTreeMap<String, ParamValue>, usize) -> Result<TrialResult, String>,
        on_trial: &mut dyn FnMut(&Trial),
    ) -> Result<(), TuneError> {
        while self.trials.len() < self.config.n_trials {
            let id = self.trials.len();
            let mut rng = stream_rng(self.config.seed, &format!("tuner/trial/{id}"));
            let history: Vec<(&BTreeMap<String, ParamValue>, f64)> = self
                .trials
                .iter()
                .filter(|t| t.status == TrialStatus::Complete)
                .map(|t| (&t.params, t.score(self.config.objective).expect("complete")))
                .collect();
            let params = if id < self.config.n_startup || history.is_empty() {
                sample_random(&self.space, &mut rng)
            } else {
                sample_tpe(
                    &self.space,
                    &history,
                    &mut rng,
                    self.config.gamma,
                    self.config.n_candidates,
                )
            };
            debug_assert!(self.space.contains(&params));
            let trial = match runner(&params, id) {
                Ok(result) if result.val_loss.is_finite() && result.weighted_f1.is_finite() => {
                    Trial {
                        id,
                        params,
                        val_loss: Some(result.val_loss),
                        weighted_f1: Some(result.weighted_f1),
                        status: TrialStatus::Complete,
                    }
                }
                _ => Trial {
                    id,
                    params,
                    val_loss: None,
                    weighted_f1: None,
                    status: TrialStatus::Failed,
                },
            };
            on_trial(&trial);
            self.trials.push(trial);
        }
        if self.best().is_none() {
            return Err(TuneError::AllTrialsFailed(self.config.n_trials));
        }
        Ok(())
    }
}

/// Uniform draw: categorical picks uniformly, uniform is linear,
/// log-uniform is `exp(U[ln lo, ln hi])`.
pub fn sample_random<R: Rng>(space: &SearchSpace, rng: &mut R) -> BTreeMap<String, ParamValue> {
    let mut out = BTreeMap::new();
    for (name, spec) in space.dims() {
        let value = match spec {
            ParamSpec::Categorical(values) => values[rng.gen_range(0..values.len())].clone(),
            ParamSpec::Uniform { lo, hi } => ParamValue::Float(rng.gen_range(*lo..=*hi)),
            ParamSpec::LogUniform { lo, hi } => {
                ParamValue::Float(rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(*lo, *hi))
            }
        };
        out.insert(name.clone(), value);
    }
    out
}

/// One TPE proposal from completed history (scores already oriented so
/// that smaller is better).
pub fn sample_tpe<R: Rng>(
    space: &SearchSpace,
    history: &[(&BTreeMap<String, ParamValue>, f64)],
    rng: &mut R,
    gamma: f64,
    n_candidates: usize,
) -> BTreeMap<String, ParamValue> {
    assert!(!history.is_empty(), "TPE needs at least one completed trial");
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        history[a]
            .1
            .partial_cmp(&history[b].1)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let n_good = ((history.len() as f64 * gamma).ceil() as usize).clamp(1, history.len());
    let good: Vec<&BTreeMap<String, ParamValue>> =
        order[..n_good].iter().map(|&i| history[i].0).collect();
    let bad: Vec<&BTreeMap<String, ParamValue>> =
        order[n_good..].iter().map(|&i| history[i].0).collect();

    let models: Vec<DimModel> = space
        .dims()
        .iter()
        .map(|(name, spec)| DimModel::fit(name, spec, &good, &bad))
        .collect();

    let mut best: Option<(f64, BTreeMap<String, ParamValue>)> = None;
    for _ in 0..n_candidates.max(1) {
        let mut candidate = BTreeMap::new();
        let mut log_ratio = 0.0;
        for ((name, _), model) in space.dims().iter().zip(&models) {
            let value = model.sample_good(rng);
            log_ratio += model.log_density_good(&value) - model.log_density_bad(&value);
            candidate.insert(name.clone(), value);
        }
        if best.as_ref().is_none_or(|(score, _)| log_ratio > *score) {
            best = Some((log_ratio, candidate));
        }
    }
    best.expect("at least one candidate").1
}

/// Independent 1-D density pair for one dimension.
enum DimModel {
    Numeric {
        log_domain: bool,
        /// Fitting-domain bounds (log-space for log-uniform dims).
        lo: f64,
        hi: f64,
        /// Original-domain bounds, for clamping after the inverse map.
        orig_lo: f64,
        orig_hi: f64,
        good: Parzen,
        bad: Parzen,
    },
    Categorical {
        values: Vec<ParamValue>,
        good_weights: Vec<f64>,
        bad_weights: Vec<f64>,
    },
}

/// Gaussian-kernel density over a bounded domain; an empty set degrades to
/// the uniform density.
struct Parzen {
    centers: Vec<f64>,
    bandwidth: f64,
    range: f64,
}

impl Parzen {
    fn fit(points: Vec<f64>, lo: f64, hi: f64) -> Parzen {
        let range = hi - lo;
        let bandwidth = if points.is_empty() {
            range
        } else {
            f64::max(range / points.len() as f64, 0.1 * range)
        };
        Parzen {
            centers: points,
            bandwidth,
            range,
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        if self.centers.is_empty() {
            return -(self.range.ln());
        }
        let norm = self.bandwidth * (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for &mu in &self.centers {
            let z = (x - mu) / self.bandwidth;
            acc += (-0.5 * z * z).exp() / norm;
        }
        (acc / self.centers.len() as f64).max(1e-300).ln()
    }

    fn sample<R: Rng>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        if self.centers.is_empty() {
            return rng.gen_range(lo..=hi);
        }
        let mu = self.centers[rng.gen_range(0..self.centers.len())];
        (mu + self.bandwidth * standard_normal(rng)).clamp(lo, hi)
    }
}

/// Box-Muller standard normal draw.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl DimModel {
    fn fit(
        name: &str,
        spec: &ParamSpec,
        good: &[&BTreeMap<String, ParamValue>],
        bad: &[&BTreeMap<String, ParamValue>],
    ) -> DimModel {
        let collect = |set: &[&BTreeMap<String, ParamValue>]| -> Vec<ParamValue> {
            set.iter().filter_map(|p| p.get(name).cloned()).collect()
        };
        match spec {
            ParamSpec::Uniform { lo, hi } | ParamSpec::LogUniform { lo, hi } => {
                let log_domain = matches!(spec, ParamSpec::LogUniform { .. });
                let (dlo, dhi) = if log_domain { (lo.ln(), hi.ln()) } else { (*lo, *hi) };
                let to_domain = |v: &ParamValue| {
                    let x = v.as_f64();
                    if log_domain {
                        x.ln()
                    } else {
                        x
                    }
                };
                let good_pts: Vec<f64> = collect(good).iter().map(to_domain).collect();
                let bad_pts: Vec<f64> = collect(bad).iter().map(to_domain).collect();
                DimModel::Numeric {
                    log_domain,
                    lo: dlo,
                    hi: dhi,
                    orig_lo: *lo,
                    orig_hi: *hi,
                    good: Parzen::fit(good_pts, dlo, dhi),
                    bad: Parzen::fit(bad_pts, dlo, dhi),
                }
            }
            ParamSpec::Categorical(values) => {
                let smoothed = |set: &[ParamValue]| -> Vec<f64> {
                    let total = set.len() + values.len();
                    values
                        .iter()
                        .map(|v| {
                            let count = set.iter().filter(|s| *s == v).count();
                            (count + 1) as f64 / total as f64
                        })
                        .collect()
                };
                DimModel::Categorical {
                    values: values.clone(),
                    good_weights: smoothed(&collect(good)),
                    bad_weights: smoothed(&collect(bad)),
                }
            }
        }
    }

    fn sample_good<R: Rng>(&self, rng: &mut R) -> ParamValue {
        match self {
            DimModel::Numeric {
                log_domain,
                lo,
                hi,
                orig_lo,
                orig_hi,
                good,
                ..
            } => {
                let x = good.sample(*lo, *hi, rng);
                // exp(ln(hi)) can overshoot hi by an ulp
                let value = if *log_domain { x.exp() } else { x };
                ParamValue::Float(value.clamp(*orig_lo, *orig_hi))
            }
            DimModel::Categorical {
                values,
                good_weights,
                ..
            } => {
                let total: f64 = good_weights.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                for (v, w) in values.iter().zip(good_weights) {
                    pick -= w;
                    if pick <= 0.0 {
                        return v.clone();
                    }
                }
                values.last().expect("non-empty categorical").clone()
            }
        }
    }

    fn log_density(&self, value: &ParamValue, use_good: bool) -> f64 {
        match self {
            DimModel::Numeric {
                log_domain,
                good,
                bad,
                ..
            } => {
                let x = if *log_domain {
                    value.as_f64().ln()
                } else {
                    value.as_f64()
                };
                if use_good {
                    good.log_pdf(x)
                } else {
                    bad.log_pdf(x)
                }
            }
            DimModel::Categorical {
                values,
                good_weights,
                bad_weights,
            } => {
                let idx = values.iter().position(|v| v == value).expect("sampled value");
                let w = if use_good {
                    good_weights[idx]
                } else {
                    bad_weights[idx]
                };
                w.ln()
            }
        }
    }

    fn log_density_good(&self, value: &ParamValue) -> f64 {
        self.log_density(value, true)
    }

    fn log_density_bad(&self, value: &ParamValue) -> f64 {
        self.log_density(value, false)
    }
}

// ---- study log -----------------------------------------------------------

/// Appends one trial record to a line-delimited log.
pub fn append_log(path: &Path, trial: &Trial) -> Result<(), TuneError> {
    use std::io::Write as _;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TuneError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let line = serde_json::to_string(trial).expect("trial json");
    writeln!(file, "{line}").map_err(|source| TuneError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads all trial records from a log; a missing file is an empty study.
pub fn load_log(path: &Path) -> Result<Vec<Trial>, TuneError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(TuneError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(line).map_err(|e| TuneError::MalformedLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        trials.push(trial);
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_space() -> SearchSpace {
        SearchSpace::new(vec![
            ("x".to_string(), ParamSpec::Uniform { lo: -1.0, hi: 1.0 }),
            ("y".to_string(), ParamSpec::Uniform { lo: -1.0, hi: 1.0 }),
        ])
    }

    fn quadratic(params: &BTreeMap<String, ParamValue>) -> f64 {
        let x = params["x"].as_f64();
        let y = params["y"].as_f64();
        (x - 0.3).powi(2) + (y + 0.2).powi(2)
    }

    #[test]
    fn single_value_categorical_always_returns_it() {
        let space = SearchSpace::new(vec![(
            "only".to_string(),
            ParamSpec::Categorical(vec![ParamValue::Int(42)]),
        )]);
        let mut rng = stream_rng(1, "t");
        for _ in 0..50 {
            assert_eq!(sample_random(&space, &mut rng)["only"], ParamValue::Int(42));
        }
    }

    #[test]
    fn loguniform_median_is_geometric_midpoint() {
        let space = SearchSpace::new(vec![(
            "lr".to_string(),
            ParamSpec::LogUniform { lo: 1e-5, hi: 1e-1 },
        )]);
        let mut rng = stream_rng(2, "t");
        let mut lns: Vec<f64> = (0..100_000)
            .map(|_| sample_random(&space, &mut rng)["lr"].as_f64().ln())
            .collect();
        lns.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = lns[lns.len() / 2];
        let expect = (1e-3f64).ln();
        assert!(
            (median - expect).abs() <= 0.03 * expect.abs(),
            "median {median} vs {expect}"
        );
    }

    #[test]
    fn uniform_draws_stay_in_bounds() {
        let space = SearchSpace::new(vec![(
            "d".to_string(),
            ParamSpec::Uniform { lo: 0.1, hi: 0.3 },
        )]);
        let mut rng = stream_rng(3, "t");
        for _ in 0..10_000 {
            let v = sample_random(&space, &mut rng)["d"].as_f64();
            assert!((0.1..=0.3).contains(&v));
        }
    }

    #[test]
    fn tpe_with_single_trial_stays_in_bounds() {
        let space = toy_space();
        let mut rng = stream_rng(4, "t");
        let params = sample_random(&space, &mut rng);
        let history = vec![(&params, 1.0)];
        for _ in 0..100 {
            let p = sample_tpe(&space, &history, &mut rng, 0.25, 24);
            assert!(space.contains(&p), "out of bounds: {p:?}");
        }
    }

    #[test]
    fn tpe_with_identical_objectives_stays_in_bounds() {
        let space = toy_space();
        let mut rng = stream_rng(5, "t");
        let pts: Vec<BTreeMap<String, ParamValue>> =
            (0..6).map(|_| sample_random(&space, &mut rng)).collect();
        let history: Vec<(&BTreeMap<String, ParamValue>, f64)> =
            pts.iter().map(|p| (p, 0.5)).collect();
        for _ in 0..50 {
            let p = sample_tpe(&space, &history, &mut rng, 0.25, 24);
            assert!(space.contains(&p));
        }
    }

    #[test]
    fn canonical_space_bounds_hold_over_many_draws() {
        for (kind, expect_bidir) in [
            (DecoderKind::Gru, true),
            (DecoderKind::BiLstm, false),
        ] {
            let space = SearchSpace::canonical(kind, false);
            assert_eq!(
                space.dims().iter().any(|(n, _)| n == "bidirectional"),
                expect_bidir
            );
            let mut rng = stream_rng(6, "t");
            for _ in 0..10_000 {
                let p = sample_random(&space, &mut rng);
                assert!(space.contains(&p));
            }
        }
    }

    #[test]
    fn narrow_range_caps_learning_rate() {
        let space = SearchSpace::canonical(DecoderKind::Gru, true);
        let mut rng = stream_rng(7, "t");
        for _ in 0..5_000 {
            let lr = sample_random(&space, &mut rng)["learning_rate"].as_f64();
            assert!((LR_RANGE_NARROW.0..=LR_RANGE_NARROW.1).contains(&lr));
        }
    }

    #[test]
    fn study_single_trial_is_best() {
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 1,
                seed: 8,
                ..StudyConfig::default()
            },
        );
        study
            .run(
                &mut |params, _| {
                    Ok(TrialResult {
                        val_loss: quadratic(params),
                        weighted_f1: 0.0,
                    })
                },
                &mut |_| {},
            )
            .unwrap();
        assert_eq!(study.best().unwrap().id, 0);
    }

    #[test]
    fn failed_trials_are_excluded_from_best() {
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 6,
                seed: 9,
                ..StudyConfig::default()
            },
        );
        study
            .run(
                &mut |params, id| {
                    if id % 2 == 1 {
                        Err("odd trials fail".into())
                    } else {
                        Ok(TrialResult {
                            val_loss: quadratic(params),
                            weighted_f1: 0.0,
                        })
                    }
                },
                &mut |_| {},
            )
            .unwrap();
        let best = study.best().unwrap();
        assert_eq!(best.id % 2, 0);
        assert_eq!(
            study.trials.iter().filter(|t| t.status == TrialStatus::Failed).count(),
            3
        );
    }

    #[test]
    fn all_failed_is_an_error() {
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 3,
                seed: 10,
                ..StudyConfig::default()
            },
        );
        let err = study
            .run(&mut |_, _| Err("boom".into()), &mut |_| {})
            .unwrap_err();
        assert!(matches!(err, TuneError::AllTrialsFailed(3)));
    }

    #[test]
    fn best_objective_is_minimal_over_completed() {
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 10,
                seed: 11,
                ..StudyConfig::default()
            },
        );
        study
            .run(
                &mut |params, _| {
                    Ok(TrialResult {
                        val_loss: quadratic(params),
                        weighted_f1: 0.0,
                    })
                },
                &mut |_| {},
            )
            .unwrap();
        let best = study.best().unwrap().val_loss.unwrap();
        for t in &study.trials {
            if let Some(v) = t.val_loss {
                assert!(best <= v);
            }
        }
    }

    #[test]
    fn max_f1_objective_flips_selection() {
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 5,
                seed: 12,
                objective: Objective::MaxWeightedF1,
                ..StudyConfig::default()
            },
        );
        study
            .run(
                &mut |params, _| {
                    Ok(TrialResult {
                        val_loss: quadratic(params),
                        weighted_f1: 1.0 / (1.0 + quadratic(params)),
                    })
                },
                &mut |_| {},
            )
            .unwrap();
        let best = study.best().unwrap();
        let best_f1 = best.weighted_f1.unwrap();
        for t in &study.trials {
            if let Some(f1) = t.weighted_f1 {
                assert!(best_f1 >= f1);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = StudyConfig {
            n_trials: 12,
            seed: 13,
            ..StudyConfig::default()
        };
        let mut runner = |params: &BTreeMap<String, ParamValue>, _: usize| {
            Ok(TrialResult {
                val_loss: quadratic(params),
                weighted_f1: 0.0,
            })
        };

        let mut full = Study::new(toy_space(), cfg.clone());
        full.run(&mut runner, &mut |_| {}).unwrap();

        let mut first = Study::new(toy_space(), StudyConfig { n_trials: 4, ..cfg.clone() });
        first.run(&mut runner, &mut |_| {}).unwrap();
        let mut resumed = Study::with_trials(toy_space(), cfg, first.trials).unwrap();
        resumed.run(&mut runner, &mut |_| {}).unwrap();

        assert_eq!(full.trials.len(), resumed.trials.len());
        for (a, b) in full.trials.iter().zip(&resumed.trials) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.val_loss, b.val_loss);
        }
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.jsonl");
        let mut study = Study::new(
            toy_space(),
            StudyConfig {
                n_trials: 4,
                seed: 14,
                ..StudyConfig::default()
            },
        );
        let log_path = path.clone();
        study
            .run(
                &mut |params, _| {
                    Ok(TrialResult {
                        val_loss: quadratic(params),
                        weighted_f1: 0.0,
                    })
                },
                &mut |t| append_log(&log_path, t).unwrap(),
            )
            .unwrap();
        let trials = load_log(&path).unwrap();
        assert_eq!(trials.len(), 4);
        assert_eq!(trials[2].params, study.trials[2].params);
    }

    #[test]
    fn tpe_beats_random_on_the_quadratic() {
        // lighter version of the acceptance run: 6 seeds
        let mut tpe_sum = 0.0;
        let mut random_sum = 0.0;
        for seed in 0..6 {
            let mut best_tpe = f64::INFINITY;
            let mut study = Study::new(
                toy_space(),
                StudyConfig {
                    n_trials: 40,
                    seed,
                    ..StudyConfig::default()
                },
            );
            study
                .run(
                    &mut |params, _| {
                        Ok(TrialResult {
                            val_loss: quadratic(params),
                            weighted_f1: 0.0,
                        })
                    },
                    &mut |_| {},
                )
                .unwrap();
            for t in &study.trials {
                best_tpe = best_tpe.min(t.val_loss.unwrap());
            }
            let mut rng = stream_rng(seed, "tuner/random-baseline");
            let mut best_random = f64::INFINITY;
            for _ in 0..40 {
                best_random = best_random.min(quadratic(&sample_random(&toy_space(), &mut rng)));
            }
            tpe_sum += best_tpe;
            random_sum += best_random;
        }
        assert!(
            tpe_sum <= random_sum,
            "TPE mean {} vs random mean {}",
            tpe_sum / 6.0,
            random_sum / 6.0
        );
    }
}
