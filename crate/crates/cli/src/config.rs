//! JSON experiment configuration.
//!
//! Every key is optional except the strategy and level, which may be given
//! singly (`strategy`, `level`) or as lists (`strategies`, `levels`). Unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use fedstress_core::data::SyntheticConfig;
use fedstress_core::federated::{RoundConfig, Strategy, StrategyKind, DEFAULT_MU};
use fedstress_core::heterogeneity::HeterogeneityLevel;
use fedstress_core::metrics::DEFAULT_THRESHOLDS;
use fedstress_core::model::ModelConfig;
use fedstress_core::tensor::AdamWHyper;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticOverrides),
    Bundle(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticOverrides {
    pub case_count: Option<usize>,
    pub slices_per_case: Option<usize>,
    pub slice_size: Option<usize>,
    pub wt_radius: Option<(f64, f64)>,
    pub texture_noise: Option<f64>,
    /// Fixes the generated cases across seeds; by default each seed gets its own cases.
    pub master_seed: Option<u64>,
}

impl SyntheticOverrides {
    pub fn resolve(&self, seed: u64) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            case_count: self.case_count.unwrap_or(d.case_count),
            slices_per_case: self.slices_per_case.unwrap_or(d.slices_per_case),
            slice_size: self.slice_size.unwrap_or(d.slice_size),
            wt_radius: self.wt_radius.unwrap_or(d.wt_radius),
            texture_noise: self.texture_noise.unwrap_or(d.texture_noise),
            master_seed: self.master_seed.unwrap_or(seed),
            ..d
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub base_channels: Option<usize>,
    pub depth: Option<usize>,
    pub dice_smoothing: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum StrategyEntry {
    Name(String),
    Detailed(DetailedStrategy),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetailedStrategy {
    name: String,
    mu: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    strategy: Option<StrategyEntry>,
    strategies: Option<Vec<StrategyEntry>>,
    level: Option<String>,
    levels: Option<Vec<String>>,
    mu: Option<f64>,
    data: Option<String>,
    synthetic: Option<SyntheticOverrides>,
    model: Option<ModelOverrides>,
    clients: Option<usize>,
    rounds: Option<usize>,
    local_epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_epsilon: Option<f64>,
    validation_fraction: Option<f64>,
    dice_eps: Option<f64>,
    thresholds: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    precision: Option<Precision>,
    out: Option<PathBuf>,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub clients: usize,
    #[serde(serialize_with = "serialize_levels")]
    pub levels: Vec<HeterogeneityLevel>,
    #[serde(serialize_with = "serialize_strategies")]
    pub strategies: Vec<Strategy>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub validation_fraction: f64,
    pub dice_eps: f64,
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub model: ModelOverrides,
    pub out: Option<PathBuf>,
}

fn serialize_levels<S: serde::Serializer>(v: &[HeterogeneityLevel], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|l| l.as_str()))
}

fn serialize_strategies<S: serde::Serializer>(v: &[Strategy], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for st in v {
        seq.serialize_element(&serde_json::json!({ "name": st.kind.as_str(), "mu": st.mu }))?;
    }
    seq.end()
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_range(key: &str, value: f64, ok: bool, allowed: &str) -> Result<(), CliError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{key} = {value} is out of range, allowed {allowed}")))
    }
}

fn parse_strategy(entry: &StrategyEntry, default_mu: f64) -> Result<Strategy, CliError> {
    let (name, mu) = match entry {
        StrategyEntry::Name(n) => (n.as_str(), None),
        StrategyEntry::Detailed(d) => (d.name.as_str(), d.mu),
    };
    let kind: StrategyKind = name.parse().map_err(|e: fedstress_core::Error| config_err(format!("strategy: {e}")))?;
    if mu.is_some() && kind != StrategyKind::FedProx {
        return Err(config_err(format!("strategy {name:?} does not take mu")));
    }
    let strategy = match kind {
        StrategyKind::FedAvg => Strategy::fedavg(),
        StrategyKind::FedBn => Strategy::fedbn(),
        StrategyKind::FedProx => Strategy::fedprox(mu.unwrap_or(default_mu)),
    };
    check_range("mu", strategy.mu, strategy.mu >= 0.0, "[0, inf)")?;
    Ok(strategy)
}

fn one_or_many<T: Clone>(key: &str, one: Option<T>, many: Option<Vec<T>>) -> Result<Vec<T>, CliError> {
    match (one, many) {
        (Some(_), Some(_)) => Err(config_err(format!("give either {key:?} or {key:?}s, not both"))),
        (Some(v), None) => Ok(vec![v]),
        (None, Some(v)) if !v.is_empty() => Ok(v),
        (None, Some(_)) => Err(config_err(format!("{key}s must not be empty"))),
        (None, None) => Err(config_err(format!("missing key {key:?} (or {key}s)"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn resolve(raw: RawConfig) -> Result<Self, CliError> {
        let default_mu = raw.mu.unwrap_or(DEFAULT_MU);
        check_range("mu", default_mu, default_mu >= 0.0, "[0, inf)")?;
        let mut strategies = Vec::new();
        for entry in one_or_many("strategy", raw.strategy, raw.strategies)? {
            let s = parse_strategy(&entry, default_mu)?;
            if strategies.iter().any(|t: &Strategy| t.label() == s.label()) {
                return Err(config_err(format!("strategy {} listed twice", s.label())));
            }
            strategies.push(s);
        }
        let mut levels = Vec::new();
        for name in one_or_many("level", raw.level, raw.levels)? {
            let level: HeterogeneityLevel = name.parse().map_err(|e: fedstress_core::Error| config_err(format!("level: {e}")))?;
            if levels.contains(&level) {
                return Err(config_err(format!("level {level} listed twice")));
            }
            levels.push(level);
        }
        levels.sort();

        let data = match raw.data.as_deref() {
            None | Some("synthetic") => DataSource::Synthetic(raw.synthetic.unwrap_or_default()),
            Some(path) => {
                if raw.synthetic.is_some() {
                    return Err(config_err("synthetic overrides given with a bundle data source"));
                }
                DataSource::Bundle(PathBuf::from(path))
            }
        };

        let hyper = AdamWHyper::default();
        let round_defaults = RoundConfig::default();
        let cfg = Self {
            data,
            clients: raw.clients.unwrap_or(4),
            levels,
            strategies,
            rounds: raw.rounds.unwrap_or(round_defaults.rounds),
            local_epochs: raw.local_epochs.unwrap_or(round_defaults.local_epochs),
            batch_size: raw.batch_size.unwrap_or(round_defaults.batch_size),
            learning_rate: raw.learning_rate.unwrap_or(hyper.lr),
            weight_decay: raw.weight_decay.unwrap_or(hyper.weight_decay),
            beta1: raw.beta1.unwrap_or(hyper.beta1),
            beta2: raw.beta2.unwrap_or(hyper.beta2),
            adam_epsilon: raw.adam_epsilon.unwrap_or(hyper.epsilon),
            validation_fraction: raw.validation_fraction.unwrap_or(0.2),
            dice_eps: raw.dice_eps.unwrap_or(round_defaults.dice_eps),
            thresholds: raw.thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec()),
            seeds: raw.seeds.unwrap_or_else(|| vec![0]),
            precision: raw.precision.unwrap_or(Precision::F32),
            model: raw.model.unwrap_or_default(),
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let count = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(config_err(format!("{key} = {v} is out of range, allowed [1, inf)")))
            }
        };
        count("clients", self.clients)?;
        count("rounds", self.rounds)?;
        count("local_epochs", self.local_epochs)?;
        count("batch_size", self.batch_size)?;
        check_range("learning_rate", self.learning_rate, self.learning_rate > 0.0, "(0, inf)")?;
        check_range("weight_decay", self.weight_decay, self.weight_decay >= 0.0, "[0, inf)")?;
        check_range("beta1", self.beta1, (0.0..1.0).contains(&self.beta1), "[0, 1)")?;
        check_range("beta2", self.beta2, (0.0..1.0).contains(&self.beta2), "[0, 1)")?;
        check_range("adam_epsilon", self.adam_epsilon, self.adam_epsilon > 0.0, "(0, inf)")?;
        let f = self.validation_fraction;
        check_range("validation_fraction", f, f > 0.0 && f < 1.0, "(0, 1)")?;
        check_range("dice_eps", self.dice_eps, self.dice_eps >= 0.0, "[0, inf)")?;
        for &t in &self.thresholds {
            check_range("thresholds", t, (0.0..=1.0).contains(&t), "[0, 1]")?;
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.resolve(0).validate().map_err(|e| config_err(format!("synthetic: {e}")))?;
        }
        self.model_config(self.slice_size_hint()).validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(())
    }

    fn slice_size_hint(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.resolve(0).slice_size,
            DataSource::Bundle(_) => ModelConfig::default().slice_size,
        }
    }

    pub fn model_config(&self, slice_size: usize) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            base_channels: self.model.base_channels.unwrap_or(d.base_channels),
            depth: self.model.depth.unwrap_or(d.depth),
            dice_smoothing: self.model.dice_smoothing.unwrap_or(d.dice_smoothing),
            slice_size,
            ..d
        }
    }

    pub fn round_config(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optimizer: AdamWHyper {
                lr: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.adam_epsilon,
                weight_decay: self.weight_decay,
            },
            experiment_seed: seed,
            dice_eps: self.dice_eps,
        }
    }
}
