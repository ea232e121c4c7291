//! Model hyperparameters and the plain-text config file format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("config line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for '{key}': {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
}

/// One input channel of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn tag(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }

    /// Index into a dataset's `dims` array.
    pub fn dim_index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }
}

/// Which modalities a model consumes; at least two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalitySet {
    text: bool,
    audio: bool,
    visual: bool,
}

impl ModalitySet {
    pub fn all() -> Self {
        Self {
            text: true,
            audio: true,
            visual: true,
        }
    }

    pub fn of(modalities: &[Modality]) -> Result<Self, ConfigError> {
        let set: BTreeSet<_> = modalities.iter().copied().collect();
        if set.len() < 2 {
            return Err(ConfigError::Invalid(format!(
                "a model needs at least two modalities, got {}",
                set.len()
            )));
        }
        Ok(Self {
            text: set.contains(&Modality::Text),
            audio: set.contains(&Modality::Audio),
            visual: set.contains(&Modality::Visual),
        })
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }

    /// Active modalities in canonical (t, a, v) order.
    pub fn members(&self) -> Vec<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .filter(|&m| self.contains(m))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.members().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.members() {
            write!(f, "{}", m.tag())?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut members = Vec::new();
        for ch in s.chars() {
            match ch {
                't' => members.push(Modality::Text),
                'a' => members.push(Modality::Audio),
                'v' => members.push(Modality::Visual),
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown modality tag '{other}' (expected t, a, v)"
                    )))
                }
            }
        }
        ModalitySet::of(&members)
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ModalitySet> for String {
    fn from(set: ModalitySet) -> String {
        set.to_string()
    }
}

/// How aggregated neighbor messages combine with a node's previous state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sum,
    Concat,
    SumProduct,
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UpdateRule::Sum => "sum",
            UpdateRule::Concat => "concat",
            UpdateRule::SumProduct => "sum_product",
        };
        f.write_str(s)
    }
}

impl FromStr for UpdateRule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(UpdateRule::Sum),
            "concat" => Ok(UpdateRule::Concat),
            "sum_product" | "sump" => Ok(UpdateRule::SumProduct),
            other => Err(ConfigError::Invalid(format!(
                "unknown update rule '{other}' (expected sum, concat, sum_product)"
            ))),
        }
    }
}

/// All model and training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared width D of every modality after pre-encoding.
    pub model_dim: usize,
    /// Attention heads in both graph attention and cross-modal attention.
    pub heads: usize,
    /// Graph-attention layers per modality (L).
    pub graph_layers: usize,
    /// Cross-modal attention layers (K).
    pub cross_layers: usize,
    /// Past context window size.
    pub window_past: usize,
    /// Future context window size.
    pub window_future: usize,
    /// Speaker embedding trade-off factor.
    pub speaker_scale: f64,
    pub update_rule: UpdateRule,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before early stop.
    pub patience: usize,
    pub seed: u64,
    pub modalities: ModalitySet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            graph_layers: 3,
            cross_layers: 4,
            window_past: 4,
            window_future: 4,
            speaker_scale: 1.6,
            update_rule: UpdateRule::SumProduct,
            dropout: 0.1,
            lr: 1e-5,
            weight_decay: 1e-5,
            batch_size: 8,
            max_epochs: 100,
            patience: 15,
            seed: 1,
            modalities: ModalitySet::all(),
        }
    }
}

impl ModelConfig {
    /// Message/scoring width of one graph-attention head. Sum and Concat
    /// updates work in D/heads; the sum-product update needs the message to
    /// be elementwise-compatible with the full-width node state, so its
    /// messages are full width.
    pub fn message_dim(&self) -> usize {
        match self.update_rule {
            UpdateRule::SumProduct => self.model_dim,
            _ => self.model_dim / self.heads,
        }
    }

    /// Per-head output width; heads concatenate back to the model width.
    pub fn head_out_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Feedforward hidden width inside cross-modal blocks.
    pub fn feedforward_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Classifier hidden width.
    pub fn classifier_dim(&self) -> usize {
        self.model_dim
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.model_dim == 0 || self.heads == 0 {
            return fail("model_dim and heads must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.model_dim % 2 != 0 {
            return fail(format!(
                "model_dim {} must be even (bidirectional text encoder)",
                self.model_dim
            ));
        }
        if self.update_rule == UpdateRule::SumProduct && self.message_dim() != self.model_dim {
            return fail(
                "sum_product updating needs message width equal to the model width".into(),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.speaker_scale < 0.0 {
            return fail(format!("speaker_scale {} negative", self.speaker_scale));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.modalities.len() < 2 {
            return fail("at least two modalities required".into());
        }
        Ok(())
    }

    /// Hyperparameters used for the dyadic benchmark corpus: 3 graph layers,
    /// 4 cross-modal layers, speaker factor 1.6, lr 1e-5, batch 8.
    pub fn iemocap_profile() -> Self {
        Self {
            graph_layers: 3,
            cross_layers: 4,
            speaker_scale: 1.6,
            lr: 1e-5,
            batch_size: 8,
            window_past: 16,
            window_future: 16,
            ..Self::default()
        }
    }

    /// Hyperparameters used for the multi-party benchmark corpus: 2 graph
    /// layers, 2 cross-modal layers, speaker factor 0.6, lr 1e-5, batch 32.
    pub fn meld_profile() -> Self {
        Self {
            graph_layers: 2,
            cross_layers: 2,
            speaker_scale: 0.6,
            lr: 1e-5,
            batch_size: 32,
            window_past: 4,
            window_future: 4,
            ..Self::default()
        }
    }
}

/// Plain-text `key = value` config with `#` comments. Unknown keys are
/// rejected. Keys mirror [`ModelConfig`] plus optional `train_data`,
/// `valid_data`, `eval_data` and `out_dir` paths.
#[derive(Debug, Clone, Default)]
pub struct CliConfigFile {
    pub config: ModelConfig,
    pub train_data: Option<String>,
    pub valid_data: Option<String>,
    pub eval_data: Option<String>,
    pub out_dir: Option<String>,
}

impl CliConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut file = CliConfigFile::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.trim().to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            file.apply(line, key, value)?;
        }
        file.config.validate()?;
        Ok(file)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: e.to_string(),
            })
        }
        let c = &mut self.config;
        match key {
            "model_dim" => c.model_dim = parse(line, key, value)?,
            "heads" => c.heads = parse(line, key, value)?,
            "graph_layers" => c.graph_layers = parse(line, key, value)?,
            "cross_layers" => c.cross_layers = parse(line, key, value)?,
            "window_past" => c.window_past = parse(line, key, value)?,
            "window_future" => c.window_future = parse(line, key, value)?,
            "speaker_scale" => c.speaker_scale = parse(line, key, value)?,
            "update_rule" => c.update_rule = parse(line, key, value)?,
            "dropout" => c.dropout = parse(line, key, value)?,
            "lr" => c.lr = parse(line, key, value)?,
            "weight_decay" => c.weight_decay = parse(line, key, value)?,
            "batch_size" => c.batch_size = parse(line, key, value)?,
            "max_epochs" => c.max_epochs = parse(line, key, value)?,
            "patience" => c.patience = parse(line, key, value)?,
            "seed" => c.seed = parse(line, key, value)?,
            "modalities" => c.modalities = parse(line, key, value)?,
            "train_data" => self.train_data = Some(value.to_string()),
            "valid_data" => self.valid_data = Some(value.to_string()),
            "eval_data" => self.eval_data = Some(value.to_string()),
            "out_dir" => self.out_dir = Some(value.to_string()),
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Renders the model section back to config-file text.
    pub fn render(config: &ModelConfig) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("model_dim", config.model_dim.to_string());
        push("heads", config.heads.to_string());
        push("graph_layers", config.graph_layers.to_string());
        push("cross_layers", config.cross_layers.to_string());
        push("window_past", config.window_past.to_string());
        push("window_future", config.window_future.to_string());
        push("speaker_scale", config.speaker_scale.to_string());
        push("update_rule", config.update_rule.to_string());
        push("dropout", config.dropout.to_string());
        push("lr", config.lr.to_string());
        push("weight_decay", config.weight_decay.to_string());
        push("batch_size", config.batch_size.to_string());
        push("max_epochs", config.max_epochs.to_string());
        push("patience", config.patience.to_string());
        push("seed", config.seed.to_string());
        push("modalities", config.modalities.to_string());
        out
    }
}
