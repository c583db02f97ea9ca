//! Run configuration: defaults, the flat `key = value` file format, and
//! seed precedence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::embed::EmbeddingSpec;
use crate::error::{Error, Result};
use crate::mention::AttentionKind;
use crate::parallel::Exec;

pub const SEED_ENV: &str = "FINETYPE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mention,
    E2e,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mention" => Ok(ModelKind::Mention),
            "e2e" | "e2eet" => Ok(ModelKind::E2e),
            other => Err(Error::Usage(format!("unknown model {other:?} (expected mention or e2e)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mention => "mention",
            ModelKind::E2e => "e2e",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Ignored by the end-to-end model.
    pub attention: AttentionKind,
    pub embedding: EmbeddingSpec,
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub window: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without a dev micro-F1 improvement tolerated before stopping.
    pub patience: usize,
    pub exec: Exec,
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        TrainConfig {
            model,
            attention: AttentionKind::Dynamic,
            embedding: EmbeddingSpec::Uniform { dim: 768, vocab: None },
            lr: 1e-4,
            hidden: 768,
            dropout: 0.5,
            batch_size: match model {
                ModelKind::Mention => 100,
                ModelKind::E2e => 10,
            },
            window: 10,
            max_seq_len: 100,
            seed: 0,
            max_epochs: 50,
            patience: 5,
            exec: Exec::default(),
        }
    }

    /// Builds a config from key-value pairs applied in order. `model` is
    /// read first because it picks the default batch size.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let model = match pairs.iter().rev().find(|(k, _)| k == "model") {
            Some((_, v)) => v.parse()?,
            None => ModelKind::Mention,
        };
        let mut cfg = TrainConfig::new(model);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "model" => self.model = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "embedding" => self.embedding = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "window" | "window_W" => self.window = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "exec" => {
                self.exec = match value {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    other => return Err(Error::Config(format!("exec: expected parallel or sequential, got {other:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.hidden == 0 || self.batch_size == 0 || self.window == 0 || self.max_seq_len == 0 {
            return bad("hidden, batch_size, window and max_seq_len must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.model.to_string()),
            ("attention", self.attention.to_string()),
            ("embedding", self.embedding.to_string()),
            ("lr", self.lr.to_string()),
            ("hidden", self.hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("window", self.window.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("seed", self.seed.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("exec", match self.exec {
                Exec::Parallel => "parallel".to_string(),
                Exec::Sequential => "sequential".to_string(),
            }),
        ]
    }
}

/// Same `key = value` layout that [`parse_pairs`] reads back.
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

/// Layers the config sources, later ones winning: built-in defaults, the
/// config file, the `FINETYPE_SEED` environment value, then explicit
/// command-line settings.
pub fn resolve(
    file: &[(String, String)],
    env_seed: Option<&str>,
    cli: &[(String, String)],
) -> Result<TrainConfig> {
    let mut pairs = file.to_vec();
    if let Some(s) = env_seed {
        pairs.push(("seed".into(), s.trim().to_string()));
    }
    pairs.extend_from_slice(cli);
    TrainConfig::from_pairs(&pairs)
}
