//! Flat key-value run configuration.
//!
//! Precedence, lowest to highest: built-in defaults for the phase, the config
//! file, `BIMODAL_*` environment variables (paths only), then `--set key=value`
//! overrides. Hyper-parameter keys follow the rows of the published training
//! table (`learning_rate`, `number_of_multicrop`, `mask_ratio`, ...).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{TextEncoderConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunPhase {
    Mae,
    Contrastive,
}

impl fmt::Display for RunPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunPhase::Mae => "mae",
            RunPhase::Contrastive => "contrastive",
        })
    }
}

impl FromStr for RunPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(RunPhase::Mae),
            "contrastive" => Ok(RunPhase::Contrastive),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phase: RunPhase,
    pub seed: u64,
    /// Data-preparation threads; 0 is the deterministic serial mode.
    pub workers: usize,

    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
    /// MAE export that initializes the vision tower of the contrastive phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,

    pub vocab_size: usize,
    pub max_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub local_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub embed_dim: usize,

    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: String,
    pub warmup_steps: u64,
    pub epochs: u64,
    /// Fixed step budget; overrides `epochs` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub number_of_multicrop: usize,
    pub local_i2t_only: bool,
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_width: Option<usize>,
    pub decoder_heads: usize,
    pub norm_pix_loss: bool,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "phase",
    "seed",
    "workers",
    "manifest",
    "vocab",
    "checkpoint_dir",
    "log_dir",
    "init_checkpoint",
    "vocab_size",
    "max_len",
    "image_size",
    "patch_size",
    "local_size",
    "vision_width",
    "vision_layers",
    "vision_heads",
    "text_width",
    "text_layers",
    "text_heads",
    "embed_dim",
    "optimizer",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "schedule",
    "warmup_steps",
    "epochs",
    "steps",
    "number_of_multicrop",
    "local_i2t_only",
    "mask_ratio",
    "decoder_layers",
    "decoder_width",
    "decoder_heads",
    "norm_pix_loss",
];

/// Environment variables that may override path keys.
pub const PATH_ENV: &[(&str, &str)] = &[
    ("BIMODAL_MANIFEST", "manifest"),
    ("BIMODAL_VOCAB", "vocab"),
    ("BIMODAL_CHECKPOINT_DIR", "checkpoint_dir"),
    ("BIMODAL_LOG_DIR", "log_dir"),
    ("BIMODAL_INIT_CHECKPOINT", "init_checkpoint"),
];

impl RunConfig {
    /// Desk-scale defaults for `phase`, sized for the toy dataset on one CPU core.
    pub fn desk(phase: RunPhase) -> Self {
        let v = VisionEncoderConfig::desk();
        let mae = MaeConfig::full_scale();
        let (learning_rate, weight_decay, warmup_steps, steps) = match phase {
            RunPhase::Mae => (1.5e-3, 0.05, 20, Some(200)),
            RunPhase::Contrastive => (3e-3, 0.1, 200, Some(2000)),
        };
        Self {
            phase,
            seed: 0,
            workers: 0,
            manifest: "data/toy/manifest.tsv".into(),
            vocab: "runs/vocab.json".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            log_dir: "runs/logs".into(),
            init_checkpoint: None,
            vocab_size: 512,
            max_len: 16,
            image_size: v.image_size,
            patch_size: v.patch_size,
            local_size: v.local_size,
            vision_width: v.width,
            vision_layers: v.layers,
            vision_heads: v.heads,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            embed_dim: v.embed_dim,
            optimizer: "adamw".into(),
            learning_rate,
            weight_decay,
            batch_size: 64,
            schedule: "cosine".into(),
            warmup_steps,
            epochs: 1,
            steps,
            number_of_multicrop: 1,
            local_i2t_only: false,
            mask_ratio: mae.mask_ratio,
            decoder_layers: mae.decoder_layers,
            decoder_width: None,
            decoder_heads: mae.decoder_heads,
            norm_pix_loss: false,
        }
    }

    /// Full-scale geometry and the published hyper-parameters for `phase`.
    pub fn full_scale(phase: RunPhase) -> Self {
        let v = VisionEncoderConfig::full_scale();
        let t = TextEncoderConfig::full_scale();
        let mut c = Self::desk(phase);
        c.vocab_size = t.vocab_size;
        c.max_len = t.max_len;
        c.image_size = v.image_size;
        c.patch_size = v.patch_size;
        c.local_size = v.local_size;
        c.vision_width = v.width;
        c.vision_layers = v.layers;
        c.vision_heads = v.heads;
        c.text_width = t.width;
        c.text_layers = t.layers;
        c.text_heads = t.heads;
        c.embed_dim = v.embed_dim;
        c.steps = None;
        match phase {
            RunPhase::Mae => {
                let m = MaeConfig::full_scale();
                c.learning_rate = m.learning_rate;
                c.weight_decay = m.weight_decay;
                c.batch_size = m.batch_size;
                c.warmup_steps = m.warmup_steps;
                c.epochs = m.epochs;
            }
            RunPhase::Contrastive => {
                let tr = TrainConfig::full_scale();
                c.learning_rate = tr.learning_rate;
                c.weight_decay = tr.weight_decay;
                c.batch_size = tr.batch_size;
                c.warmup_steps = tr.warmup_steps;
                c.epochs = tr.epochs;
                c.number_of_multicrop = tr.num_local_views;
            }
        }
        c
    }

    pub fn vision(&self) -> VisionEncoderConfig {
        VisionEncoderConfig {
            patch_size: self.patch_size,
            image_size: self.image_size,
            local_size: self.local_size,
            width: self.vision_width,
            layers: self.vision_layers,
            heads: self.vision_heads,
            embed_dim: self.embed_dim,
        }
    }

    /// Text tower for a vocabulary of `vocab_size` ids, specials included.
    pub fn text(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            layers: self.text_layers,
            width: self.text_width,
            heads: self.text_heads,
            max_len: self.max_len,
            vocab_size,
            embed_dim: self.embed_dim,
        }
    }

    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            optimizer: self.optimizer.clone(),
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            epochs: self.epochs,
            steps: self.steps,
            mask_ratio: self.mask_ratio,
            decoder_layers: self.decoder_layers,
            decoder_width: self.decoder_width,
            decoder_heads: self.decoder_heads,
            norm_pix_loss: self.norm_pix_loss,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            warmup_steps: self.warmup_steps,
            epochs: self.epochs,
            steps: self.steps,
            num_local_views: self.number_of_multicrop,
            local_i2t_only: self.local_i2t_only,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision().validate()?;
        match self.phase {
            RunPhase::Mae => self.mae().validate(&self.vision()),
            RunPhase::Contrastive => self.train().validate(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::UnknownConfigKey(key.to_string()))
    }
}

/// `key=value`; the value is read as a TOML literal, or as a bare string.
fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let key = key.trim();
    check_key(key)?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sources for one configuration, applied in precedence order by [`ConfigSources::resolve`].
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file_text: Option<String>,
    pub env: Vec<(String, String)>,
    pub overrides: Vec<String>,
}

impl ConfigSources {
    pub fn from_path(path: Option<&Path>) -> Result<Self> {
        let file_text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let env = PATH_ENV
            .iter()
            .filter_map(|(var, _)| std::env::var(var).ok().map(|v| (var.to_string(), v)))
            .collect();
        Ok(Self {
            file_text,
            env,
            overrides: Vec::new(),
        })
    }

    pub fn with_overrides(mut self, overrides: &[String]) -> Self {
        self.overrides.extend(overrides.iter().cloned());
        self
    }

    /// The `phase` declared by the config file, if any.
    pub fn file_phase(&self) -> Result<Option<RunPhase>> {
        let Some(text) = &self.file_text else {
            return Ok(None);
        };
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        file.get("phase")
            .map(|p| p.as_str().ok_or_else(|| Error::Config("`phase` must be a string".into()))?.parse())
            .transpose()
    }

    /// Resolve for a command that runs `phase`.
    pub fn resolve(&self, phase: RunPhase) -> Result<RunConfig> {
        let file: toml::Table = match &self.file_text {
            Some(text) => text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?,
            None => toml::Table::new(),
        };
        for key in file.keys() {
            check_key(key)?;
        }
        if let Some(p) = file.get("phase") {
            let found: RunPhase = p
                .as_str()
                .ok_or_else(|| Error::Config("`phase` must be a string".into()))?
                .parse()?;
            if found != phase {
                return Err(Error::PhaseMismatch {
                    expected: phase.to_string(),
                    found: found.to_string(),
                });
            }
        }
        let mut table = toml::Table::try_from(RunConfig::desk(phase)).map_err(|e| Error::Config(e.to_string()))?;
        // An epoch budget without a step budget replaces the default step count.
        if file.contains_key("epochs") && !file.contains_key("steps") {
            table.remove("steps");
        }
        table.extend(file);
        for (var, value) in &self.env {
            let key = PATH_ENV
                .iter()
                .find(|(v, _)| v == var)
                .map(|(_, k)| *k)
                .ok_or_else(|| Error::Config(format!("`{var}` is not a path override")))?;
            table.insert(key.into(), toml::Value::String(value.clone()));
        }
        for o in &self.overrides {
            let (key, value) = parse_override(o)?;
            if key == "phase" && value.as_str() != Some(&phase.to_string()) {
                return Err(Error::Config(format!("cannot override phase for a {phase} command")));
            }
            if key == "epochs" && !self.overrides.iter().any(|o| o.trim_start().starts_with("steps")) {
                table.remove("steps");
            }
            table.insert(key, value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fail with a data error when an input the run needs is missing.
pub fn require_input(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} `{}` does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ErrorKind;

    fn sources(text: &str) -> ConfigSources {
        ConfigSources {
            file_text: Some(text.into()),
            ..Default::default()
        }
    }

    #[test]
    fn keys_match_fields() {
        let mut c = RunConfig::desk(RunPhase::Contrastive);
        c.init_checkpoint = Some("x".into());
        c.decoder_width = Some(8);
        let table = toml::Table::try_from(c).unwrap();
        let mut have: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut want = KEYS.to_vec();
        have.sort();
        want.sort();
        assert_eq!(have, want);
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = sources("learning_rte = 0.1\n").resolve(RunPhase::Contrastive).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config);
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn precedence() {
        let s = ConfigSources {
            file_text: Some("learning_rate = 0.5\nmanifest = \"a.tsv\"\nseed = 3\n".into()),
            env: vec![("BIMODAL_MANIFEST".into(), "b.tsv".into())],
            overrides: vec!["seed=9".into(), "optimizer=adamw".into()],
        };
        let c = s.resolve(RunPhase::Contrastive).unwrap();
        assert_eq!(c.learning_rate, 0.5);
        assert_eq!(c.manifest, PathBuf::from("b.tsv"));
        assert_eq!(c.seed, 9);
        assert_eq!(c.batch_size, RunConfig::desk(RunPhase::Contrastive).batch_size);
    }

    #[test]
    fn phase_must_match_command() {
        let err = sources("phase = \"mae\"\n").resolve(RunPhase::Contrastive).unwrap_err();
        assert!(matches!(err, Error::PhaseMismatch { .. }));
    }

    #[test]
    fn echo_roundtrips() {
        for phase in [RunPhase::Mae, RunPhase::Contrastive] {
            let c = RunConfig::desk(phase);
            let back = sources(&c.to_toml().unwrap()).resolve(phase).unwrap();
            assert_eq!(back, c);
            RunConfig::full_scale(phase).validate().unwrap();
        }
    }

    #[test]
    fn bad_override() {
        let s = ConfigSources::default().with_overrides(&["batch_sise=3".into()]);
        assert!(matches!(s.resolve(RunPhase::Mae), Err(Error::UnknownConfigKey(k)) if k == "batch_sise"));
        let s = ConfigSources::default().with_overrides(&["batch_size=1".into()]);
        assert!(s.resolve(RunPhase::Contrastive).is_err());
    }
}
