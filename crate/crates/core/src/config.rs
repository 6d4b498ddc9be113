//! Run configuration: one TOML file fully determines a run together with
//! the corpus seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::EncoderSpec;
use crate::corpus::CorpusSpec;
use crate::curriculum::PhasePlan;
use crate::error::{Error, Result};
use crate::lm::{LMConfig, LoraConfig, Phase};
use crate::paralinguistics::PitchParams;
use crate::prompts::{EmotionCode, HintSpec};
use crate::qpmapper::QPMapperConfig;

/// Environment variable naming the directory searched for relative config
/// paths that do not exist under the working directory.
pub const CONFIG_DIR_ENV: &str = "SERLM_CONFIG_DIR";

/// LM dimensions; the vocabulary size comes from the fitted tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub ff_mult: f64,
    pub vocab_limit: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            d_llm: 128,
            layers: 4,
            heads: 4,
            max_seq_len: 512,
            ff_mult: 2.0,
            vocab_limit: 1200,
        }
    }
}

impl LmSection {
    pub fn lm_config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            vocab_size,
            d_llm: self.d_llm,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
            ff_mult: self.ff_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub pool_size: usize,
    #[serde(default)]
    pub hints: HintSpec,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            pool_size: 20,
            hints: HintSpec::default(),
        }
    }
}

/// Text-only pretraining that gives the frozen LM its language prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Masked-reconstruction steps for the trainable encoder, if used.
    #[serde(default)]
    pub encoder_steps: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 300,
            lr: 3e-3,
            batch: 16,
            encoder_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub micro_batch: usize,
    pub accumulation: usize,
    pub grad_clip: f64,
    pub warmup_fraction: f64,
    /// Restart the learning-rate schedule at the start of P3 as well as P2.
    pub restart_schedule_p3: bool,
    pub patience: usize,
    pub p1: PhasePlan,
    pub p2: PhasePlan,
    pub p3: PhasePlan,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            micro_batch: 16,
            accumulation: 2,
            grad_clip: 1.0,
            warmup_fraction: 0.1,
            restart_schedule_p3: true,
            patience: 2,
            p1: PhasePlan::new(3, 2e-3, 0.01),
            p2: PhasePlan::new(3, 1e-3, 0.01),
            p3: PhasePlan::new(10, 1e-3, 0.01),
        }
    }
}

impl TrainSection {
    pub fn plan(&self, phase: Phase) -> &PhasePlan {
        match phase {
            Phase::P1 => &self.p1,
            Phase::P2 => &self.p2,
            Phase::P3 => &self.p3,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscriptSource {
    Reference,
    ModelAsr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub transcript_source: TranscriptSource,
    /// Restrict evaluation to these labels; all classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<EmotionCode>>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: 40,
            transcript_source: TranscriptSource::Reference,
            classes: None,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the config file's directory.
    pub out_dir: PathBuf,
    /// Corpus directory, relative to the config file's directory.
    pub corpus_dir: PathBuf,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub pitch: PitchParams,
    #[serde(default)]
    pub qpmapper: QPMapperConfig,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory the relative paths above resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: PathBuf::from("run"),
            corpus_dir: PathBuf::from("corpus"),
            corpus: CorpusSpec::default(),
            encoder: EncoderSpec::default(),
            pitch: PitchParams::default(),
            qpmapper: QPMapperConfig::default(),
            lm: LmSection::default(),
            lora: LoraConfig::default(),
            prompts: PromptSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.qpmapper.validate()?;
        self.lm.lm_config(1).validate()?;
        self.lora.validate()?;
        self.prompts.hints.validate()?;
        if self.qpmapper.d_llm != self.lm.d_llm {
            return Err(Error::Config(format!(
                "qpmapper.d_llm ({}) must equal lm.d_llm ({})",
                self.qpmapper.d_llm, self.lm.d_llm
            )));
        }
        if self.train.micro_batch == 0 || self.train.accumulation == 0 {
            return Err(Error::Config("micro_batch and accumulation must be positive".into()));
        }
        if !(self.train.warmup_fraction > 0.0 && self.train.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.train.warmup_fraction
            )));
        }
        for phase in Phase::ALL {
            self.train.plan(phase).validate(phase)?;
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Reads `path`, falling back to `$SERLM_CONFIG_DIR/path` for relative
    /// paths that do not exist as given.
    pub fn load(path: &Path) -> Result<Self> {
        let resolved = resolve_config_path(path);
        let text = std::fs::read_to_string(&resolved)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", resolved.display())))?;
        let mut c = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", resolved.display())),
            other => other,
        })?;
        c.base_dir = base_dir_of(&resolved);
        Ok(c)
    }

    /// Like [`RunConfig::load`], then applies `key.path=value` overrides;
    /// values parse as TOML and fall back to plain strings.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::load(path);
        }
        let resolved = resolve_config_path(path);
        let text = std::fs::read_to_string(&resolved)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", resolved.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", resolved.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut c: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{} with overrides: {e}", resolved.display())))?;
        c.validate()?;
        c.base_dir = base_dir_of(&resolved);
        Ok(c)
    }

    /// Hash of the canonical serialisation; recorded in every artifact.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.base_dir.join(&self.corpus_dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.out_dir)
    }
}

fn base_dir_of(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn resolve_config_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn any_change_moves_the_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.p3.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut c = RunConfig::default();
        c.qpmapper.d_llm = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let text = RunConfig::default().to_toml() + "\nbogus = 1\n";
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, RunConfig::default().to_toml()).unwrap();
        let c = RunConfig::load_with_overrides(
            &path,
            &[
                "train.p3.max_epochs=4".into(),
                "out_dir=elsewhere".into(),
                "eval.transcript_source=model-asr".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.p3.max_epochs, 4);
        assert_eq!(c.out_dir(), dir.path().join("elsewhere"));
        assert_eq!(c.eval.transcript_source, TranscriptSource::ModelAsr);
        assert!(RunConfig::load_with_overrides(&path, &["train.p3.max_epochs=1".into()]).is_err());
        assert!(RunConfig::load_with_overrides(&path, &["nonsense".into()]).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
        assert_eq!(err.exit_code(), 2);
    }
}
