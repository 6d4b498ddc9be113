//! The assembled speech LM: encoder features → normaliser → QPMapper →
//! audio rows inside a chat-formatted LM input.

use crate::audio::Waveform;
use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::corpus::checkpoint::Checkpoint;
use crate::corpus::tokenizer::Tokenizer;
use crate::data;
use crate::error::{Error, Result};
use crate::lm::{self, AssembledInput, LMConfig, Layout};
use crate::paralinguistics::{self, BinnedFeatures, Gender, TertileBins};
use crate::params::{Bound, ParamStore, ENCODER_PREFIX, LORA_PREFIX};
use crate::prompts::{system_prompt, TaskSample, GUIDE_PHRASE};
use crate::qpmapper;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SpeechLm {
    pub config: RunConfig,
    pub params: ParamStore,
    pub tokenizer: Tokenizer,
    pub bins: Option<TertileBins>,
}

impl SpeechLm {
    /// Rebuilds the model from a checkpoint, using the configuration stored
    /// inside it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml(&ckpt.config_text)?;
        if config.hash() != ckpt.config_hash {
            return Err(Error::Config(format!(
                "checkpoint records config hash {} but its config text hashes to {}",
                ckpt.config_hash,
                config.hash()
            )));
        }
        Ok(SpeechLm {
            config,
            params: ckpt.params.clone(),
            tokenizer: ckpt.tokenizer.clone(),
            bins: ckpt.bins.clone(),
        })
    }

    pub fn lm_config(&self) -> LMConfig {
        self.config.lm.lm_config(self.tokenizer.vocab_size())
    }

    /// Adapter scale once adapters have been injected.
    pub fn lora_scale(&self) -> Option<f64> {
        self.params
            .names()
            .any(|n| n.starts_with(LORA_PREFIX))
            .then(|| self.config.lora.scale())
    }

    pub fn assemble(&self, sample: &TaskSample, answer_prefix: &str, with_target: bool) -> Result<AssembledInput> {
        assemble_sample(&self.tokenizer, &self.config, sample, answer_prefix, with_target)
    }

    /// Audio rows for already-normalised features, evaluated off-graph.
    pub fn audio_block(&self, features: &Tensor) -> Result<Tensor> {
        let seq = crate::audio::FeatureSequence::new(features.clone(), "")?;
        Ok(qpmapper::downsample(&seq, &self.params, &self.config.qpmapper)?.values)
    }

    /// Normalised features and tertile labels for a raw waveform.
    pub fn prepare_waveform(&self, w: &Waveform, gender: Gender) -> Result<(Tensor, Option<BinnedFeatures>)> {
        let enc_params = self.params.subset(ENCODER_PREFIX);
        let enc = enc_params.names().next().is_some().then_some(&enc_params);
        let raw = crate::audio::encode(w, &self.config.encoder, enc)?.values;
        let features = data::normalize(&raw, &self.params)?;
        let para = paralinguistics::extract(w, gender, &self.config.pitch)?;
        Ok((features, self.bins.as_ref().map(|b| b.bin(&para))))
    }
}

/// Graph form of the audio path for one utterance's normalised features.
pub fn audio_rows(g: &mut Graph, p: &Bound, features: &Tensor, cfg: &qpmapper::QPMapperConfig) -> Var {
    let x = g.constant(features.clone());
    qpmapper::forward(g, p, x, cfg)
}

pub fn assemble_sample(
    tok: &Tokenizer,
    config: &RunConfig,
    sample: &TaskSample,
    answer_prefix: &str,
    with_target: bool,
) -> Result<AssembledInput> {
    let layout = Layout {
        id: &sample.id,
        system: system_prompt(),
        guide: GUIDE_PHRASE,
        prompt: &sample.prompt,
        aux: &sample.aux,
        answer_prefix,
        target: if with_target { &sample.target } else { "" },
        task: sample.task,
    };
    lm::assemble(&layout, config.qpmapper.n_q, tok, config.lm.max_seq_len)
}
