//! Text-only pretraining of the base LM, standing in for a pretrained
//! backbone: it learns the chat layout, the answer grammar and the
//! transcript distribution, but never sees a real emotion label.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lr_multiplier;
use super::optim::{adamw_step, clip_grad_norm, OptimState};
use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::corpus::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::lm::{batch_nll, BatchItem, ForwardCtx, LMConfig};
use crate::model::assemble_sample;
use crate::paralinguistics::{BinnedFeatures, Feature, Gender, Level};
use crate::params::{ParamStore, LM_PREFIX};
use crate::prompts::{build_sample, EmotionCode, HintSpec, PromptSet, Task, UtteranceView};
use crate::tensor::Tensor;

const WARMUP_FRACTION: f64 = 0.1;
const WEIGHT_DECAY: f64 = 0.01;
const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean target NLL of the first and last batches.
    pub first_loss: f64,
    pub final_loss: f64,
}

fn random_binned(rng: &mut ChaCha8Rng) -> BinnedFeatures {
    let levels = [Level::Low, Level::Medium, Level::High];
    BinnedFeatures {
        labels: Feature::ALL
            .iter()
            .map(|&f| (f, *levels.choose(rng).expect("three levels")))
            .collect(),
        gender: *[Gender::Male, Gender::Female].choose(rng).expect("two genders"),
    }
}

/// Updates every `lm.` tensor of `params` in place.
pub fn pretrain_base_lm(
    params: &mut ParamStore,
    lm_cfg: &LMConfig,
    tok: &Tokenizer,
    config: &RunConfig,
    transcripts: &[String],
    prompts: &PromptSet,
    seed: u64,
) -> Result<PretrainReport> {
    let pc = &config.pretrain;
    if transcripts.is_empty() {
        return Err(Error::InsufficientData("no transcripts for LM pretraining".into()));
    }
    let mut report = PretrainReport {
        steps: pc.steps,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    if pc.steps == 0 {
        return Ok(report);
    }
    let codes: &[EmotionCode] = &config.corpus.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimState::default();
    let silence = Tensor::zeros(config.qpmapper.n_q, lm_cfg.d_llm);
    for step in 0..pc.steps {
        let mut inputs = Vec::with_capacity(pc.batch);
        for i in 0..pc.batch {
            let task = *Task::ALL.choose(&mut rng).expect("three tasks");
            let transcript = transcripts.choose(&mut rng).expect("non-empty");
            let emotion = *codes.choose(&mut rng).expect("validated class list");
            let with_hints = task != Task::Asr && rng.random_bool(0.5);
            let binned = with_hints.then(|| random_binned(&mut rng));
            let hints = HintSpec {
                n_shot: if with_hints { rng.random_range(0..=2) } else { 0 },
                include_paralinguistics: with_hints,
                include_gender: with_hints,
            };
            let id = format!("pretrain{step}_{i}");
            let view = UtteranceView {
                id: &id,
                transcript,
                emotion: Some(emotion),
                binned: binned.as_ref(),
            };
            let sample = build_sample(&view, task, &hints, prompts, &mut rng)?;
            inputs.push(assemble_sample(tok, config, &sample, "", true)?);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, &|n| n.starts_with(LM_PREFIX));
        let audio = g.constant(silence.clone());
        let items: Vec<_> = inputs
            .iter()
            .map(|input| BatchItem {
                input,
                audio: Some(audio),
            })
            .collect();
        let mut ctx = ForwardCtx::eval(lm_cfg, None);
        let loss = batch_nll(&mut g, &p, &mut ctx, &items)?;
        let total = loss.mixed(&mut g, 1.0, 1.0);
        let mean = loss.per_sample.iter().sum::<f64>() / loss.per_sample.len() as f64;
        if step == 0 {
            report.first_loss = mean;
        }
        report.final_loss = mean;
        let mut grads = g.backward(total);
        let mut named: BTreeMap<String, Tensor> = p
            .iter()
            .filter(|(k, _)| k.starts_with(LM_PREFIX))
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect();
        clip_grad_norm(&mut named, GRAD_CLIP);
        let lr = pc.lr * lr_multiplier(step + 1, pc.steps, WARMUP_FRACTION)?;
        adamw_step(params, &named, &mut state, lr, WEIGHT_DECAY)?;
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {mean:.4}");
        }
    }
    Ok(report)
}
