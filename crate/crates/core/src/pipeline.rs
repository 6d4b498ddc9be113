//! End-to-end steps shared by the command-line front end and the tests:
//! corpus generation, initialisation, phase chaining, evaluation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::encoder::{pretrain_tiny_encoder, TinyConvEncoder};
use crate::audio::{self, EncoderKind, Waveform};
use crate::config::RunConfig;
use crate::corpus::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::corpus::manifest::SplitManifest;
use crate::corpus::{
    build_tokenizer, generate_corpus, read_manifest, CueOracle, GenerateOutcome, Split, MANIFEST_FILE,
};
use crate::curriculum::pretrain::{pretrain_base_lm, PretrainReport};
use crate::curriculum::train::{phase_checkpoint_path, PhaseData};
use crate::curriculum::{run_phase, PhaseOutcome, TrainOptions};
use crate::data::{self, par_map, Example};
use crate::decode_eval::{self, EvalReport, Inference, InferenceInput, Strategy};
use crate::error::{Error, Result};
use crate::lm::{self, Phase};
use crate::model::SpeechLm;
use crate::paralinguistics::{self, fit_tertile_bins, FeatureRecord, Gender};
use crate::params::{ParamStore, ENCODER_PREFIX, LM_PREFIX};
use crate::prompts::PromptSet;
use crate::qpmapper;

pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const FEATURES_FILE: &str = "features.jsonl";

const ENCODER_SALT: u64 = 0xE4C0_DE00;
const QP_SALT: u64 = 0x0A9F_0000;
const LM_SALT: u64 = 0x1A46_0000;
const PRETRAIN_SALT: u64 = 0x9E77_0000;

pub fn gen_data(cfg: &RunConfig) -> Result<GenerateOutcome> {
    generate_corpus(&cfg.corpus, &cfg.corpus_dir())
}

pub fn load_manifest(cfg: &RunConfig) -> Result<SplitManifest> {
    let path = cfg.corpus_dir().join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "corpus manifest {} (run gen-data first)",
            path.display()
        )));
    }
    let m = SplitManifest::from_records(&read_manifest(&path)?);
    let train: std::collections::HashSet<&str> = m.train.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = m.val.iter().chain(&m.test).find(|r| train.contains(r.id.as_str())) {
        return Err(Error::InvalidInput(format!(
            "utterance '{}' is in train and a held-out split",
            r.id
        )));
    }
    Ok(m)
}

/// Everything a phase or an evaluation needs besides checkpoints.
pub struct Prepared {
    pub init: Checkpoint,
    pub prompts: PromptSet,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Present when the base LM was pretrained in this call.
    pub pretrain: Option<PretrainReport>,
}

impl Prepared {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn read_waves(cfg: &RunConfig, records: &[crate::corpus::UtteranceRecord]) -> Result<Vec<Waveform>> {
    let dir = cfg.corpus_dir();
    par_map(records, |r| audio::read_wav(&dir.join(&r.wav)))
        .into_iter()
        .collect()
}

fn encoder_params(params: &ParamStore) -> Option<ParamStore> {
    let p = params.subset(ENCODER_PREFIX);
    let any = p.names().next().is_some();
    any.then_some(p)
}

fn examples_for(cfg: &RunConfig, manifest: &SplitManifest, split: Split, params: &ParamStore) -> Result<Vec<Example>> {
    data::extract_examples(
        manifest.part(split),
        &cfg.corpus_dir(),
        &cfg.encoder,
        encoder_params(params).as_ref(),
        &cfg.pitch,
    )
}

/// Builds the initial checkpoint: tokenizer, frozen encoder, feature
/// normaliser, tertile bins, mapper init and the pretrained frozen base LM.
fn initialise(
    cfg: &RunConfig,
    manifest: &SplitManifest,
    prompts: &PromptSet,
) -> Result<(Checkpoint, Vec<Example>, PretrainReport)> {
    let tok = build_tokenizer(&manifest.train, prompts, cfg.lm.vocab_limit)?;
    let mut params = ParamStore::new();
    if cfg.encoder.kind == EncoderKind::TinyConvTransformer {
        let waves = read_waves(cfg, &manifest.train)?;
        let sr = waves
            .first()
            .ok_or_else(|| Error::InsufficientData("empty training split".into()))?
            .sample_rate();
        let mut enc = TinyConvEncoder::init_params(&cfg.encoder, sr, cfg.seed ^ ENCODER_SALT)?;
        pretrain_tiny_encoder(
            &mut enc,
            &cfg.encoder,
            &waves,
            cfg.pretrain.encoder_steps,
            cfg.pretrain.lr,
            cfg.seed ^ ENCODER_SALT,
        )?;
        audio::freeze(&mut enc);
        params.extend(enc);
    }
    let train = examples_for(cfg, manifest, Split::Train, &params)?;
    params.extend(data::fit_normalizer(&train)?);
    let paras: Vec<_> = train.iter().map(|e| e.para.clone()).collect();
    let bins = fit_tertile_bins(&paras)?;
    params.extend(qpmapper::init_params(
        &cfg.qpmapper,
        cfg.encoder.d_ae,
        cfg.seed ^ QP_SALT,
    )?);

    let lm_cfg = cfg.lm.lm_config(tok.vocab_size());
    let mut base = lm::init_base(&lm_cfg, cfg.seed ^ LM_SALT)?;
    let transcripts: Vec<String> = manifest.train.iter().map(|r| r.transcript.clone()).collect();
    let report = pretrain_base_lm(
        &mut base,
        &lm_cfg,
        &tok,
        cfg,
        &transcripts,
        prompts,
        cfg.seed ^ PRETRAIN_SALT,
    )?;
    log::info!(
        "base LM pretrained for {} steps: loss {:.3} -> {:.3}",
        report.steps,
        report.first_loss,
        report.final_loss
    );
    base.freeze_prefix(LM_PREFIX);
    params.extend(base);

    let ck = Checkpoint {
        config_hash: cfg.hash(),
        config_text: cfg.to_toml(),
        params,
        tokenizer: tok,
        bins: Some(bins),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        provenance: Vec::new(),
        resume: None,
    };
    Ok((ck, train, report))
}

fn check_hash(ck: &Checkpoint, cfg: &RunConfig, path: &Path) -> Result<()> {
    if ck.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was produced by config {} but the current config hashes to {}",
            path.display(),
            ck.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

/// Loads (or creates and saves) the initial checkpoint and extracts
/// normalised features for every split.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let manifest = load_manifest(cfg)?;
    let prompts = PromptSet::builtin(cfg.prompts.pool_size)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::storage(&out, e))?;
    let init_path = out.join(INIT_CHECKPOINT);
    let existing = if init_path.exists() {
        let ck = load_checkpoint(&init_path)?;
        if ck.config_hash == cfg.hash() {
            Some(ck)
        } else {
            log::warn!("{} belongs to another config; rebuilding", init_path.display());
            None
        }
    } else {
        None
    };
    let (init, mut train, pretrain) = match existing {
        Some(ck) => {
            let train = examples_for(cfg, &manifest, Split::Train, &ck.params)?;
            (ck, train, None)
        }
        None => {
            let (ck, train, report) = initialise(cfg, &manifest, &prompts)?;
            save_checkpoint(&ck, &init_path)?;
            (ck, train, Some(report))
        }
    };
    let mut val = examples_for(cfg, &manifest, Split::Val, &init.params)?;
    let mut test = examples_for(cfg, &manifest, Split::Test, &init.params)?;
    for part in [&mut train, &mut val, &mut test] {
        data::normalize_all(part, &init.params, init.bins.as_ref())?;
    }
    Ok(Prepared {
        init,
        prompts,
        train,
        val,
        test,
        pretrain,
    })
}

fn previous_checkpoint(cfg: &RunConfig, phase: Phase) -> Option<PathBuf> {
    let prev = match phase {
        Phase::P1 => return None,
        Phase::P2 => Phase::P1,
        Phase::P3 => Phase::P2,
    };
    Some(phase_checkpoint_path(&cfg.out_dir(), prev))
}

/// Runs `phases` in order. A phase after the first in the list continues
/// from the checkpoint just produced; otherwise its predecessor's file must
/// exist. Stops early if a phase halts.
pub fn train(cfg: &RunConfig, phases: &[Phase], opts: &TrainOptions) -> Result<Vec<PhaseOutcome>> {
    if let Some(path) = phases.first().and_then(|&p| previous_checkpoint(cfg, p)) {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "{} requires {}",
                phases[0],
                path.display()
            )));
        }
    }
    let prepared = prepare(cfg)?;
    train_prepared(cfg, &prepared, phases, opts)
}

pub fn train_prepared(
    cfg: &RunConfig,
    prepared: &Prepared,
    phases: &[Phase],
    opts: &TrainOptions,
) -> Result<Vec<PhaseOutcome>> {
    let data = PhaseData {
        train: &prepared.train,
        val: &prepared.val,
        prompts: &prepared.prompts,
    };
    let out = cfg.out_dir();
    let mut outcomes = Vec::new();
    let mut carried: Option<Checkpoint> = None;
    for &phase in phases {
        let start = match (carried.take(), previous_checkpoint(cfg, phase)) {
            (Some(ck), _) => ck,
            (None, None) => prepared.init.clone(),
            (None, Some(path)) => {
                if !path.exists() {
                    return Err(Error::MissingPrerequisite(format!(
                        "{phase} requires {}",
                        path.display()
                    )));
                }
                let ck = load_checkpoint(&path)?;
                check_hash(&ck, cfg, &path)?;
                ck
            }
        };
        let outcome = run_phase(&start, phase, &data, &out, opts)?;
        match &outcome {
            PhaseOutcome::Completed { checkpoint, .. } => carried = Some((**checkpoint).clone()),
            PhaseOutcome::Halted { .. } => {
                outcomes.push(outcome);
                return Ok(outcomes);
            }
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

pub fn load_model(path: &Path, cfg: Option<&RunConfig>) -> Result<SpeechLm> {
    let ck = load_checkpoint(path)?;
    if let Some(cfg) = cfg {
        check_hash(&ck, cfg, path)?;
    }
    SpeechLm::from_checkpoint(&ck)
}

/// Evaluates a checkpoint on a split with the evaluation settings of `cfg`;
/// every other section must match the checkpoint's config.
pub fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Path, split: Split, strategy: Strategy) -> Result<EvalReport> {
    let mut model = load_model(ckpt, None)?;
    let mut probe = cfg.clone();
    probe.eval = model.config.eval.clone();
    if probe.hash() != model.config.hash() {
        return Err(Error::Config(format!(
            "{} was produced by config {} but the current config (ignoring [eval]) hashes to {}",
            ckpt.display(),
            model.config.hash(),
            probe.hash()
        )));
    }
    model.config.eval = cfg.eval.clone();
    let manifest = load_manifest(cfg)?;
    let mut examples = examples_for(cfg, &manifest, split, &model.params)?;
    data::normalize_all(&mut examples, &model.params, model.bins.as_ref())?;
    let prompts = PromptSet::builtin(model.config.prompts.pool_size)?;
    decode_eval::evaluate(&model, &examples, strategy, &prompts)
}

pub fn eval_report_path(cfg: &RunConfig, strategy: Strategy) -> PathBuf {
    cfg.out_dir().join(format!("eval-{strategy}.jsonl"))
}

/// Paralinguistic vectors of every utterance, binned with thresholds fit on
/// the training split, written as one JSON line each.
pub fn extract_features(cfg: &RunConfig) -> Result<(PathBuf, usize)> {
    let manifest = load_manifest(cfg)?;
    let all: Vec<_> = manifest
        .train
        .iter()
        .chain(&manifest.val)
        .chain(&manifest.test)
        .cloned()
        .collect();
    let dir = cfg.corpus_dir();
    let raw = par_map(&all, |r| -> Result<_> {
        let w = audio::read_wav(&dir.join(&r.wav))?;
        paralinguistics::extract(&w, r.gender, &cfg.pitch)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let train: Vec<_> = all
        .iter()
        .zip(&raw)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(_, v)| v.clone())
        .collect();
    let bins = fit_tertile_bins(&train)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::storage(&out, e))?;
    let path = out.join(FEATURES_FILE);
    let mut text = String::new();
    let mut records: Vec<_> = all
        .iter()
        .zip(raw)
        .map(|(r, v)| FeatureRecord {
            id: r.id.clone(),
            binned: Some(bins.bin(&v)),
            raw: v,
        })
        .collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    for rec in &records {
        text.push_str(&serde_json::to_string(rec).expect("feature records serialise"));
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::storage(&path, e))?;
    Ok((path, records.len()))
}

/// Single-utterance inference on a waveform file.
pub fn infer_file(
    ckpt: &Path,
    wav: &Path,
    strategy: Strategy,
    transcript: Option<&str>,
    gender: Gender,
    seed: u64,
) -> Result<Inference> {
    if strategy.needs_transcript() && transcript.is_none() {
        return Err(Error::InvalidInput(format!(
            "strategy {strategy} requires --transcript"
        )));
    }
    let model = load_model(ckpt, None)?;
    let w = audio::read_wav(wav)?;
    let id = wav
        .file_stem()
        .map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned());
    infer_waveform(&model, &w, &id, strategy, transcript, gender, seed)
}

/// Single-utterance inference on an in-memory waveform.
pub fn infer_waveform(
    model: &SpeechLm,
    w: &Waveform,
    id: &str,
    strategy: Strategy,
    transcript: Option<&str>,
    gender: Gender,
    seed: u64,
) -> Result<Inference> {
    if strategy.needs_transcript() && transcript.is_none() {
        return Err(Error::InvalidInput(format!(
            "strategy {strategy} requires a transcript"
        )));
    }
    let (features, binned) = model.prepare_waveform(w, gender)?;
    let prompts = PromptSet::builtin(model.config.prompts.pool_size)?;
    let input = InferenceInput {
        id,
        features: &features,
        binned: binned.as_ref(),
        transcript,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    decode_eval::infer(model, &input, strategy, &prompts, &mut rng)
}

/// Held-out accuracy of the keyword/pitch-tertile reference rule, fit on
/// the training split.
pub fn oracle_accuracy(cfg: &RunConfig, prepared: &Prepared) -> Result<f64> {
    let fit: Vec<_> = prepared
        .train
        .iter()
        .filter_map(|e| e.para.mean_pitch.map(|p| (p, e.record.emotion)))
        .collect();
    let oracle = CueOracle::fit(&cfg.corpus.classes, &fit)?;
    let preds: Vec<_> = prepared
        .test
        .iter()
        .map(|e| Some(oracle.predict(&e.record.transcript, e.para.mean_pitch)))
        .collect();
    let labels: Vec<_> = prepared.test.iter().map(|e| e.record.emotion).collect();
    decode_eval::unweighted_accuracy(&preds, &labels)
}
