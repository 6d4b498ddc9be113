//! The per-phase training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{adamw_step, clip_grad_norm, OptimState};
use super::{asr_loss_weight, lr_multiplier, EarlyStop, StopDecision};
use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::corpus::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ProvenanceEntry, ResumeState};
use crate::corpus::tokenizer::Tokenizer;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::lm::{self, batch_nll, trainable_parameters, BatchItem, ForwardCtx, LMConfig, Phase};
use crate::model::{assemble_sample, audio_rows};
use crate::params::ParamStore;
use crate::prompts::{build_sample, HintSpec, PromptSet, Task, TaskSample, UtteranceView};
use crate::tensor::{hex_digest, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn phase_checkpoint_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(format!("{phase}.ckpt"))
}

pub fn resume_checkpoint_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(format!("{phase}.resume.ckpt"))
}

/// Training and validation inputs of one phase.
pub struct PhaseData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub prompts: &'a PromptSet,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop once this many epochs of the phase are complete, leaving the
    /// resume checkpoint behind as an interrupted run would.
    pub halt_after: Option<usize>,
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub train_asr: Option<f64>,
    pub train_ser: Option<f64>,
    pub val_asr: Option<f64>,
    pub val_ser: Option<f64>,
    pub lr: f64,
    pub w_asr: f64,
    pub w_ser: f64,
    pub best: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub enum PhaseOutcome {
    Completed {
        checkpoint: Box<Checkpoint>,
        report: PhaseReport,
    },
    Halted {
        completed_epochs: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LoopState {
    early: EarlyStop,
    history: Vec<EpochRecord>,
}

fn previous_phase(phase: Phase) -> Option<Phase> {
    match phase {
        Phase::P1 => None,
        Phase::P2 => Some(Phase::P1),
        Phase::P3 => Some(Phase::P2),
    }
}

fn phase_index(phase: Phase) -> u64 {
    match phase {
        Phase::P1 => 1,
        Phase::P2 => 2,
        Phase::P3 => 3,
    }
}

/// Independent stream for (phase, epoch, purpose); resuming mid-phase
/// therefore replays exactly the same draws.
fn stream_rng(seed: u64, phase: Phase, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((phase_index(phase) << 40) | ((epoch as u64) << 8) | purpose);
    r
}

const RNG_ORDER: u64 = 1;
const RNG_DROPOUT: u64 = 2;
const RNG_VALIDATION: u64 = 3;
const LORA_SEED_SALT: u64 = 0x10CA_11AD;

fn schedule(cfg: &RunConfig, phase: Phase, step: usize, total: usize) -> Result<f64> {
    if phase == Phase::P3 && !cfg.train.restart_schedule_p3 {
        // decay-only continuation of the P2 schedule
        return Ok((total - step) as f64 / total as f64);
    }
    lr_multiplier(step, total, cfg.train.warmup_fraction)
}

fn hints_for(cfg: &RunConfig, task: Task) -> HintSpec {
    if task == Task::Asr {
        HintSpec::default()
    } else {
        cfg.prompts.hints.clone()
    }
}

fn make_sample(
    cfg: &RunConfig,
    ex: &Example,
    task: Task,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<TaskSample> {
    let hints = hints_for(cfg, task);
    let view = UtteranceView {
        id: &ex.record.id,
        transcript: &ex.record.transcript,
        emotion: Some(ex.record.emotion),
        binned: ex.binned.as_ref().filter(|_| !hints.is_empty()),
    };
    build_sample(&view, task, &hints, prompts, rng)
}

/// JOINT_PREFIX-style sample whose only target is the emotion code, used for
/// the validation SER loss.
fn code_sample(
    cfg: &RunConfig,
    ex: &Example,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<(TaskSample, String)> {
    let mut s = make_sample(cfg, ex, Task::Joint, prompts, rng)?;
    s.task = Task::Ser;
    s.target = format!(" {}", ex.record.emotion.letter());
    Ok((s, format!("| ASR: {} | Emotion:", ex.record.transcript)))
}

fn digest_of(params: &ParamStore, names: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(params.expect(n).checksum().as_bytes());
    }
    hex_digest(h)
}

fn frozen_checksums(params: &ParamStore, trainable: &BTreeSet<String>) -> BTreeMap<String, String> {
    params
        .iter()
        .filter(|(n, _)| !trainable.contains(*n))
        .map(|(n, t)| (n.clone(), t.checksum()))
        .collect()
}

fn verify_frozen(params: &ParamStore, expected: &BTreeMap<String, String>, phase: Phase, epoch: usize) -> Result<()> {
    for (n, sum) in expected {
        if params.get(n).map(Tensor::checksum).as_ref() != Some(sum) {
            return Err(Error::Numeric(format!(
                "{phase} epoch {epoch}: frozen parameter '{n}' changed"
            )));
        }
    }
    Ok(())
}

/// Token-weighted mean NLLs accumulated over batches.
#[derive(Default)]
struct LossMeter {
    asr: (f64, usize),
    ser: (f64, usize),
}

impl LossMeter {
    fn add(&mut self, asr: Option<f64>, n_asr: usize, ser: Option<f64>, n_ser: usize) {
        if let Some(a) = asr {
            self.asr.0 += a * n_asr as f64;
            self.asr.1 += n_asr;
        }
        if let Some(s) = ser {
            self.ser.0 += s * n_ser as f64;
            self.ser.1 += n_ser;
        }
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        let m = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        (m(self.asr), m(self.ser))
    }
}

struct Runner<'a> {
    cfg: RunConfig,
    lm_cfg: LMConfig,
    phase: Phase,
    data: &'a PhaseData<'a>,
    tok: &'a Tokenizer,
    trainable: BTreeSet<String>,
}

impl Runner<'_> {
    fn lora_scale(&self) -> Option<f64> {
        self.phase.uses_lora().then(|| self.cfg.lora.scale())
    }

    /// Teacher-forced losses of `(example, sample, answer prefix)` triples,
    /// without dropout.
    fn evaluate(&self, params: &ParamStore, samples: &[(&Example, TaskSample, String)]) -> Result<LossMeter> {
        let mut meter = LossMeter::default();
        for chunk in samples.chunks(self.cfg.train.micro_batch) {
            let inputs = chunk
                .iter()
                .map(|(_, s, prefix)| assemble_sample(self.tok, &self.cfg, s, prefix, true))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let p = params.bind(&mut g, &|_| false);
            let audio: Vec<_> = chunk
                .iter()
                .map(|(ex, _, _)| audio_rows(&mut g, &p, &ex.features, &self.cfg.qpmapper))
                .collect();
            let items: Vec<_> = inputs
                .iter()
                .zip(&audio)
                .map(|(input, &a)| BatchItem { input, audio: Some(a) })
                .collect();
            let mut ctx = ForwardCtx::eval(&self.lm_cfg, self.lora_scale());
            let loss = batch_nll(&mut g, &p, &mut ctx, &items)?;
            meter.add(
                lm::BatchLoss::value(&g, loss.asr),
                loss.n_asr,
                lm::BatchLoss::value(&g, loss.ser),
                loss.n_ser,
            );
        }
        Ok(meter)
    }

    /// Validation ASR loss and emotion-code loss; the same samples every epoch.
    fn validate(&self, params: &ParamStore) -> Result<(Option<f64>, Option<f64>)> {
        let mut rng = stream_rng(self.cfg.seed, self.phase, 0, RNG_VALIDATION);
        let mut samples = Vec::with_capacity(2 * self.data.val.len());
        for ex in self.data.val {
            samples.push((
                ex,
                make_sample(&self.cfg, ex, Task::Asr, self.data.prompts, &mut rng)?,
                String::new(),
            ));
        }
        for ex in self.data.val {
            let (s, prefix) = code_sample(&self.cfg, ex, self.data.prompts, &mut rng)?;
            samples.push((ex, s, prefix));
        }
        Ok(self.evaluate(params, &samples)?.means())
    }

    fn choose_task(&self, w_asr: f64, rng: &mut ChaCha8Rng) -> Task {
        if self.phase != Phase::P3 || rng.random::<f64>() < w_asr {
            Task::Asr
        } else if rng.random_bool(0.5) {
            Task::Joint
        } else {
            Task::Ser
        }
    }

    /// One pass over the training split. Returns the loss meter and the
    /// learning rate of the last update.
    fn train_epoch(
        &self,
        params: &mut ParamStore,
        optim: &mut OptimState,
        epoch: usize,
        weights: (f64, f64),
        step0: usize,
        total_steps: usize,
    ) -> Result<(LossMeter, f64)> {
        let tc = &self.cfg.train;
        let plan = tc.plan(self.phase);
        let mut order_rng = stream_rng(self.cfg.seed, self.phase, epoch, RNG_ORDER);
        let mut drop_rng = stream_rng(self.cfg.seed, self.phase, epoch, RNG_DROPOUT);
        let train = self.data.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut samples = Vec::with_capacity(order.len());
        for &i in &order {
            let task = self.choose_task(weights.0, &mut order_rng);
            samples.push((
                &train[i],
                make_sample(&self.cfg, &train[i], task, self.data.prompts, &mut order_rng)?,
            ));
        }

        let dropout = if self.phase.uses_lora() {
            self.cfg.lora.dropout
        } else {
            0.0
        };
        let mut meter = LossMeter::default();
        let mut lr = 0.0;
        for (k, batch) in samples.chunks(tc.effective_batch()).enumerate() {
            let micro: Vec<_> = batch.chunks(tc.micro_batch).collect();
            let share = 1.0 / micro.len() as f64;
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for chunk in micro {
                let inputs = chunk
                    .iter()
                    .map(|(_, s)| assemble_sample(self.tok, &self.cfg, s, "", true))
                    .collect::<Result<Vec<_>>>()?;
                let mut g = Graph::new();
                let p = params.bind(&mut g, &|n| self.trainable.contains(n));
                let audio: Vec<_> = chunk
                    .iter()
                    .map(|(ex, _)| audio_rows(&mut g, &p, &ex.features, &self.cfg.qpmapper))
                    .collect();
                let items: Vec<_> = inputs
                    .iter()
                    .zip(&audio)
                    .map(|(input, &a)| BatchItem { input, audio: Some(a) })
                    .collect();
                let mut ctx = ForwardCtx {
                    cfg: &self.lm_cfg,
                    lora_scale: self.lora_scale(),
                    dropout,
                    rng: Some(&mut drop_rng),
                };
                let loss = batch_nll(&mut g, &p, &mut ctx, &items)?;
                meter.add(
                    lm::BatchLoss::value(&g, loss.asr),
                    loss.n_asr,
                    lm::BatchLoss::value(&g, loss.ser),
                    loss.n_ser,
                );
                let total = loss.mixed(&mut g, weights.0, weights.1);
                let mut grads = g.backward(total);
                for name in &self.trainable {
                    if let Some(mut gr) = grads.take(p.var(name)) {
                        gr.scale_in_place(share);
                        match acc.get_mut(name) {
                            Some(a) => a.add_assign(&gr),
                            None => {
                                acc.insert(name.clone(), gr);
                            }
                        }
                    }
                }
            }
            clip_grad_norm(&mut acc, tc.grad_clip);
            let step = step0 + k + 1;
            lr = plan.lr * schedule(&self.cfg, self.phase, step, total_steps)?;
            adamw_step(params, &acc, optim, lr, plan.weight_decay)?;
        }
        Ok((meter, lr))
    }
}

/// Rewrites the metrics log so it ends just before `(phase, next_epoch)`.
fn truncate_metrics(path: &Path, phase: Phase, completed_epochs: usize) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::storage(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::storage(path, e))?;
        if r.phase < phase || (r.phase == phase && r.epoch <= completed_epochs) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::storage(path, e))
}

fn append_metrics(path: &Path, r: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::storage(path, e))?;
    let line = serde_json::to_string(r).expect("metrics serialise");
    writeln!(f, "{line}").map_err(|e| Error::storage(path, e))
}

struct Progress {
    params: ParamStore,
    optim: OptimState,
    state: LoopState,
    best_params: ParamStore,
    completed: usize,
}

fn resumable(path: &Path, start: &Checkpoint, phase: Phase) -> Result<Option<Progress>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = load_checkpoint(path)?;
    let Some(resume) = ck.resume else {
        return Ok(None);
    };
    if ck.config_hash != start.config_hash || resume.phase != phase || ck.provenance != start.provenance {
        log::warn!("ignoring stale resume checkpoint {}", path.display());
        return Ok(None);
    }
    let state: LoopState =
        serde_json::from_str(&resume.state_json).map_err(|e| Error::storage(path, format!("resume state: {e}")))?;
    Ok(Some(Progress {
        params: ck.params,
        optim: resume.optim,
        state,
        best_params: resume.best_params,
        completed: resume.completed_epochs,
    }))
}

/// Runs `phase` starting from `start`, the previous phase's checkpoint (or
/// the initial checkpoint for P1). Resumes from a matching resume checkpoint
/// in `out_dir` if one exists.
pub fn run_phase(
    start: &Checkpoint,
    phase: Phase,
    data: &PhaseData<'_>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<PhaseOutcome> {
    let cfg = RunConfig::from_toml(&start.config_text)?;
    if cfg.hash() != start.config_hash {
        return Err(Error::Config(
            "checkpoint config text does not match its recorded hash".into(),
        ));
    }
    if start.last_phase() != previous_phase(phase) {
        return Err(Error::MissingPrerequisite(format!(
            "{phase} must start from a {} checkpoint, got one after {}",
            previous_phase(phase).map_or("initial".to_string(), |p| p.to_string()),
            start
                .last_phase()
                .map_or("initialisation".to_string(), |p| p.to_string())
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(format!(
            "{phase} needs non-empty train and validation splits (got {} and {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let plan = cfg.train.plan(phase).clone();
    plan.validate(phase)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let lm_cfg = cfg.lm.lm_config(start.tokenizer.vocab_size());
    let resume_path = resume_checkpoint_path(out_dir, phase);
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut fresh_params = start.params.clone();
    if phase.uses_lora() && !fresh_params.names().any(|n| n.starts_with(crate::params::LORA_PREFIX)) {
        fresh_params.extend(lm::init_lora(&lm_cfg, &cfg.lora, cfg.seed ^ LORA_SEED_SALT)?);
    }
    let trainable = trainable_parameters(&fresh_params, phase);
    if trainable.is_empty() {
        return Err(Error::Config(format!("{phase} has no trainable parameters")));
    }
    let frozen = frozen_checksums(&fresh_params, &trainable);

    let mut prog = match resumable(&resume_path, start, phase)? {
        Some(p) => {
            log::info!("resuming {phase} after epoch {}", p.completed);
            p
        }
        None => Progress {
            best_params: subset(&fresh_params, &trainable),
            params: fresh_params,
            optim: OptimState::default(),
            state: LoopState {
                early: EarlyStop::new(cfg.train.patience),
                history: Vec::new(),
            },
            completed: 0,
        },
    };
    truncate_metrics(&metrics_path, phase, prog.completed)?;

    let runner = Runner {
        lm_cfg,
        phase,
        data,
        tok: &start.tokenizer,
        trainable,
        cfg,
    };
    let steps_per_epoch = data.train.len().div_ceil(runner.cfg.train.effective_batch());
    let total_steps = plan.max_epochs * steps_per_epoch;
    let mut stopped_early = false;
    for epoch in prog.completed + 1..=plan.max_epochs {
        let weights = if phase == Phase::P3 {
            asr_loss_weight(epoch, plan.max_epochs)?
        } else {
            (1.0, 0.0)
        };
        let step0 = (epoch - 1) * steps_per_epoch;
        let last_good = format!("last good checkpoint: {}", resume_path.display());
        let (meter, lr) = runner
            .train_epoch(&mut prog.params, &mut prog.optim, epoch, weights, step0, total_steps)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{phase} epoch {epoch}: {m} ({last_good})")),
                other => other,
            })?;
        if !prog.params.all_finite() {
            return Err(Error::Numeric(format!(
                "{phase} epoch {epoch}: non-finite parameters ({last_good})"
            )));
        }
        verify_frozen(&prog.params, &frozen, phase, epoch)?;
        let (val_asr, val_ser) = runner.validate(&prog.params)?;
        let criterion = if phase == Phase::P3 { val_ser } else { val_asr };
        let criterion = criterion.ok_or_else(|| Error::InsufficientData(format!("{phase}: empty validation loss")))?;
        let (improved, decision) = if phase == Phase::P3 {
            prog.state.early.observe(criterion)
        } else {
            // P1/P2 keep their final parameters; the record tracks the last epoch
            prog.state.early.best = Some(criterion);
            prog.state.early.best_epoch = epoch;
            prog.state.early.epochs_seen = epoch;
            (true, StopDecision::Continue)
        };
        if improved {
            prog.best_params = subset(&prog.params, &runner.trainable);
        }
        let (train_asr, train_ser) = meter.means();
        let record = EpochRecord {
            phase,
            epoch,
            steps: steps_per_epoch,
            train_asr,
            train_ser,
            val_asr,
            val_ser,
            lr,
            w_asr: weights.0,
            w_ser: weights.1,
            best: improved,
            config_hash: start.config_hash.clone(),
        };
        log::info!(
            "{phase} epoch {epoch}: train asr {train_asr:?} ser {train_ser:?}, val asr {val_asr:?} ser {val_ser:?}"
        );
        append_metrics(&metrics_path, &record)?;
        prog.state.history.push(record);
        prog.completed = epoch;
        let resume_ck = Checkpoint {
            params: prog.params.clone(),
            resume: Some(ResumeState {
                phase,
                completed_epochs: epoch,
                state_json: serde_json::to_string(&prog.state).expect("loop state serialises"),
                optim: prog.optim.clone(),
                best_params: prog.best_params.clone(),
            }),
            ..start.clone()
        };
        save_checkpoint(&resume_ck, &resume_path)?;
        if decision == StopDecision::Stop {
            stopped_early = epoch < plan.max_epochs;
            break;
        }
        if opts.halt_after == Some(epoch) && epoch < plan.max_epochs {
            return Ok(PhaseOutcome::Halted {
                completed_epochs: epoch,
            });
        }
    }

    for (n, t) in prog.best_params.iter() {
        prog.params.insert(n.clone(), t.clone());
    }
    verify_frozen(&prog.params, &frozen, phase, prog.completed)?;
    let early = &prog.state.early;
    let report = PhaseReport {
        phase,
        epochs: prog.state.history.clone(),
        best_epoch: early.best_epoch,
        best_val_loss: early.best.unwrap_or(f64::NAN),
        stopped_early,
    };
    let mut provenance = start.provenance.clone();
    provenance.push(ProvenanceEntry {
        phase,
        epochs_run: prog.completed,
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        config_hash: start.config_hash.clone(),
        trained_digest: digest_of(&prog.params, &runner.trainable),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(runner.cfg.seed);
    rng.set_stream(phase_index(phase));
    let ck = Checkpoint {
        params: prog.params,
        provenance,
        resume: None,
        rng,
        ..start.clone()
    };
    save_checkpoint(&ck, &phase_checkpoint_path(out_dir, phase))?;
    if resume_path.exists() {
        std::fs::remove_file(&resume_path).map_err(|e| Error::storage(&resume_path, e))?;
    }
    Ok(PhaseOutcome::Completed {
        checkpoint: Box::new(ck),
        report,
    })
}

fn subset(params: &ParamStore, names: &BTreeSet<String>) -> ParamStore {
    let mut s = ParamStore::new();
    for n in names {
        s.insert(n.clone(), params.expect(n).clone());
    }
    s
}
