//! Answer parsing, the three inference strategies, and evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TranscriptSource;
use crate::data::{par_map, Example};
use crate::error::{Error, Result};
use crate::lm::{generate, StopRule};
use crate::model::SpeechLm;
use crate::paralinguistics::BinnedFeatures;
use crate::prompts::{build_sample, EmotionCode, HintSpec, PromptSet, Task, UtteranceView, TRANSCRIPT_HINT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SerOnly,
    PromptHint,
    JointPrefix,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SerOnly, Strategy::PromptHint, Strategy::JointPrefix];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SerOnly => "ser-only",
            Strategy::PromptHint => "prompt-hint",
            Strategy::JointPrefix => "joint-prefix",
        }
    }

    pub fn needs_transcript(self) -> bool {
        self != Strategy::SerOnly
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown strategy '{s}' (expected ser-only, prompt-hint or joint-prefix)"
            ))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub asr: Option<String>,
    pub emotion: Option<EmotionCode>,
    pub malformed: bool,
    pub reasons: Vec<String>,
}

impl ParsedAnswer {
    fn flagged(reason: &str) -> Self {
        ParsedAnswer {
            malformed: true,
            reasons: vec![reason.to_string()],
            ..Default::default()
        }
    }
}

fn strip_one_space(s: &str) -> &str {
    let s = s.strip_prefix(' ').unwrap_or(s);
    s.strip_suffix(' ').unwrap_or(s)
}

/// Parses `| ASR: <t> |`, `| Emotion: <c> |` or `| ASR: <t> | Emotion: <c> |`.
///
/// Whitespace outside the outer delimiters is ignored and one space of
/// padding is removed on each side of a field and after its label, so that
/// parsing inverts formatting exactly.
pub fn parse_output(text: &str) -> ParsedAnswer {
    let t = text.trim();
    if !t.contains('|') {
        return ParsedAnswer::flagged("no-delimited-fields");
    }
    let Some(inner) = t.strip_prefix('|') else {
        return ParsedAnswer::flagged("text-before-answer");
    };
    let Some(inner) = inner.strip_suffix('|') else {
        return ParsedAnswer::flagged("unterminated");
    };
    if inner.trim().is_empty() {
        return ParsedAnswer::flagged("no-delimited-fields");
    }
    let mut out = ParsedAnswer::default();
    let flag = |out: &mut ParsedAnswer, r: &str| {
        out.malformed = true;
        if !out.reasons.iter().any(|x| x == r) {
            out.reasons.push(r.to_string());
        }
    };
    for (i, field) in inner.split('|').enumerate() {
        let f = strip_one_space(field);
        if let Some(v) = f.strip_prefix("ASR:") {
            if out.asr.is_some() || out.emotion.is_some() || i > 0 {
                let reason = if out.asr.is_some() {
                    "duplicate-field"
                } else {
                    "field-order"
                };
                flag(&mut out, reason);
                continue;
            }
            out.asr = Some(v.strip_prefix(' ').unwrap_or(v).to_string());
        } else if let Some(v) = f.strip_prefix("Emotion:") {
            if out.emotion.is_some() {
                flag(&mut out, "duplicate-field");
                continue;
            }
            let code = v.trim();
            let mut chars = code.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => match EmotionCode::from_letter(c) {
                    Some(e) => out.emotion = Some(e),
                    None => flag(&mut out, "unknown-code"),
                },
                _ => flag(&mut out, "unknown-code"),
            }
        } else {
            flag(&mut out, "unknown-field");
        }
    }
    if out.malformed {
        out.asr = None;
        out.emotion = None;
    }
    out
}

pub fn unweighted_accuracy(predictions: &[Option<EmotionCode>], labels: &[EmotionCode]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| **p == Some(**l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Word-level Levenshtein distance divided by the reference word count.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::InvalidInput("WER needs a non-empty reference".into()));
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for (i, rw) in r.iter().enumerate() {
        cur[0] = i + 1;
        for (j, hw) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rw != hw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[h.len()] as f64 / r.len() as f64)
}

/// What the model sees of one utterance at inference time.
#[derive(Clone, Copy, Debug)]
pub struct InferenceInput<'a> {
    pub id: &'a str,
    /// Normalised encoder features.
    pub features: &'a Tensor,
    pub binned: Option<&'a BinnedFeatures>,
    pub transcript: Option<&'a str>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// Full answer text, including any supplied assistant prefix.
    pub text: String,
    pub parsed: ParsedAnswer,
}

pub fn joint_prefix(transcript: &str) -> String {
    format!("| ASR: {transcript} | Emotion:")
}

/// Context string up to the point generation starts, audio shown as a
/// placeholder; useful for inspection and tests.
pub fn render_context(
    model: &SpeechLm,
    input: &InferenceInput<'_>,
    strategy: Strategy,
    hints: &HintSpec,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let (sample, prefix, _) = plan(input, strategy, hints, prompts, rng)?;
    Ok(model.assemble(&sample, &prefix, false)?.context_text(&model.tokenizer))
}

fn plan(
    input: &InferenceInput<'_>,
    strategy: Strategy,
    hints: &HintSpec,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<(crate::prompts::TaskSample, String, StopRule)> {
    let transcript = match (strategy.needs_transcript(), input.transcript) {
        (true, None) => {
            return Err(Error::InvalidInput(format!("strategy {strategy} needs a transcript")));
        }
        (true, Some(t)) if t.contains('|') => {
            return Err(Error::InvalidInput(format!(
                "transcript of '{}' contains '|'",
                input.id
            )));
        }
        (_, t) => t.unwrap_or(""),
    };
    let task = if strategy == Strategy::JointPrefix {
        Task::Joint
    } else {
        Task::Ser
    };
    let view = UtteranceView {
        id: input.id,
        transcript,
        // placeholder so the target can be formatted; it is never shown
        emotion: Some(EmotionCode::N),
        binned: input.binned.filter(|_| !hints.is_empty()),
    };
    let mut sample = build_sample(&view, task, hints, prompts, rng)?;
    sample.target.clear();
    Ok(match strategy {
        Strategy::SerOnly => (sample, String::new(), StopRule { pipes: 2 }),
        Strategy::PromptHint => {
            sample.prompt = format!("{}\n{TRANSCRIPT_HINT}\n{transcript}", sample.prompt);
            (sample, String::new(), StopRule { pipes: 2 })
        }
        Strategy::JointPrefix => (sample, joint_prefix(transcript), StopRule { pipes: 1 }),
    })
}

fn run_generation(
    model: &SpeechLm,
    input: &InferenceInput<'_>,
    sample: &crate::prompts::TaskSample,
    prefix: &str,
    stop: StopRule,
) -> Result<Inference> {
    let assembled = match model.assemble(sample, prefix, false) {
        Ok(a) => a,
        Err(Error::SequenceTooLong { .. }) => {
            return Ok(Inference {
                text: prefix.to_string(),
                parsed: ParsedAnswer::flagged("overflow"),
            })
        }
        Err(e) => return Err(e),
    };
    let audio = model.audio_block(input.features)?;
    let max_new = model.config.eval.max_new_tokens;
    let ids = match generate(
        &model.params,
        &model.lm_config(),
        model.lora_scale(),
        &assembled,
        Some(&audio),
        &model.tokenizer,
        max_new,
        stop,
    ) {
        Ok(ids) => ids,
        Err(Error::SequenceTooLong { .. }) => {
            return Ok(Inference {
                text: prefix.to_string(),
                parsed: ParsedAnswer::flagged("overflow"),
            })
        }
        Err(e) => return Err(e),
    };
    let text = format!("{prefix}{}", model.tokenizer.decode(&ids));
    let parsed = parse_output(&text);
    Ok(Inference { text, parsed })
}

/// Runs one strategy on one utterance with greedy decoding.
pub fn infer(
    model: &SpeechLm,
    input: &InferenceInput<'_>,
    strategy: Strategy,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<Inference> {
    let hints = model.config.prompts.hints.clone();
    let (sample, prefix, stop) = plan(input, strategy, &hints, prompts, rng)?;
    run_generation(model, input, &sample, &prefix, stop)
}

/// Transcribes with the ASR task.
pub fn transcribe(
    model: &SpeechLm,
    input: &InferenceInput<'_>,
    prompts: &PromptSet,
    rng: &mut ChaCha8Rng,
) -> Result<Inference> {
    let view = UtteranceView {
        id: input.id,
        transcript: "",
        emotion: None,
        binned: None,
    };
    let mut sample = build_sample(&view, Task::Asr, &HintSpec::default(), prompts, rng)?;
    sample.target.clear();
    run_generation(model, input, &sample, "", StopRule { pipes: 2 })
}

/// Per-utterance evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub label: EmotionCode,
    pub prediction: Option<EmotionCode>,
    pub malformed: bool,
    pub reasons: Vec<String>,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_hypothesis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

/// Confusion column for answers without a usable emotion code.
pub const NO_PREDICTION: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: Strategy,
    pub n: usize,
    pub accuracy: f64,
    pub malformed_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    /// Label letter → predicted letter (or `none`) → count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    /// One JSON line per sample, then the summary line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::storage(path, e))?);
        for s in &self.samples {
            writeln!(f, "{}", serde_json::to_string(s).expect("sample serialises"))
                .map_err(|e| Error::storage(path, e))?;
        }
        let summary = serde_json::json!({ "summary": &self.summary });
        writeln!(f, "{summary}").map_err(|e| Error::storage(path, e))?;
        f.flush().map_err(|e| Error::storage(path, e))
    }
}

/// Evaluates `strategy` on `examples` (a held-out split). Each utterance
/// draws its prompt from its own seeded stream, so the report does not
/// depend on thread count or order.
pub fn evaluate(model: &SpeechLm, examples: &[Example], strategy: Strategy, prompts: &PromptSet) -> Result<EvalReport> {
    let ec = &model.config.eval;
    let selected: Vec<&Example> = examples
        .iter()
        .filter(|e| ec.classes.as_ref().is_none_or(|c| c.contains(&e.record.emotion)))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let results = par_map(&selected, |ex| -> Result<SampleResult> {
        let index: u64 = ex
            .record
            .id
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
        let mut rng = ChaCha8Rng::seed_from_u64(ec.seed);
        rng.set_stream(index);
        let mut input = InferenceInput {
            id: &ex.record.id,
            features: &ex.features,
            binned: ex.binned.as_ref(),
            transcript: Some(&ex.record.transcript),
        };
        let mut hypothesis = None;
        let mut wer = None;
        if ec.transcript_source == TranscriptSource::ModelAsr {
            let asr = transcribe(model, &input, prompts, &mut rng)?;
            let h = asr.parsed.asr.unwrap_or_default().replace('|', " ");
            wer = Some(word_error_rate(&ex.record.transcript, &h)?);
            hypothesis = Some(h);
        }
        if let Some(h) = &hypothesis {
            input.transcript = Some(h);
        }
        let inf = infer(model, &input, strategy, prompts, &mut rng)?;
        Ok(SampleResult {
            id: ex.record.id.clone(),
            label: ex.record.emotion,
            prediction: inf.parsed.emotion,
            malformed: inf.parsed.malformed,
            reasons: inf.parsed.reasons,
            text: inf.text,
            asr_hypothesis: hypothesis,
            wer,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let labels: Vec<EmotionCode> = results.iter().map(|r| r.label).collect();
    let preds: Vec<Option<EmotionCode>> = results.iter().map(|r| r.prediction).collect();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &results {
        let col = r
            .prediction
            .map_or(NO_PREDICTION.to_string(), |p| p.letter().to_string());
        *confusion
            .entry(r.label.letter().to_string())
            .or_default()
            .entry(col)
            .or_default() += 1;
    }
    let n = results.len();
    let wers: Vec<f64> = results.iter().filter_map(|r| r.wer).collect();
    let summary = EvalSummary {
        strategy,
        n,
        accuracy: unweighted_accuracy(&preds, &labels)?,
        malformed_rate: results.iter().filter(|r| r.malformed).count() as f64 / n as f64,
        wer: (!wers.is_empty()).then(|| wers.iter().sum::<f64>() / wers.len() as f64),
        confusion,
        config_hash: model.config.hash(),
    };
    Ok(EvalReport {
        summary,
        samples: results,
    })
}
