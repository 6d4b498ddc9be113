//! Synthetic emotional-speech corpus: voice synthesis, manifests, splits,
//! tokenizer fitting and checkpoint storage.
//!
//! Every utterance is a sequence of voiced "words" separated by short
//! pauses. A word is built cycle by cycle from a harmonic pulse whose
//! spectral envelope depends on the word, so different words sound
//! different. Fundamental frequency, level, period jitter, amplitude shimmer
//! and pitch contour come from an emotion profile, and the transcript may
//! carry an emotion keyword. `cue_strength` sets how often each cue agrees
//! with the label.

pub mod checkpoint;
pub mod manifest;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::paralinguistics::Gender;
use crate::prompts::EmotionCode;

pub use manifest::{
    build_tokenizer, read_manifest, split_manifest, write_manifest, Split, SplitRatios, UtteranceRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub classes: Vec<EmotionCode>,
    /// Per-class sampling probabilities; uniform when absent.
    #[serde(default)]
    pub class_probs: Option<Vec<f64>>,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub cue_strength: f64,
    pub split: SplitRatios,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_utterances: 2000,
            classes: vec![EmotionCode::A, EmotionCode::S, EmotionCode::H, EmotionCode::N],
            class_probs: None,
            min_duration_s: 0.8,
            max_duration_s: 1.4,
            sample_rate: 16000,
            seed: 7,
            cue_strength: 0.9,
            split: SplitRatios::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::Config("corpus needs at least one utterance".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("corpus needs at least one emotion class".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Config("corpus classes contain duplicates".into()));
        }
        if let Some(p) = &self.class_probs {
            if p.len() != self.classes.len() {
                return Err(Error::Config(format!(
                    "{} class probabilities for {} classes",
                    p.len(),
                    self.classes.len()
                )));
            }
            if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(
                    "class probabilities must be non-negative and sum to 1".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return Err(Error::Config(format!(
                "cue strength {} outside [0, 1]",
                self.cue_strength
            )));
        }
        if !(self.min_duration_s >= 0.4 && self.min_duration_s <= self.max_duration_s && self.max_duration_s <= 30.0) {
            return Err(Error::Config(format!(
                "duration range [{}, {}] s is invalid (minimum 0.4 s)",
                self.min_duration_s, self.max_duration_s
            )));
        }
        if !(8000..=96000).contains(&self.sample_rate) {
            return Err(Error::Config(format!(
                "sample rate {} outside 8000..=96000",
                self.sample_rate
            )));
        }
        self.split.validate()
    }

    fn probs(&self) -> Vec<f64> {
        self.class_probs
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.classes.len() as f64; self.classes.len()])
    }
}

/// Acoustic ranges attached to one emotion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoiceProfile {
    pub f0: (f64, f64),
    pub amplitude: (f64, f64),
    /// Relative standard deviation of consecutive periods.
    pub jitter: f64,
    /// Relative standard deviation of consecutive peak amplitudes.
    pub shimmer: f64,
    /// Half-width of the linear pitch glide relative to the base pitch.
    pub glide: f64,
}

pub fn voice_profile(code: EmotionCode) -> VoiceProfile {
    let p = |f0, amplitude, jitter, shimmer, glide| VoiceProfile {
        f0,
        amplitude,
        jitter,
        shimmer,
        glide,
    };
    match code {
        EmotionCode::S => p((100.0, 125.0), (0.08, 0.14), 0.006, 0.03, 0.03),
        EmotionCode::D => p((125.0, 150.0), (0.25, 0.35), 0.015, 0.06, 0.05),
        EmotionCode::N => p((150.0, 175.0), (0.18, 0.26), 0.004, 0.02, 0.05),
        EmotionCode::C => p((175.0, 200.0), (0.18, 0.26), 0.004, 0.02, 0.04),
        EmotionCode::A => p((200.0, 230.0), (0.50, 0.70), 0.020, 0.08, 0.15),
        EmotionCode::O => p((230.0, 255.0), (0.20, 0.30), 0.006, 0.03, 0.08),
        EmotionCode::H => p((255.0, 285.0), (0.30, 0.45), 0.008, 0.04, 0.20),
        EmotionCode::F => p((285.0, 320.0), (0.12, 0.20), 0.025, 0.10, 0.10),
        EmotionCode::U => p((320.0, 360.0), (0.35, 0.50), 0.010, 0.05, 0.25),
    }
}

pub fn keywords(code: EmotionCode) -> &'static [&'static str] {
    match code {
        EmotionCode::A => &["angry", "furious", "livid", "outraged"],
        EmotionCode::S => &["sad", "gloomy", "miserable", "heartbroken"],
        EmotionCode::H => &["happy", "delighted", "thrilled", "cheerful"],
        EmotionCode::U => &["surprised", "shocked", "amazed", "stunned"],
        EmotionCode::F => &["afraid", "scared", "terrified", "frightened"],
        EmotionCode::D => &["disgusted", "sickened", "revolted", "repulsed"],
        EmotionCode::C => &["unimpressed", "scornful", "smug", "dismissive"],
        EmotionCode::N => &["fine", "okay", "calm", "steady"],
        EmotionCode::O => &["puzzled", "curious", "unsure", "thoughtful"],
    }
}

/// Words used in the keyword slot when no emotion keyword is drawn.
const FILLERS: [&str; 5] = ["different", "busy", "ready", "aware", "informed"];

const NOUNS: [&str; 10] = [
    "meeting", "weather", "dinner", "results", "trip", "letter", "game", "news", "project", "call",
];

const TEMPLATES: [&str; 8] = [
    "i feel {kw} about the {noun}",
    "the {noun} made me {kw}",
    "honestly the {noun} left me {kw}",
    "we were {kw} after the {noun}",
    "i am {kw} because of the {noun}",
    "they seemed {kw} about the {noun} today",
    "after the {noun} everyone was {kw}",
    "you look {kw} since the {noun}",
];

/// Class whose keyword list contains a word of `transcript`, if any.
pub fn keyword_class(transcript: &str, classes: &[EmotionCode]) -> Option<EmotionCode> {
    transcript
        .split_whitespace()
        .find_map(|w| classes.iter().copied().find(|&c| keywords(c).contains(&w)))
}

/// How an utterance was synthesised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Emotion whose profile drove the acoustics.
    pub acoustic_class: EmotionCode,
    pub f0_base: f64,
    pub amplitude: f64,
    pub jitter: f64,
    pub shimmer: f64,
    pub glide: f64,
    pub keyword: Option<String>,
    pub keyword_class: Option<EmotionCode>,
}

/// Smooth spectral envelope with two resonances, fixed per word.
fn word_envelope(word: &str) -> (f64, f64) {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(word.as_bytes());
    let u = |b: u8| f64::from(b) / 255.0;
    (300.0 + 600.0 * u(h[0]), 1000.0 + 1500.0 * u(h[1]))
}

fn harmonic_weights(f0: f64, formants: (f64, f64), sr: f64) -> Vec<f64> {
    let top = (0.24 * sr).min(4000.0);
    let n = ((top / f0).floor() as usize).max(1);
    let w: Vec<f64> = (1..=n)
        .map(|k| {
            let f = k as f64 * f0;
            let env =
                0.3 + (-((f - formants.0) / 150.0).powi(2)).exp() + 0.7 * (-((f - formants.1) / 250.0).powi(2)).exp();
            env / k as f64
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Appends one voiced word to `out`, starting at sample `start` and lasting
/// `len` samples. `f0_at(t)` gives the nominal pitch at utterance time `t`.
#[allow(clippy::too_many_arguments)]
fn render_word(
    out: &mut [f64],
    start: usize,
    len: usize,
    sr: f64,
    word: &str,
    f0_at: &dyn Fn(f64) -> f64,
    amp: f64,
    profile: (f64, f64),
    rng: &mut ChaCha8Rng,
) {
    let (jitter, shimmer) = profile;
    let jit = Normal::new(0.0, jitter).expect("finite jitter");
    let shim = Normal::new(0.0, shimmer).expect("finite shimmer");
    let end = (start + len) as f64;
    let mid_t = (start as f64 + len as f64 / 2.0) / sr;
    let weights = harmonic_weights(f0_at(mid_t), word_envelope(word), sr);
    let period = |e: f64, rng: &mut ChaCha8Rng| sr / f0_at(e / sr) * (1.0 + jit.sample(rng)).max(0.5);

    let mut prev = period(start as f64, rng);
    let mut e = start as f64 + prev / 2.0;
    loop {
        let next = period(e, rng);
        let (left, right) = (prev / 2.0, next / 2.0);
        if e + right > end {
            break;
        }
        let a = amp * (1.0 + shim.sample(rng)).max(0.2);
        let lo = (e - left).ceil().max(start as f64) as usize;
        let hi = ((e + right).ceil() as usize).min(start + len);
        for (i, s) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let dt = i as f64 - e;
            let half = if dt < 0.0 { left } else { right };
            let ph = dt / (2.0 * half);
            let v: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * (2.0 * PI * (k + 1) as f64 * ph).cos())
                .sum();
            *s = a * v;
        }
        prev = next;
        e += next;
    }
}

/// One synthesised utterance before it is written out.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub emotion: EmotionCode,
    pub gender: Gender,
    pub waveform: Waveform,
    pub gen: GenParams,
}

fn pick_class(classes: &[EmotionCode], probs: &[f64], rng: &mut ChaCha8Rng) -> EmotionCode {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in classes.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *c;
        }
    }
    *classes.last().expect("validated non-empty")
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:05}")
}

/// Deterministic function of the spec and the utterance index.
pub fn synthesize_utterance(spec: &CorpusSpec, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let probs = spec.probs();
    let emotion = pick_class(&spec.classes, &probs, &mut rng);
    let acoustic_class = if rng.random::<f64>() < spec.cue_strength {
        emotion
    } else {
        *spec.classes.choose(&mut rng).expect("validated non-empty")
    };
    let keyword_class = if rng.random::<f64>() < spec.cue_strength {
        Some(emotion)
    } else {
        None
    };
    let slot = match keyword_class {
        Some(c) => *keywords(c).choose(&mut rng).expect("keyword lists are non-empty"),
        None => *FILLERS.choose(&mut rng).expect("fillers are non-empty"),
    };
    let template = TEMPLATES.choose(&mut rng).expect("templates are non-empty");
    let noun = NOUNS.choose(&mut rng).expect("nouns are non-empty");
    let transcript = template.replace("{kw}", slot).replace("{noun}", noun);
    let gender = if rng.random::<bool>() {
        Gender::Female
    } else {
        Gender::Male
    };

    let prof = voice_profile(acoustic_class);
    let f0_base = rng.random_range(prof.f0.0..prof.f0.1);
    let amplitude = rng.random_range(prof.amplitude.0..prof.amplitude.1);
    let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let duration = rng.random_range(spec.min_duration_s..=spec.max_duration_s);

    let sr = f64::from(spec.sample_rate);
    let n = (duration * sr).round() as usize;
    let mut samples = vec![0.0; n];
    let words: Vec<&str> = transcript.split(' ').collect();
    let edge = (0.02 * sr).round() as usize;
    let gap = (0.03 * sr).round() as usize;
    let voiced = n - 2 * edge - gap * (words.len() - 1);
    let weights: Vec<f64> = words.iter().map(|w| 1.0 + 0.25 * w.len() as f64).collect();
    let total: f64 = weights.iter().sum();
    let glide = prof.glide;
    let f0_at = move |t: f64| f0_base * (1.0 + glide * direction * (2.0 * t / duration - 1.0));
    let mut at = edge;
    for (w, weight) in words.iter().zip(&weights) {
        let len = (voiced as f64 * weight / total).floor() as usize;
        render_word(
            &mut samples,
            at,
            len,
            sr,
            w,
            &f0_at,
            amplitude,
            (prof.jitter, prof.shimmer),
            &mut rng,
        );
        at += len + gap;
    }
    let waveform = Waveform::new(samples, spec.sample_rate)
        .expect("synthesis yields finite samples")
        .quantized();
    Utterance {
        id: utterance_id(index),
        transcript,
        emotion,
        gender,
        waveform,
        gen: GenParams {
            acoustic_class,
            f0_base,
            amplitude,
            jitter: prof.jitter,
            shimmer: prof.shimmer,
            glide,
            keyword: keyword_class.map(|_| slot.to_string()),
            keyword_class,
        },
    }
}

/// Synthesises every utterance, spreading work over the available cores.
pub fn synthesize_all(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(spec.n_utterances);
    if workers <= 1 {
        return Ok((0..spec.n_utterances).map(|i| synthesize_utterance(spec, i)).collect());
    }
    let mut slots: Vec<Option<Utterance>> = vec![None; spec.n_utterances];
    let chunk = spec.n_utterances.div_ceil(workers);
    std::thread::scope(|s| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(synthesize_utterance(spec, c * chunk + j));
                }
            });
        }
    });
    Ok(slots.into_iter().map(|u| u.expect("every slot is filled")).collect())
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "corpus.json";
const WAV_DIR: &str = "wav";

/// Outcome of [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerateOutcome {
    Written { utterances: usize },
    UpToDate { utterances: usize },
}

fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn existing_is_current(spec: &CorpusSpec, out_dir: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(out_dir.join(SPEC_FILE)) else {
        return false;
    };
    let Ok(old) = serde_json::from_str::<CorpusSpec>(&text) else {
        return false;
    };
    if &old != spec {
        return false;
    }
    let Ok(records) = read_manifest(&out_dir.join(MANIFEST_FILE)) else {
        return false;
    };
    records.len() == spec.n_utterances
        && records
            .iter()
            .all(|r| file_sha256(&out_dir.join(&r.wav)).is_ok_and(|h| h == r.sha256))
}

/// Writes waveforms, the manifest and the spec under `out_dir`. A directory
/// already holding this exact corpus is left untouched.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<GenerateOutcome> {
    spec.validate()?;
    if existing_is_current(spec, out_dir) {
        return Ok(GenerateOutcome::UpToDate {
            utterances: spec.n_utterances,
        });
    }
    let wav_dir = out_dir.join(WAV_DIR);
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::storage(&wav_dir, e))?;
    let utts = synthesize_all(spec)?;
    let mut records = Vec::with_capacity(utts.len());
    for u in &utts {
        let rel = format!("{WAV_DIR}/{}.wav", u.id);
        let path = out_dir.join(&rel);
        write_wav(&path, &u.waveform)?;
        records.push(UtteranceRecord {
            id: u.id.clone(),
            wav: rel,
            transcript: u.transcript.clone(),
            emotion: u.emotion,
            gender: u.gender,
            split: Split::Train,
            sha256: file_sha256(&path)?,
            gen: u.gen.clone(),
        });
    }
    let records = split_manifest(&records, &spec.split, spec.seed)?.into_records();
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    let spec_path = out_dir.join(SPEC_FILE);
    let text = serde_json::to_string_pretty(spec).expect("spec serialises");
    std::fs::write(&spec_path, text + "\n").map_err(|e| Error::storage(&spec_path, e))?;
    Ok(GenerateOutcome::Written {
        utterances: records.len(),
    })
}

/// Rule-based reference classifier: an emotion keyword in the transcript
/// decides; otherwise the pitch tertile votes for the class most common in
/// that tertile on the fitting data.
#[derive(Clone, Debug, PartialEq)]
pub struct CueOracle {
    pub classes: Vec<EmotionCode>,
    pub t_low: f64,
    pub t_high: f64,
    pub tertile_class: [EmotionCode; 3],
}

impl CueOracle {
    fn tertile(&self, pitch: f64) -> usize {
        if pitch < self.t_low {
            0
        } else if pitch < self.t_high {
            1
        } else {
            2
        }
    }

    /// `samples` are `(mean pitch, label)` pairs from the fitting split.
    pub fn fit(classes: &[EmotionCode], samples: &[(f64, EmotionCode)]) -> Result<Self> {
        let pitches: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let t = crate::paralinguistics::fit_thresholds(&pitches)?;
        let mut oracle = CueOracle {
            classes: classes.to_vec(),
            t_low: t.t_low,
            t_high: t.t_high,
            tertile_class: [classes[0]; 3],
        };
        let mut counts: [BTreeMap<EmotionCode, usize>; 3] = Default::default();
        for &(p, c) in samples {
            *counts[oracle.tertile(p)].entry(c).or_default() += 1;
        }
        for (k, m) in counts.iter().enumerate() {
            if let Some((&c, _)) = m.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))) {
                oracle.tertile_class[k] = c;
            }
        }
        Ok(oracle)
    }

    pub fn predict(&self, transcript: &str, mean_pitch: Option<f64>) -> EmotionCode {
        if let Some(c) = keyword_class(transcript, &self.classes) {
            return c;
        }
        match mean_pitch {
            Some(p) => self.tertile_class[self.tertile(p)],
            None => self.tertile_class[1],
        }
    }
}
