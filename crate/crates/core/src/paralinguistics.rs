//! Loudness, pitch statistics, jitter and shimmer, plus tertile binning of
//! those values into `low` / `medium` / `high` labels for prompt hints.
//!
//! Pitch is tracked with a framewise normalised cross-correlation. Jitter
//! and shimmer work on individual glottal-like cycles, located by peak
//! picking guided by the frame pitch.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Loudness,
    MeanPitch,
    PitchRange,
    Jitter,
    Shimmer,
}

impl Feature {
    pub const ALL: [Feature; 5] = [
        Feature::Loudness,
        Feature::MeanPitch,
        Feature::PitchRange,
        Feature::Jitter,
        Feature::Shimmer,
    ];

    /// Label used in rendered hint lines.
    pub fn label(self) -> &'static str {
        match self {
            Feature::Loudness => "loudness",
            Feature::MeanPitch => "pitch",
            Feature::PitchRange => "pitch range",
            Feature::Jitter => "jitter",
            Feature::Shimmer => "shimmer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParalinguisticVector {
    pub loudness: f64,
    pub mean_pitch: Option<f64>,
    pub pitch_range: Option<f64>,
    pub jitter: Option<f64>,
    pub shimmer: Option<f64>,
    pub gender: Gender,
}

impl ParalinguisticVector {
    pub fn value(&self, f: Feature) -> Option<f64> {
        match f {
            Feature::Loudness => Some(self.loudness),
            Feature::MeanPitch => self.mean_pitch,
            Feature::PitchRange => self.pitch_range,
            Feature::Jitter => self.jitter,
            Feature::Shimmer => self.shimmer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchParams {
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
}

impl Default for PitchParams {
    fn default() -> Self {
        PitchParams {
            frame_len_s: 0.040,
            hop_s: 0.010,
            f0_min: 60.0,
            f0_max: 500.0,
            voicing_threshold: 0.45,
        }
    }
}

impl PitchParams {
    fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max && self.f0_max < nyquist) {
            return Err(Error::Config(format!(
                "pitch search range must satisfy 0 < f0_min < f0_max < {nyquist} Hz, got [{}, {}]",
                self.f0_min, self.f0_max
            )));
        }
        if self.hop_s <= 0.0 {
            return Err(Error::Config("pitch hop must be positive".into()));
        }
        if self.frame_len_s * self.f0_min < 2.0 - 1e-9 {
            return Err(Error::Config(format!(
                "frame of {} s does not cover two periods of {} Hz",
                self.frame_len_s, self.f0_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchFrame {
    pub index: usize,
    pub f0: Option<f64>,
}

/// Frame-level pitch plus, when estimated from audio, the cycle peak
/// positions (fractional sample indices) of each voiced run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub frames: Vec<PitchFrame>,
    pub hop_s: f64,
    pub frame_len_s: f64,
    pub cycles: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl PitchTrack {
    /// A track built from frame values alone (no cycle marks).
    pub fn from_f0s(f0s: &[Option<f64>], hop_s: f64, sample_rate: u32) -> Self {
        PitchTrack {
            frames: f0s
                .iter()
                .enumerate()
                .map(|(index, &f0)| PitchFrame { index, f0 })
                .collect(),
            hop_s,
            frame_len_s: PitchParams::default().frame_len_s,
            cycles: Vec::new(),
            sample_rate,
        }
    }

    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().filter_map(|f| f.f0)
    }

    pub fn voicing_rate(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.voiced().count() as f64 / self.frames.len() as f64
    }

    /// Runs of consecutive voiced frames as `(first, last)` inclusive indices.
    fn voiced_runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, f) in self.frames.iter().enumerate() {
            match (f.f0.is_some(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.frames.len() - 1));
        }
        runs
    }
}

pub fn compute_loudness(w: &Waveform) -> Result<f64> {
    let s = w.samples();
    if s.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    Ok((s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt())
}

pub fn estimate_pitch_track(w: &Waveform, params: &PitchParams) -> Result<PitchTrack> {
    params.validate(w.sample_rate())?;
    let sr = f64::from(w.sample_rate());
    let frame_len = (params.frame_len_s * sr).round() as usize;
    let hop = ((params.hop_s * sr).round() as usize).max(1);
    let x = w.samples();
    if x.len() < frame_len {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than one {frame_len}-sample analysis frame",
            x.len()
        )));
    }
    let lag_min = ((sr / params.f0_max).floor() as usize).max(1);
    let lag_max = ((sr / params.f0_min).ceil() as usize).min(frame_len - 2);
    let n_frames = (x.len() - frame_len) / hop + 1;

    let mut frames = Vec::with_capacity(n_frames);
    let mut nccf = vec![0.0; lag_max + 2];
    for i in 0..n_frames {
        let frame = &x[i * hop..i * hop + frame_len];
        let f0 = frame_pitch(frame, lag_min, lag_max, sr, params, &mut nccf);
        frames.push(PitchFrame { index: i, f0 });
    }
    let mut track = PitchTrack {
        frames,
        hop_s: hop as f64 / sr,
        frame_len_s: frame_len as f64 / sr,
        cycles: Vec::new(),
        sample_rate: w.sample_rate(),
    };
    track.cycles = detect_cycles(w, &track);
    Ok(track)
}

fn frame_pitch(
    frame: &[f64],
    lag_min: usize,
    lag_max: usize,
    sr: f64,
    params: &PitchParams,
    nccf: &mut [f64],
) -> Option<f64> {
    let n = frame.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in frame {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    if prefix[n] < 1e-10 {
        return None;
    }
    let lo = lag_min.saturating_sub(1).max(1);
    let hi = lag_max + 1;
    for lag in lo..=hi.min(n - 1) {
        let m = n - lag;
        let dot: f64 = frame[..m].iter().zip(&frame[lag..]).map(|(a, b)| a * b).sum();
        let e0 = prefix[m];
        let e1 = prefix[n] - prefix[lag];
        let denom = (e0 * e1).sqrt();
        nccf[lag] = if denom > 0.0 { dot / denom } else { 0.0 };
    }
    let best = (lag_min..=lag_max).map(|l| nccf[l]).fold(f64::NEG_INFINITY, f64::max);
    if best < params.voicing_threshold {
        return None;
    }
    // Shortest lag that is a local peak close to the global best; avoids
    // picking sub-harmonic multiples of the true period.
    let lag = (lag_min..=lag_max).find(|&l| {
        let v = nccf[l];
        v >= 0.9 * best && v >= params.voicing_threshold && v >= nccf[l - 1] && v >= nccf[l + 1]
    })?;
    let (a, b, c) = (nccf[lag - 1], nccf[lag], nccf[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = sr / (lag as f64 + shift);
    Some(f0.clamp(params.f0_min, params.f0_max))
}

/// Parabolic refinement of a local maximum at integer index `i`.
fn refine_peak(x: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= x.len() {
        return (i as f64, x[i]);
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-15 {
        return (i as f64, b);
    }
    let shift = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
    (i as f64 + shift, b - 0.25 * (a - c) * shift)
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..hi {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Locates successive waveform peaks, one per pitch period, inside every
/// voiced run of `track`.
pub fn detect_cycles(w: &Waveform, track: &PitchTrack) -> Vec<Vec<f64>> {
    let x = w.samples();
    let sr = f64::from(w.sample_rate());
    let hop = track.hop_s * sr;
    let frame_len = track.frame_len_s * sr;
    let mut out = Vec::new();
    for (first, last) in track.voiced_runs() {
        let start = (first as f64 * hop).floor() as usize;
        let end = ((last as f64 * hop + frame_len).ceil() as usize).min(x.len());
        let period_at = |pos: f64| -> f64 {
            let idx = ((pos - frame_len / 2.0) / hop).round();
            let idx = (idx.max(first as f64) as usize).min(last);
            let f0 = track.frames[idx]
                .f0
                .or_else(|| track.frames[first..=last].iter().find_map(|f| f.f0))
                .unwrap_or(100.0);
            sr / f0
        };
        let t0 = period_at(start as f64);
        let first_hi = (start + t0.ceil() as usize).min(end);
        if first_hi <= start + 1 {
            continue;
        }
        let mut marks = Vec::new();
        let mut i = argmax(x, start, first_hi);
        loop {
            let (pos, _) = refine_peak(x, i);
            marks.push(pos);
            let t = period_at(pos);
            let lo = (pos + 0.75 * t).ceil() as usize;
            let hi = (pos + 1.25 * t).floor() as usize + 1;
            if hi > end || lo >= hi {
                break;
            }
            i = argmax(x, lo, hi);
        }
        if marks.len() >= 2 {
            out.push(marks);
        }
    }
    out
}

/// `(mean voiced f0, max − min voiced f0)`, absent when nothing is voiced.
pub fn compute_pitch_stats(track: &PitchTrack) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f0 in track.voiced() {
        n += 1;
        sum += f0;
        lo = lo.min(f0);
        hi = hi.max(f0);
    }
    (n > 0).then(|| (sum / n as f64, hi - lo))
}

/// Mean absolute difference of consecutive values over their mean, pooled
/// across runs. Absent when no run has two values.
fn local_perturbation(runs: &[Vec<f64>]) -> Option<f64> {
    let mut diff_sum = 0.0;
    let mut diff_n = 0usize;
    let mut val_sum = 0.0;
    let mut val_n = 0usize;
    for run in runs {
        if run.len() < 2 {
            continue;
        }
        for pair in run.windows(2) {
            diff_sum += (pair[0] - pair[1]).abs();
            diff_n += 1;
        }
        val_sum += run.iter().sum::<f64>();
        val_n += run.len();
    }
    if diff_n == 0 || val_sum <= 0.0 {
        return None;
    }
    Some((diff_sum / diff_n as f64) / (val_sum / val_n as f64))
}

/// Relative local jitter over consecutive periods.
///
/// Uses cycle-to-cycle periods when the track carries cycle marks, otherwise
/// the periods `1/f0` of consecutive voiced frames.
pub fn compute_jitter(track: &PitchTrack) -> Option<f64> {
    let sr = f64::from(track.sample_rate);
    let runs: Vec<Vec<f64>> = if track.cycles.is_empty() {
        track
            .voiced_runs()
            .into_iter()
            .map(|(a, b)| {
                track.frames[a..=b]
                    .iter()
                    .filter_map(|f| f.f0.map(|v| 1.0 / v))
                    .collect()
            })
            .collect()
    } else {
        track
            .cycles
            .iter()
            .map(|marks| marks.windows(2).map(|p| (p[1] - p[0]) / sr).collect())
            .collect()
    };
    local_perturbation(&runs)
}

/// Relative local shimmer over per-cycle peak amplitudes.
pub fn compute_shimmer(w: &Waveform, track: &PitchTrack) -> Option<f64> {
    let detected;
    let cycles = if track.cycles.is_empty() {
        detected = detect_cycles(w, track);
        &detected
    } else {
        &track.cycles
    };
    let x = w.samples();
    let runs: Vec<Vec<f64>> = cycles
        .iter()
        .map(|marks| {
            marks
                .iter()
                .map(|&m| {
                    let i = (m.round() as usize).min(x.len() - 1);
                    // re-locate the integer peak near the mark and refine it
                    let lo = i.saturating_sub(1);
                    let hi = (i + 2).min(x.len());
                    refine_peak(x, argmax(x, lo, hi)).1.abs()
                })
                .collect()
        })
        .collect();
    local_perturbation(&runs)
}

/// Runs every extractor on one utterance.
pub fn extract(w: &Waveform, gender: Gender, params: &PitchParams) -> Result<ParalinguisticVector> {
    let loudness = compute_loudness(w)?;
    let track = estimate_pitch_track(w, params)?;
    let stats = compute_pitch_stats(&track);
    Ok(ParalinguisticVector {
        loudness,
        mean_pitch: stats.map(|s| s.0),
        pitch_range: stats.map(|s| s.1),
        jitter: compute_jitter(&track),
        shimmer: compute_shimmer(w, &track),
        gender,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_low: f64,
    pub t_high: f64,
    pub fitted_on: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TertileBins {
    pub features: BTreeMap<Feature, Thresholds>,
}

/// Percentile with linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn fit_thresholds(values: &[f64]) -> Result<Thresholds> {
    if values.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "tertile bins need at least 3 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in tertile training data".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Thresholds {
        t_low: percentile(&sorted, 1.0 / 3.0),
        t_high: percentile(&sorted, 2.0 / 3.0),
        fitted_on: values.len(),
    })
}

pub fn fit_tertile_bins(training: &[ParalinguisticVector]) -> Result<TertileBins> {
    let mut features = BTreeMap::new();
    for f in Feature::ALL {
        let values: Vec<f64> = training.iter().filter_map(|v| v.value(f)).collect();
        let t =
            fit_thresholds(&values).map_err(|e| Error::InsufficientData(format!("feature '{}': {e}", f.label())))?;
        features.insert(f, t);
    }
    Ok(TertileBins { features })
}

pub fn bin_feature(value: f64, t: &Thresholds) -> Level {
    if value < t.t_low {
        Level::Low
    } else if value < t.t_high {
        Level::Medium
    } else {
        Level::High
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedFeatures {
    pub labels: BTreeMap<Feature, Level>,
    pub gender: Gender,
}

impl TertileBins {
    pub fn bin(&self, v: &ParalinguisticVector) -> BinnedFeatures {
        let labels = self
            .features
            .iter()
            .filter_map(|(&f, t)| v.value(f).map(|x| (f, bin_feature(x, t))))
            .collect();
        BinnedFeatures {
            labels,
            gender: v.gender,
        }
    }
}

/// One line of a feature report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub raw: ParalinguisticVector,
    pub binned: Option<BinnedFeatures>,
}
