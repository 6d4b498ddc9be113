//! Frozen audio feature extractors.
//!
//! Two implementations sit behind [`AudioEncoder`]: a parameter-free
//! log-magnitude triangular filterbank, and a small convolution + attention
//! encoder that is pretrained on masked-frame reconstruction and then frozen.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, NORM_EPS};
use crate::params::{Bound, ParamStore, ENCODER_PREFIX};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SpectralStandin,
    TinyConvTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub d_ae: usize,
    pub frame_hop_s: f64,
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default = "default_identifier")]
    pub identifier: String,
    /// Attention heads of the trainable encoder.
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_window_s() -> f64 {
    0.025
}

fn default_identifier() -> String {
    "spectral-standin-v1".into()
}

fn default_heads() -> usize {
    4
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::SpectralStandin,
            d_ae: 64,
            frame_hop_s: 0.010,
            window_s: default_window_s(),
            identifier: default_identifier(),
            heads: default_heads(),
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_ae < 4 {
            return Err(Error::Config(format!("d_ae must be at least 4, got {}", self.d_ae)));
        }
        if !(self.frame_hop_s > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::Config("encoder hop and window must be positive".into()));
        }
        if self.kind == EncoderKind::TinyConvTransformer && (self.heads == 0 || self.d_ae % self.heads != 0) {
            return Err(Error::Config(format!(
                "encoder heads ({}) must divide d_ae ({})",
                self.heads, self.d_ae
            )));
        }
        Ok(())
    }
}

/// Encoder output: one `d_ae`-wide row per analysis frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub values: Tensor,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(values: Tensor, source_id: impl Into<String>) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidInput("feature sequence has no frames".into()));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn d_ae(&self) -> usize {
        self.values.cols()
    }
}

pub trait AudioEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, w: &Waveform, source_id: &str) -> Result<FeatureSequence>;
}

fn hop_and_window(spec: &EncoderSpec, w: &Waveform) -> Result<(usize, usize, usize)> {
    let sr = f64::from(w.sample_rate());
    let hop = (spec.frame_hop_s * sr).round() as usize;
    let win = (spec.window_s * sr).round() as usize;
    if hop == 0 || win == 0 {
        return Err(Error::Config("encoder hop/window shorter than one sample".into()));
    }
    let n = w.len() / hop;
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than one {hop}-sample hop",
            w.len()
        )));
    }
    Ok((hop, win, n))
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

const STANDIN_FMIN: f64 = 40.0;
const STANDIN_NFFT: usize = 1024;
const LOG_FLOOR: f64 = 1e-6;

/// Log-magnitude triangular filterbank on a mel-spaced frequency axis.
pub struct SpectralStandIn {
    spec: EncoderSpec,
    sample_rate: u32,
    filters: Tensor,
    centers: Vec<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectralStandIn {
    pub fn new(spec: EncoderSpec, sample_rate: u32) -> Result<Self> {
        spec.validate()?;
        let sr = f64::from(sample_rate);
        let win = (spec.window_s * sr).round() as usize;
        if win > STANDIN_NFFT {
            return Err(Error::Config(format!(
                "analysis window of {win} samples exceeds the {STANDIN_NFFT}-point transform"
            )));
        }
        let n_bins = STANDIN_NFFT / 2 + 1;
        let (lo, hi) = (mel(STANDIN_FMIN), mel(sr / 2.0));
        let points: Vec<f64> = (0..spec.d_ae + 2)
            .map(|i| mel_inv(lo + (hi - lo) * i as f64 / (spec.d_ae + 1) as f64))
            .collect();
        let mut filters = Tensor::zeros(spec.d_ae, n_bins);
        for c in 0..spec.d_ae {
            let (l, m, r) = (points[c], points[c + 1], points[c + 2]);
            for b in 0..n_bins {
                let f = b as f64 * sr / STANDIN_NFFT as f64;
                let wgt = if f > l && f <= m {
                    (f - l) / (m - l)
                } else if f > m && f < r {
                    (r - f) / (r - m)
                } else {
                    0.0
                };
                filters.set(c, b, wgt);
            }
        }
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(STANDIN_NFFT);
        Ok(SpectralStandIn {
            spec,
            sample_rate,
            filters,
            centers: points[1..=spec_len(&points)].to_vec(),
            window,
            fft,
        })
    }

    /// Centre frequency (Hz) of every filterbank channel.
    pub fn channel_centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    /// Power spectrum of frame `i` (Hann window, zero padded).
    pub fn frame_power(&self, x: &[f64], start: usize) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); STANDIN_NFFT];
        for (j, w) in self.window.iter().enumerate() {
            if let Some(&s) = x.get(start + j) {
                buf[j].re = s * w;
            }
        }
        self.fft.process(&mut buf);
        buf[..STANDIN_NFFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

fn spec_len(points: &[f64]) -> usize {
    points.len() - 2
}

impl AudioEncoder for SpectralStandIn {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, w: &Waveform, source_id: &str) -> Result<FeatureSequence> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "encoder configured for {} Hz, got {} Hz audio",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        let (hop, _, n) = hop_and_window(&self.spec, w)?;
        let x = w.samples();
        let mut out = Tensor::zeros(n, self.spec.d_ae);
        for i in 0..n {
            let p = self.frame_power(x, i * hop);
            for c in 0..self.spec.d_ae {
                let e: f64 = self.filters.row(c).iter().zip(&p).map(|(a, b)| a * b).sum();
                out.set(i, c, (e + LOG_FLOOR).log10());
            }
        }
        FeatureSequence::new(out, source_id)
    }
}

/// Strided convolution front end and two attention layers.
pub struct TinyConvEncoder {
    spec: EncoderSpec,
    params: ParamStore,
}

const TINY_LAYERS: usize = 2;

impl TinyConvEncoder {
    /// Fresh parameters under the `enc.` prefix.
    pub fn init_params(spec: &EncoderSpec, sample_rate: u32, seed: u64) -> Result<ParamStore> {
        spec.validate()?;
        let win = (spec.window_s * f64::from(sample_rate)).round() as usize;
        let d = spec.d_ae;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        nn::init_linear(&mut s, "enc.conv1", d, win, true, &mut rng);
        for k in 0..3 {
            nn::init_linear(&mut s, &format!("enc.conv2.tap{k}"), d, d, k == 1, &mut rng);
        }
        for l in 0..TINY_LAYERS {
            nn::init_encoder_block(&mut s, &format!("enc.layers.{l}"), d, 2 * d, &mut rng);
        }
        s.insert("enc.final_norm", Tensor::full(1, d, 1.0));
        Ok(s)
    }

    pub fn new(spec: EncoderSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        if params.count(ENCODER_PREFIX) == 0 {
            return Err(Error::Config("trainable encoder has no parameters".into()));
        }
        Ok(TinyConvEncoder {
            spec,
            params: params.subset(ENCODER_PREFIX),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Windowed sample frames (`n × window`), zero padded at the end.
    fn frames(spec: &EncoderSpec, w: &Waveform, mask: &[bool]) -> Result<Tensor> {
        let (hop, win, n) = hop_and_window(spec, w)?;
        let x = w.samples();
        let mut t = Tensor::zeros(n, win);
        for i in 0..n {
            if mask.get(i).copied().unwrap_or(false) {
                continue;
            }
            for j in 0..win {
                if let Some(&s) = x.get(i * hop + j) {
                    t.set(i, j, s);
                }
            }
        }
        Ok(t)
    }

    /// Builds the encoder graph over constant input frames.
    pub fn forward(g: &mut Graph, p: &Bound, frames: Var, heads: usize) -> Var {
        let h = nn::linear(g, frames, p.var("enc.conv1.weight"), Some(p.var("enc.conv1.bias")));
        let h = g.silu(h);
        let n = g.value(h).rows();
        let d = g.value(h).cols();
        let pad = g.constant(Tensor::zeros(1, d));
        let padded = g.concat_rows(&[h, pad]);
        let mut acc: Option<Var> = None;
        for (k, shift) in [-1isize, 0, 1].into_iter().enumerate() {
            let idx: Vec<usize> = (0..n as isize)
                .map(|i| {
                    let j = i + shift;
                    if j < 0 || j >= n as isize {
                        n
                    } else {
                        j as usize
                    }
                })
                .collect();
            let shifted = g.gather_rows(padded, &idx);
            let name = format!("enc.conv2.tap{k}");
            let y = nn::linear(
                g,
                shifted,
                p.var(&format!("{name}.weight")),
                p.get(&format!("{name}.bias")),
            );
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        let mut x = g.silu(acc.expect("three taps"));
        for l in 0..TINY_LAYERS {
            x = nn::encoder_block(g, p, &format!("enc.layers.{l}"), x, heads);
        }
        g.rms_norm(x, p.var("enc.final_norm"), NORM_EPS)
    }
}

impl AudioEncoder for TinyConvEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, w: &Waveform, source_id: &str) -> Result<FeatureSequence> {
        let frames = Self::frames(&self.spec, w, &[])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, &|_| false);
        let f = g.constant(frames);
        let out = Self::forward(&mut g, &p, f, self.spec.heads);
        FeatureSequence::new(g.value(out).clone(), source_id)
    }
}

/// Masked-frame reconstruction pretraining for the trainable encoder.
///
/// Random frames are zeroed at the input and the encoder output at those
/// positions is regressed, through a linear head, onto the filterbank
/// features of the clean audio. Returns the mean loss of the final pass.
pub fn pretrain_tiny_encoder(
    params: &mut ParamStore,
    spec: &EncoderSpec,
    waves: &[Waveform],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    use crate::curriculum::optim::{adamw_step, OptimState};

    let sr = waves
        .first()
        .ok_or_else(|| Error::InsufficientData("no audio for encoder pretraining".into()))?
        .sample_rate();
    let target_enc = SpectralStandIn::new(
        EncoderSpec {
            kind: EncoderKind::SpectralStandin,
            ..spec.clone()
        },
        sr,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !params.contains("enc.recon_head.weight") {
        nn::init_linear(params, "enc.recon_head", spec.d_ae, spec.d_ae, true, &mut rng);
    }
    let mut state = OptimState::default();
    let mut last = 0.0;
    for step in 0..steps {
        let w = &waves[step % waves.len()];
        let target = target_enc.encode(w, "")?.values;
        let n = target.rows();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_mask = (n as f64 * 0.15).ceil() as usize;
        let masked: Vec<usize> = idx[..n_mask.max(1)].to_vec();
        let mut mask = vec![false; n];
        for &i in &masked {
            mask[i] = true;
        }
        let frames = TinyConvEncoder::frames(spec, w, &mask)?;
        let mut g = Graph::new();
        let frozen = params.clone();
        let p = params.bind(&mut g, &|name| !frozen.is_frozen(name));
        let f = g.constant(frames);
        let h = TinyConvEncoder::forward(&mut g, &p, f, spec.heads);
        let pred = nn::linear(
            &mut g,
            h,
            p.var("enc.recon_head.weight"),
            Some(p.var("enc.recon_head.bias")),
        );
        let pred = g.gather_rows(pred, &masked);
        let mut tgt = Tensor::zeros(masked.len(), spec.d_ae);
        for (r, &i) in masked.iter().enumerate() {
            tgt.row_mut(r).copy_from_slice(target.row(i));
        }
        let tgt = g.constant(tgt);
        let diff = g.sub(pred, tgt);
        let sq = g.mul(diff, diff);
        let total = g.sum_all(sq);
        let loss = g.scale(total, 1.0 / (masked.len() * spec.d_ae) as f64);
        last = g.value(loss).item();
        if !last.is_finite() {
            return Err(Error::Numeric(format!(
                "encoder pretraining loss is {last} at step {step}"
            )));
        }
        let mut grads = g.backward(loss);
        let named = p
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect();
        adamw_step(params, &named, &mut state, lr, 0.0)?;
    }
    Ok(last)
}

/// Encodes with whichever implementation `spec` names.
pub fn encode(w: &Waveform, spec: &EncoderSpec, params: Option<&ParamStore>) -> Result<FeatureSequence> {
    match spec.kind {
        EncoderKind::SpectralStandin => SpectralStandIn::new(spec.clone(), w.sample_rate())?.encode(w, ""),
        EncoderKind::TinyConvTransformer => {
            let p = params.ok_or_else(|| Error::Config("trainable encoder requires parameters".into()))?;
            TinyConvEncoder::new(spec.clone(), p.clone())?.encode(w, "")
        }
    }
}

/// Marks the encoder parameters frozen; idempotent.
pub fn freeze(params: &mut ParamStore) {
    params.freeze_prefix(ENCODER_PREFIX);
}

pub fn build_encoder(spec: &EncoderSpec, sample_rate: u32, params: &ParamStore) -> Result<Box<dyn AudioEncoder>> {
    Ok(match spec.kind {
        EncoderKind::SpectralStandin => Box::new(SpectralStandIn::new(spec.clone(), sample_rate)?),
        EncoderKind::TinyConvTransformer => Box::new(TinyConvEncoder::new(spec.clone(), params.clone())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (secs * 16000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn frame_count_follows_hop() {
        let enc = SpectralStandIn::new(EncoderSpec::default(), 16000).unwrap();
        let f = enc.encode(&sine(220.0, 1.0), "a").unwrap();
        assert!((f.n() as i64 - 100).abs() <= 1);
        assert_eq!(f.d_ae(), 64);
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let enc = SpectralStandIn::new(EncoderSpec::default(), 16000).unwrap();
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(enc.encode(&w, ""), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn standin_is_deterministic_and_shift_local() {
        let enc = SpectralStandIn::new(EncoderSpec::default(), 16000).unwrap();
        let w = sine(310.0, 0.5);
        let a = enc.encode(&w, "").unwrap();
        assert_eq!(a, enc.encode(&w, "").unwrap());
        let k = 3;
        let mut shifted = vec![0.0; k * 160];
        shifted.extend_from_slice(w.samples());
        let b = enc.encode(&Waveform::new(shifted, 16000).unwrap(), "").unwrap();
        for i in 1..a.n() - 4 {
            for c in 0..64 {
                assert!((a.values.get(i, c) - b.values.get(i + k, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sine_peaks_in_nearest_channel() {
        let enc = SpectralStandIn::new(EncoderSpec::default(), 16000).unwrap();
        let nearest = enc
            .channel_centers()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 220.0).abs().total_cmp(&(b.1 - 220.0).abs()))
            .unwrap()
            .0;
        // Oracle: filterbank response computed from a direct (non-FFT) DFT of
        // each windowed frame.
        let w = sine(220.0, 0.5);
        let x = w.samples();
        let win: Vec<f64> = (0..400)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / 400.0).cos())
            .collect();
        let mut oracle_hits = 0;
        let frames = x.len() / 160;
        for f in 0..frames {
            let mut power = vec![0.0; 513];
            for (b, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..400 {
                    let s = x.get(f * 160 + j).copied().unwrap_or(0.0) * win[j];
                    let ang = -2.0 * PI * (b * j) as f64 / 1024.0;
                    re += s * ang.cos();
                    im += s * ang.sin();
                }
                *p = re * re + im * im;
            }
            let energies: Vec<f64> = (0..64)
                .map(|c| enc.filters().row(c).iter().zip(&power).map(|(a, b)| a * b).sum())
                .collect();
            let arg = energies.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            oracle_hits += usize::from(arg == nearest);
        }
        assert!(
            oracle_hits as f64 >= 0.9 * frames as f64,
            "oracle hits {oracle_hits}/{frames}"
        );

        let feats = enc.encode(&w, "").unwrap();
        let hits = (0..feats.n())
            .filter(|&i| {
                let row = feats.values.row(i);
                row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == nearest
            })
            .count();
        assert!(hits as f64 >= 0.9 * feats.n() as f64, "{hits}/{}", feats.n());
    }

    #[test]
    fn tiny_encoder_shape_and_determinism() {
        let spec = EncoderSpec {
            kind: EncoderKind::TinyConvTransformer,
            d_ae: 16,
            ..EncoderSpec::default()
        };
        let params = TinyConvEncoder::init_params(&spec, 16000, 1).unwrap();
        let enc = TinyConvEncoder::new(spec.clone(), params.clone()).unwrap();
        let w = sine(200.0, 0.3);
        let a = enc.encode(&w, "x").unwrap();
        assert_eq!((a.n(), a.d_ae()), (30, 16));
        assert_eq!(a, enc.encode(&w, "x").unwrap());
        assert_eq!(encode(&w, &spec, Some(&params)).unwrap().values, a.values);
    }

    #[test]
    fn freezing_protects_encoder_from_pretraining_updates() {
        let spec = EncoderSpec {
            kind: EncoderKind::TinyConvTransformer,
            d_ae: 8,
            heads: 2,
            ..EncoderSpec::default()
        };
        let waves = vec![sine(180.0, 0.2), sine(260.0, 0.2)];
        let base = TinyConvEncoder::init_params(&spec, 16000, 4).unwrap();

        let mut frozen = base.clone();
        freeze(&mut frozen);
        freeze(&mut frozen);
        let before = frozen.checksums("enc.conv");
        pretrain_tiny_encoder(&mut frozen, &spec, &waves, 100, 1e-3, 0).unwrap();
        assert_eq!(before, frozen.checksums("enc.conv"));
        assert_eq!(base.checksums("enc.layers"), frozen.checksums("enc.layers"));

        let mut open = base.clone();
        pretrain_tiny_encoder(&mut open, &spec, &waves, 100, 1e-3, 0).unwrap();
        assert_ne!(before, open.checksums("enc.conv"));
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss() {
        let spec = EncoderSpec {
            kind: EncoderKind::TinyConvTransformer,
            d_ae: 8,
            heads: 2,
            ..EncoderSpec::default()
        };
        let waves = vec![sine(180.0, 0.2)];
        let mut p = TinyConvEncoder::init_params(&spec, 16000, 4).unwrap();
        let first = pretrain_tiny_encoder(&mut p.clone(), &spec, &waves, 1, 3e-3, 0).unwrap();
        let later = pretrain_tiny_encoder(&mut p, &spec, &waves, 150, 3e-3, 0).unwrap();
        assert!(later < first, "{later} vs {first}");
    }
}
