//! Per-utterance model inputs: normalised encoder features plus the
//! paralinguistic vector and its tertile labels.

use std::path::Path;

use crate::audio::{self, EncoderSpec};
use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};
use crate::paralinguistics::{self, BinnedFeatures, ParalinguisticVector, PitchParams, TertileBins};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Parameter-name prefix of the frozen feature normaliser.
pub const FEATURE_PREFIX: &str = "feat.";
const FEAT_MEAN: &str = "feat.mean";
const FEAT_INV_STD: &str = "feat.inv_std";
const MIN_STD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Example {
    pub record: UtteranceRecord,
    /// `n × d_ae` encoder output; normalised once [`normalize_all`] ran.
    pub features: Tensor,
    pub para: ParalinguisticVector,
    pub binned: Option<BinnedFeatures>,
}

/// Order-preserving map over `items` on all available cores.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Reads, encodes and measures every record; `corpus_dir` is the manifest's
/// directory.
pub fn extract_examples(
    records: &[UtteranceRecord],
    corpus_dir: &Path,
    encoder: &EncoderSpec,
    encoder_params: Option<&ParamStore>,
    pitch: &PitchParams,
) -> Result<Vec<Example>> {
    par_map(records, |r| {
        let w = audio::read_wav(&corpus_dir.join(&r.wav))?;
        let features = audio::encode(&w, encoder, encoder_params)?.values;
        let para = paralinguistics::extract(&w, r.gender, pitch)?;
        Ok(Example {
            record: r.clone(),
            features,
            para,
            binned: None,
        })
    })
    .into_iter()
    .collect()
}

/// Per-channel mean and inverse standard deviation over all training frames.
pub fn fit_normalizer(train: &[Example]) -> Result<ParamStore> {
    let d = train
        .first()
        .ok_or_else(|| Error::InsufficientData("no training features to normalise".into()))?
        .features
        .cols();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for ex in train {
        for r in 0..ex.features.rows() {
            for (j, &v) in ex.features.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        n += ex.features.rows();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let inv_std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| 1.0 / (s / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD))
        .collect();
    let mut p = ParamStore::new();
    p.insert(FEAT_MEAN, Tensor::from_vec(1, d, mean));
    p.insert(FEAT_INV_STD, Tensor::from_vec(1, d, inv_std));
    p.freeze_prefix(FEATURE_PREFIX);
    Ok(p)
}

pub fn normalize(features: &Tensor, params: &ParamStore) -> Result<Tensor> {
    let (Some(mean), Some(inv)) = (params.get(FEAT_MEAN), params.get(FEAT_INV_STD)) else {
        return Err(Error::MissingPrerequisite("feature normaliser parameters".into()));
    };
    if mean.cols() != features.cols() {
        return Err(Error::Config(format!(
            "features have {} channels, normaliser expects {}",
            features.cols(),
            mean.cols()
        )));
    }
    let mut out = features.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean.get(0, j)) * inv.get(0, j);
        }
    }
    Ok(out)
}

/// Normalises features in place and attaches tertile labels.
pub fn normalize_all(examples: &mut [Example], params: &ParamStore, bins: Option<&TertileBins>) -> Result<()> {
    for ex in examples {
        ex.features = normalize(&ex.features, params)?;
        ex.binned = bins.map(|b| b.bin(&ex.para));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_utterance, CorpusSpec, Split};

    fn example(features: Tensor) -> Example {
        let u = synthesize_utterance(&CorpusSpec::default(), 0);
        Example {
            record: UtteranceRecord {
                id: u.id,
                wav: String::new(),
                transcript: u.transcript,
                emotion: u.emotion,
                gender: u.gender,
                split: Split::Train,
                sha256: String::new(),
                gen: u.gen,
            },
            features,
            para: ParalinguisticVector {
                loudness: 0.1,
                mean_pitch: None,
                pitch_range: None,
                jitter: None,
                shimmer: None,
                gender: u.gender,
            },
            binned: None,
        }
    }

    #[test]
    fn normalised_training_frames_are_standardised() {
        let a = example(Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 10.0]]));
        let b = example(Tensor::from_rows(&[vec![5.0, 10.0]]));
        let p = fit_normalizer(&[a.clone(), b]).unwrap();
        assert!(p.is_frozen(FEAT_MEAN));
        let z = normalize(&a.features, &p).unwrap();
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((z.get(0, 0) + 2.0 / sd).abs() < 1e-12);
        assert!((z.get(1, 0)).abs() < 1e-12);
        // constant channel is centred, not blown up
        assert_eq!(z.get(0, 1), 0.0);
    }

    #[test]
    fn par_map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
