use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::GenParams;
use crate::error::{Error, Result};
use crate::paralinguistics::Gender;
use crate::prompts::{EmotionCode, PromptSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!(
                "unknown split '{s}' (expected train, val or test)"
            ))),
        }
    }
}

/// One manifest line. `wav` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub wav: String,
    pub transcript: String,
    pub emotion: EmotionCode,
    pub gender: Gender,
    pub split: Split,
    pub sha256: String,
    pub gen: GenParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {}/{}/{} must lie in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut ids = std::collections::HashSet::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate utterance id '{}'", r.id)));
        }
        if r.transcript.contains('|') {
            return Err(Error::InvalidInput(format!("transcript of '{}' contains '|'", r.id)));
        }
    }
    let f = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(w, "{line}").map_err(|e| Error::storage(path, e))?;
    }
    w.flush().map_err(|e| Error::storage(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord =
            serde_json::from_str(line).map_err(|e| Error::storage(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// The three parts of a stratified split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl SplitManifest {
    pub fn part(&self, split: Split) -> &[UtteranceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// All records back in id order, each tagged with its split.
    pub fn into_records(self) -> Vec<UtteranceRecord> {
        let mut all: Vec<_> = self.train.into_iter().chain(self.val).chain(self.test).collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    pub fn from_records(records: &[UtteranceRecord]) -> Self {
        let mut m = SplitManifest::default();
        for r in records {
            match r.split {
                Split::Train => m.train.push(r.clone()),
                Split::Val => m.val.push(r.clone()),
                Split::Test => m.test.push(r.clone()),
            }
        }
        m
    }
}

/// Shuffles each emotion class with `seed` and cuts it by `ratios`, so every
/// part keeps the global class proportions up to rounding.
pub fn split_manifest(records: &[UtteranceRecord], ratios: &SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    let mut by_class: BTreeMap<EmotionCode, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.emotion).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11);
    let mut out = SplitManifest::default();
    for (class, mut members) in by_class {
        if members.len() < 3 {
            return Err(Error::Stratification(format!(
                "class {class} has {} sample(s); stratified splitting needs at least 3",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (ratios.train * n).round() as usize;
        let n_val = ((ratios.val * n).round() as usize).min(members.len() - n_train);
        for (i, r) in members.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let mut r = r.clone();
            r.split = split;
            match split {
                Split::Train => out.train.push(r),
                Split::Val => out.val.push(r),
                Split::Test => out.test.push(r),
            }
        }
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(out)
}

/// Fits the tokenizer on training transcripts plus every fixed protocol
/// string. Non-training records are refused.
pub fn build_tokenizer(train: &[UtteranceRecord], prompts: &PromptSet, vocab_limit: usize) -> Result<Tokenizer> {
    if let Some(r) = train.iter().find(|r| r.split != Split::Train) {
        return Err(Error::InvalidInput(format!(
            "tokenizer fitting received {} record '{}'",
            r.split, r.id
        )));
    }
    let protocol = prompts.vocabulary_text();
    let texts = train
        .iter()
        .map(|r| r.transcript.as_str())
        .chain(protocol.iter().map(String::as_str));
    Tokenizer::build(texts, vocab_limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_utterance, CorpusSpec};

    fn records(counts: &[(EmotionCode, usize)]) -> Vec<UtteranceRecord> {
        let spec = CorpusSpec {
            n_utterances: 1,
            ..CorpusSpec::default()
        };
        let template = synthesize_utterance(&spec, 0);
        let mut out = Vec::new();
        for &(c, n) in counts {
            for _ in 0..n {
                out.push(UtteranceRecord {
                    id: format!("r{:05}", out.len()),
                    wav: String::new(),
                    transcript: "hello".into(),
                    emotion: c,
                    gender: Gender::Male,
                    split: Split::Train,
                    sha256: String::new(),
                    gen: template.gen.clone(),
                });
            }
        }
        out
    }

    #[test]
    fn sizes_partition_and_proportions() {
        let recs = records(&[
            (EmotionCode::A, 250),
            (EmotionCode::S, 250),
            (EmotionCode::H, 300),
            (EmotionCode::N, 200),
        ]);
        let m = split_manifest(&recs, &SplitRatios::default(), 3).unwrap();
        let sizes = [m.train.len(), m.val.len(), m.test.len()];
        for (got, want) in sizes.iter().zip([800usize, 100, 100]) {
            assert!(got.abs_diff(want) <= 4, "{sizes:?}");
        }
        let mut ids: Vec<&str> = m
            .train
            .iter()
            .chain(&m.val)
            .chain(&m.test)
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(ids.len(), recs.len());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), recs.len());
        for part in [&m.train, &m.val, &m.test] {
            for c in [EmotionCode::A, EmotionCode::H] {
                let global = recs.iter().filter(|r| r.emotion == c).count() as f64 / recs.len() as f64;
                let local = part.iter().filter(|r| r.emotion == c).count() as f64 / part.len() as f64;
                assert!((global - local).abs() <= 0.02, "{c}: {global} vs {local}");
            }
        }
        assert_eq!(m, split_manifest(&recs, &SplitRatios::default(), 3).unwrap());
    }

    #[test]
    fn rare_class_is_a_stratification_error() {
        let recs = records(&[(EmotionCode::A, 20), (EmotionCode::S, 2)]);
        assert!(matches!(
            split_manifest(&recs, &SplitRatios::default(), 1),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let recs = records(&[(EmotionCode::A, 20)]);
        let r = SplitRatios {
            train: 0.8,
            val: 0.3,
            test: 0.1,
        };
        assert!(matches!(split_manifest(&recs, &r, 1), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_round_trips_and_rejects_pipes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = records(&[(EmotionCode::N, 3)]);
        write_manifest(&path, &recs).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), recs);
        let mut bad = recs.clone();
        bad[0].transcript = "a | b".into();
        assert!(write_manifest(&path, &bad).is_err());
    }

    #[test]
    fn tokenizer_refuses_held_out_records() {
        let mut recs = records(&[(EmotionCode::N, 3)]);
        let prompts = PromptSet::builtin(10).unwrap();
        assert!(build_tokenizer(&recs, &prompts, 4000).is_ok());
        recs[1].split = Split::Test;
        assert!(matches!(
            build_tokenizer(&recs, &prompts, 4000),
            Err(Error::InvalidInput(_))
        ));
    }
}
