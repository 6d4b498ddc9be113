//! Versioned single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SERLMCKP" | version u32 | section count u32
//! per section: name length u16 | name | offset u64 | length u64 | sha256
//! section payloads
//! sha256 of every preceding byte
//! ```
//!
//! Tensor sections hold `count u32` followed by `name length u16 | name |
//! rows u32 | cols u32 | f64 values`. Other sections are JSON or UTF-8 text.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::Tokenizer;
use crate::curriculum::optim::{Moments, OptimState};
use crate::error::{Error, Result};
use crate::lm::Phase;
use crate::paralinguistics::TertileBins;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SERLMCKP";
pub const FORMAT_VERSION: u32 = 1;

/// One completed training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub phase: Phase,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub config_hash: String,
    /// Checksum of the trainable tensors at the end of the phase.
    pub trained_digest: String,
}

/// Everything needed to continue an interrupted phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub phase: Phase,
    pub completed_epochs: usize,
    /// Curriculum bookkeeping (early stopping, history) as JSON.
    pub state_json: String,
    pub optim: OptimState,
    /// Parameters of the best epoch so far.
    pub best_params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Run configuration as TOML text.
    pub config_text: String,
    pub params: ParamStore,
    pub tokenizer: Tokenizer,
    pub bins: Option<TertileBins>,
    pub rng: ChaCha8Rng,
    pub provenance: Vec<ProvenanceEntry>,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn last_phase(&self) -> Option<Phase> {
        self.provenance.last().map(|p| p.phase)
    }
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
}

fn encode_tensors<'a>(items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((items.len() as u32).to_le_bytes());
    for (name, t) in items {
        put_name(&mut out, name);
        out.extend((t.rows() as u32).to_le_bytes());
        out.extend((t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute file offset of `buf[0]`, for diagnostics.
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity {
                offset: (self.base + self.pos) as u64,
                message: format!("truncated: need {n} more byte(s)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let at = self.base + self.pos;
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity {
            offset: at as u64,
            message: "name is not UTF-8".into(),
        })
    }
}

fn decode_tensors(bytes: &[u8], base: usize) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        base,
    };
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.name()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity {
            offset: (base + r.pos) as u64,
            message: "trailing bytes in tensor section".into(),
        });
    }
    Ok(out)
}

fn encode_params(p: &ParamStore) -> Vec<u8> {
    let items: Vec<(&str, &Tensor)> = p.iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode_tensors(items.into_iter())
}

fn decode_params(bytes: &[u8], base: usize, frozen: &[String]) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for (n, t) in decode_tensors(bytes, base)? {
        p.insert(n, t);
    }
    for f in frozen {
        p.freeze_prefix(f);
    }
    Ok(p)
}

fn encode_optim(o: &OptimState) -> Vec<u8> {
    let mut items: Vec<(String, &Tensor)> = Vec::new();
    for (n, m) in &o.moments {
        items.push((format!("m:{n}"), &m.m));
        items.push((format!("v:{n}"), &m.v));
    }
    let mut out = o.step.to_le_bytes().to_vec();
    out.extend(encode_tensors(
        items
            .iter()
            .map(|(n, t)| (n.as_str(), *t))
            .collect::<Vec<_>>()
            .into_iter(),
    ));
    out
}

fn decode_optim(bytes: &[u8], base: usize) -> Result<OptimState> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        base,
    };
    let step = r.u64()?;
    let mut state = OptimState {
        step,
        moments: Default::default(),
    };
    let tensors = decode_tensors(&bytes[8..], base + 8)?;
    let mut it = tensors.into_iter();
    while let Some((mn, m)) = it.next() {
        let (vn, v) = it.next().ok_or_else(|| Error::Integrity {
            offset: base as u64,
            message: "optimizer moments are unpaired".into(),
        })?;
        match (mn.strip_prefix("m:"), vn.strip_prefix("v:")) {
            (Some(a), Some(b)) if a == b => {
                state.moments.insert(a.to_string(), Moments { m, v });
            }
            _ => {
                return Err(Error::Integrity {
                    offset: base as u64,
                    message: format!("unexpected moment names '{mn}', '{vn}'"),
                })
            }
        }
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config_hash: String,
    frozen: Vec<String>,
    resume: Option<ResumeMeta>,
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    phase: Phase,
    completed_epochs: usize,
    state_json: String,
    best_frozen: Vec<String>,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("checkpoint metadata serialises")
}

/// Serialises `c` to the container byte format.
pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let meta = Meta {
        config_hash: c.config_hash.clone(),
        frozen: c.params.frozen_prefixes().cloned().collect(),
        resume: c.resume.as_ref().map(|r| ResumeMeta {
            phase: r.phase,
            completed_epochs: r.completed_epochs,
            state_json: r.state_json.clone(),
            best_frozen: r.best_params.frozen_prefixes().cloned().collect(),
        }),
    };
    let mut sections: Vec<(&str, Vec<u8>)> = vec![
        ("meta", json(&meta)),
        ("config", c.config_text.as_bytes().to_vec()),
        ("params", encode_params(&c.params)),
        ("tokenizer", json(&c.tokenizer)),
        ("bins", json(&c.bins)),
        ("rng", json(&c.rng)),
        ("provenance", json(&c.provenance)),
    ];
    if let Some(r) = &c.resume {
        sections.push(("resume.best", encode_params(&r.best_params)));
        sections.push(("resume.optim", encode_optim(&r.optim)));
    }
    let table_len: usize = sections.iter().map(|(n, _)| 2 + n.len() + 8 + 8 + 32).sum();
    let mut offset = (MAGIC.len() + 8 + table_len) as u64;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((sections.len() as u32).to_le_bytes());
    for (name, body) in &sections {
        put_name(&mut out, name);
        out.extend(offset.to_le_bytes());
        out.extend((body.len() as u64).to_le_bytes());
        out.extend(sha(body));
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.extend(body);
    }
    let digest = sha(&out);
    out.extend(digest);
    out
}

struct Section {
    name: String,
    offset: usize,
    len: usize,
    digest: [u8; 32],
}

fn read_table(bytes: &[u8]) -> Result<(u32, Vec<Section>)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        base: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    let n = r.u32()? as usize;
    let mut table = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let name = r.name()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if offset.checked_add(len).is_none_or(|end| end > bytes.len()) {
            return Err(Error::Integrity {
                offset: r.pos as u64,
                message: format!("section '{name}' extends past the end of the file"),
            });
        }
        table.push(Section {
            name,
            offset,
            len,
            digest,
        });
    }
    Ok((version, table))
}

/// Parses and verifies a container.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Integrity {
            offset: bytes.len() as u64,
            message: "file too short to be a checkpoint".into(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if bytes[..MAGIC.len()] != MAGIC[..] {
        return Err(Error::Integrity {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    if sha(body)[..] != trailer[..] {
        // point at the first damaged section when the table is still readable
        let located = read_table(body).ok().and_then(|(_, table)| {
            table
                .into_iter()
                .find(|s| sha(&body[s.offset..s.offset + s.len]) != s.digest)
                .map(|s| (s.offset, format!("section '{}' fails its checksum", s.name)))
        });
        let (offset, message) = located.unwrap_or((0, "header or checksum trailer is damaged".to_string()));
        return Err(Error::Integrity {
            offset: offset as u64,
            message,
        });
    }
    let (version, table) = read_table(body)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    for s in &table {
        if sha(&body[s.offset..s.offset + s.len]) != s.digest {
            return Err(Error::Integrity {
                offset: s.offset as u64,
                message: format!("section '{}' fails its checksum", s.name),
            });
        }
    }
    let get = |name: &str| -> Result<(&[u8], usize)> {
        table
            .iter()
            .find(|s| s.name == name)
            .map(|s| (&body[s.offset..s.offset + s.len], s.offset))
            .ok_or_else(|| Error::Integrity {
                offset: MAGIC.len() as u64 + 8,
                message: format!("missing section '{name}'"),
            })
    };
    let parse = |name: &str| -> Result<serde_json::Value> {
        let (b, off) = get(name)?;
        serde_json::from_slice(b).map_err(|e| Error::Integrity {
            offset: off as u64,
            message: format!("section '{name}': {e}"),
        })
    };
    let meta: Meta = serde_json::from_value(parse("meta")?).map_err(|e| integrity(get("meta"), e))?;
    let (cfg_bytes, cfg_off) = get("config")?;
    let config_text = String::from_utf8(cfg_bytes.to_vec()).map_err(|_| Error::Integrity {
        offset: cfg_off as u64,
        message: "config section is not UTF-8".into(),
    })?;
    let (pb, poff) = get("params")?;
    let params = decode_params(pb, poff, &meta.frozen)?;
    let mut tokenizer: Tokenizer =
        serde_json::from_value(parse("tokenizer")?).map_err(|e| integrity(get("tokenizer"), e))?;
    tokenizer.reindex();
    let bins = serde_json::from_value(parse("bins")?).map_err(|e| integrity(get("bins"), e))?;
    let rng = serde_json::from_value(parse("rng")?).map_err(|e| integrity(get("rng"), e))?;
    let provenance = serde_json::from_value(parse("provenance")?).map_err(|e| integrity(get("provenance"), e))?;
    let resume = match meta.resume {
        None => None,
        Some(rm) => {
            let (bb, boff) = get("resume.best")?;
            let (ob, ooff) = get("resume.optim")?;
            Some(ResumeState {
                phase: rm.phase,
                completed_epochs: rm.completed_epochs,
                state_json: rm.state_json,
                optim: decode_optim(ob, ooff)?,
                best_params: decode_params(bb, boff, &rm.best_frozen)?,
            })
        }
    };
    Ok(Checkpoint {
        config_hash: meta.config_hash,
        config_text,
        params,
        tokenizer,
        bins,
        rng,
        provenance,
        resume,
    })
}

fn integrity(section: Result<(&[u8], usize)>, e: serde_json::Error) -> Error {
    Error::Integrity {
        offset: section.map_or(0, |s| s.1) as u64,
        message: e.to_string(),
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(c)).map_err(|e| Error::storage(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity { offset, message } => Error::Integrity {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(resume: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        params.insert("enc.w", Tensor::randn(3, 4, 1.0, &mut rng));
        params.insert("qp.queries", Tensor::randn(2, 5, 1.0, &mut rng));
        params.insert("lm.tok_emb", Tensor::from_vec(1, 3, vec![0.1, -0.0, 1e-300]));
        params.freeze_prefix("enc.");
        params.freeze_prefix("lm.");
        let resume = resume.then(|| {
            let mut optim = OptimState::default();
            optim.step = 17;
            optim.moments.insert(
                "qp.queries".into(),
                Moments {
                    m: Tensor::randn(2, 5, 1.0, &mut rng),
                    v: Tensor::full(2, 5, 0.5),
                },
            );
            ResumeState {
                phase: Phase::P2,
                completed_epochs: 3,
                state_json: "{\"best\":1}".into(),
                optim,
                best_params: params.clone(),
            }
        });
        let mut features = std::collections::BTreeMap::new();
        features.insert(
            crate::paralinguistics::Feature::Loudness,
            crate::paralinguistics::Thresholds {
                t_low: 0.1 + 0.2,
                t_high: 1.0 / 3.0,
                fitted_on: 9,
            },
        );
        let bins = Some(TertileBins { features });
        Checkpoint {
            config_hash: "abc".into(),
            config_text: "[model]\nd = 1\n".into(),
            params,
            tokenizer: Tokenizer::build(["hello there"], 1000).unwrap(),
            bins,
            rng,
            provenance: vec![ProvenanceEntry {
                phase: Phase::P1,
                epochs_run: 4,
                best_epoch: 2,
                best_val_loss: 0.123456789,
                config_hash: "abc".into(),
                trained_digest: "d".into(),
            }],
            resume,
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        for resume in [false, true] {
            let c = sample(resume);
            let bytes = to_bytes(&c);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(to_bytes(&back), bytes);
            assert!(back.params.is_frozen("enc.w") && !back.params.is_frozen("qp.queries"));
        }
    }

    #[test]
    fn every_tampered_byte_is_detected() {
        let bytes = to_bytes(&sample(true));
        for i in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            match from_bytes(&b) {
                Err(Error::Integrity { offset, .. }) => assert!(offset as usize <= bytes.len()),
                other => panic!("byte {i}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn damaged_section_is_located() {
        let c = sample(false);
        let bytes = to_bytes(&c);
        let (_, table) = read_table(&bytes[..bytes.len() - 32]).unwrap();
        let params = table.iter().find(|s| s.name == "params").unwrap();
        let mut b = bytes.clone();
        b[params.offset + 20] ^= 1;
        match from_bytes(&b) {
            Err(Error::Integrity { offset, message }) => {
                assert_eq!(offset as usize, params.offset);
                assert!(message.contains("params"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_versions_need_migration() {
        let mut bytes = to_bytes(&sample(false));
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len();
        let digest = sha(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let c = sample(true);
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Storage { .. })
        ));
    }
}
