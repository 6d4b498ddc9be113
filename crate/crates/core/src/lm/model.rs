use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AssembledInput, LMConfig, LoraSite, SpanKind};
use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::NORM_EPS;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Per-call forward settings.
pub struct ForwardCtx<'a> {
    pub cfg: &'a LMConfig,
    /// Adapter scale `alpha / r`; `None` runs the base model only.
    pub lora_scale: Option<f64>,
    pub dropout: f64,
    /// Source of adapter dropout masks; dropout is off when absent.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(cfg: &'a LMConfig, lora_scale: Option<f64>) -> Self {
        ForwardCtx {
            cfg,
            lora_scale,
            dropout: 0.0,
            rng: None,
        }
    }

    fn dropout_mask(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        let p = self.dropout;
        let rng = self.rng.as_mut().filter(|_| p > 0.0)?;
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Some(Tensor::from_vec(rows, cols, data))
    }
}

/// Keys and values of one layer for every row seen so far.
#[derive(Clone, Copy, Debug)]
pub struct LayerKv {
    pub k: Var,
    pub v: Var,
}

fn proj(g: &mut Graph, p: &Bound, ctx: &mut ForwardCtx<'_>, layer: usize, site: LoraSite, x: Var) -> Var {
    let y = g.matmul_t(x, p.var(&site.weight_name(layer)));
    let Some(scale) = ctx.lora_scale else { return y };
    let (Some(a), Some(b)) = (p.get(&site.a_name(layer)), p.get(&site.b_name(layer))) else {
        return y;
    };
    let (r, c) = g.value(x).shape();
    let xin = match ctx.dropout_mask(r, c) {
        Some(m) => {
            let m = g.constant(m);
            g.mul(x, m)
        }
        None => x,
    };
    let h = g.matmul_t(xin, a);
    let h = g.matmul_t(h, b);
    let h = g.scale(h, scale);
    g.add(y, h)
}

/// Runs every decoder block over `x`, whose rows form consecutive segments
/// of the given lengths. Each segment attends to all `past` rows and
/// causally to itself. Returns the final hidden rows (before the output
/// norm) and, per layer, the keys and values of all rows of `x`.
pub fn forward_segments(
    g: &mut Graph,
    p: &Bound,
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    segments: &[usize],
    past: Option<&[LayerKv]>,
) -> (Var, Vec<LayerKv>) {
    let cfg = ctx.cfg;
    debug_assert_eq!(segments.iter().sum::<usize>(), g.value(x).rows());
    let past_len = past.map_or(0, |kv| g.value(kv[0].k).rows());
    let mut x = x;
    let mut kvs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let h = g.rms_norm(x, p.var(&format!("lm.layers.{l}.attn_norm")), NORM_EPS);
        let q = proj(g, p, ctx, l, LoraSite::QProj, h);
        let k = proj(g, p, ctx, l, LoraSite::KProj, h);
        let v = proj(g, p, ctx, l, LoraSite::VProj, h);
        let mask = AttnMask::Causal { offset: past_len };
        let attn = if segments.len() == 1 {
            let (kk, vv) = match past {
                Some(kv) => (g.concat_rows(&[kv[l].k, k]), g.concat_rows(&[kv[l].v, v])),
                None => (k, v),
            };
            g.attention(q, kk, vv, cfg.heads, mask)
        } else {
            let mut outs = Vec::with_capacity(segments.len());
            let mut start = 0;
            for &len in segments {
                let qs = g.slice_rows(q, start, len);
                let mut ks = g.slice_rows(k, start, len);
                let mut vs = g.slice_rows(v, start, len);
                if let Some(kv) = past {
                    ks = g.concat_rows(&[kv[l].k, ks]);
                    vs = g.concat_rows(&[kv[l].v, vs]);
                }
                outs.push(g.attention(qs, ks, vs, cfg.heads, mask));
                start += len;
            }
            g.concat_rows(&outs)
        };
        let o = proj(g, p, ctx, l, LoraSite::OProj, attn);
        x = g.add(x, o);
        let h = g.rms_norm(x, p.var(&format!("lm.layers.{l}.mlp_norm")), NORM_EPS);
        let gate = proj(g, p, ctx, l, LoraSite::GateProj, h);
        let gate = g.silu(gate);
        let up = proj(g, p, ctx, l, LoraSite::UpProj, h);
        let act = g.mul(gate, up);
        let down = proj(g, p, ctx, l, LoraSite::DownProj, act);
        x = g.add(x, down);
        kvs.push(LayerKv { k, v });
    }
    (x, kvs)
}

/// Output-norm and vocabulary projection of the selected hidden rows.
pub fn logits_at(g: &mut Graph, p: &Bound, hidden: Var, rows: &[usize]) -> Var {
    let h = g.gather_rows(hidden, rows);
    let h = g.rms_norm(h, p.var("lm.final_norm"), NORM_EPS);
    g.matmul_t(h, p.var("lm.lm_head.weight"))
}

/// Token embedding rows, checked against the vocabulary.
pub fn embed_tokens(params: &ParamStore, ids: &[u32]) -> Result<Tensor> {
    let table = params
        .get("lm.tok_emb")
        .ok_or_else(|| Error::MissingPrerequisite("LM token embedding".into()))?;
    let mut out = Tensor::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.rows() {
            return Err(Error::InvalidInput(format!(
                "token id {id} outside vocabulary of {}",
                table.rows()
            )));
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub(crate) fn embed_with_positions(g: &mut Graph, p: &Bound, ids: &[u32], start_pos: usize) -> Var {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let e = g.embedding(p.var("lm.tok_emb"), &ids);
    let pos: Vec<usize> = (start_pos..start_pos + ids.len()).collect();
    let pe = g.embedding(p.var("lm.pos_emb"), &pos);
    g.add(e, pe)
}

pub struct BatchItem<'a> {
    pub input: &'a AssembledInput,
    /// `n_audio × d_llm` audio rows; required when `n_audio > 0`.
    pub audio: Option<Var>,
}

pub struct BatchLoss {
    /// Mean NLL over ASR-span target tokens.
    pub asr: Option<Var>,
    /// Mean NLL over SER-span target tokens.
    pub ser: Option<Var>,
    pub n_asr: usize,
    pub n_ser: usize,
    /// Mean NLL over each sample's target tokens (0 when it has none).
    pub per_sample: Vec<f64>,
}

impl BatchLoss {
    /// `w_asr·asr + w_ser·ser`; a constant zero when there are no targets.
    pub fn mixed(&self, g: &mut Graph, w_asr: f64, w_ser: f64) -> Var {
        let mut terms = Vec::new();
        if let Some(a) = self.asr {
            terms.push((a, w_asr));
        }
        if let Some(s) = self.ser {
            terms.push((s, w_ser));
        }
        if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.weighted_sum(&terms)
        }
    }

    pub fn value(g: &Graph, v: Option<Var>) -> Option<f64> {
        v.map(|v| g.value(v).item())
    }
}

fn row_nll(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[targets[r]]
        })
        .collect()
}

/// Teacher-forced NLL of a batch sharing one preamble and guide phrase. The
/// shared prefix runs once and every sample attends to its keys.
pub fn batch_nll(g: &mut Graph, p: &Bound, ctx: &mut ForwardCtx<'_>, items: &[BatchItem<'_>]) -> Result<BatchLoss> {
    let first = items.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let prefix = first.input.shared_prefix();
    let max_len = ctx.cfg.max_seq_len;
    for it in items {
        if it.input.preamble.len() + it.input.guide.len() != prefix.len() || it.input.shared_prefix() != prefix {
            return Err(Error::InvalidInput(format!(
                "sample '{}' does not share the batch prefix",
                it.input.id
            )));
        }
        if it.input.total_len() > max_len {
            return Err(Error::SequenceTooLong {
                id: it.input.id.clone(),
                len: it.input.total_len(),
                limit: max_len,
            });
        }
        match it.audio {
            Some(a) if g.value(a).shape() != (it.input.n_audio, ctx.cfg.d_llm) => {
                return Err(Error::Config(format!(
                    "audio block of '{}' is {:?}, expected ({}, {})",
                    it.input.id,
                    g.value(a).shape(),
                    it.input.n_audio,
                    ctx.cfg.d_llm
                )))
            }
            None if it.input.n_audio > 0 => {
                return Err(Error::InvalidInput(format!(
                    "sample '{}' lacks its audio block",
                    it.input.id
                )))
            }
            _ => {}
        }
    }
    let plen = prefix.len();
    let mut kv_prefix = None;
    if plen > 0 {
        let x = embed_with_positions(g, p, &prefix, 0);
        kv_prefix = Some(forward_segments(g, p, ctx, x, &[plen], None).1);
    }

    let suffixes: Vec<Vec<u32>> = items.iter().map(|it| it.input.suffix_tokens()).collect();
    let all_ids: Vec<usize> = suffixes.iter().flatten().map(|&i| i as usize).collect();
    let emb = g.embedding(p.var("lm.tok_emb"), &all_ids);
    let mut parts = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::new();
    let mut rows = (Vec::new(), Vec::new());
    let mut targets = (Vec::new(), Vec::new());
    let mut owner = (Vec::new(), Vec::new());
    let (mut row0, mut emb0) = (0, 0);
    for (s, (it, suffix)) in items.iter().zip(&suffixes).enumerate() {
        let inp = it.input;
        if let Some(a) = it.audio.filter(|_| inp.n_audio > 0) {
            parts.push(a);
        }
        if !suffix.is_empty() {
            parts.push(g.slice_rows(emb, emb0, suffix.len()));
        }
        let seg = inp.n_audio + suffix.len();
        positions.extend(plen..plen + seg);
        segments.push(seg);
        let first_target = inp.n_audio + suffix.len() - inp.target.len();
        for (j, (&tgt, &kind)) in inp.target.iter().zip(&inp.target_kinds).enumerate() {
            let at = first_target + j;
            if at == 0 {
                return Err(Error::InvalidInput(format!(
                    "sample '{}' has a target with no preceding context",
                    inp.id
                )));
            }
            let (r, t, o) = match kind {
                SpanKind::Asr => (&mut rows.0, &mut targets.0, &mut owner.0),
                SpanKind::Ser => (&mut rows.1, &mut targets.1, &mut owner.1),
            };
            r.push(row0 + at - 1);
            t.push(tgt as usize);
            o.push(s);
        }
        row0 += seg;
        emb0 += suffix.len();
    }
    let x = g.concat_rows(&parts);
    let pe = g.embedding(p.var("lm.pos_emb"), &positions);
    let x = g.add(x, pe);
    let (hidden, _) = forward_segments(g, p, ctx, x, &segments, kv_prefix.as_deref());

    let mut sums = vec![0.0; items.len()];
    let mut counts = vec![0usize; items.len()];
    let mut term = |g: &mut Graph, rows: &[usize], targets: &[usize], owner: &[usize]| -> Result<Option<Var>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let logits = logits_at(g, p, hidden, rows);
        for (k, nll) in row_nll(g.value(logits), targets).into_iter().enumerate() {
            sums[owner[k]] += nll;
            counts[owner[k]] += 1;
        }
        let ce = g.cross_entropy_sum(logits, targets);
        let mean = g.scale(ce, 1.0 / rows.len() as f64);
        let v = g.value(mean).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {v} in batch starting at '{}'",
                first.input.id
            )));
        }
        Ok(Some(mean))
    };
    let asr = term(g, &rows.0, &targets.0, &owner.0)?;
    let ser = term(g, &rows.1, &targets.1, &owner.1)?;
    let per_sample = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(BatchLoss {
        asr,
        ser,
        n_asr: rows.0.len(),
        n_ser: rows.1.len(),
        per_sample,
    })
}
