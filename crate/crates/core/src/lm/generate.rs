use super::model::{embed_with_positions, forward_segments, logits_at, ForwardCtx, LayerKv};
use super::{AssembledInput, LMConfig};
use crate::autograd::Graph;
use crate::corpus::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Generation halts once this many '|' characters have been produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopRule {
    pub pipes: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `input`'s context (its target, if any, is
/// ignored). Keys and values of earlier rows are kept on the graph, so each
/// new token costs one row of compute.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    params: &ParamStore,
    cfg: &LMConfig,
    lora_scale: Option<f64>,
    input: &AssembledInput,
    audio: Option<&Tensor>,
    tok: &Tokenizer,
    max_new_tokens: usize,
    stop: StopRule,
) -> Result<Vec<u32>> {
    let ctx_len = input.context_len();
    if ctx_len + max_new_tokens > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            id: input.id.clone(),
            len: ctx_len + max_new_tokens,
            limit: cfg.max_seq_len,
        });
    }
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    match audio {
        Some(a) if a.shape() != (input.n_audio, cfg.d_llm) => {
            return Err(Error::Config(format!(
                "audio block is {:?}, expected ({}, {})",
                a.shape(),
                input.n_audio,
                cfg.d_llm
            )))
        }
        None if input.n_audio > 0 => return Err(Error::InvalidInput("missing audio block".into())),
        _ => {}
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| false);
    let mut ctx = ForwardCtx::eval(cfg, lora_scale);

    let prefix = input.shared_prefix();
    let mut cache: Option<Vec<LayerKv>> = None;
    let extend = |g: &mut Graph, cache: &mut Option<Vec<LayerKv>>, new: Vec<LayerKv>| {
        *cache = Some(match cache.take() {
            None => new,
            Some(old) => old
                .iter()
                .zip(&new)
                .map(|(o, n)| LayerKv {
                    k: g.concat_rows(&[o.k, n.k]),
                    v: g.concat_rows(&[o.v, n.v]),
                })
                .collect(),
        });
    };
    if !prefix.is_empty() {
        let x = embed_with_positions(&mut g, &p, &prefix, 0);
        let (_, kv) = forward_segments(&mut g, &p, &mut ctx, x, &[prefix.len()], None);
        extend(&mut g, &mut cache, kv);
    }
    let ctx_suffix: Vec<u32> = [input.prompt.as_slice(), &input.aux, &input.header].concat();
    let mut parts = Vec::new();
    if let Some(a) = audio.filter(|_| input.n_audio > 0) {
        parts.push(g.constant(a.clone()));
    }
    let pos0 = prefix.len();
    let e = embed_with_positions(&mut g, &p, &ctx_suffix, pos0 + input.n_audio);
    if let Some(&a) = parts.first() {
        let pos: Vec<usize> = (pos0..pos0 + input.n_audio).collect();
        let pe = g.embedding(p.var("lm.pos_emb"), &pos);
        let a = g.add(a, pe);
        parts[0] = a;
    }
    parts.push(e);
    let x = g.concat_rows(&parts);
    let rows = input.n_audio + ctx_suffix.len();
    let (mut hidden, kv) = forward_segments(&mut g, &p, &mut ctx, x, &[rows], cache.as_deref());
    extend(&mut g, &mut cache, kv);

    let mut out = Vec::new();
    let mut pipes = 0;
    let mut pos = pos0 + rows;
    loop {
        let last = g.value(hidden).rows() - 1;
        let logits = logits_at(&mut g, &p, hidden, &[last]);
        let next = argmax(g.value(logits).row(0)) as u32;
        out.push(next);
        pipes += tok.pipe_count(next);
        if pipes >= stop.pipes || out.len() >= max_new_tokens {
            break;
        }
        let x = embed_with_positions(&mut g, &p, &[next], pos);
        let (h, kv) = forward_segments(&mut g, &p, &mut ctx, x, &[1], cache.as_deref());
        extend(&mut g, &mut cache, kv);
        hidden = h;
        pos += 1;
    }
    Ok(out)
}
