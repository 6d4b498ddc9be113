use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serlm::autograd::{Graph, Var};
use serlm::corpus::tokenizer::Tokenizer;
use serlm::curriculum::optim::{adamw_step, OptimState};
use serlm::lm::{
    assemble, batch_nll, embed_tokens, forward_segments, generate, init_base, init_lora, logits_at, AssembledInput,
    BatchItem, ForwardCtx, LMConfig, Layout, LoraConfig, SpanKind, StopRule,
};
use serlm::params::{Bound, ParamStore};
use serlm::prompts::Task;
use serlm::tensor::Tensor;
use serlm::Error;

fn toy_cfg() -> LMConfig {
    LMConfig {
        vocab_size: 50,
        d_llm: 32,
        layers: 2,
        heads: 4,
        max_seq_len: 64,
        ff_mult: 2.0,
    }
}

fn manual_input(id: &str, rng: &mut ChaCha8Rng, n_audio: usize, target_len: usize) -> AssembledInput {
    let mut ids = |n: usize| (0..n).map(|_| rng.random_range(0..50u32)).collect::<Vec<_>>();
    AssembledInput {
        id: id.into(),
        preamble: vec![1, 2, 3],
        guide: vec![4, 5],
        n_audio,
        prompt: ids(4),
        aux: ids(2),
        header: ids(2),
        target: ids(target_len),
        target_kinds: (0..target_len)
            .map(|i| {
                if i < target_len / 2 {
                    SpanKind::Asr
                } else {
                    SpanKind::Ser
                }
            })
            .collect(),
    }
}

/// Logits at every row of one unsplit sequence, straight from the blocks.
fn full_logits(params: &ParamStore, cfg: &LMConfig, ids: &[u32]) -> Tensor {
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| false);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let e = g.embedding(p.var("lm.tok_emb"), &idx);
    let pos: Vec<usize> = (0..ids.len()).collect();
    let pe = g.embedding(p.var("lm.pos_emb"), &pos);
    let x = g.add(e, pe);
    let mut ctx = ForwardCtx::eval(cfg, Some(2.0));
    let (h, _) = forward_segments(&mut g, &p, &mut ctx, x, &[ids.len()], None);
    let rows: Vec<usize> = (0..ids.len()).collect();
    let l = logits_at(&mut g, &p, h, &rows);
    g.value(l).clone()
}

fn audio_vars(g: &mut Graph, blocks: &[Tensor], trainable: bool) -> Vec<Var> {
    blocks.iter().map(|b| g.leaf(b.clone(), trainable)).collect()
}

fn batch_loss(params: &ParamStore, cfg: &LMConfig, inputs: &[AssembledInput], audio: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| false);
    let av = audio_vars(&mut g, audio, false);
    let items: Vec<BatchItem> = inputs
        .iter()
        .zip(&av)
        .map(|(input, &a)| BatchItem { input, audio: Some(a) })
        .collect();
    let mut ctx = ForwardCtx::eval(cfg, Some(2.0));
    let loss = batch_nll(&mut g, &p, &mut ctx, &items).unwrap();
    let m = loss.mixed(&mut g, 0.7, 0.3);
    g.value(m).item()
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let cfg = LMConfig {
        vocab_size: 300,
        ..toy_cfg()
    };
    let params = init_base(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inp = manual_input("a", &mut rng, 0, 12);
    for t in inp.target.iter_mut() {
        *t = rng.random_range(0..300);
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| false);
    let mut ctx = ForwardCtx::eval(&cfg, None);
    let loss = batch_nll(
        &mut g,
        &p,
        &mut ctx,
        &[BatchItem {
            input: &inp,
            audio: None,
        }],
    )
    .unwrap();
    let lnv = (300f64).ln();
    for v in [loss.asr, loss.ser] {
        let v = g.value(v.unwrap()).item();
        assert!((v - lnv).abs() / lnv < 0.02, "{v} vs {lnv}");
    }
}

#[test]
fn empty_target_gives_zero_loss_and_zero_gradient() {
    let cfg = toy_cfg();
    let params = init_base(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inp = manual_input("a", &mut rng, 0, 0);
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| true);
    let mut ctx = ForwardCtx::eval(&cfg, None);
    let loss = batch_nll(
        &mut g,
        &p,
        &mut ctx,
        &[BatchItem {
            input: &inp,
            audio: None,
        }],
    )
    .unwrap();
    assert!(loss.asr.is_none() && loss.ser.is_none());
    let m = loss.mixed(&mut g, 0.5, 0.5);
    assert_eq!(g.value(m).item(), 0.0);
    let grads = g.backward(m);
    for (_, &v) in p.iter() {
        assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn logits_ignore_later_positions() {
    let cfg = toy_cfg();
    let params = init_base(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<u32> = (0..20).map(|_| rng.random_range(0..50)).collect();
    let base = full_logits(&params, &cfg, &ids);
    for j in [3, 10, 19] {
        let mut alt = ids.clone();
        alt[j] = (alt[j] + 7) % 50;
        let l = full_logits(&params, &cfg, &alt);
        for r in 0..ids.len() {
            let d: f64 = base
                .row(r)
                .iter()
                .zip(l.row(r))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if r < j {
                assert_eq!(d, 0.0, "row {r} moved after changing {j}");
            } else if r == j {
                assert!(d > 0.0);
            }
        }
    }
}

#[test]
fn shared_prefix_batch_matches_unsplit_sequences() {
    let cfg = toy_cfg();
    let mut params = init_base(&cfg, 21).unwrap();
    params.extend(init_lora(&cfg, &LoraConfig::default(), 22).unwrap());
    // non-zero adapters so the adapter path matters
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let names: Vec<String> = params.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for n in names {
        let t = params.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let inputs: Vec<AssembledInput> = (0..3)
        .map(|i| manual_input(&format!("s{i}"), &mut rng, 0, 3 + i))
        .collect();
    let mut g = Graph::new();
    let p = params.bind(&mut g, &|_| false);
    let items: Vec<BatchItem> = inputs.iter().map(|input| BatchItem { input, audio: None }).collect();
    let mut ctx = ForwardCtx::eval(&cfg, Some(2.0));
    let loss = batch_nll(&mut g, &p, &mut ctx, &items).unwrap();

    for (inp, &got) in inputs.iter().zip(&loss.per_sample) {
        let ids = [inp.shared_prefix(), inp.suffix_tokens()].concat();
        let logits = full_logits(&params, &cfg, &ids);
        let start = ids.len() - inp.target.len();
        let mut nll = 0.0;
        for (j, &t) in inp.target.iter().enumerate() {
            let row = logits.row(start + j - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            nll += lse - row[t as usize];
        }
        nll /= inp.target.len() as f64;
        assert!((nll - got).abs() < 1e-10, "{nll} vs {got}");
    }
}

#[test]
fn only_target_labels_enter_the_loss() {
    let cfg = toy_cfg();
    let params = init_base(&cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let inp = manual_input("a", &mut rng, 2, 4);
    let other = manual_input("b", &mut rng, 2, 3);
    let audio = vec![Tensor::randn(2, 32, 0.1, &mut rng), Tensor::randn(2, 32, 0.1, &mut rng)];
    let per_sample = |inputs: &[AssembledInput]| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &|_| false);
        let av = audio_vars(&mut g, &audio, false);
        let items: Vec<BatchItem> = inputs
            .iter()
            .zip(&av)
            .map(|(input, &a)| BatchItem { input, audio: Some(a) })
            .collect();
        let mut ctx = ForwardCtx::eval(&cfg, None);
        batch_nll(&mut g, &p, &mut ctx, &items).unwrap().per_sample
    };
    let base = per_sample(&[inp.clone(), other.clone()]);

    let mut t = inp.clone();
    t.target[3] = (t.target[3] + 1) % 50;
    assert_ne!(base[0], per_sample(&[t, other.clone()])[0]);

    // the neighbouring sample's tokens and labels never leak in
    let mut o = other.clone();
    o.prompt[0] = (o.prompt[0] + 1) % 50;
    o.target[0] = (o.target[0] + 1) % 50;
    let moved = per_sample(&[inp.clone(), o]);
    assert_eq!(base[0], moved[0]);
    assert_ne!(base[1], moved[1]);
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let cfg = toy_cfg();
    let mut params = init_base(&cfg, 41).unwrap();
    params.extend(init_lora(&cfg, &LoraConfig::default(), 42).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let all: Vec<String> = params.names().cloned().collect();
    for n in &all {
        let t = params.get_mut(n).unwrap();
        let amp = if n.ends_with(".b") { 0.05 } else { 0.02 };
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
    let inputs = vec![manual_input("a", &mut rng, 3, 4), manual_input("b", &mut rng, 3, 5)];
    let audio = vec![Tensor::randn(3, 32, 0.3, &mut rng), Tensor::randn(3, 32, 0.3, &mut rng)];

    let mut g = Graph::new();
    let p: Bound = params.bind(&mut g, &|_| true);
    let av = audio_vars(&mut g, &audio, true);
    let items: Vec<BatchItem> = inputs
        .iter()
        .zip(&av)
        .map(|(input, &a)| BatchItem { input, audio: Some(a) })
        .collect();
    let mut ctx = ForwardCtx::eval(&cfg, Some(2.0));
    let loss = batch_nll(&mut g, &p, &mut ctx, &items).unwrap();
    let m = loss.mixed(&mut g, 0.7, 0.3);
    let grads = g.backward(m);

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, up: f64, down: f64| {
        let num = (up - down) / (2.0 * step);
        let err = ((analytic - num).abs() - 1e-9).max(0.0) / analytic.abs().max(num.abs()).max(1e-6);
        worst = worst.max(err);
    };
    let probes = [
        "lm.tok_emb",
        "lm.pos_emb",
        "lm.layers.0.q_proj.weight",
        "lm.layers.1.down_proj.weight",
        "lm.layers.1.attn_norm",
        "lm.final_norm",
        "lm.lm_head.weight",
        "lora.layers.0.v_proj.a",
        "lora.layers.1.gate_proj.b",
    ];
    for name in probes {
        let analytic = grads.get(p.var(name)).unwrap().clone();
        let len = analytic.len();
        for k in 0..12 {
            let i = (k * 7919) % len;
            let orig = params.get(name).unwrap().data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = batch_loss(&params, &cfg, &inputs, &audio);
            params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = batch_loss(&params, &cfg, &inputs, &audio);
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            check(analytic.data()[i], up, down);
        }
    }
    for (s, a) in av.iter().enumerate() {
        let analytic = grads.get(*a).unwrap().clone();
        for i in (0..analytic.len()).step_by(11) {
            let mut au = audio.clone();
            au[s].data_mut()[i] += step;
            let up = batch_loss(&params, &cfg, &inputs, &au);
            au[s].data_mut()[i] -= 2.0 * step;
            let down = batch_loss(&params, &cfg, &inputs, &au);
            check(analytic.data()[i], up, down);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn embedding_equals_one_hot_product() {
    let cfg = toy_cfg();
    let params = init_base(&cfg, 51).unwrap();
    let table = params.get("lm.tok_emb").unwrap();
    let ids = [7u32, 0, 49, 7, 23];
    let got = embed_tokens(&params, &ids).unwrap();
    let mut onehot = Tensor::zeros(ids.len(), cfg.vocab_size);
    for (r, &i) in ids.iter().enumerate() {
        onehot.set(r, i as usize, 1.0);
    }
    let expect = onehot.matmul(&table.transpose(), true);
    assert!(got.max_abs_diff(&expect) < 1e-15);
    assert_eq!(got.row(0), got.row(3));
    assert_eq!(embed_tokens(&params, &[]).unwrap().shape(), (0, 32));
    assert!(matches!(embed_tokens(&params, &[50]), Err(Error::InvalidInput(_))));
}

#[test]
fn fresh_adapters_leave_logits_bit_identical() {
    let cfg = toy_cfg();
    let mut params = init_base(&cfg, 61).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let ids: Vec<u32> = (0..15).map(|_| rng.random_range(0..50)).collect();
    let base = full_logits(&params, &cfg, &ids);
    params.extend(init_lora(&cfg, &LoraConfig::default(), 63).unwrap());
    let with = full_logits(&params, &cfg, &ids);
    assert_eq!(base.data(), with.data());
}

fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::build(
        ["| ASR: the meeting was fine | Emotion: N | Transcribe the audio. Here are some audio tokens:"],
        2000,
    )
    .unwrap()
}

fn memo_setup() -> (Tokenizer, LMConfig, ParamStore, AssembledInput, Tensor) {
    let tok = tiny_tokenizer();
    let cfg = LMConfig {
        vocab_size: tok.vocab_size(),
        d_llm: 32,
        layers: 2,
        heads: 4,
        max_seq_len: 128,
        ff_mult: 2.0,
    };
    let params = init_base(&cfg, 71).unwrap();
    let layout = Layout {
        id: "memo",
        system: "Be brief.",
        guide: "Here are some audio tokens:",
        prompt: "Transcribe the audio.",
        aux: "",
        answer_prefix: "",
        target: "| ASR: the meeting was fine | Emotion: N |",
        task: Task::Joint,
    };
    let input = assemble(&layout, 4, &tok, cfg.max_seq_len).unwrap();
    let audio = Tensor::randn(4, 32, 0.1, &mut ChaCha8Rng::seed_from_u64(72));
    (tok, cfg, params, input, audio)
}

#[test]
fn memorised_answer_is_reproduced() {
    let (tok, cfg, mut params, input, audio) = memo_setup();
    let mut state = OptimState::default();
    let mut steps = 0;
    for step in 1..=500 {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &|_| true);
        let a = g.constant(audio.clone());
        let mut ctx = ForwardCtx::eval(&cfg, None);
        let loss = batch_nll(
            &mut g,
            &p,
            &mut ctx,
            &[BatchItem {
                input: &input,
                audio: Some(a),
            }],
        )
        .unwrap();
        let m = loss.mixed(&mut g, 1.0, 1.0);
        let v = g.value(m).item();
        let mut grads = g.backward(m);
        let mut map = std::collections::BTreeMap::new();
        for (n, &var) in p.iter() {
            if let Some(t) = grads.take(var) {
                map.insert(n.clone(), t);
            }
        }
        adamw_step(&mut params, &map, &mut state, 3e-3, 0.0).unwrap();
        steps = step;
        if v < 1e-3 {
            break;
        }
    }
    assert!(steps <= 500);
    let ctx = input.without_target();
    let out = generate(&params, &cfg, None, &ctx, Some(&audio), &tok, 40, StopRule { pipes: 3 }).unwrap();
    assert_eq!(tok.decode(&out), "| ASR: the meeting was fine | Emotion: N |");

    // the same model continues an answer prefix with its memorised code
    let mut pref = ctx.clone();
    pref.header.extend(tok.encode("| ASR: the meeting was fine | Emotion:"));
    let out = generate(
        &params,
        &cfg,
        None,
        &pref,
        Some(&audio),
        &tok,
        10,
        StopRule { pipes: 1 },
    )
    .unwrap();
    assert_eq!(tok.decode(&out), " N |");
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let (tok, cfg, params, input, audio) = memo_setup();
    let ctx = input.without_target();
    let a = generate(&params, &cfg, None, &ctx, Some(&audio), &tok, 12, StopRule { pipes: 2 }).unwrap();
    let b = generate(&params, &cfg, None, &ctx, Some(&audio), &tok, 12, StopRule { pipes: 2 }).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 12);
    assert!(
        generate(&params, &cfg, None, &ctx, Some(&audio), &tok, 0, StopRule { pipes: 2 })
            .unwrap()
            .is_empty()
    );
    let too_many = cfg.max_seq_len - ctx.context_len() + 1;
    assert!(matches!(
        generate(
            &params,
            &cfg,
            None,
            &ctx,
            Some(&audio),
            &tok,
            too_many,
            StopRule { pipes: 2 }
        ),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn cached_generation_matches_recomputation() {
    let (tok, cfg, params, input, audio) = memo_setup();
    let ctx = input.without_target();
    let out = generate(&params, &cfg, None, &ctx, Some(&audio), &tok, 8, StopRule { pipes: 99 }).unwrap();
    assert_eq!(out.len(), 8);
    // recompute each step from scratch over the whole sequence
    let mut suffix = [ctx.prompt.as_slice(), &ctx.aux, &ctx.header].concat();
    for &expect in &out {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &|_| false);
        let prefix = ctx.shared_prefix();
        let all: Vec<usize> = prefix.iter().chain(&suffix).map(|&i| i as usize).collect();
        let e = g.embedding(p.var("lm.tok_emb"), &all);
        let a = g.constant(audio.clone());
        let pre = g.slice_rows(e, 0, prefix.len());
        let post = g.slice_rows(e, prefix.len(), suffix.len());
        let x = g.concat_rows(&[pre, a, post]);
        let n = all.len() + ctx.n_audio;
        let pos: Vec<usize> = (0..n).collect();
        let pe = g.embedding(p.var("lm.pos_emb"), &pos);
        let x = g.add(x, pe);
        let mut fctx = ForwardCtx::eval(&cfg, None);
        let (h, _) = forward_segments(&mut g, &p, &mut fctx, x, &[n], None);
        let l = logits_at(&mut g, &p, h, &[n - 1]);
        let row = g.value(l).row(0);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(best as u32, expect);
        suffix.push(expect);
    }
}
