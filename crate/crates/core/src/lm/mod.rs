//! Tiny causal decoder LM with low-rank adapters on its projection sites.

mod assemble;
mod generate;
mod model;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{ParamStore, LORA_PREFIX, QPMAPPER_PREFIX};
use crate::tensor::Tensor;

pub use assemble::{assemble, AssembledInput, Layout, SpanKind};
pub use generate::{generate, StopRule};
pub use model::{batch_nll, embed_tokens, forward_segments, logits_at, BatchItem, BatchLoss, ForwardCtx, LayerKv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Feed-forward hidden width as a multiple of `d_llm`.
    pub ff_mult: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            vocab_size: 0,
            d_llm: 128,
            layers: 4,
            heads: 4,
            max_seq_len: 512,
            ff_mult: 2.0,
        }
    }
}

impl LMConfig {
    pub fn ff_hidden(&self) -> usize {
        ((self.d_llm as f64) * self.ff_mult).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_llm == 0 || self.layers == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if self.d_llm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_llm {} is not divisible by {} heads",
                self.d_llm, self.heads
            )));
        }
        if !(self.ff_mult > 0.0) {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraSite {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl LoraSite {
    pub const ALL: [LoraSite; 7] = [
        LoraSite::QProj,
        LoraSite::KProj,
        LoraSite::VProj,
        LoraSite::OProj,
        LoraSite::GateProj,
        LoraSite::UpProj,
        LoraSite::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraSite::QProj => "q_proj",
            LoraSite::KProj => "k_proj",
            LoraSite::VProj => "v_proj",
            LoraSite::OProj => "o_proj",
            LoraSite::GateProj => "gate_proj",
            LoraSite::UpProj => "up_proj",
            LoraSite::DownProj => "down_proj",
        }
    }

    /// `(d_out, d_in)` of the wrapped weight.
    pub fn dims(self, cfg: &LMConfig) -> (usize, usize) {
        let (d, f) = (cfg.d_llm, cfg.ff_hidden());
        match self {
            LoraSite::GateProj | LoraSite::UpProj => (f, d),
            LoraSite::DownProj => (d, f),
            _ => (d, d),
        }
    }

    pub fn weight_name(self, layer: usize) -> String {
        format!("lm.layers.{layer}.{}.weight", self.name())
    }

    pub fn a_name(self, layer: usize) -> String {
        format!("lora.layers.{layer}.{}.a", self.name())
    }

    pub fn b_name(self, layer: usize) -> String {
        format!("lora.layers.{layer}.{}.b", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    #[serde(default = "all_sites")]
    pub sites: Vec<LoraSite>,
}

fn all_sites() -> Vec<LoraSite> {
    LoraSite::ALL.to_vec()
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
            sites: all_sites(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Σ over sites and layers of `r·(d_in + d_out)`.
    pub fn parameter_count(&self, cfg: &LMConfig) -> usize {
        let per_layer: usize = self
            .sites
            .iter()
            .map(|s| {
                let (o, i) = s.dims(cfg);
                self.rank * (i + o)
            })
            .sum();
        per_layer * cfg.layers
    }
}

/// Base LM weights under `lm.`; weights are stored `out × in`.
pub fn init_base(cfg: &LMConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_llm;
    let mut s = ParamStore::new();
    s.insert("lm.tok_emb", Tensor::randn(cfg.vocab_size, d, 0.02, &mut rng));
    s.insert("lm.pos_emb", Tensor::randn(cfg.max_seq_len, d, 0.02, &mut rng));
    for l in 0..cfg.layers {
        s.insert(format!("lm.layers.{l}.attn_norm"), Tensor::full(1, d, 1.0));
        s.insert(format!("lm.layers.{l}.mlp_norm"), Tensor::full(1, d, 1.0));
        for site in LoraSite::ALL {
            let (o, i) = site.dims(cfg);
            nn::init_linear(&mut s, &format!("lm.layers.{l}.{}", site.name()), o, i, false, &mut rng);
        }
    }
    s.insert("lm.final_norm", Tensor::full(1, d, 1.0));
    s.insert("lm.lm_head.weight", Tensor::randn(cfg.vocab_size, d, 0.02, &mut rng));
    Ok(s)
}

/// Fresh adapters under `lora.`: `A` uniform fan-in, `B` zero.
pub fn init_lora(cfg: &LMConfig, lora: &LoraConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    lora.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for l in 0..cfg.layers {
        for &site in &lora.sites {
            let (o, i) = site.dims(cfg);
            let bound = 1.0 / (i as f64).sqrt();
            s.insert(site.a_name(l), Tensor::uniform(lora.rank, i, bound, &mut rng));
            s.insert(site.b_name(l), Tensor::zeros(o, lora.rank));
        }
    }
    Ok(s)
}

/// `x·Wᵀ + scale·(drop(x)·Aᵀ)·Bᵀ`; `dropout_mask` is already scaled.
pub fn lora_apply(
    x: &Tensor,
    weight: &Tensor,
    a: &Tensor,
    b: &Tensor,
    scale: f64,
    dropout_mask: Option<&Tensor>,
) -> Tensor {
    let mut y = x.matmul(weight, true);
    let xd;
    let xin = match dropout_mask {
        Some(m) => {
            let mut t = x.clone();
            t.data_mut().iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
            xd = t;
            &xd
        }
        None => x,
    };
    let low = xin.matmul(a, true).matmul(b, true);
    y.add_scaled(&low, scale);
    y
}

/// `W + scale·B·A`.
pub fn merge_lora(weight: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    let mut w = weight.clone();
    w.add_scaled(&b.matmul(a, false), scale);
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::P1, Phase::P2, Phase::P3];

    pub fn uses_lora(self) -> bool {
        self != Phase::P1
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Phase::P1),
            "P2" => Ok(Phase::P2),
            "P3" => Ok(Phase::P3),
            _ => Err(Error::InvalidInput(format!(
                "unknown phase '{s}' (expected P1, P2 or P3)"
            ))),
        }
    }
}

/// Names the optimizer may update in `phase`: mapper weights, plus every
/// adapter matrix once adapters are active. Frozen prefixes are excluded.
pub fn trainable_parameters(params: &ParamStore, phase: Phase) -> BTreeSet<String> {
    params
        .names()
        .filter(|n| n.starts_with(QPMAPPER_PREFIX) || (phase.uses_lora() && n.starts_with(LORA_PREFIX)))
        .filter(|n| !params.is_frozen(n))
        .cloned()
        .collect()
}
