//! Learnable-query downsampler from encoder features to LM embeddings.
//!
//! The `n_q` query rows are appended after the frame rows, the joint
//! sequence runs through bidirectional encoder blocks without positional
//! encoding, and only the final `n_q` rows are projected to `d_llm`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, NORM_EPS};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QPMapperConfig {
    pub n_q: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_llm: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "default_query_std")]
    pub query_init_std: f64,
}

fn default_ff_mult() -> usize {
    2
}

fn default_query_std() -> f64 {
    0.02
}

impl Default for QPMapperConfig {
    fn default() -> Self {
        QPMapperConfig {
            n_q: 16,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_llm: 128,
            ff_mult: default_ff_mult(),
            query_init_std: default_query_std(),
        }
    }
}

impl QPMapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_llm == 0 {
            return Err(Error::Config("qpmapper dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "qpmapper d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.query_init_std > 0.0) {
            return Err(Error::Config("query_init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Mapper output: exactly `n_q × d_llm`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampledRepr {
    pub values: Tensor,
}

pub fn init_params(config: &QPMapperConfig, d_ae: usize, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut s = ParamStore::new();
    s.insert(
        "qp.queries",
        Tensor::randn(config.n_q, d, config.query_init_std, &mut rng),
    );
    if d_ae != d {
        nn::init_linear(&mut s, "qp.in_proj", d, d_ae, true, &mut rng);
    }
    for l in 0..config.layers {
        nn::init_encoder_block(&mut s, &format!("qp.layers.{l}"), d, config.ff_mult * d, &mut rng);
    }
    s.insert("qp.final_norm", Tensor::full(1, d, 1.0));
    nn::init_linear(&mut s, "qp.out_proj", config.d_llm, d, true, &mut rng);
    Ok(s)
}

fn check_input(h: &Tensor, p: &ParamStore, config: &QPMapperConfig) -> Result<()> {
    let expected = p.get("qp.in_proj.weight").map_or(config.d_model, Tensor::cols);
    if h.cols() != expected {
        return Err(Error::Config(format!(
            "feature dimension {} does not match qpmapper input {expected}",
            h.cols()
        )));
    }
    if h.rows() == 0 {
        return Err(Error::InvalidInput("empty feature sequence".into()));
    }
    if !h.is_finite() {
        return Err(Error::Numeric("non-finite qpmapper input".into()));
    }
    Ok(())
}

/// Graph form of the mapper. `h` is an `n × d_ae` node.
pub fn forward(g: &mut Graph, p: &Bound, h: Var, config: &QPMapperConfig) -> Var {
    let h = match p.get("qp.in_proj.weight") {
        Some(w) => nn::linear(g, h, w, p.get("qp.in_proj.bias")),
        None => h,
    };
    let n = g.value(h).rows();
    let mut x = g.concat_rows(&[h, p.var("qp.queries")]);
    for l in 0..config.layers {
        x = nn::encoder_block(g, p, &format!("qp.layers.{l}"), x, config.heads);
    }
    let q = g.slice_rows(x, n, config.n_q);
    let q = g.rms_norm(q, p.var("qp.final_norm"), NORM_EPS);
    nn::linear(g, q, p.var("qp.out_proj.weight"), p.get("qp.out_proj.bias"))
}

/// Evaluates the mapper outside of training.
pub fn downsample(h: &FeatureSequence, params: &ParamStore, config: &QPMapperConfig) -> Result<DownsampledRepr> {
    check_input(&h.values, params, config)?;
    let mut g = Graph::new();
    let p = params.subset("qp.").bind(&mut g, &|_| false);
    let x = g.constant(h.values.clone());
    let out = forward(&mut g, &p, x, config);
    let values = g.value(out).clone();
    if !values.is_finite() {
        return Err(Error::Numeric("non-finite qpmapper output".into()));
    }
    Ok(DownsampledRepr { values })
}

/// Validates a mapper input against the parameters, for graph callers.
pub fn validate_input(h: &Tensor, params: &ParamStore, config: &QPMapperConfig) -> Result<()> {
    check_input(h, params, config)
}
