#![allow(dead_code)]

use std::path::Path;

use serlm::config::RunConfig;
use serlm::corpus::SplitRatios;
use serlm::curriculum::PhasePlan;

/// A few dozen utterances and a two-layer LM: every pipeline step in seconds.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.base_dir = dir.to_path_buf();
    c.corpus.n_utterances = 40;
    c.corpus.split = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    c.qpmapper.n_q = 4;
    c.qpmapper.layers = 1;
    c.qpmapper.heads = 2;
    c.qpmapper.d_model = 16;
    c.qpmapper.d_llm = 32;
    c.lm.d_llm = 32;
    c.lm.layers = 2;
    c.lm.heads = 2;
    c.lora.rank = 2;
    c.lora.alpha = 4.0;
    c.pretrain.steps = 4;
    c.pretrain.batch = 4;
    c.train.micro_batch = 4;
    c.train.accumulation = 2;
    c.train.p1 = PhasePlan::new(2, 2e-3, 0.01);
    c.train.p2 = PhasePlan::new(1, 1e-3, 0.01);
    c.train.p3 = PhasePlan::new(2, 1e-3, 0.01);
    c.eval.max_new_tokens = 12;
    c
}
