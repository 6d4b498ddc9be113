pub mod audio;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod data;
pub mod decode_eval;
pub mod error;
pub mod lm;
pub mod model;
pub mod nn;
pub mod paralinguistics;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod qpmapper;
pub mod tensor;

pub use error::{Error, Result};
