pub mod episode_sampler;
pub mod error;
pub mod eval_harness;
pub mod feature_align;
pub mod graph_store;
pub mod model;
pub mod icl_transformer;
pub mod numerics;
pub mod proto_head;
pub mod struct_encoder;
pub mod tokenizer;
pub mod trainer;

pub use error::{GiltError, Result};
