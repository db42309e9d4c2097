//! Multimodal feedback synthesis: a transformer text encoder, attention over
//! image region features, multimodal fusion and a three-attention decoder,
//! together with the data pipeline and evaluation metrics around them.

pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod region;
pub mod tensor;
pub mod training;
