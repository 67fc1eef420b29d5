pub mod annotate;
pub mod conf_encoder;
pub mod eval;
pub mod gradient_suite;
pub mod ingest;
pub mod model;
pub mod node_encoder;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tree;
