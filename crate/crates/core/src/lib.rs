pub mod cutmix;
pub mod data;
pub mod fusion;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod tensor;
