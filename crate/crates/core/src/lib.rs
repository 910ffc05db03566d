pub mod color;
pub mod formats;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;
