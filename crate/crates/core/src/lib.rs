pub mod analysis;
pub mod check;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod partition;
pub mod synth;
pub mod train;
pub mod tensor;
