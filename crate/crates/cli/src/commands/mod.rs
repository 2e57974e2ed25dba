pub mod calibrate;
pub mod evaluate;
pub mod predict;
pub mod synth;
pub mod train;
