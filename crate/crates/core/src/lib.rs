pub mod band;
pub mod conformal;
pub mod denoiser;
pub mod diffusion;
pub mod evaluation;
pub mod masking;
pub mod series;
pub mod synth;
