pub mod dsp;
pub mod eo_detection;
pub mod evaluate;
pub mod fingerprint;
pub mod frames;
pub mod fusion_tracker;
pub mod geometry;
pub mod pipeline;
pub mod rf_preproc;
pub mod rpca;
pub mod simulator;
pub mod tdoa_loc;
