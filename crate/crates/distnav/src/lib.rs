//! Temporal-distance learning for goal-conditioned navigation, end to end:
//! procedural grid worlds and trajectory data, a confidence-weighted
//! distance-to-goal model trained from self-supervised triplets, structured
//! noise models calibrated against it, a recurrent point-goal policy trained
//! on noised privileged distance, and evaluation tooling (rank correlation,
//! distance accuracy, swap experiments) for the whole pipeline.

pub mod evalsuite;
pub mod geometry;
pub mod navenv;
pub mod nn;
pub mod noisemodel;
pub mod objectives;
pub mod rltrain;
pub mod rng;
pub mod simworld;
pub mod tape;

pub mod distmodel;
