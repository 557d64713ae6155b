//! Language-grounded decomposed action representations.
//!
//! Continuous 7-DoF actions are projected onto translation, rotation and
//! gripper primitives with canonical sentence descriptions. Latent action
//! embeddings are aligned with each other and with their descriptions by a
//! soft-label contrastive objective whose targets come from primitive-level
//! affinity, balanced against primitive classification by moving-average
//! loss weighting.

pub mod action_space;
pub mod adaptive_weighting;
pub mod affinity;
pub mod cli;
pub mod datagen;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;
