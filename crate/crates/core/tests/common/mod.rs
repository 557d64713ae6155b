#![allow(dead_code)]

use lada::action_space::BinningConfig;
use lada::datagen::{build_suite, Dataset, SuiteConfig};

pub const EPISODES: usize = 20;

/// The default suite built and sampled with `seed`.
pub fn default_dataset(seed: u64) -> Dataset {
    dataset(seed, &SuiteConfig::default())
}

pub fn dataset(seed: u64, cfg: &SuiteConfig) -> Dataset {
    build_suite(seed, cfg, &BinningConfig::default()).unwrap().generate_dataset(EPISODES, seed).unwrap()
}
