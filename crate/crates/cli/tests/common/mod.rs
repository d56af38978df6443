#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use mvlift::config::{ModelSection, PipelineConfig};

/// A configuration small enough to run every stage in seconds, rooted in `dir`.
pub fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.paths.root = dir.to_path_buf();
    cfg.paths.datasets = dir.join("datasets");
    cfg.paths.checkpoints = dir.join("checkpoints");
    cfg.paths.outputs = dir.join("outputs");
    cfg.synth.train_sequences = 10;
    cfg.synth.test_sequences = 3;
    cfg.synth.frames = 12;
    let model = ModelSection {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ff_mult: 2,
        max_t: 12,
    };
    cfg.stage1.model = model.clone();
    cfg.stage4.model = model;
    cfg.stage1.train.steps = 6;
    cfg.stage1.train.batch_size = 4;
    cfg.stage1.train.checkpoint_every = 4;
    cfg.stage4.train.steps = 4;
    cfg.stage4.train.batch_size = 4;
    cfg.stage2.max_sequences = 2;
    cfg.stage2.iterations = 5;
    cfg.stage3.yaw_copies = 1;
    cfg.lift.max_iterations = 10;
    cfg
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

/// Runs the binary with the output root taken from the configuration.
pub fn mvlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvlift"))
        .args(args)
        .env_remove("MVLIFT_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}
