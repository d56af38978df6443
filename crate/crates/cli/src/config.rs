//! Pipeline configuration: TOML with one table per stage. Every field has an
//! embedded default, so an empty file is a complete configuration.

use std::path::{Path, PathBuf};

use mvlift_core::denoiser::DenoiserConfig;
use mvlift_core::diffusion::{make_schedule, NoiseSchedule, TrainingConfig};
use mvlift_core::geometry::{CameraIntrinsics, CameraRig, CircularLayout};
use mvlift_core::lift3d::LiftOptions;
use mvlift_core::motion::{SkeletonDef, SyntheticMotionSpec};
use mvlift_core::mv_optimize::{MvOptOptions, PhiInit};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Environment variable that overrides `paths.root`.
pub const OUT_ENV: &str = "MVLIFT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub rig: RigSection,
    pub skeleton: SkeletonDef,
    pub synth: SynthSection,
    pub schedule: ScheduleSection,
    pub stage1: StageSection,
    pub stage2: Stage2Section,
    pub stage3: Stage3Section,
    pub stage4: StageSection,
    pub lift: LiftOptions,
}

/// Directories; relative entries resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub root: PathBuf,
    pub datasets: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("mvlift-out"),
            datasets: PathBuf::from("datasets"),
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("outputs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSection {
    pub radius: f64,
    pub height: f64,
    pub focal: f64,
}

impl Default for RigSection {
    fn default() -> Self {
        Self {
            radius: 3.0,
            height: 0.0,
            focal: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub amplitude: f64,
    pub frequency: (f64, f64),
    pub root_speed: (f64, f64),
    pub root_radius: f64,
    pub root_height: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SyntheticMotionSpec::default();
        Self {
            train_sequences: 600,
            test_sequences: 20,
            frames: base.frames,
            fps: base.fps,
            amplitude: base.amplitude,
            frequency: base.frequency,
            root_speed: (0.2, 0.6),
            root_radius: 0.5,
            root_height: base.root_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let (beta_start, beta_end) = NoiseSchedule::desk().beta_range();
        Self {
            steps: NoiseSchedule::desk().steps(),
            beta_start,
            beta_end,
        }
    }
}

/// Network size; joint count and step count come from the data and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub max_t: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            ff_mult: 4,
            max_t: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub lambda_line: f64,
    pub epipole_half_width: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainingConfig::default();
        Self {
            steps: 6000,
            batch_size: base.batch_size,
            learning_rate: 1e-3,
            grad_clip: base.grad_clip,
            lambda_line: base.lambda_line,
            epipole_half_width: base.epipole_half_width,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    /// Training inputs refined by `optimize-mv` to feed the multi-view dataset.
    pub max_sequences: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub step_decay: bool,
    pub w_sds: f64,
    pub w_mv: f64,
    pub n_fraction: (f64, f64),
    pub sds_weight: f64,
    pub init: PhiInit,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let base = MvOptOptions::default();
        Self {
            max_sequences: 40,
            iterations: base.iterations,
            step_size: base.step_size,
            step_decay: base.step_decay,
            w_sds: base.w_sds,
            w_mv: base.w_mv,
            n_fraction: base.n_fraction,
            sds_weight: base.sds_weight,
            init: base.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Section {
    /// Yaw-rotated copies of each recovered motion added to the dataset.
    pub yaw_copies: usize,
    pub lift: LiftOptions,
}

impl Default for Stage3Section {
    fn default() -> Self {
        Self {
            yaw_copies: 8,
            lift: LiftOptions::default(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsSection::default(),
            rig: RigSection::default(),
            skeleton: SkeletonDef::desk_default(),
            synth: SynthSection::default(),
            schedule: ScheduleSection::default(),
            stage1: StageSection::default(),
            stage2: Stage2Section::default(),
            stage3: Stage3Section::default(),
            stage4: StageSection {
                model: ModelSection::default(),
                train: TrainSection {
                    steps: 6000,
                    ..TrainSection::default()
                },
            },
            lift: LiftOptions::default(),
        }
    }
}

/// Random-stream tags of the pipeline stages.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Synth = 1,
    Stage1Train = 2,
    Stage2 = 3,
    Stage4Train = 4,
    Lift = 5,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.skeleton.validate()?;
        self.synth_spec()?;
        self.schedule()?;
        for (name, stage) in [("stage1", &self.stage1), ("stage4", &self.stage4)] {
            self.training_config(stage, 0)?;
            if stage.model.max_t < self.synth.frames {
                return Err(CliError::Config(format!(
                    "{name}.model.max_t = {} is shorter than synth.frames = {}",
                    stage.model.max_t, self.synth.frames
                )));
            }
        }
        self.stage1_model().validate()?;
        self.stage4_model().validate()?;
        self.mv_options(0).validate()?;
        self.lift.validate()?;
        self.stage3.lift.validate()?;
        self.six_view_rig()?;
        if !(self.synth.root_speed.0 > 0.0 && self.synth.root_speed.0 <= self.synth.root_speed.1) {
            return Err(CliError::Config("synth.root_speed must be a positive ordered range".into()));
        }
        if !(self.synth.root_radius > 0.0) {
            return Err(CliError::Config("synth.root_radius must be positive".into()));
        }
        Ok(())
    }

    /// Seed of one stage, independent of every other stage's stream.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng.next_u64()
    }

    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.paths.root.clone(),
        }
    }

    fn under_root(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.under_root(&self.paths.datasets)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.under_root(&self.paths.checkpoints)
    }

    pub fn outputs_dir(&self) -> PathBuf {
        self.under_root(&self.paths.outputs)
    }

    /// Snapshot for manifests: the output root is left out and directories
    /// under it are written relative to it.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("configuration serializes to JSON");
        let root = self.root();
        if let Some(paths) = v.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("root");
            for (key, dir) in [
                ("datasets", self.datasets_dir()),
                ("checkpoints", self.checkpoints_dir()),
                ("outputs", self.outputs_dir()),
            ] {
                if let Ok(rel) = dir.strip_prefix(&root) {
                    paths.insert(key.into(), rel.to_string_lossy().replace('\\', "/").into());
                }
            }
        }
        v
    }

    pub fn intrinsics(&self) -> CliResult<CameraIntrinsics> {
        Ok(CameraIntrinsics::new(self.rig.focal, self.rig.focal, 0.0, 0.0)?)
    }

    fn layout_rig(&self, mut layout: CircularLayout) -> CliResult<CameraRig> {
        layout.radius = self.rig.radius;
        layout.height = self.rig.height;
        Ok(CameraRig::circular(layout, self.intrinsics()?)?)
    }

    /// The six-view 60-degree rig of Stages 1 and 2.
    pub fn six_view_rig(&self) -> CliResult<CameraRig> {
        self.layout_rig(CircularLayout::six_view())
    }

    /// The four-view 90-degree rig of Stages 3 and 4.
    pub fn four_view_rig(&self) -> CliResult<CameraRig> {
        self.layout_rig(CircularLayout::four_view())
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        let s = &self.schedule;
        Ok(make_schedule(s.steps, s.beta_start, s.beta_end)?)
    }

    pub fn synth_spec(&self) -> CliResult<SyntheticMotionSpec> {
        let base = SyntheticMotionSpec::default();
        let spec = SyntheticMotionSpec {
            skeleton: self.skeleton.clone(),
            frames: self.synth.frames,
            fps: self.synth.fps,
            amplitude: self.synth.amplitude,
            frequency: self.synth.frequency,
            root_height: self.synth.root_height,
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }

    fn model_config(&self, m: &ModelSection, view_count: usize) -> DenoiserConfig {
        DenoiserConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_t: m.max_t,
            joint_count: self.skeleton.joint_count(),
            view_count,
            diffusion_steps: self.schedule.steps,
            ff_mult: m.ff_mult,
            self_attention: true,
        }
    }

    pub fn stage1_model(&self) -> DenoiserConfig {
        self.model_config(&self.stage1.model, 1)
    }

    pub fn stage4_model(&self) -> DenoiserConfig {
        self.model_config(&self.stage4.model, 4)
    }

    pub fn training_config(&self, stage: &StageSection, seed: u64) -> CliResult<TrainingConfig> {
        let t = &stage.train;
        let cfg = TrainingConfig {
            lambda_line: t.lambda_line,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            grad_clip: t.grad_clip,
            seed,
            epipole_half_width: t.epipole_half_width,
        };
        cfg.validate()?;
        if t.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn mv_options(&self, seed: u64) -> MvOptOptions {
        let s = &self.stage2;
        MvOptOptions {
            iterations: s.iterations,
            step_size: s.step_size,
            step_decay: s.step_decay,
            w_sds: s.w_sds,
            w_mv: s.w_mv,
            n_fraction: s.n_fraction,
            sds_weight: s.sds_weight,
            init: s.init,
            seed,
        }
    }
}
