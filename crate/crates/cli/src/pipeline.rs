//! Stage subcommands. Each reads its inputs from the artifact layout, checks
//! that they exist before doing any work, and records a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use log::info;
use mvlift_core::denoiser::{
    init_params, load_checkpoint, mv_sample, save_checkpoint, CheckpointKind, DenoiserConfig, DenoiserParams,
    TrainRecord, TrainState,
};
use mvlift_core::diffusion::NoiseSchedule;
use mvlift_core::geometry::CameraRig;
use mvlift_core::lift3d::{
    build_mv_dataset, enforce_bone_lengths, recover_3d, strict_consistency_residual, LiftReport, MVDataset,
    STRICT_CONSISTENCY_TOL,
};
use mvlift_core::metrics::{MetricReport, SequenceMetrics};
use mvlift_core::motion::{
    generate_synthetic_motion, load_dataset, load_dataset_3d, project_sequence, save_dataset, save_dataset_3d,
    Pose2DSequence, Pose3DSequence, Record2D, Record3D, RootPath, SkeletonDef, SyntheticMotionSpec, ViewTag,
};
use mvlift_core::mv_optimize::{optimize_multiview, stage1_views, MVOptState, MvOptOutcome};
use mvlift_core::Error as CoreError;
use nalgebra::{Point3, Rotation3, Vector3};
use ndarray::{Array3, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{PipelineConfig, StageSection, Stream};
use crate::manifest::{write_atomic, Run, RunManifest};
use crate::render;
use crate::{CliError, CliResult};

/// Which views feed the final triangulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LiftMode {
    /// Independent Stage-1 samples of the five unobserved views, six-view rig.
    Stage1,
    /// Stage-1 samples refined for consistency, six-view rig.
    Stage2,
    /// Three views generated by the multi-view model, four-view rig.
    Full,
    /// Root pinned to the world origin, joints at constant depth.
    Naive,
}

impl LiftMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LiftMode::Stage1 => "stage1",
            LiftMode::Stage2 => "stage2",
            LiftMode::Full => "full",
            LiftMode::Naive => "naive",
        }
    }
}

/// File locations of every artifact.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub datasets: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            datasets: cfg.datasets_dir(),
            checkpoints: cfg.checkpoints_dir(),
            outputs: cfg.outputs_dir(),
        }
    }

    pub fn train3d(&self) -> PathBuf {
        self.datasets.join("train3d.jsonl")
    }

    pub fn train2d(&self) -> PathBuf {
        self.datasets.join("train2d.jsonl")
    }

    pub fn test3d(&self) -> PathBuf {
        self.datasets.join("test3d.jsonl")
    }

    pub fn test2d(&self) -> PathBuf {
        self.datasets.join("test2d.jsonl")
    }

    pub fn mvdataset(&self) -> PathBuf {
        self.datasets.join("mvdataset.jsonl")
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("stage1.ckpt")
    }

    pub fn stage4_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("stage4.ckpt")
    }

    pub fn train_log(&self, subcommand: &str) -> PathBuf {
        self.outputs.join("logs").join(format!("{subcommand}.tsv"))
    }

    pub fn stage2_views(&self, id: &str) -> PathBuf {
        self.outputs.join("stage2").join(format!("{id}.jsonl"))
    }

    pub fn stage2_trace(&self, id: &str) -> PathBuf {
        self.outputs.join("stage2").join(format!("{id}.trace.tsv"))
    }

    pub fn stage3_dir(&self) -> PathBuf {
        self.outputs.join("stage3")
    }

    pub fn lift_dir(&self, mode: LiftMode) -> PathBuf {
        self.outputs.join(format!("lift-{}", mode.as_str()))
    }

    pub fn predictions(&self, mode: LiftMode) -> PathBuf {
        self.lift_dir(mode).join("pred3d.jsonl")
    }

    pub fn eval_dir(&self, mode: LiftMode) -> PathBuf {
        self.outputs.join(format!("eval-{}", mode.as_str()))
    }

    pub fn render_dir(&self, mode: LiftMode) -> PathBuf {
        self.outputs.join(format!("render-{}", mode.as_str()))
    }
}

fn require(path: &Path, what: &str, producer: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what: what.to_string(),
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn save_2d(path: &Path, records: &[Record2D]) -> CliResult<()> {
    if let Some(d) = path.parent() {
        ensure_dir(d)?;
    }
    Ok(save_dataset(path, records)?)
}

fn save_3d(path: &Path, records: &[Record3D]) -> CliResult<()> {
    if let Some(d) = path.parent() {
        ensure_dir(d)?;
    }
    Ok(save_dataset_3d(path, records)?)
}

/// Independent generator for item `index` of a stage stream.
pub fn item_rng(base: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng
}

fn item_seed(base: u64, index: u64) -> u64 {
    item_rng(base, index).next_u64()
}

const TEST_STREAM_OFFSET: u64 = 1 << 32;
const MAX_SYNTH_ATTEMPTS: usize = 100;

fn synth_one(
    cfg: &PipelineConfig,
    spec: &SyntheticMotionSpec,
    rig: &CameraRig,
    rng: &mut ChaCha8Rng,
    random_view: bool,
) -> CliResult<(Pose3DSequence, usize, Pose2DSequence)> {
    let mut last = None;
    for _ in 0..MAX_SYNTH_ATTEMPTS {
        let mut s = spec.clone();
        s.root_path = RootPath::random(rng, cfg.synth.root_speed, cfg.synth.root_radius);
        let seq = generate_synthetic_motion(&s, rng)?;
        let view = if random_view { rng.gen_range(0..rig.view_count()) } else { 0 };
        let views: Result<Vec<_>, _> = (0..rig.view_count()).map(|v| project_sequence(&seq, rig, v)).collect();
        match views {
            Ok(mut v) => return Ok((seq, view, v.swap_remove(view))),
            Err(e @ CoreError::BehindCamera { .. }) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.map_or_else(|| CliError::Invalid("no synthetic motion generated".into()), CliError::from))
}

fn synth_split(
    cfg: &PipelineConfig,
    rig: &CameraRig,
    prefix: &str,
    count: usize,
    offset: u64,
    random_view: bool,
) -> CliResult<(Vec<Record3D>, Vec<Record2D>)> {
    let spec = cfg.synth_spec()?;
    let base = cfg.stream_seed(Stream::Synth);
    let rig_id = rig.identifier();
    let items: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(base, offset + i as u64);
            let (seq, view, seq2) = synth_one(cfg, &spec, rig, &mut rng, random_view)?;
            let id = format!("{prefix}{i:05}");
            let r3 = Record3D {
                id: id.clone(),
                fps: spec.fps,
                seq,
                parents: cfg.skeleton.parent.clone(),
            };
            let mut r2 = Record2D::new(id.clone(), spec.fps, seq2);
            r2.view = Some(ViewTag {
                sequence: id,
                view,
                rig: rig_id.clone(),
            });
            Ok((r3, r2))
        })
        .collect::<CliResult<_>>()?;
    Ok(items.into_iter().unzip())
}

/// Synthetic 3D motions and their single-view projections. Training sequences
/// use a random view of the six-view rig; test inputs use view 0.
pub fn gen_synth(cfg: &PipelineConfig) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    let mut run = Run::start(cfg, "gen-synth", None, "gen-synth");
    let rig = cfg.six_view_rig()?;
    let (train, test) = run.time("generate", || {
        let train = synth_split(cfg, &rig, "train", cfg.synth.train_sequences, 0, true)?;
        let test = synth_split(cfg, &rig, "test", cfg.synth.test_sequences, TEST_STREAM_OFFSET, false)?;
        Ok((train, test))
    })?;
    save_3d(&a.train3d(), &train.0)?;
    save_2d(&a.train2d(), &train.1)?;
    save_3d(&a.test3d(), &test.0)?;
    save_2d(&a.test2d(), &test.1)?;
    for p in [a.train3d(), a.train2d(), a.test3d(), a.test2d()] {
        run.output(&p)?;
    }
    run.metric("train_sequences", train.0.len());
    run.metric("test_sequences", test.0.len());
    info!("generated {} training and {} test sequences", train.0.len(), test.0.len());
    run.finish()
}

const LOG_HEADER: &str = "step\ttotal\trecon\tline\tgrad_norm\n";

fn log_row(r: &TrainRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\n",
        r.step, r.loss.total, r.loss.recon, r.loss.line, r.grad_norm
    )
}

/// One parsed row of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub line: f64,
    pub grad_norm: f64,
}

pub fn read_train_log(path: &Path) -> CliResult<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |n: usize| CliError::Invalid(format!("{}: malformed row {}", path.display(), n + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n));
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad(n))?,
                total: num(f[1])?,
                recon: num(f[2])?,
                line: num(f[3])?,
                grad_norm: num(f[4])?,
            })
        })
        .collect()
}

/// Mean of the last `window` totals.
pub fn smoothed_tail(rows: &[LogRow], window: usize) -> f64 {
    let w = window.min(rows.len()).max(1);
    rows[rows.len().saturating_sub(w)..].iter().map(|r| r.total).sum::<f64>() / w as f64
}

/// Mean of the first `window` totals.
pub fn smoothed_head(rows: &[LogRow], window: usize) -> f64 {
    let w = window.min(rows.len()).max(1);
    rows[..w.min(rows.len())].iter().map(|r| r.total).sum::<f64>() / w as f64
}

struct TrainJob<'a> {
    subcommand: &'static str,
    kind: CheckpointKind,
    model: DenoiserConfig,
    stage: &'a StageSection,
    stream: Stream,
    checkpoint: PathBuf,
}

fn run_training<F>(cfg: &PipelineConfig, job: TrainJob<'_>, resume: bool, run: &mut Run, mut step_fn: F) -> CliResult<()>
where
    F: FnMut(&mut TrainState, &NoiseSchedule, &mvlift_core::diffusion::TrainingConfig, usize, &mut dyn FnMut(&TrainRecord)) -> CliResult<()>,
{
    let a = Artifacts::new(cfg);
    let sched = cfg.schedule()?;
    let tc = cfg.training_config(job.stage, cfg.stream_seed(job.stream))?;
    let log_path = a.train_log(job.subcommand);
    let (mut state, mut text) = if resume && job.checkpoint.is_file() {
        run.input(&job.checkpoint)?;
        let ck = load_checkpoint(&job.checkpoint)?;
        if ck.kind != job.kind {
            return Err(CliError::Invalid(format!(
                "{} holds a {:?} model, expected {:?}",
                job.checkpoint.display(),
                ck.kind,
                job.kind
            )));
        }
        ck.expect_config(&job.model)?;
        if ck.schedule != sched {
            return Err(CliError::Invalid(format!(
                "{} was trained with a different noise schedule",
                job.checkpoint.display()
            )));
        }
        let mut text = LOG_HEADER.to_string();
        if log_path.is_file() {
            for r in read_train_log(&log_path)?.iter().filter(|r| r.step < ck.train_step) {
                let rec = TrainRecord {
                    step: r.step,
                    loss: mvlift_core::diffusion::LossParts {
                        total: r.total,
                        recon: r.recon,
                        line: r.line,
                    },
                    grad_norm: r.grad_norm,
                };
                text.push_str(&log_row(&rec));
            }
        }
        info!("resuming {} from step {}", job.subcommand, ck.train_step);
        (TrainState::from_checkpoint(ck, &tc), text)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        (TrainState::new(init_params(&job.model, &mut rng)?, &tc), LOG_HEADER.to_string())
    };
    let target = job.stage.train.steps as u64;
    let every = job.stage.train.checkpoint_every as u64;
    ensure_dir(&a.checkpoints)?;
    loop {
        let chunk = every.min(target.saturating_sub(state.step)) as usize;
        if chunk > 0 {
            let mut on_step = |r: &TrainRecord| {
                text.push_str(&log_row(r));
                if r.step % 100 == 0 {
                    info!(
                        "{} step {}: total {:.5} recon {:.5} line {:.5}",
                        job.subcommand, r.step, r.loss.total, r.loss.recon, r.loss.line
                    );
                }
            };
            run.time("train", || step_fn(&mut state, &sched, &tc, chunk, &mut on_step))?;
        }
        save_checkpoint(&job.checkpoint, &state.to_checkpoint(job.kind, &sched))?;
        write_text(&log_path, &text)?;
        if state.step >= target {
            break;
        }
    }
    run.output(&job.checkpoint)?;
    run.output(&log_path)?;
    let rows = read_train_log(&log_path)?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        run.metric("initial_total", first.total);
        run.metric("final_total", last.total);
        run.metric("smoothed_initial_total", smoothed_head(&rows, 50));
        run.metric("smoothed_final_total", smoothed_tail(&rows, 50));
    }
    run.metric("train_step", state.step);
    Ok(())
}

/// Trains the line-conditioned single-view model.
pub fn train_lcdm(cfg: &PipelineConfig, resume: bool) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    require(&a.train2d(), "single-view 2D training set", "gen-synth")?;
    let mut run = Run::start(cfg, "train-lcdm", None, "train-lcdm");
    run.input(&a.train2d())?;
    let data: Vec<Pose2DSequence> = load_dataset(a.train2d())?.into_iter().map(|r| r.seq).collect();
    if data.is_empty() {
        return Err(CoreError::EmptyDataset(format!("{} has no sequences", a.train2d().display())).into());
    }
    let job = TrainJob {
        subcommand: "train-lcdm",
        kind: CheckpointKind::LineConditioned,
        model: cfg.stage1_model(),
        stage: &cfg.stage1,
        stream: Stream::Stage1Train,
        checkpoint: a.stage1_checkpoint(),
    };
    run_training(cfg, job, resume, &mut run, |state, sched, tc, n, on_step| {
        mvlift_core::denoiser::train_line_conditioned(state, &data, sched, tc, n, on_step)?;
        Ok(())
    })?;
    run.finish()
}

fn four_view_dataset(cfg: &PipelineConfig, path: &Path) -> CliResult<MVDataset> {
    Ok(MVDataset::from_records(&load_dataset(path)?, cfg.four_view_rig()?)?)
}

/// Trains the multi-view model on the strictly consistent dataset.
pub fn train_mvdm(cfg: &PipelineConfig, resume: bool) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    require(&a.mvdataset(), "multi-view dataset", "build-mvdataset")?;
    let mut run = Run::start(cfg, "train-mvdm", None, "train-mvdm");
    run.input(&a.mvdataset())?;
    let data = four_view_dataset(cfg, &a.mvdataset())?.training_arrays();
    let job = TrainJob {
        subcommand: "train-mvdm",
        kind: CheckpointKind::MultiView,
        model: cfg.stage4_model(),
        stage: &cfg.stage4,
        stream: Stream::Stage4Train,
        checkpoint: a.stage4_checkpoint(),
    };
    run_training(cfg, job, resume, &mut run, |state, sched, tc, n, on_step| {
        mvlift_core::denoiser::train_multi_view(state, &data, sched, tc, n, on_step)?;
        Ok(())
    })?;
    run.finish()
}

/// Loads a trained model and checks it against the configuration.
pub fn load_model(
    cfg: &PipelineConfig,
    path: &Path,
    kind: CheckpointKind,
    producer: &str,
) -> CliResult<(DenoiserParams, NoiseSchedule)> {
    let what = match kind {
        CheckpointKind::LineConditioned => "Stage-1 checkpoint",
        CheckpointKind::MultiView => "Stage-4 checkpoint",
    };
    require(path, what, producer)?;
    let ck = load_checkpoint(path)?;
    if ck.kind != kind {
        return Err(CliError::Invalid(format!("{} is not a {what}", path.display())));
    }
    let model = match kind {
        CheckpointKind::LineConditioned => cfg.stage1_model(),
        CheckpointKind::MultiView => cfg.stage4_model(),
    };
    ck.expect_config(&model)?;
    if ck.schedule != cfg.schedule()? {
        return Err(CliError::Invalid(format!(
            "{} was trained with a different noise schedule",
            path.display()
        )));
    }
    Ok((ck.params, ck.schedule))
}

/// Stage-1 initialization followed by Stage-2 refinement of one input.
pub fn refine_views(
    input: &Pose2DSequence,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &PipelineConfig,
    seed: u64,
) -> CliResult<(Vec<Pose2DSequence>, MvOptOutcome)> {
    let rig = cfg.six_view_rig()?;
    let state = MVOptState::initialize(input.clone(), rig, cfg.mv_options(seed), params, sched)?;
    let outcome = optimize_multiview(&state, params, sched)?;
    let mut views = vec![input.clone()];
    views.extend(outcome.phi.iter().cloned());
    Ok((views, outcome))
}

fn view_records(id: &str, fps: f64, views: &[Pose2DSequence], rig: &CameraRig) -> Vec<Record2D> {
    let rig_id = rig.identifier();
    views
        .iter()
        .enumerate()
        .map(|(v, seq)| {
            let mut r = Record2D::new(format!("{id}-v{v}"), fps, seq.clone());
            r.view = Some(ViewTag {
                sequence: id.to_string(),
                view: v,
                rig: rig_id.clone(),
            });
            r
        })
        .collect()
}

fn read_views(path: &Path, rig: &CameraRig) -> CliResult<Vec<Pose2DSequence>> {
    let records = load_dataset(path)?;
    let rig_id = rig.identifier();
    let ok = records.len() == rig.view_count()
        && records
            .iter()
            .enumerate()
            .all(|(v, r)| r.view.as_ref().is_some_and(|t| t.view == v && t.rig == rig_id));
    if !ok {
        return Err(CliError::Invalid(format!(
            "{} does not hold {} ordered views of rig {rig_id}",
            path.display(),
            rig.view_count()
        )));
    }
    Ok(records.into_iter().map(|r| r.seq).collect())
}

/// Training inputs refined for the multi-view dataset.
fn stage2_selection(cfg: &PipelineConfig, records: Vec<Record2D>) -> Vec<(usize, Record2D)> {
    records.into_iter().enumerate().take(cfg.stage2.max_sequences).collect()
}

/// Stage 2 on training inputs: one id, or the first `stage2.max_sequences`.
pub fn optimize_mv(cfg: &PipelineConfig, id: Option<&str>) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    require(&a.train2d(), "single-view 2D training set", "gen-synth")?;
    let (params, sched) = load_model(cfg, &a.stage1_checkpoint(), CheckpointKind::LineConditioned, "train-lcdm")?;
    let name = id.map_or_else(|| "optimize-mv".to_string(), |i| format!("optimize-mv-{i}"));
    let mut run = Run::start(cfg, "optimize-mv", None, &name);
    run.input(&a.train2d())?;
    run.input(&a.stage1_checkpoint())?;
    let records = load_dataset(a.train2d())?;
    let selected: Vec<(usize, Record2D)> = match id {
        Some(want) => {
            let pos = records
                .iter()
                .position(|r| r.id == want)
                .ok_or_else(|| CliError::Invalid(format!("no input sequence with id {want}")))?;
            vec![(pos, records[pos].clone())]
        }
        None => stage2_selection(cfg, records),
    };
    let base = cfg.stream_seed(Stream::Stage2);
    let rig = cfg.six_view_rig()?;
    let results = run.time("optimize", || {
        selected
            .par_iter()
            .map(|(i, r)| refine_views(&r.seq, &params, &sched, cfg, item_seed(base, *i as u64)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let mut losses = BTreeMap::new();
    for ((_, r), (views, outcome)) in selected.iter().zip(&results) {
        let vp = a.stage2_views(&r.id);
        save_2d(&vp, &view_records(&r.id, r.fps, views, &rig))?;
        let tp = a.stage2_trace(&r.id);
        write_text(&tp, &outcome.trace_text())?;
        run.output(&vp)?;
        run.output(&tp)?;
        let l = outcome.losses();
        let (first, last) = (l[0], l[l.len() - 1]);
        info!("{}: consistency loss {first:.6} -> {last:.6}", r.id);
        losses.insert(r.id.clone(), [first, last]);
    }
    run.metric("consistency_loss", losses);
    run.finish()
}

/// Median length of every bone over all frames; the root entry is 0.
pub fn median_bone_lengths(seq: &Pose3DSequence, skeleton: &SkeletonDef) -> Vec<f64> {
    let mut out = vec![0.0; skeleton.joint_count()];
    for (p, c) in skeleton.bones() {
        let mut l: Vec<f64> = (0..seq.frame_count())
            .map(|t| (seq.point(t, c) - seq.point(t, p)).norm())
            .collect();
        l.sort_by(f64::total_cmp);
        let m = l.len();
        out[c] = if m % 2 == 1 { l[m / 2] } else { 0.5 * (l[m / 2 - 1] + l[m / 2]) };
    }
    out
}

/// Rotation of a motion about the vertical axis through the world origin.
pub fn rotate_yaw(seq: &Pose3DSequence, angle: f64) -> CliResult<Pose3DSequence> {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), angle);
    let mut a = seq.array().clone();
    for mut p in a.lanes_mut(Axis(2)) {
        let q = r * Point3::new(p[0], p[1], p[2]);
        p[0] = q.x;
        p[1] = q.y;
        p[2] = q.z;
    }
    Ok(Pose3DSequence::new(a, seq.root_index())?)
}

/// Stage-3 recovery of one refined six-view set: reprojection fit, then the
/// bone-length pass with per-sequence median lengths.
pub fn recover_refined(cfg: &PipelineConfig, views: &[Pose2DSequence]) -> CliResult<(Pose3DSequence, LiftReport)> {
    let rig = cfg.six_view_rig()?;
    let (seq, report) = recover_3d(views, &rig, Some(&cfg.skeleton), &cfg.stage3.lift)?;
    let lengths = median_bone_lengths(&seq, &cfg.skeleton);
    let sk = SkeletonDef::new(cfg.skeleton.parent.clone(), lengths, cfg.skeleton.root_index)?;
    Ok((enforce_bone_lengths(&seq, &sk)?, report))
}

/// Stage 3: recovers 3D motion from the refined views and reprojects it into the four-view rig.
pub fn build_mvdataset(cfg: &PipelineConfig) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    require(&a.train2d(), "single-view 2D training set", "gen-synth")?;
    let records = load_dataset(a.train2d())?;
    let selected = stage2_selection(cfg, records);
    for (_, r) in &selected {
        require(&a.stage2_views(&r.id), &format!("Stage-2 views of {}", r.id), "optimize-mv")?;
    }
    let mut run = Run::start(cfg, "build-mvdataset", None, "build-mvdataset");
    let rig6 = cfg.six_view_rig()?;
    let rig4 = cfg.four_view_rig()?;
    let mut inputs = Vec::with_capacity(selected.len());
    for (_, r) in &selected {
        let p = a.stage2_views(&r.id);
        run.input(&p)?;
        inputs.push(read_views(&p, &rig6)?);
    }
    let recovered = run.time("recover", || {
        inputs
            .par_iter()
            .map(|v| recover_refined(cfg, v))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let copies = cfg.stage3.yaw_copies + 1;
    let mut motions = Vec::with_capacity(recovered.len() * copies);
    for (seq, _) in &recovered {
        for k in 0..copies {
            motions.push(rotate_yaw(seq, std::f64::consts::TAU * k as f64 / copies as f64)?);
        }
    }
    let (ds, skipped) = run.time("project", || Ok(build_mv_dataset(&motions, &rig4)?))?;
    let mut worst = 0.0f64;
    for e in &ds.entries {
        let r = strict_consistency_residual(&e.views, &rig4)?;
        if !(r < STRICT_CONSISTENCY_TOL) {
            return Err(CliError::Invalid(format!(
                "entry {} violates strict consistency: residual {r:e}",
                e.id
            )));
        }
        worst = worst.max(r);
    }
    let fps = selected.first().map_or(cfg.synth.fps, |(_, r)| r.fps);
    save_2d(&a.mvdataset(), &ds.to_records(fps))?;
    let reloaded = four_view_dataset(cfg, &a.mvdataset())?;
    if reloaded.entries.len() != ds.entries.len() {
        return Err(CliError::Invalid("multi-view dataset changed across a save/load cycle".into()));
    }
    let dir = a.stage3_dir();
    let rec3: Vec<Record3D> = selected
        .iter()
        .zip(&recovered)
        .map(|((_, r), (seq, _))| Record3D {
            id: r.id.clone(),
            fps: r.fps,
            seq: seq.clone(),
            parents: cfg.skeleton.parent.clone(),
        })
        .collect();
    save_3d(&dir.join("recovered3d.jsonl"), &rec3)?;
    let mut skipped_text = String::from("index\treason\n");
    for s in &skipped {
        let _ = writeln!(skipped_text, "{}\t{}", s.index, s.reason);
    }
    write_text(&dir.join("skipped.tsv"), &skipped_text)?;
    for p in [a.mvdataset(), dir.join("recovered3d.jsonl"), dir.join("skipped.tsv")] {
        run.output(&p)?;
    }
    run.metric("entries", ds.entries.len());
    run.metric("skipped", skipped.len());
    run.metric("max_consistency_residual", worst);
    info!("multi-view dataset: {} entries, {} skipped", ds.entries.len(), skipped.len());
    run.finish()
}

/// Baseline without global motion: the root is pinned to the world origin and
/// every joint keeps its image offset from the root at the origin's depth.
pub fn naive_lift(input: &Pose2DSequence, rig: &CameraRig, root_index: usize) -> CliResult<Pose3DSequence> {
    let pose = rig.view(0)?;
    let k = rig.intrinsics();
    let depth = pose.to_camera(&Point3::origin()).z;
    if !(depth > 0.0) {
        return Err(CliError::Invalid("the world origin is behind the input camera".into()));
    }
    let r_t = pose.rotation().transpose();
    let (t_len, j_len) = (input.frame_count(), input.joint_count());
    let mut a = Array3::zeros((t_len, j_len, 3));
    for t in 0..t_len {
        let ur = k.unproject(&input.point(t, root_index));
        for j in 0..j_len {
            let u = k.unproject(&input.point(t, j));
            let w = r_t * Vector3::new((u.x - ur.x) * depth, (u.y - ur.y) * depth, 0.0);
            for c in 0..3 {
                a[[t, j, c]] = w[c];
            }
        }
    }
    Ok(Pose3DSequence::new(a, root_index)?)
}

/// Result of lifting one input.
#[derive(Debug, Clone)]
pub struct Lifted {
    pub id: String,
    pub fps: f64,
    pub pose: Pose3DSequence,
    pub views: Vec<Pose2DSequence>,
    pub report: Option<LiftReport>,
    /// Consistency loss at the start and end of Stage-2 refinement.
    pub consistency: Option<(f64, f64)>,
}

struct Models {
    stage1: Option<(DenoiserParams, NoiseSchedule)>,
    stage4: Option<(DenoiserParams, NoiseSchedule)>,
}

fn lift_one(cfg: &PipelineConfig, mode: LiftMode, models: &Models, r: &Record2D, seed: u64) -> CliResult<Lifted> {
    let input = &r.seq;
    let mut consistency = None;
    let (views, rig) = match mode {
        LiftMode::Naive => {
            let rig = cfg.six_view_rig()?;
            let pose = naive_lift(input, &rig, cfg.skeleton.root_index)?;
            return Ok(Lifted {
                id: r.id.clone(),
                fps: r.fps,
                pose,
                views: vec![input.clone()],
                report: None,
                consistency: None,
            });
        }
        LiftMode::Stage1 => {
            let (p, s) = models.stage1.as_ref().expect("Stage-1 model loaded");
            let rig = cfg.six_view_rig()?;
            let mut views = vec![input.clone()];
            views.extend(stage1_views(input, &rig, p, s, seed)?);
            (views, rig)
        }
        LiftMode::Stage2 => {
            let (p, s) = models.stage1.as_ref().expect("Stage-1 model loaded");
            let (views, outcome) = refine_views(input, p, s, cfg, seed)?;
            let l = outcome.losses();
            consistency = Some((l[0], l[l.len() - 1]));
            (views, cfg.six_view_rig()?)
        }
        LiftMode::Full => {
            let (p, s) = models.stage4.as_ref().expect("Stage-4 model loaded");
            let generated = mv_sample(p, input, s, &mut item_rng(seed, 0))?;
            let mut views = vec![input.clone()];
            for g in generated.outer_iter() {
                views.push(Pose2DSequence::new(g.to_owned())?);
            }
            (views, cfg.four_view_rig()?)
        }
    };
    let (pose, report) = recover_3d(&views, &rig, Some(&cfg.skeleton), &cfg.lift)?;
    Ok(Lifted {
        id: r.id.clone(),
        fps: r.fps,
        pose,
        views,
        report: Some(report),
        consistency,
    })
}

/// Lifts every input sequence, taken as view 0 of the rig, to world-frame 3D motion.
pub fn lift(cfg: &PipelineConfig, mode: LiftMode, input: Option<&Path>) -> CliResult<(RunManifest, Vec<Lifted>)> {
    let a = Artifacts::new(cfg);
    let input_path = input.map_or_else(|| a.test2d(), Path::to_path_buf);
    require(&input_path, "lift input sequences", "gen-synth")?;
    let models = Models {
        stage1: match mode {
            LiftMode::Stage1 | LiftMode::Stage2 => Some(load_model(
                cfg,
                &a.stage1_checkpoint(),
                CheckpointKind::LineConditioned,
                "train-lcdm",
            )?),
            _ => None,
        },
        stage4: match mode {
            LiftMode::Full => Some(load_model(cfg, &a.stage4_checkpoint(), CheckpointKind::MultiView, "train-mvdm")?),
            _ => None,
        },
    };
    let mut run = Run::start(cfg, "lift", Some(mode.as_str()), &format!("lift-{}", mode.as_str()));
    run.input(&input_path)?;
    match mode {
        LiftMode::Stage1 | LiftMode::Stage2 => run.input(&a.stage1_checkpoint())?,
        LiftMode::Full => run.input(&a.stage4_checkpoint())?,
        LiftMode::Naive => {}
    }
    let records = load_dataset(&input_path)?;
    let base = cfg.stream_seed(Stream::Lift);
    let lifted = run.time("lift", || {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| lift_one(cfg, mode, &models, r, item_seed(base, i as u64)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let dir = a.lift_dir(mode);
    let rig = match mode {
        LiftMode::Full => cfg.four_view_rig()?,
        _ => cfg.six_view_rig()?,
    };
    let preds: Vec<Record3D> = lifted
        .iter()
        .map(|l| Record3D {
            id: l.id.clone(),
            fps: l.fps,
            seq: l.pose.clone(),
            parents: cfg.skeleton.parent.clone(),
        })
        .collect();
    save_3d(&dir.join("pred3d.jsonl"), &preds)?;
    let mut view_recs = Vec::new();
    let mut report = String::from("id\tconverged\titerations\treprojection\tconsistency_start\tconsistency_end\n");
    for l in &lifted {
        if l.views.len() == rig.view_count() {
            view_recs.extend(view_records(&l.id, l.fps, &l.views, &rig));
        }
        if let Some(rep) = &l.report {
            let (c0, c1) = l
                .consistency
                .map_or_else(|| ("-".to_string(), "-".to_string()), |(a, b)| (format!("{a:e}"), format!("{b:e}")));
            let _ = writeln!(
                report,
                "{}\t{}\t{}\t{:e}\t{c0}\t{c1}",
                l.id, rep.converged, rep.iterations, rep.reprojection
            );
        }
    }
    save_2d(&dir.join("views.jsonl"), &view_recs)?;
    write_text(&dir.join("report.tsv"), &report)?;
    for name in ["pred3d.jsonl", "views.jsonl", "report.tsv"] {
        run.output(&dir.join(name))?;
    }
    run.metric("sequences", lifted.len());
    Ok((run.finish()?, lifted))
}

fn id_mismatch(pred: &[String], gt: &[String]) -> Option<String> {
    let p: BTreeSet<&String> = pred.iter().collect();
    let g: BTreeSet<&String> = gt.iter().collect();
    let mut msg = String::new();
    for id in g.difference(&p) {
        let _ = writeln!(msg, "  missing prediction: {id}");
    }
    for id in p.difference(&g) {
        let _ = writeln!(msg, "  no ground truth: {id}");
    }
    let mut seen = BTreeSet::new();
    for id in pred {
        if !seen.insert(id) {
            let _ = writeln!(msg, "  duplicate prediction: {id}");
        }
    }
    (!msg.is_empty()).then(|| msg.trim_end().to_string())
}

/// Optional file overrides of `eval`.
#[derive(Debug, Clone, Default)]
pub struct EvalPaths {
    pub predictions: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub observed: Option<PathBuf>,
}

/// Scores predictions against 3D ground truth and the observed input view.
pub fn eval(cfg: &PipelineConfig, mode: LiftMode, paths: &EvalPaths) -> CliResult<(RunManifest, MetricReport)> {
    let a = Artifacts::new(cfg);
    let pred_path = paths.predictions.clone().unwrap_or_else(|| a.predictions(mode));
    let gt_path = paths.ground_truth.clone().unwrap_or_else(|| a.test3d());
    let obs_path = paths.observed.clone().unwrap_or_else(|| a.test2d());
    require(&pred_path, "predictions", &format!("lift --mode {}", mode.as_str()))?;
    require(&gt_path, "3D ground truth", "gen-synth")?;
    require(&obs_path, "observed 2D inputs", "gen-synth")?;
    let mut run = Run::start(cfg, "eval", Some(mode.as_str()), &format!("eval-{}", mode.as_str()));
    for p in [&pred_path, &gt_path, &obs_path] {
        run.input(p)?;
    }
    let pred = load_dataset_3d(&pred_path)?;
    let gt = load_dataset_3d(&gt_path)?;
    let obs = load_dataset(&obs_path)?;
    let pred_ids: Vec<String> = pred.iter().map(|r| r.id.clone()).collect();
    let gt_ids: Vec<String> = gt.iter().map(|r| r.id.clone()).collect();
    if let Some(msg) = id_mismatch(&pred_ids, &gt_ids) {
        return Err(CliError::IdMismatch(msg));
    }
    let obs_ids: Vec<String> = obs.iter().map(|r| r.id.clone()).collect();
    let missing_obs: Vec<&String> = pred_ids.iter().filter(|i| !obs_ids.contains(i)).collect();
    if !missing_obs.is_empty() {
        let list: Vec<String> = missing_obs.iter().map(|i| format!("  no observed input: {i}")).collect();
        return Err(CliError::IdMismatch(list.join("\n")));
    }
    let gt_map: BTreeMap<&str, &Record3D> = gt.iter().map(|r| (r.id.as_str(), r)).collect();
    let obs_map: BTreeMap<&str, &Record2D> = obs.iter().map(|r| (r.id.as_str(), r)).collect();
    let rig = cfg.six_view_rig()?;
    let per = pred
        .iter()
        .map(|p| {
            let g = gt_map[p.id.as_str()];
            let o = obs_map[p.id.as_str()];
            Ok(SequenceMetrics::evaluate(&p.id, &p.seq, Some(&g.seq), &o.seq, &rig, 0)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = MetricReport::new(per)?;
    let dir = a.eval_dir(mode);
    write_text(&dir.join("summary.tsv"), &report.summary_text())?;
    write_text(&dir.join("detail.tsv"), &report.detail_text())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&dir.join("report.json"), &format!("{json}\n"))?;
    for name in ["summary.tsv", "detail.tsv", "report.json"] {
        run.output(&dir.join(name))?;
    }
    run.metric("mean", &report.mean);
    Ok((run.finish()?, report))
}

/// Root-trajectory plots and overlay descriptions of lifted sequences.
pub fn render_predictions(
    cfg: &PipelineConfig,
    mode: LiftMode,
    id: Option<&str>,
    predictions: Option<&Path>,
) -> CliResult<RunManifest> {
    let a = Artifacts::new(cfg);
    let pred_path = predictions.map_or_else(|| a.predictions(mode), Path::to_path_buf);
    require(&pred_path, "predictions", &format!("lift --mode {}", mode.as_str()))?;
    let name = match id {
        Some(i) => format!("render-{}-{i}", mode.as_str()),
        None => format!("render-{}", mode.as_str()),
    };
    let mut run = Run::start(cfg, "render", Some(mode.as_str()), &name);
    run.input(&pred_path)?;
    let pred = load_dataset_3d(&pred_path)?;
    let obs_path = a.test2d();
    let observed: BTreeMap<String, Pose2DSequence> = if obs_path.is_file() {
        run.input(&obs_path)?;
        load_dataset(&obs_path)?.into_iter().map(|r| (r.id, r.seq)).collect()
    } else {
        BTreeMap::new()
    };
    let chosen: Vec<&Record3D> = match id {
        Some(want) => vec![pred
            .iter()
            .find(|r| r.id == want)
            .ok_or_else(|| CliError::Invalid(format!("no prediction with id {want}")))?],
        None => pred.iter().collect(),
    };
    let rig = cfg.six_view_rig()?;
    let dir = a.render_dir(mode);
    for r in chosen {
        let (svg, overlay) = render::render_sequence(&r.id, &r.seq, observed.get(&r.id), &r.parents, &rig, 0)?;
        let sp = dir.join(format!("{}.svg", r.id));
        let op = dir.join(format!("{}.overlay.json", r.id));
        write_text(&sp, &svg)?;
        write_text(&op, &overlay)?;
        run.output(&sp)?;
        run.output(&op)?;
    }
    run.finish()
}
