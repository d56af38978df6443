//! Training loops. Each step draws its examples from a random stream keyed by
//! `(seed, step)`, so resumed runs replay the same example sequence.

use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::optim::AdamW;
use super::params::DenoiserParams;
use super::{backward, forward, lcd_output_grad, lcd_outputs, lcd_tokens, mv_output_grad, mv_outputs, mv_tokens};
use crate::diffusion::{
    line_matching_grad, line_matching_loss, q_sample_array, reconstruction_loss, sign, standard_normal,
    LossParts, NoiseSchedule, TrainingConfig,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{lines_to_epipole, sample_virtual_epipole, Bounds};
use crate::motion::{LineSet, Pose2DSequence};

/// Examples per gradient chunk. Chunks are summed in a fixed order so results
/// do not depend on the number of worker threads.
const CHUNK: usize = 4;

/// Parameters, optimizer and step counter of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: DenoiserParams, cfg: &TrainingConfig) -> Self {
        let optimizer = AdamW::new(&params, cfg.learning_rate, cfg.grad_clip);
        Self {
            params,
            optimizer,
            step: 0,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &TrainingConfig) -> Self {
        let optimizer = ck
            .optimizer
            .unwrap_or_else(|| AdamW::new(&ck.params, cfg.learning_rate, cfg.grad_clip));
        Self {
            params: ck.params,
            optimizer,
            step: ck.train_step,
        }
    }

    pub fn to_checkpoint(&self, kind: CheckpointKind, schedule: &NoiseSchedule) -> Checkpoint {
        Checkpoint {
            kind,
            schedule: schedule.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            train_step: self.step,
        }
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn window<R: Rng + ?Sized>(len: usize, max_t: usize, rng: &mut R) -> (usize, usize) {
    if len <= max_t {
        (0, len)
    } else {
        let start = rng.gen_range(0..=len - max_t);
        (start, start + max_t)
    }
}

fn check_setup(state: &TrainState, sched: &NoiseSchedule, cfg: &TrainingConfig, empty: bool) -> Result<()> {
    cfg.validate()?;
    if empty {
        return Err(Error::EmptyDataset("no training sequences".into()));
    }
    if state.params.config.diffusion_steps != sched.steps() {
        return Err(invalid(format!(
            "model expects {} diffusion steps, schedule has {}",
            state.params.config.diffusion_steps,
            sched.steps()
        )));
    }
    Ok(())
}

fn apply_step(
    state: &mut TrainState,
    parts: Vec<Result<(LossParts, DenoiserParams)>>,
    batch: usize,
) -> Result<TrainRecord> {
    let mut loss = LossParts::default();
    let mut grads = state.params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss.total += l.total;
        loss.recon += l.recon;
        loss.line += l.line;
        grads.add_scaled(&g, 1.0);
    }
    let b = batch as f64;
    loss.total /= b;
    loss.recon /= b;
    loss.line /= b;
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", state.step)));
    }
    let grad_norm = state.optimizer.update(&mut state.params, &grads);
    let rec = TrainRecord {
        step: state.step,
        loss,
        grad_norm,
    };
    state.step += 1;
    Ok(rec)
}

struct LcdExample {
    x0: Pose2DSequence,
    x_n: Pose2DSequence,
    n: usize,
    lines: LineSet,
}

fn lcd_example<R: Rng + ?Sized>(
    data: &[Pose2DSequence],
    max_t: usize,
    sched: &NoiseSchedule,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<LcdExample> {
    let src = &data[rng.gen_range(0..data.len())];
    let (a, b) = window(src.frame_count(), max_t, rng);
    let x0 = Pose2DSequence::new(src.array().slice(s![a..b, .., ..]).to_owned())?;
    let e = sample_virtual_epipole(rng, bounds, &x0)?;
    let lines = lines_to_epipole(&x0, &e)?;
    let n = rng.gen_range(1..=sched.steps());
    let eps = standard_normal(x0.array().raw_dim(), rng);
    let x_n = Pose2DSequence::new(q_sample_array(x0.array(), n, &eps, sched)?)?;
    Ok(LcdExample { x0, x_n, n, lines })
}

fn lcd_chunk_grad(
    params: &DenoiserParams,
    chunk: &[LcdExample],
    cfg: &TrainingConfig,
    batch: usize,
) -> Result<(LossParts, DenoiserParams)> {
    let items: Vec<_> = chunk.iter().map(|e| (&e.x_n, e.n, &e.lines)).collect();
    let tokens = lcd_tokens(params, &items)?;
    let (out, cache) = forward(params, &tokens)?;
    let frames: Vec<usize> = chunk.iter().map(|e| e.x0.frame_count()).collect();
    let preds = lcd_outputs(&out, &frames, params.config.joint_count);
    let mut loss = LossParts::default();
    let mut d_out = Vec::with_capacity(chunk.len());
    for (e, pred) in chunk.iter().zip(preds) {
        let pred = Pose2DSequence::new(pred)?;
        let recon = reconstruction_loss(pred.array(), e.x0.array());
        let line = line_matching_loss(&pred, &e.lines)?;
        loss.recon += recon;
        loss.line += line;
        loss.total += recon + cfg.lambda_line * line;
        let inv = 1.0 / (pred.array().len() as f64 * batch as f64);
        let mut g = (pred.array() - e.x0.array()).mapv(|d| sign(d) * inv);
        g.scaled_add(cfg.lambda_line / batch as f64, &line_matching_grad(&pred, &e.lines)?);
        d_out.push(g);
    }
    let grads = backward(params, &tokens, &cache, &lcd_output_grad(&d_out));
    Ok((loss, grads))
}

/// Trains the line-conditioned model with virtual-epipole line conditions for `steps` steps.
pub fn train_line_conditioned(
    state: &mut TrainState,
    data: &[Pose2DSequence],
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
    steps: usize,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    check_setup(state, sched, cfg, data.is_empty())?;
    if state.params.config.is_multi_view() {
        return Err(invalid("expected line-conditioned parameters"));
    }
    let bounds = Bounds::square(cfg.epipole_half_width);
    let max_t = state.params.config.max_t;
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let examples = (0..cfg.batch_size)
            .map(|_| lcd_example(data, max_t, sched, &bounds, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let params = &state.params;
        let parts: Vec<_> = examples
            .par_chunks(CHUNK)
            .map(|c| lcd_chunk_grad(params, c, cfg, cfg.batch_size))
            .collect();
        let rec = apply_step(state, parts, cfg.batch_size)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

struct MvExample {
    clean: Array4<f64>,
    noisy: Array4<f64>,
    cond: Pose2DSequence,
    n: usize,
}

fn mv_chunk_grad(params: &DenoiserParams, chunk: &[MvExample], batch: usize) -> Result<(LossParts, DenoiserParams)> {
    let items: Vec<_> = chunk.iter().map(|e| (&e.noisy, e.n, &e.cond)).collect();
    let tokens = mv_tokens(params, &items)?;
    let (out, cache) = forward(params, &tokens)?;
    let views = params.config.view_count;
    let frames: Vec<usize> = chunk.iter().map(|e| e.cond.frame_count()).collect();
    let preds = mv_outputs(&out, &frames, views, params.config.joint_count);
    let mut loss = LossParts::default();
    let mut d_out = Vec::with_capacity(chunk.len());
    for (e, pred) in chunk.iter().zip(preds) {
        let target = e.clean.slice(s![1.., .., .., ..]).to_owned();
        let recon = reconstruction_loss(&pred, &target);
        loss.recon += recon;
        loss.total += recon;
        let inv = 1.0 / (pred.len() as f64 * batch as f64);
        d_out.push((&pred - &target).mapv(|d| sign(d) * inv));
    }
    let grads = backward(params, &tokens, &cache, &mv_output_grad(&d_out, views));
    Ok((loss, grads))
}

/// Trains the multi-view model on clean `(V,T,J,2)` samples; view 0 is the condition.
pub fn train_multi_view(
    state: &mut TrainState,
    data: &[Array4<f64>],
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
    steps: usize,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    check_setup(state, sched, cfg, data.is_empty())?;
    let pcfg = state.params.config.clone();
    if !pcfg.is_multi_view() {
        return Err(invalid("expected multi-view parameters"));
    }
    if let Some(bad) = data.iter().find(|d| d.shape()[0] != pcfg.view_count) {
        return Err(invalid(format!(
            "sample has {} views, model expects {}",
            bad.shape()[0],
            pcfg.view_count
        )));
    }
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let mut examples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let src = &data[rng.gen_range(0..data.len())];
            let (a, b) = window(src.shape()[1], pcfg.max_t, &mut rng);
            let clean = src.slice(s![.., a..b, .., ..]).to_owned();
            let n = rng.gen_range(1..=sched.steps());
            let eps = standard_normal(clean.raw_dim(), &mut rng);
            let mut noisy = q_sample_array(&clean, n, &eps, sched)?;
            noisy.index_axis_mut(Axis(0), 0).fill(0.0);
            let cond = Pose2DSequence::new(clean.index_axis(Axis(0), 0).to_owned())?;
            examples.push(MvExample { clean, noisy, cond, n });
        }
        let params = &state.params;
        let parts: Vec<_> = examples
            .par_chunks(CHUNK)
            .map(|c| mv_chunk_grad(params, c, cfg.batch_size))
            .collect();
        let rec = apply_step(state, parts, cfg.batch_size)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
