//! Transformer denoisers: the line-conditioned single-view model and the
//! multi-view model with cross-view attention.
//!
//! Both predict the clean signal. One token is formed per frame (per view for
//! the multi-view model); gradients are computed by a manual backward pass.

mod checkpoint;
mod network;
mod optim;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use network::{backward, forward, positional_encoding, ForwardCache, TokenBatch};
pub use optim::AdamW;
pub use params::{init_params, Attention, Block, DenoiserConfig, DenoiserParams, LayerNorm, Linear};
pub use train::{train_line_conditioned, train_multi_view, TrainRecord, TrainState};

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;

use crate::diffusion::{ancestral_sample, LineDenoiser, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::motion::{LineSet, Pose2DSequence};

/// One input of the line-conditioned model: noisy sequence, step and lines.
pub type LcdInput<'a> = (&'a Pose2DSequence, usize, &'a LineSet);

/// One input of the multi-view model: noisy views `(V,T,J,2)`, step and the clean view-0 sequence.
pub type MvInput<'a> = (&'a Array4<f64>, usize, &'a Pose2DSequence);

/// Tokens for a batch of line-conditioned inputs, one self-attention group per sequence.
pub fn lcd_tokens(p: &DenoiserParams, items: &[LcdInput<'_>]) -> Result<TokenBatch> {
    let cfg = &p.config;
    if cfg.is_multi_view() {
        return Err(invalid("multi-view parameters used for the line-conditioned model"));
    }
    let j = cfg.joint_count;
    let total: usize = items.iter().map(|(x, _, _)| x.frame_count()).sum();
    let mut inputs = Array2::zeros((total, cfg.input_dim()));
    let mut steps = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut self_groups = Vec::with_capacity(items.len());
    let mut row = 0;
    for (x, n, l) in items {
        if x.joint_count() != j {
            return Err(invalid(format!("expected {j} joints, got {}", x.joint_count())));
        }
        if !l.matches(x) {
            return Err(invalid("line set shape does not match the sequence"));
        }
        let t_len = x.frame_count();
        if t_len == 0 || t_len > cfg.max_t {
            return Err(invalid(format!("sequence length {t_len} outside 1..={}", cfg.max_t)));
        }
        let (xa, la) = (x.array(), l.array());
        for t in 0..t_len {
            let mut r = inputs.row_mut(row + t);
            for jj in 0..j {
                r[2 * jj] = xa[[t, jj, 0]];
                r[2 * jj + 1] = xa[[t, jj, 1]];
                for c in 0..3 {
                    r[2 * j + 3 * jj + c] = la[[t, jj, c]];
                }
            }
            steps.push(*n);
            positions.push(t);
        }
        self_groups.push((row..row + t_len).collect());
        row += t_len;
    }
    Ok(TokenBatch {
        inputs,
        steps,
        positions,
        views: None,
        self_groups,
        cross_groups: Vec::new(),
    })
}

/// Splits per-token outputs back into one `(T,J,2)` array per input.
pub fn lcd_outputs(out: &Array2<f64>, frames: &[usize], joints: usize) -> Vec<Array3<f64>> {
    let mut row = 0;
    frames
        .iter()
        .map(|&t| {
            let a = out
                .slice(s![row..row + t, ..])
                .to_owned()
                .into_shape_with_order((t, joints, 2))
                .expect("output width is 2J");
            row += t;
            a
        })
        .collect()
}

/// Stacks per-input output gradients into a per-token matrix.
pub fn lcd_output_grad(grads: &[Array3<f64>]) -> Array2<f64> {
    let total: usize = grads.iter().map(|g| g.shape()[0]).sum();
    let width = grads.first().map(|g| g.shape()[1] * 2).unwrap_or(0);
    let mut out = Array2::zeros((total, width));
    let mut row = 0;
    for g in grads {
        let t = g.shape()[0];
        let flat = g.view().into_shape_with_order((t, width)).expect("contiguous");
        out.slice_mut(s![row..row + t, ..]).assign(&flat);
        row += t;
    }
    out
}

/// Clean-sequence prediction of the line-conditioned model.
pub fn lcd_forward(p: &DenoiserParams, x_n: &Pose2DSequence, n: usize, lines: &LineSet) -> Result<Pose2DSequence> {
    let batch = lcd_tokens(p, &[(x_n, n, lines)])?;
    let (out, _) = forward(p, &batch)?;
    let mut v = lcd_outputs(&out, &[x_n.frame_count()], p.config.joint_count);
    Pose2DSequence::new(v.remove(0))
}

/// Batched prediction; all sequences share one network call.
pub fn lcd_forward_batch(p: &DenoiserParams, items: &[LcdInput<'_>]) -> Result<Vec<Pose2DSequence>> {
    let batch = lcd_tokens(p, items)?;
    let (out, _) = forward(p, &batch)?;
    let frames: Vec<usize> = items.iter().map(|(x, _, _)| x.frame_count()).collect();
    lcd_outputs(&out, &frames, p.config.joint_count)
        .into_iter()
        .map(Pose2DSequence::new)
        .collect()
}

/// Tokens ordered `(item, view, frame)`; self groups per (item, view), cross groups per (item, frame).
pub fn mv_tokens(p: &DenoiserParams, items: &[MvInput<'_>]) -> Result<TokenBatch> {
    let cfg = &p.config;
    if !cfg.is_multi_view() {
        return Err(invalid("line-conditioned parameters used for the multi-view model"));
    }
    let (v_count, j) = (cfg.view_count, cfg.joint_count);
    let mut total = 0;
    for (x, _, cond) in items {
        let sh = x.shape();
        if sh[0] != v_count || sh[2] != j || sh[3] != 2 {
            return Err(invalid(format!(
                "expected noisy views of shape ({v_count},T,{j},2), got {sh:?}"
            )));
        }
        if cond.frame_count() != sh[1] || cond.joint_count() != j {
            return Err(invalid("conditioning sequence shape does not match the views"));
        }
        if sh[1] == 0 || sh[1] > cfg.max_t {
            return Err(invalid(format!("sequence length {} outside 1..={}", sh[1], cfg.max_t)));
        }
        total += v_count * sh[1];
    }
    let mut inputs = Array2::zeros((total, cfg.input_dim()));
    let mut steps = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut views = Vec::with_capacity(total);
    let mut self_groups = Vec::new();
    let mut cross_groups = Vec::new();
    let mut base = 0;
    for (x, n, cond) in items {
        let t_len = x.shape()[1];
        for v in 0..v_count {
            let start = base + v * t_len;
            for t in 0..t_len {
                let mut r = inputs.row_mut(start + t);
                for jj in 0..j {
                    for c in 0..2 {
                        r[2 * jj + c] = if v == 0 {
                            cond.array()[[t, jj, c]]
                        } else {
                            x[[v, t, jj, c]]
                        };
                    }
                }
                steps.push(*n);
                positions.push(t);
                views.push(v);
            }
            self_groups.push((start..start + t_len).collect());
        }
        for t in 0..t_len {
            cross_groups.push((0..v_count).map(|v| base + v * t_len + t).collect());
        }
        base += v_count * t_len;
    }
    Ok(TokenBatch {
        inputs,
        steps,
        positions,
        views: Some(views),
        self_groups,
        cross_groups,
    })
}

/// Per-input predictions `(V-1,T,J,2)` for the generated views.
pub fn mv_outputs(out: &Array2<f64>, frames: &[usize], views: usize, joints: usize) -> Vec<Array4<f64>> {
    let mut base = 0;
    frames
        .iter()
        .map(|&t| {
            let block = out
                .slice(s![base + t..base + views * t, ..])
                .to_owned()
                .into_shape_with_order((views - 1, t, joints, 2))
                .expect("output width is 2J");
            base += views * t;
            block
        })
        .collect()
}

/// Per-token gradient from per-input gradients on views `1..V`; view-0 rows stay zero.
pub fn mv_output_grad(grads: &[Array4<f64>], views: usize) -> Array2<f64> {
    let total: usize = grads.iter().map(|g| views * g.shape()[1]).sum();
    let width = grads.first().map(|g| g.shape()[2] * 2).unwrap_or(0);
    let mut out = Array2::zeros((total, width));
    let mut base = 0;
    for g in grads {
        let t = g.shape()[1];
        let flat = g.view().into_shape_with_order(((views - 1) * t, width)).expect("contiguous");
        out.slice_mut(s![base + t..base + views * t, ..]).assign(&flat);
        base += views * t;
    }
    out
}

/// Predictions for views `1..V` given noisy views and the clean view-0 condition.
pub fn mv_forward(p: &DenoiserParams, x_n_views: &Array4<f64>, n: usize, cond: &Pose2DSequence) -> Result<Array4<f64>> {
    let batch = mv_tokens(p, &[(x_n_views, n, cond)])?;
    let (out, _) = forward(p, &batch)?;
    let t = x_n_views.shape()[1];
    Ok(mv_outputs(&out, &[t], p.config.view_count, p.config.joint_count).remove(0))
}

pub fn mv_forward_batch(p: &DenoiserParams, items: &[MvInput<'_>]) -> Result<Vec<Array4<f64>>> {
    let batch = mv_tokens(p, items)?;
    let (out, _) = forward(p, &batch)?;
    let frames: Vec<usize> = items.iter().map(|(x, _, _)| x.shape()[1]).collect();
    Ok(mv_outputs(&out, &frames, p.config.view_count, p.config.joint_count))
}

/// Ancestral sampling of views `1..V` conditioned on the clean view-0 sequence.
pub fn mv_sample<R: Rng + ?Sized>(
    p: &DenoiserParams,
    cond: &Pose2DSequence,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array4<f64>> {
    let v_count = p.config.view_count;
    if !p.config.is_multi_view() {
        return Err(invalid("line-conditioned parameters used for the multi-view model"));
    }
    let (t, j) = (cond.frame_count(), cond.joint_count());
    let mut full = Array4::zeros((v_count, t, j, 2));
    ancestral_sample(ndarray::Dim([v_count - 1, t, j, 2]), sched, rng, |x, n| {
        full.slice_mut(s![1.., .., .., ..]).assign(x);
        mv_forward(p, &full, n, cond)
    })
}

impl LineDenoiser for DenoiserParams {
    fn predict_x0(&self, x_n: &Pose2DSequence, n: usize, lines: &LineSet) -> Result<Pose2DSequence> {
        lcd_forward(self, x_n, n, lines)
    }
}
