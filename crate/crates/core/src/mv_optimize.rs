//! Joint refinement of the five unobserved views of a six-view rig using score
//! distillation against the line-conditioned model plus pairwise epipolar consistency.

use nalgebra::{Matrix3, Point2, Vector3};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    q_sample_array, sample, sign, standard_normal, x0_to_eps_array, LineDenoiser, NoiseSchedule,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{epipolar_line, CameraRig};
use crate::motion::{LineSet, Pose2DSequence};

/// Residuals at or below this distance count as exactly zero for the subgradient.
pub const ZERO_RESIDUAL: f64 = 1e-12;

/// Number of views of the refinement rig.
pub const RIG_VIEWS: usize = 6;

/// How the unobserved views start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiInit {
    /// Sample the line-conditioned model with lines from the input view.
    Sample,
    /// Copy the input sequence into every view.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvOptOptions {
    pub iterations: usize,
    pub step_size: f64,
    /// Linearly decay the step size to zero over the run.
    pub step_decay: bool,
    pub w_sds: f64,
    pub w_mv: f64,
    /// SDS noise-level range as fractions of the schedule length.
    pub n_fraction: (f64, f64),
    /// Constant SDS weight.
    pub sds_weight: f64,
    pub init: PhiInit,
    pub seed: u64,
}

impl Default for MvOptOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 1e-2,
            step_decay: true,
            w_sds: 1.0,
            w_mv: 10.0,
            n_fraction: (0.02, 0.98),
            sds_weight: 1.0,
            init: PhiInit::Sample,
            seed: 0,
        }
    }
}

impl MvOptOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_sds >= 0.0 && self.w_mv >= 0.0 && self.sds_weight >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid("step size must be positive"));
        }
        let (a, b) = self.n_fraction;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(invalid("noise-level fractions must satisfy 0 <= min <= max <= 1"));
        }
        Ok(())
    }

    /// Inclusive step range, clamped to `1..=N`.
    pub fn n_range(&self, sched: &NoiseSchedule) -> (usize, usize) {
        let n = sched.steps() as f64;
        let lo = ((self.n_fraction.0 * n).round() as usize).clamp(1, sched.steps());
        let hi = ((self.n_fraction.1 * n).round() as usize).clamp(lo, sched.steps());
        (lo, hi)
    }
}

/// Optimization variables and their fixed context.
#[derive(Debug, Clone)]
pub struct MVOptState {
    /// Views `1..=5`.
    pub phi: Vec<Pose2DSequence>,
    /// View 0, never modified.
    pub input_seq: Pose2DSequence,
    pub rig: CameraRig,
    pub options: MvOptOptions,
}

fn check_rig(rig: &CameraRig) -> Result<()> {
    match rig.layout() {
        Some(l) if l.n_views == RIG_VIEWS && (l.angle_step_deg - 60.0).abs() < 1e-12 => Ok(()),
        _ => Err(invalid(format!(
            "refinement needs the six-view 60-degree rig, got {}",
            rig.identifier()
        ))),
    }
}

impl MVOptState {
    pub fn new(
        input_seq: Pose2DSequence,
        phi: Vec<Pose2DSequence>,
        rig: CameraRig,
        options: MvOptOptions,
    ) -> Result<Self> {
        check_rig(&rig)?;
        options.validate()?;
        if phi.len() != RIG_VIEWS - 1 {
            return Err(invalid(format!("expected 5 view variables, got {}", phi.len())));
        }
        if phi.iter().any(|p| !p.same_shape(&input_seq)) {
            return Err(invalid("view variables must match the input sequence shape"));
        }
        Ok(Self {
            phi,
            input_seq,
            rig,
            options,
        })
    }

    /// Starts every unobserved view per `options.init`.
    pub fn initialize<D: LineDenoiser + Sync + ?Sized>(
        input_seq: Pose2DSequence,
        rig: CameraRig,
        options: MvOptOptions,
        denoiser: &D,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        check_rig(&rig)?;
        let phi = match options.init {
            PhiInit::Copy => vec![input_seq.clone(); RIG_VIEWS - 1],
            PhiInit::Sample => stage1_views(&input_seq, &rig, denoiser, sched, options.seed)?,
        };
        Self::new(input_seq, phi, rig, options)
    }

    /// All six sequences, input view first.
    pub fn all_views(&self) -> Vec<Pose2DSequence> {
        let mut v = Vec::with_capacity(RIG_VIEWS);
        v.push(self.input_seq.clone());
        v.extend(self.phi.iter().cloned());
        v
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples each view `1..V` of `rig` conditioned on lines from the input view.
pub fn stage1_views<D: LineDenoiser + Sync + ?Sized>(
    input: &Pose2DSequence,
    rig: &CameraRig,
    denoiser: &D,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Pose2DSequence>> {
    (1..rig.view_count())
        .into_par_iter()
        .map(|k| {
            let lines = input_view_lines(input, rig, k)?;
            sample(denoiser, &lines, sched, &mut stream_rng(seed, k as u64))
        })
        .collect()
}

/// Epipolar lines in view `k` of every input-view joint.
pub fn input_view_lines(input: &Pose2DSequence, rig: &CameraRig, k: usize) -> Result<LineSet> {
    let f = rig
        .fundamental(0, k)
        .ok_or_else(|| invalid(format!("rig has no view pair (0, {k})")))?;
    let (t_len, j_len) = (input.frame_count(), input.joint_count());
    let mut coeffs = Array3::zeros((t_len, j_len, 3));
    for t in 0..t_len {
        for j in 0..j_len {
            let l = epipolar_line(f, &input.point(t, j))?;
            coeffs[[t, j, 0]] = l.a;
            coeffs[[t, j, 1]] = l.b;
            coeffs[[t, j, 2]] = l.c;
        }
    }
    LineSet::new(coeffs)
}

/// `w (eps_hat - eps)` at a random step in `n_range`; the denoiser is not differentiated.
pub fn sds_gradient<D: LineDenoiser + ?Sized, R: Rng + ?Sized>(
    phi_k: &Pose2DSequence,
    lines: &LineSet,
    denoiser: &D,
    sched: &NoiseSchedule,
    rng: &mut R,
    n_range: (usize, usize),
    weight: f64,
) -> Result<Array3<f64>> {
    let (lo, hi) = n_range;
    if !(1 <= lo && lo <= hi && hi <= sched.steps()) {
        return Err(invalid(format!("noise range ({lo}, {hi}) outside 1..={}", sched.steps())));
    }
    let n = rng.gen_range(lo..=hi);
    let eps = standard_normal(phi_k.array().raw_dim(), rng);
    let x_n = q_sample_array(phi_k.array(), n, &eps, sched)?;
    let x_n = Pose2DSequence::new(x_n)?;
    let x0_hat = denoiser.predict_x0(&x_n, n, lines)?;
    let eps_hat = x0_to_eps_array(x0_hat.array(), x_n.array(), n, sched)?;
    Ok((eps_hat - eps) * weight)
}

fn check_views(seqs: &[Pose2DSequence], rig: &CameraRig) -> Result<()> {
    if seqs.len() != rig.view_count() {
        return Err(invalid(format!(
            "{} sequences for a {}-view rig",
            seqs.len(),
            rig.view_count()
        )));
    }
    if seqs.len() < 2 {
        return Err(Error::InsufficientViews(seqs.len()));
    }
    if seqs.iter().any(|s| !s.same_shape(&seqs[0])) {
        return Err(invalid("all view sequences must share one shape"));
    }
    Ok(())
}

/// Residual of `q` against the epipolar line of `p` under `f`, with its partial
/// derivatives. `None` when `p` maps to a degenerate line.
fn directed_term(f: &Matrix3<f64>, p: &Point2<f64>, q: &Point2<f64>) -> Option<(f64, [f64; 2], [f64; 2])> {
    let l = f * Vector3::new(p.x, p.y, 1.0);
    let s = (l.x * l.x + l.y * l.y).sqrt();
    if s <= 1e-12 * f.norm() * (p.coords.norm() + 1.0) {
        return None;
    }
    let qh = Vector3::new(q.x, q.y, 1.0);
    let raw = l.dot(&qh);
    let r = raw / s;
    let sg = if r.abs() <= ZERO_RESIDUAL { 0.0 } else { sign(r) };
    let dq = [sg * l.x / s, sg * l.y / s];
    let ft_q = f.transpose() * qh;
    let mut dp = [0.0; 2];
    for (i, d) in dp.iter_mut().enumerate() {
        let ds = (l.x * f[(0, i)] + l.y * f[(1, i)]) / s;
        *d = sg * (ft_q[i] / s - raw * ds / (s * s));
    }
    Some((r.abs(), dq, dp))
}

/// Mean over all unordered view pairs of the two directed epipolar line losses, halved.
pub fn multiview_consistency_loss(seqs: &[Pose2DSequence], rig: &CameraRig) -> Result<f64> {
    Ok(consistency(seqs, rig, false)?.0)
}

/// Loss value and its gradient with respect to every view's joints.
pub fn multiview_consistency_grad(seqs: &[Pose2DSequence], rig: &CameraRig) -> Result<(f64, Vec<Array3<f64>>)> {
    consistency(seqs, rig, true)
}

fn consistency(seqs: &[Pose2DSequence], rig: &CameraRig, want_grad: bool) -> Result<(f64, Vec<Array3<f64>>)> {
    check_views(seqs, rig)?;
    let v_count = seqs.len();
    let pairs = v_count * (v_count - 1) / 2;
    let norm = 1.0 / (2.0 * pairs as f64);
    let (t_len, j_len) = (seqs[0].frame_count(), seqs[0].joint_count());
    let mut grads = if want_grad {
        vec![Array3::zeros((t_len, j_len, 2)); v_count]
    } else {
        Vec::new()
    };
    let mut total = 0.0;
    for v in 0..v_count {
        for w in 0..v_count {
            if v == w {
                continue;
            }
            let f = rig.fundamental(v, w).expect("rig holds every ordered pair");
            for t in 0..t_len {
                for j in 0..j_len {
                    let p = seqs[v].point(t, j);
                    let q = seqs[w].point(t, j);
                    if let Some((r, dq, dp)) = directed_term(f, &p, &q) {
                        total += r;
                        if want_grad {
                            for c in 0..2 {
                                grads[w][[t, j, c]] += norm * dq[c];
                                grads[v][[t, j, c]] += norm * dp[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((norm * total, grads))
}

/// Per-iteration record of the refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub consistency_loss: f64,
    /// Norm of the SDS gradient of views `1..=5`.
    pub sds_norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MvOptOutcome {
    pub phi: Vec<Pose2DSequence>,
    /// One row per iteration plus a final row after the last update.
    pub trace: Vec<TraceRow>,
}

impl MvOptOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.consistency_loss).collect()
    }

    /// Tab-separated trace with a header line.
    pub fn trace_text(&self) -> String {
        let mut out = String::from("iteration\tconsistency_loss");
        for k in 1..RIG_VIEWS {
            out.push_str(&format!("\tsds_norm_view{k}"));
        }
        out.push('\n');
        for row in &self.trace {
            out.push_str(&format!("{}\t{:e}", row.iteration, row.consistency_loss));
            for k in 0..RIG_VIEWS - 1 {
                match row.sds_norms.get(k) {
                    Some(n) => out.push_str(&format!("\t{n:e}")),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Gradient descent on the unobserved views; the input view stays fixed.
pub fn optimize_multiview<D: LineDenoiser + Sync + ?Sized>(
    state: &MVOptState,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<MvOptOutcome> {
    let opts = &state.options;
    opts.validate()?;
    let n_range = opts.n_range(sched);
    let lines: Vec<LineSet> = (1..RIG_VIEWS)
        .map(|k| input_view_lines(&state.input_seq, &state.rig, k))
        .collect::<Result<_>>()?;
    let mut views = state.all_views();
    let mut trace: Vec<TraceRow> = Vec::with_capacity(opts.iterations + 1);
    let diverged = |iteration: usize, loss: f64, trace: &[TraceRow]| Error::OptimizationDiverged {
        iteration,
        loss,
        trace: trace.iter().map(|r| r.consistency_loss).collect(),
    };
    for it in 0..opts.iterations {
        let (loss, mv_grads) = multiview_consistency_grad(&views, &state.rig)?;
        if !loss.is_finite() || loss > 1e6 {
            return Err(diverged(it, loss, &trace));
        }
        let sds: Vec<Array3<f64>> = if opts.w_sds > 0.0 {
            (1..RIG_VIEWS)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(opts.seed, ((it as u64) << 8) | k as u64);
                    sds_gradient(&views[k], &lines[k - 1], denoiser, sched, &mut rng, n_range, opts.sds_weight)
                })
                .collect::<Result<_>>()?
        } else {
            vec![Array3::zeros(views[0].array().raw_dim()); RIG_VIEWS - 1]
        };
        let sds_norms = sds.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        trace.push(TraceRow {
            iteration: it,
            consistency_loss: loss,
            sds_norms,
        });
        let step = if opts.step_decay {
            opts.step_size * (1.0 - it as f64 / opts.iterations as f64)
        } else {
            opts.step_size
        };
        for k in 1..RIG_VIEWS {
            let a = views[k].array_mut();
            a.scaled_add(-step * opts.w_sds, &sds[k - 1]);
            a.scaled_add(-step * opts.w_mv, &mv_grads[k]);
        }
    }
    let final_loss = multiview_consistency_loss(&views, &state.rig)?;
    if !final_loss.is_finite() || final_loss > 1e6 {
        return Err(diverged(opts.iterations, final_loss, &trace));
    }
    trace.push(TraceRow {
        iteration: opts.iterations,
        consistency_loss: final_loss,
        sds_norms: Vec::new(),
    });
    views.remove(0);
    Ok(MvOptOutcome { phi: views, trace })
}
