//! DDPM noise schedule, forward noising, training losses, x0/noise
//! conversion and the ancestral sampler shared by both diffusion models.

use ndarray::{Array, Array3, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::motion::{LineSet, Pose2DSequence};

/// Linear-beta DDPM schedule. Index 0 is the clean signal (`alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linearly interpolated betas over `steps` diffusion steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("a schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut betas = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    for n in 1..=steps {
        let frac = if steps == 1 {
            0.0
        } else {
            (n - 1) as f64 / (steps - 1) as f64
        };
        betas[n] = beta_start + (beta_end - beta_start) * frac;
        alpha_bar[n] = alpha_bar[n - 1] * (1.0 - betas[n]);
        sigma[n] = betas[n].sqrt();
    }
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        betas,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    /// 1000 steps, betas 1e-4 to 0.02.
    pub fn standard() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("valid constants")
    }

    /// 100 steps with the betas rescaled so the final `alpha_bar` is again near zero.
    pub fn desk() -> Self {
        make_schedule(100, 1e-3, 0.2).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn sigma(&self, n: usize) -> f64 {
        self.sigma[n]
    }

    /// Copy with every sampling standard deviation multiplied by `scale`.
    pub fn with_sigma_scale(mut self, scale: f64) -> Self {
        for s in &mut self.sigma {
            *s *= scale;
        }
        self
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n > self.steps() {
            Err(invalid(format!("step {n} outside 0..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// Coefficients `(c_x0, c_xn)` of the posterior mean `q(x_{n-1} | x_n, x0)`.
    pub fn posterior_coefficients(&self, n: usize) -> (f64, f64) {
        let ab = self.alpha_bar[n];
        let ab_prev = self.alpha_bar[n - 1];
        let beta = self.betas[n];
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }
}

/// `sqrt(ab_n) x0 + sqrt(1 - ab_n) eps` on arrays of any shape.
pub fn q_sample_array<D: Dimension>(
    x0: &Array<f64, D>,
    n: usize,
    eps: &Array<f64, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_step(n)?;
    if x0.shape() != eps.shape() {
        return Err(invalid("noise shape differs from signal shape"));
    }
    let (a, b) = (sched.alpha_bar(n).sqrt(), (1.0 - sched.alpha_bar(n)).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

pub fn q_sample(
    x0: &Pose2DSequence,
    n: usize,
    eps: &Array3<f64>,
    sched: &NoiseSchedule,
) -> Result<Pose2DSequence> {
    Pose2DSequence::new(q_sample_array(x0.array(), n, eps, sched)?)
}

/// Noise implied by a clean-signal prediction at step `n > 0`.
pub fn x0_to_eps_array<D: Dimension>(
    x0_hat: &Array<f64, D>,
    x_n: &Array<f64, D>,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_step(n)?;
    if n == 0 {
        return Err(invalid("noise is undefined at step 0"));
    }
    if x0_hat.shape() != x_n.shape() {
        return Err(invalid("prediction shape differs from noisy input"));
    }
    let a = sched.alpha_bar(n).sqrt();
    let b = (1.0 - sched.alpha_bar(n)).sqrt();
    Ok(Zip::from(x_n).and(x0_hat).map_collect(|&x, &p| (x - a * p) / b))
}

pub fn x0_to_eps(
    x0_hat: &Pose2DSequence,
    x_n: &Pose2DSequence,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<Array3<f64>> {
    x0_to_eps_array(x0_hat.array(), x_n.array(), n, sched)
}

/// Sum over joints of the perpendicular distance to each joint's line.
pub fn line_matching_loss(pred: &Pose2DSequence, lines: &LineSet) -> Result<f64> {
    if !lines.matches(pred) {
        return Err(invalid("prediction and line set shapes differ"));
    }
    let l = lines.array();
    let p = pred.array();
    let mut sum = 0.0;
    for t in 0..pred.frame_count() {
        for j in 0..pred.joint_count() {
            sum += (l[[t, j, 0]] * p[[t, j, 0]] + l[[t, j, 1]] * p[[t, j, 1]] + l[[t, j, 2]]).abs();
        }
    }
    Ok(sum)
}

/// Subgradient of [`line_matching_loss`] with respect to the predicted joints (0 on the line).
pub fn line_matching_grad(pred: &Pose2DSequence, lines: &LineSet) -> Result<Array3<f64>> {
    if !lines.matches(pred) {
        return Err(invalid("prediction and line set shapes differ"));
    }
    let l = lines.array();
    let p = pred.array();
    let mut g = Array3::zeros(p.raw_dim());
    for t in 0..pred.frame_count() {
        for j in 0..pred.joint_count() {
            let r = l[[t, j, 0]] * p[[t, j, 0]] + l[[t, j, 1]] * p[[t, j, 1]] + l[[t, j, 2]];
            let s = sign(r);
            g[[t, j, 0]] = s * l[[t, j, 0]];
            g[[t, j, 1]] = s * l[[t, j, 1]];
        }
    }
    Ok(g)
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weight of the line-matching term and optimizer settings for denoiser training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda_line: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Half-width of the square from which virtual epipoles are drawn.
    #[serde(default = "default_epipole_half_width")]
    pub epipole_half_width: f64,
}

fn default_epipole_half_width() -> f64 {
    2.5
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_line: 0.1,
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            epipole_half_width: default_epipole_half_width(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_line >= 0.0) {
            return Err(invalid("lambda_line must be non-negative"));
        }
        if self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || !(self.grad_clip > 0.0)
            || !(self.epipole_half_width > 0.0)
        {
            return Err(invalid(
                "batch size, learning rate, clip norm and epipole bound must be positive",
            ));
        }
        Ok(())
    }
}

/// Loss components of one training example.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub line: f64,
}

/// Mean absolute error between `pred` and `target`.
pub fn reconstruction_loss<D: Dimension>(pred: &Array<f64, D>, target: &Array<f64, D>) -> f64 {
    let n = pred.len().max(1) as f64;
    Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &q| acc + (p - q).abs())
        / n
}

/// A network predicting the clean sequence from a noisy one under line conditions.
pub trait LineDenoiser {
    fn predict_x0(&self, x_n: &Pose2DSequence, n: usize, lines: &LineSet) -> Result<Pose2DSequence>;
}

impl<F> LineDenoiser for F
where
    F: Fn(&Pose2DSequence, usize, &LineSet) -> Result<Pose2DSequence>,
{
    fn predict_x0(&self, x_n: &Pose2DSequence, n: usize, lines: &LineSet) -> Result<Pose2DSequence> {
        self(x_n, n, lines)
    }
}

/// Reconstruction plus weighted line matching for one example.
pub fn training_loss<D: LineDenoiser + ?Sized>(
    x0: &Pose2DSequence,
    n: usize,
    lines: &LineSet,
    denoiser: &D,
    eps: &Array3<f64>,
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
) -> Result<LossParts> {
    let x_n = q_sample(x0, n, eps, sched)?;
    let pred = denoiser.predict_x0(&x_n, n, lines)?;
    if !pred.same_shape(x0) {
        return Err(invalid("denoiser output shape differs from its input"));
    }
    let recon = reconstruction_loss(pred.array(), x0.array());
    let line = line_matching_loss(&pred, lines)?;
    Ok(LossParts {
        total: recon + cfg.lambda_line * line,
        recon,
        line,
    })
}

/// Standard normal array of the given shape.
pub fn standard_normal<D: Dimension, R: Rng + ?Sized>(shape: D, rng: &mut R) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Ancestral DDPM sampling driven by a clean-signal predictor.
///
/// Starts from standard normal noise at step `N`; every step forms the
/// posterior mean from the prediction and adds `sigma_n` noise except at the last step.
pub fn ancestral_sample<D, R, F>(
    shape: D,
    sched: &NoiseSchedule,
    rng: &mut R,
    mut predict_x0: F,
) -> Result<Array<f64, D>>
where
    D: Dimension,
    R: Rng + ?Sized,
    F: FnMut(&Array<f64, D>, usize) -> Result<Array<f64, D>>,
{
    let mut x = standard_normal(shape.clone(), rng);
    for n in (1..=sched.steps()).rev() {
        let x0_hat = predict_x0(&x, n)?;
        if x0_hat.shape() != x.shape() {
            return Err(invalid("denoiser output shape differs from its input"));
        }
        let (c0, cn) = sched.posterior_coefficients(n);
        let mut next = Zip::from(&x0_hat).and(&x).map_collect(|&p, &xn| c0 * p + cn * xn);
        if n > 1 {
            let s = sched.sigma(n);
            next.zip_mut_with(&standard_normal(shape.clone(), rng), |v, z| *v += s * z);
        }
        x = next;
    }
    Ok(x)
}

/// Samples a sequence whose shape follows `lines`.
pub fn sample<D: LineDenoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    lines: &LineSet,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Pose2DSequence> {
    let shape = ndarray::Dim([lines.frame_count(), lines.joint_count(), 2]);
    let out = ancestral_sample(shape, sched, rng, |x, n| {
        let xs = Pose2DSequence::new(x.clone())?;
        Ok(denoiser.predict_x0(&xs, n, lines)?.into_array())
    })?;
    Pose2DSequence::new(out)
}
