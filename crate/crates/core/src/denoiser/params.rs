use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Size of a denoising transformer. `view_count == 1` is the line-conditioned
/// single-view model; larger values give the multi-view model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_t: usize,
    pub joint_count: usize,
    pub view_count: usize,
    /// Number of diffusion steps `N`; the step table holds `N + 1` rows.
    pub diffusion_steps: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Diagnostic switch that removes every self-attention sublayer.
    #[serde(default = "default_true")]
    pub self_attention: bool,
}

fn default_ff_mult() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl DenoiserConfig {
    pub fn line_conditioned(joint_count: usize, max_t: usize, diffusion_steps: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_t,
            joint_count,
            view_count: 1,
            diffusion_steps,
            ff_mult: 4,
            self_attention: true,
        }
    }

    pub fn multi_view(joint_count: usize, max_t: usize, diffusion_steps: usize) -> Self {
        Self {
            view_count: 4,
            ..Self::line_conditioned(joint_count, max_t, diffusion_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_t,
            self.joint_count,
            self.view_count,
            self.diffusion_steps,
            self.ff_mult,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(invalid("denoiser sizes must all be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn is_multi_view(&self) -> bool {
        self.view_count > 1
    }

    /// Width of one input token before projection.
    pub fn input_dim(&self) -> usize {
        if self.is_multi_view() {
            self.joint_count * 2
        } else {
            self.joint_count * 5
        }
    }

    pub fn output_dim(&self) -> usize {
        self.joint_count * 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Affine map `x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }
}

/// Pre-normalized residual block: self-attention, optional cross-view attention, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub self_attn: Option<(LayerNorm, Attention)>,
    pub cross_attn: Option<(LayerNorm, Attention)>,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Every trainable array of a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub input: Linear,
    pub step_embedding: Array2<f64>,
    pub view_embedding: Option<Array2<f64>>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

impl DenoiserParams {
    /// Structural layout with zero weights and identity normalizations.
    pub fn zeros(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                self_attn: config
                    .self_attention
                    .then(|| (LayerNorm::identity(d), Attention::zeros(d))),
                cross_attn: config
                    .is_multi_view()
                    .then(|| (LayerNorm::identity(d), Attention::zeros(d))),
                ff_norm: LayerNorm::identity(d),
                ff_in: Linear::zeros(d, d * config.ff_mult),
                ff_out: Linear::zeros(d * config.ff_mult, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input: Linear::zeros(config.input_dim(), d),
            step_embedding: Array2::zeros((config.diffusion_steps + 1, d)),
            view_embedding: config
                .is_multi_view()
                .then(|| Array2::zeros((config.view_count, d))),
            blocks,
            final_norm: LayerNorm::identity(d),
            output: Linear::zeros(d, config.output_dim()),
        })
    }

    /// Copy with every array zeroed, including normalization gains.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, mut a| a.fill(0.0));
        out
    }

    /// Names and views of every array in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, p: &str, l: &'a Linear) {
            out.push((format!("{p}.weight"), l.weight.view().into_dyn()));
            out.push((format!("{p}.bias"), l.bias.view().into_dyn()));
        }
        fn norm<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, p: &str, n: &'a LayerNorm) {
            out.push((format!("{p}.gamma"), n.gamma.view().into_dyn()));
            out.push((format!("{p}.beta"), n.beta.view().into_dyn()));
        }
        fn attn<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, p: &str, a: &'a Attention) {
            lin(out, &format!("{p}.query"), &a.query);
            lin(out, &format!("{p}.key"), &a.key);
            lin(out, &format!("{p}.value"), &a.value);
            lin(out, &format!("{p}.output"), &a.output);
        }
        lin(&mut out, "input", &self.input);
        out.push(("step_embedding".into(), self.step_embedding.view().into_dyn()));
        if let Some(v) = &self.view_embedding {
            out.push(("view_embedding".into(), v.view().into_dyn()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some((n, a)) = &b.self_attn {
                norm(&mut out, &format!("blocks.{i}.self_norm"), n);
                attn(&mut out, &format!("blocks.{i}.self_attn"), a);
            }
            if let Some((n, a)) = &b.cross_attn {
                norm(&mut out, &format!("blocks.{i}.cross_norm"), n);
                attn(&mut out, &format!("blocks.{i}.cross_attn"), a);
            }
            norm(&mut out, &format!("blocks.{i}.ff_norm"), &b.ff_norm);
            lin(&mut out, &format!("blocks.{i}.ff_in"), &b.ff_in);
            lin(&mut out, &format!("blocks.{i}.ff_out"), &b.ff_out);
        }
        norm(&mut out, "final_norm", &self.final_norm);
        lin(&mut out, "output", &self.output);
        out
    }

    /// Mutable views in the order of [`DenoiserParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        type Out<'a> = Vec<(String, ArrayViewMutD<'a, f64>)>;
        fn lin<'a>(out: &mut Out<'a>, p: &str, l: &'a mut Linear) {
            out.push((format!("{p}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("{p}.bias"), l.bias.view_mut().into_dyn()));
        }
        fn norm<'a>(out: &mut Out<'a>, p: &str, n: &'a mut LayerNorm) {
            out.push((format!("{p}.gamma"), n.gamma.view_mut().into_dyn()));
            out.push((format!("{p}.beta"), n.beta.view_mut().into_dyn()));
        }
        let mut out = Vec::new();
        lin(&mut out, "input", &mut self.input);
        out.push(("step_embedding".into(), self.step_embedding.view_mut().into_dyn()));
        if let Some(v) = &mut self.view_embedding {
            out.push(("view_embedding".into(), v.view_mut().into_dyn()));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, slot) in [("self", &mut b.self_attn), ("cross", &mut b.cross_attn)] {
                if let Some((n, a)) = slot {
                    norm(&mut out, &format!("blocks.{i}.{tag}_norm"), n);
                    let p = format!("blocks.{i}.{tag}_attn");
                    lin(&mut out, &format!("{p}.query"), &mut a.query);
                    lin(&mut out, &format!("{p}.key"), &mut a.key);
                    lin(&mut out, &format!("{p}.value"), &mut a.value);
                    lin(&mut out, &format!("{p}.output"), &mut a.output);
                }
            }
            norm(&mut out, &format!("blocks.{i}.ff_norm"), &mut b.ff_norm);
            lin(&mut out, &format!("blocks.{i}.ff_in"), &mut b.ff_in);
            lin(&mut out, &format!("blocks.{i}.ff_out"), &mut b.ff_out);
        }
        norm(&mut out, "final_norm", &mut self.final_norm);
        lin(&mut out, "output", &mut self.output);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (name, a) in self.tensors_mut() {
            f(&name, a);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += scale * other` for two parameter sets of the same layout.
    pub fn add_scaled(&mut self, other: &DenoiserParams, scale: f64) {
        let src = other.tensors();
        let mut k = 0;
        self.for_each_mut(|_, mut a| {
            a.zip_mut_with(&src[k].1, |x, y| *x += scale * y);
            k += 1;
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|_, mut a| a.mapv_inplace(|v| v * s));
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, a)| a.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// Normal weights with standard deviation `1/sqrt(d_model)`, zero biases, identity norms.
pub fn init_params<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(config)?;
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive scale");
    p.for_each_mut(|name, mut a| {
        if a.ndim() == 2 {
            a.mapv_inplace(|_| normal.sample(rng));
        } else if name.ends_with(".gamma") {
            a.fill(1.0);
        }
    });
    Ok(p)
}
