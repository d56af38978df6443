//! Token transformer shared by both denoisers, with a hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Attention, DenoiserParams, LayerNorm, Linear};
use crate::error::{invalid, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Flat token matrix plus the indices that route each token to its embeddings
/// and attention groups.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub inputs: Array2<f64>,
    pub steps: Vec<usize>,
    pub positions: Vec<usize>,
    pub views: Option<Vec<usize>>,
    /// Token sets attending to each other in self-attention.
    pub self_groups: Vec<Vec<usize>>,
    /// Token sets attending to each other in cross-view attention.
    pub cross_groups: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct AttnCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    probs: Vec<Array2<f64>>,
}

struct SubCache {
    norm: NormCache,
    attn: AttnCache,
}

struct BlockCache {
    self_attn: Option<SubCache>,
    cross_attn: Option<SubCache>,
    ff_norm: NormCache,
    ff_x: Array2<f64>,
    ff_u: Array2<f64>,
    ff_g: Array2<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_z: Array2<f64>,
}

/// Sinusoidal temporal encoding of one frame index.
pub fn positional_encoding(t: usize, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |i| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn linear(x: &Array2<f64>, l: &Linear) -> Array2<f64> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

fn linear_back(x: &Array2<f64>, l: &Linear, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
    g.weight += &x.t().dot(dy);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

fn layer_norm(x: &Array2<f64>, p: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let is = *s;
        row.mapv_inplace(|v| (v - mean) * is);
    }
    let mut y = &xhat * &p.gamma;
    y += &p.beta;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_back(c: &NormCache, p: &LayerNorm, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
    g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &p.gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let gr = dxhat.row(r);
        let xr = c.xhat.row(r);
        let m1 = gr.sum() / d;
        let m2 = gr.dot(&xr) / d;
        let s = c.inv_std[r];
        Zip::from(dx.row_mut(r))
            .and(&gr)
            .and(&xr)
            .for_each(|o, &gv, &xv| *o = s * (gv - m1 - xv * m2));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

fn head_cols(h: usize, dh: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * dh..(h + 1) * dh]
}

fn attention(x: Array2<f64>, p: &Attention, groups: &[Vec<usize>], heads: usize) -> (Array2<f64>, AttnCache) {
    let q = linear(&x, &p.query);
    let k = linear(&x, &p.key);
    let v = linear(&x, &p.value);
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for idx in groups {
        let (qg, kg, vg) = (q.select(Axis(0), idx), k.select(Axis(0), idx), v.select(Axis(0), idx));
        for h in 0..heads {
            let cols = head_cols(h, dh);
            let mut sc = qg.slice(cols).dot(&kg.slice(cols).t());
            sc *= scale;
            softmax_rows(&mut sc);
            let out = sc.dot(&vg.slice(cols));
            for (r, &tok) in idx.iter().enumerate() {
                ctx.slice_mut(s![tok, h * dh..(h + 1) * dh]).assign(&out.row(r));
            }
            probs.push(sc);
        }
    }
    let y = linear(&ctx, &p.output);
    (
        y,
        AttnCache {
            input: x,
            q,
            k,
            v,
            ctx,
            probs,
        },
    )
}

fn attention_back(
    c: &AttnCache,
    p: &Attention,
    groups: &[Vec<usize>],
    heads: usize,
    dy: &Array2<f64>,
    g: &mut Attention,
) -> Array2<f64> {
    let dctx = linear_back(&c.ctx, &p.output, dy, &mut g.output);
    let d = dctx.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    let mut pi = 0;
    for idx in groups {
        let dcg = dctx.select(Axis(0), idx);
        let (qg, kg, vg) = (c.q.select(Axis(0), idx), c.k.select(Axis(0), idx), c.v.select(Axis(0), idx));
        for h in 0..heads {
            let cols = head_cols(h, dh);
            let pm = &c.probs[pi];
            pi += 1;
            let dch = dcg.slice(cols);
            let dp = dch.dot(&vg.slice(cols).t());
            let dvh = pm.t().dot(&dch);
            let mut ds = &dp * pm;
            let rows = ds.sum_axis(Axis(1));
            for (mut row, (prow, &rs)) in ds.rows_mut().into_iter().zip(pm.rows().into_iter().zip(rows.iter())) {
                Zip::from(&mut row).and(&prow).for_each(|o, &pv| *o -= pv * rs);
            }
            ds *= scale;
            let dqh = ds.dot(&kg.slice(cols));
            let dkh = ds.t().dot(&qg.slice(cols));
            scatter_add(&mut dq, idx, h, dh, dqh.view());
            scatter_add(&mut dk, idx, h, dh, dkh.view());
            scatter_add(&mut dv, idx, h, dh, dvh.view());
        }
    }
    let mut dx = linear_back(&c.input, &p.query, &dq, &mut g.query);
    dx += &linear_back(&c.input, &p.key, &dk, &mut g.key);
    dx += &linear_back(&c.input, &p.value, &dv, &mut g.value);
    dx
}

fn scatter_add(dst: &mut Array2<f64>, idx: &[usize], h: usize, dh: usize, src: ArrayView2<f64>) {
    for (r, &tok) in idx.iter().enumerate() {
        let mut row = dst.slice_mut(s![tok, h * dh..(h + 1) * dh]);
        row += &src.row(r);
    }
}

fn check_batch(p: &DenoiserParams, b: &TokenBatch) -> Result<()> {
    let cfg = &p.config;
    let n = b.len();
    if b.inputs.ncols() != cfg.input_dim() {
        return Err(invalid(format!(
            "token width {} does not match the configured {}",
            b.inputs.ncols(),
            cfg.input_dim()
        )));
    }
    if b.steps.len() != n || b.positions.len() != n {
        return Err(invalid("token routing tables have the wrong length"));
    }
    if let Some(&s) = b.steps.iter().find(|&&s| s > cfg.diffusion_steps) {
        return Err(invalid(format!("step {s} exceeds the {} configured steps", cfg.diffusion_steps)));
    }
    if let Some(&t) = b.positions.iter().find(|&&t| t >= cfg.max_t) {
        return Err(invalid(format!("frame {t} exceeds max_t {}", cfg.max_t)));
    }
    match (&b.views, &p.view_embedding) {
        (Some(v), Some(_)) => {
            if v.len() != n || v.iter().any(|&x| x >= cfg.view_count) {
                return Err(invalid("view indices out of range"));
            }
        }
        (None, None) => {}
        _ => return Err(invalid("view tags do not match the model type")),
    }
    for g in b.self_groups.iter().chain(&b.cross_groups) {
        if g.iter().any(|&i| i >= n) {
            return Err(invalid("attention group refers to a missing token"));
        }
    }
    Ok(())
}

/// Runs the network on a token batch, returning per-token outputs and the cache.
pub fn forward(p: &DenoiserParams, b: &TokenBatch) -> Result<(Array2<f64>, ForwardCache)> {
    check_batch(p, b)?;
    let cfg = &p.config;
    let d = cfg.d_model;
    let mut h = linear(&b.inputs, &p.input);
    let mut pe_cache: Vec<Option<Array1<f64>>> = vec![None; cfg.max_t];
    for (i, mut row) in h.rows_mut().into_iter().enumerate() {
        let t = b.positions[i];
        let pe = pe_cache[t].get_or_insert_with(|| positional_encoding(t, d));
        row += &*pe;
        row += &p.step_embedding.row(b.steps[i]);
        if let (Some(v), Some(table)) = (&b.views, &p.view_embedding) {
            row += &table.row(v[i]);
        }
    }
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for blk in &p.blocks {
        let sub = |h: &mut Array2<f64>, part: &Option<(LayerNorm, Attention)>, groups: &[Vec<usize>]| {
            part.as_ref().map(|(n, a)| {
                let (x, norm) = layer_norm(h, n);
                let (y, attn) = attention(x, a, groups, cfg.n_heads);
                *h += &y;
                SubCache { norm, attn }
            })
        };
        let self_attn = sub(&mut h, &blk.self_attn, &b.self_groups);
        let cross_attn = sub(&mut h, &blk.cross_attn, &b.cross_groups);
        let (ff_x, ff_norm) = layer_norm(&h, &blk.ff_norm);
        let ff_u = linear(&ff_x, &blk.ff_in);
        let ff_g = ff_u.mapv(gelu);
        h += &linear(&ff_g, &blk.ff_out);
        blocks.push(BlockCache {
            self_attn,
            cross_attn,
            ff_norm,
            ff_x,
            ff_u,
            ff_g,
        });
    }
    let (final_z, final_norm) = layer_norm(&h, &p.final_norm);
    let out = linear(&final_z, &p.output);
    Ok((
        out,
        ForwardCache {
            blocks,
            final_norm,
            final_z,
        },
    ))
}

/// Parameter gradients of `sum(d_out * output)` for the forward pass recorded in `cache`.
pub fn backward(p: &DenoiserParams, b: &TokenBatch, cache: &ForwardCache, d_out: &Array2<f64>) -> DenoiserParams {
    let cfg = &p.config;
    let mut g = p.zeros_like();
    let dz = linear_back(&cache.final_z, &p.output, d_out, &mut g.output);
    let mut dh = layer_norm_back(&cache.final_norm, &p.final_norm, &dz, &mut g.final_norm);
    for (i, (blk, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[i];
        let dg = linear_back(&c.ff_g, &blk.ff_out, &dh, &mut gb.ff_out);
        let du = Zip::from(&dg).and(&c.ff_u).map_collect(|&a, &u| a * gelu_grad(u));
        let dx = linear_back(&c.ff_x, &blk.ff_in, &du, &mut gb.ff_in);
        dh += &layer_norm_back(&c.ff_norm, &blk.ff_norm, &dx, &mut gb.ff_norm);
        let parts = [
            (&blk.cross_attn, &c.cross_attn, &mut gb.cross_attn, &b.cross_groups),
            (&blk.self_attn, &c.self_attn, &mut gb.self_attn, &b.self_groups),
        ];
        for (part, sc, gpart, groups) in parts {
            if let (Some((n, a)), Some(sc), Some((gn, ga))) = (part, sc, gpart) {
                let dx = attention_back(&sc.attn, a, groups, cfg.n_heads, &dh, ga);
                dh += &layer_norm_back(&sc.norm, n, &dx, gn);
            }
        }
    }
    g.input.weight += &b.inputs.t().dot(&dh);
    g.input.bias += &dh.sum_axis(Axis(0));
    for (i, row) in dh.rows().into_iter().enumerate() {
        let mut s = g.step_embedding.row_mut(b.steps[i]);
        s += &row;
        if let (Some(v), Some(table)) = (&b.views, &mut g.view_embedding) {
            let mut r = table.row_mut(v[i]);
            r += &row;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for u in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 7 + j * j) as f64);
        let (y, _) = layer_norm(&x, &LayerNorm { gamma: Array1::ones(8), beta: Array1::zeros(8) });
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn encoding_is_bounded_and_distinct() {
        let a = positional_encoding(0, 16);
        let b = positional_encoding(5, 16);
        assert_eq!(a[1], 1.0);
        assert!(a.iter().chain(b.iter()).all(|v| v.abs() <= 1.0));
        assert!((&a - &b).mapv(f64::abs).sum() > 0.1);
    }
}
