//! Causal transformer forward pass with a hand-written backward pass.
//!
//! Pre-norm blocks: `x += attn(ln1(x))`, `x += ff(ln2(x))`, then a final
//! layer norm whose output is the hidden-state matrix `H`. Low-rank adapters
//! add `scale · (x·a)·b` to the four attention projections.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{Block, BlockAdapters, LayerNorm, Linear, LoraPair, ModelState, ParamGroup, ParamView};
use super::sequence::image_patches;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Array2<f64>, cache: &LnCache, ln: &LayerNorm, grad: Option<&mut LayerNorm>) -> Array2<f64> {
    if let Some(g) = grad {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &ln.gamma;
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty rows");
    let m2 = (&dxhat * &cache.xhat).mean_axis(Axis(1)).expect("non-empty rows");
    let mut dx = dxhat - &m1.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &m2.insert_axis(Axis(1)));
    dx * cache.rstd.view().insert_axis(Axis(1))
}

/// Returns `(y, x·a)`; the second is kept for the adapter backward.
fn lin_forward(
    x: &Array2<f64>,
    lin: &Linear,
    lora: Option<&LoraPair>,
    scale: f64,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(&lin.w) + &lin.b;
    let xa = lora.map(|p| {
        let xa = x.dot(&p.a);
        general_mat_mul(scale, &xa, &p.b, 1.0, &mut y);
        xa
    });
    (y, xa)
}

struct LinGrads<'a> {
    lin: Option<&'a mut Linear>,
    lora: Option<&'a mut LoraPair>,
}

#[allow(clippy::too_many_arguments)]
fn lin_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    xa: Option<&Array2<f64>>,
    lin: &Linear,
    lora: Option<&LoraPair>,
    scale: f64,
    grads: LinGrads<'_>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    if let Some(g) = grads.lin {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
        g.b += &dy.sum_axis(Axis(0));
    }
    let d_xa = match (lora, xa) {
        (Some(p), Some(xa)) => {
            let d_xa = dy.dot(&p.b.t()) * scale;
            if let Some(g) = grads.lora {
                general_mat_mul(scale, &xa.t(), dy, 1.0, &mut g.b);
                general_mat_mul(1.0, &x.t(), &d_xa, 1.0, &mut g.a);
            }
            Some((p, d_xa))
        }
        _ => None,
    };
    if !need_dx {
        return None;
    }
    let mut dx = dy.dot(&lin.w.t());
    if let Some((p, d_xa)) = d_xa {
        general_mat_mul(1.0, &d_xa, &p.a.t(), 1.0, &mut dx);
    }
    Some(dx)
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = row.slice(s![..=i]);
        let max = visible.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j > i {
                *v = 0.0;
            } else {
                *v = (*v - max).exp();
                total += *v;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
}

fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        causal_softmax(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

fn attention_backward(
    d_out: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_out.slice(cols);
        let dp = d_oh.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let ds = (dp - &row_dot.insert_axis(Axis(1))) * p;
        dq.slice_mut(cols).assign(&(ds.dot(&k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&q.slice(cols)) * scale));
    }
    (dq, dk, dv)
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    xa_q: Option<Array2<f64>>,
    xa_k: Option<Array2<f64>>,
    xa_v: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    xa_o: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

fn block_forward(
    x: Array2<f64>,
    blk: &Block,
    ad: Option<&BlockAdapters>,
    scale: f64,
    n_heads: usize,
) -> (Array2<f64>, BlockCache) {
    let (a, ln1) = ln_forward(&x, &blk.ln1);
    let (q, xa_q) = lin_forward(&a, &blk.q, ad.map(|a| &a.q), scale);
    let (k, xa_k) = lin_forward(&a, &blk.k, ad.map(|a| &a.k), scale);
    let (v, xa_v) = lin_forward(&a, &blk.v, ad.map(|a| &a.v), scale);
    let (att, probs) = attention_forward(&q, &k, &v, n_heads);
    let (o, xa_o) = lin_forward(&att, &blk.o, ad.map(|a| &a.o), scale);
    let x1 = x + o;
    let (b, ln2) = ln_forward(&x1, &blk.ln2);
    let (u, _) = lin_forward(&b, &blk.ff1, None, 0.0);
    let g = u.mapv(gelu);
    let (m, _) = lin_forward(&g, &blk.ff2, None, 0.0);
    let x2 = x1 + m;
    (
        x2,
        BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            xa_q,
            xa_k,
            xa_v,
            probs,
            att,
            xa_o,
            ln2,
            b,
            u,
            g,
        },
    )
}

fn block_backward(
    dx2: Array2<f64>,
    c: &BlockCache,
    blk: &Block,
    ad: Option<&BlockAdapters>,
    scale: f64,
    mut g_blk: Option<&mut Block>,
    mut g_ad: Option<&mut BlockAdapters>,
) -> Array2<f64> {
    let dg = lin_backward(
        &dx2,
        &c.g,
        None,
        &blk.ff2,
        None,
        0.0,
        LinGrads {
            lin: g_blk.as_deref_mut().map(|b| &mut b.ff2),
            lora: None,
        },
        true,
    )
    .expect("dx requested");
    let du = dg * &c.u.mapv(gelu_grad);
    let db = lin_backward(
        &du,
        &c.b,
        None,
        &blk.ff1,
        None,
        0.0,
        LinGrads {
            lin: g_blk.as_deref_mut().map(|b| &mut b.ff1),
            lora: None,
        },
        true,
    )
    .expect("dx requested");
    let dx1 = dx2 + ln_backward(&db, &c.ln2, &blk.ln2, g_blk.as_deref_mut().map(|b| &mut b.ln2));

    let d_att = lin_backward(
        &dx1,
        &c.att,
        c.xa_o.as_ref(),
        &blk.o,
        ad.map(|a| &a.o),
        scale,
        LinGrads {
            lin: g_blk.as_deref_mut().map(|b| &mut b.o),
            lora: g_ad.as_deref_mut().map(|a| &mut a.o),
        },
        true,
    )
    .expect("dx requested");
    let (dq, dk, dv) = attention_backward(&d_att, &c.q, &c.k, &c.v, &c.probs);

    let mut da = Array2::zeros(c.a.raw_dim());
    for (dy, xa, which) in [(&dq, &c.xa_q, 0), (&dk, &c.xa_k, 1), (&dv, &c.xa_v, 2)] {
        let (lin, lora) = match which {
            0 => (&blk.q, ad.map(|a| &a.q)),
            1 => (&blk.k, ad.map(|a| &a.k)),
            _ => (&blk.v, ad.map(|a| &a.v)),
        };
        let g_lin = g_blk.as_deref_mut().map(|b| match which {
            0 => &mut b.q,
            1 => &mut b.k,
            _ => &mut b.v,
        });
        let g_lora = g_ad.as_deref_mut().map(|a| match which {
            0 => &mut a.q,
            1 => &mut a.k,
            _ => &mut a.v,
        });
        da += &lin_backward(
            dy,
            &c.a,
            xa.as_ref(),
            lin,
            lora,
            scale,
            LinGrads {
                lin: g_lin,
                lora: g_lora,
            },
            true,
        )
        .expect("dx requested");
    }
    dx1 + ln_backward(&da, &c.ln1, &blk.ln1, g_blk.map(|b| &mut b.ln1))
}

/// Visual-token embeddings: affine map of each flattened patch plus the
/// position vector of its patch id.
pub fn embed_image(image: &Array2<f64>, state: &ModelState) -> Result<Array2<f64>> {
    let patches = image_patches(image, &state.config)?;
    Ok(embed_patches(&patches, state))
}

fn embed_patches(patches: &Array2<f64>, state: &ModelState) -> Array2<f64> {
    let p = patches.nrows();
    let bb = &state.backbone;
    patches.dot(&bb.patch.w) + &bb.patch.b + bb.pos_emb.slice(s![..p, ..])
}

fn embed_sequence(tokens: &[u32], visual: ArrayView2<f64>, state: &ModelState) -> Result<Array2<f64>> {
    let cfg = &state.config;
    let (t, p) = (tokens.len(), visual.nrows());
    if t > cfg.max_seq_len {
        return Err(Error::Truncation {
            needed: t,
            max_t: cfg.max_seq_len,
        });
    }
    if p > cfg.max_visual_tokens || p > t || visual.ncols() != cfg.d_model {
        return Err(Error::Config(format!(
            "visual embeddings {}x{} incompatible with sequence of {t} tokens",
            p,
            visual.ncols()
        )));
    }
    let bb = &state.backbone;
    let mut x = Array2::zeros((t, cfg.d_model));
    x.slice_mut(s![..p, ..]).assign(&visual);
    for (pos, &tok) in tokens.iter().enumerate().take(t).skip(p) {
        let id = tok as usize;
        if id >= cfg.vocab_size {
            return Err(Error::Validation(format!("token id {id} outside vocabulary")));
        }
        let mut row = x.row_mut(pos);
        row.assign(&bb.tok_emb.row(id));
        row += &bb.pos_emb.row(pos);
    }
    Ok(x)
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    tokens: Vec<u32>,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    /// Final-layer hidden states `H` (`T × d`).
    pub hidden: Array2<f64>,
    /// Next-token logits (`T × vocab`), present when requested.
    pub lm_logits: Option<Array2<f64>>,
}

fn run(tokens: &[u32], patches: Array2<f64>, visual: Array2<f64>, state: &ModelState, with_lm: bool) -> Result<Trace> {
    let cfg = &state.config;
    let mut x = embed_sequence(tokens, visual.view(), state)?;
    let scale = cfg.adapter_scale();
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (i, blk) in state.backbone.blocks.iter().enumerate() {
        let (next, cache) = block_forward(x, blk, state.adapters.get(i), scale, cfg.n_heads);
        x = next;
        caches.push(cache);
    }
    let (hidden, ln_f) = ln_forward(&x, &state.backbone.ln_f);
    let lm_logits = with_lm.then(|| hidden.dot(&state.backbone.lm_head.w) + &state.backbone.lm_head.b);
    Ok(Trace {
        tokens: tokens.to_vec(),
        patches,
        blocks: caches,
        ln_f,
        hidden,
        lm_logits,
    })
}

/// Hidden states and next-token logits for precomputed visual embeddings.
/// Row `t` of both depends only on tokens `0..=t`.
pub fn forward(tokens: &[u32], visual: &Array2<f64>, state: &ModelState) -> Result<(Array2<f64>, Array2<f64>)> {
    let patches = Array2::zeros((0, 0));
    let trace = run(tokens, patches, visual.clone(), state, true)?;
    let logits = trace.lm_logits.expect("requested");
    Ok((trace.hidden, logits))
}

/// Forward pass from raw pixels that records what [`Trace::backward`] needs.
pub fn forward_traced(tokens: &[u32], image: &Array2<f64>, state: &ModelState, with_lm: bool) -> Result<Trace> {
    let patches = image_patches(image, &state.config)?;
    let visual = embed_patches(&patches, state);
    run(tokens, patches, visual, state, with_lm)
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Accumulates into `grads` the gradients of a scalar loss whose
    /// derivatives with respect to `H` and the LM logits are given.
    /// Only tensors in `view` are touched.
    pub fn backward(
        &self,
        state: &ModelState,
        d_hidden: Array2<f64>,
        d_logits: Option<&Array2<f64>>,
        view: &ParamView,
        grads: &mut ModelState,
    ) {
        let cfg = &state.config;
        let bb = &state.backbone;
        let mut dh = d_hidden;
        if let Some(dl) = d_logits {
            if view.contains(ParamGroup::LmHead) {
                general_mat_mul(1.0, &self.hidden.t(), dl, 1.0, &mut grads.backbone.lm_head.w);
                grads.backbone.lm_head.b += &dl.sum_axis(Axis(0));
            }
            if view.needs_block_grads() {
                general_mat_mul(1.0, dl, &bb.lm_head.w.t(), 1.0, &mut dh);
            }
        }
        if !view.needs_block_grads() {
            return;
        }
        let train_base = view.contains(ParamGroup::Backbone);
        let train_adapters = view.contains(ParamGroup::Adapter);
        let scale = cfg.adapter_scale();

        let mut dx = ln_backward(
            &dh,
            &self.ln_f,
            &bb.ln_f,
            train_base.then_some(&mut grads.backbone.ln_f),
        );
        for (i, (blk, cache)) in bb.blocks.iter().zip(&self.blocks).enumerate().rev() {
            let g_blk = train_base.then(|| &mut grads.backbone.blocks[i]);
            let g_ad = if train_adapters {
                grads.adapters.get_mut(i)
            } else {
                None
            };
            dx = block_backward(dx, cache, blk, state.adapters.get(i), scale, g_blk, g_ad);
        }
        if !train_base {
            return;
        }
        let p = self.patches.nrows();
        let g = &mut grads.backbone;
        let d_visual = dx.slice(s![..p, ..]);
        general_mat_mul(1.0, &self.patches.t(), &d_visual, 1.0, &mut g.patch.w);
        g.patch.b += &d_visual.sum_axis(Axis(0));
        let t = self.tokens.len();
        let mut pos = g.pos_emb.slice_mut(s![..t, ..]);
        pos += &dx;
        for (row, &id) in self.tokens.iter().enumerate().skip(p) {
            let mut e = g.tok_emb.row_mut(id as usize);
            e += &dx.row(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_sequence, ModelConfig, Sample};
    use ndarray::Array;

    fn toy_state(seed: u64) -> ModelState {
        ModelState::init(&ModelConfig::toy(), seed).unwrap()
    }

    fn toy_sample(cfg: &ModelConfig) -> Sample {
        let n = cfg.image_side();
        let img = Array::from_shape_fn((n, n), |(r, c)| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        let mut y = [0u8; 14];
        y[1] = 1;
        Sample::new("t", img, y, None)
    }

    #[test]
    fn output_shapes() {
        let state = toy_state(1);
        let s = toy_sample(&state.config);
        let (tokens, layout) = build_sequence(&s, &state.config).unwrap();
        let visual = embed_image(&s.image, &state).unwrap();
        assert_eq!(visual.nrows(), state.config.num_patches());
        let (h, logits) = forward(&tokens, &visual, &state).unwrap();
        assert_eq!(h.dim(), (layout.len(), state.config.d_model));
        assert_eq!(logits.dim(), (layout.len(), state.config.vocab_size));
    }

    #[test]
    fn patch_locality_before_attention() {
        let state = toy_state(2);
        let n = state.config.image_side();
        let a = Array2::from_elem((n, n), 0.2);
        let mut b = a.clone();
        b[[0, 0]] = 0.9; // inside patch 0
        let ea = embed_image(&a, &state).unwrap();
        let eb = embed_image(&b, &state).unwrap();
        assert_ne!(ea.row(0), eb.row(0));
        for r in 1..ea.nrows() {
            assert_eq!(ea.row(r), eb.row(r));
        }
    }

    #[test]
    fn zero_image_and_zero_map_give_positions() {
        let mut state = toy_state(3);
        state.backbone.patch.w.fill(0.0);
        state.backbone.patch.b.fill(0.0);
        let n = state.config.image_side();
        let e = embed_image(&Array2::zeros((n, n)), &state).unwrap();
        let p = state.config.num_patches();
        assert_eq!(e, state.backbone.pos_emb.slice(s![..p, ..]));
    }

    #[test]
    fn causal_rows_ignore_later_tokens() {
        let state = toy_state(4);
        let s = toy_sample(&state.config);
        let (mut tokens, _) = build_sequence(&s, &state.config).unwrap();
        let visual = embed_image(&s.image, &state).unwrap();
        let (h1, l1) = forward(&tokens, &visual, &state).unwrap();
        let last = tokens.len() - 1;
        tokens[last] = if tokens[last] == 9 { 10 } else { 9 };
        let (h2, l2) = forward(&tokens, &visual, &state).unwrap();
        assert_eq!(h1.slice(s![..last, ..]), h2.slice(s![..last, ..]));
        assert_eq!(l1.slice(s![..last, ..]), l2.slice(s![..last, ..]));
        assert_ne!(h1.row(last), h2.row(last));
    }

    #[test]
    fn zero_adapters_match_base_model() {
        let state = toy_state(5);
        let mut base_cfg = state.config.clone();
        base_cfg.adapter_rank = 0;
        let base = ModelState {
            config: base_cfg,
            adapters: Vec::new(),
            ..state.clone()
        };
        let s = toy_sample(&state.config);
        let (tokens, _) = build_sequence(&s, &state.config).unwrap();
        let visual = embed_image(&s.image, &state).unwrap();
        let (h1, l1) = forward(&tokens, &visual, &state).unwrap();
        let (h2, l2) = forward(&tokens, &visual, &base).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = toy_state(9);
        let b = toy_state(9);
        assert_eq!(a, b);
        assert_ne!(a, toy_state(10));
        let s = toy_sample(&a.config);
        let (tokens, _) = build_sequence(&s, &a.config).unwrap();
        let ta = forward_traced(&tokens, &s.image, &a, true).unwrap();
        let tb = forward_traced(&tokens, &s.image, &b, true).unwrap();
        assert_eq!(ta.hidden, tb.hidden);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
