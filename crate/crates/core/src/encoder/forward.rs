//! Per-sequence forward pass with cached activations and the matching
//! reverse-mode pass.
//!
//! Sequences are processed at their content length (trailing PAD stripped),
//! which is exactly key-padding masking: PAD keys receive zero attention and
//! PAD queries never reach the CLS output.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::params::{Block, LayerNorm, Params};
use super::EncoderConfig;
use crate::data::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(ln: &LayerNorm, x: &[f64], rows: usize, dim: usize) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = ln.gamma[j] * h + ln.beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    ln: &LayerNorm,
    cache: &LayerNormCache,
    dy: &[f64],
    rows: usize,
    dim: usize,
    grad: &mut LayerNorm,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    for r in 0..rows {
        let xhat = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..dim {
            grad.gamma[j] += dyr[j] * xhat[j];
            grad.beta[j] += dyr[j];
            let dxh = dyr[j] * ln.gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        let rs = cache.rstd[r];
        for j in 0..dim {
            let dxh = dyr[j] * ln.gamma[j];
            dx[r * dim + j] = rs * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Inverted-dropout scale factors, or `None` when dropout is off.
fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some((0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect())
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

pub(crate) struct BlockCache {
    ln_attn: LayerNormCache,
    h_attn: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × T × T
    attn: Vec<f64>,
    ctx: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    ln_ffn: LayerNormCache,
    h_ffn: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
}

pub(crate) struct ClassifierCache {
    input: Vec<f64>,
    drop: Option<Vec<f64>>,
    hidden: Vec<f64>,
}

/// Everything the backward pass needs for one sequence.
pub(crate) struct SequenceCache {
    pub ids: Vec<TokenId>,
    pub len: usize,
    emb_drop: Option<Vec<f64>>,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    /// Final hidden states, T × d. Row 0 is the CLS embedding f(x).
    pub hidden: Vec<f64>,
    /// CLS residual stream after each block.
    pub layer_cls: Vec<Vec<f64>>,
    classifier: ClassifierCache,
    pub logits: Vec<f64>,
}

impl SequenceCache {
    pub fn cls(&self, dim: usize) -> &[f64] {
        &self.hidden[..dim]
    }

    /// Final-layer attention, heads × T × T.
    pub fn final_attention(&self) -> &[f64] {
        &self.blocks.last().expect("depth >= 1").attn
    }
}

pub(crate) fn forward_sequence<R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    p: &Params,
    ids: &[TokenId],
    mut rng: Option<&mut R>,
    perturbation: Option<&[f64]>,
) -> SequenceCache {
    let d = cfg.model_dim;
    let t = ids.len();
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let rate = cfg.dropout;

    let mut x = vec![0.0; t * d];
    for (i, &id) in ids.iter().enumerate() {
        let tok = &p.token_embedding[id as usize * d..(id as usize + 1) * d];
        let pos = &p.position_embedding[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = tok[j] + pos[j];
        }
    }
    if let Some(delta) = perturbation {
        for (v, dv) in x.iter_mut().zip(delta) {
            *v += dv;
        }
    }
    let emb_drop = dropout_mask(t * d, rate, rng.as_deref_mut());
    apply_mask(&mut x, &emb_drop);

    let mut blocks = Vec::with_capacity(p.blocks.len());
    let mut layer_cls = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (h_attn, ln_attn) = layer_norm(&b.ln_attn, &x, t, d);
        let q = b.query.apply(&h_attn, t);
        let k = b.key.apply(&h_attn, t);
        let v = b.value.apply(&h_attn, t);
        let mut attn = vec![0.0; heads * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut attn[(h * t + i) * t..(h * t + i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    let s = crate::linalg::dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = libm::exp(*s - max);
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let c = &mut ctx[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let a = row[j];
                    for (cv, vv) in c.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *cv += a * vv;
                    }
                }
            }
        }
        let mut o = b.attn_out.apply(&ctx, t);
        let attn_drop = dropout_mask(t * d, rate, rng.as_deref_mut());
        apply_mask(&mut o, &attn_drop);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let (h_ffn, ln_ffn) = layer_norm(&b.ln_ffn, &x, t, d);
        let pre_act = b.ffn_in.apply(&h_ffn, t);
        let act: Vec<f64> = pre_act.iter().map(|&u| gelu(u)).collect();
        let mut f = b.ffn_out.apply(&act, t);
        let ffn_drop = dropout_mask(t * d, rate, rng.as_deref_mut());
        apply_mask(&mut f, &ffn_drop);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
        layer_cls.push(x[..d].to_vec());
        blocks.push(BlockCache {
            ln_attn,
            h_attn,
            q,
            k,
            v,
            attn,
            ctx,
            attn_drop,
            ln_ffn,
            h_ffn,
            pre_act,
            act,
            ffn_drop,
        });
    }
    let (hidden, ln_final) = layer_norm(&p.ln_final, &x, t, d);

    let mut input = hidden[..d].to_vec();
    let drop = dropout_mask(d, rate, rng);
    apply_mask(&mut input, &drop);
    let mut hid = p.classifier_hidden.apply(&input, 1);
    hid.iter_mut().for_each(|z| *z = libm::tanh(*z));
    let logits = p.classifier_out.apply(&hid, 1);

    SequenceCache {
        ids: ids.to_vec(),
        len: t,
        emb_drop,
        blocks,
        ln_final,
        hidden,
        layer_cls,
        classifier: ClassifierCache { input, drop, hidden: hid },
        logits,
    }
}

/// Backprop through the classifier head only; returns dL/d f(x).
pub(crate) fn classifier_backward(
    cfg: &EncoderConfig,
    p: &Params,
    cache: &SequenceCache,
    dlogits: &[f64],
    grad: &mut Params,
) -> Vec<f64> {
    let c = &cache.classifier;
    let dhid = p.classifier_out.backward(&c.hidden, dlogits, 1, &mut grad.classifier_out);
    let dpre: Vec<f64> = dhid.iter().zip(&c.hidden).map(|(g, z)| g * (1.0 - z * z)).collect();
    let mut dinput = p.classifier_hidden.backward(&c.input, &dpre, 1, &mut grad.classifier_hidden);
    apply_mask(&mut dinput, &c.drop);
    debug_assert_eq!(dinput.len(), cfg.model_dim);
    dinput
}

/// Full reverse pass for one sequence.
///
/// `dhidden` is dL/d(final hidden states) (T × d, may be all zero) and
/// `dlogits` the classifier-logit gradient. Parameter gradients accumulate
/// into `grad`; the return value is dL/d(input embeddings), T × d, taken
/// before embedding dropout.
pub(crate) fn backward_sequence(
    cfg: &EncoderConfig,
    p: &Params,
    cache: &SequenceCache,
    dhidden: &[f64],
    dlogits: Option<&[f64]>,
    grad: &mut Params,
) -> Vec<f64> {
    let d = cfg.model_dim;
    let t = cache.len;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);

    let mut dh_final = dhidden.to_vec();
    if let Some(dl) = dlogits {
        let dcls = classifier_backward(cfg, p, cache, dl, grad);
        for (a, b) in dh_final[..d].iter_mut().zip(&dcls) {
            *a += b;
        }
    }
    let mut dx = layer_norm_backward(&p.ln_final, &cache.ln_final, &dh_final, t, d, &mut grad.ln_final);

    for (li, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb: &mut Block = &mut grad.blocks[li];

        let mut df = dx.clone();
        apply_mask(&mut df, &bc.ffn_drop);
        let mut dact = b.ffn_out.backward(&bc.act, &df, t, &mut gb.ffn_out);
        for (g, &u) in dact.iter_mut().zip(&bc.pre_act) {
            *g *= gelu_grad(u);
        }
        let dh_ffn = b.ffn_in.backward(&bc.h_ffn, &dact, t, &mut gb.ffn_in);
        let dln = layer_norm_backward(&b.ln_ffn, &bc.ln_ffn, &dh_ffn, t, d, &mut gb.ln_ffn);
        for (a, g) in dx.iter_mut().zip(&dln) {
            *a += g;
        }

        let mut dout = dx.clone();
        apply_mask(&mut dout, &bc.attn_drop);
        let dctx = b.attn_out.backward(&bc.ctx, &dout, t, &mut gb.attn_out);

        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let row = &bc.attn[(h * t + i) * t..(h * t + i + 1) * t];
                let dci = &dctx[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..t {
                    let vj = &bc.v[j * d + off..j * d + off + dh];
                    da[j] = crate::linalg::dot(dci, vj);
                    weighted += row[j] * da[j];
                    for (g, c) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                        *g += row[j] * c;
                    }
                }
                for j in 0..t {
                    let ds = row[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..dh {
                        dq[i * d + off + e] += ds * bc.k[j * d + off + e];
                        dk[j * d + off + e] += ds * bc.q[i * d + off + e];
                    }
                }
            }
        }
        let mut dh_attn = b.query.backward(&bc.h_attn, &dq, t, &mut gb.query);
        for (a, g) in dh_attn.iter_mut().zip(b.key.backward(&bc.h_attn, &dk, t, &mut gb.key)) {
            *a += g;
        }
        for (a, g) in dh_attn.iter_mut().zip(b.value.backward(&bc.h_attn, &dv, t, &mut gb.value)) {
            *a += g;
        }
        let dln = layer_norm_backward(&b.ln_attn, &bc.ln_attn, &dh_attn, t, d, &mut gb.ln_attn);
        for (a, g) in dx.iter_mut().zip(&dln) {
            *a += g;
        }
    }

    apply_mask(&mut dx, &cache.emb_drop);
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for (g, v) in grad.token_embedding[id as usize * d..(id as usize + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
        for (g, v) in grad.position_embedding[i * d..(i + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
    }
    dx
}
