//! Desk-scale Vision-Transformer encoder: patch embedding, CLS/register
//! token assembly with factorized positional embeddings, pre-norm transformer
//! blocks with mask-aware attention, and LoRA adapters on the Q/K/V
//! projections. Forward passes cache what the hand-written backward needs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{erf, exp, sqrt};

use crate::error::{Error, Result};
use crate::linalg::{affine, dot, matvec_t_accum, outer_accum};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensorize::{BackboneProfile, PatchSet};

const LN_EPS: f64 = 1e-6;
const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2π)

/// Forward mode; dropout is active only in [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// LoRA hyperparameters: effective weight is `W + (alpha/rank)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0, dropout: 0.05 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("lora rank must be >= 1".into()));
        }
        if self.rank > width {
            return Err(Error::InvalidConfig(format!(
                "lora rank {} exceeds width {width}",
                self.rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("lora dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which attention projection an adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Q,
    K,
    V,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 3] = [LoraTarget::Q, LoraTarget::K, LoraTarget::V];

    pub fn as_str(&self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
        }
    }
}

/// A standalone low-rank adapter: down-map A (r×D), up-map B (D×r).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: LoraTarget,
    pub cfg: LoraConfig,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LoraAdapter {
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Adapter contribution `(alpha/r)·B·(A·x)` for one input vector.
    pub fn delta(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let r = self.cfg.rank;
        let mut down = vec![0.0; r];
        crate::linalg::matvec(&self.a, x, r, d, &mut down);
        let mut up = vec![0.0; d];
        crate::linalg::matvec(&self.b, &down, d, r, &mut up);
        let s = self.cfg.scale();
        up.iter_mut().for_each(|u| *u *= s);
        up
    }
}

/// Build a fresh adapter: B all zeros (so the initial contribution is the
/// identity delta), A small seeded random.
pub fn lora_wrap(
    layer: usize,
    target: LoraTarget,
    cfg: &LoraConfig,
    width: usize,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    cfg.validate(width)?;
    let a: Vec<f64> = (0..cfg.rank * width).map(|_| rng.next_normal() * 0.02).collect();
    let b = vec![0.0; width * cfg.rank];
    Ok(LoraAdapter { layer, target, cfg: cfg.clone(), a, b })
}

/// Embedded token sequence: row 0 is CLS, rows 1..=R are registers, the rest
/// are patch tokens in row-major grid order. S×D row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<f64>,
    pub token_mask: Vec<bool>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_registers: usize,
    pub width: usize,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        1 + self.n_registers + self.grid_h * self.grid_w
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }

    /// Index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        1 + self.n_registers
    }
}

/// Patch tokens reshaped to D×H_f×W_f plus the spatial validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// D×H×W, d-major.
    pub data: Vec<f64>,
    pub width_d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// H×W row-major; true = valid patch.
    pub mask: Vec<bool>,
}

// ---------------------------------------------------------------------------
// shared scalar pieces

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

/// d/dx GELU(x) = Φ(x) + x·φ(x).
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let phi_pdf = INV_SQRT_TAU * exp(-0.5 * x * x);
    phi_cdf + x * phi_pdf
}

/// Per-row LayerNorm cache: mean, 1/std, and the normalized activations.
#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
    pub normed: Vec<f64>,
}

impl LnCache {
    fn with_rows(rows: usize, d: usize) -> Self {
        LnCache { mean: vec![0.0; rows], rstd: vec![0.0; rows], normed: vec![0.0; rows * d] }
    }
}

/// y = g ⊙ (x - μ)/σ + b for one row; fills the cache at `row`.
pub(crate) fn ln_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    cache: &mut LnCache,
    row: usize,
    y: &mut [f64],
) {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / sqrt(var + LN_EPS);
    cache.mean[row] = mean;
    cache.rstd[row] = rstd;
    let normed = &mut cache.normed[row * d..(row + 1) * d];
    for i in 0..d {
        normed[i] = (x[i] - mean) * rstd;
        y[i] = gain[i] * normed[i] + bias[i];
    }
}

/// Backward of [`ln_forward`]; accumulates dgain/dbias and writes dx.
pub(crate) fn ln_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LnCache,
    row: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let d = dy.len();
    let normed = &cache.normed[row * d..(row + 1) * d];
    let rstd = cache.rstd[row];
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..d {
        dgain[i] += dy[i] * normed[i];
        dbias[i] += dy[i];
        let dxhat = dy[i] * gain[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * normed[i];
    }
    let inv_d = 1.0 / d as f64;
    for i in 0..d {
        let dxhat = dy[i] * gain[i];
        dx[i] = rstd * (dxhat - inv_d * sum_dxhat - normed[i] * inv_d * sum_dxhat_xhat);
    }
}

// ---------------------------------------------------------------------------
// patch embedding

/// Maximum patch-grid side covered by the factorized positional tables.
pub const DEFAULT_MAX_GRID: usize = 64;

/// Project flattened patches to width D, prepend CLS and register tokens, and
/// add positional embeddings (factorized row+col tables for patches; learned
/// dedicated positions for CLS and registers).
pub fn embed_patches(
    ps: &PatchSet,
    store: &ParamStore,
    profile: &BackboneProfile,
    max_grid: usize,
) -> Result<TokenBatch> {
    let d = profile.width;
    let r = profile.n_registers;
    if ps.patch_dim != profile.patch_dim() {
        return Err(Error::InvalidConfig(format!(
            "patch vector length {} does not match profile patch_dim {}",
            ps.patch_dim,
            profile.patch_dim()
        )));
    }
    if ps.grid_h > max_grid || ps.grid_w > max_grid {
        return Err(Error::InvalidConfig(format!(
            "grid {}x{} exceeds positional table size {max_grid}",
            ps.grid_h, ps.grid_w
        )));
    }
    let n = ps.n_patches();
    let s = 1 + r + n;
    let w_e = store.try_get("embed/w")?;
    let b_e = store.try_get("embed/b")?;
    let cls = store.try_get("cls")?;
    let pos_cls = store.try_get("pos/cls")?;
    let pos_row = store.try_get("pos/row")?;
    let pos_col = store.try_get("pos/col")?;

    let mut tokens = vec![0.0; s * d];
    let mut token_mask = vec![true; s];
    for i in 0..d {
        tokens[i] = cls[i] + pos_cls[i];
    }
    if r > 0 {
        let reg = store.try_get("reg")?;
        let pos_reg = store.try_get("pos/reg")?;
        for j in 0..r {
            for i in 0..d {
                tokens[(1 + j) * d + i] = reg[j * d + i] + pos_reg[j * d + i];
            }
        }
    }
    for pi in 0..n {
        let (gh, gw) = (pi / ps.grid_w, pi % ps.grid_w);
        let out = &mut tokens[(1 + r + pi) * d..(1 + r + pi + 1) * d];
        affine(w_e, b_e, ps.patch(pi), d, ps.patch_dim, out);
        for i in 0..d {
            out[i] += pos_row[gh * d + i] + pos_col[gw * d + i];
        }
        token_mask[1 + r + pi] = ps.patch_mask[pi];
    }
    Ok(TokenBatch {
        tokens,
        token_mask,
        grid_h: ps.grid_h,
        grid_w: ps.grid_w,
        n_registers: r,
        width: d,
    })
}

/// Backward of [`embed_patches`]: routes token gradients into the projector,
/// CLS/register vectors, and positional tables.
pub fn embed_backward(
    d_tokens: &[f64],
    ps: &PatchSet,
    store: &ParamStore,
    profile: &BackboneProfile,
    grad: &mut [f64],
) -> Result<()> {
    let d = profile.width;
    let r = profile.n_registers;
    let n = ps.n_patches();
    let layout = &store.layout;
    let (cls_r, pcls_r) = (layout.range("cls")?, layout.range("pos/cls")?);
    for i in 0..d {
        grad[cls_r.start + i] += d_tokens[i];
        grad[pcls_r.start + i] += d_tokens[i];
    }
    if r > 0 {
        let reg_r = layout.range("reg")?;
        let preg_r = layout.range("pos/reg")?;
        for j in 0..r {
            for i in 0..d {
                let g = d_tokens[(1 + j) * d + i];
                grad[reg_r.start + j * d + i] += g;
                grad[preg_r.start + j * d + i] += g;
            }
        }
    }
    let we_r = layout.range("embed/w")?;
    let be_r = layout.range("embed/b")?;
    let prow_r = layout.range("pos/row")?;
    let pcol_r = layout.range("pos/col")?;
    let pdim = ps.patch_dim;
    for pi in 0..n {
        let (gh, gw) = (pi / ps.grid_w, pi % ps.grid_w);
        let dt = &d_tokens[(1 + r + pi) * d..(1 + r + pi + 1) * d];
        outer_accum(dt, ps.patch(pi), d, pdim, &mut grad[we_r.clone()]);
        for i in 0..d {
            grad[be_r.start + i] += dt[i];
            grad[prow_r.start + gh * d + i] += dt[i];
            grad[pcol_r.start + gw * d + i] += dt[i];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// encoder

/// Per-block forward cache.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    /// Inverted-dropout scale per element of the LoRA input path, per Q/K/V.
    pub lora_drop: Option<[Vec<f64>; 3]>,
    /// LoRA down-projections, S×r per Q/K/V.
    pub lora_down: Option<[Vec<f64>; 3]>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, n_heads × S × S; zero outside valid (query, key).
    pub attn: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    pub attn_cat: Vec<f64>,
    /// After the attention residual.
    pub h1: Vec<f64>,
    pub ln2: LnCache,
    pub m1: Vec<f64>,
    pub g: Vec<f64>,
}

/// Whole-encoder forward cache.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub blocks: Vec<BlockCache>,
    /// Tokens entering the final LayerNorm.
    pub pre_final: Vec<f64>,
    pub final_ln: LnCache,
}

fn lora_names(layer: usize, target: LoraTarget) -> (String, String) {
    let t = target.as_str();
    (format!("lora/{layer}/{t}/a"), format!("lora/{layer}/{t}/b"))
}

/// Pre-norm transformer encoder over one token batch.
///
/// Invalid tokens never receive attention weight from valid tokens and are
/// passed through every block unchanged. Masking is additive -inf on invalid
/// key positions before the softmax (realized by restricting the sum to valid
/// keys). With all LoRA B matrices at zero the output is bit-identical to the
/// adapter-free forward.
pub fn encoder_forward(
    tb: &TokenBatch,
    store: &ParamStore,
    profile: &BackboneProfile,
    lora: Option<&LoraConfig>,
    mode: Mode,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(TokenBatch, EncoderCache)> {
    let d = profile.width;
    let s = tb.n_tokens();
    let nh = profile.n_heads;
    let dh = d / nh;
    let scale = 1.0 / sqrt(dh as f64);
    let hidden = 4 * d;
    if let Some(l) = lora {
        l.validate(d)?;
    }
    let mut x = tb.tokens.clone();
    let mut blocks = Vec::with_capacity(profile.depth);
    let valid = &tb.token_mask;

    for layer in 0..profile.depth {
        let pfx = format!("enc/{layer}");
        let ln1_g = store.try_get(&format!("{pfx}/ln1/g"))?;
        let ln1_b = store.try_get(&format!("{pfx}/ln1/b"))?;
        let ln2_g = store.try_get(&format!("{pfx}/ln2/g"))?;
        let ln2_b = store.try_get(&format!("{pfx}/ln2/b"))?;
        let w_qkv: [(&[f64], &[f64]); 3] = [
            (store.try_get(&format!("{pfx}/attn/q/w"))?, store.try_get(&format!("{pfx}/attn/q/b"))?),
            (store.try_get(&format!("{pfx}/attn/k/w"))?, store.try_get(&format!("{pfx}/attn/k/b"))?),
            (store.try_get(&format!("{pfx}/attn/v/w"))?, store.try_get(&format!("{pfx}/attn/v/b"))?),
        ];
        let w_o = store.try_get(&format!("{pfx}/attn/o/w"))?;
        let b_o = store.try_get(&format!("{pfx}/attn/o/b"))?;
        let w1 = store.try_get(&format!("{pfx}/mlp/w1"))?;
        let b1 = store.try_get(&format!("{pfx}/mlp/b1"))?;
        let w2 = store.try_get(&format!("{pfx}/mlp/w2"))?;
        let b2 = store.try_get(&format!("{pfx}/mlp/b2"))?;

        let mut cache = BlockCache {
            x_in: x.clone(),
            ln1: LnCache::with_rows(s, d),
            lora_drop: None,
            lora_down: None,
            q: vec![0.0; s * d],
            k: vec![0.0; s * d],
            v: vec![0.0; s * d],
            attn: vec![0.0; nh * s * s],
            attn_cat: vec![0.0; s * d],
            h1: vec![0.0; s * d],
            ln2: LnCache::with_rows(s, d),
            m1: vec![0.0; s * hidden],
            g: vec![0.0; s * hidden],
        };

        // LN1 + Q/K/V projections (valid rows only)
        let mut a = vec![0.0; s * d];
        for i in 0..s {
            if !valid[i] {
                continue;
            }
            let row = &x[i * d..(i + 1) * d];
            let out = &mut a[i * d..(i + 1) * d];
            ln_forward(row, ln1_g, ln1_b, &mut cache.ln1, i, out);
        }
        for (ti, (w, b)) in w_qkv.iter().enumerate() {
            let dst = match ti {
                0 => &mut cache.q,
                1 => &mut cache.k,
                _ => &mut cache.v,
            };
            for i in 0..s {
                if !valid[i] {
                    continue;
                }
                affine(w, b, &a[i * d..(i + 1) * d], d, d, &mut dst[i * d..(i + 1) * d]);
            }
        }
        if let Some(lcfg) = lora {
            let r = lcfg.rank;
            let sc = lcfg.scale();
            let mut drops: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            let mut downs: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for (ti, target) in LoraTarget::ALL.iter().enumerate() {
                let (an, bn) = lora_names(layer, *target);
                let la = store.try_get(&an)?;
                let lb = store.try_get(&bn)?;
                let mut drop = vec![1.0; s * d];
                if mode == Mode::Train && lcfg.dropout > 0.0 {
                    let rng = dropout_rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::InvalidConfig("train mode needs a dropout rng".into()))?;
                    let keep = 1.0 - lcfg.dropout;
                    for dmv in drop.iter_mut() {
                        *dmv = if rng.next_f64() < keep { 1.0 / keep } else { 0.0 };
                    }
                }
                let mut down_all = vec![0.0; s * r];
                let dst = match ti {
                    0 => &mut cache.q,
                    1 => &mut cache.k,
                    _ => &mut cache.v,
                };
                let mut dropped = vec![0.0; d];
                for i in 0..s {
                    if !valid[i] {
                        continue;
                    }
                    let arow = &a[i * d..(i + 1) * d];
                    let drow = &drop[i * d..(i + 1) * d];
                    for j in 0..d {
                        dropped[j] = arow[j] * drow[j];
                    }
                    let down = &mut down_all[i * r..(i + 1) * r];
                    crate::linalg::matvec(la, &dropped, r, d, down);
                    let out = &mut dst[i * d..(i + 1) * d];
                    for row_d in 0..d {
                        let lrow = &lb[row_d * r..(row_d + 1) * r];
                        let mut acc = 0.0;
                        for rr in 0..r {
                            acc += lrow[rr] * down[rr];
                        }
                        out[row_d] += sc * acc;
                    }
                }
                drops[ti] = drop;
                downs[ti] = down_all;
            }
            cache.lora_drop = Some(drops);
            cache.lora_down = Some(downs);
        }

        // masked multi-head attention
        for h in 0..nh {
            let ho = h * dh;
            for i in 0..s {
                if !valid[i] {
                    continue;
                }
                let qi = &cache.q[i * d + ho..i * d + ho + dh];
                let arow = &mut cache.attn[h * s * s + i * s..h * s * s + (i + 1) * s];
                let mut max_score = f64::NEG_INFINITY;
                for j in 0..s {
                    if !valid[j] {
                        continue;
                    }
                    let kj = &cache.k[j * d + ho..j * d + ho + dh];
                    let sc = dot(qi, kj) * scale;
                    arow[j] = sc;
                    if sc > max_score {
                        max_score = sc;
                    }
                }
                let mut z = 0.0;
                for j in 0..s {
                    if valid[j] {
                        arow[j] = exp(arow[j] - max_score);
                        z += arow[j];
                    } else {
                        arow[j] = 0.0;
                    }
                }
                for j in 0..s {
                    arow[j] /= z;
                }
                let out = &mut cache.attn_cat[i * d + ho..i * d + ho + dh];
                for j in 0..s {
                    let w = arow[j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &cache.v[j * d + ho..j * d + ho + dh];
                    for c in 0..dh {
                        out[c] += w * vj[c];
                    }
                }
            }
        }

        // output projection + residual; invalid rows pass through
        for i in 0..s {
            let h1 = &mut cache.h1[i * d..(i + 1) * d];
            h1.copy_from_slice(&x[i * d..(i + 1) * d]);
            if !valid[i] {
                continue;
            }
            let mut proj = vec![0.0; d];
            affine(w_o, b_o, &cache.attn_cat[i * d..(i + 1) * d], d, d, &mut proj);
            for c in 0..d {
                h1[c] += proj[c];
            }
        }

        // MLP + residual
        let mut out = cache.h1.clone();
        let mut bimg = vec![0.0; d];
        for i in 0..s {
            if !valid[i] {
                continue;
            }
            ln_forward(
                &cache.h1[i * d..(i + 1) * d],
                ln2_g,
                ln2_b,
                &mut cache.ln2,
                i,
                &mut bimg,
            );
            let m1 = &mut cache.m1[i * hidden..(i + 1) * hidden];
            affine(w1, b1, &bimg, hidden, d, m1);
            let g = &mut cache.g[i * hidden..(i + 1) * hidden];
            for j in 0..hidden {
                g[j] = gelu(m1[j]);
            }
            let orow = &mut out[i * d..(i + 1) * d];
            let mut m2 = vec![0.0; d];
            affine(w2, b2, g, d, hidden, &mut m2);
            for c in 0..d {
                orow[c] += m2[c];
            }
        }

        x = out;
        blocks.push(cache);
    }

    // final LayerNorm (valid rows; invalid pass through)
    let pre_final = x.clone();
    let mut final_ln = LnCache::with_rows(s, d);
    if profile.depth > 0 {
        let g = store.try_get("enc/final_ln/g")?;
        let b = store.try_get("enc/final_ln/b")?;
        for i in 0..s {
            if !valid[i] {
                continue;
            }
            let row = pre_final[i * d..(i + 1) * d].to_vec();
            ln_forward(&row, g, b, &mut final_ln, i, &mut x[i * d..(i + 1) * d]);
        }
    }

    let out = TokenBatch { tokens: x, ..tb.clone() };
    Ok((out, EncoderCache { blocks, pre_final, final_ln }))
}

/// Backward of [`encoder_forward`]. Accumulates parameter gradients into
/// `grad` (flat, aligned with the store layout) and returns the gradient
/// w.r.t. the input tokens.
pub fn encoder_backward(
    tb_in: &TokenBatch,
    cache: &EncoderCache,
    d_out: &[f64],
    store: &ParamStore,
    profile: &BackboneProfile,
    lora: Option<&LoraConfig>,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let d = profile.width;
    let s = tb_in.n_tokens();
    let nh = profile.n_heads;
    let dh = d / nh;
    let scale = 1.0 / sqrt(dh as f64);
    let hidden = 4 * d;
    let valid = &tb_in.token_mask;
    let layout = &store.layout;

    let mut dx = d_out.to_vec();

    // final LN
    if profile.depth > 0 {
        let g = store.get("enc/final_ln/g");
        let gr = layout.range("enc/final_ln/g")?;
        let br = layout.range("enc/final_ln/b")?;
        let mut d_pre = vec![0.0; s * d];
        for i in 0..s {
            if !valid[i] {
                d_pre[i * d..(i + 1) * d].copy_from_slice(&dx[i * d..(i + 1) * d]);
                continue;
            }
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut drow = vec![0.0; d];
            ln_backward(&dx[i * d..(i + 1) * d], g, &cache.final_ln, i, &mut dgain, &mut dbias, &mut drow);
            for c in 0..d {
                grad[gr.start + c] += dgain[c];
                grad[br.start + c] += dbias[c];
            }
            d_pre[i * d..(i + 1) * d].copy_from_slice(&drow);
        }
        dx = d_pre;
    }

    for layer in (0..profile.depth).rev() {
        let bc = &cache.blocks[layer];
        let pfx = format!("enc/{layer}");
        let ln1_g = store.get(&format!("{pfx}/ln1/g"));
        let ln2_g = store.get(&format!("{pfx}/ln2/g"));
        let w_o = store.get(&format!("{pfx}/attn/o/w"));
        let w1 = store.get(&format!("{pfx}/mlp/w1"));
        let w2 = store.get(&format!("{pfx}/mlp/w2"));

        let r_ln1_g = layout.range(&format!("{pfx}/ln1/g"))?;
        let r_ln1_b = layout.range(&format!("{pfx}/ln1/b"))?;
        let r_ln2_g = layout.range(&format!("{pfx}/ln2/g"))?;
        let r_ln2_b = layout.range(&format!("{pfx}/ln2/b"))?;
        let r_wo = layout.range(&format!("{pfx}/attn/o/w"))?;
        let r_bo = layout.range(&format!("{pfx}/attn/o/b"))?;
        let r_w1 = layout.range(&format!("{pfx}/mlp/w1"))?;
        let r_b1 = layout.range(&format!("{pfx}/mlp/b1"))?;
        let r_w2 = layout.range(&format!("{pfx}/mlp/w2"))?;
        let r_b2 = layout.range(&format!("{pfx}/mlp/b2"))?;

        // ---- MLP backward: out = h1 + W2 GELU(W1 LN2(h1) + b1) + b2
        let mut d_h1 = vec![0.0; s * d];
        for i in 0..s {
            let drow = &dx[i * d..(i + 1) * d];
            let dst = &mut d_h1[i * d..(i + 1) * d];
            dst.copy_from_slice(drow);
            if !valid[i] {
                continue;
            }
            // d_m2 = drow
            let grow = &bc.g[i * hidden..(i + 1) * hidden];
            outer_accum(drow, grow, d, hidden, &mut grad[r_w2.clone()]);
            for c in 0..d {
                grad[r_b2.start + c] += drow[c];
            }
            let mut dg = vec![0.0; hidden];
            matvec_t_accum(w2, drow, d, hidden, &mut dg);
            let m1 = &bc.m1[i * hidden..(i + 1) * hidden];
            let mut dm1 = vec![0.0; hidden];
            for j in 0..hidden {
                dm1[j] = dg[j] * gelu_prime(m1[j]);
            }
            // recompute LN2 output for the outer product
            let normed = &bc.ln2.normed[i * d..(i + 1) * d];
            let ln2_b_vals = store.get(&format!("{pfx}/ln2/b"));
            let mut ln2_out = vec![0.0; d];
            for c in 0..d {
                ln2_out[c] = ln2_g[c] * normed[c] + ln2_b_vals[c];
            }
            outer_accum(&dm1, &ln2_out, hidden, d, &mut grad[r_w1.clone()]);
            for j in 0..hidden {
                grad[r_b1.start + j] += dm1[j];
            }
            let mut d_ln2_out = vec![0.0; d];
            matvec_t_accum(w1, &dm1, hidden, d, &mut d_ln2_out);
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut d_h1_row = vec![0.0; d];
            ln_backward(&d_ln2_out, ln2_g, &bc.ln2, i, &mut dgain, &mut dbias, &mut d_h1_row);
            for c in 0..d {
                grad[r_ln2_g.start + c] += dgain[c];
                grad[r_ln2_b.start + c] += dbias[c];
                dst[c] += d_h1_row[c];
            }
        }

        // ---- attention backward: h1 = x + Wo attn_cat + bo
        let mut d_x_in = vec![0.0; s * d];
        let mut d_attn_cat = vec![0.0; s * d];
        for i in 0..s {
            let drow = &d_h1[i * d..(i + 1) * d];
            d_x_in[i * d..(i + 1) * d].copy_from_slice(drow);
            if !valid[i] {
                continue;
            }
            outer_accum(drow, &bc.attn_cat[i * d..(i + 1) * d], d, d, &mut grad[r_wo.clone()]);
            for c in 0..d {
                grad[r_bo.start + c] += drow[c];
            }
            matvec_t_accum(w_o, drow, d, d, &mut d_attn_cat[i * d..(i + 1) * d]);
        }

        let mut dq = vec![0.0; s * d];
        let mut dk = vec![0.0; s * d];
        let mut dv = vec![0.0; s * d];
        for h in 0..nh {
            let ho = h * dh;
            for i in 0..s {
                if !valid[i] {
                    continue;
                }
                let arow = &bc.attn[h * s * s + i * s..h * s * s + (i + 1) * s];
                let dout = &d_attn_cat[i * d + ho..i * d + ho + dh];
                // dα and softmax backward
                let mut dalpha = vec![0.0; s];
                let mut inner = 0.0;
                for j in 0..s {
                    if arow[j] == 0.0 {
                        continue;
                    }
                    let vj = &bc.v[j * d + ho..j * d + ho + dh];
                    dalpha[j] = dot(dout, vj);
                    for c in 0..dh {
                        dv[j * d + ho + c] += arow[j] * dout[c];
                    }
                    inner += arow[j] * dalpha[j];
                }
                let qi = &bc.q[i * d + ho..i * d + ho + dh];
                for j in 0..s {
                    if arow[j] == 0.0 {
                        continue;
                    }
                    let ds = arow[j] * (dalpha[j] - inner) * scale;
                    let kj = &bc.k[j * d + ho..j * d + ho + dh];
                    for c in 0..dh {
                        dq[i * d + ho + c] += ds * kj[c];
                        dk[j * d + ho + c] += ds * qi[c];
                    }
                }
            }
        }

        // ---- Q/K/V projection (+ LoRA) backward into LN1 output
        let mut d_a = vec![0.0; s * d];
        // reconstruct LN1 output rows once
        let ln1_b_vals = store.get(&format!("{pfx}/ln1/b"));
        let mut a_rows = vec![0.0; s * d];
        for i in 0..s {
            if !valid[i] {
                continue;
            }
            let normed = &bc.ln1.normed[i * d..(i + 1) * d];
            let arow = &mut a_rows[i * d..(i + 1) * d];
            for c in 0..d {
                arow[c] = ln1_g[c] * normed[c] + ln1_b_vals[c];
            }
        }
        for (ti, target) in LoraTarget::ALL.iter().enumerate() {
            let tname = target.as_str();
            let w = store.get(&format!("{pfx}/attn/{tname}/w"));
            let r_w = layout.range(&format!("{pfx}/attn/{tname}/w"))?;
            let r_b = layout.range(&format!("{pfx}/attn/{tname}/b"))?;
            let dproj = match ti {
                0 => &dq,
                1 => &dk,
                _ => &dv,
            };
            for i in 0..s {
                if !valid[i] {
                    continue;
                }
                let drow = &dproj[i * d..(i + 1) * d];
                let arow = &a_rows[i * d..(i + 1) * d];
                outer_accum(drow, arow, d, d, &mut grad[r_w.clone()]);
                for c in 0..d {
                    grad[r_b.start + c] += drow[c];
                }
                matvec_t_accum(w, drow, d, d, &mut d_a[i * d..(i + 1) * d]);
            }
            if let Some(lcfg) = lora {
                let r = lcfg.rank;
                let sc = lcfg.scale();
                let (an, bn) = lora_names(layer, *target);
                let la = store.get(&an);
                let lb = store.get(&bn);
                let r_la = layout.range(&an)?;
                let r_lb = layout.range(&bn)?;
                let drops = bc.lora_drop.as_ref().expect("lora cache");
                let downs = bc.lora_down.as_ref().expect("lora cache");
                for i in 0..s {
                    if !valid[i] {
                        continue;
                    }
                    let drow = &dproj[i * d..(i + 1) * d];
                    let down = &downs[ti][i * r..(i + 1) * r];
                    // d_up = sc * drow; dB += d_up ⊗ down
                    for row_d in 0..d {
                        let g = sc * drow[row_d];
                        if g == 0.0 {
                            continue;
                        }
                        for rr in 0..r {
                            grad[r_lb.start + row_d * r + rr] += g * down[rr];
                        }
                    }
                    // d_down = sc * B^T drow
                    let mut d_down = vec![0.0; r];
                    for row_d in 0..d {
                        let g = sc * drow[row_d];
                        if g == 0.0 {
                            continue;
                        }
                        for rr in 0..r {
                            d_down[rr] += lb[row_d * r + rr] * g;
                        }
                    }
                    // dA += d_down ⊗ dropped_input; d_a += mask ∘ A^T d_down
                    let arow = &a_rows[i * d..(i + 1) * d];
                    let drop = &drops[ti][i * d..(i + 1) * d];
                    for rr in 0..r {
                        let g = d_down[rr];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            grad[r_la.start + rr * d + c] += g * arow[c] * drop[c];
                        }
                    }
                    let darow = &mut d_a[i * d..(i + 1) * d];
                    for c in 0..d {
                        let mut acc = 0.0;
                        for rr in 0..r {
                            acc += la[rr * d + c] * d_down[rr];
                        }
                        darow[c] += acc * drop[c];
                    }
                }
            }
        }

        // ---- LN1 backward into block input
        for i in 0..s {
            if !valid[i] {
                continue;
            }
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut drow = vec![0.0; d];
            ln_backward(&d_a[i * d..(i + 1) * d], ln1_g, &bc.ln1, i, &mut dgain, &mut dbias, &mut drow);
            for c in 0..d {
                grad[r_ln1_g.start + c] += dgain[c];
                grad[r_ln1_b.start + c] += dbias[c];
                d_x_in[i * d + c] += drow[c];
            }
        }

        dx = d_x_in;
    }

    Ok(dx)
}

/// Discard CLS and registers, reshape patch tokens to D×H_f×W_f, copy the
/// patch mask into the spatial mask.
pub fn extract_feature_map(tb: &TokenBatch) -> Result<FeatureMap> {
    let d = tb.width;
    let (h, w) = (tb.grid_h, tb.grid_w);
    let n = h * w;
    if tb.tokens.len() != tb.n_tokens() * d {
        return Err(Error::Shape(format!(
            "token buffer length {} inconsistent with {} tokens of width {d}",
            tb.tokens.len(),
            tb.n_tokens()
        )));
    }
    let off = tb.patch_offset();
    let mut data = vec![0.0; d * n];
    let mut mask = vec![false; n];
    for pi in 0..n {
        mask[pi] = tb.token_mask[off + pi];
        let tok = tb.token(off + pi);
        for c in 0..d {
            data[c * n + pi] = tok[c];
        }
    }
    Ok(FeatureMap { data, width_d: d, grid_h: h, grid_w: w, mask })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::tensorize::{Preset, ProfileName};

    fn tiny_model(lora: Option<LoraConfig>) -> Model {
        let profile = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        Model::init(
            ModelConfig {
                profile,
                lora,
                targets: alloc::vec![String::from("hr")],
                max_grid: 8,
            },
            7,
        )
    }

    use tests_support::random_patchset;

    #[test]
    fn token_counts() {
        let m = tiny_model(None);
        let ps = random_patchset(5, 3, m.cfg.profile.patch_dim(), 1);
        let tb = embed_patches(&ps, &m.store, &m.cfg.profile, m.cfg.max_grid).unwrap();
        assert_eq!(tb.n_tokens(), 20); // 1 + 4 + 15

        let sig = BackboneProfile::preset(ProfileName::Siglip2Like, Preset::Tiny);
        let m2 = Model::init(
            ModelConfig {
                profile: sig.clone(),
                lora: None,
                targets: alloc::vec![String::from("hr")],
                max_grid: 8,
            },
            2,
        );
        let ps2 = random_patchset(5, 3, sig.patch_dim(), 2);
        let tb2 = embed_patches(&ps2, &m2.store, &sig, 8).unwrap();
        assert_eq!(tb2.n_tokens(), 16); // 1 + 0 + 15
    }

    #[test]
    fn depth_zero_is_identity() {
        let mut m = tiny_model(None);
        m.cfg.profile.depth = 0;
        let ps = random_patchset(2, 2, m.cfg.profile.patch_dim(), 3);
        let tb = embed_patches(&ps, &m.store, &m.cfg.profile, 8).unwrap();
        let (out, _) = encoder_forward(&tb, &m.store, &m.cfg.profile, None, Mode::Eval, None).unwrap();
        assert_eq!(out.tokens, tb.tokens);
    }

    #[test]
    fn zero_b_lora_matches_base_forward() {
        let m = tiny_model(Some(LoraConfig::default()));
        let ps = random_patchset(2, 2, m.cfg.profile.patch_dim(), 4);
        let tb = embed_patches(&ps, &m.store, &m.cfg.profile, 8).unwrap();
        let (with, _) =
            encoder_forward(&tb, &m.store, &m.cfg.profile, m.cfg.lora.as_ref(), Mode::Eval, None)
                .unwrap();
        let (without, _) =
            encoder_forward(&tb, &m.store, &m.cfg.profile, None, Mode::Eval, None).unwrap();
        assert_eq!(with.tokens, without.tokens);
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid() {
        let m = tiny_model(None);
        let ps = random_patchset(2, 2, m.cfg.profile.patch_dim(), 5);
        let mut tb = embed_patches(&ps, &m.store, &m.cfg.profile, 8).unwrap();
        let off = tb.patch_offset();
        tb.token_mask[off + 1] = false;
        let (_, cache) =
            encoder_forward(&tb, &m.store, &m.cfg.profile, None, Mode::Eval, None).unwrap();
        let s = tb.n_tokens();
        for bc in &cache.blocks {
            for h in 0..m.cfg.profile.n_heads {
                for i in 0..s {
                    if !tb.token_mask[i] {
                        continue;
                    }
                    let row = &bc.attn[h * s * s + i * s..h * s * s + (i + 1) * s];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert_eq!(row[off + 1], 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_token_contents_do_not_affect_valid_outputs() {
        let m = tiny_model(None);
        let ps = random_patchset(2, 2, m.cfg.profile.patch_dim(), 6);
        let mut tb = embed_patches(&ps, &m.store, &m.cfg.profile, 8).unwrap();
        let off = tb.patch_offset();
        tb.token_mask[off] = false;
        tb.token_mask[off + 3] = false;
        let (out_a, _) =
            encoder_forward(&tb, &m.store, &m.cfg.profile, None, Mode::Eval, None).unwrap();
        // swap + scramble the two invalid tokens
        let d = tb.width;
        let mut tb2 = tb.clone();
        for c in 0..d {
            tb2.tokens.swap((off) * d + c, (off + 3) * d + c);
            tb2.tokens[(off) * d + c] += 42.0;
        }
        let (out_b, _) =
            encoder_forward(&tb2, &m.store, &m.cfg.profile, None, Mode::Eval, None).unwrap();
        for i in 0..tb.n_tokens() {
            if tb.token_mask[i] {
                assert_eq!(out_a.token(i), out_b.token(i), "token {i}");
            }
        }
    }

    #[test]
    fn feature_map_round_trip_and_mask_copy() {
        let m = tiny_model(None);
        let ps = random_patchset(5, 3, m.cfg.profile.patch_dim(), 7);
        let mut tb = embed_patches(&ps, &m.store, &m.cfg.profile, 8).unwrap();
        let off = tb.patch_offset();
        tb.token_mask[off + 7] = false;
        let fm = extract_feature_map(&tb).unwrap();
        assert_eq!((fm.width_d, fm.grid_h, fm.grid_w), (64, 5, 3));
        assert!(!fm.mask[7]);
        let n = 15;
        let off = tb.patch_offset();
        for pi in 0..n {
            for c in 0..fm.width_d {
                assert_eq!(fm.data[c * n + pi], tb.token(off + pi)[c]);
            }
        }
    }

    #[test]
    fn lora_wrap_contract() {
        let mut rng = Rng::new(1);
        let cfg = LoraConfig::default();
        let adapter = lora_wrap(0, LoraTarget::Q, &cfg, 768, &mut rng).unwrap();
        assert_eq!(adapter.param_count(), 2 * 8 * 768); // 12288
        assert!((cfg.scale() - 2.0).abs() < 1e-15);
        let x: Vec<f64> = (0..768).map(|i| i as f64 * 0.01).collect();
        assert!(adapter.delta(&x).iter().all(|&v| v == 0.0));
        assert!(lora_wrap(0, LoraTarget::Q, &cfg, 4, &mut rng).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-12);
        // derivative vs central difference
        for &x in &[-2.0, -0.5, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
