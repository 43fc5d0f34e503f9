//! Mask-aware soft attention pooling over the encoder feature map, and the
//! LN/GELU regression head producing a scalar estimate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::exp;

use crate::error::{Error, Result};
use crate::linalg::{affine, dot, matvec_t_accum, outer_accum};
use crate::params::ParamStore;
use crate::vit::{gelu, gelu_prime, ln_backward, ln_forward, FeatureMap, LnCache};

/// Pooling cache: attention weights (zero at invalid positions) and the
/// features as N×D rows.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub alphas: Vec<f64>,
    pub feats: Vec<f64>,
    pub mask: Vec<bool>,
    pub width_d: usize,
}

/// Pool N×D feature rows with a masked softmax over scores `s_i = w_s · f_i`.
///
/// Softmax uses max-subtraction; α is exactly zero on invalid positions and
/// sums to one over valid ones. Errors (never NaNs) on an all-invalid mask.
pub fn pool_rows(
    feats: &[f64],
    mask: &[bool],
    ws: &[f64],
) -> Result<(Vec<f64>, PoolCache)> {
    let d = ws.len();
    let n = mask.len();
    if feats.len() != n * d {
        return Err(Error::Shape(format!(
            "pool: {} features != {n} positions x width {d}",
            feats.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyPool);
    }
    let mut scores = vec![f64::NEG_INFINITY; n];
    let mut max_s = f64::NEG_INFINITY;
    for i in 0..n {
        if mask[i] {
            scores[i] = dot(ws, &feats[i * d..(i + 1) * d]);
            if scores[i] > max_s {
                max_s = scores[i];
            }
        }
    }
    let mut alphas = vec![0.0; n];
    let mut z = 0.0;
    for i in 0..n {
        if mask[i] {
            alphas[i] = exp(scores[i] - max_s);
            z += alphas[i];
        }
    }
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        if alphas[i] == 0.0 {
            continue;
        }
        alphas[i] /= z;
        let f = &feats[i * d..(i + 1) * d];
        for c in 0..d {
            pooled[c] += alphas[i] * f[c];
        }
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attention pool produced non-finite output".into()));
    }
    let cache = PoolCache { alphas, feats: feats.to_vec(), mask: mask.to_vec(), width_d: d };
    Ok((pooled, cache))
}

/// Mask-aware attention pooling over a D×H×W feature map.
pub fn attention_pool(fm: &FeatureMap, ws: &[f64]) -> Result<(Vec<f64>, PoolCache)> {
    let d = fm.width_d;
    if ws.len() != d {
        return Err(Error::Shape(format!("score vector length {} != width {d}", ws.len())));
    }
    let n = fm.grid_h * fm.grid_w;
    // d-major -> N×D rows
    let mut rows = vec![0.0; n * d];
    for c in 0..d {
        for i in 0..n {
            rows[i * d + c] = fm.data[c * n + i];
        }
    }
    pool_rows(&rows, &fm.mask, ws)
}

/// Backward of [`pool_rows`]: accumulates d(w_s) and returns d(features) as
/// N×D rows (zero at invalid positions).
///
/// With `dα_i = f_i·dp` and `ds_i = α_i (dα_i − Σ_j α_j dα_j)`:
/// `dw_s += Σ_i ds_i f_i` and `df_i = α_i dp + ds_i w_s`.
pub fn pool_backward(dp: &[f64], ws: &[f64], cache: &PoolCache, dws: &mut [f64]) -> Vec<f64> {
    let d = cache.width_d;
    let n = cache.mask.len();
    let mut d_feats = vec![0.0; n * d];
    let mut inner = 0.0;
    for i in 0..n {
        if cache.alphas[i] == 0.0 {
            continue;
        }
        inner += cache.alphas[i] * dot(&cache.feats[i * d..(i + 1) * d], dp);
    }
    for i in 0..n {
        let a = cache.alphas[i];
        if a == 0.0 {
            continue;
        }
        let f = &cache.feats[i * d..(i + 1) * d];
        let ds = a * (dot(f, dp) - inner);
        let df = &mut d_feats[i * d..(i + 1) * d];
        for c in 0..d {
            df[c] = a * dp[c] + ds * ws[c];
            dws[c] += ds * f[c];
        }
    }
    d_feats
}

/// View of one target's head parameters inside the store.
pub struct HeadView<'a> {
    pub ln_g: &'a [f64],
    pub ln_b: &'a [f64],
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: f64,
    pub hidden: usize,
    pub width_d: usize,
}

impl<'a> HeadView<'a> {
    pub fn from_store(store: &'a ParamStore, target: &str) -> Result<Self> {
        let ln_g = store.try_get(&format!("head/{target}/ln/g"))?;
        let ln_b = store.try_get(&format!("head/{target}/ln/b"))?;
        let w1 = store.try_get(&format!("head/{target}/w1"))?;
        let b1 = store.try_get(&format!("head/{target}/b1"))?;
        let w2 = store.try_get(&format!("head/{target}/w2"))?;
        let b2 = store.try_get(&format!("head/{target}/b2"))?[0];
        Ok(HeadView {
            ln_g,
            ln_b,
            w1,
            b1,
            w2,
            b2,
            hidden: b1.len(),
            width_d: ln_g.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub p_in: Vec<f64>,
    pub ln: LnCache,
    pub ln_out: Vec<f64>,
    pub m1: Vec<f64>,
    pub g: Vec<f64>,
}

/// Regression head: `ŷ = w2ᵀ GELU(W1 LN(p) + b1) + b2`.
pub fn regress(p: &[f64], head: &HeadView<'_>) -> Result<(f64, HeadCache)> {
    let d = head.width_d;
    if p.len() != d {
        return Err(Error::Shape(format!("pooled vector length {} != width {d}", p.len())));
    }
    let mut ln = LnCache { mean: vec![0.0], rstd: vec![0.0], normed: vec![0.0; d] };
    let mut ln_out = vec![0.0; d];
    ln_forward(p, head.ln_g, head.ln_b, &mut ln, 0, &mut ln_out);
    if ln_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("head LayerNorm produced non-finite values".into()));
    }
    let mut m1 = vec![0.0; head.hidden];
    affine(head.w1, head.b1, &ln_out, head.hidden, d, &mut m1);
    let g: Vec<f64> = m1.iter().map(|&x| gelu(x)).collect();
    let y = dot(head.w2, &g) + head.b2;
    if !y.is_finite() {
        return Err(Error::Numeric("head output layer produced a non-finite value".into()));
    }
    Ok((y, HeadCache { p_in: p.to_vec(), ln, ln_out, m1, g }))
}

/// Gradient offsets for one head inside the flat parameter buffer.
pub struct HeadGradRanges {
    pub ln_g: core::ops::Range<usize>,
    pub ln_b: core::ops::Range<usize>,
    pub w1: core::ops::Range<usize>,
    pub b1: core::ops::Range<usize>,
    pub w2: core::ops::Range<usize>,
    pub b2: core::ops::Range<usize>,
}

impl HeadGradRanges {
    pub fn from_store(store: &ParamStore, target: &str) -> Result<Self> {
        Ok(HeadGradRanges {
            ln_g: store.layout.range(&format!("head/{target}/ln/g"))?,
            ln_b: store.layout.range(&format!("head/{target}/ln/b"))?,
            w1: store.layout.range(&format!("head/{target}/w1"))?,
            b1: store.layout.range(&format!("head/{target}/b1"))?,
            w2: store.layout.range(&format!("head/{target}/w2"))?,
            b2: store.layout.range(&format!("head/{target}/b2"))?,
        })
    }
}

/// Backward of [`regress`]: accumulates head parameter gradients and returns
/// d(pooled vector).
pub fn regress_backward(
    dy: f64,
    head: &HeadView<'_>,
    cache: &HeadCache,
    ranges: &HeadGradRanges,
    grad: &mut [f64],
) -> Vec<f64> {
    let d = head.width_d;
    let hidden = head.hidden;
    // y = w2·g + b2
    grad[ranges.b2.start] += dy;
    let mut dg = vec![0.0; hidden];
    for j in 0..hidden {
        grad[ranges.w2.start + j] += dy * cache.g[j];
        dg[j] = dy * head.w2[j];
    }
    let mut dm1 = vec![0.0; hidden];
    for j in 0..hidden {
        dm1[j] = dg[j] * gelu_prime(cache.m1[j]);
    }
    outer_accum(&dm1, &cache.ln_out, hidden, d, &mut grad[ranges.w1.clone()]);
    for j in 0..hidden {
        grad[ranges.b1.start + j] += dm1[j];
    }
    let mut d_ln_out = vec![0.0; d];
    matvec_t_accum(head.w1, &dm1, hidden, d, &mut d_ln_out);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dp = vec![0.0; d];
    ln_backward(&d_ln_out, head.ln_g, &cache.ln, 0, &mut dgain, &mut dbias, &mut dp);
    for c in 0..d {
        grad[ranges.ln_g.start + c] += dgain[c];
        grad[ranges.ln_b.start + c] += dbias[c];
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_fm(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = Rng::new(seed);
        FeatureMap {
            data: (0..d * h * w).map(|_| rng.next_normal()).collect(),
            width_d: d,
            grid_h: h,
            grid_w: w,
            mask: vec![true; h * w],
        }
    }

    #[test]
    fn zero_scores_give_uniform_mean_pool() {
        let fm = random_fm(8, 5, 3, 1);
        let (p, cache) = attention_pool(&fm, &vec![0.0; 8]).unwrap();
        let n = 15;
        for a in &cache.alphas {
            assert!((a - 1.0 / n as f64).abs() < 1e-15);
        }
        for c in 0..8 {
            let mean: f64 = (0..n).map(|i| fm.data[c * n + i]).sum::<f64>() / n as f64;
            assert!((p[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_valid_position_returns_that_feature() {
        let mut fm = random_fm(6, 2, 2, 2);
        fm.mask = vec![false, false, true, false];
        let mut rng = Rng::new(3);
        let ws: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let (p, _) = attention_pool(&fm, &ws).unwrap();
        for c in 0..6 {
            assert_eq!(p[c], fm.data[c * 4 + 2]);
        }
    }

    #[test]
    fn all_invalid_mask_is_explicit_error() {
        let mut fm = random_fm(4, 2, 2, 4);
        fm.mask = vec![false; 4];
        assert_eq!(attention_pool(&fm, &[0.0; 4]).unwrap_err(), Error::EmptyPool);
    }

    #[test]
    fn alphas_normalized_and_pool_in_convex_hull() {
        let fm = random_fm(8, 4, 4, 5);
        let mut rng = Rng::new(6);
        let ws: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        let (p, cache) = attention_pool(&fm, &ws).unwrap();
        let sum: f64 = cache.alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let n = 16;
        for c in 0..8 {
            let lo = (0..n).map(|i| fm.data[c * n + i]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|i| fm.data[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(p[c] >= lo - 1e-12 && p[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn pool_ignores_invalid_feature_values() {
        let mut fm = random_fm(5, 3, 3, 7);
        fm.mask[4] = false;
        let mut rng = Rng::new(8);
        let ws: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let (p1, _) = attention_pool(&fm, &ws).unwrap();
        let n = 9;
        for c in 0..5 {
            fm.data[c * n + 4] = 1e9;
        }
        let (p2, _) = attention_pool(&fm, &ws).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn softmax_shift_invariance() {
        // adding a constant to every score leaves alphas and the pool intact;
        // realized by adding c·ws with features shifted so scores shift equally
        let d = 4;
        let n = 6;
        let mut rng = Rng::new(9);
        let feats: Vec<f64> = (0..n * d).map(|_| rng.next_normal()).collect();
        let ws: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let mask = vec![true; n];
        let (p1, c1) = pool_rows(&feats, &mask, &ws).unwrap();
        // shift every feature row by delta with ws·delta != 0
        let delta: Vec<f64> = ws.clone();
        let shifted: Vec<f64> = feats
            .chunks(d)
            .flat_map(|row| row.iter().zip(&delta).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let (_, c2) = pool_rows(&shifted, &mask, &ws).unwrap();
        for (a, b) in c1.alphas.iter().zip(c2.alphas.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let _ = p1;
    }

    #[test]
    fn head_degenerate_parameter_cases() {
        let d = 8;
        let hidden = 8;
        let view = |w1: &'static Vec<f64>,
                    w2: &'static Vec<f64>| HeadView {
            ln_g: Box::leak(Box::new(vec![1.0; d])),
            ln_b: Box::leak(Box::new(vec![0.0; d])),
            w1,
            b1: Box::leak(Box::new(vec![0.0; hidden])),
            w2,
            b2: 3.5,
            hidden,
            width_d: d,
        };
        let zeros_w1: &'static Vec<f64> = Box::leak(Box::new(vec![0.0; hidden * d]));
        let ones_w2: &'static Vec<f64> = Box::leak(Box::new(vec![1.0; hidden]));
        let p: Vec<f64> = (0..d).map(|i| i as f64).collect();
        // W1 = 0, b1 = 0 -> GELU(0) = 0 -> y = b2
        let (y, _) = regress(&p, &view(zeros_w1, ones_w2)).unwrap();
        assert_eq!(y, 3.5);
        // w2 = 0 -> y = b2 regardless of p
        let mut rng = Rng::new(10);
        let w1: &'static Vec<f64> =
            Box::leak(Box::new((0..hidden * d).map(|_| rng.next_normal()).collect()));
        let zero_w2: &'static Vec<f64> = Box::leak(Box::new(vec![0.0; hidden]));
        let (y, _) = regress(&p, &view(w1, zero_w2)).unwrap();
        assert_eq!(y, 3.5);
    }

    #[test]
    fn regress_matches_naive_recomputation() {
        let d = 12;
        let hidden = 10;
        let mut rng = Rng::new(11);
        let ln_g: Vec<f64> = (0..d).map(|_| 1.0 + 0.1 * rng.next_normal()).collect();
        let ln_b: Vec<f64> = (0..d).map(|_| 0.1 * rng.next_normal()).collect();
        let w1: Vec<f64> = (0..hidden * d).map(|_| rng.next_normal()).collect();
        let b1: Vec<f64> = (0..hidden).map(|_| rng.next_normal()).collect();
        let w2: Vec<f64> = (0..hidden).map(|_| rng.next_normal()).collect();
        let b2 = rng.next_normal();
        let p: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let head = HeadView {
            ln_g: &ln_g,
            ln_b: &ln_b,
            w1: &w1,
            b1: &b1,
            w2: &w2,
            b2,
            hidden,
            width_d: d,
        };
        let (y, _) = regress(&p, &head).unwrap();

        // independent naive recomputation
        let mean = p.iter().sum::<f64>() / d as f64;
        let var = p.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let mut expect = b2;
        for j in 0..hidden {
            let mut acc = b1[j];
            for c in 0..d {
                let xhat = (p[c] - mean) / libm::sqrt(var + 1e-6);
                acc += w1[j * d + c] * (ln_g[c] * xhat + ln_b[c]);
            }
            expect += w2[j] * 0.5 * acc * (1.0 + libm::erf(acc / core::f64::consts::SQRT_2));
        }
        assert!((y - expect).abs() < 1e-10, "{y} vs {expect}");
    }
}
