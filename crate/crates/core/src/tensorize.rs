//! Backbone-specific channel normalization and patch geometry: pad images to
//! patch-size multiples, derive the patch grid with a validity mask, and
//! flatten patches into vectors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imagify::ImageTriplet;

/// ImageNet per-channel mean, used by the DINOv3-style profile.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// ImageNet per-channel std.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Named backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileName {
    Dinov3Like,
    Siglip2Like,
}

impl ProfileName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileName::Dinov3Like => "dinov3_like",
            ProfileName::Siglip2Like => "siglip2_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dinov3_like" => Ok(ProfileName::Dinov3Like),
            "siglip2_like" => Ok(ProfileName::Siglip2Like),
            other => Err(Error::InvalidConfig(format!("unknown profile '{other}'"))),
        }
    }
}

/// Width/depth preset applied on top of a profile.
///
/// `tiny` and `small` are desk-scale; `full` mirrors ViT-B geometry and is
/// intended for shape checks, not training from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
    Full,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "full" => Ok(Preset::Full),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

/// All backbone-dependent constants in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneProfile {
    pub name: ProfileName,
    /// Patch size p.
    pub patch: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    /// Register token count R (0 for the SigLIP-2-style profile).
    pub n_registers: usize,
    /// Transformer width D.
    pub width: usize,
    pub depth: usize,
    pub n_heads: usize,
    /// Regression-head hidden size.
    pub head_hidden: usize,
}

impl BackboneProfile {
    /// Preset lookup. R=4 for the DINOv3-style profile is a config default,
    /// not a published constant.
    pub fn preset(name: ProfileName, preset: Preset) -> Self {
        let (width, depth, n_heads) = match preset {
            Preset::Tiny => (64, 2, 4),
            Preset::Small => (128, 4, 4),
            Preset::Full => (768, 12, 12),
        };
        let (patch, channel_mean, channel_std, n_registers) = match name {
            ProfileName::Dinov3Like => (16, IMAGENET_MEAN, IMAGENET_STD, 4),
            ProfileName::Siglip2Like => (14, [0.5; 3], [0.5; 3], 0),
        };
        BackboneProfile {
            name,
            patch,
            channel_mean,
            channel_std,
            n_registers,
            width,
            depth,
            n_heads,
            head_hidden: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::InvalidConfig("patch size must be >= 1".into()));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig("channel std must be > 0".into()));
        }
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} must be a positive multiple of n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::InvalidConfig("head_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Flattened patch vector length 3·p².
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Image padded to patch multiples, with grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedImage {
    /// 3 × H_t × W_t, row-major per channel.
    pub channels: [Vec<f64>; 3],
    /// H_t × W_t; true exactly on the original F×T region.
    pub valid_mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
    /// Patch-grid rows H_f.
    pub grid_h: usize,
    /// Patch-grid cols W_f.
    pub grid_w: usize,
    pub profile_name: ProfileName,
    pub patch: usize,
}

impl PaddedImage {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Flattened patches plus patch-level validity.
///
/// Flattening order is fixed: channel-major, then row, then column within the
/// patch; patches are ordered row-major over the grid. Checkpoints depend on
/// this order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// N × (3·p²), row-major.
    pub patches: Vec<f64>,
    /// true iff the patch overlaps at least one valid pixel.
    pub patch_mask: Vec<bool>,
    pub patch_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

/// Apply backbone channel statistics after the per-image z-score:
/// `Î_c = (I_c - mean_c) / std_c`. Mask and tag unchanged.
pub fn normalize_channels(img: &ImageTriplet, profile: &BackboneProfile) -> ImageTriplet {
    let mut out = img.clone();
    for c in 0..3 {
        let (m, s) = (profile.channel_mean[c], profile.channel_std[c]);
        for v in out.channels[c].iter_mut() {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Zero-pad right/bottom to patch multiples:
/// `H_t = ceil(F/p)·p`, `W_t = ceil(T/p)·p`, grid `H_f × W_f`, `N = H_f·W_f`.
pub fn pad_and_mask(img: &ImageTriplet, profile: &BackboneProfile) -> PaddedImage {
    let p = profile.patch;
    let (f, t) = (img.rows, img.cols);
    let h_t = f.div_ceil(p) * p;
    let w_t = t.div_ceil(p) * p;
    let mut channels: [Vec<f64>; 3] =
        [vec![0.0; h_t * w_t], vec![0.0; h_t * w_t], vec![0.0; h_t * w_t]];
    let mut valid_mask = vec![false; h_t * w_t];
    for r in 0..f {
        for c in 0..t {
            valid_mask[r * w_t + c] = img.valid_mask[r * t + c];
            for ch in 0..3 {
                channels[ch][r * w_t + c] = img.channels[ch][r * t + c];
            }
        }
    }
    PaddedImage {
        channels,
        valid_mask,
        height: h_t,
        width: w_t,
        grid_h: h_t / p,
        grid_w: w_t / p,
        profile_name: profile.name,
        patch: p,
    }
}

/// Slice the padded image into N flattened patch vectors of length 3·p².
pub fn patchify(pimg: &PaddedImage) -> PatchSet {
    let p = pimg.patch;
    let dim = 3 * p * p;
    let n = pimg.n_patches();
    let mut patches = vec![0.0; n * dim];
    let mut patch_mask = vec![false; n];
    for gh in 0..pimg.grid_h {
        for gw in 0..pimg.grid_w {
            let pi = gh * pimg.grid_w + gw;
            let base = pi * dim;
            let mut any_valid = false;
            for ch in 0..3 {
                for r in 0..p {
                    let img_row = gh * p + r;
                    for c in 0..p {
                        let img_col = gw * p + c;
                        let v = pimg.channels[ch][img_row * pimg.width + img_col];
                        patches[base + ch * p * p + r * p + c] = v;
                        if ch == 0 && pimg.valid_mask[img_row * pimg.width + img_col] {
                            any_valid = true;
                        }
                    }
                }
            }
            patch_mask[pi] = any_valid;
        }
    }
    PatchSet { patches, patch_mask, patch_dim: dim, grid_h: pimg.grid_h, grid_w: pimg.grid_w }
}

/// Inverse of [`patchify`]: reassemble the padded pixel grid. Used by
/// round-trip tests and previews.
pub fn unpatchify(ps: &PatchSet, patch: usize) -> [Vec<f64>; 3] {
    let p = patch;
    let h = ps.grid_h * p;
    let w = ps.grid_w * p;
    let mut channels: [Vec<f64>; 3] = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for gh in 0..ps.grid_h {
        for gw in 0..ps.grid_w {
            let patch_vec = ps.patch(gh * ps.grid_w + gw);
            for ch in 0..3 {
                for r in 0..p {
                    for c in 0..p {
                        channels[ch][(gh * p + r) * w + gw * p + c] =
                            patch_vec[ch * p * p + r * p + c];
                    }
                }
            }
        }
    }
    channels
}

/// Human-readable geometry summary for `inspect`.
pub fn describe_geometry(f: usize, t: usize, profile: &BackboneProfile) -> String {
    let p = profile.patch;
    let h_t = f.div_ceil(p) * p;
    let w_t = t.div_ceil(p) * p;
    format!(
        "input {f}x{t} -> padded {h_t}x{w_t}, grid {}x{}, N={} patches, {} tokens",
        h_t / p,
        w_t / p,
        (h_t / p) * (w_t / p),
        1 + profile.n_registers + (h_t / p) * (w_t / p)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagify::ReprTag;
    use crate::rng::Rng;

    fn random_image(rows: usize, cols: usize, seed: u64) -> ImageTriplet {
        let mut rng = Rng::new(seed);
        let mk = |rng: &mut Rng| (0..rows * cols).map(|_| rng.next_normal()).collect();
        ImageTriplet {
            channels: [mk(&mut rng), mk(&mut rng), mk(&mut rng)],
            rows,
            cols,
            valid_mask: vec![true; rows * cols],
            repr_tag: ReprTag::Stft,
        }
    }

    #[test]
    fn normalization_fixed_points() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let sig = BackboneProfile::preset(ProfileName::Siglip2Like, Preset::Tiny);
        let mut img = random_image(2, 2, 1);
        img.channels[0][0] = 0.485;
        let out = normalize_channels(&img, &dino);
        assert!(out.channels[0][0].abs() < 1e-15);

        img.channels[0][0] = 0.5;
        img.channels[0][1] = 1.0;
        let out = normalize_channels(&img, &sig);
        assert_eq!(out.channels[0][0], 0.0);
        assert_eq!(out.channels[0][1], 1.0);
    }

    #[test]
    fn pad_arithmetic_p16_and_p14() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let pimg = pad_and_mask(&random_image(65, 34, 2), &dino);
        assert_eq!((pimg.height, pimg.width), (80, 48));
        assert_eq!((pimg.grid_h, pimg.grid_w), (5, 3));
        assert_eq!(pimg.n_patches(), 15);

        let sig = BackboneProfile::preset(ProfileName::Siglip2Like, Preset::Tiny);
        let pimg = pad_and_mask(&random_image(65, 34, 3), &sig);
        assert_eq!((pimg.height, pimg.width), (70, 42));
        assert_eq!((pimg.grid_h, pimg.grid_w), (5, 3));
        assert_eq!(pimg.n_patches(), 15);
    }

    #[test]
    fn already_multiple_no_padding() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let pimg = pad_and_mask(&random_image(64, 32, 4), &dino);
        assert_eq!((pimg.height, pimg.width), (64, 32));
        assert!(pimg.valid_mask.iter().all(|&m| m));
    }

    #[test]
    fn patch_dims() {
        assert_eq!(BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Full).patch_dim(), 768);
        assert_eq!(BackboneProfile::preset(ProfileName::Siglip2Like, Preset::Full).patch_dim(), 588);
    }

    #[test]
    fn boundary_patches_still_valid() {
        // F=65: grid row 4 covers pixel rows 64..79; row 64 is real data.
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let ps = patchify(&pad_and_mask(&random_image(65, 34, 5), &dino));
        assert!(ps.patch_mask.iter().all(|&m| m));
        assert_eq!(ps.n_patches(), 15);
    }

    #[test]
    fn fully_padded_patch_is_invalid() {
        // Zero out the mask on the bottom half so the last grid row has no
        // valid pixels at all.
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let mut img = random_image(65, 34, 6);
        for r in 48..65 {
            for c in 0..34 {
                img.valid_mask[r * 34 + c] = false;
            }
        }
        let ps = patchify(&pad_and_mask(&img, &dino));
        for gw in 0..ps.grid_w {
            assert!(!ps.patch_mask[4 * ps.grid_w + gw]);
            assert!(ps.patch_mask[2 * ps.grid_w + gw]);
        }
    }

    #[test]
    fn patchify_round_trip_bit_exact() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let img = random_image(65, 34, 7);
        let pimg = pad_and_mask(&normalize_channels(&img, &dino), &dino);
        let ps = patchify(&pimg);
        let rebuilt = unpatchify(&ps, dino.patch);
        for ch in 0..3 {
            assert_eq!(rebuilt[ch], pimg.channels[ch]);
        }
    }

    #[test]
    fn crop_recovers_normalized_image() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let img = normalize_channels(&random_image(65, 34, 8), &dino);
        let pimg = pad_and_mask(&img, &dino);
        for ch in 0..3 {
            for r in 0..65 {
                for c in 0..34 {
                    assert_eq!(pimg.channels[ch][r * pimg.width + c], img.channels[ch][r * 34 + c]);
                }
            }
        }
    }

    #[test]
    fn valid_patches_monotone_in_size() {
        let dino = BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny);
        let count = |f: usize, t: usize| {
            patchify(&pad_and_mask(&random_image(f, t, 9), &dino))
                .patch_mask
                .iter()
                .filter(|&&m| m)
                .count()
        };
        let mut prev = 0;
        for f in [8, 16, 40, 65, 100] {
            let n = count(f, 34);
            assert!(n >= prev);
            prev = n;
        }
    }
}
