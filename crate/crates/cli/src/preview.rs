//! Lossy 8-bit PNG previews of image channels for human inspection. The
//! canonical data lives only in the named-array containers; previews
//! min-max scale each channel independently and are never read back.

use std::path::Path;

use anyhow::{Context, Result};
use ppgvit_core::imagify::ImageTriplet;

pub fn write_channel_previews(img: &ImageTriplet, stem: &Path) -> Result<()> {
    for (ci, ch) in img.channels.iter().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (&v, &ok) in ch.iter().zip(&img.valid_mask) {
            if ok {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = ch
            .iter()
            .zip(&img.valid_mask)
            .map(|(&v, &ok)| if ok { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        let path = stem.with_extension(format!("ch{ci}.png"));
        image::GrayImage::from_raw(img.cols as u32, img.rows as u32, pixels)
            .context("preview buffer size mismatch")?
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppgvit_core::imagify::{make_stft_image, StftConfig};

    #[test]
    fn writes_three_pngs() {
        let x: Vec<f64> = (0..1200).map(|i| (0.3 * i as f64).sin()).collect();
        let img = make_stft_image(&x, &StftConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("rec0");
        write_channel_previews(&img, &stem).unwrap();
        for ci in 0..3 {
            let p = dir.path().join(format!("rec0.ch{ci}.png"));
            assert!(p.exists());
            let loaded = image::open(&p).unwrap().to_luma8();
            assert_eq!((loaded.width(), loaded.height()), (img.cols as u32, img.rows as u32));
        }
    }
}
