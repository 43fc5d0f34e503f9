//! STFT cross-check against an independent naive per-frame DFT.
//!
//! The library computes frame spectra with a radix-2 FFT (or an internal
//! fallback); this oracle recomputes every bin from the DFT definition
//! directly, sharing no code with the implementation beyond window framing
//! arithmetic.

use ppgvit_core::imagify::{stft, StftConfig, WindowKind};
use ppgvit_core::rng::Rng;

/// X(f, t) = sum_m x[tH + m] w[m] e^{-j 2 pi f m / N_fft}, evaluated term by
/// term with the standard library's trig functions.
fn naive_stft(x: &[f64], cfg: &StftConfig) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let n_frames = (x.len() - cfg.n_window) / cfg.hop + 1;
    let n_freqs = if cfg.one_sided { cfg.n_fft / 2 + 1 } else { cfg.n_fft };
    let w: Vec<f64> = match cfg.window_kind {
        WindowKind::Rectangular => vec![1.0; cfg.n_window],
        WindowKind::Hann => (0..cfg.n_window)
            .map(|m| 0.5 * (1.0 - (std::f64::consts::TAU * m as f64 / cfg.n_window as f64).cos()))
            .collect(),
    };
    let mut re = vec![0.0; n_freqs * n_frames];
    let mut im = vec![0.0; n_freqs * n_frames];
    for t in 0..n_frames {
        for f in 0..n_freqs {
            let mut sr = 0.0;
            let mut si = 0.0;
            for m in 0..cfg.n_window {
                let ang = -std::f64::consts::TAU * f as f64 * m as f64 / cfg.n_fft as f64;
                let v = x[t * cfg.hop + m] * w[m];
                sr += v * ang.cos();
                si += v * ang.sin();
            }
            re[f * n_frames + t] = sr;
            im[f * n_frames + t] = si;
        }
    }
    (re, im, n_freqs, n_frames)
}

fn check(x: &[f64], cfg: &StftConfig) {
    let got = stft(x, cfg).unwrap();
    let (re, im, n_freqs, n_frames) = naive_stft(x, cfg);
    assert_eq!(got.n_freqs, n_freqs);
    assert_eq!(got.n_frames, n_frames);
    let mut worst: f64 = 0.0;
    for f in 0..n_freqs {
        for t in 0..n_frames {
            let (gr, gi) = got.at(f, t);
            worst = worst.max((gr - re[f * n_frames + t]).abs());
            worst = worst.max((gi - im[f * n_frames + t]).abs());
        }
    }
    assert!(worst < 1e-9, "max |impl - oracle| = {worst} for {cfg:?}");
}

#[test]
fn stft_matches_naive_dft_on_random_signals() {
    let mut rng = Rng::new(0x57F7);
    for case in 0..50 {
        let n_window: usize = [8, 16, 24, 32, 64][case % 5];
        let n_fft = match case % 3 {
            0 => n_window,                        // no zero padding
            1 => (n_window * 2).next_power_of_two(), // padded, radix-2 path
            _ => n_window + n_window / 2,         // padded, non power of two
        };
        let cfg = StftConfig {
            n_window,
            hop: 1 + case % n_window,
            n_fft,
            window_kind: if case % 2 == 0 { WindowKind::Hann } else { WindowKind::Rectangular },
            eps: 1e-10,
            one_sided: case % 4 != 3,
        };
        let len = n_window + rng.next_below(512 - n_window as u64 + 1) as usize;
        let x: Vec<f64> = (0..len).map(|_| 3.0 * rng.next_normal()).collect();
        check(&x, &cfg);
    }
}

#[test]
fn stft_matches_naive_dft_on_default_config() {
    let mut rng = Rng::new(7);
    let x: Vec<f64> = (0..400).map(|_| rng.next_normal()).collect();
    check(&x, &StftConfig::default());
}
