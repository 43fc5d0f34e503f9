//! The three 1D→2D transforms: STFT log-power replicated to 3 channels,
//! STFT magnitude + cos/sin phase, and Gaussian-soft recurrence plots over
//! signal, slope, and curvature.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{atan2, cos, log, sin};

use crate::error::{Error, Result};
use crate::fft::dft_inplace;
use crate::signal::{discrete_diff, downsample, zscore, EPS_STD};

const TAU: f64 = core::f64::consts::TAU;

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Rectangular,
    /// Periodic Hann: 0.5 * (1 - cos(2πm / N_w)).
    Hann,
}

impl WindowKind {
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|m| 0.5 * (1.0 - cos(TAU * m as f64 / n as f64)))
                .collect(),
        }
    }
}

/// STFT framing and stability parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    /// Window length N_w in samples.
    pub n_window: usize,
    /// Hop size H in samples.
    pub hop: usize,
    /// DFT size; frames are zero-padded from n_window to n_fft.
    pub n_fft: usize,
    pub window_kind: WindowKind,
    /// Stability constant added to |X|^2 before the log.
    pub eps: f64,
    /// Keep only bins 0..n_fft/2 (real input, redundant negatives dropped).
    pub one_sided: bool,
}

impl Default for StftConfig {
    /// Defaults for 30 s windows at 40 Hz: a 3.2 s window resolves the
    /// cardiac and respiratory bands.
    fn default() -> Self {
        StftConfig {
            n_window: 128,
            hop: 32,
            n_fft: 128,
            window_kind: WindowKind::Hann,
            eps: 1e-10,
            one_sided: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_window == 0 || self.n_window > self.n_fft {
            return Err(Error::InvalidConfig(format!(
                "need 0 < n_window <= n_fft, got n_window={} n_fft={}",
                self.n_window, self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_window {
            return Err(Error::InvalidConfig(format!(
                "need 0 < hop <= n_window, got hop={} n_window={}",
                self.hop, self.n_window
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }

    /// Number of frequency bins F.
    pub fn n_freqs(&self) -> usize {
        if self.one_sided {
            self.n_fft / 2 + 1
        } else {
            self.n_fft
        }
    }

    /// Number of frames T for a signal of the given length.
    pub fn n_frames(&self, len: usize) -> usize {
        (len - self.n_window) / self.hop + 1
    }
}

/// Complex STFT grid, frequency-major: entry (f, t) at index `f * n_frames + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub n_freqs: usize,
    pub n_frames: usize,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    #[inline]
    pub fn at(&self, f: usize, t: usize) -> (f64, f64) {
        let i = f * self.n_frames + t;
        (self.re[i], self.im[i])
    }
}

/// Which transform produced an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprTag {
    Stft,
    StftPhase,
    Recurrence,
}

impl ReprTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReprTag::Stft => "stft",
            ReprTag::StftPhase => "stft_phase",
            ReprTag::Recurrence => "recurrence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stft" => Ok(ReprTag::Stft),
            "stft_phase" => Ok(ReprTag::StftPhase),
            "recurrence" => Ok(ReprTag::Recurrence),
            other => Err(Error::InvalidConfig(format!("unknown representation '{other}'"))),
        }
    }
}

/// 3-channel real image with a per-pixel validity mask.
///
/// Each channel is z-scored over the valid region (mean ≈ 0, std ≈ 1, or
/// all-zero when degenerate). Row-major storage, `rows × cols` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub channels: [Vec<f64>; 3],
    pub rows: usize,
    pub cols: usize,
    /// true = real data, false = padding/invalid.
    pub valid_mask: Vec<bool>,
    pub repr_tag: ReprTag,
}

impl ImageTriplet {
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        for ch in &self.channels {
            if ch.len() != n {
                return Err(Error::Shape(format!(
                    "channel length {} != {}x{}",
                    ch.len(),
                    self.rows,
                    self.cols
                )));
            }
            if ch.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite image value".into()));
            }
        }
        if self.valid_mask.len() != n {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        Ok(())
    }
}

/// Recurrence-plot parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceConfig {
    /// Gaussian bandwidth in z-scored amplitude units.
    pub sigma: f64,
    /// Sequence length K after downsampling; the image is K×K.
    pub target_len: usize,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        // 1200 -> 240 keeps the grid small enough for patching.
        RecurrenceConfig { sigma: 1.0, target_len: 240 }
    }
}

impl RecurrenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.target_len < 3 {
            return Err(Error::InvalidConfig(format!(
                "target_len must be >= 3, got {}",
                self.target_len
            )));
        }
        Ok(())
    }
}

/// Short-time Fourier transform:
/// `X(f,t) = Σ_m x[tH+m] w[m] e^{-j2πfm/N_FFT}`, frames zero-padded from
/// N_w to N_FFT.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if x.len() < cfg.n_window {
        return Err(Error::InvalidInput(format!(
            "signal length {} shorter than one window ({})",
            x.len(),
            cfg.n_window
        )));
    }
    let n_frames = cfg.n_frames(x.len());
    let n_freqs = cfg.n_freqs();
    let window = cfg.window_kind.coefficients(cfg.n_window);
    let mut re = vec![0.0; n_freqs * n_frames];
    let mut im = vec![0.0; n_freqs * n_frames];
    let mut buf_re = vec![0.0; cfg.n_fft];
    let mut buf_im = vec![0.0; cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for m in 0..cfg.n_fft {
            buf_re[m] = if m < cfg.n_window { x[start + m] * window[m] } else { 0.0 };
            buf_im[m] = 0.0;
        }
        dft_inplace(&mut buf_re, &mut buf_im);
        for f in 0..n_freqs {
            re[f * n_frames + t] = buf_re[f];
            im[f * n_frames + t] = buf_im[f];
        }
    }
    Ok(ComplexSpectrogram { re, im, n_freqs, n_frames, config: cfg.clone() })
}

fn log_power(spec: &ComplexSpectrogram) -> Vec<f64> {
    spec.re
        .iter()
        .zip(spec.im.iter())
        .map(|(&r, &i)| log(r * r + i * i + spec.config.eps))
        .collect()
}

/// STFT log-power image: `I = z(log(|X|^2 + ε))` replicated to 3 channels.
pub fn make_stft_image(x: &[f64], cfg: &StftConfig) -> Result<ImageTriplet> {
    let spec = stft(x, cfg)?;
    let i = zscore(&log_power(&spec), EPS_STD)?;
    let n = i.len();
    Ok(ImageTriplet {
        channels: [i.clone(), i.clone(), i],
        rows: spec.n_freqs,
        cols: spec.n_frames,
        valid_mask: vec![true; n],
        repr_tag: ReprTag::Stft,
    })
}

/// STFT magnitude + phase image: z(log-power), z(cos φ), z(sin φ) with
/// φ = atan2(ℑX, ℜX) and atan2(0, 0) := 0.
pub fn make_stft_phase_image(x: &[f64], cfg: &StftConfig) -> Result<ImageTriplet> {
    let spec = stft(x, cfg)?;
    let lp = zscore(&log_power(&spec), EPS_STD)?;
    let n = lp.len();
    let mut cos_phi = Vec::with_capacity(n);
    let mut sin_phi = Vec::with_capacity(n);
    for i in 0..n {
        let (r, im) = (spec.re[i], spec.im[i]);
        let phi = if r == 0.0 && im == 0.0 { 0.0 } else { atan2(im, r) };
        cos_phi.push(cos(phi));
        sin_phi.push(sin(phi));
    }
    Ok(ImageTriplet {
        channels: [lp, zscore(&cos_phi, EPS_STD)?, zscore(&sin_phi, EPS_STD)?],
        rows: spec.n_freqs,
        cols: spec.n_frames,
        valid_mask: vec![true; n],
        repr_tag: ReprTag::StftPhase,
    })
}

/// Gaussian-soft recurrence matrix `R(i,j) = exp(-(v[i]-v[j])^2 / 2σ^2)`.
///
/// Square, symmetric (exactly: the lower triangle mirrors the upper), unit
/// diagonal, entries in (0, 1].
pub fn recurrence_matrix(v: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
    }
    if v.len() < 2 {
        return Err(Error::InvalidInput("recurrence: need at least 2 samples".into()));
    }
    let k = v.len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut r = vec![0.0; k * k];
    for i in 0..k {
        r[i * k + i] = 1.0;
        for j in (i + 1)..k {
            let d = v[i] - v[j];
            let val = libm::exp(-d * d * inv);
            r[i * k + j] = val;
            r[j * k + i] = val;
        }
    }
    Ok(r)
}

/// Pad a difference sequence back to length `k` by repeating its first
/// element, so all three recurrence channels share the K×K shape.
fn edge_pad_front(d: &[f64], k: usize) -> Vec<f64> {
    let pad = k - d.len();
    let mut out = Vec::with_capacity(k);
    for _ in 0..pad {
        out.push(d[0]);
    }
    out.extend_from_slice(d);
    out
}

/// Three-channel recurrence image over signal, slope, and curvature.
///
/// The signal is z-scored, linearly downsampled to K, differenced, and each
/// channel is the z-scored Gaussian-soft recurrence matrix of one of
/// {x̃, d1, d2}.
pub fn make_recurrence_image(x: &[f64], cfg: &RecurrenceConfig) -> Result<ImageTriplet> {
    cfg.validate()?;
    if x.len() < cfg.target_len {
        return Err(Error::InvalidInput(format!(
            "signal length {} shorter than recurrence target_len {}",
            x.len(),
            cfg.target_len
        )));
    }
    let k = cfg.target_len;
    let xt = downsample(&zscore(x, EPS_STD)?, k)?;
    let d1 = edge_pad_front(&discrete_diff(&xt, 1)?, k);
    let d2 = edge_pad_front(&discrete_diff(&xt, 2)?, k);
    let mut channels: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, v) in channels.iter_mut().zip([&xt, &d1, &d2]) {
        *slot = zscore(&recurrence_matrix(v, cfg.sigma)?, EPS_STD)?;
    }
    Ok(ImageTriplet {
        channels,
        rows: k,
        cols: k,
        valid_mask: vec![true; k * k],
        repr_tag: ReprTag::Recurrence,
    })
}
