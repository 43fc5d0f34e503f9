//! Small fixed-purpose DFT helpers: iterative radix-2 FFT for power-of-two
//! sizes, direct DFT otherwise.

use alloc::vec;
use alloc::vec::Vec;
use libm::{cos, sin};

const TAU: f64 = core::f64::consts::TAU;

/// In-place forward DFT (negative-exponent convention) of (re, im).
pub fn dft_inplace(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert_eq!(im.len(), n);
    if n.is_power_of_two() && n > 1 {
        fft_radix2(re, im);
    } else {
        let (ro, io) = dft_naive(re, im);
        re.copy_from_slice(&ro);
        im.copy_from_slice(&io);
    }
}

fn dft_naive(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut ro = vec![0.0; n];
    let mut io = vec![0.0; n];
    for f in 0..n {
        let mut ar = 0.0;
        let mut ai = 0.0;
        for m in 0..n {
            let angle = -TAU * (f * m % n) as f64 / n as f64;
            let (c, s) = (cos(angle), sin(angle));
            ar += re[m] * c - im[m] * s;
            ai += re[m] * s + im[m] * c;
        }
        ro[f] = ar;
        io[f] = ai;
    }
    (ro, io)
}

fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -TAU / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let angle = step * k as f64;
                let (wc, ws) = (cos(angle), sin(angle));
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wc - im[b] * ws;
                let ti = re[b] * ws + im[b] * wc;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len *= 2;
    }
}
