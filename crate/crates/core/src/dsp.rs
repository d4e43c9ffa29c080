//! FFT plumbing shared by the RF stages.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub fn forward(len: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(len)
}

pub fn inverse(len: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(len)
}

/// In-place forward FFT (unnormalized).
pub fn fft(buf: &mut [Complex64]) {
    if !buf.is_empty() {
        forward(buf.len()).process(buf);
    }
}

/// In-place inverse FFT (unnormalized).
pub fn ifft(buf: &mut [Complex64]) {
    if !buf.is_empty() {
        inverse(buf.len()).process(buf);
    }
}

/// Smallest 7-smooth integer `≥ n`.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Signed frequency of FFT bin `k` for an `n`-point transform at rate `fs`.
pub fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k < n_f / 2.0 {
        k * fs / n_f
    } else {
        (k - n_f) * fs / n_f
    }
}

/// FFT bin of an `n`-point transform that holds output bin `j` of an
/// `m`-point transform, `m ≤ n`, when both share the same bin spacing.
pub fn narrow_bin(j: usize, m: usize, n: usize) -> usize {
    if j < m.div_ceil(2) {
        j
    } else {
        n - (m - j)
    }
}

/// Raised-cosine low-pass response: unity up to `pass`, zero from `stop`.
pub fn taper(f_abs: f64, pass: f64, stop: f64) -> f64 {
    if f_abs <= pass {
        1.0
    } else if f_abs >= stop {
        0.0
    } else {
        let x = (f_abs - pass) / (stop - pass);
        0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Welch power spectrum, Hann window, 50% overlap. Returned in natural FFT
/// bin order, length `nfft`.
pub fn welch(x: &[Complex64], nfft: usize) -> Vec<f64> {
    let win = hann(nfft);
    let fft = forward(nfft);
    let hop = (nfft / 2).max(1);
    let mut acc = vec![0.0; nfft];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut start = 0;
    while start + nfft <= x.len() {
        for i in 0..nfft {
            buf[i] = x[start + i] * win[i];
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += hop;
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    acc
}

/// Frequency-domain fractional delay of a periodic buffer: returns
/// `x(t − delay)` sampled on the same grid. Exact for band-limited input.
pub fn delay_spectrum(spectrum: &mut [Complex64], delay_s: f64, fs: f64) {
    let n = spectrum.len();
    for (k, v) in spectrum.iter_mut().enumerate() {
        let f = bin_frequency(k, n, fs);
        let phase = -std::f64::consts::TAU * f * delay_s;
        *v *= Complex64::from_polar(1.0, phase);
    }
    // The Nyquist bin of an even-length transform has no well-defined sign;
    // keep the delay real-symmetric by dropping it.
    if n % 2 == 0 {
        spectrum[n / 2] = Complex64::new(0.0, 0.0);
    }
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_len() {
        assert_eq!(next_fast_len(526_024), 526_848);
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(11), 12);
    }

    #[test]
    fn fft_round_trip() {
        let mut x: Vec<Complex64> = (0..30)
            .map(|i| Complex64::new(i as f64, -(i as f64) * 0.5))
            .collect();
        let orig = x.clone();
        fft(&mut x);
        ifft(&mut x);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a / 30.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn narrow_bins_map_symmetric() {
        assert_eq!(
            (0..4).map(|j| narrow_bin(j, 4, 10)).collect::<Vec<_>>(),
            vec![0, 1, 8, 9]
        );
        assert_eq!(
            (0..3).map(|j| narrow_bin(j, 3, 10)).collect::<Vec<_>>(),
            vec![0, 1, 9]
        );
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.0), 1.0);
    }
}
