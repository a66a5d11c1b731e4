//! Linear-phase FIR design and zero-phase application.
//!
//! Filters are Hamming-windowed sinc designs. Zero-phase filtering is the
//! forward-backward scheme with odd reflection padding of `n_taps` samples at
//! each end. Away from the padding, running the filter forward and then
//! backward is the same as one centred convolution with the tap
//! autocorrelation, so that is what is computed, by FFT. Two real channels
//! share one complex transform.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};

pub const DEFAULT_TAPS: usize = 1201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass { low_hz: f64, high_hz: f64 },
    Bandstop { low_hz: f64, high_hz: f64 },
}

impl FilterKind {
    pub const EEG_BANDPASS: FilterKind = FilterKind::Bandpass { low_hz: 1.0, high_hz: 10.0 };
    pub const LINE_NOTCH: FilterKind = FilterKind::Bandstop { low_hz: 48.0, high_hz: 52.0 };

    fn edges(self) -> (f64, f64) {
        match self {
            FilterKind::Bandpass { low_hz, high_hz } | FilterKind::Bandstop { low_hz, high_hz } => {
                (low_hz, high_hz)
            }
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FilterKind::Bandpass { low_hz, high_hz } => write!(f, "bandpass {low_hz}-{high_hz} Hz"),
            FilterKind::Bandstop { low_hz, high_hz } => write!(f, "bandstop {low_hz}-{high_hz} Hz"),
        }
    }
}

struct Prepared {
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernel_spectrum: Vec<Complex<f64>>,
}

#[derive(Clone)]
pub struct FirFilter {
    kind: FilterKind,
    fs_hz: f64,
    taps: Arc<[f64]>,
    /// Autocorrelation of the taps, length 2N-1.
    zero_phase_kernel: Arc<[f64]>,
    plans: Arc<Mutex<HashMap<usize, Arc<Prepared>>>>,
}

impl std::fmt::Debug for FirFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FirFilter")
            .field("kind", &self.kind)
            .field("fs_hz", &self.fs_hz)
            .field("n_taps", &self.taps.len())
            .finish()
    }
}

impl PartialEq for FirFilter {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.fs_hz == other.fs_hz && self.taps == other.taps
    }
}

fn lowpass_tap(fc: f64, fs: f64, m: f64) -> f64 {
    let w = 2.0 * fc / fs;
    if m == 0.0 {
        w
    } else {
        (PI * w * m).sin() / (PI * m)
    }
}

pub fn design_fir(kind: FilterKind, fs_hz: f64, n_taps: usize) -> Result<FirFilter> {
    if n_taps < 3 || n_taps % 2 == 0 {
        return Err(BciError::InvalidParameter(format!("n_taps must be odd and >= 3, got {n_taps}")));
    }
    if !(fs_hz.is_finite() && fs_hz > 0.0) {
        return Err(BciError::InvalidParameter("fs must be positive".into()));
    }
    let (low, high) = kind.edges();
    let nyquist = fs_hz / 2.0;
    if !(low > 0.0 && low < high) {
        return Err(BciError::InvalidParameter(format!("band edges must satisfy 0 < low < high ({kind})")));
    }
    if high >= nyquist {
        return Err(BciError::InvalidParameter(format!("band edge {high} Hz at or above Nyquist {nyquist} Hz")));
    }
    let centre = (n_taps / 2) as f64;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|k| {
            let m = k as f64 - centre;
            let window = 0.54 - 0.46 * (2.0 * PI * k as f64 / (n_taps - 1) as f64).cos();
            let band = lowpass_tap(high, fs_hz, m) - lowpass_tap(low, fs_hz, m);
            let ideal = match kind {
                FilterKind::Bandpass { .. } => band,
                FilterKind::Bandstop { .. } => (if m == 0.0 { 1.0 } else { 0.0 }) - band,
            };
            ideal * window
        })
        .collect();
    // Mirror so the taps are bit-exactly symmetric.
    for k in 0..n_taps / 2 {
        taps[n_taps - 1 - k] = taps[k];
    }
    Ok(FirFilter::from_taps(kind, fs_hz, taps))
}

impl FirFilter {
    fn from_taps(kind: FilterKind, fs_hz: f64, taps: Vec<f64>) -> Self {
        let n = taps.len();
        let mut g = vec![0.0; 2 * n - 1];
        for (lag, slot) in g.iter_mut().enumerate() {
            let m = lag as isize - (n as isize - 1);
            let mut acc = 0.0;
            for j in 0..n {
                let k = j as isize - m;
                if (0..n as isize).contains(&k) {
                    acc += taps[j] * taps[k as usize];
                }
            }
            *slot = acc;
        }
        Self {
            kind,
            fs_hz,
            taps: taps.into(),
            zero_phase_kernel: g.into(),
            plans: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    /// Complex response of a single forward pass at `f_hz`.
    pub fn response(&self, f_hz: f64) -> Complex<f64> {
        let w = 2.0 * PI * f_hz / self.fs_hz;
        self.taps
            .iter()
            .enumerate()
            .map(|(k, &h)| Complex::from_polar(h, -w * k as f64))
            .sum()
    }

    pub fn magnitude(&self, f_hz: f64) -> f64 {
        self.response(f_hz).norm()
    }

    /// Magnitude of the forward-backward (zero-phase) response, |H|^2.
    pub fn zero_phase_magnitude(&self, f_hz: f64) -> f64 {
        self.response(f_hz).norm_sqr()
    }

    fn prepared(&self, len: usize) -> Arc<Prepared> {
        let mut plans = self.plans.lock().expect("filter plan cache poisoned");
        plans
            .entry(len)
            .or_insert_with(|| {
                let n = self.taps.len();
                let fft_len = next_fast_len(len + 2 * n);
                let mut planner = FftPlanner::new();
                let forward = planner.plan_fft_forward(fft_len);
                let inverse = planner.plan_fft_inverse(fft_len);
                let mut kernel_spectrum = vec![Complex::new(0.0, 0.0); fft_len];
                for (slot, &g) in kernel_spectrum.iter_mut().zip(self.zero_phase_kernel.iter()) {
                    slot.re = g / fft_len as f64;
                }
                forward.process(&mut kernel_spectrum);
                Arc::new(Prepared { fft_len, forward, inverse, kernel_spectrum })
            })
            .clone()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len <= self.taps.len() {
            return Err(BciError::InvalidParameter(format!(
                "signal of {len} samples is not longer than the {}-tap filter",
                self.taps.len()
            )));
        }
        Ok(())
    }

    /// Zero-phase filter one signal.
    pub fn filter_zero_phase(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let mut out = x.to_vec();
        self.run(&mut out, None);
        Ok(out)
    }

    /// Zero-phase filter every row in place.
    pub fn filter_rows(&self, data: &mut Array2<f64>) -> Result<()> {
        let len = data.ncols();
        self.check_len(len)?;
        let mut a = vec![0.0; len];
        let mut b = vec![0.0; len];
        let rows = data.nrows();
        let mut r = 0;
        while r < rows {
            a.iter_mut().zip(data.row(r)).for_each(|(d, s)| *d = *s);
            if r + 1 < rows {
                b.iter_mut().zip(data.row(r + 1)).for_each(|(d, s)| *d = *s);
                self.run(&mut a, Some(&mut b));
                data.row_mut(r + 1).iter_mut().zip(&b).for_each(|(d, s)| *d = *s);
            } else {
                self.run(&mut a, None);
            }
            data.row_mut(r).iter_mut().zip(&a).for_each(|(d, s)| *d = *s);
            r += 2;
        }
        Ok(())
    }

    fn run(&self, a: &mut [f64], mut b: Option<&mut [f64]>) {
        let len = a.len();
        let n = self.taps.len();
        let prep = self.prepared(len);
        let mut buf = vec![Complex::new(0.0, 0.0); prep.fft_len];
        let pad = |x: &[f64], i: usize| -> f64 {
            // padded index i in 0..len+2n
            if i < n {
                2.0 * x[0] - x[n - i]
            } else if i < n + len {
                x[i - n]
            } else {
                let j = i - n - len; // 0..n
                2.0 * x[len - 1] - x[len - 2 - j]
            }
        };
        for (i, slot) in buf.iter_mut().take(len + 2 * n).enumerate() {
            slot.re = pad(a, i);
            if let Some(b) = b.as_deref() {
                slot.im = pad(b, i);
            }
        }
        prep.forward.process(&mut buf);
        for (z, g) in buf.iter_mut().zip(&prep.kernel_spectrum) {
            *z *= g;
        }
        prep.inverse.process(&mut buf);
        let offset = 2 * n - 1;
        for (j, out) in a.iter_mut().enumerate() {
            *out = buf[offset + j].re;
        }
        if let Some(b) = b.as_deref_mut() {
            for (j, out) in b.iter_mut().enumerate() {
                *out = buf[offset + j].im;
            }
        }
    }

    /// Reference implementation: explicit forward then backward passes over
    /// the padded signal. Quadratic cost; used to check the fast path.
    pub fn filter_forward_backward_direct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let n = self.taps.len();
        let len = x.len();
        let mut padded = Vec::with_capacity(len + 2 * n);
        padded.extend((0..n).map(|i| 2.0 * x[0] - x[n - i]));
        padded.extend_from_slice(x);
        padded.extend((0..n).map(|j| 2.0 * x[len - 1] - x[len - 2 - j]));
        let causal = |s: &[f64]| -> Vec<f64> {
            (0..s.len())
                .map(|i| (0..n.min(i + 1)).map(|k| self.taps[k] * s[i - k]).sum())
                .collect()
        };
        let mut y = causal(&padded);
        y.reverse();
        let mut z = causal(&y);
        z.reverse();
        Ok(z[n..n + len].to_vec())
    }
}

/// Smallest length >= n whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / 1000.0 + phase).sin()).collect()
    }

    #[test]
    fn coefficients_are_symmetric() {
        for kind in [FilterKind::EEG_BANDPASS, FilterKind::LINE_NOTCH] {
            let f = design_fir(kind, 1000.0, 501).unwrap();
            let t = f.taps();
            for k in 0..t.len() {
                assert_eq!(t[k], t[t.len() - 1 - k]);
            }
        }
    }

    #[test]
    fn bandpass_1001_response() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, 1001).unwrap();
        let h5 = f.magnitude(5.0);
        assert!((0.95..=1.05).contains(&h5), "{h5}");
        assert!(f.magnitude(50.0) < 0.01);
    }

    #[test]
    fn bandpass_default_rejects_sub_hertz_drift() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, DEFAULT_TAPS).unwrap();
        assert!(f.magnitude(0.1) < 0.1, "{}", f.magnitude(0.1));
    }

    #[test]
    fn notch_response() {
        let f = design_fir(FilterKind::LINE_NOTCH, 1000.0, DEFAULT_TAPS).unwrap();
        assert!(f.magnitude(50.0) < 0.05);
        let h10 = f.magnitude(10.0);
        assert!((0.95..=1.05).contains(&h10), "{h10}");
    }

    #[test]
    fn design_errors() {
        assert!(design_fir(FilterKind::EEG_BANDPASS, 1000.0, 500).is_err());
        assert!(design_fir(FilterKind::Bandpass { low_hz: 1.0, high_hz: 500.0 }, 1000.0, 501).is_err());
        assert!(design_fir(FilterKind::Bandstop { low_hz: 48.0, high_hz: 600.0 }, 1000.0, 501).is_err());
        assert!(design_fir(FilterKind::Bandpass { low_hz: 10.0, high_hz: 1.0 }, 1000.0, 501).is_err());
    }

    #[test]
    fn fast_path_matches_direct_forward_backward() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, 101).unwrap();
        let x: Vec<f64> = (0..700).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0 + 0.01 * i as f64).collect();
        let fast = f.filter_zero_phase(&x).unwrap();
        let slow = f.filter_forward_backward_direct(&x).unwrap();
        let err = fast.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "max deviation {err}");
    }

    #[test]
    fn paired_rows_match_single_rows() {
        let f = design_fir(FilterKind::LINE_NOTCH, 1000.0, 201).unwrap();
        let mut data = Array2::from_shape_fn((3, 500), |(r, c)| ((r * 31 + c * 17) % 23) as f64);
        let expected: Vec<Vec<f64>> =
            data.rows().into_iter().map(|r| f.filter_zero_phase(r.as_slice().unwrap()).unwrap()).collect();
        f.filter_rows(&mut data).unwrap();
        for (row, e) in data.rows().into_iter().zip(&expected) {
            for (a, b) in row.iter().zip(e) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn five_hertz_passes_without_phase_shift() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, DEFAULT_TAPS).unwrap();
        let x = sine(5.0, 6000, 0.3);
        let y = f.filter_zero_phase(&x).unwrap();
        let mid = &y[2000..4000];
        let xm = &x[2000..4000];
        // least-squares fit y = a sin + b cos over the steady-state segment
        let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, &v) in mid.iter().enumerate() {
            let t = 2.0 * PI * 5.0 * (i + 2000) as f64 / 1000.0 + 0.3;
            let (s, c) = t.sin_cos();
            ss += s * s;
            sc += s * c;
            cc += c * c;
            ys += v * s;
            yc += v * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        let amp = (a * a + b * b).sqrt();
        let phase = b.atan2(a);
        assert!((amp - 1.0).abs() < 0.02, "amplitude {amp}");
        assert!(phase.abs() < 1e-3, "phase {phase}");
        assert!(mid.iter().zip(xm).all(|(a, b)| (a - b).abs() < 0.03));
    }

    #[test]
    fn fifty_hertz_removed_by_notch() {
        let f = design_fir(FilterKind::LINE_NOTCH, 1000.0, DEFAULT_TAPS).unwrap();
        let y = f.filter_zero_phase(&sine(50.0, 6000, 1.0)).unwrap();
        let peak = y[1500..4500].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.05, "residual {peak}");
    }

    #[test]
    fn zeros_stay_zero() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, 501).unwrap();
        assert!(f.filter_zero_phase(&vec![0.0; 1000]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        let f = design_fir(FilterKind::EEG_BANDPASS, 1000.0, 501).unwrap();
        assert!(f.filter_zero_phase(&vec![1.0; 501]).is_err());
        assert!(f.filter_zero_phase(&vec![1.0; 502]).is_ok());
    }

    #[test]
    fn fast_lengths() {
        assert_eq!(next_fast_len(4403), 4500);
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(1), 1);
    }
}
