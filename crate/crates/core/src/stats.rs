//! ERP measurement, variability and the classical tests used to compare
//! sessions.
//!
//! Student-t tail probabilities use the closed finite series for integer
//! degrees of freedom; the Wilcoxon signed-rank test is exact (by counting
//! sign patterns over the observed, possibly tied, ranks) up to 12 nonzero
//! differences and normal-approximated with tie correction above that.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};
use crate::synth::p300_template;

/// P300 peak search window in ms after onset.
pub const PEAK_WINDOW_MS: (f64, f64) = (200.0, 500.0);
pub const EXACT_WILCOXON_MAX_N: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpMeasurement {
    pub peak_amp_uv: f64,
    pub peak_latency_ms: f64,
    pub channel: String,
}

/// Largest value in [200, 500] ms; earliest sample wins ties.
///
/// `t0_ms` is the time of sample 0 relative to stimulus onset.
pub fn measure_p300(waveform: &[f64], t0_ms: f64, fs_hz: f64) -> Result<ErpMeasurement> {
    if !(fs_hz > 0.0) || !t0_ms.is_finite() {
        return Err(BciError::InvalidParameter("measure_p300 needs fs > 0 and a finite t0".into()));
    }
    let dt = 1000.0 / fs_hz;
    let eps = 1e-9 * dt;
    let mut best: Option<(f64, f64)> = None;
    for (i, &v) in waveform.iter().enumerate() {
        let t = t0_ms + i as f64 * dt;
        if t < PEAK_WINDOW_MS.0 - eps || t > PEAK_WINDOW_MS.1 + eps {
            continue;
        }
        if !v.is_finite() {
            return Err(BciError::NonFinite("ERP waveform"));
        }
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, t));
        }
    }
    let (peak_amp_uv, peak_latency_ms) =
        best.ok_or_else(|| BciError::InvalidParameter("waveform does not cover the 200..500 ms window".into()))?;
    Ok(ErpMeasurement { peak_amp_uv, peak_latency_ms, channel: crate::pipeline::ERP_CHANNEL.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cv {
    /// Population sd over |mean|.
    pub value: f64,
    pub mean: f64,
    pub sd: f64,
    /// The mean was negative and its absolute value was used.
    pub negative_mean: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BciError::NonFinite(what))
    }
}

pub fn coefficient_of_variation(values: &[f64]) -> Result<Cv> {
    if values.is_empty() {
        return Err(BciError::InvalidParameter("coefficient of variation of an empty series".into()));
    }
    check_finite(values, "CV input")?;
    let m = mean(values);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || m.abs() <= 1e-12 * scale {
        return Err(BciError::Undefined("coefficient of variation with zero mean"));
    }
    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    Ok(Cv { value: sd / m.abs(), mean: m, sd, negative_mean: m < 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub r: f64,
    pub r_squared: f64,
    /// Two-tailed, t-distribution with n - 2 df.
    pub p_value: f64,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(BciError::Shape(format!("pearson on {} vs {} values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(BciError::InvalidParameter(format!("pearson needs n >= 3, got {n}")));
    }
    check_finite(xs, "pearson input")?;
    check_finite(ys, "pearson input")?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(BciError::Undefined("pearson correlation with zero variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as u32;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df as f64 / (1.0 - r * r)).sqrt();
        student_t_two_tailed(t, df)
    };
    Ok(Correlation { n, r, r_squared: r * r, p_value })
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
///
/// With θ = atan(|t| / √ν), P(|T| < |t|) is a finite trigonometric series
/// (odd ν: 2/π [θ + sin θ Σ]; even ν: sin θ Σ).
pub fn student_t_two_tailed(t: f64, df: u32) -> f64 {
    assert!(df >= 1, "student t needs df >= 1");
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let nu = df as f64;
    let theta = (t.abs() / nu.sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    let inside = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 2.0;
            while k <= nu - 3.0 + 0.5 {
                term *= c2 * k / (k + 1.0);
                sum += term;
                k += 2.0;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while k <= nu - 3.0 + 0.5 {
            term *= c2 * k / (k + 1.0);
            sum += term;
            k += 2.0;
        }
        s * sum
    };
    (1.0 - inside).clamp(0.0, 1.0)
}

/// Standard normal upper tail P(Z >= z).
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub t: f64,
    pub df: u32,
    pub p_value: f64,
    pub mean_difference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences used.
    pub n_used: usize,
    pub exact: bool,
    /// P(W+ >= observed).
    pub p_upper: f64,
    /// P(W+ <= observed).
    pub p_lower: f64,
    pub p_two_tailed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityScreen {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Jarque-Bera statistic and its chi-square(2) tail probability.
    pub jarque_bera: f64,
    pub p_value: f64,
    pub plausibly_normal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub n: usize,
    pub t_test: PairedT,
    /// Absent when every difference is zero.
    pub wilcoxon: Option<Wilcoxon>,
    /// Absent when the differences have zero variance.
    pub normality: Option<NormalityScreen>,
}

pub fn paired_tests(a: &[f64], b: &[f64]) -> Result<PairedTests> {
    if a.len() != b.len() {
        return Err(BciError::Shape(format!("paired tests on {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 5 {
        return Err(BciError::InvalidParameter(format!("paired tests need n >= 5, got {}", a.len())));
    }
    check_finite(a, "paired test input")?;
    check_finite(b, "paired test input")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(PairedTests {
        n: d.len(),
        t_test: paired_t(&d),
        wilcoxon: wilcoxon_signed_rank(&d).ok(),
        normality: normality_screen(&d),
    })
}

fn paired_t(d: &[f64]) -> PairedT {
    let n = d.len() as f64;
    let m = mean(d);
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let df = d.len() as u32 - 1;
    let (t, p_value) = if var == 0.0 {
        if m == 0.0 {
            (0.0, 1.0)
        } else {
            (m.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = m / (var / n).sqrt();
        (t, student_t_two_tailed(t, df))
    };
    PairedT { t, df, p_value, mean_difference: m }
}

/// Average ranks of |d| over the nonzero differences, doubled so they stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // positions i..=j (1-based i+1..=j+1) share rank (i+1 + j+1)/2
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

pub fn wilcoxon_signed_rank(d: &[f64]) -> Result<Wilcoxon> {
    check_finite(d, "wilcoxon input")?;
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Err(BciError::Undefined("wilcoxon signed-rank with all-zero differences"));
    }
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let n = nz.len();
    let total2: u64 = ranks.iter().sum();
    let w_plus2: u64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let (p_upper, p_lower, exact) = if n <= EXACT_WILCOXON_MAX_N {
        // counts[s] = number of sign patterns whose doubled positive-rank sum is s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &ranks {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all = (1u64 << n) as f64;
        let upper: u64 = counts[w_plus2 as usize..].iter().sum();
        let lower: u64 = counts[..=w_plus2 as usize].iter().sum();
        (upper as f64 / all, lower as f64 / all, true)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let mut tie = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
            let t = j as f64;
            tie += t * t * t - t;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = (w_plus - mu) / var.sqrt();
        (normal_upper_tail(z), normal_upper_tail(-z), false)
    };
    Ok(Wilcoxon {
        w_plus,
        w_minus,
        n_used: n,
        exact,
        p_upper,
        p_lower,
        p_two_tailed: (2.0 * p_upper.min(p_lower)).min(1.0),
    })
}

/// Skewness/kurtosis screen on the differences. Recorded only; choosing
/// between the t and signed-rank tests is left to the caller.
pub fn normality_screen(d: &[f64]) -> Option<NormalityScreen> {
    let n = d.len() as f64;
    let m = mean(d);
    let m2 = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return None;
    }
    let m3 = d.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    let m4 = d.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let jarque_bera = n / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0);
    let p_value = (-jarque_bera / 2.0).exp();
    Some(NormalityScreen { skewness, excess_kurtosis, jarque_bera, p_value, plausibly_normal: p_value >= 0.05 })
}

/// Injected peak amplitude minus the measured peak of an `n_fold` average
/// of templates whose latencies are jittered with sd `jitter_sd_ms`.
///
/// Averaging misaligned peaks flattens them, so the averaged measurement
/// under-reads the single-trial amplitude by an amount that shrinks to zero
/// as the jitter does.
pub fn averaged_peak_deficit(
    amp_uv: f64,
    latency_ms: f64,
    width_ms: f64,
    jitter_sd_ms: f64,
    n_fold: usize,
    seed: u64,
) -> Result<f64> {
    if n_fold == 0 {
        return Err(BciError::InvalidParameter("n_fold must be positive".into()));
    }
    let jitter = Normal::new(0.0, jitter_sd_ms).map_err(|e| BciError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut avg: Vec<f64> = Vec::new();
    for _ in 0..n_fold {
        let lat = (latency_ms + jitter.sample(&mut rng)).clamp(1.0, 699.0);
        let t = p300_template(amp_uv, lat, width_ms, 1000.0)?;
        if avg.is_empty() {
            avg = vec![0.0; t.len()];
        }
        avg.iter_mut().zip(&t).for_each(|(a, b)| *a += b / n_fold as f64);
    }
    Ok(amp_uv - measure_p300(&avg, 0.0, 1000.0)?.peak_amp_uv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn peak_of_injected_template() {
        let w = p300_template(7.2, 373.0, 150.0, 1000.0).unwrap();
        let m = measure_p300(&w, 0.0, 1000.0).unwrap();
        assert_abs_diff_eq!(m.peak_amp_uv, 7.2, epsilon = 1e-9);
        assert!((m.peak_latency_ms - 373.0).abs() <= 1.0);
        assert_eq!(m.channel, "Cz");
    }

    #[test]
    fn peak_tie_breaks() {
        let flat = vec![0.0; 801];
        let m = measure_p300(&flat, -100.0, 1000.0).unwrap();
        assert_eq!((m.peak_amp_uv, m.peak_latency_ms), (0.0, 200.0));
        let mut two = vec![0.0; 801];
        two[350] = 3.0; // 250 ms
        two[550] = 3.0; // 450 ms
        assert_eq!(measure_p300(&two, -100.0, 1000.0).unwrap().peak_latency_ms, 250.0);
        // 100 Hz waveform from the decimated pipeline
        let mut dec = vec![0.0; 81];
        dec[47] = 1.0;
        assert_eq!(measure_p300(&dec, -100.0, 100.0).unwrap().peak_latency_ms, 370.0);
        assert!(measure_p300(&vec![1.0; 100], -100.0, 1000.0).is_err());
    }

    #[test]
    fn cv_cases() {
        assert_eq!(coefficient_of_variation(&[4.0, 4.0, 4.0]).unwrap().value, 0.0);
        assert_abs_diff_eq!(coefficient_of_variation(&[1.0, 3.0]).unwrap().value, 0.5, epsilon = 1e-15);
        let neg = coefficient_of_variation(&[-1.0, -3.0]).unwrap();
        assert!(neg.negative_mean);
        assert_abs_diff_eq!(neg.value, 0.5, epsilon = 1e-15);
        assert!(matches!(coefficient_of_variation(&[-1.0, 1.0]), Err(BciError::Undefined(_))));
        assert!(coefficient_of_variation(&[]).is_err());
    }

    #[test]
    fn pearson_exact_lines() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        let c = pearson(&xs, &up).unwrap();
        assert_abs_diff_eq!(c.r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.r_squared, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&xs, &down).unwrap().r, -1.0, epsilon = 1e-12);
        assert!(matches!(pearson(&xs, &[1.0; 10]), Err(BciError::Undefined(_))));
        assert!(pearson(&xs[..2], &up[..2]).is_err());
    }

    #[test]
    fn pearson_fixed_table_matches_direct_formula() {
        let xs = [2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 6.1, 2.8, 4.9, 5.2];
        let ys = [1.2, 2.9, 1.1, 4.2, 3.9, 2.2, 5.0, 2.6, 3.1, 4.8];
        // Σxy form, computed independently of the centred form in `pearson`.
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let c = pearson(&xs, &ys).unwrap();
        assert_abs_diff_eq!(c.r, r, epsilon = 1e-12);
        let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
        let reference = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 2.0).unwrap().cdf(t.abs()));
        assert_abs_diff_eq!(c.p_value, reference, epsilon = 1e-10);
    }

    #[test]
    fn t_tail_series_against_reference() {
        for df in 1..=60u32 {
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            for &t in &[0.0, 0.05, 0.3, 1.0, 1.96, 2.5, 4.0, 9.0, 40.0, -2.2] {
                let reference = 2.0 * dist.cdf(-(t as f64).abs());
                let ours = student_t_two_tailed(t, df);
                assert!((ours - reference).abs() < 1e-10, "df {df} t {t}: {ours} vs {reference}");
            }
        }
        assert_eq!(student_t_two_tailed(f64::INFINITY, 3), 0.0);
        assert_abs_diff_eq!(student_t_two_tailed(0.0, 7), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn paired_equal_samples() {
        let a = [1.0, 2.5, 3.0, 4.2, 5.1];
        let r = paired_tests(&a, &a).unwrap();
        assert_eq!((r.t_test.t, r.t_test.p_value), (0.0, 1.0));
        assert!(r.wilcoxon.is_none());
        assert!(r.normality.is_none());
        assert!(paired_tests(&a[..4], &a[..4]).is_err());
    }

    #[test]
    fn wilcoxon_all_positive_exact() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert_eq!(w.w_plus, 15.0);
        assert!(w.exact);
        // Enumerate the 2^5 sign patterns directly.
        let mut hits = 0;
        for mask in 0u32..32 {
            let s: u32 = (0..5).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).sum();
            if s >= 15 {
                hits += 1;
            }
        }
        assert_eq!(hits, 1);
        assert_eq!(w.p_upper, 1.0 / 32.0);
        assert_eq!(w.p_two_tailed, 2.0 / 32.0);
    }

    #[test]
    fn symmetric_differences_give_zero_t() {
        let a = [0.0, 2.0, 0.0, 2.0, 0.0, 2.0];
        let b = [1.0; 6];
        let r = paired_tests(&a, &b).unwrap();
        assert_eq!(r.t_test.t, 0.0);
        assert_abs_diff_eq!(r.t_test.p_value, 1.0, epsilon = 1e-12);
        let w = r.wilcoxon.unwrap();
        assert_eq!(w.w_plus, w.w_minus);
    }

    #[test]
    fn wilcoxon_ties_exact_matches_brute_force() {
        let d = [0.5, -0.5, 1.0, 2.0, 2.0, -3.0, 0.0, 4.0];
        let w = wilcoxon_signed_rank(&d).unwrap();
        let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
        // average ranks of |d|: 0.5,0.5 -> 1.5; 1 -> 3; 2,2 -> 4.5; 3 -> 6; 4 -> 7
        let ranks = [1.5, 1.5, 3.0, 4.5, 4.5, 6.0, 7.0];
        let observed: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        assert_eq!(w.w_plus, observed);
        let mut ge = 0;
        for mask in 0u32..128 {
            let s: f64 = (0..7).filter(|b| mask & (1 << b) != 0).map(|b| ranks[b]).sum();
            if s >= observed - 1e-12 {
                ge += 1;
            }
        }
        assert_eq!(w.p_upper, ge as f64 / 128.0);
    }

    #[test]
    fn wilcoxon_normal_approximation_reference() {
        // scipy.stats.wilcoxon(d, method="approx", correction=False)
        let d: Vec<f64> = (1..=20).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert!(!w.exact);
        assert_eq!(w.w_plus, 147.0);
        let mu = 105.0;
        let sd: f64 = (20.0 * 21.0 * 41.0 / 24.0f64).sqrt();
        let z = (147.0 - mu) / sd;
        assert_abs_diff_eq!(w.p_two_tailed, 2.0 * normal_upper_tail(z), epsilon = 1e-15);
        assert_abs_diff_eq!(w.p_two_tailed, 0.11688763780953301, epsilon = 1e-12);
    }

    #[test]
    fn paired_t_reference() {
        // scipy.stats.ttest_rel
        let a = [5.1, 4.8, 6.0, 5.5, 5.9, 6.3, 4.7];
        let b = [4.9, 4.1, 5.2, 5.6, 5.0, 5.8, 4.5];
        let r = paired_tests(&a, &b).unwrap();
        assert_abs_diff_eq!(r.t_test.t, 3.2773859615948107, epsilon = 1e-12);
        assert_abs_diff_eq!(r.t_test.p_value, 0.01687762632796276, epsilon = 1e-10);
        assert!(r.normality.is_some());
    }

    #[test]
    fn jitter_deficit_decreases_with_jitter() {
        let levels = [60.0, 30.0, 10.0];
        let means: Vec<f64> = levels
            .iter()
            .map(|&j| {
                (0..200u64).map(|s| averaged_peak_deficit(7.2, 373.0, 150.0, j, 4, s).unwrap()).sum::<f64>() / 200.0
            })
            .collect();
        assert!(means.iter().all(|&m| m > 0.0), "{means:?}");
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    proptest! {
        #[test]
        fn cv_scale_invariant(xs in prop::collection::vec(0.5f64..50.0, 2..30), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let a = coefficient_of_variation(&xs).unwrap().value;
            let b = coefficient_of_variation(&scaled).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12) + 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..25),
            a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            prop_assume!(pearson(&xs, &ys).is_ok());
            let r0 = pearson(&xs, &ys).unwrap().r;
            let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let yt: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
            let r1 = pearson(&xt, &yt).unwrap().r;
            prop_assert!((r0 - r1).abs() < 1e-9);
        }
    }
}
