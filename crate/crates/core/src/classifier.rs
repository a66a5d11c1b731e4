//! Feature standardisation, a linear soft-margin SVM trained by dual
//! coordinate descent, and the composed decoder (xDAWN + standardiser + SVM).
//!
//! The bias is learned as the weight of a constant feature of value
//! `INTERCEPT_SCALING`, which keeps its regularisation weak. Each instance's
//! box bound is `C / (2 n_y)` where `n_y` is the size of its class: the loss
//! is the class-balanced mean hinge, each class carrying total weight `C / 2`.
//! Duplicating every point therefore leaves the objective, and the solution,
//! unchanged at the same `C`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};
use crate::stim::VibratorId;
use crate::xdawn::{apply_filters, fit_xdawn, SpatialFilterBank};

pub const SD_FLOOR: f64 = 1e-9;
pub const SVM_TOLERANCE: f64 = 1e-8;
pub const SVM_MAX_SWEEPS: usize = 100_000;
pub const AVERAGE_WINDOW: usize = 4;
pub const INTERCEPT_SCALING: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Per-column mean and population standard deviation of `x` (samples x features).
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(BciError::InvalidParameter("standardizer needs at least 2 samples".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BciError::NonFinite("features"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let sd = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(SD_FLOOR));
        Ok(Self { mean: mean.to_vec(), sd: sd.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(BciError::Shape(format!("feature length {} != {}", x.len(), self.len())));
        }
        Ok(x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect())
    }

    pub fn apply_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.len() {
            return Err(BciError::Shape(format!("feature length {} != {}", x.ncols(), self.len())));
        }
        let mean = Array1::from(self.mean.clone());
        let sd = Array1::from(self.sd.clone());
        Ok((x - &mean) / &sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub decision_threshold: f64,
}

impl LinearSvmModel {
    pub fn decision_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(BciError::Shape(format!("feature length {} != {}", x.len(), self.weights.len())));
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    pub fn detect(&self, score: f64) -> bool {
        score > self.decision_threshold
    }

    /// Weights and bias acting on unstandardised features.
    pub fn compose(&self, st: &Standardizer) -> Result<(Vec<f64>, f64)> {
        if st.len() != self.weights.len() {
            return Err(BciError::Shape("standardizer and model lengths differ".into()));
        }
        let w: Vec<f64> = self.weights.iter().zip(&st.sd).map(|(w, s)| w / s).collect();
        let b = self.bias - w.iter().zip(&st.mean).map(|(w, m)| w * m).sum::<f64>();
        Ok((w, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub sweeps: usize,
    pub converged: bool,
    pub max_projected_gradient: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub duality_gap: f64,
    /// Dual objective (maximisation form) after each sweep.
    pub dual_trace: Vec<f64>,
    pub alphas: Vec<f64>,
    pub bounds: Vec<f64>,
}

/// Class-balanced box bounds `C / (2 n_y)`.
pub fn box_bounds(y: &[f64], c: f64) -> Result<Vec<f64>> {
    let n_pos = y.iter().filter(|&&v| v > 0.0).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(BciError::SingleClass);
    }
    Ok(y.iter().map(|&v| if v > 0.0 { c / (2.0 * n_pos as f64) } else { c / (2.0 * n_neg as f64) }).collect())
}

/// Primal objective ½‖w‖² + ½(b/B)² + Σ U_i max(0, 1 - y_i (wᵀx_i + b)),
/// B being the intercept scaling.
pub fn primal_objective(x: &Array2<f64>, y: &[f64], bounds: &[f64], w: &[f64], b: f64, scaling: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + (b / scaling).powi(2));
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .zip(bounds)
        .map(|((row, &yi), &u)| {
            let f = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            u * (1.0 - yi * f).max(0.0)
        })
        .sum();
    reg + hinge
}

/// Train with labels +1 (target) / -1 (non-target).
pub fn train_linear_svm(x: &Array2<f64>, y: &[f64], c: f64) -> Result<(LinearSvmModel, TrainReport)> {
    train_linear_svm_scaled(x, y, c, INTERCEPT_SCALING)
}

/// As [`train_linear_svm`] with an explicit intercept scaling: the bias is
/// learned as the weight of a constant feature of value `scaling`, so larger
/// values regularise it less.
pub fn train_linear_svm_scaled(x: &Array2<f64>, y: &[f64], c: f64, scaling: f64) -> Result<(LinearSvmModel, TrainReport)> {
    let (n, d) = x.dim();
    if !(scaling.is_finite() && scaling > 0.0) {
        return Err(BciError::InvalidParameter(format!("intercept scaling must be positive, got {scaling}")));
    }
    if y.len() != n {
        return Err(BciError::Shape(format!("{n} samples but {} labels", y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(BciError::InvalidParameter("labels must be +1 or -1".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(BciError::InvalidParameter(format!("C must be positive, got {c}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BciError::NonFinite("features"));
    }
    let bounds = box_bounds(y, c)?;
    // Row-major copy with the constant bias feature appended.
    let stride = d + 1;
    let mut xt = vec![scaling; n * stride];
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            xt[i * stride + j] = v;
        }
    }
    let qii: Vec<f64> = (0..n).map(|i| xt[i * stride..(i + 1) * stride].iter().map(|v| v * v).sum()).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; stride];
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut max_pg = f64::INFINITY;
    while sweeps < SVM_MAX_SWEEPS {
        sweeps += 1;
        max_pg = 0.0;
        for i in 0..n {
            let xi = &xt[i * stride..(i + 1) * stride];
            let g = y[i] * xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= bounds[i] {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 && qii[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, bounds[i]);
                let delta = (alpha[i] - old) * y[i];
                if delta != 0.0 {
                    for (wj, &xj) in w.iter_mut().zip(xi) {
                        *wj += delta * xj;
                    }
                }
            }
        }
        let wn: f64 = w.iter().map(|v| v * v).sum();
        trace.push(alpha.iter().sum::<f64>() - 0.5 * wn);
        if max_pg < SVM_TOLERANCE {
            break;
        }
    }
    let weights = w[..d].to_vec();
    let bias = w[d] * scaling;
    let primal = primal_objective(x, y, &bounds, &weights, bias, scaling);
    let dual = *trace.last().expect("at least one sweep");
    let model = LinearSvmModel { weights, bias, c, decision_threshold: 0.0 };
    let report = TrainReport {
        sweeps,
        converged: max_pg < SVM_TOLERANCE,
        max_projected_gradient: max_pg,
        primal_objective: primal,
        dual_objective: dual,
        duality_gap: primal - dual,
        dual_trace: trace,
        alphas: alpha,
        bounds,
    };
    Ok((model, report))
}

/// Largest violation of the KKT complementarity conditions.
pub fn kkt_violation(model: &LinearSvmModel, x: &Array2<f64>, y: &[f64], report: &TrainReport) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in x.rows().into_iter().enumerate() {
        let f = row.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>() + model.bias;
        let m = y[i] * f;
        let (a, u) = (report.alphas[i], report.bounds[i]);
        let v = if a <= 0.0 {
            (1.0 - m).max(0.0)
        } else if a >= u {
            (m - 1.0).max(0.0)
        } else {
            (m - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Sliding averages of four consecutive same-vibrator epochs.
    Averaged,
    SingleTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Zero,
    /// Threshold maximising balanced accuracy on 3-fold-by-run held-out scores.
    BalancedCv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub n_filters: usize,
    pub c: f64,
    pub training: TrainingMode,
    pub threshold: ThresholdMode,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            n_filters: crate::xdawn::DEFAULT_N_FILTERS,
            c: 1.0,
            training: TrainingMode::Averaged,
            threshold: ThresholdMode::Zero,
        }
    }
}

/// One preprocessed calibration epoch: decoding channels x 40 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEpoch {
    pub run: usize,
    pub round: usize,
    pub vibrator: VibratorId,
    pub is_target: bool,
    pub window: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub channel_names: Vec<String>,
    pub bank: SpatialFilterBank,
    pub standardizer: Standardizer,
    pub svm: LinearSvmModel,
    pub options: CalibrationOptions,
    pub config_hash: String,
}

impl DecoderModel {
    /// Flattened filtered features (filter-major) of one window.
    pub fn features(&self, window: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(apply_filters(window, &self.bank)?.iter().copied().collect())
    }

    /// Score an already spatially filtered (n_filters x 40) window.
    pub fn score_filtered(&self, filtered: &Array2<f64>) -> Result<f64> {
        let z = self.standardizer.apply(filtered.as_slice().ok_or_else(|| BciError::Shape("non-contiguous".into()))?)?;
        self.svm.decision_score(&z)
    }

    pub fn score(&self, window: &Array2<f64>) -> Result<f64> {
        let z = self.standardizer.apply(&self.features(window)?)?;
        self.svm.decision_score(&z)
    }

    pub fn detect(&self, score: f64) -> bool {
        self.svm.detect(score)
    }
}

/// Training instances (features, label) from filtered epochs.
///
/// Epochs are grouped by run and vibrator in round order. Averaged mode
/// yields one instance per full sliding window of four.
pub fn build_instances(filtered: &[(CalibrationEpoch, Array2<f64>)], mode: TrainingMode) -> (Array2<f64>, Vec<f64>, Vec<usize>) {
    let mut groups: std::collections::BTreeMap<(usize, VibratorId), Vec<&(CalibrationEpoch, Array2<f64>)>> =
        Default::default();
    for item in filtered {
        groups.entry((item.0.run, item.0.vibrator)).or_default().push(item);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut runs = Vec::new();
    for ((run, _), mut items) in groups {
        items.sort_by_key(|e| e.0.round);
        let width = match mode {
            TrainingMode::Averaged => AVERAGE_WINDOW,
            TrainingMode::SingleTrial => 1,
        };
        if items.len() < width {
            continue;
        }
        for start in 0..=items.len() - width {
            let slice = &items[start..start + width];
            let mut acc = slice[0].1.clone();
            for e in &slice[1..] {
                acc += &e.1;
            }
            acc /= width as f64;
            rows.push(acc.iter().copied().collect());
            labels.push(if slice[0].0.is_target { 1.0 } else { -1.0 });
            runs.push(run);
        }
    }
    let d = rows.first().map_or(0, |r| r.len());
    let x = Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect()).expect("consistent rows");
    (x, labels, runs)
}

fn fit_head(x: &Array2<f64>, y: &[f64], c: f64) -> Result<(Standardizer, LinearSvmModel, TrainReport)> {
    let st = Standardizer::fit(x)?;
    let z = st.apply_rows(x)?;
    let (svm, report) = train_linear_svm(&z, y, c)?;
    Ok((st, svm, report))
}

/// Threshold maximising balanced accuracy over held-out scores.
pub fn balanced_threshold(scores: &[f64], labels: &[f64]) -> f64 {
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l > 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = pairs.iter().filter(|p| p.1).count() as f64;
    let n_neg = pairs.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.0;
    }
    // Threshold below everything: all detected.
    let (mut tp, mut tn) = (n_pos, 0.0);
    let mut best = (0.5 * (tp / n_pos + tn / n_neg), pairs[0].0 - 1.0);
    for i in 0..pairs.len() {
        if pairs[i].1 {
            tp -= 1.0;
        } else {
            tn += 1.0;
        }
        if i + 1 < pairs.len() && pairs[i + 1].0 == pairs[i].0 {
            continue;
        }
        let t = if i + 1 < pairs.len() { 0.5 * (pairs[i].0 + pairs[i + 1].0) } else { pairs[i].0 + 1.0 };
        let bacc = 0.5 * (tp / n_pos + tn / n_neg);
        if bacc > best.0 {
            best = (bacc, t);
        }
    }
    best.1
}

/// Fit xDAWN, the standardiser and the SVM on preprocessed calibration epochs.
pub fn calibrate(
    epochs: &[CalibrationEpoch],
    channel_names: &[String],
    options: &CalibrationOptions,
    config_hash: &str,
) -> Result<(DecoderModel, TrainReport)> {
    if epochs.iter().any(|e| e.window.nrows() != channel_names.len()) {
        return Err(BciError::Shape("calibration windows do not match channel list".into()));
    }
    let targets: Vec<Array2<f64>> = epochs.iter().filter(|e| e.is_target).map(|e| e.window.clone()).collect();
    let all: Vec<Array2<f64>> = epochs.iter().map(|e| e.window.clone()).collect();
    if targets.is_empty() || targets.len() == all.len() {
        return Err(BciError::SingleClass);
    }
    let bank = fit_xdawn(&targets, &all, options.n_filters)?;
    let filtered: Vec<(CalibrationEpoch, Array2<f64>)> = epochs
        .iter()
        .map(|e| Ok((e.clone(), apply_filters(&e.window, &bank)?)))
        .collect::<Result<_>>()?;
    let (x, y, runs) = build_instances(&filtered, options.training);
    let (standardizer, mut svm, report) = fit_head(&x, &y, options.c)?;
    if options.threshold == ThresholdMode::BalancedCv {
        let mut held_scores = Vec::new();
        let mut held_labels = Vec::new();
        for fold in 0..3 {
            let train: Vec<usize> = (0..runs.len()).filter(|&i| runs[i] % 3 != fold).collect();
            let test: Vec<usize> = (0..runs.len()).filter(|&i| runs[i] % 3 == fold).collect();
            if test.is_empty() {
                continue;
            }
            let xt = x.select(Axis(0), &train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let (st, m, _) = fit_head(&xt, &yt, options.c)?;
            for &i in &test {
                let z = st.apply(&x.row(i).to_vec())?;
                held_scores.push(m.decision_score(&z)?);
                held_labels.push(y[i]);
            }
        }
        svm.decision_threshold = balanced_threshold(&held_scores, &held_labels);
    }
    Ok((
        DecoderModel {
            channel_names: channel_names.to_vec(),
            bank,
            standardizer,
            svm,
            options: options.clone(),
            config_hash: config_hash.to_string(),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardizer_hand_case() {
        let x = array![[0.0], [2.0]];
        let st = Standardizer::fit(&x).unwrap();
        assert_eq!(st.mean, vec![1.0]);
        assert_eq!(st.sd, vec![1.0]);
        assert_eq!(st.apply_rows(&x).unwrap(), array![[-1.0], [1.0]]);
    }

    #[test]
    fn standardizer_constant_column_and_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((50, 3), |(_, j)| if j == 1 { 4.0 } else { rng.random::<f64>() * 10.0 });
        let st = Standardizer::fit(&x).unwrap();
        assert_eq!(st.sd[1], SD_FLOOR);
        let z = st.apply_rows(&x).unwrap();
        assert!(z.column(1).iter().all(|v| v.abs() < 1e-6));
        let again = Standardizer::fit(&z).unwrap();
        for j in [0, 2] {
            assert!(again.mean[j].abs() < 1e-9);
            assert!((again.sd[j] - 1.0).abs() < 1e-6);
        }
        assert!(Standardizer::fit(&array![[1.0]]).is_err());
    }

    #[test]
    fn hard_margin_one_dimension() {
        let x = array![[-1.0], [1.0]];
        let y = [-1.0, 1.0];
        let (m, r) = train_linear_svm(&x, &y, 1e6).unwrap();
        assert!(r.converged);
        assert!((m.weights[0] - 1.0).abs() < 1e-6, "{:?}", m);
        assert!(m.bias.abs() < 1e-6);
        assert!((2.0 / m.weights[0] - 2.0).abs() < 1e-6);
        for (row, &yi) in x.rows().into_iter().zip(&y) {
            let s = m.decision_score(&row.to_vec()).unwrap();
            assert!((s * yi - 1.0).abs() < 1e-6);
        }
        assert_eq!(m.decision_score(&[0.0]).unwrap(), m.bias);
    }

    #[test]
    fn duplication_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..30).map(|i| if x[[i, 0]] + 0.3 * x[[i, 1]] > 0.1 { 1.0 } else { -1.0 }).collect();
        let (a, _) = train_linear_svm(&x, &y, 5.0).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let (b, _) = train_linear_svm(&x2, &y2, 5.0).unwrap();
        for (p, q) in a.weights.iter().zip(&b.weights) {
            assert!((p - q).abs() < 1e-6);
        }
        assert!((a.bias - b.bias).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..60).map(|i| if x[[i, 2]] > 0.2 { 1.0 } else { -1.0 }).collect();
        let (a, ra) = train_linear_svm(&x, &y, 10.0).unwrap();
        let (b, _) = train_linear_svm(&x, &y, 10.0).unwrap();
        assert_eq!(a, b);
        assert!(kkt_violation(&a, &x, &y, &ra) < 1e-6);
        assert!(ra.duality_gap >= -1e-12);
        assert!(ra.duality_gap <= 1e-6 * ra.primal_objective.abs().max(1e-12));
        assert!(ra.dual_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn training_errors() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(train_linear_svm(&x, &[1.0, 1.0], 1.0), Err(BciError::SingleClass)));
        assert!(train_linear_svm(&array![[f64::NAN], [1.0]], &[1.0, -1.0], 1.0).is_err());
        assert!(train_linear_svm(&x, &[1.0, -1.0], 0.0).is_err());
    }

    #[test]
    fn compose_matches_standardized_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((40, 3), |(_, j)| rng.random::<f64>() * (j + 1) as f64 * 5.0 + 3.0);
        let y: Vec<f64> = (0..40).map(|i| if x[[i, 1]] > 8.0 { 1.0 } else { -1.0 }).collect();
        let st = Standardizer::fit(&x).unwrap();
        let (m, _) = train_linear_svm(&st.apply_rows(&x).unwrap(), &y, 1.0).unwrap();
        let (w, b) = m.compose(&st).unwrap();
        for row in x.rows() {
            let direct = m.decision_score(&st.apply(&row.to_vec()).unwrap()).unwrap();
            let composed = w.iter().zip(row).map(|(a, v)| a * v).sum::<f64>() + b;
            assert!((direct - composed).abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_threshold_never_detects() {
        let m = LinearSvmModel { weights: vec![1.0], bias: 0.0, c: 1.0, decision_threshold: f64::INFINITY };
        assert!(!m.detect(1e300));
        let m = LinearSvmModel { decision_threshold: 0.0, ..m };
        assert!(m.detect(1e-12));
        assert!(!m.detect(0.0));
    }

    #[test]
    fn balanced_threshold_separates() {
        let scores = [-2.0, -1.5, -1.0, 0.4, 0.6, 2.0];
        let labels = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let t = balanced_threshold(&scores, &labels);
        assert!(t > -1.0 && t < 0.4, "{t}");
    }
}
