//! Training losses, segmentation overlap, detection rates and binomial intervals.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::inv_beta_reg;

use crate::error::{Error, Result};
use crate::labels::LesionCategory;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

/// Per-class sample counts. For binary tasks index 0 is negative, index 1 positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub counts: Vec<usize>,
}

impl LabelCounts {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn binary(positives: usize, negatives: usize) -> Self {
        Self {
            counts: vec![negatives, positives],
        }
    }

    /// Counts labels in `0..n_classes`; labels outside that range are an error.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Result<Self> {
        let mut counts = vec![0; n_classes];
        for l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::invalid(format!("label {l} outside 0..{n_classes}")))? += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn require_nonempty(&self) -> Result<usize> {
        match self.total() {
            0 => Err(Error::invalid("label counts are empty (N = 0)")),
            n => Ok(n),
        }
    }
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(EPS, 1.0 - EPS)
}

/// Weight applied to a binary sample: the opposite class's share of the data.
pub fn binary_weight(positive: bool, counts: &LabelCounts) -> Result<f64> {
    let n = counts.require_nonempty()? as f64;
    if counts.counts.len() != 2 {
        return Err(Error::invalid("binary weighting needs exactly two class counts"));
    }
    let other = if positive { counts.counts[0] } else { counts.counts[1] };
    Ok(other as f64 / n)
}

/// Weighted binary cross-entropy of prediction `x` for target `y`.
pub fn wbce(x: f64, y: bool, counts: &LabelCounts) -> Result<f64> {
    let w = binary_weight(y, counts)?;
    let x = clamp_prob(x);
    let ll = if y { x.ln() } else { (1.0 - x).ln() };
    Ok(-w * ll)
}

/// d wbce / dx (zero where the clamp is active).
pub fn wbce_grad(x: f64, y: bool, counts: &LabelCounts) -> Result<f64> {
    let w = binary_weight(y, counts)?;
    if x <= EPS || x >= 1.0 - EPS {
        return Ok(0.0);
    }
    Ok(if y { -w / x } else { w / (1.0 - x) })
}

/// `w_c = (N - N_c) / N` for every class.
pub fn class_weights(counts: &LabelCounts) -> Result<Vec<f64>> {
    let n = counts.require_nonempty()?;
    if counts.counts.iter().any(|&c| c == n) {
        log::warn!("single-class label counts {:?}: that class receives weight 0", counts.counts);
    }
    Ok(counts
        .counts
        .iter()
        .map(|&c| (n - c) as f64 / n as f64)
        .collect())
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid("probability vector has negative or non-finite entries"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("probability vector sums to {s}")));
    }
    Ok(())
}

/// Weighted cross-entropy for a one-hot target `c`.
pub fn wce(probs: &[f64], c: usize, weights: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    if c >= probs.len() || weights.len() != probs.len() {
        return Err(Error::invalid("target or weight vector does not match probability vector"));
    }
    Ok(-weights[c] * clamp_prob(probs[c]).ln())
}

/// Gradient of [`wce`] with respect to each probability entry.
pub fn wce_grad(probs: &[f64], c: usize, weights: &[f64]) -> Result<Vec<f64>> {
    check_probs(probs)?;
    if c >= probs.len() || weights.len() != probs.len() {
        return Err(Error::invalid("target or weight vector does not match probability vector"));
    }
    let mut g = vec![0.0; probs.len()];
    let p = probs[c];
    if p > EPS && p < 1.0 - EPS {
        g[c] = -weights[c] / p;
    }
    Ok(g)
}

fn weights_tensor(w: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(w.to_vec(), w.len(), device)?.to_dtype(dtype)?)
}

/// Batch-mean weighted binary cross-entropy on probabilities `x` of shape `[b]`.
/// `sample_weights[i]` already folds in the class weight and any extra sample weight.
pub fn wbce_loss(x: &Tensor, targets: &[bool], sample_weights: &[f64]) -> Result<Tensor> {
    let b = x.dims1()?;
    if targets.len() != b || sample_weights.len() != b {
        return Err(Error::Shape(format!("batch {b}, {} targets, {} weights", targets.len(), sample_weights.len())));
    }
    let (dtype, dev) = (x.dtype(), x.device());
    let y: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let y = weights_tensor(&y, dtype, dev)?;
    let w = weights_tensor(sample_weights, dtype, dev)?;
    let xc = x.clamp(EPS, 1.0 - EPS)?;
    let pos = y.mul(&xc.log()?)?;
    let neg = y.affine(-1.0, 1.0)?.mul(&xc.affine(-1.0, 1.0)?.log()?)?;
    let per = pos.add(&neg)?.mul(&w)?.neg()?;
    Ok(per.mean_all()?)
}

/// Batch-mean weighted cross-entropy on probability rows `probs` of shape `[b, c]`.
pub fn wce_loss(probs: &Tensor, targets: &[usize], sample_weights: &[f64]) -> Result<Tensor> {
    let (b, c) = probs.dims2()?;
    if targets.len() != b || sample_weights.len() != b || targets.iter().any(|&t| t >= c) {
        return Err(Error::Shape(format!("batch {b}x{c} does not match targets/weights")));
    }
    let (dtype, dev) = (probs.dtype(), probs.device());
    let mut onehot = vec![0.0; b * c];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * c + t] = sample_weights[i];
    }
    let onehot = Tensor::from_vec(onehot, (b, c), dev)?.to_dtype(dtype)?;
    let ll = probs.clamp(EPS, 1.0 - EPS)?.log()?;
    Ok(onehot.mul(&ll)?.sum(1)?.neg()?.mean_all()?)
}

/// Mean per-pixel multiclass cross-entropy of logits `[n, k, h, w]` against labels `[n, h, w]`.
pub fn pixel_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = logits.dims4()?;
    if labels.dims() != [n, h, w] {
        return Err(Error::Shape(format!("labels {:?} vs logits {:?}", labels.dims(), logits.dims())));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let idx = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// Row-wise softmax helper for `[b, c]` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Pooled overlap counts for one label across any number of slices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceTally {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl DiceTally {
    pub fn add(&mut self, pred: &Array2<u8>, truth: &Array2<u8>, c: u8) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", pred.dim(), truth.dim())));
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let (p, t) = (p == c, t == c);
            self.pred += p as u64;
            self.truth += t as u64;
            self.intersection += (p && t) as u64;
        }
        Ok(())
    }

    /// `2|P∩T| / (|P|+|T|)`, 1.0 when both are empty.
    pub fn score(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

/// Dice for label `c` pooled over all voxels of all slices.
pub fn dice(pred: &[Array2<u8>], truth: &[Array2<u8>], c: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} slices", pred.len(), truth.len())));
    }
    let mut tally = DiceTally::default();
    for (p, t) in pred.iter().zip(truth) {
        tally.add(p, t, c)?;
    }
    Ok(tally.score())
}

/// Pooled dice for each lobe label 1..=5 plus their mean.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LobeDice {
    pub tallies: [DiceTally; 5],
}

impl LobeDice {
    pub fn add(&mut self, pred: &[Array2<u8>], truth: &[Array2<u8>]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch(format!("{} vs {} slices", pred.len(), truth.len())));
        }
        for (p, t) in pred.iter().zip(truth) {
            for (i, tally) in self.tallies.iter_mut().enumerate() {
                tally.add(p, t, i as u8 + 1)?;
            }
        }
        Ok(())
    }

    pub fn per_lobe(&self) -> [f64; 5] {
        std::array::from_fn(|i| self.tallies[i].score())
    }

    pub fn mean(&self) -> f64 {
        self.per_lobe().iter().sum::<f64>() / 5.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionTally {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut t = Self::default();
        for (p, a) in pairs {
            t.record(p, a);
        }
        t
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize, what: &str) -> Result<f64> {
    if den == 0 {
        Err(Error::Undefined(format!("{what}: denominator is zero")))
    } else {
        Ok(num as f64 / den as f64)
    }
}

pub fn sensitivity(t: &ConfusionTally) -> Result<f64> {
    ratio(t.tp, t.tp + t.fn_, "sensitivity")
}

pub fn specificity(t: &ConfusionTally) -> Result<f64> {
    ratio(t.tn, t.tn + t.fp, "specificity")
}

pub fn accuracy(t: &ConfusionTally) -> Result<f64> {
    ratio(t.tp + t.tn, t.total(), "accuracy")
}

pub fn binary_metrics(t: &ConfusionTally) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        sensitivity: sensitivity(t)?,
        specificity: specificity(t)?,
        accuracy: accuracy(t)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    #[default]
    ClopperPearson,
    Wilson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
}

/// Two-sided binomial interval for `k` successes out of `n` trials.
pub fn confidence_interval(k: usize, n: usize, level: f64, method: IntervalMethod) -> Result<IntervalEstimate> {
    if n == 0 || k > n {
        return Err(Error::invalid(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0,1)")));
    }
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    let point = kf / nf;
    let (lower, upper) = match method {
        IntervalMethod::ClopperPearson => {
            let lo = if k == 0 {
                0.0
            } else {
                inv_beta_reg(kf, nf - kf + 1.0, alpha / 2.0)
            };
            let hi = if k == n {
                1.0
            } else {
                inv_beta_reg(kf + 1.0, nf - kf, 1.0 - alpha / 2.0)
            };
            (lo, hi)
        }
        IntervalMethod::Wilson => {
            let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
            let z2 = z * z;
            let denom = 1.0 + z2 / nf;
            let center = (point + z2 / (2.0 * nf)) / denom;
            let half = z / denom * (point * (1.0 - point) / nf + z2 / (4.0 * nf * nf)).sqrt();
            let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
            let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
            (lo, hi)
        }
    };
    Ok(IntervalEstimate {
        point,
        lower: lower.min(point),
        upper: upper.max(point),
        level,
        method,
    })
}

/// Accuracy restricted to the samples of each true category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    /// Indexed by [`LesionCategory::index`]; `None` when the category has no samples.
    pub accuracy: [Option<f64>; 4],
    pub support: [usize; 4],
    /// Unweighted mean over categories with samples.
    pub mean: Option<f64>,
}

pub fn per_category_accuracy(predictions: &[LesionCategory], truths: &[LesionCategory]) -> Result<CategoryAccuracy> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut support = [0usize; 4];
    let mut correct = [0usize; 4];
    for (p, t) in predictions.iter().zip(truths) {
        support[t.index()] += 1;
        correct[t.index()] += (p == t) as usize;
    }
    let accuracy: [Option<f64>; 4] =
        std::array::from_fn(|i| (support[i] > 0).then(|| correct[i] as f64 / support[i] as f64));
    let present: Vec<f64> = accuracy.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(CategoryAccuracy {
        accuracy,
        support,
        mean,
    })
}

impl CategoryAccuracy {
    /// Rows of (category, accuracy) followed by the average row.
    pub fn table(&self) -> serde_json::Value {
        let mut rows: Vec<serde_json::Value> = LesionCategory::ALL
            .iter()
            .map(|c| {
                serde_json::json!({
                    "category": c.name(),
                    "accuracy": self.accuracy[c.index()],
                    "support": self.support[c.index()],
                })
            })
            .collect();
        rows.push(serde_json::json!({ "category": "average", "accuracy": self.mean }));
        serde_json::Value::Array(rows)
    }
}

/// One rate with its interval, serialized with the fixed report keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub value: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub method: IntervalMethod,
    pub k: usize,
    pub n: usize,
}

fn rate(k: usize, n: usize, level: f64, method: IntervalMethod) -> Result<RateReport> {
    if n == 0 {
        return Ok(RateReport {
            value: None,
            ci_lower: None,
            ci_upper: None,
            method,
            k,
            n,
        });
    }
    let ci = confidence_interval(k, n, level, method)?;
    Ok(RateReport {
        value: Some(ci.point),
        ci_lower: Some(ci.lower),
        ci_upper: Some(ci.upper),
        method,
        k,
        n,
    })
}

/// Detection summary with intervals; undefined rates serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub sensitivity: RateReport,
    pub specificity: RateReport,
    pub accuracy: RateReport,
    pub level: f64,
    pub tally: ConfusionTally,
}

pub fn detection_report(t: &ConfusionTally, level: f64, method: IntervalMethod) -> Result<DetectionReport> {
    Ok(DetectionReport {
        sensitivity: rate(t.tp, t.tp + t.fn_, level, method)?,
        specificity: rate(t.tn, t.tn + t.fp, level, method)?,
        accuracy: rate(t.tp + t.tn, t.total(), level, method)?,
        level,
        tally: *t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn wbce_examples() {
        let c = LabelCounts::binary(70, 30);
        assert_abs_diff_eq!(wbce(0.9, true, &c).unwrap(), -0.3 * 0.9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(wbce(0.9, true, &c).unwrap(), 0.03161, epsilon = 1e-5);
        let c = LabelCounts::binary(50, 50);
        assert_abs_diff_eq!(wbce(0.5, false, &c).unwrap(), 0.34657, epsilon = 1e-5);
        assert!(wbce(1.0, true, &c).unwrap() < 1e-7);
        assert!(wbce(0.5, true, &LabelCounts::binary(0, 0)).is_err());
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&LabelCounts::new(vec![4, 6, 0])).unwrap();
        assert_abs_diff_eq!(w[0], 0.6, epsilon = 1e-12);
        assert_eq!(w[2], 1.0);
        assert_eq!(class_weights(&LabelCounts::new(vec![5])).unwrap(), vec![0.0]);
        assert!(class_weights(&LabelCounts::new(vec![0, 0])).is_err());
    }

    #[test]
    fn wce_examples() {
        let u = [0.25; 4];
        let w = [0.6, 0.6, 0.6, 0.6];
        assert_abs_diff_eq!(wce(&u, 2, &w).unwrap(), 0.83178, epsilon = 1e-5);
        assert!(wce(&[0.0, 1.0, 0.0, 0.0], 1, &w).unwrap() < 1e-6);
        assert_eq!(wce(&u, 0, &[0.0; 4]).unwrap(), 0.0);
        assert!(wce(&[0.5, 0.6, 0.0, 0.0], 0, &w).is_err());
    }

    #[test]
    fn tensor_losses_match_scalar() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[0.9f64, 0.2, 0.6], &dev).unwrap();
        let c = LabelCounts::binary(70, 30);
        let ys = [true, false, true];
        let ws: Vec<f64> = ys.iter().map(|&y| binary_weight(y, &c).unwrap()).collect();
        let got = wbce_loss(&x, &ys, &ws).unwrap().to_scalar::<f64>().unwrap();
        let want = [0.9, 0.2, 0.6]
            .iter()
            .zip(ys)
            .map(|(&x, y)| wbce(x, y, &c).unwrap())
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);

        let p = Tensor::new(&[[0.1f64, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]], &dev).unwrap();
        let w = [0.5, 0.6, 0.7, 0.8];
        let got = wce_loss(&p, &[3, 1], &[w[3], w[1]]).unwrap().to_scalar::<f64>().unwrap();
        let want = (wce(&[0.1, 0.2, 0.3, 0.4], 3, &w).unwrap() + wce(&[0.25; 4], 1, &w).unwrap()) / 2.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn pixel_ce_uniform_logits() {
        let logits = Tensor::zeros((2, 6, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let labels = Tensor::zeros((2, 3, 3), DType::U32, &Device::Cpu).unwrap();
        let l = pixel_cross_entropy(&logits, &labels).unwrap().to_scalar::<f64>().unwrap();
        assert_abs_diff_eq!(l, 6f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn dice_examples() {
        let a = Array2::from_shape_vec((2, 4), vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let b = Array2::from_shape_vec((2, 4), vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        let c = Array2::from_shape_vec((2, 4), vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dice(&[a.clone()], &[a.clone()], 1).unwrap(), 1.0);
        assert_eq!(dice(&[a.clone()], &[c], 1).unwrap(), 0.0);
        assert_eq!(dice(&[a.clone()], &[b], 1).unwrap(), 0.5);
        assert_eq!(dice(&[a.clone()], &[a], 3).unwrap(), 1.0);
    }

    #[test]
    fn binary_metric_examples() {
        let t = ConfusionTally {
            tp: 28,
            fn_: 3,
            tn: 29,
            fp: 2,
        };
        let m = binary_metrics(&t).unwrap();
        assert_abs_diff_eq!(m.sensitivity, 0.9032, epsilon = 1e-4);
        assert_abs_diff_eq!(m.specificity, 0.9355, epsilon = 1e-4);
        let all = ConfusionTally {
            tp: 3,
            tn: 4,
            ..Default::default()
        };
        let m = binary_metrics(&all).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.accuracy), (1.0, 1.0, 1.0));
        assert!(sensitivity(&ConfusionTally::default()).is_err());
    }

    // Reference bounds from scipy.stats.beta.ppf / statsmodels proportion_confint.
    const CP_REF: [(usize, usize, f64, f64); 6] = [
        (28, 31, 0.7424609353722644, 0.9795801373122079),
        (29, 31, 0.7857838428365977, 0.9920890165381453),
        (0, 10, 0.0, 0.3084971078187608),
        (10, 10, 0.6915028921812392, 1.0),
        (1, 2, 0.01257911709342505, 0.9874208829065749),
        (5, 40, 0.04185962613861671, 0.2680329173617204),
    ];
    const WILSON_REF: [(usize, usize, f64, f64); 3] = [
        (28, 31, 0.7510006155660716, 0.9665353558368026),
        (57, 62, 0.8247142865138739, 0.9650616530140073),
        (5, 40, 0.054595002509454024, 0.261121198388511),
    ];

    #[test]
    fn clopper_pearson_reference() {
        for (k, n, lo, hi) in CP_REF {
            let ci = confidence_interval(k, n, 0.95, IntervalMethod::ClopperPearson).unwrap();
            assert_abs_diff_eq!(ci.lower, lo, epsilon = 1e-6);
            assert_abs_diff_eq!(ci.upper, hi, epsilon = 1e-6);
        }
        let ci = confidence_interval(28, 31, 0.90, IntervalMethod::ClopperPearson).unwrap();
        assert_abs_diff_eq!(ci.lower, 0.7684970248566316, epsilon = 1e-6);
        assert_abs_diff_eq!(ci.upper, 0.9730998803088509, epsilon = 1e-6);
    }

    #[test]
    fn wilson_reference() {
        for (k, n, lo, hi) in WILSON_REF {
            let ci = confidence_interval(k, n, 0.95, IntervalMethod::Wilson).unwrap();
            assert_abs_diff_eq!(ci.lower, lo, epsilon = 1e-9);
            assert_abs_diff_eq!(ci.upper, hi, epsilon = 1e-9);
        }
    }

    #[test]
    fn interval_boundaries_and_errors() {
        assert_eq!(confidence_interval(7, 7, 0.95, IntervalMethod::ClopperPearson).unwrap().upper, 1.0);
        assert_eq!(confidence_interval(0, 7, 0.95, IntervalMethod::ClopperPearson).unwrap().lower, 0.0);
        assert!(confidence_interval(3, 2, 0.95, IntervalMethod::Wilson).is_err());
        assert!(confidence_interval(0, 0, 0.95, IntervalMethod::Wilson).is_err());
    }

    #[test]
    fn category_accuracy_examples() {
        use LesionCategory::*;
        let r = per_category_accuracy(
            &[GroundGlass, Consolidation, Consolidation, Consolidation],
            &[GroundGlass, GroundGlass, Consolidation, Consolidation],
        )
        .unwrap();
        assert_eq!(r.accuracy[GroundGlass.index()], Some(0.5));
        assert_eq!(r.accuracy[Consolidation.index()], Some(1.0));
        assert_eq!(r.accuracy[CrazyPaving.index()], None);
        assert_eq!(r.mean, Some(0.75));
        let all = per_category_accuracy(&LesionCategory::ALL, &LesionCategory::ALL).unwrap();
        assert_eq!(all.mean, Some(1.0));
        let table = all.table();
        assert_eq!(table.as_array().unwrap().len(), 5);
        assert_eq!(table[4]["category"], "average");
    }

    #[test]
    fn report_json_keys() {
        let t = ConfusionTally {
            tp: 5,
            fn_: 1,
            tn: 4,
            fp: 0,
        };
        let v = serde_json::to_value(detection_report(&t, 0.95, IntervalMethod::ClopperPearson).unwrap()).unwrap();
        for k in ["sensitivity", "specificity", "accuracy"] {
            for f in ["value", "ci_lower", "ci_upper", "method"] {
                assert!(v[k].get(f).is_some(), "{k}.{f}");
            }
        }
        assert_eq!(v["sensitivity"]["method"], "clopper_pearson");
    }

    fn brute_dice(p: &[u8], t: &[u8], c: u8) -> f64 {
        let ps: HashSet<usize> = (0..p.len()).filter(|&i| p[i] == c).collect();
        let ts: HashSet<usize> = (0..t.len()).filter(|&i| t[i] == c).collect();
        if ps.is_empty() && ts.is_empty() {
            return 1.0;
        }
        2.0 * ps.intersection(&ts).count() as f64 / (ps.len() + ts.len()) as f64
    }

    proptest! {
        #[test]
        fn wbce_nonnegative_and_balanced_half_bce(x in 1e-6f64..1.0 - 1e-6, y: bool) {
            let c = LabelCounts::binary(10, 10);
            let l = wbce(x, y, &c).unwrap();
            prop_assert!(l >= 0.0);
            let bce = -(if y { x.ln() } else { (1.0 - x).ln() });
            prop_assert!((l - 0.5 * bce).abs() <= 1e-12 * bce.max(1.0));
        }

        #[test]
        fn wce_nonnegative(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, t in 0usize..3) {
            let s = a + b + c + 1e-9;
            let p = [a / s, b / s, c / s];
            let w = [0.3, 0.5, 0.7];
            prop_assert!(wce(&p, t, &w).unwrap() >= 0.0);
        }

        #[test]
        fn dice_matches_set_oracle(
            p in proptest::collection::vec(0u8..3, 12),
            t in proptest::collection::vec(0u8..3, 12),
            c in 0u8..3,
        ) {
            let pa = Array2::from_shape_vec((3, 4), p.clone()).unwrap();
            let ta = Array2::from_shape_vec((3, 4), t.clone()).unwrap();
            let d = dice(&[pa.clone()], &[ta.clone()], c).unwrap();
            prop_assert_eq!(d, brute_dice(&p, &t, c));
            prop_assert_eq!(d, dice(&[ta], &[pa], c).unwrap());
        }

        #[test]
        fn clopper_pearson_contains_point(n in 1usize..200, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).floor() as usize;
            let ci = confidence_interval(k, n, 0.95, IntervalMethod::ClopperPearson).unwrap();
            prop_assert!(ci.lower <= ci.point && ci.point <= ci.upper);
            prop_assert!(ci.lower >= 0.0 && ci.upper <= 1.0);
        }
    }

    #[test]
    fn clopper_pearson_narrows_with_n() {
        for (num, den) in [(1usize, 2usize), (1, 4), (3, 4), (1, 10), (0, 1), (1, 1)] {
            let mut prev = f64::INFINITY;
            for m in 1..60 {
                let ci = confidence_interval(num * m, den * m, 0.95, IntervalMethod::ClopperPearson).unwrap();
                let width = ci.upper - ci.lower;
                assert!(width < prev, "{num}/{den} at scale {m}");
                prev = width;
            }
        }
    }
}
