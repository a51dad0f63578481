//! Confusion matrices, classification metrics with Wald intervals, the
//! pooled two-proportion Z test and the threshold sweep harness.

use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::attention::{key_from_normalized, BitOrder, GcmlConfig};
use crate::cam::{class_scores, compute_cam, minmax_normalize, Cam, ClassifierHead};
use crate::error::{Error, Result};
use crate::store::{argmax, augment_stack, reduce_to_grid, Fallback, GcmlStore, PredictOptions, Sample};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Counts indexed `[predicted][true]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidShape(format!("{} counts for a {classes}x{classes} matrix", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted * self.classes + truth]
    }

    pub fn record(&mut self, predicted: usize, truth: usize) -> Result<()> {
        for l in [predicted, truth] {
            if l >= self.classes {
                return Err(Error::ClassOutOfRange { index: l, len: self.classes });
            }
        }
        self.counts[predicted * self.classes + truth] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Column sum: how many samples truly belong to `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(p, c)).sum()
    }

    /// Row sum: how many samples were predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(c, t)).sum()
    }

    /// Text rendering with the axis convention spelled out.
    pub fn render(&self, labels: &[String]) -> String {
        let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        let width = (0..self.classes)
            .map(|i| name(i).len())
            .chain(self.counts.iter().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(4);
        let mut out = String::from("rows = predicted, columns = true\n");
        let _ = write!(out, "{:>width$}", "");
        for t in 0..self.classes {
            let _ = write!(out, " {:>width$}", name(t));
        }
        out.push('\n');
        for p in 0..self.classes {
            let _ = write!(out, "{:>width$}", name(p));
            for t in 0..self.classes {
                let _ = write!(out, " {:>width$}", self.get(p, t));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(truth) {
        m.record(p, t)?;
    }
    Ok(m)
}

/// Point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: u64,
}

impl Estimate {
    pub fn wald(point: f64, n: u64) -> Result<Self> {
        let (ci_low, ci_high) = wald_ci(point, n)?;
        Ok(Self { point, ci_low, ci_high, n })
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ±{:.3}", self.point, self.half_width())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n: u64,
    pub accuracy: Estimate,
    pub macro_f1: Estimate,
    pub weighted_f1: Estimate,
    /// Macro-averaged recall.
    pub sensitivity: Estimate,
    /// Recall of each class, interval over that class's support.
    pub per_class_accuracy: Vec<Estimate>,
    pub per_class_precision: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

impl MetricReport {
    /// One CSV row per metric: `name,point,ci_low,ci_high,n`.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("name,point,ci_low,ci_high,n\n");
        let mut row = |name: &str, e: &Estimate| {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", e.point, e.ci_low, e.ci_high, e.n);
        };
        row("accuracy", &self.accuracy);
        row("macro_f1", &self.macro_f1);
        row("weighted_f1", &self.weighted_f1);
        row("sensitivity", &self.sensitivity);
        for (i, e) in self.per_class_accuracy.iter().enumerate() {
            let label = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
            row(&format!("class_accuracy[{label}]"), e);
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(m: &ConfusionMatrix) -> Result<MetricReport> {
    let n = m.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    let c = m.classes();
    let recall: Vec<f64> = (0..c).map(|i| ratio(m.get(i, i), m.support(i))).collect();
    let precision: Vec<f64> = (0..c).map(|i| ratio(m.get(i, i), m.predicted(i))).collect();
    let f1: Vec<f64> =
        precision.iter().zip(&recall).map(|(&p, &r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }).collect();
    let macro_f1 = f1.iter().sum::<f64>() / c as f64;
    let weighted_f1 = (0..c).map(|i| f1[i] * m.support(i) as f64).sum::<f64>() / n as f64;
    let sensitivity = recall.iter().sum::<f64>() / c as f64;
    let per_class_accuracy = (0..c)
        .map(|i| {
            let support = m.support(i);
            if support == 0 {
                Ok(Estimate { point: 0.0, ci_low: 0.0, ci_high: 0.0, n: 0 })
            } else {
                Estimate::wald(recall[i], support)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        n,
        accuracy: Estimate::wald(ratio(m.correct(), n), n)?,
        macro_f1: Estimate::wald(macro_f1, n)?,
        weighted_f1: Estimate::wald(weighted_f1, n)?,
        sensitivity: Estimate::wald(sensitivity, n)?,
        per_class_accuracy,
        per_class_precision: precision,
        per_class_f1: f1,
    })
}

/// Normal-approximation interval `p ± 1.96 sqrt(p(1-p)/n)`, clamped to `[0, 1]`.
pub fn wald_ci(p: f64, n: u64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidValue("wald interval needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidValue(format!("proportion {p} outside [0, 1]")));
    }
    let half = Z_95 * (p * (1.0 - p) / n as f64).sqrt();
    Ok(((p - half).max(0.0), (p + half).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTestResult {
    pub z: f64,
    pub p1: f64,
    pub p2: f64,
    pub n: u64,
    pub p_hat: f64,
}

/// Pooled two-proportion test on two groups of equal size `n`:
/// `z = (p1 - p2) / sqrt(2 p_hat (1 - p_hat) / n)`.
pub fn two_proportion_z(correct1: u64, correct2: u64, n: u64) -> Result<ZTestResult> {
    if n == 0 {
        return Err(Error::InvalidValue("group size must be at least 1".into()));
    }
    if correct1 > n || correct2 > n {
        return Err(Error::InvalidValue(format!("counts ({correct1}, {correct2}) exceed n = {n}")));
    }
    let p1 = correct1 as f64 / n as f64;
    let p2 = correct2 as f64 / n as f64;
    let p_hat = (correct1 + correct2) as f64 / (2 * n) as f64;
    let var = 2.0 * p_hat * (1.0 - p_hat) / n as f64;
    let z = if correct1 == correct2 {
        0.0
    } else if var == 0.0 {
        return Err(Error::Degenerate(format!("pooled proportion {p_hat} gives zero variance")));
    } else {
        (p1 - p2) / var.sqrt()
    };
    Ok(ZTestResult { z, p1, p2, n, p_hat })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f32,
    pub accuracy: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the most accurate row; ties go to the earliest.
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,accuracy,fallback_rate,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6},{:.6},{}", r.tau, r.accuracy, r.fallback_rate, u8::from(i == self.best));
        }
        out
    }
}

/// Settings shared by every threshold in a sweep.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub classes: Vec<String>,
    pub grid: (usize, usize),
    pub bit_order: BitOrder,
    pub epochs: usize,
    /// Epoch `e` uses `seed + e` for augmentation when set.
    pub augment_seed: Option<u64>,
    pub predict: PredictOptions,
}

/// Trains one store per threshold on `train` and scores it on `test`.
///
/// CAMs are computed and normalized once per (epoch, sample) and shared by
/// every threshold; only the thresholding step is repeated.
pub fn tau_sweep(
    train: &[Sample],
    test: &[Sample],
    head: &ClassifierHead,
    taus: &[f32],
    settings: &SweepSettings,
) -> Result<SweepTable> {
    if taus.is_empty() {
        return Err(Error::Empty("no tau values to sweep".into()));
    }
    if test.is_empty() {
        return Err(Error::Empty("no evaluation samples".into()));
    }
    let (gh, gw) = settings.grid;
    let base = GcmlConfig::new(0.0, gh, gw, settings.bit_order)?;
    let configs = taus.iter().map(|&t| base.with_tau(t)).collect::<Result<Vec<_>>>()?;
    if head.classes() != settings.classes.len() {
        return Err(Error::ConfigMismatch(format!(
            "head has {} classes, sweep declares {}",
            head.classes(),
            settings.classes.len()
        )));
    }

    let normalized_cam = |stack: &crate::cam::FeatureMapStack, c: usize| -> Result<Cam> {
        let f = reduce_to_grid(stack, &base)?;
        Ok(minmax_normalize(&compute_cam(&f, head, c)?))
    };

    let mut train_cams = Vec::with_capacity(train.len() * settings.epochs);
    for epoch in 0..settings.epochs {
        for (i, s) in train.iter().enumerate() {
            let cam = match settings.augment_seed {
                Some(seed) => normalized_cam(&augment_stack(&s.stack, seed.wrapping_add(epoch as u64), i), s.label)?,
                None => normalized_cam(&s.stack, s.label)?,
            };
            train_cams.push((s.label, cam));
        }
    }
    let test_cams = test
        .iter()
        .map(|s| {
            let cams = (0..head.classes()).map(|c| normalized_cam(&s.stack, c)).collect::<Result<Vec<_>>>()?;
            Ok((s.label, cams, class_scores(&s.stack, head)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = configs
        .par_iter()
        .map(|cfg| {
            let mut store = GcmlStore::new(settings.classes.clone(), *cfg, head.pooling())?;
            for (label, cam) in &train_cams {
                store.increment(*label, key_from_normalized(cam, cfg)?)?;
            }
            let mut correct = 0u64;
            let mut fallbacks = 0u64;
            for (label, cams, scores) in &test_cams {
                let likelihoods = cams
                    .iter()
                    .enumerate()
                    .map(|(c, cam)| store.lookup_smoothed(c, key_from_normalized(cam, cfg)?, settings.predict.alpha))
                    .collect::<Result<Vec<_>>>()?;
                let pred = if likelihoods.iter().all(|&v| v == 0.0) {
                    fallbacks += 1;
                    match settings.predict.fallback {
                        Fallback::CnnScore => argmax(scores),
                        Fallback::FirstClass => 0,
                    }
                } else {
                    argmax(&likelihoods)
                };
                correct += u64::from(pred == *label);
            }
            let n = test_cams.len() as f64;
            Ok(SweepRow { tau: cfg.tau(), accuracy: correct as f64 / n, fallback_rate: fallbacks as f64 / n })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = argmax(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(SweepTable { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let m = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.get(1, 1), 2);
        assert_eq!(m.total(), m.correct());
        let m = confusion(&[1], &[0], 2).unwrap();
        assert_eq!((m.get(1, 0), m.get(0, 1), m.correct()), (1, 0, 0));
        assert!(matches!(confusion(&[0], &[0, 1], 2), Err(Error::DimensionMismatch(_))));
        assert!(confusion(&[3], &[0], 2).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let preds: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let truth: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let m = confusion(&preds, &truth, 4).unwrap();
        for p in 0..4 {
            for t in 0..4 {
                let tally = preds.iter().zip(&truth).filter(|&(&a, &b)| a == p && b == t).count() as u64;
                assert_eq!(m.get(p, t), tally);
            }
        }
    }

    #[test]
    fn perfect_metrics() {
        let m = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 7, 0, 0, 0, 2]).unwrap();
        let r = metrics(&m).unwrap();
        assert_eq!(r.accuracy.point, 1.0);
        assert_eq!((r.accuracy.ci_low, r.accuracy.ci_high), (1.0, 1.0));
        assert!(r.per_class_accuracy.iter().all(|e| e.point == 1.0));
        assert_eq!(r.macro_f1.point, 1.0);
        assert_eq!(r.sensitivity.point, 1.0);
        assert!(metrics(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn hand_computed_metrics() {
        // rows predicted, cols true
        //        t0 t1
        // p0      3  1
        // p1      2  4
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let r = metrics(&m).unwrap();
        assert!((r.accuracy.point - 0.7).abs() < 1e-15);
        // recall t0 = 3/5, t1 = 4/5; precision p0 = 3/4, p1 = 4/6
        assert!((r.per_class_accuracy[0].point - 0.6).abs() < 1e-15);
        assert!((r.per_class_accuracy[1].point - 0.8).abs() < 1e-15);
        let f0 = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
        let f1 = 2.0 * (4.0 / 6.0) * 0.8 / (4.0 / 6.0 + 0.8);
        assert!((r.macro_f1.point - (f0 + f1) / 2.0).abs() < 1e-12);
        assert!((r.weighted_f1.point - (f0 * 5.0 + f1 * 5.0) / 10.0).abs() < 1e-12);
        assert!((r.sensitivity.point - 0.7).abs() < 1e-12);
        assert_eq!(r.per_class_accuracy[0].n, 5);
    }

    #[test]
    fn f1_with_empty_denominator_is_zero() {
        // class 1 never predicted and never true
        let m = ConfusionMatrix::from_counts(2, vec![4, 0, 0, 0]).unwrap();
        let r = metrics(&m).unwrap();
        assert_eq!(r.per_class_f1, vec![1.0, 0.0]);
        assert_eq!(r.per_class_accuracy[1].n, 0);
    }

    #[test]
    fn wald_examples() {
        let (lo, hi) = wald_ci(0.5, 100).unwrap();
        assert!((hi - 0.5 - 0.098).abs() < 1e-12 && (0.5 - lo - 0.098).abs() < 1e-12);
        assert_eq!(wald_ci(1.0, 10).unwrap(), (1.0, 1.0));
        let (lo, hi) = wald_ci(0.948, 580).unwrap();
        assert!(((hi - lo) / 2.0 - 0.018).abs() <= 0.001);
        assert!(wald_ci(0.5, 0).is_err());
        assert!(wald_ci(1.5, 3).is_err());
        // clamped near the edges
        assert_eq!(wald_ci(0.01, 5).unwrap().0, 0.0);
    }

    #[test]
    fn z_examples() {
        let r = two_proportion_z(245, 252, 268).unwrap();
        assert!((-1.17..=-1.15).contains(&r.z), "z = {}", r.z);
        assert!((r.p_hat - 497.0 / 536.0).abs() < 1e-15);
        assert_eq!(two_proportion_z(100, 100, 200).unwrap().z, 0.0);
        assert_eq!(two_proportion_z(252, 245, 268).unwrap().z, -r.z);
        assert!(matches!(two_proportion_z(0, 0, 5).map(|r| r.z), Ok(z) if z == 0.0));
        assert!(two_proportion_z(6, 1, 5).is_err());
        assert!(two_proportion_z(1, 1, 0).is_err());
    }

    #[test]
    fn z_degenerate_pooled_proportion() {
        // p_hat can only be 0 or 1 when both counts are equal, so the test
        // reports z = 0 there; the variance guard covers float underflow.
        assert_eq!(two_proportion_z(5, 5, 5).unwrap().z, 0.0);
    }

    #[test]
    fn render_labels_axes() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let text = m.render(&["cat".into(), "dog".into()]);
        assert!(text.starts_with("rows = predicted, columns = true"));
        assert!(text.contains("cat"));
    }
}
