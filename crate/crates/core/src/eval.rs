//! Confusion matrices, classification scores, one-vs-rest ROC/AUC,
//! stratified fold plans and cross-validation aggregation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RandomStream};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Per-class true counts (row sums).
    pub fn support(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|r| (0..self.classes).map(|c| self.get(r, c)).sum())
            .collect()
    }

    /// Per-class predicted counts (column sums).
    pub fn predicted(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|c| (0..self.classes).map(|r| self.get(r, c)).sum())
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Relabels classes: class `c` becomes `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        let n = self.classes;
        let mut counts = vec![0; n * n];
        for r in 0..n {
            for c in 0..n {
                counts[perm[r] * n + perm[c]] = self.get(r, c);
            }
        }
        ConfusionMatrix { classes: n, counts }
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            op: "confusion",
            left: format!("{} true labels", y_true.len()),
            right: format!("{} predictions", y_pred.len()),
        });
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::Data(format!(
                "label pair ({t}, {p}) outside {classes} classes"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
    #[default]
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::InvalidArgument(format!("unknown averaging {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub per_class: Vec<ClassScores>,
    /// Classes whose precision or recall was 0/0 and reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn basic_metrics(m: &ConfusionMatrix, averaging: Averaging) -> Result<BasicMetrics> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("metrics of an empty confusion matrix".into()));
    }
    let support = m.support();
    let predicted = m.predicted();
    let mut warnings = Vec::new();
    let per_class: Vec<ClassScores> = (0..m.classes())
        .map(|c| {
            let tp = m.get(c, c);
            let precision = ratio(tp, predicted[c]).unwrap_or_else(|| {
                warnings.push(format!("class {c}: precision is 0/0, reported as 0"));
                0.0
            });
            let recall = ratio(tp, support[c]).unwrap_or_else(|| {
                warnings.push(format!("class {c}: recall is 0/0, reported as 0"));
                0.0
            });
            ClassScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: support[c],
            }
        })
        .collect();
    let accuracy = m.trace() as f64 / total as f64;
    let classes = per_class.len() as f64;
    let (precision, recall, f1) = match averaging {
        Averaging::Micro => (accuracy, accuracy, accuracy),
        Averaging::Macro => (
            per_class.iter().map(|s| s.precision).sum::<f64>() / classes,
            per_class.iter().map(|s| s.recall).sum::<f64>() / classes,
            per_class.iter().map(|s| s.f1).sum::<f64>() / classes,
        ),
        Averaging::Weighted => {
            let w = |f: fn(&ClassScores) -> f64| {
                per_class
                    .iter()
                    .map(|s| f(s) * s.support as f64)
                    .sum::<f64>()
                    / total as f64
            };
            (w(|s| s.precision), w(|s| s.recall), w(|s| s.f1))
        }
    };
    Ok(BasicMetrics {
        accuracy,
        precision,
        recall,
        f1,
        averaging,
        per_class,
        warnings,
    })
}

/// κ = (p_o − p_e)/(1 − p_e).
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total() as f64;
    if total == 0.0 {
        return Err(Error::Data("kappa of an empty confusion matrix".into()));
    }
    let p_o = m.trace() as f64 / total;
    let p_e: f64 = m
        .support()
        .iter()
        .zip(m.predicted())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum::<f64>()
        / (total * total);
    if p_e >= 1.0 {
        return Err(Error::Numeric(
            "kappa is undefined when chance agreement is 1".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Matthews correlation in its covariance form, which reduces to
/// (TP·TN − FP·FN)/√(…) for two classes. A zero denominator gives 0.
pub fn mcc(m: &ConfusionMatrix) -> f64 {
    let s = m.total() as f64;
    let c = m.trace() as f64;
    let t = m.support();
    let p = m.predicted();
    let sum_pt: f64 = t.iter().zip(&p).map(|(&a, &b)| a as f64 * b as f64).sum();
    let sum_pp: f64 = p.iter().map(|&v| (v as f64).powi(2)).sum();
    let sum_tt: f64 = t.iter().map(|&v| (v as f64).powi(2)).sum();
    let den = ((s * s - sum_pp) * (s * s - sum_tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - sum_pt) / den
    }
}

/// One ROC operating point per distinct score threshold (descending),
/// starting at (0, 0) with threshold +∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

pub fn roc_curve(y_true: &[bool], scores: &[f64]) -> Result<RocCurve> {
    if y_true.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            op: "roc_curve",
            left: format!("{} labels", y_true.len()),
            right: format!("{} scores", scores.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores".into()));
    }
    let positives = y_true.iter().filter(|&&y| y).count();
    let negatives = y_true.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(
            "ROC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if y_true[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(threshold);
        curve.fpr.push(fp as f64 / negatives as f64);
        curve.tpr.push(tp as f64 / positives as f64);
    }
    Ok(curve)
}

/// Trapezoidal area under a curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassAuc {
    /// One-vs-rest AUC per class; absent when the class is missing from, or
    /// is all of, the evaluated labels. Serialised as a map from class index
    /// to AUC over the defined classes.
    #[serde(with = "defined_only")]
    pub per_class: Vec<Option<f64>>,
    pub micro: f64,
    pub macro_avg: f64,
}

mod defined_only {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, f64> = v
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i.to_string(), a)))
            .collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<f64>>, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = Vec::new();
        for (k, a) in map {
            let i: usize = k.parse().map_err(serde::de::Error::custom)?;
            if out.len() <= i {
                out.resize(i + 1, None);
            }
            out[i] = Some(a);
        }
        Ok(out)
    }
}

/// One-vs-rest curves per class plus the pooled (micro) curve.
pub fn multiclass_roc(
    y_true: &[usize],
    probs: &Matrix,
) -> Result<(Vec<Option<RocCurve>>, RocCurve)> {
    if y_true.len() != probs.rows() {
        return Err(Error::shapes("multiclass_roc", (y_true.len(), 1), probs.shape()));
    }
    let classes = probs.cols();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let truth: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let present = truth.iter().filter(|&&t| t).count();
        if present == 0 || present == truth.len() {
            per_class.push(None);
        } else {
            per_class.push(Some(roc_curve(&truth, &probs.column(c))?));
        }
    }
    let mut pooled_truth = Vec::with_capacity(probs.rows() * classes);
    for &y in y_true {
        pooled_truth.extend((0..classes).map(|c| y == c));
    }
    let micro = roc_curve(&pooled_truth, probs.data())?;
    Ok((per_class, micro))
}

pub fn multiclass_auc(y_true: &[usize], probs: &Matrix) -> Result<MulticlassAuc> {
    let (curves, micro) = multiclass_roc(y_true, probs)?;
    let per_class: Vec<Option<f64>> = curves.iter().map(|c| c.as_ref().map(auc)).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Data(
            "no class has both positive and negative samples for ROC".into(),
        ));
    }
    Ok(MulticlassAuc {
        per_class,
        micro: auc(&micro),
        macro_avg: defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

/// Unweighted mean of the per-class curves on the union of their FPR grids.
pub fn macro_roc(curves: &[Option<RocCurve>]) -> Option<RocCurve> {
    let defined: Vec<&RocCurve> = curves.iter().flatten().collect();
    if defined.is_empty() {
        return None;
    }
    let mut grid: Vec<f64> = defined.iter().flat_map(|c| c.fpr.iter().copied()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let tpr = grid
        .iter()
        .map(|&x| defined.iter().map(|c| interpolate(&c.fpr, &c.tpr, x)).sum::<f64>() / defined.len() as f64)
        .collect();
    Some(RocCurve {
        thresholds: vec![f64::NAN; grid.len()],
        fpr: grid,
        tpr,
    })
}

/// Step-aware linear interpolation: at a vertical segment the highest TPR
/// wins.
fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let mut best = 0.0;
    for i in 0..xs.len() {
        if xs[i] == x {
            best = f64::max(best, ys[i]);
        } else if i + 1 < xs.len() && xs[i] < x && x < xs[i + 1] {
            let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
            return ys[i] + t * (ys[i + 1] - ys[i]);
        }
    }
    best
}

/// The seven headline scores for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub mcc: f64,
    /// Macro one-vs-rest AUC.
    pub auc: f64,
    pub averaging: Averaging,
    pub auc_detail: MulticlassAuc,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassScores>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const METRIC_NAMES: [&str; 7] = [
    "accuracy",
    "precision",
    "recall",
    "f1",
    "kappa",
    "mcc",
    "auc",
];

impl MetricsReport {
    pub fn compute(
        y_true: &[usize],
        probs: &Matrix,
        averaging: Averaging,
    ) -> Result<MetricsReport> {
        let y_pred: Vec<usize> = probs.iter_rows().map(crate::mlp::argmax).collect();
        let cm = confusion(y_true, &y_pred, probs.cols())?;
        let basic = basic_metrics(&cm, averaging)?;
        let kappa = cohen_kappa(&cm)?;
        let auc_detail = multiclass_auc(y_true, probs)?;
        let mut warnings = basic.warnings;
        for (c, a) in auc_detail.per_class.iter().enumerate() {
            if a.is_none() {
                warnings.push(format!("class {c}: one-vs-rest AUC undefined, left out of the macro average"));
            }
        }
        Ok(MetricsReport {
            accuracy: basic.accuracy,
            precision: basic.precision,
            recall: basic.recall,
            f1: basic.f1,
            kappa,
            mcc: mcc(&cm),
            auc: auc_detail.macro_avg,
            averaging,
            auc_detail,
            confusion: cm.rows(),
            per_class: basic.per_class,
            warnings,
        })
    }

    pub fn scalars(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.kappa,
            self.mcc,
            self.auc,
        ]
    }
}

/// Stratified k-fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn indices_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

/// Each class is shuffled and dealt round-robin across folds; the dealing
/// position carries over between classes so fold sizes stay balanced.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut stream = RandomStream::new(seed);
    let mut validation = vec![Vec::new(); k];
    let mut next = 0;
    for (class, mut members) in indices_by_class(labels) {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut stream);
        for i in members {
            validation[next].push(i);
            next = (next + 1) % k;
        }
    }
    let folds = validation
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let mut in_val = vec![false; labels.len()];
            val.iter().for_each(|&i| in_val[i] = true);
            Fold {
                train: (0..labels.len()).filter(|&i| !in_val[i]).collect(),
                validation: val,
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

/// Stratified partition into groups sized by `fractions` (rounded per
/// class, the last group takes the remainder). Indices in each group are
/// sorted.
pub fn stratified_split(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidArgument("split fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {total}, not 1")));
    }
    let mut stream = RandomStream::new(seed);
    let mut groups = vec![Vec::new(); fractions.len()];
    for (_, mut members) in indices_by_class(labels) {
        members.shuffle(&mut stream);
        let n = members.len();
        let mut start = 0;
        for (g, f) in fractions.iter().enumerate() {
            let take = if g + 1 == fractions.len() {
                n - start
            } else {
                ((f * n as f64).round() as usize).min(n - start)
            };
            groups[g].extend_from_slice(&members[start..start + take]);
            start += take;
        }
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of each named metric across
/// folds.
pub fn cv_aggregate(folds: &[MetricsReport]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let values: Vec<f64> = folds.iter().map(|f| f.scalars()[i]).collect();
        out.insert(name.to_string(), summarize(&values));
    }
    out
}

pub fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary { mean: 0.0, std: 0.0 };
    }
    // Constant inputs summarise exactly, without rounding in the mean.
    if values.iter().all(|&v| v == values[0]) {
        return MetricSummary {
            mean: values[0],
            std: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.sqrt(),
    }
}
