//! Label-based mean accuracy and instance-based accuracy, precision, recall
//! and F1 for multi-label predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::DatasetId;
use crate::error::{shape_err, Result};
use crate::numerics::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `p >= threshold`.
pub fn binarize(probs: &[Scalar], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p as f64 >= threshold) as u8).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub tn: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(c: usize) -> Self {
        Self {
            tp: vec![0; c],
            tn: vec![0; c],
            fp: vec![0; c],
            fn_: vec![0; c],
        }
    }

    /// Counts over `N x C` row-major prediction and label matrices.
    pub fn from_predictions(preds: &[u8], labels: &[u8], c: usize) -> Result<Self> {
        check_shapes(preds, labels, c)?;
        let mut k = Self::zeros(c);
        for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
            let j = i % c;
            match (p != 0, y != 0) {
                (true, true) => k.tp[j] += 1,
                (false, false) => k.tn[j] += 1,
                (true, false) => k.fp[j] += 1,
                (false, true) => k.fn_[j] += 1,
            }
        }
        Ok(k)
    }

    pub fn attributes(&self) -> usize {
        self.tp.len()
    }

    pub fn samples(&self) -> u64 {
        if self.tp.is_empty() {
            return 0;
        }
        self.tp[0] + self.tn[0] + self.fp[0] + self.fn_[0]
    }
}

fn check_shapes(preds: &[u8], labels: &[u8], c: usize) -> Result<()> {
    if preds.len() != labels.len() || c == 0 || preds.len() % c != 0 {
        return Err(shape_err!(
            "predictions ({}) and labels ({}) are not N x {c}",
            preds.len(),
            labels.len()
        ));
    }
    Ok(())
}

/// Mean over attributes of the balanced accuracy, in percent, and the
/// attributes left out because they lack positives or negatives. `None` when
/// every attribute is excluded.
pub fn mean_accuracy(counts: &ConfusionCounts) -> (Option<f64>, Vec<usize>) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for j in 0..counts.attributes() {
        let p = counts.tp[j] + counts.fn_[j];
        let n = counts.tn[j] + counts.fp[j];
        if p == 0 || n == 0 {
            excluded.push(j);
            continue;
        }
        sum += 0.5 * (counts.tp[j] as f64 / p as f64 + counts.tn[j] as f64 / n as f64);
        used += 1;
    }
    let ma = (used > 0).then(|| 100.0 * (sum / used as f64));
    (ma, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-sample set ratios averaged over samples (percent). `None` for an
/// empty set of samples.
pub fn instance_metrics(preds: &[u8], labels: &[u8], c: usize) -> Result<Option<InstanceMetrics>> {
    check_shapes(preds, labels, c)?;
    let n = preds.len() / c;
    if n == 0 {
        return Ok(None);
    }
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (p, y) in preds.chunks(c).zip(labels.chunks(c)) {
        let (mut inter, mut union, mut np, mut ny) = (0, 0, 0, 0);
        for (&a, &b) in p.iter().zip(y) {
            let (a, b) = (a != 0, b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
            np += a as usize;
            ny += b as usize;
        }
        acc += ratio(inter, union);
        prec += ratio(inter, np);
        rec += ratio(inter, ny);
    }
    let mean = |total: f64| 100.0 * (total / n as f64);
    let (precision, recall) = (mean(prec), mean(rec));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Some(InstanceMetrics {
        accuracy: mean(acc),
        precision,
        recall,
        f1,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: DatasetId,
    pub samples: usize,
    pub threshold: f64,
    /// `None` when every attribute is degenerate or there are no samples.
    pub ma: Option<f64>,
    pub instance: Option<InstanceMetrics>,
    pub counts: ConfusionCounts,
    pub excluded_attributes: Vec<usize>,
}

impl MetricsReport {
    /// Report for `N x C` probabilities against 0/1 labels.
    pub fn compute(
        dataset_id: &DatasetId,
        probs: &[Scalar],
        labels: &[u8],
        c: usize,
        threshold: f64,
    ) -> Result<Self> {
        let preds = binarize(probs, threshold);
        let counts = ConfusionCounts::from_predictions(&preds, labels, c)?;
        let (ma, excluded_attributes) = mean_accuracy(&counts);
        Ok(Self {
            dataset_id: dataset_id.clone(),
            samples: preds.len() / c,
            threshold,
            ma,
            instance: instance_metrics(&preds, labels, c)?,
            counts,
            excluded_attributes,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// `(name, value)` pairs in display order; absent values are `None`.
    pub fn values(&self) -> [(&'static str, Option<f64>); 5] {
        let i = self.instance;
        [
            ("mA", self.ma),
            ("Acc", i.map(|m| m.accuracy)),
            ("Prec", i.map(|m| m.precision)),
            ("Rec", i.map(|m| m.recall)),
            ("F1", i.map(|m| m.f1)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "[{}] samples={} threshold={}\n",
            self.dataset_id, self.samples, self.threshold
        );
        if self.is_empty() {
            s.push_str("  (empty validation split)\n");
            return s;
        }
        for (name, v) in self.values() {
            match v {
                Some(v) => writeln!(s, "  {name:<5} {v:8.3}").unwrap(),
                None => writeln!(s, "  {name:<5} {:>8}", "n/a").unwrap(),
            }
        }
        if !self.excluded_attributes.is_empty() {
            writeln!(s, "  excluded attributes: {:?}", self.excluded_attributes).unwrap();
        }
        s
    }

    /// One `dataset=<id> metric=<name> value=<v>` line per metric.
    pub fn to_machine(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.values() {
            let v = v.map_or("nan".to_string(), |v| format!("{v:.6}"));
            writeln!(s, "dataset={} metric={name} value={v}", self.dataset_id).unwrap();
        }
        s
    }
}
