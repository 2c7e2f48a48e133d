//! Set and ranking metrics, aggregation, divergence analysis and reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::MultiCenterDataset;
use crate::error::{Error, Result};

pub mod report;

/// |A ∩ B| / |A ∪ B|; two empty sets score 1.
pub fn jaccard(truth: &[usize], predicted: &[usize]) -> f64 {
    let a: BTreeSet<_> = truth.iter().collect();
    let b: BTreeSet<_> = predicted.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Per-record F1. Two empty sets score 1; otherwise an empty side scores 0.
pub fn f1(truth: &[usize], predicted: &[usize]) -> f64 {
    let a: BTreeSet<_> = truth.iter().collect();
    let b: BTreeSet<_> = predicted.iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    // Harmonic mean of precision and recall, as one ratio of counts.
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Label indices ordered by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Average precision of `scores` against multi-hot `labels`:
/// Σ_k (R_k − R_{k−1})·P_k over ranks. `None` when no label is positive.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

/// Σ_{k=1}^{|M|} P@k · R@k with |M| the number of true labels. This is the
/// plain sum of precision-recall products over top-k cutoffs; unlike
/// [`average_precision`] it is not bounded by 1 and is exposed only for
/// comparison.
pub fn prauc_products(labels: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate().take(positives) {
        if labels[i] {
            hits += 1;
        }
        let k = rank + 1;
        sum += (hits as f64 / k as f64) * (hits as f64 / positives as f64);
    }
    Some(sum)
}

/// `{ j : probs[j] > t }`.
pub fn threshold(probs: &[f64], t: f64) -> Vec<usize> {
    probs.iter().enumerate().filter(|(_, &p)| p > t).map(|(j, _)| j).collect()
}

/// Base-2 Jensen–Shannon divergence, in [0, 1].
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions differ in length");
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum::<f64>()
    };
    let d = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    d.clamp(0.0, 1.0)
}

/// Pairwise prescription JSD over centers in id order.
pub fn jsd_matrix(dataset: &MultiCenterDataset) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let ids: Vec<String> = dataset.center_ids().cloned().collect();
    let dists = ids
        .iter()
        .map(|c| dataset.prescription_distribution(c))
        .collect::<Result<Vec<_>>>()?;
    let h = ids.len();
    let mut m = vec![vec![0.0; h]; h];
    for i in 0..h {
        for j in i + 1..h {
            let d = jsd(&dists[i], &dists[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok((ids, m))
}

/// Mean of the strictly upper triangle.
pub fn mean_pairwise(m: &[Vec<f64>]) -> f64 {
    let h = m.len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, row) in m.iter().enumerate() {
        for &v in &row[i + 1..h] {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Hospital-size groups by total record count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupThresholds {
    pub small_max: usize,
    pub medium_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            small_max: 1000,
            medium_max: 2000,
        }
    }
}

impl GroupThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.small_max >= self.medium_max {
            return Err(Error::config("small_max", "must be below medium_max"));
        }
        Ok(())
    }

    pub fn group(&self, records: usize) -> Group {
        if records <= self.small_max {
            Group::Small
        } else if records <= self.medium_max {
            Group::Medium
        } else {
            Group::Large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Small,
    Medium,
    Large,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Small => "small",
            Group::Medium => "medium",
            Group::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub prauc: f64,
    pub jaccard: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub center_id: String,
    pub jaccard: f64,
    pub f1: f64,
    /// `None` when the record has no true medication.
    pub prauc: Option<f64>,
}

/// Scores one prediction.
pub fn score_record(center_id: &str, truth: &[usize], probs: &[f64], t: f64) -> RecordScore {
    let predicted = threshold(probs, t);
    let mut labels = vec![false; probs.len()];
    for &m in truth {
        labels[m] = true;
    }
    RecordScore {
        center_id: center_id.to_string(),
        jaccard: jaccard(truth, &predicted),
        f1: f1(truth, &predicted),
        prauc: average_precision(&labels, probs),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub records: usize,
    pub mean: MetricTriple,
    /// Records left out of the PRAUC mean for having no positive label.
    pub prauc_skipped: usize,
}

fn aggregate<'a>(scores: impl Iterator<Item = &'a RecordScore>) -> Aggregate {
    let (mut n, mut j, mut f, mut p, mut np) = (0usize, 0.0, 0.0, 0.0, 0usize);
    for s in scores {
        n += 1;
        j += s.jaccard;
        f += s.f1;
        if let Some(v) = s.prauc {
            p += v;
            np += 1;
        }
    }
    let div = |x: f64, k: usize| if k == 0 { 0.0 } else { x / k as f64 };
    Aggregate {
        records: n,
        mean: MetricTriple {
            prauc: div(p, np),
            jaccard: div(j, n),
            f1: div(f, n),
        },
        prauc_skipped: n - np,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_record: Vec<RecordScore>,
    pub per_center: BTreeMap<String, Aggregate>,
    pub per_group: BTreeMap<Group, Aggregate>,
    /// Mean over all records.
    pub overall: Aggregate,
}

impl EvalResult {
    /// `center_sizes` gives each center's total record count for grouping.
    pub fn from_scores(
        per_record: Vec<RecordScore>,
        center_sizes: &BTreeMap<String, usize>,
        groups: &GroupThresholds,
    ) -> Result<Self> {
        let mut by_center: BTreeMap<String, Vec<&RecordScore>> = BTreeMap::new();
        for s in &per_record {
            by_center.entry(s.center_id.clone()).or_default().push(s);
        }
        let mut by_group: BTreeMap<Group, Vec<&RecordScore>> = BTreeMap::new();
        for (c, scores) in &by_center {
            let size = *center_sizes.get(c).ok_or_else(|| Error::UnknownCenter(c.clone()))?;
            by_group.entry(groups.group(size)).or_default().extend(scores.iter().copied());
        }
        Ok(Self {
            per_center: by_center
                .iter()
                .map(|(c, s)| (c.clone(), aggregate(s.iter().copied())))
                .collect(),
            per_group: by_group
                .iter()
                .map(|(g, s)| (*g, aggregate(s.iter().copied())))
                .collect(),
            overall: aggregate(per_record.iter()),
            per_record,
        })
    }
}
