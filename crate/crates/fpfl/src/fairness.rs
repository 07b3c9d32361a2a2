//! Group-fairness specification, hard (decision-based) metric evaluation,
//! and constraint values from aggregated surrogate sums.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, Batch, Features, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetric {
    FnrParity,
    AccuracyParity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetRule {
    All,
    PositivesOnly,
}

/// Which disparity to constrain, over how many groups, and the tolerance.
///
/// The conditioning-subset rule is implied by the metric (FNR parity
/// conditions on positive labels, accuracy parity uses every sample), so it
/// is exposed as a derived property rather than a free field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessSpec {
    pub metric: FairnessMetric,
    pub group_count: usize,
    pub alpha: f64,
}

impl FairnessSpec {
    pub fn new(metric: FairnessMetric, group_count: usize, alpha: f64) -> Result<Self> {
        let spec = FairnessSpec {
            metric,
            group_count,
            alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 groups, got {}",
                self.group_count
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be a nonnegative finite number, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn subset_rule(&self) -> SubsetRule {
        match self.metric {
            FairnessMetric::FnrParity => SubsetRule::PositivesOnly,
            FairnessMetric::AccuracyParity => SubsetRule::All,
        }
    }
}

/// Hard rates for one group (or the overall population). Rates whose
/// denominator is empty are `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRates {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub positive_rate: Option<f64>,
    pub precision: Option<f64>,
}

/// Decision-based accuracy and fairness gaps on a labeled, grouped dataset.
///
/// Every gap is the maximum over groups of the absolute deviation of the
/// group's rate from the overall rate. Groups with an undefined rate are
/// excluded from that gap and listed in `undefined`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub accuracy: f64,
    pub fnr_gap: Option<f64>,
    pub eo_gap: Option<f64>,
    pub demp_gap: Option<f64>,
    pub pp_gap: Option<f64>,
    pub acc_gap: Option<f64>,
    pub overall: GroupRates,
    pub groups: Vec<GroupRates>,
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fal_n: usize,
    correct: usize,
    count: usize,
}

impl Confusion {
    fn add(&mut self, label: u32, decision: u32, binary: bool) {
        self.count += 1;
        if label == decision {
            self.correct += 1;
        }
        if binary {
            match (label, decision) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fal_n += 1,
                (0, 1) => self.fp += 1,
                (0, 0) => self.tn += 1,
                _ => {}
            }
        }
    }

    fn rates(&self, binary: bool) -> GroupRates {
        let ratio = |num: usize, den: usize| {
            if den > 0 {
                Some(num as f64 / den as f64)
            } else {
                None
            }
        };
        GroupRates {
            count: self.count,
            accuracy: ratio(self.correct, self.count),
            fnr: if binary {
                ratio(self.fal_n, self.tp + self.fal_n)
            } else {
                None
            },
            fpr: if binary {
                ratio(self.fp, self.fp + self.tn)
            } else {
                None
            },
            positive_rate: if binary {
                ratio(self.tp + self.fp, self.count)
            } else {
                None
            },
            precision: if binary {
                ratio(self.tp, self.tp + self.fp)
            } else {
                None
            },
        }
    }
}

/// Hard decisions for a batch: label 1 when the sigmoid output exceeds the
/// threshold (ties resolve to 0), argmax for softmax heads. Runs in chunks
/// so large image sets do not blow up intermediate buffers.
pub fn predict_decisions(model: &ModelParams, data: &Batch, threshold: f64) -> Result<Vec<u32>> {
    const CHUNK: usize = 512;
    let n = data.len();
    let binary = model.arch.is_binary();
    let mut decisions = Vec::with_capacity(n);
    let mut at = 0;
    while at < n {
        let hi = (at + CHUNK).min(n);
        let rows: Vec<usize> = (at..hi).collect();
        let chunk = data.select(&rows);
        let out = forward(model, &chunk)?;
        if binary {
            for &p in out.column(0) {
                decisions.push(u32::from(p > threshold));
            }
        } else {
            for row in out.axis_iter(Axis(0)) {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                decisions.push(best as u32);
            }
        }
        at = hi;
    }
    Ok(decisions)
}

/// Build the report from precomputed hard decisions.
pub fn report_from_decisions(
    decisions: &[u32],
    labels: &[u32],
    groups: &[u32],
    group_count: usize,
    binary: bool,
) -> Result<GroupMetricsReport> {
    if decisions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::DimensionMismatch("decisions/labels/groups".into()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut overall = Confusion::default();
    let mut per_group = vec![Confusion::default(); group_count];
    for ((&d, &y), &g) in decisions.iter().zip(labels).zip(groups) {
        let g = g as usize;
        if g >= group_count {
            return Err(Error::DimensionMismatch(format!(
                "group id {g} out of range for {group_count} groups"
            )));
        }
        overall.add(y, d, binary);
        per_group[g].add(y, d, binary);
    }

    let overall_rates = overall.rates(binary);
    let group_rates: Vec<GroupRates> = per_group.iter().map(|c| c.rates(binary)).collect();

    let mut undefined = Vec::new();
    let mut gap = |name: &str, pick: &dyn Fn(&GroupRates) -> Option<f64>| -> Option<f64> {
        let base = pick(&overall_rates)?;
        let mut best: Option<f64> = None;
        for (a, rates) in group_rates.iter().enumerate() {
            if rates.count == 0 {
                continue;
            }
            match pick(rates) {
                Some(v) => {
                    let dev = (v - base).abs();
                    best = Some(best.map_or(dev, |b: f64| b.max(dev)));
                }
                None => undefined.push(format!("group {a}: {name} undefined")),
            }
        }
        best
    };

    let acc_gap = gap("accuracy", &|r| r.accuracy);
    let fnr_gap = gap("fnr", &|r| r.fnr);
    let fpr_gap = gap("fpr", &|r| r.fpr);
    let demp_gap = gap("positive_rate", &|r| r.positive_rate);
    let pp_gap = gap("precision", &|r| r.precision);
    // Equalized odds deviates over both conditions Y=1 and Y=0.
    let eo_gap = match (fnr_gap, fpr_gap) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };

    Ok(GroupMetricsReport {
        accuracy: overall_rates.accuracy.unwrap_or(0.0),
        fnr_gap,
        eo_gap,
        demp_gap,
        pp_gap,
        acc_gap,
        overall: overall_rates,
        groups: group_rates,
        undefined,
    })
}

/// Evaluate hard accuracy and all fairness gaps of `model` on a labeled,
/// grouped dataset.
pub fn evaluate_report(
    model: &ModelParams,
    data: &Batch,
    group_count: usize,
    threshold: f64,
) -> Result<GroupMetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let binary = model.arch.is_binary();
    let decisions = predict_decisions(model, data, threshold)?;
    report_from_decisions(&decisions, &data.labels, &data.groups, group_count, binary)
}

/// Constraint values from aggregated per-group surrogate sums and counts:
/// with pooled ratio R = sum(F) / sum(n), h_a = |R - F_a/n_a| - alpha and
/// g_a = max(h_a, 0). Groups with a zero count are reported inactive
/// (h_a = -alpha, g_a = 0).
pub fn constraint_values_from_sums(
    f_sums: &[f64],
    counts: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if f_sums.len() != counts.len() {
        return Err(Error::DimensionMismatch("f_sums vs counts".into()));
    }
    if counts.iter().any(|&c| c < 0.0) {
        return Err(Error::InvalidConfig(
            "negative group count after sanitation".into(),
        ));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllGroupsEmpty);
    }
    let pooled = f_sums.iter().sum::<f64>() / total;
    let mut h = Vec::with_capacity(f_sums.len());
    let mut g = Vec::with_capacity(f_sums.len());
    for (&f, &n) in f_sums.iter().zip(counts) {
        if n <= 0.0 {
            h.push(-alpha);
            g.push(0.0);
            continue;
        }
        let ha = (pooled - f / n).abs() - alpha;
        h.push(ha);
        g.push(ha.max(0.0));
    }
    Ok((h, g))
}

/// Pooled ratio helper shared with the constrained-update path.
pub fn pooled_ratio(f_sums: &[f64], counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllGroupsEmpty);
    }
    Ok(f_sums.iter().sum::<f64>() / total)
}

/// Serialize a report as pretty JSON with stable field names.
pub fn report_to_json(report: &GroupMetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Convenience: build a `Batch` borrowing nothing, from parts.
pub fn batch_from_parts(features: Features, labels: Vec<u32>, groups: Vec<u32>) -> Batch {
    Batch {
        features,
        labels,
        groups,
    }
}
