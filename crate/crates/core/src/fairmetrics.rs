//! Grouped classification metrics: per-group TPR/FPR, the equalized-odds
//! family, AUROC, AUPRC and interval estimates.
//!
//! Every function here is a pure function of its arguments.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// z-quantile used for every two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// The two-level protected attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Male,
    Female,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Male, Group::Female];

    pub fn name(self) -> &'static str {
        match self {
            Group::Male => "male",
            Group::Female => "female",
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::Male => Group::Female,
            Group::Female => Group::Male,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Group::Male),
            "female" | "f" => Ok(Group::Female),
            other => Err(Error::Unknown {
                kind: "group level",
                name: other.to_string(),
            }),
        }
    }
}

/// Scores, binary labels and group membership for one evaluated cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedPredictions<T> {
    scores: Vec<T>,
    labels: Vec<bool>,
    groups: Vec<Group>,
}

impl<T: Scalar> GroupedPredictions<T> {
    pub fn new(scores: Vec<T>, labels: Vec<bool>, groups: Vec<Group>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("predictions"));
        }
        if scores.len() != labels.len() || scores.len() != groups.len() {
            return Err(Error::LengthMismatch(format!(
                "{} scores, {} labels, {} groups",
                scores.len(),
                labels.len(),
                groups.len()
            )));
        }
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s >= T::zero() && **s <= T::one()))
        {
            return Err(Error::invalid(format!("score {s} at index {i} is outside [0, 1]")));
        }
        Ok(GroupedPredictions {
            scores,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Same predictions with the two group levels swapped.
    pub fn relabeled(&self) -> Self {
        GroupedPredictions {
            scores: self.scores.clone(),
            labels: self.labels.clone(),
            groups: self.groups.iter().map(|g| g.other()).collect(),
        }
    }

    pub fn count(&self, group: Group) -> usize {
        self.groups.iter().filter(|&&g| g == group).count()
    }

    fn require_both_groups(&self) -> Result<()> {
        for g in Group::BOTH {
            if self.count(g) == 0 {
                return Err(Error::MissingGroup(g.name().to_string()));
            }
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> Self {
        GroupedPredictions {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
        }
    }
}

/// Confusion-cell counts for one group at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }
}

/// TPR/FPR of one group. `None` marks a rate whose denominator is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePair<T> {
    pub tpr: Option<T>,
    pub fpr: Option<T>,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates<T> {
    pub threshold: T,
    pub male: RatePair<T>,
    pub female: RatePair<T>,
}

impl<T: Scalar> GroupRates<T> {
    pub fn get(&self, group: Group) -> &RatePair<T> {
        match group {
            Group::Male => &self.male,
            Group::Female => &self.female,
        }
    }

    fn defined(&self, group: Group, which: &'static str) -> Result<T> {
        let pair = self.get(group);
        let (value, denominator) = match which {
            "tpr" => (pair.tpr, "positive"),
            _ => (pair.fpr, "negative"),
        };
        value.ok_or_else(|| Error::UndefinedRate {
            group: group.name().to_string(),
            rate: which,
            denominator,
        })
    }
}

fn ratio<T: Scalar>(num: usize, den: usize) -> Option<T> {
    (den > 0).then(|| T::lit(num as f64 / den as f64))
}

/// Per-group TPR and FPR with prediction `score >= threshold`.
pub fn group_rates<T: Scalar>(preds: &GroupedPredictions<T>, threshold: T) -> Result<GroupRates<T>> {
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(Error::invalid(format!("threshold {threshold} is outside [0, 1]")));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    preds.require_both_groups()?;

    let mut counts = [ConfusionCounts::default(); 2];
    for ((&s, &y), &g) in preds.scores.iter().zip(&preds.labels).zip(&preds.groups) {
        let c = &mut counts[g as usize];
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let pair = |c: ConfusionCounts| RatePair {
        tpr: ratio(c.tp, c.positives()),
        fpr: ratio(c.fp, c.negatives()),
        counts: c,
    };
    Ok(GroupRates {
        threshold,
        male: pair(counts[Group::Male as usize]),
        female: pair(counts[Group::Female as usize]),
    })
}

/// The equalized-odds family. Gaps are signed male minus female.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualizedOdds<T> {
    pub eo: T,
    pub eo_tp: T,
    pub eo_fp: T,
}

pub fn equalized_odds<T: Scalar>(rates: &GroupRates<T>) -> Result<EqualizedOdds<T>> {
    let eo_tp = rates.defined(Group::Male, "tpr")? - rates.defined(Group::Female, "tpr")?;
    let eo_fp = rates.defined(Group::Male, "fpr")? - rates.defined(Group::Female, "fpr")?;
    Ok(EqualizedOdds {
        eo: eo_tp.abs().max(eo_fp.abs()),
        eo_tp,
        eo_fp,
    })
}

fn check_scores<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    Ok(())
}

/// Indices ordered by descending score.
fn descending_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve in its Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("AUROC needs both positive and negative samples"));
    }
    // Walk tie blocks in descending order, counting negatives strictly below.
    let order = descending_order(scores);
    let mut wins = 0.0f64;
    let mut neg_above = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_block, mut neg_block) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_block += 1;
            } else {
                neg_block += 1;
            }
            j += 1;
        }
        let neg_below = n_neg - neg_above - neg_block;
        wins += pos_block as f64 * (neg_below as f64 + 0.5 * neg_block as f64);
        neg_above += neg_block;
        i = j;
    }
    Ok(T::lit(wins / (n_pos as f64 * n_neg as f64)))
}

/// One point of a threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Cumulative confusion counts at each distinct score, highest first.
pub fn threshold_sweep<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Vec<SweepPoint>> {
    check_scores(scores, labels)?;
    let order = descending_order(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(SweepPoint {
            threshold: s.as_f64(),
            tp,
            fp,
        });
    }
    Ok(out)
}

/// Area under the precision-recall step curve (average precision).
pub fn auprc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::SingleClass("AUPRC needs at least one positive sample"));
    }
    let mut area = 0.0f64;
    let mut prev_recall = 0.0f64;
    for p in threshold_sweep(scores, labels)? {
        let recall = p.tp as f64 / n_pos as f64;
        let precision = p.tp as f64 / (p.tp + p.fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(T::lit(area))
}

/// A closed interval around a point estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub low: T,
    pub high: T,
}

impl<T: Scalar> Interval<T> {
    pub fn point(x: T) -> Self {
        Interval { low: x, high: x }
    }

    pub fn contains(&self, x: T) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn overlaps(&self, other: &Interval<T>) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

pub fn mean<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().sum::<T>() / T::lit(values.len() as f64)
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd<T: Scalar>(values: &[T]) -> T {
    let m = mean(values);
    let ss: T = values.iter().map(|&v| (v - m) * (v - m)).sum();
    (ss / T::lit(values.len() as f64 - 1.0)).sqrt()
}

/// Normal-approximation 95% interval over repeated runs:
/// `mean ± 1.96 * sd / sqrt(n)`, unclamped.
pub fn confidence_interval<T: Scalar>(values: &[T]) -> Result<Interval<T>> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in confidence interval input"));
    }
    let m = mean(values);
    let half = T::lit(Z_95) * sample_sd(values) / T::lit(values.len() as f64).sqrt();
    Ok(Interval {
        low: m - half,
        high: m + half,
    })
}

/// Where a report's intervals came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// Single evaluation without resampling: every interval is the point itself.
    None,
    /// Normal approximation across seed repeats.
    Seeds,
    /// Percentile bootstrap over samples.
    Bootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricIntervals<T> {
    pub eo: Interval<T>,
    pub eo_tp: Interval<T>,
    pub eo_fp: Interval<T>,
    pub auroc: Interval<T>,
    pub auprc: Interval<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub male: usize,
    pub female: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport<T> {
    pub threshold: T,
    pub eo: T,
    pub eo_tp: T,
    pub eo_fp: T,
    pub auroc: T,
    pub auprc: T,
    pub ci: MetricIntervals<T>,
    pub ci_method: CiMethod,
    pub n_per_group: GroupCounts,
    /// Per-group rates at `threshold`; absent for seed aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<GroupRates<T>>,
}

impl<T: Scalar> FairnessReport<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

struct PointMetrics<T> {
    odds: EqualizedOdds<T>,
    auroc: T,
    auprc: T,
    rates: GroupRates<T>,
}

fn point_metrics<T: Scalar>(preds: &GroupedPredictions<T>, threshold: T) -> Result<PointMetrics<T>> {
    let rates = group_rates(preds, threshold)?;
    let odds = equalized_odds(&rates)?;
    Ok(PointMetrics {
        odds,
        auroc: auroc(&preds.scores, &preds.labels)?,
        auprc: auprc(&preds.scores, &preds.labels)?,
        rates,
    })
}

/// All fairness and performance metrics of one evaluation.
pub fn fairness_report<T: Scalar>(preds: &GroupedPredictions<T>, threshold: T) -> Result<FairnessReport<T>> {
    let m = point_metrics(preds, threshold)?;
    Ok(FairnessReport {
        threshold,
        eo: m.odds.eo,
        eo_tp: m.odds.eo_tp,
        eo_fp: m.odds.eo_fp,
        auroc: m.auroc,
        auprc: m.auprc,
        ci: MetricIntervals {
            eo: Interval::point(m.odds.eo),
            eo_tp: Interval::point(m.odds.eo_tp),
            eo_fp: Interval::point(m.odds.eo_fp),
            auroc: Interval::point(m.auroc),
            auprc: Interval::point(m.auprc),
        },
        ci_method: CiMethod::None,
        n_per_group: GroupCounts {
            male: preds.count(Group::Male),
            female: preds.count(Group::Female),
        },
        rates: Some(m.rates),
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Like [`fairness_report`], with percentile-bootstrap intervals from
/// `n_resamples` resamples stratified by (group, label).
///
/// Resamples on which some metric is undefined are skipped. Each interval is
/// widened to cover its point estimate when the resampling distribution is
/// skewed away from it.
pub fn fairness_report_bootstrap<T: Scalar>(
    preds: &GroupedPredictions<T>,
    threshold: T,
    n_resamples: usize,
    seed: u64,
) -> Result<FairnessReport<T>> {
    let mut report = fairness_report(preds, threshold)?;
    if n_resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for i in 0..preds.len() {
        strata[preds.groups[i] as usize * 2 + preds.labels[i] as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: [Vec<f64>; 5] = Default::default();
    let mut idx = Vec::with_capacity(preds.len());
    for _ in 0..n_resamples {
        idx.clear();
        for s in &strata {
            for _ in 0..s.len() {
                idx.push(s[rng.random_range(0..s.len())]);
            }
        }
        if let Ok(m) = point_metrics(&preds.select(&idx), threshold) {
            let vals = [m.odds.eo, m.odds.eo_tp, m.odds.eo_fp, m.auroc, m.auprc];
            for (d, v) in draws.iter_mut().zip(vals) {
                d.push(v.as_f64());
            }
        }
    }
    if draws[0].len() < 2 {
        return Err(Error::invalid("too few valid bootstrap resamples"));
    }
    let interval = |d: &mut Vec<f64>, point: T| {
        d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        Interval {
            low: T::lit(percentile(d, 0.025)).min(point),
            high: T::lit(percentile(d, 0.975)).max(point),
        }
    };
    report.ci = MetricIntervals {
        eo: interval(&mut draws[0], report.eo),
        eo_tp: interval(&mut draws[1], report.eo_tp),
        eo_fp: interval(&mut draws[2], report.eo_fp),
        auroc: interval(&mut draws[3], report.auroc),
        auprc: interval(&mut draws[4], report.auprc),
    };
    report.ci_method = CiMethod::Bootstrap;
    Ok(report)
}

/// Mean of repeated reports (one per seed) with normal 95% intervals.
///
/// The aggregate `eo` is the mean of per-run EO values, so it need not equal
/// `max(|eo_tp|, |eo_fp|)` of the mean gaps. `n_per_group` sums the counts of
/// every run.
pub fn aggregate_reports<T: Scalar>(reports: &[FairnessReport<T>]) -> Result<FairnessReport<T>> {
    if reports.len() < 2 {
        return Err(Error::invalid(format!(
            "seed aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let collect = |f: fn(&FairnessReport<T>) -> T| -> Vec<T> { reports.iter().map(f).collect() };
    let eo = collect(|r| r.eo);
    let eo_tp = collect(|r| r.eo_tp);
    let eo_fp = collect(|r| r.eo_fp);
    let au = collect(|r| r.auroc);
    let ap = collect(|r| r.auprc);
    Ok(FairnessReport {
        threshold: reports[0].threshold,
        eo: mean(&eo),
        eo_tp: mean(&eo_tp),
        eo_fp: mean(&eo_fp),
        auroc: mean(&au),
        auprc: mean(&ap),
        ci: MetricIntervals {
            eo: confidence_interval(&eo)?,
            eo_tp: confidence_interval(&eo_tp)?,
            eo_fp: confidence_interval(&eo_fp)?,
            auroc: confidence_interval(&au)?,
            auprc: confidence_interval(&ap)?,
        },
        ci_method: CiMethod::Seeds,
        n_per_group: GroupCounts {
            male: reports.iter().map(|r| r.n_per_group.male).sum(),
            female: reports.iter().map(|r| r.n_per_group.female).sum(),
        },
        rates: None,
    })
}
