//! Agreement statistics and nonparametric tests.
//!
//! Conventions: quantiles interpolate linearly between order statistics;
//! all tests are two-sided; Mann-Whitney is exact for tie-free samples with
//! `max(n, m) <= 10`, Wilcoxon signed-rank is exact for `n <= 20` (ties are
//! handled exactly through doubled mid-ranks). Larger samples use the normal
//! approximation with tie and continuity correction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const MWU_EXACT_MAX: usize = 10;
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyDice {
    /// Two empty masks agree perfectly.
    #[default]
    Perfect,
    /// Two empty masks give no score.
    Skip,
}

/// Dice overlap in percent; two empty masks score 100.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    Ok(dice_with(a, b, EmptyDice::Perfect)?.expect("perfect policy always scores"))
}

pub fn dice_with(a: &[bool], b: &[bool], empty: EmptyDice) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "mask sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(match empty {
            EmptyDice::Perfect => Some(100.0),
            EmptyDice::Skip => None,
        });
    }
    Ok(Some(100.0 * 2.0 * inter as f64 / (na + nb) as f64))
}

/// A finite (automated, manual) measurement pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub auto: f64,
    pub manual: f64,
}

impl Pair {
    pub fn new(auto: f64, manual: f64) -> Result<Self> {
        if !(auto.is_finite() && manual.is_finite()) {
            return Err(Error::InvalidInput("paired values must be finite".into()));
        }
        Ok(Pair { auto, manual })
    }
}

/// Optional stratification keys carried by a series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub dataset: Option<String>,
    pub disease: Option<String>,
    pub vendor: Option<String>,
    pub field_strength: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub pairs: Vec<Pair>,
    #[serde(default)]
    pub strata: Strata,
}

impl PairedSeries {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        Ok(PairedSeries {
            pairs: pairs
                .into_iter()
                .map(|(a, m)| Pair::new(a, m))
                .collect::<Result<_>>()?,
            strata: Strata::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.auto - p.manual).collect()
    }
}

pub fn absolute_errors(series: &PairedSeries) -> Vec<f64> {
    series.pairs.iter().map(|p| (p.auto - p.manual).abs()).collect()
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample value".into()));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Median and interquartile range (Q3 - Q1).
pub fn median_iqr(xs: &[f64]) -> Result<(f64, f64)> {
    let s = sorted_finite(xs)?;
    Ok((quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)))
}

/// Mean and sample standard deviation (n - 1); SD is 0 for a singleton.
pub fn mean_sd(xs: &[f64]) -> Result<(f64, f64)> {
    sorted_finite(xs)?;
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub means: Vec<f64>,
    pub differences: Vec<f64>,
}

/// Mean bias of (auto - manual) with limits of agreement at ±1.96 SD.
pub fn bland_altman(series: &PairedSeries) -> Result<BlandAltman> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("Bland-Altman needs at least two pairs".into()));
    }
    let differences = series.differences();
    let (bias, sd) = mean_sd(&differences)?;
    Ok(BlandAltman {
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
        means: series.pairs.iter().map(|p| 0.5 * (p.auto + p.manual)).collect(),
        differences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided t-test p-value (n - 2 df).
pub fn pearson(series: &PairedSeries) -> Result<Correlation> {
    let n = series.len();
    if n < 2 {
        return Err(Error::InvalidInput("correlation needs at least two pairs".into()));
    }
    let nf = n as f64;
    let mx = series.pairs.iter().map(|p| p.auto).sum::<f64>() / nf;
    let my = series.pairs.iter().map(|p| p.manual).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for p in &series.pairs {
        let dx = p.auto - mx;
        let dy = p.manual - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p_value = if n < 3 {
        1.0
    } else if r.abs() == 1.0 {
        0.0
    } else {
        let df = nf - 2.0;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of tie groups among `xs`.
fn tie_sizes(xs: &[f64]) -> Vec<usize> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        out.push(j - i + 1);
        i = j + 1;
    }
    out
}

fn two_sided_from_counts(counts: &[u128], observed: usize) -> f64 {
    let total: u128 = counts.iter().sum();
    let lower: u128 = counts[..=observed].iter().sum();
    let upper: u128 = counts[observed..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total as f64).min(1.0)
}

fn normal_two_sided(z: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.sf(z)).clamp(0.0, 1.0)
}

/// Frequencies of the Mann-Whitney U statistic for sample sizes n and m,
/// indexed by U in `0..=n*m`.
pub fn mann_whitney_distribution(n: usize, m: usize) -> Vec<u128> {
    // table[i][j] holds the U distribution for sizes (i, j); built row by row
    let max_u = n * m;
    let mut prev: Vec<Vec<u128>> = (0..=m).map(|_| vec![1]).collect(); // i = 0
    for i in 1..=n {
        let mut cur: Vec<Vec<u128>> = Vec::with_capacity(m + 1);
        cur.push(vec![1]); // j = 0
        for j in 1..=m {
            // f(i,j,u) = f(i-1,j,u-j) + f(i,j-1,u)
            let len = i * j + 1;
            let mut d = vec![0u128; len];
            for (u, &c) in prev[j].iter().enumerate() {
                d[u + j] += c;
            }
            for (u, &c) in cur[j - 1].iter().enumerate() {
                d[u] += c;
            }
            cur.push(d);
        }
        prev = cur;
    }
    let dist = prev.swap_remove(m);
    debug_assert_eq!(dist.len(), max_u + 1);
    dist
}

/// Two-sided Mann-Whitney U test. The statistic is U of `xs`.
pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<TestResult> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney needs two non-empty samples".into()));
    }
    let n = xs.len();
    let m = ys.len();
    let all: Vec<f64> = xs.iter().chain(ys).copied().collect();
    sorted_finite(&all)?;
    let ranks = average_ranks(&all);
    let rank_sum: f64 = ranks[..n].iter().sum();
    let u = rank_sum - (n * (n + 1)) as f64 / 2.0;
    let ties = tie_sizes(&all);
    let has_ties = ties.iter().any(|&t| t > 1);

    if !has_ties && n.max(m) <= MWU_EXACT_MAX {
        let dist = mann_whitney_distribution(n, m);
        return Ok(TestResult {
            statistic: u,
            p_value: two_sided_from_counts(&dist, u.round() as usize),
            method: TestMethod::Exact,
            n,
            m: Some(m),
        });
    }

    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(TestResult {
        statistic: u,
        p_value,
        method: TestMethod::NormalApproximation,
        n,
        m: Some(m),
    })
}

/// Two-sided Wilcoxon signed-rank test of `diffs` against zero. Zero
/// differences are dropped; the statistic is min(W+, W-).
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestResult> {
    if diffs.is_empty() {
        return Err(Error::InvalidInput("Wilcoxon needs a non-empty sample".into()));
    }
    sorted_finite(diffs)?;
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: TestMethod::Exact,
            n: 0,
            m: None,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        // mid-ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u128; max + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let observed = (2.0 * w_plus).round() as usize;
        return Ok(TestResult {
            statistic,
            p_value: two_sided_from_counts(&counts, observed),
            method: TestMethod::Exact,
            n,
            m: None,
        });
    }

    let nf = n as f64;
    let tie_term: f64 = tie_sizes(&abs).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - nf * (nf + 1.0) / 4.0).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(TestResult {
        statistic,
        p_value,
        method: TestMethod::NormalApproximation,
        n,
        m: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mark {
    #[serde(rename = "")]
    None,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
    #[serde(rename = "***")]
    Three,
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mark::None => "",
            Mark::One => "*",
            Mark::Two => "**",
            Mark::Three => "***",
        })
    }
}

pub const SIGNIFICANCE_LEVELS: [f64; 3] = [0.01, 0.001, 0.0001];

/// Bonferroni-corrected significance mark: the strongest level with
/// `p < level / m`.
pub fn bonferroni_mark(p: f64, m: usize) -> Result<Mark> {
    if m == 0 {
        return Err(Error::InvalidInput("number of tests must be at least 1".into()));
    }
    let mf = m as f64;
    let marks = [Mark::One, Mark::Two, Mark::Three];
    Ok(SIGNIFICANCE_LEVELS
        .iter()
        .zip(marks)
        .filter(|(level, _)| p < *level / mf)
        .map(|(_, mark)| mark)
        .last()
        .unwrap_or(Mark::None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Disease,
    Vendor,
    FieldStrength,
    ScannerModel,
    Dataset,
}

impl GroupKey {
    pub const ALL: [GroupKey; 5] = [
        GroupKey::Dataset,
        GroupKey::Disease,
        GroupKey::Vendor,
        GroupKey::FieldStrength,
        GroupKey::ScannerModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Disease => "disease",
            GroupKey::Vendor => "vendor",
            GroupKey::FieldStrength => "field_strength",
            GroupKey::ScannerModel => "scanner_model",
            GroupKey::Dataset => "dataset",
        }
    }
}

/// One case as seen by the stratified report: its group values and metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratRecord {
    pub case_id: String,
    pub groups: BTreeMap<GroupKey, String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    MedianIqr,
    MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    /// Median or mean, per the report's kind.
    pub center: f64,
    /// IQR or SD, per the report's kind.
    pub spread: f64,
    pub wilcoxon_p: f64,
    pub mark: Mark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n_cases: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub key: GroupKey,
    pub kind: SummaryKind,
    /// Bonferroni factor: the number of groups.
    pub tests: usize,
    pub rows: Vec<GroupRow>,
}

pub const UNKNOWN_GROUP: &str = "unknown";

/// Groups records by `key` (missing keys fall into "unknown") and summarises
/// each metric per group, with Wilcoxon-vs-zero marks corrected for the
/// number of groups. Scanner-model reports use mean (SD), others median (IQR).
pub fn stratified_report(records: &[StratRecord], key: GroupKey, metrics: &[&str]) -> Result<StratifiedReport> {
    let mut groups: BTreeMap<String, Vec<&StratRecord>> = BTreeMap::new();
    for r in records {
        let g = r.groups.get(&key).cloned().unwrap_or_else(|| UNKNOWN_GROUP.to_string());
        groups.entry(g).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("no records to stratify".into()));
    }
    let kind = if key == GroupKey::ScannerModel {
        SummaryKind::MeanSd
    } else {
        SummaryKind::MedianIqr
    };
    let tests = groups.len();
    let rows = groups
        .into_iter()
        .map(|(group, members)| {
            let mut summaries = BTreeMap::new();
            for &metric in metrics {
                let values: Vec<f64> = members.iter().filter_map(|r| r.metrics.get(metric).copied()).collect();
                if values.is_empty() {
                    continue;
                }
                let (center, spread) = match kind {
                    SummaryKind::MedianIqr => median_iqr(&values)?,
                    SummaryKind::MeanSd => mean_sd(&values)?,
                };
                let w = wilcoxon_signed_rank(&values)?;
                summaries.insert(
                    metric.to_string(),
                    MetricSummary {
                        n: values.len(),
                        center,
                        spread,
                        wilcoxon_p: w.p_value,
                        mark: bonferroni_mark(w.p_value, tests)?,
                    },
                );
            }
            Ok(GroupRow {
                group,
                n_cases: members.len(),
                metrics: summaries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StratifiedReport { key, kind, tests, rows })
}
