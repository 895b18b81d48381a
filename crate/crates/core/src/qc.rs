//! Rule-based quality control of ground-truth and automated segmentations.
//!
//! Two entry points share one rule set:
//! - [`run_qa_gt`] screens ground-truth segmentations (all eight rules);
//! - [`run_post_analysis_qc`] flags automated segmentations for review using
//!   the subset that applies to predictions plus biomarker plausibility.
//!
//! Outlier, coverage and gap rules inspect the segmentation as loaded; volume
//! rules see it after [`repair_small_outliers`]. Thresholds are strict:
//! outliers `> 10%`, coverage `< 30%`, SV difference `> 25%`, SV `<= 0`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::biomarkers::{compute_biomarkers, BiomarkerConfig, BiomarkerSet};
use crate::case::{CineCase, GEOMETRY_TOLERANCE};
use crate::components::{connected_components, foreground_components, Component};
use crate::error::{Error, Result};
use crate::volume::{Geometry, Label, SegmentationFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriterionCode {
    UnexpectedLabel,
    ZeroVentricularVolume,
    MetadataMismatch,
    GlobalOutlierGt10,
    LabelOutlierGt10,
    LabelCoverageLt30,
    SliceGap,
    NonpositiveSv,
    SvDiffGt25,
    ImplausibleBiomarker,
}

impl CriterionCode {
    pub fn as_str(self) -> &'static str {
        match self {
            CriterionCode::UnexpectedLabel => "UNEXPECTED_LABEL",
            CriterionCode::ZeroVentricularVolume => "ZERO_VENTRICULAR_VOLUME",
            CriterionCode::MetadataMismatch => "METADATA_MISMATCH",
            CriterionCode::GlobalOutlierGt10 => "GLOBAL_OUTLIER_GT10",
            CriterionCode::LabelOutlierGt10 => "LABEL_OUTLIER_GT10",
            CriterionCode::LabelCoverageLt30 => "LABEL_COVERAGE_LT30",
            CriterionCode::SliceGap => "SLICE_GAP",
            CriterionCode::NonpositiveSv => "NONPOSITIVE_SV",
            CriterionCode::SvDiffGt25 => "SV_DIFF_GT25",
            CriterionCode::ImplausibleBiomarker => "IMPLAUSIBLE_BIOMARKER",
        }
    }
}

impl fmt::Display for CriterionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Direction in which `measured` violates `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    Above,
    Below,
    AtOrBelow,
}

impl Violation {
    fn violated(self, measured: f64, threshold: f64) -> bool {
        match self {
            Violation::Above => measured > threshold,
            Violation::Below => measured < threshold,
            Violation::AtOrBelow => measured <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcCriterion {
    pub code: CriterionCode,
    /// Label or biomarker the entry refers to, for per-label rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Frame holding the worst measured value, for per-frame rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    pub measured: f64,
    pub threshold: f64,
    pub triggered: bool,
}

impl QcCriterion {
    pub fn evaluate(code: CriterionCode, measured: f64, threshold: f64, violation: Violation) -> Self {
        QcCriterion {
            code,
            target: None,
            frame: None,
            measured,
            threshold,
            triggered: violation.violated(measured, threshold),
        }
    }

    fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }

    fn at_frame(mut self, frame: Option<usize>) -> Self {
        self.frame = frame;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QcMode {
    QaGt,
    PostAnalysis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub label: Label,
    pub removed_voxels: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub case_id: String,
    pub mode: QcMode,
    pub flagged: bool,
    pub criteria: Vec<QcCriterion>,
    pub repairs: Vec<Repair>,
    /// Conventions behind measured values that are not fixed by the rules themselves.
    #[serde(default)]
    pub assumptions: Vec<String>,
}

impl QcReport {
    fn new(case_id: &str, mode: QcMode, criteria: Vec<QcCriterion>, repairs: Vec<Repair>, assumptions: Vec<String>) -> Self {
        QcReport {
            case_id: case_id.to_string(),
            mode,
            flagged: criteria.iter().any(|c| c.triggered),
            criteria,
            repairs,
            assumptions,
        }
    }

    pub fn triggered(&self) -> impl Iterator<Item = &QcCriterion> {
        self.criteria.iter().filter(|c| c.triggered)
    }

    /// Distinct triggered criterion codes in rule order.
    pub fn triggered_codes(&self) -> Vec<CriterionCode> {
        let mut codes: Vec<CriterionCode> = self.triggered().map(|c| c.code).collect();
        codes.sort();
        codes.dedup();
        codes
    }
}

/// Closed or half-open plausibility interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    /// When true the lower bound itself is implausible.
    #[serde(default)]
    pub exclusive_min: bool,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        let above_min = if self.exclusive_min { v > self.min } else { v >= self.min };
        above_min && v <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibleRanges {
    pub ef_pct: Range,
    pub volume_ml: Range,
    pub lvm_g: Range,
}

impl Default for PlausibleRanges {
    fn default() -> Self {
        PlausibleRanges {
            ef_pct: Range { min: 5.0, max: 90.0, exclusive_min: false },
            volume_ml: Range { min: 0.0, max: 700.0, exclusive_min: true },
            lvm_g: Range { min: 10.0, max: 500.0, exclusive_min: true },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    /// Outlier fraction above which a scope is flagged (and not repaired).
    pub outlier_fraction: f64,
    pub coverage_fraction: f64,
    pub sv_difference_fraction: f64,
    pub geometry_tolerance: f64,
    pub plausible: PlausibleRanges,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            outlier_fraction: 0.10,
            coverage_fraction: 0.30,
            sv_difference_fraction: 0.25,
            geometry_tolerance: GEOMETRY_TOLERANCE,
            plausible: PlausibleRanges::default(),
        }
    }
}

impl QcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("coverage_fraction", self.coverage_fraction),
            ("sv_difference_fraction", self.sv_difference_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

pub const SV_DIFFERENCE_FORMULA: &str = "100*|SV_LV - SV_RV| / max(|SV_LV|, |SV_RV|)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierScope {
    Global,
    Label(Label),
}

fn outside_largest(components: &[Component]) -> (usize, usize) {
    let total: usize = components.iter().map(|c| c.voxel_count).sum();
    let largest = components.first().map_or(0, |c| c.voxel_count);
    (total - largest, total)
}

fn scope_components(frame: &SegmentationFrame, scope: OutlierScope) -> Vec<Component> {
    match scope {
        OutlierScope::Global => foreground_components(frame),
        OutlierScope::Label(l) => connected_components(frame, l),
    }
}

/// Share of the scope's voxels lying outside its largest component; 0 for
/// an empty scope.
pub fn outlier_fraction(frame: &SegmentationFrame, scope: OutlierScope) -> f64 {
    let (outside, total) = outside_largest(&scope_components(frame, scope));
    if total == 0 {
        0.0
    } else {
        outside as f64 / total as f64
    }
}

fn outlier_percent(frame: &SegmentationFrame, scope: OutlierScope) -> f64 {
    let (outside, total) = outside_largest(&scope_components(frame, scope));
    if total == 0 {
        0.0
    } else {
        100.0 * outside as f64 / total as f64
    }
}

/// Keeps only the largest component of every label whose outlier share is
/// at most `max_fraction`; removed voxels become background.
pub fn repair_small_outliers(frame: &SegmentationFrame, max_fraction: f64) -> (SegmentationFrame, Vec<(Label, usize)>) {
    let mut grid = frame.grid().clone();
    let mut repairs = Vec::new();
    for label in Label::FOREGROUND {
        let comps = connected_components(frame, label);
        if comps.len() < 2 {
            continue;
        }
        let (outside, total) = outside_largest(&comps);
        if 100.0 * outside as f64 / total as f64 > 100.0 * max_fraction {
            continue;
        }
        let cells = grid.as_mut_slice();
        for comp in &comps[1..] {
            for &i in &comp.voxels {
                cells[i] = Label::Background;
            }
        }
        repairs.push((label, outside));
    }
    let repaired = frame
        .with_grid(grid)
        .expect("repair preserves the grid shape");
    (repaired, repairs)
}

/// Share of segmented slices (any foreground) that contain `label`.
pub fn label_slice_coverage(frame: &SegmentationFrame, label: Label) -> Result<f64> {
    let (with, segmented) = coverage_counts(frame, label);
    if segmented == 0 {
        return Err(Error::Precondition("frame has no segmented slices".into()));
    }
    Ok(with as f64 / segmented as f64)
}

fn coverage_counts(frame: &SegmentationFrame, label: Label) -> (usize, usize) {
    (frame.slices_with(label).len(), frame.segmented_slices().len())
}

/// Number of slices between the first and last slice holding `label` that
/// do not hold it.
pub fn slice_gap_count(frame: &SegmentationFrame, label: Label) -> usize {
    let slices = frame.slices_with(label);
    match (slices.first(), slices.last()) {
        (Some(&lo), Some(&hi)) => (hi - lo + 1) - slices.len(),
        _ => 0,
    }
}

pub fn slice_gap_present(frame: &SegmentationFrame, label: Label) -> bool {
    slice_gap_count(frame, label) > 0
}

/// Worst value over frames: the largest for `Above`-style rules, smallest otherwise.
fn worst<I: Iterator<Item = (usize, f64)>>(values: I, largest: bool) -> Option<(usize, f64)> {
    values.fold(None, |acc, (f, v)| match acc {
        None => Some((f, v)),
        Some((_, best)) if (largest && v > best) || (!largest && v < best) => Some((f, v)),
        keep => keep,
    })
}

fn outlier_criteria(case: &CineCase, config: &QcConfig) -> Vec<QcCriterion> {
    let threshold = 100.0 * config.outlier_fraction;
    let mut out = Vec::new();
    let (frame, value) = worst(
        case.frames().iter().map(|(&i, f)| (i, outlier_percent(f, OutlierScope::Global))),
        true,
    )
    .unwrap_or((0, 0.0));
    out.push(
        QcCriterion::evaluate(CriterionCode::GlobalOutlierGt10, value, threshold, Violation::Above)
            .at_frame(Some(frame)),
    );
    for label in Label::FOREGROUND {
        let (frame, value) = worst(
            case.frames()
                .iter()
                .map(|(&i, f)| (i, outlier_percent(f, OutlierScope::Label(label)))),
            true,
        )
        .unwrap_or((0, 0.0));
        out.push(
            QcCriterion::evaluate(CriterionCode::LabelOutlierGt10, value, threshold, Violation::Above)
                .with_target(label.name())
                .at_frame(Some(frame)),
        );
    }
    out
}

fn coverage_criteria(case: &CineCase, config: &QcConfig) -> Vec<QcCriterion> {
    let threshold = 100.0 * config.coverage_fraction;
    Label::FOREGROUND
        .iter()
        .filter_map(|&label| {
            // frames without the label are left to the volume rules
            let per_frame = case.frames().iter().filter_map(|(&i, f)| {
                let (with, segmented) = coverage_counts(f, label);
                (with > 0).then(|| (i, 100.0 * with as f64 / segmented as f64))
            });
            worst(per_frame, false).map(|(frame, value)| {
                QcCriterion::evaluate(CriterionCode::LabelCoverageLt30, value, threshold, Violation::Below)
                    .with_target(label.name())
                    .at_frame(Some(frame))
            })
        })
        .collect()
}

fn gap_criteria(case: &CineCase) -> Vec<QcCriterion> {
    Label::FOREGROUND
        .iter()
        .map(|&label| {
            let (frame, gaps) = worst(
                case.frames().iter().map(|(&i, f)| (i, slice_gap_count(f, label) as f64)),
                true,
            )
            .unwrap_or((0, 0.0));
            QcCriterion::evaluate(CriterionCode::SliceGap, gaps, 0.0, Violation::Above)
                .with_target(label.name())
                .at_frame(Some(frame))
        })
        .collect()
}

fn volume_criteria(b: &BiomarkerSet) -> Vec<QcCriterion> {
    let mut out = Vec::new();
    for (name, ed, es) in [("LVBP", b.lvedv_ml, b.lvesv_ml), ("RVBP", b.rvedv_ml, b.rvesv_ml)] {
        let (frame, v) = if es <= ed { (b.es_frame, es) } else { (b.ed_frame, ed) };
        out.push(
            QcCriterion::evaluate(CriterionCode::ZeroVentricularVolume, v, 0.0, Violation::AtOrBelow)
                .with_target(name)
                .at_frame(Some(frame)),
        );
    }
    out
}

fn stroke_volume_criteria(b: &BiomarkerSet, config: &QcConfig) -> Vec<QcCriterion> {
    let mut out = vec![
        QcCriterion::evaluate(CriterionCode::NonpositiveSv, b.lvsv_ml, 0.0, Violation::AtOrBelow)
            .with_target("LV"),
        QcCriterion::evaluate(CriterionCode::NonpositiveSv, b.rvsv_ml, 0.0, Violation::AtOrBelow)
            .with_target("RV"),
    ];
    let scale = b.lvsv_ml.abs().max(b.rvsv_ml.abs());
    let diff = if scale > 0.0 {
        100.0 * (b.lvsv_ml - b.rvsv_ml).abs() / scale
    } else {
        0.0
    };
    out.push(QcCriterion::evaluate(
        CriterionCode::SvDiffGt25,
        diff,
        100.0 * config.sv_difference_fraction,
        Violation::Above,
    ));
    out
}

fn plausibility_criteria(b: &BiomarkerSet, ranges: &PlausibleRanges) -> Vec<QcCriterion> {
    let checks = [
        ("LVEDV", Some(b.lvedv_ml), ranges.volume_ml),
        ("LVESV", Some(b.lvesv_ml), ranges.volume_ml),
        ("RVEDV", Some(b.rvedv_ml), ranges.volume_ml),
        ("RVESV", Some(b.rvesv_ml), ranges.volume_ml),
        ("LVEF", b.lvef_pct, ranges.ef_pct),
        ("RVEF", b.rvef_pct, ranges.ef_pct),
        ("LVM", b.lvm_g, ranges.lvm_g),
    ];
    checks
        .into_iter()
        .filter_map(|(name, value, range)| {
            let v = value?;
            // report against the nearer bound; the direction follows from it
            let (threshold, violation) = if v <= 0.5 * (range.min + range.max) {
                let dir = if range.exclusive_min { Violation::AtOrBelow } else { Violation::Below };
                (range.min, dir)
            } else {
                (range.max, Violation::Above)
            };
            let c = QcCriterion::evaluate(CriterionCode::ImplausibleBiomarker, v, threshold, violation)
                .with_target(name);
            debug_assert_eq!(c.triggered, !range.contains(v));
            Some(c)
        })
        .collect()
}

fn repair_case(case: &CineCase, config: &QcConfig) -> (CineCase, Vec<Repair>) {
    let mut repairs = Vec::new();
    let repaired = case.map_frames(|f| {
        let (fixed, removed) = repair_small_outliers(f, config.outlier_fraction);
        repairs.extend(removed.into_iter().map(|(label, n)| Repair {
            label,
            removed_voxels: n,
            frame: f.frame_index,
        }));
        fixed
    });
    (repaired, repairs)
}

fn base_assumptions() -> Vec<String> {
    vec![
        format!("sv_difference = {SV_DIFFERENCE_FORMULA}"),
        "connectivity = 26-neighbourhood".to_string(),
    ]
}

/// Output of a QC run: the report and the case after small-outlier repair.
#[derive(Debug, Clone)]
pub struct QcOutcome {
    pub report: QcReport,
    pub repaired: CineCase,
}

/// Screens a ground-truth case. `phases` are the identified (ED, ES)
/// frames; `image_geometry` is the geometry of the matching cine image.
pub fn run_qa_gt(
    case: &CineCase,
    image_geometry: Option<&Geometry>,
    phases: (usize, usize),
    config: &QcConfig,
) -> Result<QcOutcome> {
    let (ed, es) = phases;
    for f in [ed, es] {
        if case.frame(f).is_none() {
            return Err(Error::Precondition(format!(
                "{}: ED/ES frame {f} is not segmented",
                case.case_id
            )));
        }
    }
    let mut criteria = Vec::new();
    let unexpected: usize = case.unexpected_labels.values().sum();
    let mut c = QcCriterion::evaluate(CriterionCode::UnexpectedLabel, unexpected as f64, 0.0, Violation::Above);
    if !case.unexpected_labels.is_empty() {
        let codes: Vec<String> = case.unexpected_labels.keys().map(|k| k.to_string()).collect();
        c = c.with_target(codes.join(","));
    }
    criteria.push(c);

    let (repaired, repairs) = repair_case(case, config);
    let biomarkers = compute_biomarkers(&repaired, ed, es, &BiomarkerConfig::default())?;
    criteria.extend(volume_criteria(&biomarkers));

    if let Some(g) = image_geometry {
        criteria.push(QcCriterion::evaluate(
            CriterionCode::MetadataMismatch,
            case.geometry().max_relative_deviation(g),
            config.geometry_tolerance,
            Violation::Above,
        ));
    }
    criteria.extend(outlier_criteria(case, config));
    criteria.extend(coverage_criteria(case, config));
    criteria.extend(gap_criteria(case));
    criteria.extend(stroke_volume_criteria(&biomarkers, config));

    let mut assumptions = base_assumptions();
    if image_geometry.is_none() {
        assumptions.push("METADATA_MISMATCH not evaluated: no image volume".into());
    }
    Ok(QcOutcome {
        report: QcReport::new(&case.case_id, QcMode::QaGt, criteria, repairs, assumptions),
        repaired,
    })
}

/// Flags an automated segmentation for review. `biomarkers` must come from
/// the repaired case (see [`repair_for_analysis`]).
pub fn run_post_analysis_qc(case: &CineCase, biomarkers: &BiomarkerSet, config: &QcConfig) -> QcReport {
    let (_, repairs) = repair_case(case, config);
    let mut criteria = volume_criteria(biomarkers);
    criteria.extend(outlier_criteria(case, config));
    criteria.extend(coverage_criteria(case, config));
    criteria.extend(gap_criteria(case));
    criteria.extend(stroke_volume_criteria(biomarkers, config));
    criteria.extend(plausibility_criteria(biomarkers, &config.plausible));

    let mut assumptions = base_assumptions();
    if config.plausible == PlausibleRanges::default() {
        assumptions.push(
            "plausible ranges = built-in defaults (EF [5,90] %, volumes (0,700] mL, LVM (10,500] g)".into(),
        );
    }
    QcReport::new(&case.case_id, QcMode::PostAnalysis, criteria, repairs, assumptions)
}

/// The case after small-outlier repair, as seen by volume rules.
pub fn repair_for_analysis(case: &CineCase, config: &QcConfig) -> CineCase {
    repair_case(case, config).0
}

/// One row of a batch flag summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummaryRow {
    pub criterion: String,
    pub cases_triggered: usize,
    pub percent: f64,
}

/// Per-criterion percentages of cases triggered, ending with the share of
/// cases flagged at least once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub n_cases: usize,
    pub rows: Vec<FlagSummaryRow>,
}

impl FlagSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a QcReport>) -> Self {
        let mut counts: BTreeMap<(CriterionCode, Option<String>), usize> = BTreeMap::new();
        let mut n_cases = 0;
        let mut flagged = 0;
        for report in reports {
            n_cases += 1;
            flagged += report.flagged as usize;
            let mut seen = std::collections::BTreeSet::new();
            for c in &report.criteria {
                let key = (c.code, c.target.clone());
                counts.entry(key.clone()).or_default();
                if c.triggered && seen.insert(key.clone()) {
                    *counts.get_mut(&key).unwrap() += 1;
                }
            }
        }
        let pct = |k: usize| if n_cases == 0 { 0.0 } else { 100.0 * k as f64 / n_cases as f64 };
        let mut rows: Vec<FlagSummaryRow> = counts
            .into_iter()
            .map(|((code, target), k)| FlagSummaryRow {
                criterion: match target {
                    Some(t) if code != CriterionCode::UnexpectedLabel => format!("{code}:{t}"),
                    _ => code.to_string(),
                },
                cases_triggered: k,
                percent: pct(k),
            })
            .collect();
        // unexpected-label targets list codes, so merge them into one row
        rows.dedup_by(|a, b| {
            if a.criterion == b.criterion {
                b.cases_triggered += a.cases_triggered;
                b.percent = pct(b.cases_triggered);
                true
            } else {
                false
            }
        });
        rows.push(FlagSummaryRow {
            criterion: "FLAGGED_AT_LEAST_ONCE".into(),
            cases_triggered: flagged,
            percent: pct(flagged),
        });
        FlagSummary { n_cases, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("criterion,cases_triggered,percent\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.2}\n", r.criterion, r.cases_triggered, r.percent));
        }
        out
    }
}
