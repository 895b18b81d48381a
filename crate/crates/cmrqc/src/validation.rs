//! Agreement between automated and manual segmentations of the same cases.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cmrqc_core::biomarkers::{compute_biomarkers, identify_ed_es, BiomarkerSet, BIOMARKER_NAMES};
use cmrqc_core::case::{CaseMetadata, CineCase};
use cmrqc_core::qc::repair_for_analysis;
use cmrqc_core::stats::{
    bland_altman, bonferroni_mark, dice_with, median_iqr, pearson, stratified_report, wilcoxon_signed_rank, GroupKey,
    Mark, PairedSeries, StratRecord, StratifiedReport,
};
use cmrqc_core::{Label, LabelMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OutputFormat, PipelineConfig};
use crate::layout::{discover, load_case, CaseDir};
use crate::output::{fmt_opt, write_atomic, write_json};
use crate::pipeline::TOOL_VERSION;

pub const PHASES: [&str; 2] = ["ED", "ES"];

/// Metric key for a Dice score, e.g. `DICE_LVBP_ED`.
pub fn dice_key(label: Label, phase: &str) -> String {
    format!("DICE_{label}_{phase}")
}

/// Metric key for a biomarker absolute error, e.g. `AE_LVEF`.
pub fn error_key(biomarker: &str) -> String {
    format!("AE_{biomarker}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseValidation {
    pub case_id: String,
    /// Phases taken from the manual segmentation.
    pub ed_frame: usize,
    pub es_frame: usize,
    /// Dice in percent per label and phase; `None` when both masks are
    /// empty and empty pairs are skipped.
    pub dice: BTreeMap<String, Option<f64>>,
    pub manual: BiomarkerSet,
    pub auto: BiomarkerSet,
    pub absolute_errors: BTreeMap<String, f64>,
    pub strata: BTreeMap<GroupKey, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerAgreement {
    pub biomarker: String,
    pub n: usize,
    pub manual_median: f64,
    pub manual_iqr: f64,
    pub error_median: f64,
    pub error_iqr: f64,
    /// Signed-rank test of auto minus manual against zero.
    pub wilcoxon_p: f64,
    /// Bonferroni mark over the biomarkers tested.
    pub mark: Mark,
    /// Bland-Altman bias and limits; absent with fewer than two pairs.
    pub bias: Option<f64>,
    pub loa_low: Option<f64>,
    pub loa_high: Option<f64>,
    /// Absent for a constant or too short series.
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tool_version: String,
    pub config_hash: String,
    pub matched: Vec<String>,
    /// Case IDs found under only one root.
    pub unmatched_auto: Vec<String>,
    pub unmatched_manual: Vec<String>,
    /// Matched cases that could not be compared, with the reason.
    pub failed: BTreeMap<String, String>,
    pub cases: Vec<CaseValidation>,
    pub dice_summary: Vec<DiceSummary>,
    pub biomarker_summary: Vec<BiomarkerAgreement>,
    pub stratified: Vec<StratifiedReport>,
}

fn strata(meta: &CaseMetadata) -> BTreeMap<GroupKey, String> {
    let mut out = BTreeMap::new();
    let mut put = |k: GroupKey, v: Option<String>| {
        if let Some(v) = v.filter(|s| !s.trim().is_empty()) {
            out.insert(k, v);
        }
    };
    put(GroupKey::Dataset, meta.dataset.clone());
    put(GroupKey::Disease, meta.disease.clone());
    put(GroupKey::Vendor, meta.vendor.clone());
    put(GroupKey::FieldStrength, meta.field_strength_t.map(|t| format!("{t}T")));
    put(GroupKey::ScannerModel, meta.model.clone());
    out
}

fn mask(case: &CineCase, frame: usize, label: Label) -> Vec<bool> {
    let f = case.frame(frame).expect("frame checked by caller");
    f.grid().as_slice().iter().map(|&l| l == label).collect()
}

fn compare(auto: &CaseDir, manual: &CaseDir, label_map: &LabelMap, config: &PipelineConfig) -> Result<CaseValidation> {
    let m = load_case(manual, label_map, config.strict_labels).context("manual segmentation")?.case;
    let a = load_case(auto, label_map, config.strict_labels).context("automated segmentation")?.case;
    if m.geometry().dims() != a.geometry().dims() {
        bail!("grid shapes differ ({:?} manual vs {:?} automated)", m.geometry().dims(), a.geometry().dims());
    }
    let (ed, es) = identify_ed_es(&m)?;
    for f in [ed, es] {
        if a.frame(f).is_none() {
            bail!("automated segmentation lacks frame {f}");
        }
    }
    let mut dice = BTreeMap::new();
    for (phase, frame) in PHASES.iter().zip([ed, es]) {
        for label in Label::FOREGROUND {
            let d = dice_with(&mask(&a, frame, label), &mask(&m, frame, label), config.empty_dice)?;
            dice.insert(dice_key(label, phase), d);
        }
    }
    let manual_set = compute_biomarkers(&repair_for_analysis(&m, &config.qc), ed, es, &config.biomarkers)?;
    let auto_set = compute_biomarkers(&repair_for_analysis(&a, &config.qc), ed, es, &config.biomarkers)?;
    let absolute_errors = BIOMARKER_NAMES
        .iter()
        .filter_map(|&n| Some((n.to_string(), (auto_set.value(n)? - manual_set.value(n)?).abs())))
        .collect();
    Ok(CaseValidation {
        case_id: manual.case_id.clone(),
        ed_frame: ed,
        es_frame: es,
        dice,
        manual: manual_set,
        auto: auto_set,
        absolute_errors,
        strata: strata(&m.metadata),
    })
}

fn dice_summary(cases: &[CaseValidation]) -> Result<Vec<DiceSummary>> {
    let mut out = Vec::new();
    for phase in PHASES {
        for label in Label::FOREGROUND {
            let key = dice_key(label, phase);
            let values: Vec<f64> = cases.iter().filter_map(|c| c.dice.get(&key).copied().flatten()).collect();
            if values.is_empty() {
                continue;
            }
            let (median, iqr) = median_iqr(&values)?;
            out.push(DiceSummary {
                metric: key,
                n: values.len(),
                median,
                iqr,
            });
        }
    }
    Ok(out)
}

fn biomarker_summary(cases: &[CaseValidation]) -> Result<Vec<BiomarkerAgreement>> {
    let mut series = Vec::new();
    for name in BIOMARKER_NAMES {
        let pairs: Vec<(f64, f64)> = cases
            .iter()
            .filter_map(|c| Some((c.auto.value(name)?, c.manual.value(name)?)))
            .collect();
        if !pairs.is_empty() {
            series.push((name, PairedSeries::from_pairs(pairs)?));
        }
    }
    let tests = series.len();
    series
        .into_iter()
        .map(|(name, s)| {
            let manual: Vec<f64> = s.pairs.iter().map(|p| p.manual).collect();
            let errors: Vec<f64> = s.differences().iter().map(|d| d.abs()).collect();
            let (manual_median, manual_iqr) = median_iqr(&manual)?;
            let (error_median, error_iqr) = median_iqr(&errors)?;
            let w = wilcoxon_signed_rank(&s.differences())?;
            let ba = (s.len() >= 2).then(|| bland_altman(&s)).transpose()?;
            let corr = pearson(&s).ok();
            Ok(BiomarkerAgreement {
                biomarker: name.to_string(),
                n: s.len(),
                manual_median,
                manual_iqr,
                error_median,
                error_iqr,
                wilcoxon_p: w.p_value,
                mark: bonferroni_mark(w.p_value, tests)?,
                bias: ba.as_ref().map(|b| b.bias),
                loa_low: ba.as_ref().map(|b| b.loa_low),
                loa_high: ba.as_ref().map(|b| b.loa_high),
                pearson_r: corr.as_ref().map(|c| c.r),
                pearson_p: corr.as_ref().map(|c| c.p_value),
            })
        })
        .collect()
}

fn stratified(cases: &[CaseValidation]) -> Result<Vec<StratifiedReport>> {
    if cases.is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<StratRecord> = cases
        .iter()
        .map(|c| {
            let mut metrics: BTreeMap<String, f64> =
                c.dice.iter().filter_map(|(k, v)| v.map(|v| (k.clone(), v))).collect();
            metrics.extend(c.absolute_errors.iter().map(|(k, v)| (error_key(k), *v)));
            StratRecord {
                case_id: c.case_id.clone(),
                groups: c.strata.clone(),
                metrics,
            }
        })
        .collect();
    let mut names: Vec<String> = Vec::new();
    for phase in PHASES {
        names.extend(Label::FOREGROUND.iter().map(|l| dice_key(*l, phase)));
    }
    names.extend(BIOMARKER_NAMES.iter().map(|b| error_key(b)));
    let metric_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    GroupKey::ALL
        .iter()
        .map(|&k| Ok(stratified_report(&records, k, &metric_refs)?))
        .collect()
}

pub fn run_validation(auto_root: &Path, manual_root: &Path, config: &PipelineConfig) -> Result<ValidationReport> {
    config.validate()?;
    let label_map = config.label_map.build()?;
    let auto: BTreeMap<String, CaseDir> = discover(auto_root)?.into_iter().map(|c| (c.case_id.clone(), c)).collect();
    let manual: BTreeMap<String, CaseDir> =
        discover(manual_root)?.into_iter().map(|c| (c.case_id.clone(), c)).collect();
    let auto_ids: BTreeSet<&String> = auto.keys().collect();
    let manual_ids: BTreeSet<&String> = manual.keys().collect();
    let matched: Vec<String> = auto_ids.intersection(&manual_ids).map(|s| s.to_string()).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .context("starting worker threads")?;
    let results: Vec<(String, Result<CaseValidation>)> = pool.install(|| {
        matched
            .par_iter()
            .map(|id| (id.clone(), compare(&auto[id], &manual[id], &label_map, config)))
            .collect()
    });
    let mut cases = Vec::new();
    let mut failed = BTreeMap::new();
    for (id, r) in results {
        match r {
            Ok(c) => cases.push(c),
            Err(e) => {
                failed.insert(id, format!("{e:#}"));
            }
        }
    }
    Ok(ValidationReport {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: config.hash(),
        unmatched_auto: auto_ids.difference(&manual_ids).map(|s| s.to_string()).collect(),
        unmatched_manual: manual_ids.difference(&auto_ids).map(|s| s.to_string()).collect(),
        matched,
        failed,
        dice_summary: dice_summary(&cases)?,
        biomarker_summary: biomarker_summary(&cases)?,
        stratified: stratified(&cases)?,
        cases,
    })
}

fn csv_bytes(header: &[String], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Writes `validation.json` and the CSV tables selected by `config.formats`.
pub fn write_reports(report: &ValidationReport, out_dir: &Path, config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    if config.wants(OutputFormat::Json) {
        write_json(&out_dir.join("validation.json"), report)?;
    }
    if !config.wants(OutputFormat::Csv) {
        return Ok(());
    }
    let mut dice_header = strings(&["case_id", "ed_frame", "es_frame"]);
    let dice_keys: Vec<String> = PHASES
        .iter()
        .flat_map(|p| Label::FOREGROUND.iter().map(move |l| dice_key(*l, p)))
        .collect();
    dice_header.extend(dice_keys.iter().cloned());
    let rows = report
        .cases
        .iter()
        .map(|c| {
            let mut row = vec![c.case_id.clone(), c.ed_frame.to_string(), c.es_frame.to_string()];
            row.extend(dice_keys.iter().map(|k| fmt_opt(c.dice.get(k).copied().flatten())));
            row
        })
        .collect();
    write_atomic(&out_dir.join("dice_per_case.csv"), &csv_bytes(&dice_header, rows)?)?;

    let mut rows = Vec::new();
    for c in &report.cases {
        for name in BIOMARKER_NAMES {
            let (Some(m), Some(a)) = (c.manual.value(name), c.auto.value(name)) else { continue };
            rows.push(vec![
                c.case_id.clone(),
                name.to_string(),
                m.to_string(),
                a.to_string(),
                (a - m).to_string(),
                ((a + m) / 2.0).to_string(),
                (a - m).abs().to_string(),
            ]);
        }
    }
    let header = strings(&["case_id", "biomarker", "manual", "auto", "difference", "mean", "absolute_error"]);
    write_atomic(&out_dir.join("biomarker_errors.csv"), &csv_bytes(&header, rows)?)?;

    let header = strings(&["metric", "n", "median", "iqr"]);
    let rows = report
        .dice_summary
        .iter()
        .map(|d| vec![d.metric.clone(), d.n.to_string(), d.median.to_string(), d.iqr.to_string()])
        .collect();
    write_atomic(&out_dir.join("dice_summary.csv"), &csv_bytes(&header, rows)?)?;

    let header = strings(&[
        "biomarker", "n", "manual_median", "manual_iqr", "error_median", "error_iqr", "wilcoxon_p", "mark", "bias",
        "loa_low", "loa_high", "pearson_r", "pearson_p",
    ]);
    let rows = report
        .biomarker_summary
        .iter()
        .map(|b| {
            vec![
                b.biomarker.clone(),
                b.n.to_string(),
                b.manual_median.to_string(),
                b.manual_iqr.to_string(),
                b.error_median.to_string(),
                b.error_iqr.to_string(),
                b.wilcoxon_p.to_string(),
                b.mark.to_string(),
                fmt_opt(b.bias),
                fmt_opt(b.loa_low),
                fmt_opt(b.loa_high),
                fmt_opt(b.pearson_r),
                fmt_opt(b.pearson_p),
            ]
        })
        .collect();
    write_atomic(&out_dir.join("biomarker_summary.csv"), &csv_bytes(&header, rows)?)?;

    for s in &report.stratified {
        let header = strings(&["group", "n_cases", "metric", "n", "center", "spread", "wilcoxon_p", "mark"]);
        let mut rows = Vec::new();
        for row in &s.rows {
            for (metric, m) in &row.metrics {
                rows.push(vec![
                    row.group.clone(),
                    row.n_cases.to_string(),
                    metric.clone(),
                    m.n.to_string(),
                    m.center.to_string(),
                    m.spread.to_string(),
                    m.wilcoxon_p.to_string(),
                    m.mark.to_string(),
                ]);
            }
        }
        let name = format!("stratified_{}.csv", s.key.name());
        write_atomic(&out_dir.join(name), &csv_bytes(&header, rows)?)?;
    }
    Ok(())
}
