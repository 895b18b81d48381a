//! Batch orchestration over a root of case directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmrqc_core::biomarkers::{compute_biomarkers, identify_ed_es, peak_rates, volume_curve, BiomarkerSet, BIOMARKER_NAMES};
use cmrqc_core::case::{curate_case, CineCase, Curation};
use cmrqc_core::otsu::exclude_papillary;
use cmrqc_core::qc::{repair_for_analysis, run_post_analysis_qc, run_qa_gt, FlagSummary, QcReport};
use cmrqc_core::{Label, LabelMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OutputFormat, PipelineConfig};
use crate::layout::{discover, load_case, CaseDir};
use crate::output::{fmt_opt, write_atomic, write_json};
use crate::queue::export_flag_queue;
use crate::review::{active_decisions, decision_log_path, replay, Decision, ReviewStatus};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUEUE_FILE: &str = "flag_queue.json";
pub const RECORDS_DIR: &str = "cases";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Post-analysis QC of automated segmentations.
    Analyze,
    /// Screening of ground-truth segmentations.
    QaGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Processed,
    CuratedOut,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PapillaryRecord {
    pub frame: usize,
    pub label: Label,
    pub threshold: f64,
    pub reassigned_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Case directory relative to the input root.
    pub case_dir: String,
    /// Input files relative to the input root.
    pub inputs: Vec<String>,
    pub config_hash: String,
    pub mode: RunMode,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub status: CaseStatus,
    pub curation: Option<Curation>,
    pub segmented_frames: Vec<usize>,
    pub qc: Option<QcReport>,
    pub biomarkers: Option<BiomarkerSet>,
    #[serde(default)]
    pub papillary: Vec<PapillaryRecord>,
    /// Active review decision; only ever set on flagged cases.
    pub review: Option<Decision>,
    pub error: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl CaseRecord {
    pub fn flagged(&self) -> bool {
        self.qc.as_ref().is_some_and(|q| q.flagged)
    }

    pub fn review_status(&self) -> Option<ReviewStatus> {
        self.flagged()
            .then(|| self.review.as_ref().map_or(ReviewStatus::Pending, Decision::status))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewCounts {
    pub accepted: usize,
    pub rejected: usize,
    pub pending: usize,
    /// Rejected cases, left out of `analysis_set`.
    pub excluded: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Batch funnel and every case record. `curated_out` counts cases that
/// never reached analysis, failures included (`failed` is that subset), so
/// `discovered = curated_out + processed` and `processed = flagged + clean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub mode: RunMode,
    pub config_hash: String,
    pub input_root: String,
    pub discovered: usize,
    pub curated_out: usize,
    pub failed: usize,
    pub processed: usize,
    pub flagged: usize,
    pub clean: usize,
    pub review: Option<ReviewCounts>,
    /// Processed cases entering the statistics: all of them, minus rejected
    /// ones when review decisions are applied.
    pub analysis_set: Vec<String>,
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    pub fn record(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|r| r.case_id == case_id)
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub mode: RunMode,
    pub out_dir: PathBuf,
    /// Queue file whose decision log should be honoured.
    pub apply_review: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub manifest: Manifest,
    pub queue_path: PathBuf,
    pub reused: usize,
}

impl BatchOutcome {
    pub fn failures(&self) -> usize {
        self.manifest.failed
    }
}

struct Analysed {
    qc: QcReport,
    biomarkers: BiomarkerSet,
    papillary: Vec<PapillaryRecord>,
    warnings: Vec<String>,
}

fn apply_papillary(case: &CineCase, config: &PipelineConfig) -> Result<(CineCase, Vec<PapillaryRecord>, Vec<String>)> {
    let Some(images) = case.images() else {
        return Ok((case.clone(), Vec::new(), vec!["papillary exclusion skipped: no matching cine image".into()]));
    };
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut replaced = BTreeMap::new();
    for (&index, frame) in case.frames() {
        let out = exclude_papillary(frame, images.frames.get(index), &config.papillary_targets, &config.papillary)?;
        records.extend(out.thresholds.iter().map(|&(label, threshold, moved)| PapillaryRecord {
            frame: index,
            label,
            threshold,
            reassigned_voxels: moved,
        }));
        warnings.extend(out.warnings);
        replaced.insert(index, out.frame);
    }
    let case = case.map_frames(|f| replaced.remove(&f.frame_index).expect("every frame processed"));
    Ok((case, records, warnings))
}

fn finish_biomarkers(case: &CineCase, ed: usize, es: usize, config: &PipelineConfig) -> Result<BiomarkerSet> {
    let mut set = compute_biomarkers(case, ed, es, &config.biomarkers)?;
    if let Some((per, pfr)) = peak_rates(&volume_curve(case)) {
        set.per_ml_s = Some(per);
        set.pfr_ml_s = Some(pfr);
    }
    Ok(set)
}

fn analyse(case: &CineCase, image_geometry: Option<&cmrqc_core::Geometry>, config: &PipelineConfig, mode: RunMode) -> Result<Analysed> {
    let (ed, es) = identify_ed_es(case)?;
    let (qc, repaired) = match mode {
        RunMode::QaGt => {
            let outcome = run_qa_gt(case, image_geometry, (ed, es), &config.qc)?;
            (Some(outcome.report), outcome.repaired)
        }
        RunMode::Analyze => (None, repair_for_analysis(case, &config.qc)),
    };
    let (analysed, papillary, warnings) = if config.exclude_papillary {
        apply_papillary(&repaired, config)?
    } else {
        (repaired, Vec::new(), Vec::new())
    };
    let biomarkers = finish_biomarkers(&analysed, ed, es, config)?;
    let qc = match qc {
        Some(report) => report,
        None => run_post_analysis_qc(case, &biomarkers, &config.qc),
    };
    Ok(Analysed {
        qc,
        biomarkers,
        papillary,
        warnings,
    })
}

/// Runs one case end to end. Never fails: errors end up in the record.
pub fn process_case(case_dir: &CaseDir, label_map: &LabelMap, config: &PipelineConfig, mode: RunMode) -> CaseRecord {
    let mut record = CaseRecord {
        case_id: case_dir.case_id.clone(),
        status: CaseStatus::Failed,
        curation: None,
        segmented_frames: Vec::new(),
        qc: None,
        biomarkers: None,
        papillary: Vec::new(),
        review: None,
        error: None,
        warnings: Vec::new(),
        provenance: Provenance {
            case_dir: case_dir.case_id.clone(),
            inputs: Vec::new(),
            config_hash: config.hash(),
            mode,
            tool_version: TOOL_VERSION.to_string(),
        },
    };
    let loaded = match load_case(case_dir, label_map, config.strict_labels) {
        Ok(l) => l,
        Err(e) => {
            record.error = Some(format!("{e:#}"));
            return record;
        }
    };
    record.provenance.inputs = loaded.inputs.iter().map(|f| format!("{}/{f}", case_dir.case_id)).collect();
    record.segmented_frames = loaded.case.frames().keys().copied().collect();
    record.warnings = loaded.warnings;
    let curation = curate_case(&loaded.case);
    let accepted = curation.is_accepted();
    record.curation = Some(curation);
    if !accepted {
        record.status = CaseStatus::CuratedOut;
        return record;
    }
    match analyse(&loaded.case, loaded.image_geometry.as_ref(), config, mode) {
        Ok(a) => {
            record.status = CaseStatus::Processed;
            record.qc = Some(a.qc);
            record.biomarkers = Some(a.biomarkers);
            record.papillary = a.papillary;
            record.warnings.extend(a.warnings);
        }
        Err(e) => record.error = Some(format!("{e:#}")),
    }
    record
}

fn record_path(out_dir: &Path, case_id: &str) -> PathBuf {
    out_dir.join(RECORDS_DIR).join(format!("{case_id}.json"))
}

/// A finished record from an earlier run with the same settings.
fn reusable(out_dir: &Path, case_id: &str, config_hash: &str, mode: RunMode) -> Option<CaseRecord> {
    let text = fs::read_to_string(record_path(out_dir, case_id)).ok()?;
    let mut record: CaseRecord = serde_json::from_str(&text).ok()?;
    let p = &record.provenance;
    let same = record.case_id == case_id
        && p.config_hash == config_hash
        && p.mode == mode
        && p.tool_version == TOOL_VERSION
        && record.status != CaseStatus::Failed;
    if !same {
        return None;
    }
    // decisions are re-applied on every run
    record.review = None;
    Some(record)
}

fn apply_decisions(records: &mut [CaseRecord], queue_path: &Path) -> Result<ReviewCounts> {
    let log_path = decision_log_path(queue_path);
    let (log, mut warnings) = replay(&log_path)?;
    let active = active_decisions(&log);
    let mut counts = ReviewCounts {
        accepted: 0,
        rejected: 0,
        pending: 0,
        excluded: Vec::new(),
        warnings: Vec::new(),
    };
    for record in records.iter_mut() {
        let decision = active.get(&record.case_id);
        if !record.flagged() {
            if decision.is_some() {
                warnings.push(format!("{}: decision ignored, case is not flagged in this run", record.case_id));
            }
            continue;
        }
        record.review = decision.cloned();
        match record.review_status() {
            Some(ReviewStatus::Accepted) => counts.accepted += 1,
            Some(ReviewStatus::Rejected) => {
                counts.rejected += 1;
                counts.excluded.push(record.case_id.clone());
            }
            _ => counts.pending += 1,
        }
    }
    for id in active.keys() {
        if !records.iter().any(|r| &r.case_id == id) {
            warnings.push(format!("{id}: decision ignored, case not in this batch"));
        }
    }
    counts.warnings = warnings;
    Ok(counts)
}

fn biomarker_csv(records: &[&CaseRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["case_id", "ed_frame", "es_frame"];
    header.extend(BIOMARKER_NAMES);
    header.extend(["PER", "PFR", "flagged", "review"]);
    w.write_record(&header)?;
    for r in records {
        let Some(b) = &r.biomarkers else { continue };
        let mut row = vec![r.case_id.clone(), b.ed_frame.to_string(), b.es_frame.to_string()];
        row.extend(BIOMARKER_NAMES.iter().map(|n| fmt_opt(b.value(n))));
        row.push(fmt_opt(b.per_ml_s));
        row.push(fmt_opt(b.pfr_ml_s));
        row.push(r.flagged().to_string());
        row.push(match r.review_status() {
            Some(s) => serde_json::to_value(s)?.as_str().unwrap_or_default().to_string(),
            None => String::new(),
        });
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

pub fn run_batch(root: &Path, config: &PipelineConfig, options: &BatchOptions) -> Result<BatchOutcome> {
    config.validate()?;
    let label_map = config.label_map.build()?;
    let root = fs::canonicalize(root).with_context(|| format!("cannot read input root {}", root.display()))?;
    if !root.is_dir() {
        bail!("input root {} is not a directory", root.display());
    }
    let dirs = discover(&root)?;
    let out_dir = &options.out_dir;
    fs::create_dir_all(out_dir.join(RECORDS_DIR)).with_context(|| format!("creating {}", out_dir.display()))?;
    let config_hash = config.hash();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .context("starting worker threads")?;
    let results: Vec<Result<(CaseRecord, bool)>> = pool.install(|| {
        dirs.par_iter()
            .map(|d| {
                if let Some(r) = reusable(out_dir, &d.case_id, &config_hash, options.mode) {
                    return Ok((r, true));
                }
                let record = process_case(d, &label_map, config, options.mode);
                write_json(&record_path(out_dir, &record.case_id), &record)?;
                Ok((record, false))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut reused = 0;
    for r in results {
        let (record, was_reused) = r?;
        reused += was_reused as usize;
        records.push(record);
    }
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let queue_path = out_dir.join(QUEUE_FILE);
    let review = match &options.apply_review {
        Some(q) => Some(apply_decisions(&mut records, q)?),
        None => None,
    };
    let count = |s: CaseStatus| records.iter().filter(|r| r.status == s).count();
    let processed = count(CaseStatus::Processed);
    let failed = count(CaseStatus::Failed);
    let flagged = records.iter().filter(|r| r.status == CaseStatus::Processed && r.flagged()).count();
    let excluded: Vec<&String> = review.iter().flat_map(|r| &r.excluded).collect();
    let analysis_set = records
        .iter()
        .filter(|r| r.status == CaseStatus::Processed && !excluded.contains(&&r.case_id))
        .map(|r| r.case_id.clone())
        .collect();
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        mode: options.mode,
        config_hash,
        input_root: root.to_string_lossy().into_owned(),
        discovered: records.len(),
        curated_out: records.len() - processed,
        failed,
        processed,
        flagged,
        clean: processed - flagged,
        review,
        analysis_set,
        cases: records,
    };

    for record in &manifest.cases {
        write_json(&record_path(out_dir, &record.case_id), record)?;
    }
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    let queue = export_flag_queue(&manifest, &config.label_map, RECORDS_DIR);
    write_json(&queue_path, &queue)?;

    let reports: Vec<&QcReport> = manifest.cases.iter().filter_map(|r| r.qc.as_ref()).collect();
    let summary = FlagSummary::from_reports(reports.iter().copied());
    let in_analysis: Vec<&CaseRecord> = manifest
        .cases
        .iter()
        .filter(|r| manifest.analysis_set.contains(&r.case_id))
        .collect();
    if config.wants(OutputFormat::Json) {
        write_json(&out_dir.join("qc_summary.json"), &summary)?;
        let biomarkers: Vec<&BiomarkerSet> = in_analysis.iter().filter_map(|r| r.biomarkers.as_ref()).collect();
        write_json(&out_dir.join("biomarkers.json"), &biomarkers)?;
    }
    if config.wants(OutputFormat::Csv) {
        write_atomic(&out_dir.join("qc_summary.csv"), summary.to_csv().as_bytes())?;
        write_atomic(&out_dir.join("biomarkers.csv"), &biomarker_csv(&in_analysis)?)?;
    }
    Ok(BatchOutcome {
        manifest,
        queue_path,
        reused,
    })
}
