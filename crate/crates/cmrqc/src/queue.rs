//! The review queue file written after a batch.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cmrqc_core::qc::CriterionCode;
use serde::{Deserialize, Serialize};

use crate::config::LabelMapSpec;
use crate::pipeline::{CaseStatus, Manifest, RunMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub case_id: String,
    /// Triggered criteria, as in the case's QC report.
    pub criteria: Vec<CriterionCode>,
    /// Case directory relative to `input_root`.
    pub case_dir: String,
    pub ed_frame: Option<usize>,
    pub es_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagQueue {
    pub tool_version: String,
    pub mode: RunMode,
    pub config_hash: String,
    pub input_root: String,
    pub label_map: LabelMapSpec,
    /// Per-case record directory, relative to the queue file.
    pub records_dir: String,
    /// Flagged cases ordered by case_id.
    pub entries: Vec<QueueEntry>,
    /// Processed cases that raised no flag.
    #[serde(default)]
    pub unflagged: Vec<String>,
}

impl FlagQueue {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading queue {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing queue {}", path.display()))
    }

    pub fn entry(&self, case_id: &str) -> Option<&QueueEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

/// Flagged cases of a finished batch with their triggering criteria.
pub fn export_flag_queue(manifest: &Manifest, label_map: &LabelMapSpec, records_dir: &str) -> FlagQueue {
    let mut entries = Vec::new();
    let mut unflagged = Vec::new();
    for record in manifest.cases.iter().filter(|r| r.status == CaseStatus::Processed) {
        let Some(report) = &record.qc else { continue };
        if !report.flagged {
            unflagged.push(record.case_id.clone());
            continue;
        }
        entries.push(QueueEntry {
            case_id: record.case_id.clone(),
            criteria: report.triggered_codes(),
            case_dir: record.provenance.case_dir.clone(),
            ed_frame: record.biomarkers.as_ref().map(|b| b.ed_frame),
            es_frame: record.biomarkers.as_ref().map(|b| b.es_frame),
        });
    }
    entries.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    unflagged.sort();
    FlagQueue {
        tool_version: manifest.tool_version.clone(),
        mode: manifest.mode,
        config_hash: manifest.config_hash.clone(),
        input_root: manifest.input_root.clone(),
        label_map: label_map.clone(),
        records_dir: records_dir.to_string(),
        entries,
        unflagged,
    }
}
