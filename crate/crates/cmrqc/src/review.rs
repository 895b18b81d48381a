//! Review decisions on flagged cases and their append-only NDJSON log.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::queue::FlagQueue;

/// Why a flagged case was rejected.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    SevereArtefacts,
    /// ICD, pacemaker lead or sternal wires.
    ImplantedDevice,
    /// Atria, trabeculations, LVOT or pulmonary valve inside the contours.
    NonVentricularStructures,
    MissingOrErroneousSegmentations,
    Other(String),
}

impl RejectReason {
    pub const CODED: [RejectReason; 4] = [
        RejectReason::SevereArtefacts,
        RejectReason::ImplantedDevice,
        RejectReason::NonVentricularStructures,
        RejectReason::MissingOrErroneousSegmentations,
    ];

    pub fn code(&self) -> &str {
        match self {
            RejectReason::SevereArtefacts => "severe_artefacts",
            RejectReason::ImplantedDevice => "implanted_device",
            RejectReason::NonVentricularStructures => "non_ventricular_structures",
            RejectReason::MissingOrErroneousSegmentations => "missing_or_erroneous_segmentations",
            RejectReason::Other(text) => text,
        }
    }

    pub fn description(&self) -> &str {
        match self {
            RejectReason::SevereArtefacts => "severe CMR artefacts",
            RejectReason::ImplantedDevice => "ICD, pacemaker lead or sternal wires",
            RejectReason::NonVentricularStructures => {
                "segmentations including the atria, trabeculations, the LVOT, or the pulmonary valve"
            }
            RejectReason::MissingOrErroneousSegmentations => "missing or erroneous segmentations",
            RejectReason::Other(text) => text,
        }
    }

    /// Reads a code, a description or free text. Matching ignores case,
    /// punctuation and spacing; anything unmatched becomes `Other`.
    /// Blank input gives `None`.
    pub fn parse(text: &str) -> Option<RejectReason> {
        let text = text.trim();
        if text.is_empty() {
            return None;
        }
        let key = normalise(text);
        let coded = RejectReason::CODED
            .into_iter()
            .find(|r| normalise(r.code()) == key || normalise(r.description()) == key);
        Some(coded.unwrap_or_else(|| RejectReason::Other(text.to_string())))
    }
}

fn normalise(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for RejectReason {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for RejectReason {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        RejectReason::parse(&text).ok_or_else(|| serde::de::Error::custom("empty reject reason"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// One logged decision. The active decision of a case is its latest by
/// (timestamp, sequence number).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub seq: u64,
    pub case_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    pub reviewer: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
}

impl Decision {
    pub fn status(&self) -> ReviewStatus {
        match self.verdict {
            Verdict::Accept => ReviewStatus::Accepted,
            Verdict::Reject => ReviewStatus::Rejected,
        }
    }
}

/// Body of a decision request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("case {0} is not in the flag queue")]
    NotFlagged(String),
    #[error("{0}")]
    Invalid(String),
    #[error("writing the decision log: {0}")]
    Io(#[from] std::io::Error),
}

/// The decision log kept beside a queue file: `q.json` logs to
/// `q.decisions.ndjson`.
pub fn decision_log_path(queue_path: &Path) -> PathBuf {
    let stem = queue_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "queue".into());
    queue_path.with_file_name(format!("{stem}.decisions.ndjson"))
}

/// Every decision in the log, in file order. A torn final line (an
/// interrupted append) is skipped with a warning; damage elsewhere is an error.
pub fn replay(log_path: &Path) -> anyhow::Result<(Vec<Decision>, Vec<String>)> {
    if !log_path.exists() {
        return Ok((Vec::new(), Vec::new()));
    }
    let text = fs::read_to_string(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut decisions = Vec::new();
    let mut warnings = Vec::new();
    for (k, &(lineno, line)) in lines.iter().enumerate() {
        match serde_json::from_str::<Decision>(line) {
            Ok(d) => decisions.push(d),
            Err(e) if k + 1 == lines.len() && !text.ends_with('\n') => {
                warnings.push(format!("{}:{}: ignoring incomplete entry ({e})", log_path.display(), lineno + 1));
            }
            Err(e) => bail!("{}:{}: {e}", log_path.display(), lineno + 1),
        }
    }
    Ok((decisions, warnings))
}

/// Active decision per case.
pub fn active_decisions(log: &[Decision]) -> BTreeMap<String, Decision> {
    let mut out: BTreeMap<String, Decision> = BTreeMap::new();
    for d in log {
        let newer = out
            .get(&d.case_id)
            .is_none_or(|cur| (d.timestamp_ms, d.seq) > (cur.timestamp_ms, cur.seq));
        if newer {
            out.insert(d.case_id.clone(), d.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub total: usize,
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
}

/// A flag queue with its decision log. All writes go through `decide`.
#[derive(Debug)]
pub struct ReviewStore {
    queue_path: PathBuf,
    queue: FlagQueue,
    log_path: PathBuf,
    log: Vec<Decision>,
    active: BTreeMap<String, Decision>,
    pub warnings: Vec<String>,
}

impl ReviewStore {
    pub fn open(queue_path: &Path) -> anyhow::Result<Self> {
        let queue = FlagQueue::load(queue_path)?;
        let log_path = decision_log_path(queue_path);
        let (log, warnings) = replay(&log_path)?;
        let active = active_decisions(&log);
        Ok(ReviewStore {
            queue_path: queue_path.to_path_buf(),
            queue,
            log_path,
            log,
            active,
            warnings,
        })
    }

    pub fn queue(&self) -> &FlagQueue {
        &self.queue
    }

    /// Directory holding the queue file; relative queue paths resolve here.
    pub fn base_dir(&self) -> &Path {
        self.queue_path.parent().unwrap_or(Path::new("."))
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn history(&self) -> &[Decision] {
        &self.log
    }

    pub fn decision(&self, case_id: &str) -> Option<&Decision> {
        self.active.get(case_id)
    }

    pub fn status(&self, case_id: &str) -> ReviewStatus {
        self.decision(case_id).map_or(ReviewStatus::Pending, Decision::status)
    }

    pub fn decide(&mut self, case_id: &str, request: DecisionRequest, timestamp_ms: u64) -> Result<Decision, ReviewError> {
        if self.queue.entry(case_id).is_none() {
            return Err(ReviewError::NotFlagged(case_id.to_string()));
        }
        let verdict = request
            .verdict
            .ok_or_else(|| ReviewError::Invalid("verdict is required (accept or reject)".into()))?;
        let reason = request.reason.as_deref().and_then(RejectReason::parse);
        match (verdict, &reason) {
            (Verdict::Reject, None) => return Err(ReviewError::Invalid("a rejection needs a reason".into())),
            (Verdict::Accept, Some(_)) => {
                return Err(ReviewError::Invalid("an acceptance must not carry a reason".into()))
            }
            _ => {}
        }
        let reviewer = request.reviewer.map(|r| r.trim().to_string()).unwrap_or_default();
        let decision = Decision {
            seq: self.log.iter().map(|d| d.seq + 1).max().unwrap_or(0),
            case_id: case_id.to_string(),
            verdict,
            reason,
            reviewer: if reviewer.is_empty() { "anonymous".into() } else { reviewer },
            timestamp_ms,
        };
        let mut line = serde_json::to_string(&decision).expect("decisions serialise");
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.log_path)?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.log.push(decision.clone());
        self.active = active_decisions(&self.log);
        Ok(decision)
    }

    pub fn summary(&self) -> QueueSummary {
        let mut s = QueueSummary {
            total: self.queue.entries.len(),
            pending: 0,
            accepted: 0,
            rejected: 0,
            rejected_by_reason: BTreeMap::new(),
        };
        for entry in &self.queue.entries {
            match self.decision(&entry.case_id) {
                None => s.pending += 1,
                Some(d) if d.verdict == Verdict::Accept => s.accepted += 1,
                Some(d) => {
                    s.rejected += 1;
                    let reason = d.reason.as_ref().map_or("unspecified", |r| r.code()).to_string();
                    *s.rejected_by_reason.entry(reason).or_default() += 1;
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reasons_parse_from_codes_descriptions_and_free_text() {
        assert_eq!(
            RejectReason::parse("missing or erroneous segmentations"),
            Some(RejectReason::MissingOrErroneousSegmentations)
        );
        assert_eq!(RejectReason::parse(" Severe_Artefacts "), Some(RejectReason::SevereArtefacts));
        assert_eq!(
            RejectReason::parse("ICD, pacemaker lead or sternal wires"),
            Some(RejectReason::ImplantedDevice)
        );
        assert_eq!(RejectReason::parse("wrong patient"), Some(RejectReason::Other("wrong patient".into())));
        assert_eq!(RejectReason::parse("   "), None);
        let json = serde_json::to_string(&RejectReason::NonVentricularStructures).unwrap();
        assert_eq!(json, "\"non_ventricular_structures\"");
        assert_eq!(serde_json::from_str::<RejectReason>(&json).unwrap(), RejectReason::NonVentricularStructures);
    }

    fn d(seq: u64, case: &str, verdict: Verdict, t: u64) -> Decision {
        Decision {
            seq,
            case_id: case.into(),
            verdict,
            reason: (verdict == Verdict::Reject).then_some(RejectReason::SevereArtefacts),
            reviewer: "r".into(),
            timestamp_ms: t,
        }
    }

    #[test]
    fn latest_by_timestamp_then_sequence() {
        let log = vec![
            d(0, "a", Verdict::Accept, 10),
            d(1, "a", Verdict::Reject, 5),
            d(2, "b", Verdict::Reject, 7),
            d(3, "b", Verdict::Accept, 7),
        ];
        let active = active_decisions(&log);
        assert_eq!(active["a"].seq, 0);
        assert_eq!(active["b"].seq, 3);
    }

    #[test]
    fn log_path_sits_beside_queue() {
        assert_eq!(
            decision_log_path(Path::new("/x/out/flag_queue.json")),
            PathBuf::from("/x/out/flag_queue.decisions.ndjson")
        );
    }

    #[test]
    fn torn_last_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.decisions.ndjson");
        let good = serde_json::to_string(&d(0, "a", Verdict::Accept, 1)).unwrap();
        fs::write(&path, format!("{good}\n{{\"seq\":1,\"case")).unwrap();
        let (log, warnings) = replay(&path).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(warnings.len(), 1);
        fs::write(&path, format!("garbage\n{good}\n")).unwrap();
        assert!(replay(&path).is_err());
    }
}
