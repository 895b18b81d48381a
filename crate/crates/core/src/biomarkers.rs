//! Ventricular volumetry, ejection fraction, LV mass and volume curves.

use serde::{Deserialize, Serialize};

use crate::case::CineCase;
use crate::error::{Error, Result};
use crate::volume::{Label, SegmentationFrame};

/// Label volume in mL.
pub fn label_volume(frame: &SegmentationFrame, label: Label) -> f64 {
    frame.count(label) as f64 * frame.geometry().voxel_volume_mm3() / 1000.0
}

fn argmax_earliest(values: &[(usize, f64)]) -> usize {
    let mut best = values[0];
    for &v in &values[1..] {
        if v.1 > best.1 {
            best = v;
        }
    }
    best.0
}

fn argmin_earliest(values: &[(usize, f64)]) -> usize {
    let mut best = values[0];
    for &v in &values[1..] {
        if v.1 < best.1 {
            best = v;
        }
    }
    best.0
}

/// End-diastole is the frame of maximal LV volume, end-systole of minimal,
/// ties going to the earliest frame. Falls back to RV volumes when no frame
/// contains LVBP.
pub fn identify_ed_es(case: &CineCase) -> Result<(usize, usize)> {
    if case.frames().len() < 2 {
        return Err(Error::Precondition(format!(
            "{}: ED/ES identification needs at least two segmented frames",
            case.case_id
        )));
    }
    for label in [Label::Lvbp, Label::Rvbp] {
        let vols: Vec<(usize, f64)> = case
            .frames()
            .iter()
            .map(|(&i, f)| (i, label_volume(f, label)))
            .collect();
        if vols.iter().any(|&(_, v)| v > 0.0) {
            return Ok((argmax_earliest(&vols), argmin_earliest(&vols)));
        }
    }
    Err(Error::Precondition(format!(
        "{}: neither LVBP nor RVBP is segmented in any frame",
        case.case_id
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerConfig {
    /// g/mL
    pub myocardial_density: f64,
}

impl Default for BiomarkerConfig {
    fn default() -> Self {
        BiomarkerConfig {
            myocardial_density: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSet {
    pub case_id: String,
    pub lvedv_ml: f64,
    pub lvesv_ml: f64,
    pub lvef_pct: Option<f64>,
    pub lvsv_ml: f64,
    pub lvm_g: Option<f64>,
    pub lvm_frame: Option<usize>,
    pub rvedv_ml: f64,
    pub rvesv_ml: f64,
    pub rvef_pct: Option<f64>,
    pub rvsv_ml: f64,
    pub ed_frame: usize,
    pub es_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_ml_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pfr_ml_s: Option<f64>,
}

impl BiomarkerSet {
    /// Named scalar biomarkers in a fixed order (absent values skipped).
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("LVEDV", self.lvedv_ml), ("LVESV", self.lvesv_ml)];
        out.extend(self.lvef_pct.map(|v| ("LVEF", v)));
        out.push(("LVSV", self.lvsv_ml));
        out.extend(self.lvm_g.map(|v| ("LVM", v)));
        out.push(("RVEDV", self.rvedv_ml));
        out.push(("RVESV", self.rvesv_ml));
        out.extend(self.rvef_pct.map(|v| ("RVEF", v)));
        out.push(("RVSV", self.rvsv_ml));
        out
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.named_values()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v)
    }
}

pub const BIOMARKER_NAMES: [&str; 9] = [
    "LVEDV", "LVESV", "LVEF", "LVSV", "LVM", "RVEDV", "RVESV", "RVEF", "RVSV",
];

fn ejection_fraction(edv: f64, sv: f64) -> Option<f64> {
    (edv > 0.0).then(|| 100.0 * sv / edv)
}

pub fn compute_biomarkers(
    case: &CineCase,
    ed_frame: usize,
    es_frame: usize,
    config: &BiomarkerConfig,
) -> Result<BiomarkerSet> {
    let frame = |i: usize| {
        case.frame(i).ok_or_else(|| {
            Error::Precondition(format!("{}: frame {i} is not segmented", case.case_id))
        })
    };
    let ed = frame(ed_frame)?;
    let es = frame(es_frame)?;

    let lvedv = label_volume(ed, Label::Lvbp);
    let lvesv = label_volume(es, Label::Lvbp);
    let rvedv = label_volume(ed, Label::Rvbp);
    let rvesv = label_volume(es, Label::Rvbp);
    let lvsv = lvedv - lvesv;
    let rvsv = rvedv - rvesv;

    let (lvm_g, lvm_frame) = if ed.contains(Label::Myo) {
        (Some(label_volume(ed, Label::Myo) * config.myocardial_density), Some(ed_frame))
    } else if es.contains(Label::Myo) {
        (Some(label_volume(es, Label::Myo) * config.myocardial_density), Some(es_frame))
    } else {
        (None, None)
    };

    let set = BiomarkerSet {
        case_id: case.case_id.clone(),
        lvedv_ml: lvedv,
        lvesv_ml: lvesv,
        lvef_pct: ejection_fraction(lvedv, lvsv),
        lvsv_ml: lvsv,
        lvm_g,
        lvm_frame,
        rvedv_ml: rvedv,
        rvesv_ml: rvesv,
        rvef_pct: ejection_fraction(rvedv, rvsv),
        rvsv_ml: rvsv,
        ed_frame,
        es_frame,
        per_ml_s: None,
        pfr_ml_s: None,
    };
    debug_assert_eq!(set.lvsv_ml, set.lvedv_ml - set.lvesv_ml);
    debug_assert_eq!(set.rvsv_ml, set.rvedv_ml - set.rvesv_ml);
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub frame_index: usize,
    pub time_ms: Option<f64>,
    pub lv_ml: f64,
    pub rv_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeCurve {
    pub samples: Vec<CurveSample>,
    /// Every cine frame `0..T` is segmented.
    pub complete: bool,
    pub frame_interval_ms: Option<f64>,
}

pub fn volume_curve(case: &CineCase) -> VolumeCurve {
    let interval = case.frame_interval_ms();
    let samples: Vec<CurveSample> = case
        .frames()
        .iter()
        .map(|(&i, f)| CurveSample {
            frame_index: i,
            time_ms: interval.map(|dt| i as f64 * dt),
            lv_ml: label_volume(f, Label::Lvbp),
            rv_ml: label_volume(f, Label::Rvbp),
        })
        .collect();
    let complete = match case.n_cine_frames {
        Some(t) => {
            samples.len() == t && samples.iter().enumerate().all(|(k, s)| s.frame_index == k)
        }
        None => false,
    };
    VolumeCurve {
        samples,
        complete,
        frame_interval_ms: interval,
    }
}

/// Peak ejection and filling rates (mL/s) from periodic central differences
/// of the LV volume series. `None` without a complete, timed curve.
pub fn peak_rates(curve: &VolumeCurve) -> Option<(f64, f64)> {
    let dt_ms = curve.frame_interval_ms?;
    let n = curve.samples.len();
    if !curve.complete || n < 2 || !(dt_ms > 0.0) {
        return None;
    }
    let dt_s = dt_ms / 1000.0;
    let v: Vec<f64> = curve.samples.iter().map(|s| s.lv_ml).collect();
    let mut per = 0.0f64;
    let mut pfr = 0.0f64;
    for i in 0..n {
        let next = v[(i + 1) % n];
        let prev = v[(i + n - 1) % n];
        let dvdt = (next - prev) / (2.0 * dt_s);
        per = per.max(-dvdt);
        pfr = pfr.max(dvdt);
    }
    Some((per, pfr))
}
