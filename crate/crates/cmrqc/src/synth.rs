//! The bundled synthetic dataset: 20 phantom cases, 14 clean and 6 carrying
//! one injected segmentation defect each.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cmrqc_core::case::{write_image, write_segmentation, CaseMetadata, ImageSeries};
use cmrqc_core::phantom::{add_island, cine_frames, clear_label, render, synth_image, HeartShape, Intensities, PhantomSpec};
use cmrqc_core::qc::CriterionCode::{self, *};
use cmrqc_core::{Label, LabelMap, SegmentationFrame};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::output::{to_json_bytes, write_atomic};

pub const N_CASES: usize = 20;
pub const N_FRAMES: usize = 20;
pub const ED_FRAME: usize = 0;
pub const ES_FRAME: usize = 10;
pub const FRAME_INTERVAL_MS: f64 = 40.0;
pub const EXPECTED_FILE: &str = "expected.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    SvMismatch,
    SliceGap,
    LabelIsland,
    LowCoverage,
    MissingRv,
    DetachedRv,
}

impl Defect {
    /// Criteria the defect raises under post-analysis QC.
    pub fn expected(self) -> Vec<CriterionCode> {
        match self {
            Defect::SvMismatch => vec![SvDiffGt25],
            Defect::SliceGap => vec![SliceGap],
            Defect::LabelIsland => vec![LabelOutlierGt10],
            Defect::LowCoverage => vec![LabelCoverageLt30],
            Defect::MissingRv => vec![ZeroVentricularVolume, SvDiffGt25, ImplausibleBiomarker],
            Defect::DetachedRv => vec![GlobalOutlierGt10],
        }
    }

    fn for_case(number: usize) -> Option<Defect> {
        match number {
            3 => Some(Defect::SvMismatch),
            6 => Some(Defect::SliceGap),
            9 => Some(Defect::LabelIsland),
            12 => Some(Defect::LowCoverage),
            15 => Some(Defect::MissingRv),
            18 => Some(Defect::DetachedRv),
            _ => None,
        }
    }
}

/// How a case's segmentation is stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLayout {
    /// Every cine frame drawn, one 4D file.
    FullCine,
    /// ED and ES drawn inside an otherwise blank 4D file.
    SparseCine,
    /// `seg_sa_frameNN` files for ED and ES.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCase {
    pub case_id: String,
    pub defect: Option<Defect>,
    pub layout: SegLayout,
    /// Sorted criterion codes expected to trigger; empty for clean cases.
    pub expected_criteria: Vec<CriterionCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthIndex {
    pub seed: u64,
    pub cases: Vec<SynthCase>,
}

impl SynthIndex {
    pub fn flagged(&self) -> impl Iterator<Item = &SynthCase> {
        self.cases.iter().filter(|c| !c.expected_criteria.is_empty())
    }
}

fn metadata(number: usize, case_id: &str) -> CaseMetadata {
    const DISEASES: [&str; 5] = ["NOR", "DCM", "HCM", "MINF", "ARV"];
    const SCANNERS: [(&str, &str); 3] = [("Siemens", "Avanto"), ("Philips", "Achieva"), ("GE", "Signa")];
    let (vendor, model) = SCANNERS[number % 3];
    CaseMetadata {
        case_id: case_id.to_string(),
        disease: Some(DISEASES[number % 5].to_string()),
        vendor: Some(vendor.to_string()),
        model: Some(model.to_string()),
        field_strength_t: Some(if number % 2 == 0 { 3.0 } else { 1.5 }),
        frame_interval_ms: Some(FRAME_INTERVAL_MS),
        dataset: Some(if number <= 10 { "SYN-A" } else { "SYN-B" }.to_string()),
    }
}

fn scaled(shape: HeartShape, k: f64) -> HeartShape {
    HeartShape {
        lv_radius: shape.lv_radius * k,
        myo_thickness: shape.myo_thickness * k,
        rv_radius: shape.rv_radius * k,
        rv_offset: shape.rv_offset,
    }
}

fn spec_for(number: usize, defect: Option<Defect>) -> PhantomSpec {
    let base = PhantomSpec {
        frame_interval_ms: Some(FRAME_INTERVAL_MS),
        ..PhantomSpec::default()
    };
    if defect.is_some() {
        return base;
    }
    let dx = 1.3 + 0.05 * (number % 7) as f64;
    let slice = if number % 2 == 0 { 8.0 } else { 10.0 };
    PhantomSpec {
        spacing: [dx, dx, slice],
        ..base
    }
}

fn shapes_for(number: usize, defect: Option<Defect>) -> (HeartShape, HeartShape) {
    if defect.is_some() {
        return (HeartShape::ED, HeartShape::ES);
    }
    let k = 0.9 + 0.02 * (number % 6) as f64;
    (scaled(HeartShape::ED, k), scaled(HeartShape::ES, k))
}

/// ED and ES segmentations with the defect applied.
fn defect_frames(spec: &PhantomSpec, defect: Defect) -> Result<(SegmentationFrame, SegmentationFrame)> {
    let ed = render(spec, &HeartShape::ED, ED_FRAME)?;
    let es = render(spec, &HeartShape::ES, ES_FRAME)?;
    Ok(match defect {
        Defect::SvMismatch => (ed, render(spec, &HeartShape { rv_radius: 14.0, ..HeartShape::ES }, ES_FRAME)?),
        // the apical piece cut off by the gap is small enough to be repaired
        Defect::SliceGap => (ed, clear_label(&es, Label::Myo, &[7])?),
        Defect::LabelIsland => {
            let n = ed.count(Label::Myo) / 4;
            (add_island(&ed, Label::Myo, 9, n)?, es)
        }
        Defect::LowCoverage => (ed, clear_label(&es, Label::Myo, &[3, 4, 5, 6, 7, 8])?),
        Defect::MissingRv => {
            let all: Vec<usize> = (0..spec.dims[0]).collect();
            (ed, clear_label(&es, Label::Rvbp, &all)?)
        }
        Defect::DetachedRv => (
            render(spec, &HeartShape { rv_offset: 3.0, ..HeartShape::ED }, ED_FRAME)?,
            render(spec, &HeartShape { rv_offset: 3.0, ..HeartShape::ES }, ES_FRAME)?,
        ),
    })
}

fn blank_like(frame: &SegmentationFrame, index: usize) -> Result<SegmentationFrame> {
    let grid = cmrqc_core::Grid3::filled(frame.grid().dims(), Label::Background);
    Ok(SegmentationFrame::new(grid, *frame.geometry(), index)?)
}

fn write_case(dir: &Path, number: usize, seed: u64) -> Result<SynthCase> {
    let case_id = format!("SYN{number:03}");
    let defect = Defect::for_case(number);
    let layout = match (defect, number % 3) {
        (Some(_), _) => SegLayout::PerFrame,
        (None, 0) => SegLayout::PerFrame,
        (None, 1) => SegLayout::FullCine,
        (None, _) => SegLayout::SparseCine,
    };
    let spec = spec_for(number, defect);
    let (ed_shape, es_shape) = shapes_for(number, defect);
    let cine = cine_frames(&spec, &ed_shape, &es_shape, N_FRAMES)?;

    let case_dir = dir.join(&case_id);
    fs::create_dir_all(&case_dir).with_context(|| format!("creating {}", case_dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(number as u64));
    let images = ImageSeries {
        geometry: spec.geometry()?,
        frames: cine.iter().map(|f| synth_image(f, &Intensities::default(), &mut rng)).collect(),
    };
    write_image(case_dir.join("sa.nii.gz"), &images)?;

    let (ed, es) = match defect {
        Some(d) => defect_frames(&spec, d)?,
        None => (render(&spec, &ed_shape, ED_FRAME)?, render(&spec, &es_shape, ES_FRAME)?),
    };
    let identity = LabelMap::identity();
    match layout {
        SegLayout::FullCine => {
            let refs: Vec<&SegmentationFrame> = cine.iter().collect();
            write_segmentation(case_dir.join("seg_sa.nii.gz"), &refs, &identity)?;
        }
        SegLayout::SparseCine => {
            let frames: Vec<SegmentationFrame> = (0..N_FRAMES)
                .map(|t| match t {
                    ED_FRAME => Ok(ed.clone()),
                    ES_FRAME => Ok(es.clone()),
                    _ => blank_like(&ed, t),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SegmentationFrame> = frames.iter().collect();
            write_segmentation(case_dir.join("seg_sa.nii.gz"), &refs, &identity)?;
        }
        SegLayout::PerFrame => {
            for f in [&ed, &es] {
                let name = format!("seg_sa_frame{:02}.nii.gz", f.frame_index);
                write_segmentation(case_dir.join(name), &[f], &identity)?;
            }
        }
    }
    write_atomic(&case_dir.join("meta.json"), &to_json_bytes(&metadata(number, &case_id)))?;

    let mut expected = defect.map(Defect::expected).unwrap_or_default();
    expected.sort();
    Ok(SynthCase {
        case_id,
        defect,
        layout,
        expected_criteria: expected,
    })
}

/// Writes every case under `dir` plus an `expected.json` index.
pub fn generate(dir: &Path, seed: u64) -> Result<SynthIndex> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cases = (1..=N_CASES)
        .map(|n| write_case(dir, n, seed))
        .collect::<Result<Vec<_>>>()?;
    let index = SynthIndex { seed, cases };
    write_atomic(&dir.join(EXPECTED_FILE), &to_json_bytes(&index))?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<SynthIndex> {
    let path = dir.join(EXPECTED_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
