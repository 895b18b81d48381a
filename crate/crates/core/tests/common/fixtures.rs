//! One constructed case per QC criterion, built from the clean phantom by
//! injecting a single defect.

use std::collections::BTreeSet;

use cmrqc_core::case::{assemble_case, decode_segmentation, CaseMetadata, CineCase};
use cmrqc_core::nifti::{self, DataType, NiftiHeader};
use cmrqc_core::phantom::{add_island, clear_label, render, HeartShape, PhantomSpec};
use cmrqc_core::qc::CriterionCode::{self, *};
use cmrqc_core::{Geometry, Label, LabelMap, SegmentationFrame};

pub const ED: usize = 0;
pub const ES: usize = 10;

pub struct Fixture {
    pub name: &'static str,
    pub case: CineCase,
    pub image_geometry: Option<Geometry>,
    /// Codes expected to trigger under ground-truth screening.
    pub qa_gt: BTreeSet<CriterionCode>,
    /// Codes expected to trigger under post-analysis QC.
    pub post: BTreeSet<CriterionCode>,
}

pub fn spec() -> PhantomSpec {
    PhantomSpec::default()
}

pub fn ed_frame() -> SegmentationFrame {
    render(&spec(), &HeartShape::ED, ED).unwrap()
}

pub fn es_frame() -> SegmentationFrame {
    render(&spec(), &HeartShape::ES, ES).unwrap()
}

pub fn case_of(name: &str, ed: SegmentationFrame, es: SegmentationFrame) -> CineCase {
    assemble_case(name, [ed, es], None, CaseMetadata::new(name)).unwrap()
}

fn fixture(
    name: &'static str,
    case: CineCase,
    image_geometry: Option<Geometry>,
    qa_gt: &[CriterionCode],
    post: &[CriterionCode],
) -> Fixture {
    Fixture {
        name,
        case,
        image_geometry,
        qa_gt: qa_gt.iter().copied().collect(),
        post: post.iter().copied().collect(),
    }
}

/// ES frame written with source code 4 in one background corner, then read
/// back through a non-strict load.
fn es_with_unexpected_code() -> (SegmentationFrame, std::collections::BTreeMap<i64, usize>) {
    let es = es_frame();
    let g = *es.geometry();
    let [ns, nr, nc] = g.dims();
    let mut data: Vec<f64> = es.grid().as_slice().iter().map(|l| l.code() as f64).collect();
    for c in 0..6 {
        data[(ns - 1) * nr * nc + c] = 4.0;
    }
    let header = NiftiHeader::new(
        [nc, nr, ns, 1],
        [g.voxel_dx, g.voxel_dy, g.slice_spacing, 0.0],
        DataType::U8,
    );
    let bytes = nifti::encode(&header, &data).unwrap();
    let loaded = decode_segmentation(&bytes, &LabelMap::identity(), false).unwrap();
    let frame = loaded.frames.into_iter().next().unwrap();
    let frame = SegmentationFrame::new(frame.into_grid(), g, ES).unwrap();
    (frame, loaded.unexpected)
}

pub fn all() -> Vec<Fixture> {
    let mut out = Vec::new();

    out.push(fixture("clean", case_of("clean", ed_frame(), es_frame()), Some(*ed_frame().geometry()), &[], &[]));

    let (es, unexpected) = es_with_unexpected_code();
    let mut case = case_of("unexpected_label", ed_frame(), es);
    case.unexpected_labels = unexpected;
    out.push(fixture("unexpected_label", case, None, &[UnexpectedLabel], &[]));

    // removing the RV at ES also leaves RV SV = RVEDV, breaking SV agreement
    let es = clear_label(&es_frame(), Label::Rvbp, &(0..10).collect::<Vec<_>>()).unwrap();
    out.push(fixture(
        "zero_ventricular_volume",
        case_of("zero_ventricular_volume", ed_frame(), es),
        None,
        &[ZeroVentricularVolume, SvDiffGt25],
        &[ZeroVentricularVolume, SvDiffGt25, ImplausibleBiomarker],
    ));

    let g = *ed_frame().geometry();
    let image_geometry = Geometry::new(g.dims(), [g.voxel_dx * 1.01, g.voxel_dy, g.slice_spacing]).unwrap();
    out.push(fixture(
        "metadata_mismatch",
        case_of("metadata_mismatch", ed_frame(), es_frame()),
        Some(image_geometry),
        &[MetadataMismatch],
        &[],
    ));

    let detached = |s: HeartShape, f| {
        render(&spec(), &HeartShape { rv_offset: 3.0, ..s }, f).unwrap()
    };
    out.push(fixture(
        "global_outlier",
        case_of("global_outlier", detached(HeartShape::ED, ED), detached(HeartShape::ES, ES)),
        None,
        &[GlobalOutlierGt10],
        &[GlobalOutlierGt10],
    ));

    // myocardial island of 20% of the label on the empty basal-most slice
    let ed = ed_frame();
    let island = ed.count(Label::Myo) / 4;
    let ed = add_island(&ed, Label::Myo, 9, island).unwrap();
    out.push(fixture(
        "label_outlier",
        case_of("label_outlier", ed, es_frame()),
        None,
        &[LabelOutlierGt10],
        &[LabelOutlierGt10],
    ));

    // myocardium on 2 of 8 segmented slices at ES
    let es = clear_label(&es_frame(), Label::Myo, &[3, 4, 5, 6, 7, 8]).unwrap();
    out.push(fixture(
        "label_coverage",
        case_of("label_coverage", ed_frame(), es),
        None,
        &[LabelCoverageLt30],
        &[LabelCoverageLt30],
    ));

    // myocardium missing on slice 7 at ES; the cut-off apical piece is
    // small enough to be repaired rather than flagged as an outlier
    let es = clear_label(&es_frame(), Label::Myo, &[7]).unwrap();
    out.push(fixture("slice_gap", case_of("slice_gap", ed_frame(), es), None, &[SliceGap], &[SliceGap]));

    // RV does not contract: RV SV = 0, which also maximises the SV difference.
    // The outer wall keeps its ED radius so the RV rasterises identically.
    let still_rv = HeartShape {
        rv_radius: HeartShape::ED.rv_radius,
        myo_thickness: HeartShape::ED.lv_radius + HeartShape::ED.myo_thickness - HeartShape::ES.lv_radius,
        ..HeartShape::ES
    };
    let es = render(&spec(), &still_rv, ES).unwrap();
    out.push(fixture(
        "nonpositive_sv",
        case_of("nonpositive_sv", ed_frame(), es),
        None,
        &[NonpositiveSv, SvDiffGt25],
        &[NonpositiveSv, SvDiffGt25, ImplausibleBiomarker],
    ));

    let es = render(&spec(), &HeartShape { rv_radius: 14.0, ..HeartShape::ES }, ES).unwrap();
    out.push(fixture("sv_diff", case_of("sv_diff", ed_frame(), es), None, &[SvDiffGt25], &[SvDiffGt25]));

    // a grossly enlarged heart: same shape, in-plane voxels 4 mm wide
    let big = PhantomSpec {
        spacing: [4.0, 4.0, 8.0],
        ..spec()
    };
    let case = case_of(
        "implausible_biomarker",
        render(&big, &HeartShape::ED, ED).unwrap(),
        render(&big, &HeartShape::ES, ES).unwrap(),
    );
    out.push(fixture("implausible_biomarker", case, None, &[], &[ImplausibleBiomarker]));

    out
}
