//! Volume ingestion, 4D splitting and case assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{self, DataType, NiftiHeader, NiftiVolume};
use crate::volume::{Geometry, Grid3, Label, LabelMap, ScalarGrid, SegmentationFrame};

/// Segmentation values stored as floats must lie this close to an integer.
const INTEGER_TOLERANCE: f64 = 1e-6;
/// Relative tolerance when comparing voxel spacings of two volumes.
pub const GEOMETRY_TOLERANCE: f64 = 1e-3;

/// One 3D volume cut out of a (possibly 4D) file.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVolume {
    pub frame_index: usize,
    pub geometry: Geometry,
    pub values: ScalarGrid,
}

#[derive(Debug, Clone)]
pub struct LoadedSegmentation {
    pub frames: Vec<SegmentationFrame>,
    /// Source codes absent from the label map, with voxel counts. These
    /// voxels are stored as background.
    pub unexpected: BTreeMap<i64, usize>,
    /// Number of frames in the file (1 for a 3D volume).
    pub n_frames: usize,
}

/// Cine image frames sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeries {
    pub geometry: Geometry,
    pub frames: Vec<ScalarGrid>,
}

fn geometry_from_header(h: &NiftiHeader) -> Result<Geometry> {
    let [nx, ny, nz, _] = h.dims;
    let g = Geometry::new([nz, ny, nx], [h.pixdim[0], h.pixdim[1], h.pixdim[2]])
        .map_err(|e| Error::Format(e.to_string()))?;
    let interval = (h.ndim == 4 && h.pixdim[3] > 0.0 && h.pixdim[3].is_finite()).then_some(h.pixdim[3]);
    g.with_frame_interval(interval)
}

/// Splits a decoded volume into its 3D frames (one frame for 3D input).
pub fn split_volume(vol: &NiftiVolume) -> Result<Vec<FrameVolume>> {
    let geometry = geometry_from_header(&vol.header)?;
    let values = vol.scaled_data();
    let n = vol.header.frame_len();
    (0..vol.header.dims[3])
        .map(|t| {
            Ok(FrameVolume {
                frame_index: t,
                geometry,
                values: Grid3::from_vec(geometry.dims(), values[t * n..(t + 1) * n].to_vec())?,
            })
        })
        .collect()
}

/// Splits a 4D file into 3D frames indexed `0..T`.
pub fn split_4d(path: impl AsRef<Path>) -> Result<Vec<FrameVolume>> {
    let vol = nifti::read(path.as_ref())?;
    if vol.header.ndim != 4 {
        return Err(Error::Format(format!(
            "{}: expected a 4D volume, found {} dimensions",
            path.as_ref().display(),
            vol.header.ndim
        )));
    }
    split_volume(&vol)
}

fn to_labels(
    values: &[f64],
    label_map: &LabelMap,
    strict: bool,
    unexpected: &mut BTreeMap<i64, usize>,
) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let rounded = v.round();
        if !v.is_finite() || (v - rounded).abs() > INTEGER_TOLERANCE {
            return Err(Error::Format(format!("non-integer segmentation value {v}")));
        }
        let code = rounded as i64;
        match label_map.get(code) {
            Some(l) => out.push(l),
            None => {
                *unexpected.entry(code).or_default() += 1;
                out.push(Label::Background);
            }
        }
    }
    if strict {
        if let Some((&code, &count)) = unexpected.iter().next() {
            return Err(Error::Labeling { code, count });
        }
    }
    Ok(out)
}

/// Decodes segmentation bytes, remapping codes through `label_map`.
pub fn decode_segmentation(bytes: &[u8], label_map: &LabelMap, strict: bool) -> Result<LoadedSegmentation> {
    let vol = nifti::decode(bytes)?;
    segmentation_from_volume(&vol, label_map, strict)
}

fn segmentation_from_volume(vol: &NiftiVolume, label_map: &LabelMap, strict: bool) -> Result<LoadedSegmentation> {
    let geometry = geometry_from_header(&vol.header)?;
    let n = vol.header.frame_len();
    let mut unexpected = BTreeMap::new();
    // segmentations are stored codes: scaling is deliberately ignored
    let labels = to_labels(&vol.data, label_map, strict, &mut unexpected)?;
    let frames = labels
        .chunks(n)
        .enumerate()
        .map(|(t, chunk)| {
            SegmentationFrame::new(Grid3::from_vec(geometry.dims(), chunk.to_vec())?, geometry, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSegmentation {
        n_frames: frames.len(),
        frames,
        unexpected,
    })
}

/// Loads a 3D or 4D segmentation volume.
pub fn load_segmentation(path: impl AsRef<Path>, label_map: &LabelMap, strict: bool) -> Result<LoadedSegmentation> {
    let path = path.as_ref();
    let vol = nifti::read(path)?;
    segmentation_from_volume(&vol, label_map, strict).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a 3D or 4D image with scale slope/intercept applied.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSeries> {
    let vol = nifti::read(path)?;
    let frames = split_volume(&vol)?;
    Ok(ImageSeries {
        geometry: frames[0].geometry,
        frames: frames.into_iter().map(|f| f.values).collect(),
    })
}

fn header_for(geometry: &Geometry, n_frames: usize, datatype: DataType) -> NiftiHeader {
    NiftiHeader::new(
        [geometry.n_cols, geometry.n_rows, geometry.n_slices, n_frames],
        [
            geometry.voxel_dx,
            geometry.voxel_dy,
            geometry.slice_spacing,
            geometry.frame_interval.unwrap_or(0.0),
        ],
        datatype,
    )
}

/// Writes frames as one 3D (single frame) or 4D volume, encoding labels
/// through `label_map`.
pub fn write_segmentation(
    path: impl AsRef<Path>,
    frames: &[&SegmentationFrame],
    label_map: &LabelMap,
) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("no frames to write".into()))?;
    let geometry = *first.geometry();
    let mut codes = [0f64; 4];
    for l in Label::ALL {
        codes[l as usize] = label_map.inverse(l).ok_or_else(|| {
            Error::InvalidInput(format!("label map has no code for {l}"))
        })? as f64;
    }
    let mut data = Vec::with_capacity(geometry.n_voxels() * frames.len());
    for f in frames {
        if f.geometry().dims() != geometry.dims() {
            return Err(Error::InvalidInput("frames differ in shape".into()));
        }
        data.extend(f.grid().as_slice().iter().map(|&l| codes[l as usize]));
    }
    let datatype = if codes.iter().all(|&c| (0.0..=255.0).contains(&c)) {
        DataType::U8
    } else {
        DataType::I16
    };
    nifti::write(path, &header_for(&geometry, frames.len(), datatype), &data)
}

/// Writes image frames as 16-bit integers when lossless, else float32.
pub fn write_image(path: impl AsRef<Path>, series: &ImageSeries) -> Result<()> {
    let data: Vec<f64> = series
        .frames
        .iter()
        .flat_map(|f| f.as_slice().iter().copied())
        .collect();
    let integral = data
        .iter()
        .all(|&v| v.fract() == 0.0 && (i16::MIN as f64..=i16::MAX as f64).contains(&v));
    let datatype = if integral { DataType::I16 } else { DataType::F32 };
    nifti::write(path, &header_for(&series.geometry, series.frames.len(), datatype), &data)
}

/// JSON sidecar describing a case.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_strength_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_interval_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl CaseMetadata {
    pub fn new(case_id: impl Into<String>) -> Self {
        CaseMetadata {
            case_id: case_id.into(),
            ..Default::default()
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: CaseMetadata = serde_json::from_str(&text)?;
        if let Some(t) = meta.frame_interval_ms {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!("frame_interval_ms must be positive, got {t}")));
            }
        }
        Ok(meta)
    }
}

/// One patient study: sparse segmented frames plus optional cine images.
#[derive(Debug, Clone)]
pub struct CineCase {
    pub case_id: String,
    segmented_frames: BTreeMap<usize, SegmentationFrame>,
    images: Option<ImageSeries>,
    pub metadata: CaseMetadata,
    /// Source codes outside the label map found while loading.
    pub unexpected_labels: BTreeMap<i64, usize>,
    /// Total cine frame count when known (from a 4D file or the images).
    pub n_cine_frames: Option<usize>,
}

impl CineCase {
    pub fn frames(&self) -> &BTreeMap<usize, SegmentationFrame> {
        &self.segmented_frames
    }

    pub fn frame(&self, index: usize) -> Option<&SegmentationFrame> {
        self.segmented_frames.get(&index)
    }

    pub fn images(&self) -> Option<&ImageSeries> {
        self.images.as_ref()
    }

    pub fn geometry(&self) -> &Geometry {
        self.segmented_frames
            .values()
            .next()
            .expect("a case always holds at least one frame")
            .geometry()
    }

    /// Frame interval in ms from the volume header, else the sidecar.
    pub fn frame_interval_ms(&self) -> Option<f64> {
        self.geometry()
            .frame_interval
            .or(self.images.as_ref().and_then(|i| i.geometry.frame_interval))
            .or(self.metadata.frame_interval_ms)
    }

    /// Copy of this case with every segmented frame replaced through `f`.
    pub fn map_frames(&self, mut f: impl FnMut(&SegmentationFrame) -> SegmentationFrame) -> CineCase {
        CineCase {
            segmented_frames: self
                .segmented_frames
                .iter()
                .map(|(&i, fr)| (i, f(fr)))
                .collect(),
            ..self.clone()
        }
    }
}

fn same_geometry(a: &Geometry, b: &Geometry) -> bool {
    a.dims() == b.dims() && a.max_relative_deviation(b) <= 1e-9
}

/// Builds a case from segmented frames; identical duplicates collapse,
/// conflicting duplicates are rejected.
pub fn assemble_case(
    case_id: impl Into<String>,
    frames: impl IntoIterator<Item = SegmentationFrame>,
    images: Option<ImageSeries>,
    metadata: CaseMetadata,
) -> Result<CineCase> {
    let case_id = case_id.into();
    let mut map: BTreeMap<usize, SegmentationFrame> = BTreeMap::new();
    let mut reference: Option<Geometry> = None;
    for frame in frames {
        let g = *frame.geometry();
        match reference {
            None => reference = Some(g),
            Some(r) if !same_geometry(&r, &g) => {
                return Err(Error::Assembly(format!(
                    "{case_id}: frame {} geometry differs from the first frame",
                    frame.frame_index
                )))
            }
            _ => {}
        }
        match map.get(&frame.frame_index) {
            Some(existing) if existing.grid() == frame.grid() => {}
            Some(_) => {
                return Err(Error::Assembly(format!(
                    "{case_id}: conflicting segmentations for frame {}",
                    frame.frame_index
                )))
            }
            None => {
                map.insert(frame.frame_index, frame);
            }
        }
    }
    let reference =
        reference.ok_or_else(|| Error::Assembly(format!("{case_id}: no segmented frames")))?;
    if let Some(img) = &images {
        if !same_geometry(&img.geometry, &reference) {
            return Err(Error::Assembly(format!(
                "{case_id}: image geometry differs from segmentation geometry"
            )));
        }
        if let Some(&max) = map.keys().next_back() {
            if max >= img.frames.len() {
                return Err(Error::Assembly(format!(
                    "{case_id}: segmented frame {max} has no image frame"
                )));
            }
        }
    }
    Ok(CineCase {
        case_id,
        n_cine_frames: images.as_ref().map(|i| i.frames.len()),
        segmented_frames: map,
        images,
        metadata,
        unexpected_labels: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Curation {
    Accepted,
    Rejected(String),
}

impl Curation {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Curation::Accepted)
    }
}

/// Cases with fewer than two segmented frames are excluded.
pub fn curate_case(case: &CineCase) -> Curation {
    if case.frames().len() < 2 {
        Curation::Rejected("fewer than two segmented frames".into())
    } else {
        Curation::Accepted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::new([2, 3, 4], [1.0, 1.0, 1.0]).unwrap()
    }

    fn frame(idx: usize, fill: Label) -> SegmentationFrame {
        SegmentationFrame::new(Grid3::filled([2, 3, 4], fill), geom(), idx).unwrap()
    }

    #[test]
    fn assemble_two_frames() {
        let case = assemble_case(
            "c",
            [frame(0, Label::Lvbp), frame(12, Label::Myo)],
            None,
            CaseMetadata::new("c"),
        )
        .unwrap();
        assert_eq!(case.frames().len(), 2);
        assert_eq!(case.frames().keys().copied().collect::<Vec<_>>(), vec![0, 12]);
    }

    #[test]
    fn identical_duplicate_collapses() {
        let case = assemble_case(
            "c",
            [frame(0, Label::Lvbp), frame(0, Label::Lvbp)],
            None,
            CaseMetadata::new("c"),
        )
        .unwrap();
        assert_eq!(case.frames().len(), 1);
    }

    #[test]
    fn conflicting_duplicate_rejected() {
        let err = assemble_case(
            "c",
            [frame(0, Label::Lvbp), frame(0, Label::Rvbp)],
            None,
            CaseMetadata::new("c"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Assembly(_)));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let other = Geometry::new([2, 3, 4], [1.0, 1.0, 2.0]).unwrap();
        let f2 = SegmentationFrame::new(Grid3::filled([2, 3, 4], Label::Lvbp), other, 1).unwrap();
        assert!(matches!(
            assemble_case("c", [frame(0, Label::Lvbp), f2], None, CaseMetadata::new("c")),
            Err(Error::Assembly(_))
        ));
        assert!(matches!(
            assemble_case("c", Vec::new(), None, CaseMetadata::new("c")),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn curation_boundary() {
        let one = assemble_case("c", [frame(0, Label::Lvbp)], None, CaseMetadata::new("c")).unwrap();
        assert_eq!(
            curate_case(&one),
            Curation::Rejected("fewer than two segmented frames".into())
        );
        let two = assemble_case(
            "c",
            [frame(0, Label::Lvbp), frame(1, Label::Lvbp)],
            None,
            CaseMetadata::new("c"),
        )
        .unwrap();
        assert_eq!(curate_case(&two), Curation::Accepted);
        let thirty = assemble_case(
            "c",
            (0..30).map(|i| frame(i, Label::Lvbp)),
            None,
            CaseMetadata::new("c"),
        )
        .unwrap();
        assert!(curate_case(&thirty).is_accepted());
    }

    #[test]
    fn float_segmentation_tolerance() {
        let h = NiftiHeader::new([2, 1, 1, 1], [1.0; 4], DataType::F32);
        let ok = nifti::encode(&h, &[1.0000001, 2.0]).unwrap();
        let seg = decode_segmentation(&ok, &LabelMap::identity(), true).unwrap();
        assert_eq!(seg.frames[0].grid().as_slice(), &[Label::Lvbp, Label::Myo]);
        let bad = nifti::encode(&h, &[1.25, 2.0]).unwrap();
        assert!(matches!(
            decode_segmentation(&bad, &LabelMap::identity(), false),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unexpected_codes_recorded_or_rejected() {
        let h = NiftiHeader::new([3, 1, 1, 1], [1.0; 4], DataType::U8);
        let bytes = nifti::encode(&h, &[0.0, 4.0, 4.0]).unwrap();
        let seg = decode_segmentation(&bytes, &LabelMap::identity(), false).unwrap();
        assert_eq!(seg.unexpected.get(&4), Some(&2));
        assert_eq!(seg.frames[0].count(Label::Background), 3);
        assert!(matches!(
            decode_segmentation(&bytes, &LabelMap::identity(), true),
            Err(Error::Labeling { code: 4, count: 2 })
        ));
    }

    #[test]
    fn sidecar_parses_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.json");
        fs::write(&p, r#"{"case_id":"a","vendor":"Siemens","field_strength_t":1.5}"#).unwrap();
        let m = CaseMetadata::read(&p).unwrap();
        assert_eq!(m.case_id, "a");
        assert_eq!(m.vendor.as_deref(), Some("Siemens"));
        assert_eq!(m.disease, None);
        fs::write(&p, r#"{"case_id":"a","frame_interval_ms":-3}"#).unwrap();
        assert!(CaseMetadata::read(&p).is_err());
    }
}
