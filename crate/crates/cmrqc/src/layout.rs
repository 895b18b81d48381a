//! On-disk case layout: one directory per case holding `sa.nii.gz` (cine
//! image, optional), `seg_sa.nii.gz` and/or `seg_sa_frameNN.nii.gz`, and
//! `meta.json` (optional). Uncompressed `.nii` works too.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmrqc_core::case::{assemble_case, load_image, load_segmentation, CaseMetadata, CineCase};
use cmrqc_core::{Geometry, Label, LabelMap, SegmentationFrame};

pub const META_FILE: &str = "meta.json";
const IMAGE_STEM: &str = "sa";
const SEG_STEM: &str = "seg_sa";
const FRAME_PREFIX: &str = "seg_sa_frame";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseDir {
    pub case_id: String,
    pub dir: PathBuf,
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn is_case_file(name: &str) -> bool {
    name == META_FILE || nifti_stem(name).is_some_and(|s| s == SEG_STEM || s.starts_with(FRAME_PREFIX))
}

/// Case directories directly below `root`, ordered by name. A directory is
/// a case when it holds a sidecar or a segmentation file.
pub fn discover(root: &Path) -> Result<Vec<CaseDir>> {
    let entries = fs::read_dir(root).with_context(|| format!("cannot read input root {}", root.display()))?;
    let mut cases = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("listing {}", root.display()))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let holds_case = fs::read_dir(&path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok())
            .any(|e| is_case_file(&e.file_name().to_string_lossy()));
        if holds_case {
            cases.push(CaseDir {
                case_id: entry.file_name().to_string_lossy().into_owned(),
                dir: path,
            });
        }
    }
    if cases.is_empty() {
        bail!("no cases found under {}", root.display());
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [".nii.gz", ".nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}{ext}")))
        .find(|p| p.is_file())
}

/// Per-frame segmentation files as (frame index, path), by frame index.
fn frame_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(digits) = nifti_stem(&name).and_then(|s| s.strip_prefix(FRAME_PREFIX)) else {
            continue;
        };
        let index: usize = digits
            .parse()
            .with_context(|| format!("{}: cannot read a frame number from {name}", dir.display()))?;
        out.push((index, entry.path()));
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case: CineCase,
    /// Geometry of the cine image, when one was found.
    pub image_geometry: Option<Geometry>,
    /// Input file names, relative to the case directory.
    pub inputs: Vec<String>,
    pub warnings: Vec<String>,
}

fn has_foreground(frame: &SegmentationFrame) -> bool {
    frame.grid().as_slice().iter().any(|l| *l != Label::Background)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_case(case_dir: &CaseDir, label_map: &LabelMap, strict: bool) -> Result<LoadedCase> {
    let dir = &case_dir.dir;
    let mut inputs = Vec::new();
    let mut warnings = Vec::new();

    let meta_path = dir.join(META_FILE);
    let metadata = if meta_path.is_file() {
        inputs.push(META_FILE.to_string());
        let mut meta = CaseMetadata::read(&meta_path)?;
        if meta.case_id != case_dir.case_id {
            warnings.push(format!(
                "sidecar case_id {:?} differs from directory name; using the directory name",
                meta.case_id
            ));
            meta.case_id = case_dir.case_id.clone();
        }
        meta
    } else {
        CaseMetadata::new(&case_dir.case_id)
    };

    let mut frames = Vec::new();
    let mut unexpected: BTreeMap<i64, usize> = BTreeMap::new();
    let mut seg_frame_count = None;
    if let Some(path) = find_file(dir, SEG_STEM) {
        inputs.push(file_name(&path));
        let loaded = load_segmentation(&path, label_map, strict)?;
        for (code, n) in loaded.unexpected {
            *unexpected.entry(code).or_default() += n;
        }
        if loaded.n_frames > 1 {
            seg_frame_count = Some(loaded.n_frames);
            // frames of a 4D file without any label were simply not drawn
            frames.extend(loaded.frames.into_iter().filter(has_foreground));
        } else {
            frames.extend(loaded.frames);
        }
    }
    for (index, path) in frame_files(dir)? {
        inputs.push(file_name(&path));
        let loaded = load_segmentation(&path, label_map, strict)?;
        if loaded.n_frames != 1 {
            bail!("{}: per-frame file holds {} frames", path.display(), loaded.n_frames);
        }
        for (code, n) in loaded.unexpected {
            *unexpected.entry(code).or_default() += n;
        }
        let frame = loaded.frames.into_iter().next().expect("one frame");
        let geometry = *frame.geometry();
        frames.push(SegmentationFrame::new(frame.into_grid(), geometry, index)?);
    }
    if frames.is_empty() {
        bail!("{}: no segmentation found", dir.display());
    }

    let image = match find_file(dir, IMAGE_STEM) {
        Some(path) => {
            inputs.push(file_name(&path));
            Some(load_image(&path)?)
        }
        None => None,
    };
    let image_geometry = image.as_ref().map(|i| i.geometry);

    let id = case_dir.case_id.clone();
    let mut case = match image {
        Some(img) => match assemble_case(id.clone(), frames.clone(), Some(img), metadata.clone()) {
            Ok(case) => case,
            Err(e) => {
                // geometry disagreement is the metadata rule's business
                warnings.push(format!("image not attached: {e}"));
                assemble_case(id, frames, None, metadata)?
            }
        },
        None => assemble_case(id, frames, None, metadata)?,
    };
    case.unexpected_labels = unexpected;
    if case.n_cine_frames.is_none() {
        case.n_cine_frames = seg_frame_count;
    }
    inputs.sort();
    Ok(LoadedCase {
        case,
        image_geometry,
        inputs,
        warnings,
    })
}
