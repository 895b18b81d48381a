//! Synthetic short-axis heart phantoms.
//!
//! Each slice holds an LV blood-pool disc, a myocardial annulus around it and
//! an RV disc abutting the annulus on the septal side. Cavities shrink on the
//! two most apical segmented slices while the wall keeps its thickness, so
//! every label stays one 26-connected component. Shapes are in voxel units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::case::{assemble_case, CaseMetadata, CineCase, ImageSeries};
use crate::error::{Error, Result};
use crate::volume::{Geometry, Grid3, Label, LabelGrid, ScalarGrid, SegmentationFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    /// [slices, rows, cols]
    pub dims: [usize; 3],
    /// [dx, dy, slice spacing] in mm
    pub spacing: [f64; 3],
    pub first_slice: usize,
    pub last_slice: usize,
    pub frame_interval_ms: Option<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [10, 96, 96],
            spacing: [1.5, 1.5, 8.0],
            first_slice: 1,
            last_slice: 8,
            frame_interval_ms: None,
        }
    }
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing)?.with_frame_interval(self.frame_interval_ms)
    }

    /// Cavity radius scale of a slice; 0 outside the segmented range.
    pub fn taper(&self, slice: usize) -> f64 {
        if slice < self.first_slice || slice > self.last_slice {
            0.0
        } else if slice == self.last_slice {
            0.55
        } else if slice + 1 == self.last_slice {
            0.75
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartShape {
    pub lv_radius: f64,
    pub myo_thickness: f64,
    pub rv_radius: f64,
    /// Extra distance between the RV and the myocardium; 0 keeps them touching.
    pub rv_offset: f64,
}

impl HeartShape {
    pub const ED: HeartShape = HeartShape {
        lv_radius: 18.0,
        myo_thickness: 5.0,
        rv_radius: 16.5,
        rv_offset: 0.0,
    };
    pub const ES: HeartShape = HeartShape {
        lv_radius: 13.0,
        myo_thickness: 6.5,
        rv_radius: 11.5,
        rv_offset: 0.0,
    };

    /// Linear blend: `t = 0` gives `self`, `t = 1` gives `other`.
    pub fn lerp(&self, other: &HeartShape, t: f64) -> HeartShape {
        let f = |a: f64, b: f64| a + (b - a) * t;
        HeartShape {
            lv_radius: f(self.lv_radius, other.lv_radius),
            myo_thickness: f(self.myo_thickness, other.myo_thickness),
            rv_radius: f(self.rv_radius, other.rv_radius),
            rv_offset: f(self.rv_offset, other.rv_offset),
        }
    }
}

/// Rasterises one frame.
pub fn render(spec: &PhantomSpec, shape: &HeartShape, frame_index: usize) -> Result<SegmentationFrame> {
    let geometry = spec.geometry()?;
    let [ns, nr, nc] = spec.dims;
    let mut grid: LabelGrid = Grid3::filled(spec.dims, Label::Background);
    let cy = nr as f64 / 2.0;
    let lv_cx = nc as f64 * 0.58;
    for s in 0..ns {
        let k = spec.taper(s);
        if k == 0.0 {
            continue;
        }
        let r_lv = shape.lv_radius * k;
        let r_myo = r_lv + shape.myo_thickness;
        let r_rv = shape.rv_radius * k;
        // anchored to the full-size wall with one voxel of overlap, so the
        // RV touches the annulus on untapered slices
        let rv_cx = lv_cx - (shape.lv_radius + shape.myo_thickness + shape.rv_radius - 1.0 + shape.rv_offset);
        for r in 0..nr {
            for c in 0..nc {
                let y = r as f64 + 0.5 - cy;
                let d_lv = (y * y + (c as f64 + 0.5 - lv_cx).powi(2)).sqrt();
                let d_rv = (y * y + (c as f64 + 0.5 - rv_cx).powi(2)).sqrt();
                let label = if d_lv <= r_lv {
                    Label::Lvbp
                } else if d_lv <= r_myo {
                    Label::Myo
                } else if d_rv <= r_rv {
                    Label::Rvbp
                } else {
                    continue;
                };
                grid.set(s, r, c, label);
            }
        }
    }
    SegmentationFrame::new(grid, geometry, frame_index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intensities {
    pub blood: f64,
    pub myocardium: f64,
    pub background: f64,
    pub noise_sd: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            blood: 200.0,
            myocardium: 80.0,
            background: 20.0,
            noise_sd: 0.0,
        }
    }
}

/// Bright-blood image for a label frame, rounded to integers when noisy.
pub fn synth_image(frame: &SegmentationFrame, intensities: &Intensities, rng: &mut ChaCha8Rng) -> ScalarGrid {
    let mut g = frame.grid().map(|l| match l {
        Label::Lvbp | Label::Rvbp => intensities.blood,
        Label::Myo => intensities.myocardium,
        Label::Background => intensities.background,
    });
    if intensities.noise_sd > 0.0 {
        for v in g.as_mut_slice() {
            *v = (*v + intensities.noise_sd * rng.sample::<f64, _>(StandardNormal)).round().max(0.0);
        }
    }
    g
}

/// Full cine series of `n_frames` frames. The shape follows a raised cosine
/// from `ed` (frame 0) to `es` (frame `n_frames / 2`) and back.
pub fn cine_frames(spec: &PhantomSpec, ed: &HeartShape, es: &HeartShape, n_frames: usize) -> Result<Vec<SegmentationFrame>> {
    if n_frames < 2 {
        return Err(Error::InvalidInput("a cine series needs at least two frames".into()));
    }
    (0..n_frames)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / n_frames as f64;
            render(spec, &ed.lerp(es, 0.5 - 0.5 * phase.cos()), t)
        })
        .collect()
}

/// A fully segmented cine case with images.
pub fn cine_case(
    spec: &PhantomSpec,
    ed: &HeartShape,
    es: &HeartShape,
    n_frames: usize,
    metadata: CaseMetadata,
    seed: u64,
) -> Result<CineCase> {
    let frames = cine_frames(spec, ed, es, n_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = ImageSeries {
        geometry: spec.geometry()?,
        frames: frames.iter().map(|f| synth_image(f, &Intensities::default(), &mut rng)).collect(),
    };
    assemble_case(metadata.case_id.clone(), frames, Some(images), metadata)
}

/// A case with only the ED and ES frames segmented.
pub fn two_frame_case(
    spec: &PhantomSpec,
    ed: (usize, &HeartShape),
    es: (usize, &HeartShape),
    metadata: CaseMetadata,
) -> Result<CineCase> {
    let frames = [render(spec, ed.1, ed.0)?, render(spec, es.1, es.0)?];
    assemble_case(metadata.case_id.clone(), frames, None, metadata)
}

/// Adds a square patch of exactly `n` voxels of `label` in the corner of
/// `slice`, detached from everything else.
pub fn add_island(frame: &SegmentationFrame, label: Label, slice: usize, n: usize) -> Result<SegmentationFrame> {
    let [ns, nr, nc] = frame.grid().dims();
    if slice >= ns {
        return Err(Error::InvalidInput(format!("slice {slice} out of range")));
    }
    let side = (n as f64).sqrt().ceil() as usize;
    if side + 2 > nr.min(nc) {
        return Err(Error::InvalidInput("island does not fit in the slice".into()));
    }
    let mut grid = frame.grid().clone();
    let mut placed = 0;
    'fill: for r in 1..=side {
        for c in 1..=side {
            if placed == n {
                break 'fill;
            }
            grid.set(slice, r, c, label);
            placed += 1;
        }
    }
    frame.with_grid(grid)
}

/// Replaces `label` with background on the given slices.
pub fn clear_label(frame: &SegmentationFrame, label: Label, slices: &[usize]) -> Result<SegmentationFrame> {
    let mut grid = frame.grid().clone();
    let [ns, nr, nc] = grid.dims();
    for &s in slices.iter().filter(|&&s| s < ns) {
        for r in 0..nr {
            for c in 0..nc {
                if grid.get(s, r, c) == label {
                    grid.set(s, r, c, Label::Background);
                }
            }
        }
    }
    frame.with_grid(grid)
}

/// Copies `label` voxels from `source` into `frame` (after clearing it there).
pub fn transplant_label(frame: &SegmentationFrame, source: &SegmentationFrame, label: Label) -> Result<SegmentationFrame> {
    if frame.grid().dims() != source.grid().dims() {
        return Err(Error::InvalidInput("frames differ in shape".into()));
    }
    let mut grid = frame.grid().clone();
    for (dst, &src) in grid.as_mut_slice().iter_mut().zip(source.grid().as_slice()) {
        if *dst == label {
            *dst = Label::Background;
        }
        if src == label {
            *dst = label;
        }
    }
    frame.with_grid(grid)
}
