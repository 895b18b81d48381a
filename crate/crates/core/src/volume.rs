//! Voxel grids, geometry and the canonical label set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical segmentation labels. Every external encoding is mapped onto
/// these codes through a [`LabelMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    #[default]
    #[serde(rename = "BACKGROUND")]
    Background = 0,
    #[serde(rename = "LVBP")]
    Lvbp = 1,
    #[serde(rename = "MYO")]
    Myo = 2,
    #[serde(rename = "RVBP")]
    Rvbp = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Background, Label::Lvbp, Label::Myo, Label::Rvbp];
    pub const FOREGROUND: [Label; 3] = [Label::Lvbp, Label::Myo, Label::Rvbp];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Lvbp),
            2 => Some(Label::Myo),
            3 => Some(Label::Rvbp),
            _ => None,
        }
    }

    pub fn is_foreground(self) -> bool {
        self != Label::Background
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "BACKGROUND",
            Label::Lvbp => "LVBP",
            Label::Myo => "MYO",
            Label::Rvbp => "RVBP",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Voxel spacing and grid extent. Lengths in mm, time in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub voxel_dx: f64,
    pub voxel_dy: f64,
    /// Centre-to-centre distance between slices.
    pub slice_spacing: f64,
    pub frame_interval: Option<f64>,
    pub n_slices: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let [n_slices, n_rows, n_cols] = dims;
        let [voxel_dx, voxel_dy, slice_spacing] = spacing;
        let geometry = Geometry {
            voxel_dx,
            voxel_dy,
            slice_spacing,
            frame_interval: None,
            n_slices,
            n_rows,
            n_cols,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn with_frame_interval(mut self, interval_ms: Option<f64>) -> Result<Self> {
        self.frame_interval = interval_ms;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("voxel_dx", self.voxel_dx),
            ("voxel_dy", self.voxel_dy),
            ("slice_spacing", self.slice_spacing),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.frame_interval {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "frame_interval must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n_slices, self.n_rows, self.n_cols]
    }

    pub fn n_voxels(&self) -> usize {
        self.n_slices * self.n_rows * self.n_cols
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.voxel_dx * self.voxel_dy * self.slice_spacing
    }

    /// Largest relative deviation between the dimension counts and spacings
    /// of two geometries. Frame timing is not compared.
    pub fn max_relative_deviation(&self, other: &Geometry) -> f64 {
        let rel = |a: f64, b: f64| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        };
        let pairs = [
            (self.n_slices as f64, other.n_slices as f64),
            (self.n_rows as f64, other.n_rows as f64),
            (self.n_cols as f64, other.n_cols as f64),
            (self.voxel_dx, other.voxel_dx),
            (self.voxel_dy, other.voxel_dy),
            (self.slice_spacing, other.slice_spacing),
        ];
        pairs.iter().map(|&(a, b)| rel(a, b)).fold(0.0, f64::max)
    }
}

/// Dense 3D array stored slice-major: index = (slice * rows + row) * cols + col.
/// This matches the NIfTI on-disk order with x = col, y = row, z = slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Grid3 {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "grid data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, s: usize, r: usize, c: usize) -> usize {
        (s * self.dims[1] + r) * self.dims[2] + c
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let c = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], c]
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize, c: usize) -> T {
        self.data[self.index(s, r, c)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, r: usize, c: usize, v: T) {
        let i = self.index(s, r, c);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// The 2D plane at `slice`, row-major.
    pub fn slice_plane(&self, slice: usize) -> &[T] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[slice * plane..(slice + 1) * plane]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub type LabelGrid = Grid3<Label>;
pub type ScalarGrid = Grid3<f64>;

/// One 3D label volume (one cine frame) with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationFrame {
    grid: LabelGrid,
    geometry: Geometry,
    pub frame_index: usize,
}

impl SegmentationFrame {
    pub fn new(grid: LabelGrid, geometry: Geometry, frame_index: usize) -> Result<Self> {
        geometry.validate()?;
        if grid.dims() != geometry.dims() {
            return Err(Error::InvalidInput(format!(
                "grid dims {:?} do not match geometry {:?}",
                grid.dims(),
                geometry.dims()
            )));
        }
        Ok(SegmentationFrame {
            grid,
            geometry,
            frame_index,
        })
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn into_grid(self) -> LabelGrid {
        self.grid
    }

    pub fn with_grid(&self, grid: LabelGrid) -> Result<Self> {
        SegmentationFrame::new(grid, self.geometry, self.frame_index)
    }

    pub fn count(&self, label: Label) -> usize {
        self.grid.as_slice().iter().filter(|&&l| l == label).count()
    }

    pub fn label_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &l in self.grid.as_slice() {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn contains(&self, label: Label) -> bool {
        self.grid.as_slice().iter().any(|&l| l == label)
    }

    /// Slice indices holding at least one voxel of `label`.
    pub fn slices_with(&self, label: Label) -> Vec<usize> {
        (0..self.geometry.n_slices)
            .filter(|&s| self.grid.slice_plane(s).iter().any(|&l| l == label))
            .collect()
    }

    /// Slice indices holding any foreground voxel.
    pub fn segmented_slices(&self) -> Vec<usize> {
        (0..self.geometry.n_slices)
            .filter(|&s| self.grid.slice_plane(s).iter().any(|l| l.is_foreground()))
            .collect()
    }
}

/// Maps source integer codes onto canonical labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    mapping: BTreeMap<i64, Label>,
}

impl LabelMap {
    pub fn new(mapping: BTreeMap<i64, Label>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (&code, &label) in &mapping {
            if label.is_foreground() && !seen.insert(label) {
                return Err(Error::InvalidInput(format!(
                    "label map assigns {label} to more than one source code (again at {code})"
                )));
            }
        }
        Ok(LabelMap { mapping })
    }

    /// 0 → BACKGROUND, 1 → LVBP, 2 → MYO, 3 → RVBP.
    pub fn identity() -> Self {
        LabelMap {
            mapping: Label::ALL.iter().map(|&l| (l.code() as i64, l)).collect(),
        }
    }

    /// 0 → BACKGROUND, 1 → RVBP, 2 → MYO, 3 → LVBP.
    pub fn acdc() -> Self {
        LabelMap {
            mapping: [
                (0, Label::Background),
                (1, Label::Rvbp),
                (2, Label::Myo),
                (3, Label::Lvbp),
            ]
            .into_iter()
            .collect(),
        }
    }

    pub fn get(&self, code: i64) -> Option<Label> {
        self.mapping.get(&code).copied()
    }

    /// Source code for a canonical label, if the map declares one.
    pub fn inverse(&self, label: Label) -> Option<i64> {
        self.mapping
            .iter()
            .find(|(_, &l)| l == label)
            .map(|(&code, _)| code)
    }

    pub fn mapping(&self) -> &BTreeMap<i64, Label> {
        &self.mapping
    }
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_index_roundtrip() {
        let g: Grid3<u8> = Grid3::filled([3, 4, 5], 0);
        for idx in 0..g.len() {
            let [s, r, c] = g.coords(idx);
            assert_eq!(g.index(s, r, c), idx);
        }
    }

    #[test]
    fn geometry_rejects_nonpositive_spacing() {
        assert!(Geometry::new([1, 1, 1], [0.0, 1.0, 1.0]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 1.0, -2.0]).is_err());
        let g = Geometry::new([1, 1, 1], [1.0, 1.0, 1.0]).unwrap();
        assert!(g.with_frame_interval(Some(0.0)).is_err());
    }

    #[test]
    fn frame_rejects_dim_mismatch() {
        let geom = Geometry::new([2, 3, 4], [1.0, 1.0, 1.0]).unwrap();
        let grid = Grid3::filled([2, 3, 5], Label::Background);
        assert!(SegmentationFrame::new(grid, geom, 0).is_err());
    }

    #[test]
    fn label_map_must_be_injective() {
        let m: BTreeMap<i64, Label> = [(1, Label::Lvbp), (7, Label::Lvbp)].into_iter().collect();
        assert!(LabelMap::new(m).is_err());
        // several codes may still collapse onto background
        let m: BTreeMap<i64, Label> =
            [(0, Label::Background), (9, Label::Background)].into_iter().collect();
        assert!(LabelMap::new(m).is_ok());
    }

    #[test]
    fn geometry_deviation() {
        let a = Geometry::new([10, 64, 64], [1.5, 1.5, 8.0]).unwrap();
        let mut b = a;
        assert_eq!(a.max_relative_deviation(&b), 0.0);
        b.slice_spacing = 10.0;
        assert!((a.max_relative_deviation(&b) - 0.2).abs() < 1e-12);
    }
}
