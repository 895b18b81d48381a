//! Quality-controlled analysis of short-axis cine cardiac MR segmentations.
//!
//! - [`volume`], [`nifti`], [`case`]: domain types, NIfTI-1 I/O and case assembly
//! - [`components`], [`qc`]: connected components and the QC rule engine
//! - [`biomarkers`], [`otsu`]: volumetry, ED/ES, peak rates, papillary exclusion
//! - [`loss`]: missing-label-masked Dice + cross-entropy loss and training schedule numerics
//! - [`stats`]: agreement statistics and nonparametric tests
//! - [`phantom`]: synthetic heart phantoms used by tests and the sample dataset

pub mod biomarkers;
pub mod case;
pub mod components;
pub mod error;
pub mod loss;
pub mod nifti;
pub mod otsu;
pub mod phantom;
pub mod qc;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Grid3, Label, LabelMap, SegmentationFrame};
