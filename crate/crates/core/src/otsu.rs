//! Otsu thresholding and papillary-muscle exclusion from blood pools.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Label, ScalarGrid, SegmentationFrame};

/// Otsu split over an equal-width histogram on `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    /// Lower edge of `split_bin`.
    pub threshold: f64,
    /// First bin of the upper class.
    pub split_bin: usize,
    pub min: f64,
    pub width: f64,
    pub n_bins: usize,
}

impl OtsuSplit {
    pub fn bin_of(&self, v: f64) -> usize {
        bin_index(v, self.min, self.width, self.n_bins)
    }

    pub fn is_below(&self, v: f64) -> bool {
        self.bin_of(v) < self.split_bin
    }
}

fn bin_index(v: f64, min: f64, width: f64, n_bins: usize) -> usize {
    let b = ((v - min) / width).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(n_bins - 1)
    }
}

/// Equal-width histogram over the value range; returns counts, min and bin width.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    if n_bins < 2 {
        return Err(Error::InvalidInput("Otsu needs at least two bins".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite intensity".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(max > min) {
        return Err(Error::Degenerate(
            "fewer than two distinct intensities; no separating threshold".into(),
        ));
    }
    let width = (max - min) / n_bins as f64;
    let mut hist = vec![0u64; n_bins];
    for &v in values {
        hist[bin_index(v, min, width, n_bins)] += 1;
    }
    Ok((hist, min, width))
}

/// Between-class variance of a split, up to a positive constant, as an exact
/// fraction `num / den` over bin indices: `(n1*S0 - n0*S1)^2 / (n0*n1)`.
fn split_score(n0: u64, s0: u128, n1: u64, s1: u128) -> (u128, u128) {
    let a = n1 as u128 * s0;
    let b = n0 as u128 * s1;
    let d = a.abs_diff(b);
    (d.saturating_mul(d), n0 as u128 * n1 as u128)
}

fn score_greater(a: (u128, u128), b: (u128, u128)) -> bool {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(x), Some(y)) => x > y,
        // only reachable for enormous histograms
        _ => (a.0 as f64 / a.1 as f64) > (b.0 as f64 / b.1 as f64),
    }
}

/// Split from a histogram, maximising between-class variance; ties go to
/// the lowest split.
pub fn otsu_from_histogram(hist: &[u64]) -> Option<usize> {
    let total_n: u64 = hist.iter().sum();
    let total_s: u128 = hist.iter().enumerate().map(|(i, &h)| i as u128 * h as u128).sum();
    let mut n0 = 0u64;
    let mut s0 = 0u128;
    let mut best: Option<(usize, (u128, u128))> = None;
    for k in 1..hist.len() {
        n0 += hist[k - 1];
        s0 += (k - 1) as u128 * hist[k - 1] as u128;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = split_score(n0, s0, n1, total_s - s0);
        if best.is_none_or(|(_, b)| score_greater(score, b)) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

pub fn otsu(values: &[f64], n_bins: usize) -> Result<OtsuSplit> {
    let (hist, min, width) = histogram(values, n_bins)?;
    let split_bin = otsu_from_histogram(&hist)
        .ok_or_else(|| Error::Degenerate("no split separates the intensities".into()))?;
    Ok(OtsuSplit {
        threshold: min + split_bin as f64 * width,
        split_bin,
        min,
        width,
        n_bins,
    })
}

/// Otsu threshold value (lower edge of the first upper-class bin).
pub fn otsu_threshold(values: &[f64], n_bins: usize) -> Result<f64> {
    otsu(values, n_bins).map(|s| s.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PapillaryConfig {
    pub lvbp_to: Label,
    pub rvbp_to: Label,
    pub n_bins: usize,
}

impl Default for PapillaryConfig {
    fn default() -> Self {
        PapillaryConfig {
            lvbp_to: Label::Myo,
            rvbp_to: Label::Background,
            n_bins: 256,
        }
    }
}

impl PapillaryConfig {
    fn target_for(&self, label: Label) -> Label {
        match label {
            Label::Lvbp => self.lvbp_to,
            Label::Rvbp => self.rvbp_to,
            other => other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PapillaryOutcome {
    pub frame: SegmentationFrame,
    /// (label, threshold, reassigned voxel count) per processed target.
    pub thresholds: Vec<(Label, f64, usize)>,
    pub warnings: Vec<String>,
}

/// Reassigns dark voxels inside each target blood pool (papillary muscle in
/// bright-blood cine) according to `config`.
pub fn exclude_papillary(
    seg: &SegmentationFrame,
    image: Option<&ScalarGrid>,
    targets: &[Label],
    config: &PapillaryConfig,
) -> Result<PapillaryOutcome> {
    let image = image.ok_or_else(|| {
        Error::Precondition("papillary exclusion needs an image frame".into())
    })?;
    if image.dims() != seg.grid().dims() {
        return Err(Error::Precondition(
            "image and segmentation shapes differ".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("no target labels for papillary exclusion".into()));
    }
    if let Some(bad) = targets.iter().find(|l| !matches!(l, Label::Lvbp | Label::Rvbp)) {
        return Err(Error::InvalidInput(format!("{bad} is not a blood-pool label")));
    }

    let labels = seg.grid().as_slice();
    let intensities = image.as_slice();
    let mut out = seg.grid().clone();
    let mut thresholds = Vec::new();
    let mut warnings = Vec::new();
    for &target in targets {
        let inside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == target).collect();
        let values: Vec<f64> = inside.iter().map(|&i| intensities[i]).collect();
        let split = match otsu(&values, config.n_bins) {
            Ok(s) => s,
            Err(Error::Degenerate(msg)) => {
                warnings.push(format!(
                    "frame {}: {target} left unchanged ({msg})",
                    seg.frame_index
                ));
                continue;
            }
            Err(e) => return Err(e),
        };
        let to = config.target_for(target);
        let cells = out.as_mut_slice();
        let mut moved = 0;
        for &i in &inside {
            if split.is_below(intensities[i]) {
                cells[i] = to;
                moved += 1;
            }
        }
        thresholds.push((target, split.threshold, moved));
    }
    Ok(PapillaryOutcome {
        frame: seg.with_grid(out)?,
        thresholds,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Grid3};

    #[test]
    fn two_clusters_split_between() {
        let mut v = vec![10.0; 5];
        v.extend([200.0; 5]);
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(10.0 < t && t <= 200.0, "{t}");
    }

    #[test]
    fn two_values() {
        let t = otsu_threshold(&[0.0, 1.0], 256).unwrap();
        assert!(0.0 < t && t <= 1.0);
    }

    #[test]
    fn identical_values_are_degenerate() {
        assert!(matches!(otsu_threshold(&[3.0; 8], 256), Err(Error::Degenerate(_))));
        assert!(otsu_threshold(&[], 256).is_err());
    }

    #[test]
    fn ties_take_lowest_split() {
        // bins 0 and 3 occupied: splits 1..=3 are all equivalent
        assert_eq!(otsu_from_histogram(&[4, 0, 0, 4]), Some(1));
    }

    #[test]
    fn papillary_bimodal_reassignment() {
        let dims = [1, 2, 4];
        let geom = Geometry::new(dims, [1.0; 3]).unwrap();
        let seg_cells = vec![
            Label::Lvbp, Label::Lvbp, Label::Lvbp, Label::Lvbp,
            Label::Rvbp, Label::Rvbp, Label::Myo, Label::Background,
        ];
        let img_cells = vec![200.0, 20.0, 200.0, 20.0, 180.0, 30.0, 20.0, 0.0];
        let seg = SegmentationFrame::new(Grid3::from_vec(dims, seg_cells).unwrap(), geom, 0).unwrap();
        let img = Grid3::from_vec(dims, img_cells).unwrap();
        let out = exclude_papillary(
            &seg,
            Some(&img),
            &[Label::Lvbp, Label::Rvbp],
            &PapillaryConfig::default(),
        )
        .unwrap();
        assert_eq!(
            out.frame.grid().as_slice(),
            &[
                Label::Lvbp, Label::Myo, Label::Lvbp, Label::Myo,
                Label::Rvbp, Label::Background, Label::Myo, Label::Background,
            ]
        );
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn uniform_mask_unchanged_with_warning() {
        let dims = [1, 1, 3];
        let geom = Geometry::new(dims, [1.0; 3]).unwrap();
        let seg = SegmentationFrame::new(Grid3::filled(dims, Label::Lvbp), geom, 4).unwrap();
        let img = Grid3::filled(dims, 90.0);
        let out = exclude_papillary(&seg, Some(&img), &[Label::Lvbp], &PapillaryConfig::default()).unwrap();
        assert_eq!(out.frame, seg);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dims = [1, 1, 1];
        let geom = Geometry::new(dims, [1.0; 3]).unwrap();
        let seg = SegmentationFrame::new(Grid3::filled(dims, Label::Lvbp), geom, 0).unwrap();
        assert!(exclude_papillary(&seg, None, &[Label::Lvbp], &PapillaryConfig::default()).is_err());
    }
}
