//! Training-time numerics: the missing-label-masked Dice + cross-entropy
//! loss with its analytic gradient, deep-supervision weights, the poly
//! learning-rate schedule and the foreground-biased patch sampler.
//!
//! Channel `c` of a prediction corresponds to canonical label code `c`.
//! Foreground channels whose label is not declared present in the ground
//! truth are dropped and the softmax is renormalised over the channels that
//! remain, so a missing label contributes nothing to the loss or gradient.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid3, Label};

/// Class logits, channel-major: `logits[c * n_voxels + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPatch {
    n_classes: usize,
    spatial: [usize; 3],
    logits: Vec<f64>,
}

impl PredictionPatch {
    pub fn new(n_classes: usize, spatial: [usize; 3], logits: Vec<f64>) -> Result<Self> {
        let n = spatial.iter().product::<usize>();
        if n_classes < 2 || n_classes > Label::ALL.len() {
            return Err(Error::InvalidInput(format!(
                "expected 2..=4 classes, got {n_classes}"
            )));
        }
        if logits.len() != n_classes * n {
            return Err(Error::InvalidInput("logit count does not match shape".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(PredictionPatch {
            n_classes,
            spatial,
            logits,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    pub fn n_voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }
}

/// Ground-truth labels plus the foreground labels annotated in this frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPatch {
    labels: Grid3<Label>,
    present: BTreeSet<Label>,
}

impl TargetPatch {
    /// `present_codes` lists canonical label codes declared present;
    /// background (0) is accepted and ignored.
    pub fn new(labels: Grid3<Label>, present_codes: impl IntoIterator<Item = i64>) -> Result<Self> {
        let mut present = BTreeSet::new();
        for code in present_codes {
            let label = u8::try_from(code)
                .ok()
                .and_then(Label::from_code)
                .ok_or_else(|| Error::InvalidInput(format!("non-canonical label code {code}")))?;
            if label.is_foreground() {
                present.insert(label);
            }
        }
        if let Some(l) = labels
            .as_slice()
            .iter()
            .find(|l| l.is_foreground() && !present.contains(l))
        {
            return Err(Error::InvalidInput(format!(
                "{l} occurs in the target but is not declared present"
            )));
        }
        Ok(TargetPatch { labels, present })
    }

    /// Every foreground label occurring in the grid is declared present.
    pub fn fully_labelled(labels: Grid3<Label>) -> Self {
        let present = labels.as_slice().iter().copied().filter(|l| l.is_foreground()).collect();
        TargetPatch { labels, present }
    }

    pub fn labels(&self) -> &Grid3<Label> {
        &self.labels
    }

    pub fn present(&self) -> &BTreeSet<Label> {
        &self.present
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Added to the Dice denominator only.
    pub smoothing: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 1e-5,
            ce_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub cross_entropy: f64,
    pub dice: f64,
    /// dLoss/dlogit, same layout as the prediction.
    pub gradient: Vec<f64>,
    /// Channels kept after masking, in ascending order.
    pub retained: Vec<usize>,
}

fn check_shapes(pred: &PredictionPatch, target: &TargetPatch) -> Result<()> {
    if pred.spatial != target.labels.dims() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.spatial,
            target.labels.dims()
        )));
    }
    if let Some(l) = target
        .labels
        .as_slice()
        .iter()
        .find(|l| l.code() as usize >= pred.n_classes)
    {
        return Err(Error::InvalidInput(format!(
            "target label {l} has no prediction channel"
        )));
    }
    Ok(())
}

/// Per-voxel softmax over `channels`, written channel-major into a dense
/// `n_classes * n` buffer (dropped channels stay 0).
fn softmax_over(pred: &PredictionPatch, channels: &[usize]) -> Vec<f64> {
    let n = pred.n_voxels();
    let mut probs = vec![0.0; pred.n_classes * n];
    for v in 0..n {
        let max = channels
            .iter()
            .map(|&c| pred.logits[c * n + v])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &c in channels {
            let e = (pred.logits[c * n + v] - max).exp();
            probs[c * n + v] = e;
            sum += e;
        }
        for &c in channels {
            probs[c * n + v] /= sum;
        }
    }
    probs
}

/// Masked combined loss (mean cross-entropy + mean soft Dice loss over the
/// retained foreground channels) and its gradient with respect to the logits.
pub fn masked_loss(pred: &PredictionPatch, target: &TargetPatch, config: &LossConfig) -> Result<LossOutput> {
    check_shapes(pred, target)?;
    let n = pred.n_voxels();
    let retained: Vec<usize> = (0..pred.n_classes)
        .filter(|&c| c == 0 || Label::from_code(c as u8).is_some_and(|l| target.present.contains(&l)))
        .collect();
    let foreground: Vec<usize> = retained.iter().copied().filter(|&c| c != 0).collect();
    if foreground.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            cross_entropy: 0.0,
            dice: 0.0,
            gradient: vec![0.0; pred.logits.len()],
            retained,
        });
    }

    let probs = softmax_over(pred, &retained);
    let labels = target.labels.as_slice();
    let nf = n as f64;

    let mut ce = 0.0;
    for (v, l) in labels.iter().enumerate() {
        ce -= probs[l.code() as usize * n + v].ln();
    }
    ce /= nf;

    // dLoss/dp for the Dice term; CE is handled in closed form below
    let mut dp = vec![0.0; pred.logits.len()];
    let mut dice_loss = 0.0;
    let k = foreground.len() as f64;
    for &c in &foreground {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for v in 0..n {
            let p = probs[c * n + v];
            let g = (labels[v].code() as usize == c) as u8 as f64;
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let denom = psum + gsum + config.smoothing;
        dice_loss += 1.0 - 2.0 * inter / denom;
        for v in 0..n {
            let g = (labels[v].code() as usize == c) as u8 as f64;
            dp[c * n + v] = -config.dice_weight / k * (2.0 * g / denom - 2.0 * inter / (denom * denom));
        }
    }
    dice_loss /= k;

    let mut gradient = vec![0.0; pred.logits.len()];
    for v in 0..n {
        let y = labels[v].code() as usize;
        let weighted: f64 = retained.iter().map(|&c| probs[c * n + v] * dp[c * n + v]).sum();
        for &c in &retained {
            let p = probs[c * n + v];
            let ce_grad = (p - (c == y) as u8 as f64) / nf;
            gradient[c * n + v] = config.ce_weight * ce_grad + p * (dp[c * n + v] - weighted);
        }
    }

    Ok(LossOutput {
        loss: config.ce_weight * ce + config.dice_weight * dice_loss,
        cross_entropy: ce,
        dice: dice_loss,
        gradient,
        retained,
    })
}

/// The unmasked combined loss over every channel, as used when all labels
/// are annotated. Value only.
pub fn unmasked_loss(pred: &PredictionPatch, labels: &Grid3<Label>, config: &LossConfig) -> Result<f64> {
    let target = TargetPatch {
        labels: labels.clone(),
        present: BTreeSet::new(),
    };
    check_shapes(pred, &target)?;
    let n = pred.n_voxels();
    let mut ce = 0.0;
    let mut inter = vec![0.0; pred.n_classes];
    let mut psum = vec![0.0; pred.n_classes];
    let mut gsum = vec![0.0; pred.n_classes];
    for v in 0..n {
        let z: Vec<f64> = (0..pred.n_classes).map(|c| pred.logits[c * n + v]).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        let y = labels.as_slice()[v].code() as usize;
        ce += log_sum - z[y];
        for c in 1..pred.n_classes {
            let p = (z[c] - log_sum).exp();
            let g = (y == c) as u8 as f64;
            inter[c] += p * g;
            psum[c] += p;
            gsum[c] += g;
        }
    }
    let dice: f64 = (1..pred.n_classes)
        .map(|c| 1.0 - 2.0 * inter[c] / (psum[c] + gsum[c] + config.smoothing))
        .sum::<f64>()
        / (pred.n_classes - 1) as f64;
    Ok(config.ce_weight * ce / n as f64 + config.dice_weight * dice)
}

/// Loss weights per decoder resolution: halved at each downsampling and
/// normalised to sum to one.
pub fn deep_supervision_weights(n_levels: usize) -> Result<Vec<f64>> {
    if n_levels == 0 {
        return Err(Error::InvalidInput("at least one supervision level is required".into()));
    }
    let raw: Vec<f64> = (0..n_levels).map(|d| 0.5f64.powi(d as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Weighted sum of per-level losses.
pub fn deep_supervision_loss(level_losses: &[f64]) -> Result<f64> {
    let w = deep_supervision_weights(level_losses.len())?;
    Ok(w.iter().zip(level_losses).map(|(w, l)| w * l).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub initial_lr: f64,
    pub total_epochs: usize,
    pub poly_exponent: f64,
    /// Recorded for completeness; no optimiser runs here.
    pub nesterov_momentum: f64,
    pub random_patch_fraction: f64,
    pub foreground_patch_fraction: f64,
    pub dice_smoothing: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            initial_lr: 0.01,
            total_epochs: 1000,
            poly_exponent: 0.9,
            nesterov_momentum: 0.99,
            random_patch_fraction: 0.667,
            foreground_patch_fraction: 0.333,
            dice_smoothing: 1e-5,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if (self.random_patch_fraction + self.foreground_patch_fraction - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(
                "random and foreground patch fractions must sum to 1".into(),
            ));
        }
        if self.total_epochs == 0 {
            return Err(Error::InvalidInput("total_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Number of foreground-guaranteed patches among `n`.
    pub fn foreground_quota(&self, n: usize) -> usize {
        // tolerance keeps exact products such as 0.333 * 1000 from rounding up
        let q = (self.foreground_patch_fraction * n as f64 - 1e-9).ceil();
        (q.max(0.0) as usize).min(n)
    }
}

/// `initial_lr * (1 - epoch / total_epochs) ^ poly_exponent`.
pub fn poly_lr(epoch: usize, schedule: &TrainingSchedule) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside [0, {}]",
            schedule.total_epochs
        )));
    }
    let progress = epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.initial_lr * (1.0 - progress).powf(schedule.poly_exponent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub origins: Vec<[usize; 3]>,
    /// Whether each patch was drawn around a foreground voxel.
    pub foreground_guaranteed: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Draws `n_patches` patch origins: the last `foreground_quota(n)` are
/// centred on a uniformly chosen foreground voxel (clamped to the volume),
/// the rest are uniform over valid origins.
pub fn sample_patches(
    labels: &Grid3<Label>,
    n_patches: usize,
    patch: [usize; 3],
    schedule: &TrainingSchedule,
    seed: u64,
) -> Result<PatchSample> {
    let dims = labels.dims();
    if n_patches == 0 {
        return Err(Error::InvalidInput("n_patches must be at least 1".into()));
    }
    if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
        return Err(Error::InvalidInput(format!(
            "patch {patch:?} does not fit in volume {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let foreground: Vec<usize> = labels
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_foreground())
        .map(|(i, _)| i)
        .collect();
    let mut warnings = Vec::new();
    let quota = if foreground.is_empty() {
        warnings.push("no foreground voxels; all patches drawn at random".to_string());
        0
    } else {
        schedule.foreground_quota(n_patches)
    };

    let mut origins = Vec::with_capacity(n_patches);
    let mut guaranteed = Vec::with_capacity(n_patches);
    for i in 0..n_patches {
        if i >= n_patches - quota {
            let centre = labels.coords(foreground[rng.random_range(0..foreground.len())]);
            let origin = std::array::from_fn(|a| {
                centre[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a])
            });
            origins.push(origin);
            guaranteed.push(true);
        } else {
            origins.push(std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch[a])));
            guaranteed.push(false);
        }
    }
    Ok(PatchSample {
        origins,
        foreground_guaranteed: guaranteed,
        warnings,
    })
}

/// Whether the patch at `origin` holds any foreground voxel.
pub fn patch_has_foreground(labels: &Grid3<Label>, origin: [usize; 3], patch: [usize; 3]) -> bool {
    (origin[0]..origin[0] + patch[0]).any(|s| {
        (origin[1]..origin[1] + patch[1])
            .any(|r| (origin[2]..origin[2] + patch[2]).any(|c| labels.get(s, r, c).is_foreground()))
    })
}

/// Finite-difference check of [`masked_loss`]'s gradient.
pub mod gradcheck {
    use super::*;
    use rand_distr::StandardNormal;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct GradCheck {
        pub seed: u64,
        pub max_relative_error: f64,
        pub coordinates: usize,
        pub loss: f64,
    }

    /// Relative error with a floor on the scale so exact zeros compare as 0.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        (analytic - numeric).abs() / scale
    }

    /// Random 4-class patch with a random non-empty set of present labels.
    pub fn random_case(seed: u64, spatial: [usize; 3]) -> (PredictionPatch, TargetPatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = spatial.iter().product();
        let logits: Vec<f64> = (0..4 * n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let present: Vec<Label> = loop {
            let p: Vec<Label> = Label::FOREGROUND
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.7))
                .collect();
            if !p.is_empty() {
                break p;
            }
        };
        let mut pool = vec![Label::Background];
        pool.extend(&present);
        let cells = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let labels = Grid3::from_vec(spatial, cells).expect("sized above");
        let pred = PredictionPatch::new(4, spatial, logits).expect("finite logits");
        let target = TargetPatch::new(labels, present.iter().map(|l| l.code() as i64)).expect("consistent");
        (pred, target)
    }

    /// `(L(x + h e_i) - L(x - h e_i)) / 2h` for logit `i`.
    ///
    /// Subtracting two rounded loss values leaves an error of about one ulp
    /// of the loss, far above `h * g` for small gradient components. Only
    /// voxel `v` of logit `i` moves, so the difference is assembled from the
    /// per-term changes of that voxel instead.
    pub fn central_difference(
        pred: &PredictionPatch,
        target: &TargetPatch,
        config: &LossConfig,
        i: usize,
        h: f64,
    ) -> Result<f64> {
        check_shapes(pred, target)?;
        if i >= pred.logits.len() {
            return Err(Error::InvalidInput(format!("logit index {i} out of range")));
        }
        let n = pred.n_voxels();
        let (c, v) = (i / n, i % n);
        let retained: Vec<usize> = (0..pred.n_classes)
            .filter(|&k| k == 0 || Label::from_code(k as u8).is_some_and(|l| target.present.contains(&l)))
            .collect();
        let foreground: Vec<usize> = retained.iter().copied().filter(|&k| k != 0).collect();
        if foreground.is_empty() || !retained.contains(&c) {
            return Ok(0.0);
        }
        let labels = target.labels.as_slice();
        let y = labels[v].code() as usize;

        // voxel v: a_k = exp(z_k - max), S0 = sum over k != c, S± with z_c ± h
        let zmax = retained
            .iter()
            .map(|&k| pred.logits[k * n + v])
            .fold(f64::NEG_INFINITY, f64::max);
        let a = |k: usize| (pred.logits[k * n + v] - zmax).exp();
        let ac = a(c);
        let s0: f64 = retained.iter().filter(|&&k| k != c).map(|&k| a(k)).sum();
        let two_sinh = 2.0 * h.sinh();
        let s_up = s0 + ac * h.exp();
        let s_dn = s0 + ac * (-h).exp();

        // CE at v is ln S - (z_y - max)
        let mut d_ce = (ac * two_sinh / s_dn).ln_1p();
        if y == c {
            d_ce -= 2.0 * h;
        }
        d_ce /= n as f64;

        // Dice per channel: with I0, D0 the sums without voxel v and
        // d = p_k(v, +h) - p_k(v, -h), the change is 2 d (I0 - g D0) / (den+ den-)
        let probs = softmax_over(pred, &retained);
        let mut d_dice = 0.0;
        for &k in &foreground {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for u in (0..n).filter(|&u| u != v) {
                let p = probs[k * n + u];
                let g = (labels[u].code() as usize == k) as u8 as f64;
                inter += p * g;
                psum += p;
                gsum += g;
            }
            let g = (y == k) as u8 as f64;
            let d0 = psum + gsum + g + config.smoothing;
            let d = if k == c {
                ac * s0 * two_sinh / (s_up * s_dn)
            } else {
                -a(k) * ac * two_sinh / (s_up * s_dn)
            };
            let p_up = if k == c { ac * h.exp() / s_up } else { a(k) / s_up };
            let p_dn = if k == c { ac * (-h).exp() / s_dn } else { a(k) / s_dn };
            d_dice += 2.0 * d * (inter - g * d0) / ((d0 + p_up) * (d0 + p_dn));
        }
        d_dice /= foreground.len() as f64;

        Ok((config.ce_weight * d_ce + config.dice_weight * d_dice) / (2.0 * h))
    }

    /// Compares the analytic gradient with central differences (step `h`)
    /// on `n_coords` logits drawn from the patch.
    pub fn check(
        pred: &PredictionPatch,
        target: &TargetPatch,
        config: &LossConfig,
        h: f64,
        n_coords: usize,
        seed: u64,
    ) -> Result<GradCheck> {
        let out = masked_loss(pred, target, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let total = pred.logits.len();
        let mut max_err: f64 = 0.0;
        for _ in 0..n_coords {
            let i = rng.random_range(0..total);
            let numeric = central_difference(pred, target, config, i, h)?;
            max_err = max_err.max(relative_error(out.gradient[i], numeric));
        }
        Ok(GradCheck {
            seed,
            max_relative_error: max_err,
            coordinates: n_coords,
            loss: out.loss,
        })
    }

    /// The standard suite: `n_seeds` random 4-class 8x8x8 patches, 200
    /// coordinates each, step 1e-5.
    pub fn suite(n_seeds: u64, config: &LossConfig) -> Result<Vec<GradCheck>> {
        (0..n_seeds)
            .map(|seed| {
                let (pred, target) = random_case(seed, [8, 8, 8]);
                check(&pred, &target, config, 1e-5, 200, seed)
            })
            .collect()
    }
}
