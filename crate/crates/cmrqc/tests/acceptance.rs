//! Acceptance suite: one PASS/FAIL line per primary criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use cmrqc::pipeline::Manifest;
use cmrqc::queue::FlagQueue;
use cmrqc::validation::ValidationReport;
use cmrqc_core::biomarkers::{compute_biomarkers, identify_ed_es, label_volume, BiomarkerConfig, BiomarkerSet};
use cmrqc_core::case::CineCase;
use cmrqc_core::components::connected_components;
use cmrqc_core::loss::gradcheck::{self, random_case};
use cmrqc_core::loss::*;
use cmrqc_core::otsu::{exclude_papillary, otsu_from_histogram, PapillaryConfig};
use cmrqc_core::phantom::add_island;
use cmrqc_core::qc::{
    label_slice_coverage, outlier_fraction, repair_for_analysis, repair_small_outliers, run_post_analysis_qc, run_qa_gt,
    CriterionCode, OutlierScope, QcConfig, QcReport,
};
use cmrqc_core::stats::*;
use cmrqc_core::{Geometry, Grid3, Label, SegmentationFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fixtures;
use common::oracles;

fn dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn unit_geometry(dims: [usize; 3]) -> Geometry {
    Geometry::new(dims, [1.0, 1.0, 1.0]).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// --- phantom volumetry ----------------------------------------------------

fn identities(b: &BiomarkerSet) -> Result<()> {
    ensure!(b.lvsv_ml == b.lvedv_ml - b.lvesv_ml, "{}: LVSV", b.case_id);
    ensure!(b.rvsv_ml == b.rvedv_ml - b.rvesv_ml, "{}: RVSV", b.case_id);
    ensure!(b.lvef_pct == (b.lvedv_ml > 0.0).then(|| 100.0 * b.lvsv_ml / b.lvedv_ml), "{}: LVEF", b.case_id);
    ensure!(b.rvef_pct == (b.rvedv_ml > 0.0).then(|| 100.0 * b.rvsv_ml / b.rvedv_ml), "{}: RVEF", b.case_id);
    Ok(())
}

fn phantom_volumetry() -> Result<String> {
    let (a, b, c) = (30.0f64, 30.0f64, 50.0f64);
    let dims = [103, 63, 63];
    let mut grid = Grid3::filled(dims, Label::Background);
    for s in 0..dims[0] {
        for r in 0..dims[1] {
            for col in 0..dims[2] {
                let (z, y, x) = (s as f64 - 51.0, r as f64 - 31.0, col as f64 - 31.0);
                if (x / a).powi(2) + (y / b).powi(2) + (z / c).powi(2) <= 1.0 {
                    grid.set(s, r, col, Label::Lvbp);
                }
            }
        }
    }
    let frame = SegmentationFrame::new(grid, unit_geometry(dims), 0)?;
    let v = label_volume(&frame, Label::Lvbp);
    let rel = (v - 188.50).abs() / 188.50;
    ensure!(rel < 0.02, "ellipsoid {v:.3} mL is {:.2}% from 188.50", rel * 100.0);

    let mut sets = 0;
    let config = BiomarkerConfig::default();
    for f in fixtures::all() {
        let (ed, es) = identify_ed_es(&f.case)?;
        identities(&compute_biomarkers(&f.case, ed, es, &config)?)?;
        sets += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let counts: Vec<usize> = (0..6).map(|_| rng.random_range(0..3000)).collect();
        let frame = |idx: usize, lv: usize, myo: usize, rv: usize| {
            let mut cells = vec![Label::Lvbp; lv];
            cells.extend(vec![Label::Myo; myo]);
            cells.extend(vec![Label::Rvbp; rv]);
            cells.resize(10_000, Label::Background);
            let dims = [1, 100, 100];
            let g = Geometry::new(dims, [1.0, 1.0, rng_spacing(i)]).unwrap();
            SegmentationFrame::new(Grid3::from_vec(dims, cells).unwrap(), g, idx).unwrap()
        };
        let case = cmrqc_core::case::assemble_case(
            "r",
            [frame(0, counts[0], counts[1], counts[2]), frame(1, counts[3], counts[4], counts[5])],
            None,
            cmrqc_core::case::CaseMetadata::new("r"),
        )?;
        identities(&compute_biomarkers(&case, 0, 1, &config)?)?;
        sets += 1;
    }
    Ok(format!("ellipsoid {v:.2} mL ({:.2}% off), identities exact on {sets} sets", rel * 100.0))
}

fn rng_spacing(i: usize) -> f64 {
    [1.0, 1.3, 7.5, 10.0][i % 4]
}

// --- QC rule fidelity -----------------------------------------------------

fn codes(report: &QcReport) -> BTreeSet<CriterionCode> {
    report.triggered_codes().into_iter().collect()
}

fn post(case: &CineCase) -> Result<QcReport> {
    let config = QcConfig::default();
    let repaired = repair_for_analysis(case, &config);
    let (ed, es) = identify_ed_es(&repaired)?;
    let b = compute_biomarkers(&repaired, ed, es, &BiomarkerConfig::default())?;
    Ok(run_post_analysis_qc(case, &b, &config))
}

fn counted_frame(idx: usize, counts: &[(Label, usize)]) -> SegmentationFrame {
    let dims = [1, 100, 100];
    let mut cells = Vec::new();
    for &(l, n) in counts {
        cells.extend(std::iter::repeat_n(l, n));
    }
    cells.resize(10_000, Label::Background);
    SegmentationFrame::new(Grid3::from_vec(dims, cells).unwrap(), unit_geometry(dims), idx).unwrap()
}

fn two_frames(a: SegmentationFrame, mut b: SegmentationFrame) -> CineCase {
    b.frame_index = 1;
    cmrqc_core::case::assemble_case("b", [a, b], None, cmrqc_core::case::CaseMetadata::new("b")).unwrap()
}

fn measured(case: &CineCase, code: CriterionCode, target: Option<&str>) -> Result<(f64, bool)> {
    let r = run_qa_gt(case, None, (0, 1), &QcConfig::default())?.report;
    let c = r
        .criteria
        .iter()
        .find(|c| c.code == code && (target.is_none() || c.target.as_deref() == target))
        .context("criterion missing from report")?;
    Ok((c.measured, c.triggered))
}

fn island_frame(main: usize, island: usize) -> SegmentationFrame {
    let dims = [1, 40, 100];
    let mut grid = Grid3::filled(dims, Label::Background);
    grid.as_mut_slice()[..main].fill(Label::Lvbp);
    grid.as_mut_slice()[3000..3000 + island].fill(Label::Lvbp);
    SegmentationFrame::new(grid, unit_geometry(dims), 0).unwrap()
}

fn coverage_frame(label_slices: &[usize]) -> SegmentationFrame {
    let dims = [10, 4, 4];
    let mut grid = Grid3::filled(dims, Label::Background);
    for s in 0..10 {
        grid.set(s, 0, 0, Label::Lvbp);
    }
    for &s in label_slices {
        grid.set(s, 3, 3, Label::Myo);
    }
    SegmentationFrame::new(grid, unit_geometry(dims), 0).unwrap()
}

fn qc_fidelity() -> Result<String> {
    let all = fixtures::all();
    let mut covered = BTreeSet::new();
    for f in &all {
        let phases = identify_ed_es(&f.case)?;
        let gt = run_qa_gt(&f.case, f.image_geometry.as_ref(), phases, &QcConfig::default())?.report;
        ensure!(codes(&gt) == f.qa_gt, "{} screening: {:?}", f.name, codes(&gt));
        ensure!(gt.flagged == !f.qa_gt.is_empty(), "{} screening flag", f.name);
        let pa = post(&f.case)?;
        ensure!(codes(&pa) == f.post, "{} post-analysis: {:?}", f.name, codes(&pa));
        ensure!(pa.flagged == !f.post.is_empty(), "{} post-analysis flag", f.name);
        covered.extend(f.qa_gt.iter().chain(&f.post).copied());
    }
    ensure!(all[0].qa_gt.is_empty() && all[0].post.is_empty(), "first fixture is the clean phantom");
    ensure!(covered.len() == 10, "fixtures cover {} codes", covered.len());

    // boundaries: exactly 25 %, 10 %, 30 % never trigger
    let sv = |lv: (usize, usize), rv: (usize, usize)| {
        two_frames(
            counted_frame(0, &[(Label::Lvbp, lv.0), (Label::Myo, 100), (Label::Rvbp, rv.0)]),
            counted_frame(1, &[(Label::Lvbp, lv.1), (Label::Myo, 100), (Label::Rvbp, rv.1)]),
        )
    };
    ensure!(measured(&sv((2000, 1000), (1750, 1000)), CriterionCode::SvDiffGt25, None)? == (25.0, false));
    let (m, t) = measured(&sv((2000, 1000), (1740, 1000)), CriterionCode::SvDiffGt25, None)?;
    ensure!(t && m > 25.0, "SV just above 25 %");
    ensure!(measured(&sv((2000, 1000), (1000, 1000)), CriterionCode::NonpositiveSv, Some("RV"))? == (0.0, true));
    ensure!(measured(&sv((2000, 1000), (1000, 1000)), CriterionCode::NonpositiveSv, Some("LV"))? == (1.0, false));

    let outlier = |main, island| {
        let f = island_frame(main, island);
        measured(&two_frames(f.clone(), f), CriterionCode::LabelOutlierGt10, Some("LVBP"))
    };
    ensure!(outlier(90, 10)? == (10.0, false), "outlier at 10 %");
    let (m, t) = outlier(900, 101)?;
    ensure!(t && m > 10.0, "outlier above 10 %");

    ensure!(label_slice_coverage(&coverage_frame(&[0, 1, 2]), Label::Myo)? == 0.3);
    let coverage = |slices: &[usize]| {
        let f = coverage_frame(slices);
        measured(&two_frames(f.clone(), f), CriterionCode::LabelCoverageLt30, Some("MYO"))
    };
    ensure!(coverage(&[0, 1, 2])? == (30.0, false), "coverage at 30 %");
    ensure!(coverage(&[0, 1])? == (20.0, true), "coverage below 30 %");
    Ok(format!("{} fixtures, {} codes, boundaries strict", all.len(), covered.len()))
}

// --- small-outlier repair -------------------------------------------------

fn phantom_with_island(percent: usize) -> Result<SegmentationFrame> {
    let ed = fixtures::ed_frame();
    let main = ed.count(Label::Lvbp);
    Ok(add_island(&ed, Label::Lvbp, 9, main * percent / (100 - percent))?)
}

fn label_indices(frame: &SegmentationFrame, label: Label) -> Vec<usize> {
    (0..frame.grid().len()).filter(|&i| frame.grid().as_slice()[i] == label).collect()
}

fn oracle_largest(frame: &SegmentationFrame, label: Label) -> Vec<usize> {
    let mask: Vec<bool> = frame.grid().as_slice().iter().map(|&l| l == label).collect();
    oracles::flood_fill(frame.grid().dims(), &mask).into_iter().next().unwrap_or_default()
}

fn random_frame(seed: u64, density: f64) -> SegmentationFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [8, 12, 12];
    let cells = (0..dims.iter().product::<usize>())
        .map(|_| {
            if rng.random_bool(density) {
                Label::FOREGROUND[rng.random_range(0..3)]
            } else {
                Label::Background
            }
        })
        .collect();
    SegmentationFrame::new(Grid3::from_vec(dims, cells).unwrap(), unit_geometry(dims), 0).unwrap()
}

fn outlier_repair() -> Result<String> {
    let five = phantom_with_island(5)?;
    let frac = outlier_fraction(&five, OutlierScope::Label(Label::Lvbp));
    ensure!((0.04..0.06).contains(&frac), "island fraction {frac}");
    let (fixed, repairs) = repair_small_outliers(&five, 0.10);
    ensure!(repairs.len() == 1, "repairs {repairs:?}");
    ensure!(label_indices(&fixed, Label::Lvbp) == oracle_largest(&five, Label::Lvbp), "kept set differs from flood fill");

    let twenty = phantom_with_island(20)?;
    let (fixed, repairs) = repair_small_outliers(&twenty, 0.10);
    ensure!(repairs.is_empty() && fixed == twenty, "20 % island was modified");
    let es = fixtures::es_frame();
    let es = add_island(&es, Label::Lvbp, 9, es.count(Label::Lvbp) / 4)?;
    let case = fixtures::case_of("island", twenty, es);
    let report = run_qa_gt(&case, None, identify_ed_es(&case)?, &QcConfig::default())?.report;
    ensure!(report.triggered_codes().contains(&CriterionCode::LabelOutlierGt10), "20 % island not flagged");

    for seed in 0..100 {
        let frame = random_frame(seed, [0.05, 0.15, 0.3, 0.5][seed as usize % 4]);
        let (once, _) = repair_small_outliers(&frame, 0.10);
        let (twice, second) = repair_small_outliers(&once, 0.10);
        ensure!(once == twice && second.is_empty(), "not idempotent at seed {seed}");
        for label in Label::FOREGROUND {
            if connected_components(&once, label).len() == 1 && connected_components(&frame, label).len() > 1 {
                ensure!(label_indices(&once, label) == oracle_largest(&frame, label), "seed {seed} {label}");
            }
        }
    }
    Ok(format!("5 % island removed ({:.1} %), 20 % kept and flagged, idempotent on 100 grids", frac * 100.0))
}

// --- masked loss ----------------------------------------------------------

fn masked_loss_checks() -> Result<String> {
    let config = LossConfig::default();
    for seed in 0..20 {
        let (pred, _) = random_case(seed, [8, 8, 8]);
        let target = TargetPatch::new(Grid3::filled([8, 8, 8], Label::Background), [])?;
        let out = masked_loss(&pred, &target, &config)?;
        ensure!(out.loss == 0.0, "seed {seed}: loss {}", out.loss);
        ensure!(out.gradient.iter().all(|&g| g == 0.0), "seed {seed}: nonzero gradient");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_identity: f64 = 0.0;
    for seed in 0..50 {
        let (pred, _) = random_case(seed, [4, 4, 4]);
        let cells: Vec<Label> = (0..64).map(|_| Label::ALL[rng.random_range(0..4)]).collect();
        let labels = Grid3::from_vec([4, 4, 4], cells)?;
        let masked = masked_loss(&pred, &TargetPatch::fully_labelled(labels.clone()), &config)?.loss;
        let plain = unmasked_loss(&pred, &labels, &config)?;
        worst_identity = worst_identity.max((masked - plain).abs());
    }
    ensure!(worst_identity < 1e-12, "all-present masking differs by {worst_identity:e}");

    let results = gradcheck::suite(100, &config)?;
    ensure!(results.len() >= 100, "{} patches checked", results.len());
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    ensure!(worst < 1e-4, "worst relative gradient error {worst:e}");
    Ok(format!("empty patch ignored, identity within {worst_identity:.1e}, gradcheck worst {worst:.2e} over {} patches", results.len()))
}

// --- schedule math --------------------------------------------------------

fn patch_has_fg(labels: &Grid3<Label>, origin: [usize; 3], patch: [usize; 3]) -> bool {
    (origin[0]..origin[0] + patch[0]).any(|s| {
        (origin[1]..origin[1] + patch[1])
            .any(|r| (origin[2]..origin[2] + patch[2]).any(|c| labels.get(s, r, c) != Label::Background))
    })
}

fn schedule_math() -> Result<String> {
    let s = TrainingSchedule::default();
    ensure!(poly_lr(0, &s)? == 0.01, "lr(0)");
    ensure!(poly_lr(1000, &s)? == 0.0, "lr(1000)");
    ensure!((poly_lr(500, &s)? - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12, "lr(500)");
    let w = deep_supervision_weights(3)?;
    let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
    ensure!(w.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "weights {w:?}");

    let mut labels = Grid3::filled([12, 40, 40], Label::Background);
    labels.set(6, 31, 9, Label::Myo);
    let patch = [4, 8, 8];
    for seed in 0..1000 {
        let sample = sample_patches(&labels, 3, patch, &s, seed)?;
        let quota = sample.foreground_guaranteed.iter().filter(|g| **g).count();
        ensure!(quota == 1, "seed {seed}: {quota} guaranteed patches of 3");
        for (o, g) in sample.origins.iter().zip(&sample.foreground_guaranteed) {
            ensure!(!*g || patch_has_fg(&labels, *o, patch), "seed {seed}: guaranteed patch without foreground");
        }
    }
    Ok("poly lr endpoints, weights [4/7, 2/7, 1/7], quota met on 1000 trials".into())
}

// --- Otsu -----------------------------------------------------------------

fn otsu_checks() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..1000 {
        let n_bins = rng.random_range(2..64);
        let sparsity = rng.random_range(0.0..0.8);
        let hist: Vec<u64> = (0..n_bins)
            .map(|_| {
                if rng.random_bool(sparsity) {
                    0
                } else if trial % 3 == 0 {
                    rng.random_range(0..4)
                } else {
                    rng.random_range(0..100_000)
                }
            })
            .collect();
        ensure!(otsu_from_histogram(&hist) == oracles::otsu_exhaustive(&hist), "histogram {hist:?}");
    }

    let dims = [2, 16, 16];
    let mut labels = Grid3::filled(dims, Label::Background);
    let mut image = Grid3::filled(dims, 15.0);
    for s in 0..2 {
        for r in 2..14 {
            for c in 2..14 {
                let dark = (5..8).contains(&r) && (5..8).contains(&c);
                labels.set(s, r, c, Label::Lvbp);
                let v: f64 = if dark { rng.random_range(40.0..90.0) } else { rng.random_range(180.0..230.0) };
                image.set(s, r, c, v.round());
            }
        }
    }
    let seg = SegmentationFrame::new(labels.clone(), Geometry::new(dims, [1.5, 1.5, 8.0])?, 0)?;
    let out = exclude_papillary(&seg, Some(&image), &[Label::Lvbp], &PapillaryConfig::default())?;
    let inside: Vec<usize> = label_indices(&seg, Label::Lvbp);
    let values: Vec<f64> = inside.iter().map(|&i| image.as_slice()[i]).collect();
    let lo = values.iter().cloned().fold(f64::MAX, f64::min);
    let hi = values.iter().cloned().fold(f64::MIN, f64::max);
    let w = (hi - lo) / 256.0;
    let bin = |v: f64| (((v - lo) / w).floor() as i64).clamp(0, 255) as usize;
    let mut hist = vec![0u64; 256];
    values.iter().for_each(|&v| hist[bin(v)] += 1);
    let k = oracles::otsu_exhaustive(&hist).context("bimodal pool has a split")?;
    let expected: Vec<usize> = inside.iter().copied().filter(|&i| bin(image.as_slice()[i]) < k).collect();
    let moved: Vec<usize> = (0..labels.len())
        .filter(|&i| out.frame.grid().as_slice()[i] != labels.as_slice()[i])
        .collect();
    ensure!(moved == expected, "reassigned {} voxels, oracle {}", moved.len(), expected.len());
    ensure!(out.frame.label_counts().iter().sum::<usize>() == labels.len(), "voxel count changed");
    ensure!(
        out.frame.count(Label::Lvbp) + out.frame.count(Label::Myo) == seg.count(Label::Lvbp) + seg.count(Label::Myo),
        "blood pool plus myocardium not conserved"
    );
    Ok(format!("1000 histograms match exhaustive search, {} papillary voxels reassigned", moved.len()))
}

// --- statistics oracles ---------------------------------------------------

fn statistics() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mw = 0;
    for n in 1..=7 {
        for m in 1..=7 {
            for _ in 0..4 {
                let mut pool: Vec<f64> = (0..40).map(|i| i as f64 * 0.5 - 7.0).collect();
                rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
                let (xs, ys) = (&pool[..n], &pool[n..n + m]);
                let r = mann_whitney_u(xs, ys)?;
                let (u, p) = oracles::mann_whitney_enumerated(xs, ys);
                ensure!(r.method == TestMethod::Exact && r.statistic == u && r.p_value == p, "{xs:?} vs {ys:?}");
                mw += 1;
            }
        }
    }
    ensure!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0])?.p_value == 2.0 / 6.0, "{{1,2}} vs {{3,4}}");

    let mut wx = 0;
    for n in 1..=10 {
        for trial in 0..20 {
            let diffs: Vec<f64> = (0..n)
                .map(|_| if trial % 2 == 0 { rng.random_range(-4i32..=6) as f64 } else { rng.random_range(-5.0..8.0) })
                .collect();
            let r = wilcoxon_signed_rank(&diffs)?;
            let (w, p) = oracles::wilcoxon_enumerated(&diffs);
            ensure!(r.statistic == w && r.p_value == p, "diffs {diffs:?}");
            wx += 1;
        }
    }
    ensure!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0])?.p_value == 0.25, "diffs {{1,2,3}}");

    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5 + seed as usize % 60;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(40.0..260.0);
                (m * 1.03 + rng.random_range(-10.0..10.0), m)
            })
            .collect();
        let s = PairedSeries::from_pairs(pairs.iter().copied())?;
        let auto: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let manual: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        ensure!(close(pearson(&s)?.r, oracles::pearson_r(&auto, &manual), 1e-12), "pearson seed {seed}");
        let ba = bland_altman(&s)?;
        let d: Vec<f64> = pairs.iter().map(|(a, m)| a - m).collect();
        let (bias, sd) = (oracles::mean(&d), oracles::sd(&d));
        ensure!(close(ba.bias, bias, 1e-12) && close(ba.sd, sd, 1e-12), "bland-altman seed {seed}");
        ensure!(close(ba.loa_low, bias - 1.96 * sd, 1e-12) && close(ba.loa_high, bias + 1.96 * sd, 1e-12));
        let (med, iqr) = median_iqr(&auto)?;
        ensure!(close(med, oracles::quantile(&auto, 0.5), 1e-12), "median seed {seed}");
        let q = oracles::quantile(&auto, 0.75) - oracles::quantile(&auto, 0.25);
        ensure!(close(iqr, q, 1e-12), "iqr seed {seed}");
        let a: Vec<bool> = (0..n * 4).map(|_| rng.random_bool(0.4)).collect();
        let b: Vec<bool> = (0..n * 4).map(|_| rng.random_bool(0.6)).collect();
        ensure!(close(dice(&a, &b)?, oracles::dice_sets(&a, &b), 1e-12), "dice seed {seed}");
    }

    let marks = [
        (0.0004, 20, Mark::One),
        (0.00004, 20, Mark::Two),
        (0.000004, 20, Mark::Three),
        (0.0005, 20, Mark::None),
        (0.0000009, 35, Mark::Three),
        (0.0002, 35, Mark::One),
        (0.0019, 5, Mark::One),
        (0.002, 5, Mark::None),
    ];
    for (p, m, mark) in marks {
        ensure!(bonferroni_mark(p, m)? == mark, "p={p} m={m}");
    }
    Ok(format!("{mw} Mann-Whitney and {wx} Wilcoxon enumerations, 200 formula series, Bonferroni marks"))
}

// --- end to end -----------------------------------------------------------

fn cmrqc(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_cmrqc")).args(args).output()?;
    if !out.status.success() {
        bail!("cmrqc {} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.to_string_lossy().into_owned(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn end_to_end() -> Result<String> {
    let data = dataset();
    let data = data.to_str().context("dataset path")?;
    let tmp = tempfile::tempdir()?;
    let mut snaps = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let analysis = out.join("analysis");
        let validation = out.join("validation");
        cmrqc(&["analyze", data, "--out", analysis.to_str().unwrap()])?;
        cmrqc(&["validate", "--auto", data, "--manual", data, "--out", validation.to_str().unwrap()])?;
        snaps.push(snapshot(&out)?);
    }
    let out = tmp.path().join("a");

    let manifest: Manifest = serde_json::from_slice(&fs::read(out.join("analysis/manifest.json"))?)?;
    ensure!(manifest.processed == 20 && manifest.flagged == 6, "processed {} flagged {}", manifest.processed, manifest.flagged);
    let index = cmrqc::synth::load_index(&dataset())?;
    let queue = FlagQueue::load(&out.join("analysis/flag_queue.json"))?;
    let expected: Vec<(String, Vec<CriterionCode>)> =
        index.flagged().map(|c| (c.case_id.clone(), c.expected_criteria.clone())).collect();
    let got: Vec<(String, Vec<CriterionCode>)> =
        queue.entries.iter().map(|e| (e.case_id.clone(), e.criteria.clone())).collect();
    ensure!(got == expected, "queue {got:?}\nexpected {expected:?}");

    let report: ValidationReport = serde_json::from_slice(&fs::read(out.join("validation/validation.json"))?)?;
    ensure!(report.cases.len() == 20 && report.failed.is_empty(), "{} cases compared", report.cases.len());
    for c in &report.cases {
        ensure!(c.dice.values().all(|d| *d == Some(100.0)), "{}: dice {:?}", c.case_id, c.dice);
        ensure!(c.absolute_errors.values().all(|e| *e == 0.0), "{}: errors {:?}", c.case_id, c.absolute_errors);
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    ensure!(a.keys().eq(b.keys()), "file sets differ between runs");
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    ensure!(differing.is_empty(), "files differ between runs: {differing:?}");
    Ok(format!("6 of 20 flagged as expected, self-validation Dice 100, {} files byte-identical", a.len()))
}

// --- runner ---------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Result<String>); 8] = [
        ("phantom volumetry", 5, phantom_volumetry),
        ("QC rule fidelity", 10, qc_fidelity),
        ("small-outlier repair", 60, outlier_repair),
        ("masked loss", 60, masked_loss_checks),
        ("schedule math", 60, schedule_math),
        ("Otsu", 60, otsu_checks),
        ("statistics oracles", 60, statistics),
        ("end-to-end", 60, end_to_end),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(anyhow::anyhow!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let elapsed = start.elapsed();
                if elapsed > Duration::from_secs(budget) {
                    bail!("{detail}; took {:.1} s, budget {budget} s", elapsed.as_secs_f64());
                }
                Ok(detail)
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1} s): {e:#}");
            }
        }
    }
    println!("{} of 8 primary criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
