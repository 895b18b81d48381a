//! 26-connected component labelling on voxel masks.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::volume::{Label, SegmentationFrame};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub voxel_count: usize,
    /// Lexicographically smallest `[slice, row, col]` in the component.
    pub representative: [usize; 3],
    #[serde(skip)]
    pub voxels: Vec<usize>,
}

/// Components of `mask` (slice-major, dims `[slices, rows, cols]`), sorted
/// by descending size then by representative coordinate.
pub fn mask_components(dims: [usize; 3], mask: &[bool]) -> Vec<Component> {
    let [ns, nr, nc] = dims;
    assert_eq!(mask.len(), ns * nr * nc, "mask length does not match dims");
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(idx) = stack.pop() {
            voxels.push(idx);
            let c = idx % nc;
            let r = (idx / nc) % nr;
            let s = idx / (nc * nr);
            for ds in -1isize..=1 {
                let ss = s as isize + ds;
                if ss < 0 || ss >= ns as isize {
                    continue;
                }
                for dr in -1isize..=1 {
                    let rr = r as isize + dr;
                    if rr < 0 || rr >= nr as isize {
                        continue;
                    }
                    for dc in -1isize..=1 {
                        let cc = c as isize + dc;
                        if cc < 0 || cc >= nc as isize {
                            continue;
                        }
                        let n = (ss as usize * nr + rr as usize) * nc + cc as usize;
                        if mask[n] && !visited[n] {
                            visited[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        // scan order is slice-major, so the seed is the smallest coordinate
        components.push(Component {
            voxel_count: voxels.len(),
            representative: [start / (nc * nr), (start / nc) % nr, start % nc],
            voxels,
        });
    }
    components.sort_by(|a, b| {
        b.voxel_count
            .cmp(&a.voxel_count)
            .then(a.representative.cmp(&b.representative))
    });
    components
}

/// Components of one label; an absent label yields an empty list.
pub fn connected_components(frame: &SegmentationFrame, label: Label) -> Vec<Component> {
    let mask: Vec<bool> = frame.grid().as_slice().iter().map(|&l| l == label).collect();
    mask_components(frame.grid().dims(), &mask)
}

/// Components of the union of all foreground labels.
pub fn foreground_components(frame: &SegmentationFrame) -> Vec<Component> {
    let mask: Vec<bool> = frame.grid().as_slice().iter().map(|l| l.is_foreground()).collect();
    mask_components(frame.grid().dims(), &mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentAnalysis {
    pub per_label: BTreeMap<Label, Vec<Component>>,
    pub label_counts: BTreeMap<Label, usize>,
    pub total_segmented: usize,
}

pub fn analyze_components(frame: &SegmentationFrame) -> ComponentAnalysis {
    let counts = frame.label_counts();
    let per_label = Label::FOREGROUND
        .iter()
        .map(|&l| (l, connected_components(frame, l)))
        .collect();
    let label_counts = Label::FOREGROUND.iter().map(|&l| (l, counts[l as usize])).collect();
    ComponentAnalysis {
        per_label,
        label_counts,
        total_segmented: counts[1..].iter().sum(),
    }
}
