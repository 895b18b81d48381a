//! Independent reference implementations. Deliberately naive: brute-force
//! enumeration, breadth-first flood fill and textbook formulas.

use std::collections::VecDeque;

use num_bigint::BigInt;

/// Component sizes (descending) of a boolean mask under 26-connectivity,
/// found by breadth-first flood fill, with each component's voxel set.
pub fn flood_fill(dims: [usize; 3], mask: &[bool]) -> Vec<Vec<usize>> {
    let [ns, nr, nc] = dims;
    let idx = |s: usize, r: usize, c: usize| (s * nr + r) * nc + c;
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for s in 0..ns {
        for r in 0..nr {
            for c in 0..nc {
                let start = idx(s, r, c);
                if !mask[start] || seen[start] {
                    continue;
                }
                seen[start] = true;
                let mut queue = VecDeque::from([(s, r, c)]);
                let mut members = Vec::new();
                while let Some((s, r, c)) = queue.pop_front() {
                    members.push(idx(s, r, c));
                    for ds in -1i64..=1 {
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let (s2, r2, c2) = (s as i64 + ds, r as i64 + dr, c as i64 + dc);
                                if s2 < 0 || r2 < 0 || c2 < 0 || s2 >= ns as i64 || r2 >= nr as i64 || c2 >= nc as i64 {
                                    continue;
                                }
                                let j = idx(s2 as usize, r2 as usize, c2 as usize);
                                if mask[j] && !seen[j] {
                                    seen[j] = true;
                                    queue.push_back((s2 as usize, r2 as usize, c2 as usize));
                                }
                            }
                        }
                    }
                }
                members.sort_unstable();
                comps.push(members);
            }
        }
    }
    // largest first; ties by smallest linear index, which is lexicographic
    // (slice, row, col) order
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Otsu split by exhaustive search, scoring each split with the textbook
/// between-class variance `w0 * w1 * (mu0 - mu1)^2` held as an exact
/// fraction in big integers. Returns the first maximiser.
pub fn otsu_exhaustive(hist: &[u64]) -> Option<usize> {
    let mut best: Option<(usize, BigInt, BigInt)> = None;
    for k in 1..hist.len() {
        let n0: BigInt = hist[..k].iter().map(|&h| BigInt::from(h)).sum();
        let n1: BigInt = hist[k..].iter().map(|&h| BigInt::from(h)).sum();
        if n0 == BigInt::from(0) || n1 == BigInt::from(0) {
            continue;
        }
        let s0: BigInt = hist[..k].iter().enumerate().map(|(i, &h)| BigInt::from(i) * h).sum();
        let s1: BigInt = hist[k..].iter().enumerate().map(|(i, &h)| BigInt::from(i + k) * h).sum();
        let total = &n0 + &n1;
        // w0 w1 (s0/n0 - s1/n1)^2 = (n0 n1 / N^2) (s0 n1 - s1 n0)^2 / (n0 n1)^2
        let diff = &s0 * &n1 - &s1 * &n0;
        let num = &diff * &diff;
        let den = &n0 * &n1 * &total * &total;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exact two-sided Mann-Whitney p-value for tie-free samples by listing
/// every assignment of the pooled ranks to the first sample.
pub fn mann_whitney_enumerated(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    // U = number of (x, y) pairs with x > y
    let u_obs = xs.iter().map(|x| ys.iter().filter(|y| x > y).count()).sum::<usize>();
    let mut le = 0u64;
    let mut ge = 0u64;
    let assignments = combinations(pooled.len(), n);
    for chosen in &assignments {
        // chosen = sorted positions of the first sample; U counts the
        // second-sample members below each of them
        let u: usize = chosen
            .iter()
            .map(|&p| (0..p).filter(|q| !chosen.contains(q)).count())
            .sum();
        if u <= u_obs {
            le += 1;
        }
        if u >= u_obs {
            ge += 1;
        }
    }
    let total = assignments.len() as u64;
    (u_obs as f64, (2.0 * le.min(ge) as f64 / total as f64).min(1.0))
}

/// Average ranks by counting: rank = #smaller + (#equal + 1) / 2.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let smaller = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            smaller + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Exact two-sided Wilcoxon signed-rank p-value by enumerating all sign
/// patterns of the non-zero absolute differences. Returns (min(W+, W-), p).
pub fn wilcoxon_enumerated(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return (0.0, 1.0);
    }
    let ranks = midranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_obs: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let n = nz.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for pattern in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_obs + 1e-9 {
            le += 1;
        }
        if w >= w_obs - 1e-9 {
            ge += 1;
        }
    }
    let p = (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0);
    (w_obs.min(total - w_obs), p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation via the two-pass formula.
pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Pearson r as covariance over the product of standard deviations.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let n = xs.len() as f64;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
    cov / (sd(xs) * sd(ys))
}

/// Type-7 quantile: h = (n - 1) q, interpolate between floor and ceil.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor();
    let frac = h - lo;
    let lo = lo as usize;
    if lo + 1 >= s.len() {
        s[lo]
    } else {
        s[lo] * (1.0 - frac) + s[lo + 1] * frac
    }
}

/// Dice by set sizes.
pub fn dice_sets(a: &[bool], b: &[bool]) -> f64 {
    let ia: Vec<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let ib: Vec<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    if ia.is_empty() && ib.is_empty() {
        return 100.0;
    }
    let inter = ia.iter().filter(|i| ib.binary_search(i).is_ok()).count();
    200.0 * inter as f64 / (ia.len() + ib.len()) as f64
}

/// Masked CE + soft Dice straight from the definition: channels of absent
/// foreground labels are deleted before a fresh softmax. `logits` is
/// channel-major, `labels` are class codes, `present` foreground codes.
pub fn masked_loss_naive(logits: &[f64], n_classes: usize, labels: &[usize], present: &[usize], smoothing: f64) -> f64 {
    let n = labels.len();
    let kept: Vec<usize> = (0..n_classes).filter(|&c| c == 0 || present.contains(&c)).collect();
    if kept.len() == 1 {
        return 0.0;
    }
    let prob = |c: usize, v: usize| -> f64 {
        let z: f64 = kept.iter().map(|&k| logits[k * n + v].exp()).sum();
        logits[c * n + v].exp() / z
    };
    let ce = (0..n).map(|v| -prob(labels[v], v).ln()).sum::<f64>() / n as f64;
    let fg: Vec<usize> = kept[1..].to_vec();
    let dice = fg
        .iter()
        .map(|&c| {
            let inter: f64 = (0..n).filter(|&v| labels[v] == c).map(|v| prob(c, v)).sum();
            let psum: f64 = (0..n).map(|v| prob(c, v)).sum();
            let gsum = labels.iter().filter(|&&l| l == c).count() as f64;
            1.0 - 2.0 * inter / (psum + gsum + smoothing)
        })
        .sum::<f64>()
        / fg.len() as f64;
    ce + dice
}
