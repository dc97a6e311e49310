//! Simulated clicking: error regions, erosion, distance-transform centers.
//!
//! All geometry treats pixels outside the image as background, so a mask
//! touching the border still has finite distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clicks::Click;
use crate::error::{Error, Result};
use crate::mask::BitMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    /// Ground truth foreground predicted as background.
    FalseNegative,
    /// Ground truth background predicted as foreground.
    FalsePositive,
}

/// A 4-connected component of the prediction error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegion {
    /// Pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub kind: ErrorKind,
}

impl ErrorRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BitMask {
        let mut m = BitMask::empty(height, width);
        for &(r, c) in &self.pixels {
            m.set(r, c, true);
        }
        m
    }
}

pub const ERODE_ITERATIONS: usize = 1;
/// Pixels whose distance to the region boundary is at most this count as "near the border".
pub const BORDER_BAND: f64 = 2.0;
pub const DEFAULT_BORDER_PROB: f64 = 0.5;

#[derive(Clone, Debug)]
pub enum ClickPolicy {
    /// Always the distance-transform center of the largest region.
    EvalDeterministic,
    /// Center, or with probability `border_prob` a uniform pixel in the border band.
    TrainMixed { border_prob: f64, rng: ChaCha8Rng },
}

impl ClickPolicy {
    pub fn train_mixed(border_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&border_prob) {
            return Err(Error::Config(format!("border_prob {border_prob} outside [0, 1]")));
        }
        Ok(ClickPolicy::TrainMixed {
            border_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// 4-connected components of the false negatives and of the false
/// positives, largest first; equal areas are ordered by their first pixel
/// in row-major order.
pub fn error_regions(pred: &BitMask, gt: &BitMask) -> Result<Vec<ErrorRegion>> {
    pred.check_same_dims(gt)?;
    let (h, w) = pred.dims();
    let wrong: Vec<bool> = pred.bits().iter().zip(gt.bits()).map(|(p, g)| p != g).collect();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !wrong[start] || seen[start] {
            continue;
        }
        let fg = gt.bits()[start];
        let kind = if fg {
            ErrorKind::FalseNegative
        } else {
            ErrorKind::FalsePositive
        };
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push((i / w, i % w));
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if wrong[j] && !seen[j] && gt.bits()[j] == fg {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        pixels.sort_unstable();
        regions.push(ErrorRegion { pixels, kind });
    }
    // Stable sort keeps discovery order (first pixel row-major) among equal areas.
    regions.sort_by(|a, b| b.area().cmp(&a.area()));
    Ok(regions)
}

/// Erosion with the 4-neighborhood cross; outside pixels count as background.
pub fn erode(mask: &BitMask, iterations: usize) -> BitMask {
    let (h, w) = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let prev = cur.clone();
        cur = BitMask::from_fn(h, w, |r, c| {
            prev.get(r, c)
                && r > 0
                && prev.get(r - 1, c)
                && r + 1 < h
                && prev.get(r + 1, c)
                && c > 0
                && prev.get(r, c - 1)
                && c + 1 < w
                && prev.get(r, c + 1)
        });
    }
    cur
}

// Larger than any squared distance on a supported image, small enough
// that sums with squared indices stay exact in f64.
const FAR: f64 = 1e10;

/// One-dimensional squared distance transform of a sampled function.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let parabola = |p: usize| f[p] + (p * p) as f64;
        let mut s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from each pixel to the nearest background
/// pixel (zero on background), with the image surrounded by background.
pub fn squared_distance_transform(mask: &BitMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                grid[(r + 1) * pw + c + 1] = FAR;
            }
        }
    }
    let n = ph.max(pw);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col_in = vec![0.0; ph];
    let mut col_out = vec![0.0; ph];
    for c in 0..pw {
        for r in 0..ph {
            col_in[r] = grid[r * pw + c];
        }
        dt1d(&col_in, &mut col_out, &mut v, &mut z);
        for r in 0..ph {
            grid[r * pw + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; pw];
    for r in 0..ph {
        dt1d(&grid[r * pw..(r + 1) * pw], &mut row_out, &mut v, &mut z);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&row_out);
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        out[r * w..(r + 1) * w].copy_from_slice(&grid[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    out
}

/// Pixel maximizing the distance to the complement; ties go to the
/// smallest `(row, col)`. `None` for an empty mask.
pub fn mask_center(mask: &BitMask) -> Option<(usize, usize)> {
    let dt = squared_distance_transform(mask);
    let w = mask.width();
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in dt.iter().enumerate() {
        if mask.bits()[i] && best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| (i / w, i % w))
}

/// Distance-transform center of a region.
pub fn region_center(region: &ErrorRegion) -> Result<(usize, usize)> {
    if region.pixels.is_empty() {
        return Err(Error::Contract("center of an empty region".into()));
    }
    let (r0, c0, r1, c1) = region.pixels.iter().fold(
        (usize::MAX, usize::MAX, 0, 0),
        |(a, b, c, d), &(r, col)| (a.min(r), b.min(col), c.max(r), d.max(col)),
    );
    let mut local = BitMask::empty(r1 - r0 + 1, c1 - c0 + 1);
    for &(r, c) in &region.pixels {
        local.set(r - r0, c - c0, true);
    }
    let (r, c) = mask_center(&local).expect("non-empty region");
    Ok((r + r0, c + c0))
}

/// Positive click at the distance-transform center of the ground truth.
pub fn first_click(gt: &BitMask) -> Result<Click> {
    let (row, col) = mask_center(gt).ok_or_else(|| Error::Contract("first click on an empty ground truth".into()))?;
    Ok(Click::new(row, col, true))
}

/// Next corrective click, or `None` when the prediction is already exact.
pub fn next_click(pred: &BitMask, gt: &BitMask, policy: &mut ClickPolicy) -> Result<Option<Click>> {
    let regions = error_regions(pred, gt)?;
    let Some(largest) = regions.first() else {
        return Ok(None);
    };
    let (h, w) = gt.dims();
    let full = largest.to_mask(h, w);
    let eroded = erode(&full, ERODE_ITERATIONS);
    let target = if eroded.is_empty() { full } else { eroded };
    let positive = largest.kind == ErrorKind::FalseNegative;

    let (row, col) = match policy {
        ClickPolicy::EvalDeterministic => mask_center(&target).expect("non-empty"),
        ClickPolicy::TrainMixed { border_prob, rng } => {
            if rng.random::<f64>() < *border_prob {
                let dt = squared_distance_transform(&target);
                let band: Vec<usize> = (0..h * w)
                    .filter(|&i| target.bits()[i] && dt[i] <= BORDER_BAND * BORDER_BAND)
                    .collect();
                let i = band[rng.random_range(0..band.len())];
                (i / w, i % w)
            } else {
                mask_center(&target).expect("non-empty")
            }
        }
    };
    Ok(Some(Click::new(row, col, positive)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacent_miss_and_spill_stay_separate() {
        // Row 0: gt only (miss); row 1: pred only (spill). They touch but are distinct regions.
        let gt = BitMask::from_fn(2, 4, |r, _| r == 0);
        let pred = BitMask::from_fn(2, 4, |r, c| r == 1 && c < 3);
        let regions = error_regions(&pred, &gt).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!((regions[0].area(), regions[0].kind), (4, ErrorKind::FalseNegative));
        assert_eq!((regions[1].area(), regions[1].kind), (3, ErrorKind::FalsePositive));
    }

    /// Squared distance to the nearest pixel outside `mask`, scanning all of them.
    fn brute_sq_dist(mask: &BitMask) -> Vec<f64> {
        let (h, w) = mask.dims();
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                if !mask.get(r, c) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for rr in -1..=h as i64 {
                    for cc in -1..=w as i64 {
                        let inside = rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64;
                        if inside && mask.get(rr as usize, cc as usize) {
                            continue;
                        }
                        let d = ((rr - r as i64).pow(2) + (cc - c as i64).pow(2)) as f64;
                        best = best.min(d);
                    }
                }
                out[r * w + c] = best;
            }
        }
        out
    }

    fn brute_center(mask: &BitMask) -> (usize, usize) {
        let d = brute_sq_dist(mask);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in d.iter().enumerate() {
            if mask.bits()[i] && v > best.1 {
                best = (i, v);
            }
        }
        (best.0 / mask.width(), best.0 % mask.width())
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let shapes = [
            BitMask::from_fn(9, 11, |r, c| (r as i64 - 4).pow(2) + (c as i64 - 5).pow(2) <= 12),
            BitMask::from_fn(7, 7, |r, c| r < 5 && (c < 2 || r > 3)),
            BitMask::full(6, 4),
            BitMask::from_fn(10, 10, |r, c| (r * 7 + c * 3) % 5 != 0),
        ];
        for m in &shapes {
            assert_eq!(squared_distance_transform(m), brute_sq_dist(m));
        }
    }

    #[test]
    fn regions_examples() {
        let gt = BitMask::from_fn(6, 6, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        assert!(error_regions(&gt, &gt).unwrap().is_empty());
        let rs = error_regions(&BitMask::empty(6, 6), &gt).unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].area(), 9);
        assert_eq!(rs[0].kind, ErrorKind::FalseNegative);

        let diag = BitMask::from_fn(3, 3, |r, c| (r, c) == (0, 0) || (r, c) == (1, 1));
        let rs = error_regions(&diag, &BitMask::empty(3, 3)).unwrap();
        assert_eq!(rs.len(), 2);
        assert!(rs.iter().all(|r| r.kind == ErrorKind::FalsePositive));
        assert_eq!(rs[0].pixels, vec![(0, 0)]);
    }

    #[test]
    fn regions_sorted_by_area_then_position() {
        let pred = BitMask::empty(5, 8);
        let gt = BitMask::from_fn(5, 8, |r, c| (r == 0 && c < 2) || (r == 4 && c > 3) || (r == 2 && c == 6));
        let rs = error_regions(&pred, &gt).unwrap();
        let areas: Vec<usize> = rs.iter().map(ErrorRegion::area).collect();
        assert_eq!(areas, vec![4, 2, 1]);
    }

    #[test]
    fn erosion_examples() {
        let sq = BitMask::from_fn(7, 7, |r, c| (1..6).contains(&r) && (1..6).contains(&c));
        assert_eq!(erode(&sq, 0), sq);
        let inner = BitMask::from_fn(7, 7, |r, c| (2..5).contains(&r) && (2..5).contains(&c));
        assert_eq!(erode(&sq, 1), inner);
        let line = BitMask::from_fn(5, 9, |r, c| r == 2 && c > 0);
        assert!(erode(&line, 1).is_empty());
        // Touching the image border erodes, since outside is background.
        assert!(!erode(&BitMask::full(3, 3), 1).get(0, 0));
    }

    #[test]
    fn centers() {
        let sq = ErrorRegion {
            pixels: (0..5).flat_map(|r| (0..5).map(move |c| (r + 3, c + 10))).collect(),
            kind: ErrorKind::FalseNegative,
        };
        assert_eq!(region_center(&sq).unwrap(), (5, 12));
        let single = ErrorRegion { pixels: vec![(4, 7)], kind: ErrorKind::FalsePositive };
        assert_eq!(region_center(&single).unwrap(), (4, 7));

        let ell = BitMask::from_fn(12, 12, |r, c| (r < 10 && c < 4) || (r >= 6 && r < 10 && c < 11));
        let rs = error_regions(&BitMask::empty(12, 12), &ell).unwrap();
        let center = region_center(&rs[0]).unwrap();
        // The oracle sees the region in isolation, which is what region_center does.
        assert_eq!(center, brute_center(&ell));
    }

    #[test]
    fn first_click_examples() {
        let disk = BitMask::from_fn(21, 21, |r, c| (r as i64 - 10).pow(2) + (c as i64 - 10).pow(2) <= 36);
        assert_eq!(first_click(&disk).unwrap(), Click::new(10, 10, true));
        assert_eq!(first_click(&BitMask::full(64, 64)).unwrap(), Click::new(31, 31, true));
        let crescent = BitMask::from_fn(30, 30, |r, c| {
            let (r, c) = (r as i64, c as i64);
            (r - 15).pow(2) + (c - 15).pow(2) <= 144 && (r - 15).pow(2) + (c - 21).pow(2) > 81
        });
        let fc = first_click(&crescent).unwrap();
        assert_eq!((fc.row, fc.col), brute_center(&crescent));
        assert!(first_click(&BitMask::empty(4, 4)).is_err());
    }

    #[test]
    fn next_click_examples() {
        let mut policy = ClickPolicy::EvalDeterministic;
        let gt = BitMask::full(9, 9);
        let c = next_click(&BitMask::empty(9, 9), &gt, &mut policy).unwrap().unwrap();
        assert_eq!((c.row, c.col, c.positive), (4, 4, true));
        assert!(next_click(&gt, &gt, &mut policy).unwrap().is_none());

        let blob = BitMask::from_fn(12, 12, |r, c| (3..8).contains(&r) && (5..9).contains(&c));
        let c = next_click(&blob, &BitMask::empty(12, 12), &mut policy).unwrap().unwrap();
        assert!(!c.positive);
        assert!(blob.get(c.row, c.col));
    }

    #[test]
    fn train_mixed_replays_with_same_seed() {
        let gt = BitMask::from_fn(32, 32, |r, c| (r as i64 - 16).pow(2) + (c as i64 - 14).pow(2) < 100);
        let run = || {
            let mut policy = ClickPolicy::train_mixed(0.5, 42).unwrap();
            let mut pred = BitMask::empty(32, 32);
            let mut out = Vec::new();
            for _ in 0..10 {
                let Some(c) = next_click(&pred, &gt, &mut policy).unwrap() else { break };
                pred.set(c.row, c.col, c.positive);
                out.push(c);
            }
            out
        };
        assert_eq!(run(), run());
        assert!(ClickPolicy::train_mixed(1.5, 0).is_err());
    }
}
