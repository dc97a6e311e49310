//! Seeded synthetic shapes: one target shape among distractors on a
//! textured, noisy background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::BitMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[3, side, side]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt: BitMask,
    pub kind: ShapeKind,
}

pub const MIN_GT_AREA: usize = 16;

fn shape_mask<R: Rng>(kind: ShapeKind, side: usize, rng: &mut R) -> BitMask {
    let s = side as f64;
    let cy = rng.random_range(0.25 * s..0.75 * s);
    let cx = rng.random_range(0.25 * s..0.75 * s);
    let ry = rng.random_range(0.12 * s..0.25 * s);
    let rx = rng.random_range(0.12 * s..0.25 * s);
    match kind {
        ShapeKind::Ellipse => BitMask::from_fn(side, side, |r, c| {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        }),
        ShapeKind::Rectangle => BitMask::from_fn(side, side, |r, c| {
            ((r as f64 + 0.5) - cy).abs() <= ry && ((c as f64 + 0.5) - cx).abs() <= rx
        }),
        ShapeKind::Triangle => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = angle + k as f64 * std::f64::consts::TAU / 3.0;
                    (cy + 1.3 * ry * a.sin(), cx + 1.3 * rx * a.cos())
                })
                .collect();
            BitMask::from_fn(side, side, |r, c| point_in_triangle((r as f64 + 0.5, c as f64 + 0.5), &verts))
        }
    }
}

fn point_in_triangle(p: (f64, f64), v: &[(f64, f64)]) -> bool {
    let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let d = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0)
}

fn random_color<R: Rng>(rng: &mut R, avoid: &[[f64; 3]]) -> [f64; 3] {
    for _ in 0..32 {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let far = avoid.iter().all(|a| {
            a.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum::<f64>() > 0.6
        });
        if far {
            return c;
        }
    }
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn paint(img: &mut Tensor, mask: &BitMask, color: [f64; 3]) {
    let n = mask.height() * mask.width();
    let data = img.data_mut();
    for (i, &b) in mask.bits().iter().enumerate() {
        if b {
            for (ch, &v) in color.iter().enumerate() {
                data[ch * n + i] = v;
            }
        }
    }
}

/// One sample of the given kind.
pub fn synth_sample<R: Rng>(kind: ShapeKind, side: usize, rng: &mut R) -> SynthSample {
    let n = side * side;
    let bg = random_color(rng, &[]);
    let freq = rng.random_range(0.1..0.5);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Tensor::zeros([3, side, side]);
    {
        let data = image.data_mut();
        for i in 0..n {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            let texture = 0.08 * (freq * r + phase).sin() * (freq * c).cos();
            for ch in 0..3 {
                data[ch * n + i] = bg[ch] + texture;
            }
        }
    }
    let target_color = random_color(rng, &[bg]);
    let n_distractors = rng.random_range(1..=2);
    for _ in 0..n_distractors {
        let dk = ShapeKind::ALL[rng.random_range(0..3)];
        let dm = shape_mask(dk, side, rng);
        let dc = random_color(rng, &[bg, target_color]);
        paint(&mut image, &dm, dc);
    }
    let gt = loop {
        let m = shape_mask(kind, side, rng);
        if m.area() >= MIN_GT_AREA {
            break m;
        }
    };
    paint(&mut image, &gt, target_color);
    for v in image.data_mut() {
        *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    SynthSample { image, gt, kind }
}

/// `n` samples with shape kinds balanced to within one of `n / 3`.
pub fn synth_dataset(n: usize, side: usize, seed: u64) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<ShapeKind> = (0..n).map(|i| ShapeKind::ALL[i % 3]).collect();
    kinds.shuffle(&mut rng);
    kinds.into_iter().map(|k| synth_sample(k, side, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        assert_eq!(synth_dataset(6, 32, 3), synth_dataset(6, 32, 3));
        assert_ne!(synth_dataset(6, 32, 3), synth_dataset(6, 32, 4));
    }

    #[test]
    fn generator_contract() {
        for s in synth_dataset(60, 64, 11) {
            assert!(s.gt.area() >= MIN_GT_AREA);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[3, 64, 64]);
        }
    }

    #[test]
    fn kinds_are_balanced() {
        let data = synth_dataset(300, 32, 5);
        for k in ShapeKind::ALL {
            let n = data.iter().filter(|s| s.kind == k).count() as f64;
            assert!((n - 100.0).abs() <= 20.0, "{k:?}: {n}");
        }
    }
}
