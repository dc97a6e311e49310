//! Resizing, flips and rotations on `[c, h, w]` tensors and masks.
//!
//! Resampling uses pixel-center alignment: destination pixel `i` samples
//! source coordinate `(i + 0.5) * src / dst - 0.5`.

use crate::mask::BitMask;
use crate::tensor::Tensor;

fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn nearest_axis(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|o| (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let ty = bilinear_axis(h, out_h);
    let tx = bilinear_axis(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("positive dims")
}

pub fn resize_nearest(mask: &BitMask, out_h: usize, out_w: usize) -> BitMask {
    let ty = nearest_axis(mask.height(), out_h);
    let tx = nearest_axis(mask.width(), out_w);
    BitMask::from_fn(out_h, out_w, |r, c| mask.get(ty[r], tx[c]))
}

/// Generic `[c, h, w]` remap: `f(r, c)` gives the source pixel of output `(r, c)`.
fn remap(img: &Tensor, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for r in 0..out_h {
            for col in 0..out_w {
                let (sr, sc) = f(r, col);
                out.push(src[(ch * h + sr) * w + sc]);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("positive dims")
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let w = img.shape()[2];
    remap(img, img.shape()[1], w, |r, c| (r, w - 1 - c))
}

pub fn flip_mask(mask: &BitMask) -> BitMask {
    let w = mask.width();
    BitMask::from_fn(mask.height(), w, |r, c| mask.get(r, w - 1 - c))
}

/// Counter-clockwise rotation by `quarter_turns` * 90 degrees.
pub fn rot90(img: &Tensor, quarter_turns: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => remap(img, w, h, |r, c| (c, w - 1 - r)),
        2 => remap(img, h, w, |r, c| (h - 1 - r, w - 1 - c)),
        _ => remap(img, w, h, |r, c| (h - 1 - c, r)),
    }
}

pub fn rot90_mask(mask: &BitMask, quarter_turns: usize) -> BitMask {
    let (h, w) = mask.dims();
    match quarter_turns % 4 {
        0 => mask.clone(),
        1 => BitMask::from_fn(w, h, |r, c| mask.get(c, w - 1 - r)),
        2 => BitMask::from_fn(h, w, |r, c| mask.get(h - 1 - r, w - 1 - c)),
        _ => BitMask::from_fn(w, h, |r, c| mask.get(h - 1 - c, r)),
    }
}

/// Places `img` on a zero canvas of `out_h x out_w` with its top-left at
/// `(dy, dx)`, cropping whatever falls outside.
pub fn place(img: &Tensor, out_h: usize, out_w: usize, dy: isize, dx: isize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros([c, out_h, out_w]);
    let src = img.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for r in 0..out_h {
            let sr = r as isize - dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for col in 0..out_w {
                let sc = col as isize - dx;
                if sc >= 0 && sc < w as isize {
                    dst[(ch * out_h + r) * out_w + col] = src[(ch * h + sr as usize) * w + sc as usize];
                }
            }
        }
    }
    out
}

pub fn place_mask(mask: &BitMask, out_h: usize, out_w: usize, dy: isize, dx: isize) -> BitMask {
    let (h, w) = mask.dims();
    BitMask::from_fn(out_h, out_w, |r, c| {
        let (sr, sc) = (r as isize - dy, c as isize - dx);
        sr >= 0 && sc >= 0 && sr < h as isize && sc < w as isize && mask.get(sr as usize, sc as usize)
    })
}
