//! Mapping between original image pixels and the padded square model input.
//!
//! The image is scaled by `s = side / max(h, w)` and placed at the top-left
//! of a zero canvas. Pixel `i` of one space maps to `floor((i + 0.5) * k)`
//! of the other, with `k = s` or `1 / s`.

use icmf_core::imageops::{place, resize_bilinear};
use icmf_core::{BitMask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub orig_h: usize,
    pub orig_w: usize,
    pub side: usize,
}

fn map(i: usize, k: f64, limit: usize) -> usize {
    (((i as f64 + 0.5) * k).floor() as usize).min(limit - 1)
}

impl Letterbox {
    pub fn new(orig_h: usize, orig_w: usize, side: usize) -> Self {
        Self { orig_h, orig_w, side }
    }

    pub fn scale(&self) -> f64 {
        self.side as f64 / self.orig_h.max(self.orig_w) as f64
    }

    /// Size of the image content inside the model canvas.
    pub fn content(&self) -> (usize, usize) {
        let s = self.scale();
        let f = |n: usize| ((n as f64 * s).round() as usize).clamp(1, self.side);
        (f(self.orig_h), f(self.orig_w))
    }

    pub fn to_model(&self, row: usize, col: usize) -> (usize, usize) {
        let (ch, cw) = self.content();
        let s = self.scale();
        (map(row, s, ch), map(col, s, cw))
    }

    pub fn to_orig(&self, row: usize, col: usize) -> (usize, usize) {
        let s = self.scale();
        (map(row, 1.0 / s, self.orig_h), map(col, 1.0 / s, self.orig_w))
    }

    pub fn image_to_model(&self, img: &Tensor) -> Tensor {
        let (ch, cw) = self.content();
        place(&resize_bilinear(img, ch, cw), self.side, self.side, 0, 0)
    }

    /// Nearest-neighbour transfer of an original-resolution mask onto the canvas.
    pub fn mask_to_model(&self, mask: &BitMask) -> BitMask {
        let (ch, cw) = self.content();
        BitMask::from_fn(self.side, self.side, |r, c| {
            if r >= ch || c >= cw {
                return false;
            }
            let (or, oc) = self.to_orig(r, c);
            mask.get(or, oc)
        })
    }

    /// Canvas mask back to exactly `orig_h x orig_w`.
    pub fn mask_to_orig(&self, mask: &BitMask) -> BitMask {
        BitMask::from_fn(self.orig_h, self.orig_w, |r, c| {
            let (mr, mc) = self.to_model(r, c);
            mask.get(mr, mc)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_content_sizes() {
        assert_eq!(Letterbox::new(100, 50, 64).content(), (64, 32));
        assert_eq!(Letterbox::new(64, 64, 64).content(), (64, 64));
        assert_eq!(Letterbox::new(10, 30, 64).content(), (21, 64));
    }

    #[test]
    fn round_trips() {
        for (h, w) in [(100, 50), (30, 10), (64, 64), (7, 200)] {
            let lb = Letterbox::new(h, w, 64);
            let s = lb.scale();
            if s <= 1.0 {
                // Every canvas pixel inside the content has an original preimage.
                let (ch, cw) = lb.content();
                for r in 0..ch {
                    for c in 0..cw {
                        let (or, oc) = lb.to_orig(r, c);
                        assert_eq!(lb.to_model(or, oc), (r, c), "{h}x{w} at {r},{c}");
                    }
                }
            } else {
                for r in 0..h {
                    for c in 0..w {
                        let (mr, mc) = lb.to_model(r, c);
                        assert_eq!(lb.to_orig(mr, mc), (r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn upscaled_mask_round_trip_is_exact() {
        let lb = Letterbox::new(20, 12, 64);
        let m = BitMask::from_fn(20, 12, |r, c| (r * 7 + c * 3) % 5 < 2);
        assert_eq!(lb.mask_to_orig(&lb.mask_to_model(&m)), m);
    }
}
