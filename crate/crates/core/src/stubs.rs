//! Segmenters with known behaviour, for testing the protocol and the service.

use crate::clicks::InteractionState;
use crate::error::Result;
use crate::mask::BitMask;
use crate::model::Segmenter;
use crate::tensor::Tensor;

/// Returns the ground truth whatever the input.
#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    pub gt: BitMask,
}

impl Segmenter for OracleSegmenter {
    fn predict(&self, _image: &Tensor, _state: &InteractionState) -> Result<Tensor> {
        Ok(self.gt.to_tensor())
    }
}

/// Always predicts background.
#[derive(Clone, Copy, Debug)]
pub struct EmptySegmenter {
    pub height: usize,
    pub width: usize,
}

impl Segmenter for EmptySegmenter {
    fn predict(&self, _image: &Tensor, _state: &InteractionState) -> Result<Tensor> {
        Ok(Tensor::zeros([1, self.height, self.width]))
    }
}

/// Predicts the first `min(k, 4)` quadrants (TL, TR, BL, BR) after `k`
/// clicks. Against a full-image ground truth with even sides the IoU after
/// `k` clicks is `k / 4`.
#[derive(Clone, Copy, Debug)]
pub struct QuadrantSegmenter {
    pub height: usize,
    pub width: usize,
}

impl QuadrantSegmenter {
    pub fn mask(&self, k: usize) -> BitMask {
        let (h2, w2) = (self.height / 2, self.width / 2);
        BitMask::from_fn(self.height, self.width, |r, c| {
            let q = 2 * usize::from(r >= h2) + usize::from(c >= w2);
            q < k
        })
    }
}

impl Segmenter for QuadrantSegmenter {
    fn predict(&self, _image: &Tensor, state: &InteractionState) -> Result<Tensor> {
        Ok(self.mask(state.len()).to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_areas() {
        let q = QuadrantSegmenter { height: 8, width: 6 };
        let areas: Vec<usize> = (0..6).map(|k| q.mask(k).area()).collect();
        assert_eq!(areas, vec![0, 12, 24, 36, 48, 48]);
    }
}
