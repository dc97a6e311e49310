//! Clicks, interaction state, and rasterization into the click-branch input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
    /// Position in the session's click sequence.
    #[serde(default)]
    pub index: usize,
}

impl Click {
    pub fn new(row: usize, col: usize, positive: bool) -> Self {
        Self { row, col, positive, index: 0 }
    }
}

/// Clicks so far plus the previous round's binarized prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionState {
    clicks: Vec<Click>,
    prev_mask: Option<BitMask>,
}

impl InteractionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn prev_mask(&self) -> Option<&BitMask> {
        self.prev_mask.as_ref()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    /// Appends a click after checking bounds and the first-click rule.
    /// The click's `index` is assigned from the sequence position.
    pub fn push(&mut self, mut click: Click, height: usize, width: usize) -> Result<()> {
        if click.row >= height || click.col >= width {
            return Err(Error::Contract(format!(
                "click ({}, {}) outside {height}x{width} image",
                click.row, click.col
            )));
        }
        if self.clicks.is_empty() && !click.positive {
            return Err(Error::Contract("first click must be positive".into()));
        }
        click.index = self.clicks.len();
        self.clicks.push(click);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Click> {
        self.clicks.pop()
    }

    pub fn truncate(&mut self, len: usize) {
        self.clicks.truncate(len);
    }

    pub fn set_prev_mask(&mut self, mask: Option<BitMask>) {
        self.prev_mask = mask;
    }
}

/// `[1, h, w]` map with ones inside radius-`radius` disks around clicks of
/// the given polarity.
pub fn rasterize_disks(clicks: &[Click], positive: bool, height: usize, width: usize, radius: usize) -> Tensor {
    let mut out = Tensor::zeros([1, height, width]);
    let r = radius as isize;
    let data = out.data_mut();
    for c in clicks.iter().filter(|c| c.positive == positive) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (y, x) = (c.row as isize + dy, c.col as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                    data[y as usize * width + x as usize] = 1.0;
                }
            }
        }
    }
    out
}

/// `[3, h, w]`: positive disks, negative disks, previous mask (zeros when absent).
pub fn encode_interaction(state: &InteractionState, height: usize, width: usize, radius: usize) -> Result<Tensor> {
    let pos = rasterize_disks(state.clicks(), true, height, width, radius);
    let neg = rasterize_disks(state.clicks(), false, height, width, radius);
    let prev = match state.prev_mask() {
        Some(m) => {
            if m.dims() != (height, width) {
                return Err(Error::Shape(format!(
                    "previous mask {:?} for a {height}x{width} input",
                    m.dims()
                )));
            }
            m.to_tensor()
        }
        None => Tensor::zeros([1, height, width]),
    };
    let mut data = pos.into_data();
    data.extend(neg.into_data());
    data.extend(prev.into_data());
    Tensor::new([3, height, width], data)
}
