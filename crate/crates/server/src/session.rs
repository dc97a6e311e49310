//! Per-session interaction state and the bounded session store.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use icmf_core::mask::MASK_THRESHOLD;
use icmf_core::{BitMask, Click, InteractionState, Segmenter, Tensor};
use serde::Serialize;

use crate::error::{ApiError, ApiResult};
use crate::geometry::Letterbox;

/// What produces masks for the sessions of one server.
#[derive(Clone)]
pub enum Backend {
    Model(Arc<dyn Segmenter>),
    /// Answers every click with the session's own ground truth. Sessions
    /// must be created with one.
    GroundTruth,
}

/// State restored by undo.
#[derive(Clone, Debug)]
struct Snapshot {
    prev_mask: Option<BitMask>,
    mask: Option<BitMask>,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct MaskSummary {
    pub area: usize,
    /// `[min_row, min_col, max_row, max_col]`, inclusive, in image pixels.
    pub bbox: Option<[usize; 4]>,
}

impl MaskSummary {
    pub fn of(mask: &BitMask) -> Self {
        Self { area: mask.area(), bbox: mask.bbox().map(|(a, b, c, d)| [a, b, c, d]) }
    }
}

#[derive(Debug)]
pub struct Session {
    pub geometry: Letterbox,
    image: Tensor,
    state: InteractionState,
    /// Latest mask at the original resolution.
    mask: Option<BitMask>,
    history: Vec<Snapshot>,
    gt: Option<BitMask>,
    gt_model: Option<BitMask>,
}

impl Session {
    /// `image` is `[3, h, w]` at the uploaded resolution.
    pub fn new(image: &Tensor, gt: Option<BitMask>, side: usize) -> ApiResult<Self> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if let Some(g) = &gt {
            if g.dims() != (h, w) {
                return Err(ApiError::Unprocessable(format!(
                    "ground truth is {}x{} but the image is {h}x{w}",
                    g.height(),
                    g.width()
                )));
            }
        }
        let geometry = Letterbox::new(h, w, side);
        Ok(Self {
            image: geometry.image_to_model(image),
            gt_model: gt.as_ref().map(|g| geometry.mask_to_model(g)),
            geometry,
            state: InteractionState::new(),
            mask: None,
            history: Vec::new(),
            gt,
        })
    }

    pub fn click_count(&self) -> usize {
        self.state.len()
    }

    pub fn mask(&self) -> Option<&BitMask> {
        self.mask.as_ref()
    }

    pub fn clicks(&self) -> &[Click] {
        self.state.clicks()
    }

    pub fn has_gt(&self) -> bool {
        self.gt.is_some()
    }

    pub fn iou(&self) -> Option<f64> {
        icmf_core::eval::iou(self.mask.as_ref()?, self.gt.as_ref()?).ok()
    }

    /// Validates a click in original coordinates and appends its model-space
    /// counterpart. Nothing changes on error.
    pub fn push_click(&mut self, row: usize, col: usize, positive: bool) -> ApiResult<()> {
        let (h, w) = (self.geometry.orig_h, self.geometry.orig_w);
        if row >= h || col >= w {
            return Err(ApiError::Unprocessable(format!("click ({row}, {col}) outside {h}x{w} image")));
        }
        let (mr, mc) = self.geometry.to_model(row, col);
        let side = self.geometry.side;
        self.state.push(Click::new(mr, mc, positive), side, side)?;
        self.history.push(Snapshot { prev_mask: self.state.prev_mask().cloned(), mask: self.mask.clone() });
        Ok(())
    }

    /// Runs the backend on the current clicks and stores the new mask.
    pub fn infer(&mut self, backend: &Backend) -> ApiResult<()> {
        let (model_mask, mask) = match backend {
            Backend::Model(seg) => {
                let prob = seg.predict(&self.image, &self.state)?;
                let m = BitMask::binarize(&prob, MASK_THRESHOLD)?;
                let orig = self.geometry.mask_to_orig(&m);
                (m, orig)
            }
            Backend::GroundTruth => {
                let (Some(g), Some(gm)) = (&self.gt, &self.gt_model) else {
                    return Err(ApiError::Unprocessable("this server needs a ground truth per session".into()));
                };
                (gm.clone(), g.clone())
            }
        };
        self.state.set_prev_mask(Some(model_mask));
        self.mask = Some(mask);
        Ok(())
    }

    /// Drops the last click and its prediction. Returns false when there is
    /// nothing to undo.
    pub fn undo(&mut self) -> bool {
        let Some(snap) = self.history.pop() else {
            return false;
        };
        self.state.pop();
        self.state.set_prev_mask(snap.prev_mask);
        self.mask = snap.mask;
        true
    }

    /// Failed inference must not leave a dangling click.
    pub fn rollback(&mut self) {
        self.undo();
    }

    pub fn reset(&mut self) {
        self.state = InteractionState::new();
        self.history.clear();
        self.mask = None;
    }
}

struct Entry {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_access: Instant,
}

/// Sessions keyed by id, with idle expiry and least-recently-used eviction.
pub struct Store {
    inner: Mutex<HashMap<String, Entry>>,
    ttl: Duration,
    capacity: usize,
}

impl Store {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        Self { inner: Mutex::new(HashMap::new()), ttl, capacity: capacity.max(1) }
    }

    fn sweep(map: &mut HashMap<String, Entry>, ttl: Duration, now: Instant) {
        map.retain(|id, e| {
            let keep = now.duration_since(e.last_access) < ttl;
            if !keep {
                log::info!("session {id} expired");
            }
            keep
        });
    }

    pub fn insert(&self, session: Session) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        let now = Instant::now();
        let mut map = self.inner.lock().expect("store lock");
        Self::sweep(&mut map, self.ttl, now);
        while map.len() >= self.capacity {
            let oldest = map.iter().min_by_key(|(_, e)| e.last_access).map(|(k, _)| k.clone());
            if let Some(k) = oldest {
                log::info!("session {k} evicted");
                map.remove(&k);
            }
        }
        map.insert(id.clone(), Entry { session: Arc::new(tokio::sync::Mutex::new(session)), last_access: now });
        id
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        let now = Instant::now();
        let mut map = self.inner.lock().expect("store lock");
        Self::sweep(&mut map, self.ttl, now);
        let e = map.get_mut(id).ok_or_else(|| ApiError::NotFound(id.to_owned()))?;
        e.last_access = now;
        Ok(e.session.clone())
    }

    pub fn remove(&self, id: &str) -> bool {
        self.inner.lock().expect("store lock").remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major run-length encoding of the foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    /// Flat `[start, len, start, len, ...]` over foreground runs.
    pub runs: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BitMask) -> Self {
        let mut runs = Vec::new();
        let bits = mask.bits();
        let mut i = 0;
        while i < bits.len() {
            if bits[i] {
                let start = i;
                while i < bits.len() && bits[i] {
                    i += 1;
                }
                runs.extend([start, i - start]);
            } else {
                i += 1;
            }
        }
        Self { h: mask.height(), w: mask.width(), runs }
    }

    pub fn decode(&self) -> Option<BitMask> {
        if self.runs.len() % 2 != 0 {
            return None;
        }
        let mut bits = vec![false; self.h * self.w];
        for pair in self.runs.chunks(2) {
            let (s, n) = (pair[0], pair[1]);
            bits.get_mut(s..s.checked_add(n)?)?.iter_mut().for_each(|b| *b = true);
        }
        BitMask::new(self.h, self.w, bits).ok()
    }
}
