//! Loss, optimizer, augmentation, and the iterative click-feedback training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::clicks::InteractionState;
use crate::dataset::PairSample;
use crate::error::{Error, Result};
use crate::imageops::{flip_horizontal, flip_mask, place, place_mask, resize_bilinear, resize_nearest, rot90, rot90_mask};
use crate::mask::{BitMask, MASK_THRESHOLD};
use crate::model::{Model, Segmenter};
use crate::oracle::{first_click, next_click, ClickPolicy, DEFAULT_BORDER_PROB};
use crate::params::{Ctx, ParamStore};
use crate::synth::{SynthSample, MIN_GT_AREA};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 2.0;

/// Normalized focal loss of a probability map against a mask.
pub fn nfl_loss(tape: &mut Tape, prob: Var, gt: &BitMask, gamma: f64) -> Result<Var> {
    tape.focal_ce(prob, gt.bits(), gamma, None)
}

/// [`nfl_loss`] with the normalizer held at `z` instead of recomputed.
/// At `z = nfl_normalizer(prob)` value and gradient coincide with
/// [`nfl_loss`]; finite differences of this form check that gradient.
pub fn nfl_loss_fixed(tape: &mut Tape, prob: Var, gt: &BitMask, gamma: f64, z: f64) -> Result<Var> {
    tape.focal_ce(prob, gt.bits(), gamma, Some(z))
}

/// The focal normalizer `sum((1 - p_t)^gamma)` for fixed probabilities.
pub fn nfl_normalizer(prob: &[f64], gt: &BitMask, gamma: f64) -> f64 {
    prob.iter()
        .zip(gt.bits())
        .map(|(&p, &t)| {
            let pt = if t { p } else { 1.0 - p };
            (1.0 - pt.clamp(crate::autodiff::PROB_EPS, 1.0 - crate::autodiff::PROB_EPS)).powf(gamma)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Step after which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_step: Option<usize>,
    pub lr_drop_factor: f64,
    pub max_init_clicks: usize,
    pub max_iter_clicks: usize,
    pub gamma: f64,
    pub border_prob: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 24,
            steps: 1000,
            lr_drop_step: None,
            lr_drop_factor: 10.0,
            max_init_clicks: 3,
            max_iter_clicks: 3,
            gamma: DEFAULT_GAMMA,
            border_prob: DEFAULT_BORDER_PROB,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the tiny preset: small batches, larger step size.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            steps: 1000,
            lr_drop_step: Some(750),
            ..Self::default()
        }
    }

    /// Epoch-based full-size schedule (55 epochs, drop after 50, batch 24)
    /// expressed in optimizer steps for a dataset of `dataset_len` samples.
    pub fn full(dataset_len: usize) -> Self {
        let per_epoch = dataset_len.div_ceil(24).max(1);
        Self {
            steps: 55 * per_epoch,
            lr_drop_step: Some(50 * per_epoch),
            ..Self::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_drop_step {
            Some(d) if step >= d => self.lr / self.lr_drop_factor,
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0
            && self.lr_drop_factor > 0.0
            && self.max_init_clicks > 0
            && self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.border_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Image and ground truth at the model input size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub gt: BitMask,
}

impl From<SynthSample> for TrainSample {
    fn from(s: SynthSample) -> Self {
        Self { image: s.image, gt: s.gt }
    }
}

impl From<PairSample> for TrainSample {
    fn from(s: PairSample) -> Self {
        Self { image: s.image, gt: s.gt }
    }
}

/// Synthetic training set of `n` samples at `side`.
pub fn synth_train_set(n: usize, side: usize, seed: u64) -> Vec<TrainSample> {
    crate::synth::synth_dataset(n, side, seed).into_iter().map(Into::into).collect()
}

/// Parameters of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: usize,
    pub scale: f64,
    /// Offset of the resized content's top-left corner on the output canvas.
    pub offset: (isize, isize),
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        quarter_turns: 0,
        scale: 1.0,
        offset: (0, 0),
    };

    pub fn sample<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let quarter_turns = rng.random_range(0..4);
        let scale = rng.random_range(0.75..=1.25);
        let scaled = scaled_side(side, scale);
        let span = |rng: &mut R| -> isize {
            let slack = side as i64 - scaled as i64;
            let off = if slack >= 0 {
                rng.random_range(0..=slack)
            } else {
                -rng.random_range(0..=-slack)
            };
            off as isize
        };
        let offset = (span(rng), span(rng));
        Self { flip, quarter_turns, scale, offset }
    }

    pub fn apply(&self, sample: &TrainSample) -> TrainSample {
        let side = sample.gt.height();
        let mut image = sample.image.clone();
        let mut gt = sample.gt.clone();
        if self.flip {
            image = flip_horizontal(&image);
            gt = flip_mask(&gt);
        }
        image = rot90(&image, self.quarter_turns);
        gt = rot90_mask(&gt, self.quarter_turns);
        if self.scale != 1.0 || self.offset != (0, 0) {
            let s = scaled_side(side, self.scale);
            image = place(&resize_bilinear(&image, s, s), side, side, self.offset.0, self.offset.1);
            gt = place_mask(&resize_nearest(&gt, s, s), side, side, self.offset.0, self.offset.1);
        }
        TrainSample { image, gt }
    }
}

fn scaled_side(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).max(1)
}

pub const AUGMENT_RETRIES: usize = 5;

/// Random flip, quarter-turn rotation and rescale with crop or pad.
/// Draws that shrink the mask below the minimum area are retried; after
/// [`AUGMENT_RETRIES`] failures the sample is returned unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &TrainSample, rng: &mut R) -> TrainSample {
    let side = sample.gt.height();
    for _ in 0..AUGMENT_RETRIES {
        let out = Augmentation::sample(side, rng).apply(sample);
        if out.gt.area() >= MIN_GT_AREA.min(sample.gt.area()).max(1) {
            return out;
        }
    }
    sample.clone()
}

/// Outcome of the forward/backward pass for one training sample.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub clicks: usize,
}

/// Simulates the interaction for one sample and returns the loss gradient
/// of the final round. Earlier rounds run without gradient tracking.
pub fn sample_gradients(model: &Model, sample: &TrainSample, cfg: &TrainConfig, seed: u64) -> Result<SampleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = if cfg.augment { augment(sample, &mut rng) } else { sample.clone() };
    let gt = &sample.gt;
    if gt.is_empty() {
        return Err(Error::Contract("empty ground truth".into()));
    }
    let (h, w) = gt.dims();
    let mut policy = ClickPolicy::train_mixed(cfg.border_prob, rng.random())?;
    let mut state = InteractionState::new();
    state.push(first_click(gt)?, h, w)?;
    let n_init = rng.random_range(1..=cfg.max_init_clicks);
    let empty = BitMask::empty(h, w);
    for _ in 1..n_init {
        if let Some(c) = next_click(&empty, gt, &mut policy)? {
            state.push(c, h, w)?;
        }
    }
    let rounds = rng.random_range(0..=cfg.max_iter_clicks);
    for _ in 0..rounds {
        let prob = model.predict(&sample.image, &state)?;
        let pred = BitMask::binarize(&prob, MASK_THRESHOLD)?;
        let click = next_click(&pred, gt, &mut policy)?;
        state.set_prev_mask(Some(pred));
        match click {
            Some(c) => state.push(c, h, w)?,
            None => break,
        }
    }
    let mut ctx = Ctx::new(&model.params, true);
    if model.config().dropout > 0.0 {
        ctx = ctx.with_dropout(model.config().dropout, ChaCha8Rng::seed_from_u64(rng.random()));
    }
    let prob = model.net.forward_state(&mut ctx, &sample.image, &state)?;
    let loss = nfl_loss(&mut ctx.tape, prob, gt, cfg.gamma)?;
    ctx.tape.backward(loss)?;
    Ok(SampleResult {
        loss: ctx.tape.value(loss).item(),
        grads: ctx.param_grads(),
        clicks: state.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub clicks_used: usize,
}

/// Batch-mean loss and gradient over `batch`, then one Adam update.
/// Per-sample seeds are drawn from `rng` in batch order, so the result does
/// not depend on thread scheduling.
pub fn train_step<R: Rng + ?Sized>(
    batch: &[&TrainSample],
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepLog> {
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let shared: &Model = model;
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .zip(seeds)
        .map(|(s, seed)| sample_gradients(shared, s, cfg, seed))
        .collect();
    let mut grads = model.params.zeros_like();
    let (mut loss, mut clicks, mut used, mut skipped) = (0.0, 0, 0usize, 0usize);
    for r in results {
        match r {
            Ok(r) => {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                loss += r.loss;
                clicks += r.clicks;
                used += 1;
            }
            Err(Error::Contract(msg)) => {
                skipped += 1;
                log::warn!("skipping sample: {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Contract(format!("all {skipped} samples in the batch were skipped")));
    }
    let inv = 1.0 / used as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= inv);
    let lr = cfg.lr_at(step);
    adam_step(&mut model.params, &grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps);
    Ok(StepLog {
        step,
        loss: loss * inv,
        lr,
        clicks_used: clicks,
    })
}

/// Deterministic training loop state: the RNG for step `k` depends only on
/// the seed and `k`, so a run resumed from a checkpoint at step `k` replays
/// the uninterrupted run exactly.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub step: usize,
    pub data: Vec<TrainSample>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, data: Vec<TrainSample>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let adam = AdamState::new(&model.params);
        Ok(Self { model, adam, cfg, step: 0, data })
    }

    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64);
        rng
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let mut rng = self.step_rng();
        let n = self.data.len();
        let k = self.cfg.batch_size.min(n);
        let idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &self.data[i]).collect();
        let log = train_step(&batch, &mut self.model, &mut self.adam, &self.cfg, self.step, &mut rng)?;
        self.step += 1;
        Ok(log)
    }
}
