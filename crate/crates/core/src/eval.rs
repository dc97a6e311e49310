//! Click-simulation evaluation: IoU, NoC, NoF and mean-IoU curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicks::{Click, InteractionState};
use crate::error::{Error, Result};
use crate::mask::{BitMask, MASK_THRESHOLD};
use crate::model::Segmenter;
use crate::oracle::{first_click, next_click, ClickPolicy};
use crate::tensor::Tensor;

pub const MAX_CLICKS: usize = 20;
pub const THRESHOLDS: [f64; 2] = [0.85, 0.90];

/// `|a ∩ b| / |a ∪ b|`, 1.0 when both are empty.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    a.check_same_dims(b)?;
    let union = a.count_or(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.count_and(b) as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    /// `ious[k]` is the IoU after `k + 1` clicks.
    pub ious: Vec<f64>,
    pub clicks: Vec<Click>,
}

impl EvalRecord {
    /// Clicks needed to reach `threshold`, or `None` within the recorded clicks.
    pub fn clicks_to(&self, threshold: f64) -> Option<usize> {
        self.ious.iter().position(|&v| v >= threshold).map(|k| k + 1)
    }
}

/// Simulated interaction on one instance with the deterministic protocol:
/// first click at the object center, then one click per round in the
/// largest error region, stopping at `cap` clicks or once the IoU reaches
/// the largest threshold.
pub fn evaluate_instance<S: Segmenter + ?Sized>(
    seg: &S,
    id: impl Into<String>,
    image: &Tensor,
    gt: &BitMask,
    cap: usize,
    thresholds: &[f64],
) -> Result<EvalRecord> {
    if gt.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty ground truth".into()));
    }
    if cap == 0 {
        return Err(Error::Contract("click cap must be at least 1".into()));
    }
    let stop_at = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (h, w) = gt.dims();
    let mut policy = ClickPolicy::EvalDeterministic;
    let mut state = InteractionState::new();
    let mut pred = BitMask::empty(h, w);
    let mut ious = Vec::new();
    for k in 0..cap {
        let click = if k == 0 {
            Some(first_click(gt)?)
        } else {
            next_click(&pred, gt, &mut policy)?
        };
        // A perfect mask leaves no error region; the IoU then stays put.
        let Some(click) = click else {
            break;
        };
        state.push(click, h, w)?;
        let prob = seg.predict(image, &state)?;
        pred = BitMask::binarize(&prob, MASK_THRESHOLD)?;
        let v = iou(&pred, gt)?;
        ious.push(v);
        state.set_prev_mask(Some(pred.clone()));
        if v >= stop_at {
            break;
        }
    }
    Ok(EvalRecord {
        instance_id: id.into(),
        ious,
        clicks: state.clicks().to_vec(),
    })
}

fn check_nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Contract("no evaluation records".into()))
    } else {
        Ok(())
    }
}

/// Mean clicks to reach `threshold`; instances that never reach it count as the cap.
pub fn noc(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    check_nonempty(records)?;
    let total: usize = records
        .iter()
        .map(|r| r.clicks_to(threshold).unwrap_or(MAX_CLICKS))
        .sum();
    Ok(total as f64 / records.len() as f64)
}

pub fn nof(records: &[EvalRecord], threshold: f64) -> Result<usize> {
    check_nonempty(records)?;
    Ok(records.iter().filter(|r| r.clicks_to(threshold).is_none()).count())
}

/// Mean IoU per click count `1..=cap`. Instances that stopped early carry
/// their last IoU forward.
pub fn miou_curve(records: &[EvalRecord], cap: usize) -> Vec<f64> {
    if records.is_empty() {
        return vec![0.0; cap];
    }
    (0..cap)
        .map(|k| {
            let sum: f64 = records
                .iter()
                .map(|r| r.ious.get(k).or(r.ious.last()).copied().unwrap_or(0.0))
                .sum();
            sum / records.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub noc85: f64,
    pub noc90: f64,
    pub nof85: usize,
    pub nof90: usize,
    pub miou_curve: Vec<f64>,
    pub n_instances: usize,
}

pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    Ok(EvalSummary {
        noc85: noc(records, 0.85)?,
        noc90: noc(records, 0.90)?,
        nof85: nof(records, 0.85)?,
        nof90: nof(records, 0.90)?,
        miou_curve: miou_curve(records, MAX_CLICKS),
        n_instances: records.len(),
    })
}

impl EvalSummary {
    /// One row in the layout `NoC@85 NoC@90 NoF@85 NoF@90`.
    pub fn table_row(&self) -> String {
        format!(
            "| NoC@85 {:>6.2} | NoC@90 {:>6.2} | NoF@85 {:>4} | NoF@90 {:>4} |",
            self.noc85, self.noc90, self.nof85, self.nof90
        )
    }
}

/// Per-instance CSV: id, clicks to 85 and 90 (empty when never reached),
/// then the IoU after each recorded click.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("instance_id,noc85,noc90,n_clicks,ious\n");
    for r in records {
        let fmt = |t: f64| r.clicks_to(t).map(|n| n.to_string()).unwrap_or_default();
        let ious: Vec<String> = r.ious.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.instance_id,
            fmt(0.85),
            fmt(0.90),
            r.ious.len(),
            ious.join(";")
        ));
    }
    out
}

/// One evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub image: Tensor,
    pub gt: BitMask,
}

/// Evaluates every instance in parallel; `make` builds the segmenter for
/// an instance (stubs need the ground truth, a real model ignores it).
/// Records come back in input order.
pub fn evaluate_all<S, F>(instances: &[Instance], make: F, cap: usize, thresholds: &[f64]) -> Result<Vec<EvalRecord>>
where
    S: Segmenter,
    F: Fn(&Instance) -> S + Sync,
{
    instances
        .par_iter()
        .map(|inst| evaluate_instance(&make(inst), inst.id.clone(), &inst.image, &inst.gt, cap, thresholds))
        .collect()
}
