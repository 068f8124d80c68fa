//! Trace-level evaluation: activation F1, DTW-based temporal fidelity and
//! normalized landmark distance.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::control::{Channel, ControlSequence, AU_COUNT};
use crate::error::{Error, Result};
use crate::mapper::KeypointSequence;
use crate::planner::TemplateTable;

pub const DEFAULT_TAU: f64 = 0.1;

/// Per-AU intensity trajectories in roster order.
#[derive(Clone, Debug, PartialEq)]
pub struct AuTrace {
    pub channels: Vec<Vec<f64>>,
}

impl AuTrace {
    pub fn from_controls(seq: &ControlSequence) -> Self {
        Self {
            channels: Channel::AUS.iter().map(|&c| seq.channel(c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct MetricConfig {
    pub tau: [f64; AU_COUNT],
    pub target_sets: BTreeMap<String, Vec<Channel>>,
    /// Per-AU normalizers; `None` uses the ground-truth length.
    pub z: Option<[f64; AU_COUNT]>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::from_templates(&TemplateTable::default())
    }
}

impl MetricConfig {
    /// Target sets are the AUs each category requires or drives above zero.
    pub fn from_templates(templates: &TemplateTable) -> Self {
        let mut target_sets = BTreeMap::new();
        for cat in &templates.categories {
            let mut set: Vec<Channel> = cat
                .stages
                .iter()
                .flat_map(|s| {
                    s.targets
                        .iter()
                        .filter(|(c, iv)| !c.is_head() && c.index() < AU_COUNT && iv.lo > 0.0)
                        .map(|(c, _)| *c)
                })
                .chain(
                    cat.required
                        .iter()
                        .copied()
                        .filter(|c| c.index() < AU_COUNT),
                )
                .collect();
            set.sort_unstable();
            set.dedup();
            target_sets.insert(cat.label.clone(), set);
        }
        Self {
            tau: [DEFAULT_TAU; AU_COUNT],
            target_sets,
            z: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.iter().all(|t| *t > 0.0 && *t < 1.0) {
            return Err(Error::InvalidParams("tau must lie in (0, 1)".into()));
        }
        if let Some(z) = &self.z {
            if !z.iter().all(|v| *v > 0.0) {
                return Err(Error::InvalidParams("normalizers must be positive".into()));
            }
        }
        if self
            .target_sets
            .values()
            .flatten()
            .any(|c| c.index() >= AU_COUNT)
        {
            return Err(Error::InvalidParams(
                "target sets may only name AU channels".into(),
            ));
        }
        Ok(())
    }
}

/// Minimal-cost monotone alignment under `|a_i − b_j|` with unit steps.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct F1Score {
    #[cfg_attr(feature = "serde", serde(rename = "P"))]
    pub precision: f64,
    #[cfg_attr(feature = "serde", serde(rename = "R"))]
    pub recall: f64,
    #[cfg_attr(feature = "serde", serde(rename = "F1"))]
    pub f1: f64,
}

fn active(trace: &[f64], tau: f64) -> bool {
    trace.iter().any(|&v| v > tau)
}

/// F1 over thresholded per-AU maxima for any roster.
pub fn f1_over(pred: &[Vec<f64>], gt: &[Vec<f64>], tau: &[f64]) -> Result<F1Score> {
    if pred.len() != gt.len() || tau.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for ((p, g), &t) in pred.iter().zip(gt).zip(tau) {
        let (ap, ag) = (active(p, t), active(g, t));
        tp += (ap && ag) as usize;
        np += ap as usize;
        ng += ag as usize;
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        precision,
        recall,
        f1,
    })
}

fn paired(pred: &AuTrace, gt: &AuTrace) -> Result<()> {
    if pred.channels.len() != AU_COUNT || gt.channels.len() != AU_COUNT {
        return Err(Error::ShapeMismatch {
            expected: AU_COUNT,
            found: pred.channels.len().min(gt.channels.len()),
        });
    }
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    Ok(())
}

pub fn au_f1(pred: &AuTrace, gt: &AuTrace, cfg: &MetricConfig) -> Result<F1Score> {
    paired(pred, gt)?;
    f1_over(&pred.channels, &gt.channels, &cfg.tau)
}

/// `1 − mean DTW/Z` over the category's target AUs, without clamping.
pub fn au_temp_raw(
    pred: &AuTrace,
    gt: &AuTrace,
    category: &str,
    cfg: &MetricConfig,
) -> Result<f64> {
    paired(pred, gt)?;
    let set = cfg
        .target_sets
        .get(category)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
    if set.is_empty() {
        return Err(Error::InvalidParams("empty target AU set".into()));
    }
    let mut deficit = 0.0;
    for c in set {
        let u = c.index();
        let z = cfg.z.map_or(gt.len() as f64, |z| z[u]);
        deficit += dtw(&pred.channels[u], &gt.channels[u])? / z;
    }
    Ok(1.0 - deficit / set.len() as f64)
}

/// [`au_temp_raw`] clamped below at zero.
pub fn au_temp(pred: &AuTrace, gt: &AuTrace, category: &str, cfg: &MetricConfig) -> Result<f64> {
    Ok(au_temp_raw(pred, gt, category, cfg)?.max(0.0))
}

/// Mean point distance, each frame normalized by its ground-truth inter-pupil distance.
pub fn eye_lmd(pred: &KeypointSequence, gt: &KeypointSequence) -> Result<f64> {
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.frames.len(),
            found: pred.frames.len(),
        });
    }
    if gt.frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        let ipd = g.inter_pupil_distance();
        if !(ipd > 0.0) {
            return Err(Error::DegenerateFrame { frame: i });
        }
        for (a, b) in p.points.iter().zip(&g.points) {
            total += libm::hypot(a[0] - b[0], a[1] - b[1]) / ipd;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
