//! Retrieval-based composition of a plan into an initial control sequence.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::control::{
    resample_sequence, Channel, ControlSequence, ControlState, HeadLimits, CHANNEL_COUNT,
};
use crate::error::{Error, Result};
use crate::library::{query_with_limits, PrototypeLibrary, RetrievalWeights};
use crate::planner::{InitialPose, Interval, Plan, StagedEvent};

pub const DEFAULT_BLEND_FRAMES: usize = 3;

/// One event's trimmed and rescaled prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub controls: ControlSequence,
    pub source_prototype: usize,
    pub event_index: usize,
}

/// How a prototype is picked from the ranked candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Top1,
    /// Uniform choice among the best `k`, driven by a seeded stream.
    RandomTopK {
        k: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposeOptions {
    pub weights: [f64; CHANNEL_COUNT],
    pub blend_frames: usize,
    pub selection: Selection,
    pub limits: HeadLimits,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            weights: RetrievalWeights::default().0,
            blend_frames: DEFAULT_BLEND_FRAMES,
            selection: Selection::Top1,
            limits: HeadLimits::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composition {
    pub sequence: ControlSequence,
    pub segments: Vec<Segment>,
}

/// Retrieval target for an event: interval midpoints, with head targets
/// expressed relative to the initial pose because prototypes store head
/// motion rest-relative. Untargeted unit channels ask for rest.
pub fn event_query(event: &StagedEvent, pose: &InitialPose) -> [f64; CHANNEL_COUNT] {
    let mut q = [0.0; CHANNEL_COUNT];
    for c in Channel::ALL {
        if let Some(iv) = event.target(c) {
            q[c.index()] = iv.mid() - pose.get(c);
        }
    }
    q
}

/// Affinely maps each targeted channel's `[min, max]` onto its interval.
/// Constant channels land on the interval midpoint.
pub fn rescale_amplitude(segment: &Segment, targets: &BTreeMap<Channel, Interval>) -> Segment {
    let mut frames = segment.controls.frames().to_vec();
    for (&c, iv) in targets {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for f in &frames {
            let v = f.get(c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for f in frames.iter_mut() {
            let v = if span > 0.0 {
                let u = (f.get(c) - lo) / span;
                (iv.lo + u * (iv.hi - iv.lo)).clamp(iv.lo, iv.hi)
            } else {
                iv.mid()
            };
            f.set(c, v);
        }
    }
    Segment {
        controls: ControlSequence::new(frames, segment.controls.fps()).expect("non-empty segment"),
        source_prototype: segment.source_prototype,
        event_index: segment.event_index,
    }
}

/// Appends `next` to `out`, cross-fading its first frames from the current
/// last frame of `out`.
pub fn stitch(out: &mut Vec<ControlState>, next: &[ControlState], blend_frames: usize) {
    let Some(&last) = out.last() else {
        out.extend_from_slice(next);
        return;
    };
    let n = blend_frames.min(next.len().saturating_sub(1));
    let a = last.to_array();
    for (k, f) in next.iter().enumerate() {
        if k < n {
            let w = (k + 1) as f64 / (n + 1) as f64;
            let b = f.to_array();
            let mut v = [0.0; CHANNEL_COUNT];
            for j in 0..CHANNEL_COUNT {
                v[j] = (1.0 - w) * a[j] + w * b[j];
            }
            out.push(ControlState::from_array(&v));
        } else {
            out.push(*f);
        }
    }
}

/// Overwrites frame 0's head pose with `pose` and fades into the sequence.
pub fn pin_initial_pose(frames: &mut [ControlState], pose: &InitialPose, blend_frames: usize) {
    if frames.is_empty() {
        return;
    }
    let init = pose.as_array();
    let n = blend_frames.min(frames.len() - 1);
    frames[0].head = init;
    for k in 1..=n {
        let w = k as f64 / (n + 1) as f64;
        for j in 0..3 {
            frames[k].head[j] = (1.0 - w) * init[j] + w * frames[k].head[j];
        }
    }
}

pub fn compose(
    plan: &Plan,
    lib: &PrototypeLibrary,
    weights: &[f64; CHANNEL_COUNT],
    initial_pose: &InitialPose,
    blend_frames: usize,
) -> Result<ControlSequence> {
    let opts = ComposeOptions {
        weights: *weights,
        blend_frames,
        ..Default::default()
    };
    Ok(compose_with(plan, lib, initial_pose, &opts)?.sequence)
}

pub fn compose_with(
    plan: &Plan,
    lib: &PrototypeLibrary,
    pose: &InitialPose,
    opts: &ComposeOptions,
) -> Result<Composition> {
    if lib.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if plan.events.is_empty() {
        return Err(Error::InvalidPlan("no events".into()));
    }
    let filter = if lib.ids_for(&plan.label).is_empty() {
        None
    } else {
        Some(plan.label.as_str())
    };
    let mut rng = match opts.selection {
        Selection::RandomTopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Selection::Top1 => None,
    };

    let mut segments = Vec::with_capacity(plan.events.len());
    let mut frames: Vec<ControlState> = Vec::with_capacity(plan.total_frames);
    for (i, event) in plan.events.iter().enumerate() {
        let q = event_query(event, pose);
        let k = match opts.selection {
            Selection::Top1 => 1,
            Selection::RandomTopK { k, .. } => k.max(1),
        };
        let hits = query_with_limits(lib, &q, &opts.weights, filter, k, &opts.limits);
        let pick = match rng.as_mut() {
            Some(r) if hits.len() > 1 => (r.next_u64() % hits.len() as u64) as usize,
            _ => 0,
        };
        let id = hits.get(pick).ok_or(Error::EmptyLibrary)?.0;
        let resampled = resample_sequence(&lib.prototypes[id].controls, event.len())?;
        let raw = Segment {
            controls: ControlSequence::new(resampled.into_frames(), plan.fps)?,
            source_prototype: id,
            event_index: i,
        };
        let seg = rescale_amplitude(&raw, &event.channel_targets);
        stitch(&mut frames, seg.controls.frames(), opts.blend_frames);
        segments.push(seg);
    }
    pin_initial_pose(&mut frames, pose, opts.blend_frames);
    for f in frames.iter_mut() {
        *f = f.project_valid(&opts.limits);
    }
    Ok(Composition {
        sequence: ControlSequence::new(frames, plan.fps)?,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{build_library, Record};
    use crate::mapper::{map_sequence, DeformationModel};
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn seg(values: &[f64], c: Channel) -> Segment {
        let frames = values
            .iter()
            .map(|&v| ControlState::zero().with(c, v))
            .collect();
        Segment {
            controls: ControlSequence::new(frames, 25.0).unwrap(),
            source_prototype: 0,
            event_index: 0,
        }
    }

    fn targets(c: Channel, lo: f64, hi: f64) -> BTreeMap<Channel, Interval> {
        BTreeMap::from([(c, Interval::new(lo, hi))])
    }

    #[test]
    fn rescale_affine_and_constant() {
        let out = rescale_amplitude(
            &seg(&[0.0, 0.5, 1.0], Channel::Au5L),
            &targets(Channel::Au5L, 0.15, 0.35),
        );
        let v = out.controls.channel(Channel::Au5L);
        assert!(
            (v[0] - 0.15).abs() < 1e-15
                && (v[1] - 0.25).abs() < 1e-15
                && (v[2] - 0.35).abs() < 1e-15
        );
        let out = rescale_amplitude(
            &seg(&[0.7, 0.7], Channel::Au1),
            &targets(Channel::Au1, 0.2, 0.4),
        );
        assert!(out
            .controls
            .channel(Channel::Au1)
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
        let s = seg(&[0.1, 0.3, 0.2], Channel::Au7);
        assert_eq!(rescale_amplitude(&s, &targets(Channel::Au7, 0.1, 0.3)), s);
    }

    #[test]
    fn cross_fade_values() {
        let mut out = vec![ControlState::zero(); 3];
        let next = vec![ControlState::zero().with(Channel::Au1, 1.0); 6];
        stitch(&mut out, &next, 4);
        let v: Vec<f64> = out.iter().map(|f| f.get(Channel::Au1)).collect();
        let expect = [0.0, 0.0, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn lib_of(seqs: Vec<(&str, ControlSequence)>) -> PrototypeLibrary {
        let model = DeformationModel::canonical();
        build_library(
            seqs.into_iter()
                .map(|(l, c)| {
                    let (_, k) = map_sequence(&c, &model).unwrap();
                    Record {
                        label: l.into(),
                        controls: c,
                        keypoints: k,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    fn event(start: usize, end: usize, t: BTreeMap<Channel, Interval>) -> StagedEvent {
        StagedEvent {
            start_frame: start,
            end_frame: end,
            semantics: "e".into(),
            channel_targets: t,
            exemptions: BTreeSet::new(),
        }
    }

    #[test]
    fn single_event_reproduces_prototype() {
        let frames: Vec<ControlState> = (0..8)
            .map(|i| {
                ControlState::zero()
                    .with(Channel::Au1, 0.1 * i as f64)
                    .with(Channel::Au7, 0.3)
            })
            .collect();
        let proto = ControlSequence::new(frames, 25.0).unwrap();
        let lib = lib_of(vec![("x", proto.clone())]);
        let summary = lib.prototypes[0].summary;
        let mut t = BTreeMap::new();
        for c in [Channel::Au1, Channel::Au7] {
            t.insert(
                c,
                Interval::new(summary.min[c.index()], summary.max[c.index()]),
            );
        }
        let plan = Plan {
            label: "x".into(),
            events: vec![event(1, 12, t)],
            total_frames: 12,
            fps: 25.0,
        };
        let out = compose(
            &plan,
            &lib,
            &RetrievalWeights::default().0,
            &InitialPose::default(),
            0,
        )
        .unwrap();
        let expect = resample_sequence(&proto, 12).unwrap();
        for (a, b) in out.frames().iter().zip(expect.frames()) {
            for j in 0..CHANNEL_COUNT {
                assert!((a.to_array()[j] - b.to_array()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_library_is_an_error() {
        let plan = Plan {
            label: "x".into(),
            events: vec![event(1, 3, BTreeMap::new())],
            total_frames: 3,
            fps: 25.0,
        };
        let err = compose(
            &plan,
            &PrototypeLibrary::default(),
            &[1.0; CHANNEL_COUNT],
            &InitialPose::default(),
            3,
        )
        .unwrap_err();
        assert_eq!(alloc::format!("{err}"), "no prototypes available");
    }

    #[test]
    fn first_frame_head_is_pinned() {
        let proto =
            ControlSequence::constant(ControlState::zero().with(Channel::Yaw, 10.0), 5, 25.0)
                .unwrap();
        let lib = lib_of(vec![("y", proto)]);
        let plan = Plan {
            label: "other".into(),
            events: vec![event(1, 10, BTreeMap::new())],
            total_frames: 10,
            fps: 25.0,
        };
        let pose = InitialPose::new(-7.5, 3.25, 1.0);
        let out = compose(&plan, &lib, &[1.0; CHANNEL_COUNT], &pose, 3).unwrap();
        assert_eq!(out.frames()[0].head, [-7.5, 3.25, 1.0]);
        assert_eq!(out.len(), 10);
        assert_eq!(out.frames()[9].head[0], 10.0);
    }
}
