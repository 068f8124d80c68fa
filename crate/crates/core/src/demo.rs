//! Synthetic prototype library covering every category template.
//!
//! Each stage gets two smooth variants whose channel means sit at the stage's
//! target midpoints, so top-1 retrieval lands on the matching stage.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::composer::{compose_with, ComposeOptions};
use crate::control::{Channel, ControlSequence, ControlState};
use crate::critic::{
    RULE_BLINK_ASYMMETRY, RULE_BLINK_DURATION, RULE_COACTIVATION, RULE_GAZE_HEAD, RULE_INTER_BLINK,
    RULE_MAIN_SEQUENCE, RULE_SEMANTIC_INSTRUCTION, RULE_SEMANTIC_LABEL, RULE_SEMANTIC_ORDER,
    RULE_SEMANTIC_TARGET,
};
use crate::error::Result;
use crate::library::{build_library, PrototypeLibrary, Record};
use crate::mapper::{map_sequence, DeformationModel};
use crate::planner::{
    plan, InitialPose, Interval, Plan, PlanRequest, StageTemplate, TemplateTable,
    EXEMPT_BLINK_DURATION, STABLE_HEAD,
};

pub const DEMO_FPS: f64 = 25.0;
pub const DEMO_SEED: u64 = 0x6761_7a65;
const VARIANTS: usize = 2;
const JITTER: f64 = 0.005;

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Raised-cosine pulse of plateau width `width` centred on `u = 0.5`.
fn pulse(u: f64, width: f64) -> f64 {
    let edge = 0.1;
    let d = (u - 0.5).abs() - 0.5 * width;
    if d <= 0.0 {
        1.0
    } else if d >= edge {
        0.0
    } else {
        0.5 * (1.0 + libm::cos(PI * d / edge))
    }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Controls for one stage variant at rest pose.
pub fn stage_controls(stage: &StageTemplate, variant: usize, seed: u64) -> Result<ControlSequence> {
    let len = 20 + 4 * variant;
    let phase = 0.25 * variant as f64;
    let closure = if stage.exemptions.iter().any(|e| e == EXEMPT_BLINK_DURATION) {
        0.5
    } else {
        0.25
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(len);
    for i in 0..len {
        let u = i as f64 / (len - 1) as f64;
        let wave = libm::sin(2.0 * PI * (u + phase));
        let mut f = ControlState::zero();
        for c in Channel::ALL {
            let target = stage.targets.get(&c).copied();
            let v = if c.is_head() {
                let iv = target.unwrap_or(STABLE_HEAD);
                if iv.contains(0.0) {
                    iv.mid() + 0.5 * (iv.hi - iv.lo) * wave
                } else {
                    let (near, far) = if iv.lo.abs() < iv.hi.abs() {
                        (iv.lo, iv.hi)
                    } else {
                        (iv.hi, iv.lo)
                    };
                    near + (far - near) * smoothstep(u)
                }
            } else {
                match target {
                    Some(Interval { lo, hi }) if hi > 0.0 => {
                        let base = if matches!(c, Channel::Au43L | Channel::Au43R) && hi > 0.5 {
                            lo + (hi - lo) * pulse(u, closure)
                        } else {
                            0.5 * (lo + hi) + 0.5 * (hi - lo) * wave
                        };
                        (base + JITTER * (2.0 * unit(&mut rng) - 1.0)).clamp(0.0, 1.0)
                    }
                    _ => 0.0,
                }
            };
            f.set(c, v);
        }
        frames.push(f);
    }
    ControlSequence::new(frames, DEMO_FPS)
}

pub fn demo_records(
    templates: &TemplateTable,
    model: &DeformationModel,
    seed: u64,
) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (ci, cat) in templates.categories.iter().enumerate() {
        for (si, stage) in cat.stages.iter().enumerate() {
            for v in 0..VARIANTS {
                let s = seed ^ ((ci as u64) << 32 | (si as u64) << 16 | v as u64);
                let controls = stage_controls(stage, v, s)?;
                let (_, keypoints) = map_sequence(&controls, model)?;
                out.push(Record {
                    label: cat.label.clone(),
                    controls,
                    keypoints,
                });
            }
        }
    }
    Ok(out)
}

/// Demo library over the default templates and canonical model.
pub fn demo_library() -> Result<PrototypeLibrary> {
    build_library(demo_records(
        &TemplateTable::default(),
        &DeformationModel::canonical(),
        DEMO_SEED,
    )?)
}

/// Instructions used by the cognitive-effort half of the violation corpus.
pub const CORPUS_INSTRUCTIONS: &str = "look slightly to the left, then lower the head smoothly";

/// A composed sequence with one injected violation.
#[derive(Clone, Debug)]
pub struct InjectedCase {
    pub name: &'static str,
    pub rule: &'static str,
    pub repairable: bool,
    pub label: &'static str,
    pub instructions: Option<&'static str>,
    pub plan: Plan,
    pub sequence: ControlSequence,
}

fn base(
    label: &'static str,
    instructions: Option<&'static str>,
    lib: &PrototypeLibrary,
) -> Result<(Plan, Vec<ControlState>)> {
    let req = PlanRequest {
        label,
        total_frames: 50,
        fps: DEMO_FPS,
        instructions,
        initial_pose: InitialPose::default(),
    };
    let plan = plan(&req, &TemplateTable::default())?;
    let seq = compose_with(
        &plan,
        lib,
        &InitialPose::default(),
        &ComposeOptions::default(),
    )?
    .sequence;
    Ok((plan, seq.into_frames()))
}

fn set(frames: &mut [ControlState], range: Range<usize>, channels: &[Channel], value: f64) {
    for f in &mut frames[range] {
        for &c in channels {
            f.set(c, value);
        }
    }
}

/// Twelve single-violation cases over 50-frame compositions. Frame ranges
/// below are 0-based.
pub fn violation_corpus(lib: &PrototypeLibrary) -> Result<Vec<InjectedCase>> {
    use Channel::*;
    const SOCIAL: &str = "social_engagement";
    const EFFORT: &str = "cognitive_effort";
    let ins = Some(CORPUS_INSTRUCTIONS);
    let lids = [Au43L, Au43R];
    let mut out = Vec::new();
    let mut case = |name,
                    rule,
                    repairable,
                    label: &'static str,
                    instructions: Option<&'static str>,
                    inject: &dyn Fn(&Plan, &mut Vec<ControlState>)|
     -> Result<()> {
        let (plan, mut frames) = base(label, instructions, lib)?;
        inject(&plan, &mut frames);
        out.push(InjectedCase {
            name,
            rule,
            repairable,
            label,
            instructions,
            sequence: ControlSequence::new(frames, DEMO_FPS)?,
            plan,
        });
        Ok(())
    };
    let third = |p: &Plan| p.events[2].range().start;

    case(
        "short blink",
        RULE_BLINK_DURATION,
        true,
        SOCIAL,
        None,
        &|p, f| {
            let s = third(p) + 5;
            set(f, s..s + 2, &lids, 0.9);
        },
    )?;
    case(
        "one-sided closure",
        RULE_BLINK_ASYMMETRY,
        true,
        SOCIAL,
        None,
        &|p, f| {
            let s = third(p) + 5;
            set(f, s..s + 3, &[Au43L], 0.8);
            set(f, s..s + 3, &[Au43R], 0.0);
        },
    )?;
    case(
        "brow lower with brow raise",
        RULE_COACTIVATION,
        true,
        SOCIAL,
        None,
        &|_, f| {
            set(f, 29..34, &[Au4L, Au2L], 0.7);
        },
    )?;
    case(
        "lid raise with closure",
        RULE_COACTIVATION,
        true,
        SOCIAL,
        None,
        &|p, f| {
            let s = third(p) + 5;
            set(f, s..s + 3, &[Au5L, Au5R], 0.8);
            set(f, s..s + 3, &lids, 0.7);
        },
    )?;
    case(
        "blinks too close",
        RULE_INTER_BLINK,
        false,
        SOCIAL,
        None,
        &|p, f| {
            let s = third(p) + 2;
            set(f, s..s + 3, &lids, 0.9);
            set(f, s + 8..s + 11, &lids, 0.9);
        },
    )?;
    case(
        "gaze jump",
        RULE_MAIN_SEQUENCE,
        true,
        EFFORT,
        ins,
        &|p, f| {
            let s = third(p) + 5;
            set(f, s..s + 6, &[GazeUp], 0.4);
        },
    )?;
    case(
        "sustained gaze without head",
        RULE_GAZE_HEAD,
        true,
        EFFORT,
        ins,
        &|_, f| {
            for (t, v) in [
                (21, 0.2),
                (22, 0.4),
                (23, 0.6),
                (41, 0.6),
                (42, 0.4),
                (43, 0.2),
            ] {
                f[t].set(GazeUp, v);
            }
            set(f, 24..41, &[GazeUp], 0.7);
        },
    )?;
    case(
        "gaze target missed",
        RULE_SEMANTIC_TARGET,
        true,
        EFFORT,
        ins,
        &|_, f| {
            set(f, 6..18, &[GazeLeft], 0.05);
        },
    )?;
    case(
        "gaze against instruction",
        RULE_SEMANTIC_INSTRUCTION,
        true,
        EFFORT,
        ins,
        &|_, f| {
            set(f, 1..5, &[GazeRight], 0.08);
        },
    )?;
    case(
        "slow gaze drift",
        RULE_MAIN_SEQUENCE,
        false,
        EFFORT,
        ins,
        &|_, f| {
            for t in 19..50 {
                f[t].set(GazeUp, 0.4 * ((t - 19) as f64 / 25.0).min(1.0));
            }
        },
    )?;
    case(
        "early squint",
        RULE_SEMANTIC_ORDER,
        false,
        EFFORT,
        ins,
        &|p, f| {
            set(f, p.events[0].range(), &[Au7], 0.08);
        },
    )?;
    case(
        "brow lowering too weak",
        RULE_SEMANTIC_LABEL,
        false,
        EFFORT,
        ins,
        &|_, f| {
            for s in f.iter_mut() {
                for c in [Au4L, Au4R] {
                    s.set(c, s.get(c).min(0.08));
                }
            }
        },
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_category() {
        let lib = demo_library().unwrap();
        let t = TemplateTable::default();
        assert_eq!(
            lib.len(),
            t.categories
                .iter()
                .map(|c| c.stages.len() * VARIANTS)
                .sum::<usize>()
        );
        for c in &t.categories {
            assert!(!lib.ids_for(&c.label).is_empty(), "{}", c.label);
        }
    }

    #[test]
    fn untargeted_channels_rest() {
        let t = TemplateTable::default();
        let stage = &t.get("social_engagement").unwrap().stages[0];
        let seq = stage_controls(stage, 0, 1).unwrap();
        assert!(seq.channel(Channel::GazeLeft).iter().all(|&v| v == 0.0));
        assert!(seq.channel(Channel::Au43L).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pulse_shape() {
        assert_eq!(pulse(0.5, 0.25), 1.0);
        assert_eq!(pulse(0.0, 0.25), 0.0);
        assert!((pulse(0.675, 0.25) - 0.5).abs() < 1e-12);
    }
}
