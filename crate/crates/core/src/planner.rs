//! Staged-event planning: category templates, stage splitting and keyword
//! instructions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::control::{Channel, HeadLimits, ValidationReport};
use crate::error::{Error, Result};

pub const RULE_PLAN_EMPTY: &str = "plan_empty";
pub const RULE_PLAN_BOUNDS: &str = "plan_bounds";
pub const RULE_PLAN_GAP: &str = "plan_gap";
pub const RULE_PLAN_OVERLAP: &str = "plan_overlap";
pub const RULE_PLAN_COVERAGE: &str = "plan_coverage";
pub const RULE_PLAN_TARGET: &str = "plan_target";

/// Exemption id that lifts the blink-duration cap to the prolonged limit.
pub const EXEMPT_BLINK_DURATION: &str = "blink_duration";

/// Closed target interval for one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(from = "[f64; 2]", into = "[f64; 2]")
)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    pub fn shifted(&self, by: f64) -> Interval {
        Interval::new(self.lo + by, self.hi + by)
    }

    pub fn negated(&self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(v: Interval) -> Self {
        [v.lo, v.hi]
    }
}

/// Rest head pose estimated from the reference portrait, in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default)
)]
pub struct InitialPose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl InitialPose {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Yaw => self.yaw,
            Channel::Pitch => self.pitch,
            Channel::Roll => self.roll,
            _ => 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn is_within(&self, limits: &HeadLimits) -> bool {
        Channel::HEAD.iter().all(|&c| {
            let (lo, hi) = limits.range(c);
            let v = self.get(c);
            v.is_finite() && lo <= v && v <= hi
        })
    }
}

/// One contiguous span of the plan, frames 1-based and inclusive.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StagedEvent {
    pub start_frame: usize,
    pub end_frame: usize,
    pub semantics: String,
    pub channel_targets: BTreeMap<Channel, Interval>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub exemptions: BTreeSet<String>,
}

impl StagedEvent {
    pub fn len(&self) -> usize {
        self.end_frame + 1 - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame < self.start_frame
    }

    /// 0-based half-open frame range.
    pub fn range(&self) -> core::ops::Range<usize> {
        self.start_frame - 1..self.end_frame
    }

    pub fn target(&self, channel: Channel) -> Option<Interval> {
        self.channel_targets.get(&channel).copied()
    }

    pub fn is_exempt(&self, rule: &str) -> bool {
        self.exemptions.contains(rule)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Plan {
    pub label: String,
    pub fps: f64,
    pub total_frames: usize,
    pub events: Vec<StagedEvent>,
}

impl Plan {
    /// Index of the event covering 0-based frame `t`.
    pub fn event_at(&self, t: usize) -> Option<usize> {
        self.events.iter().position(|e| e.range().contains(&t))
    }
}

/// One stage of a category template. Head targets are offsets from the
/// initial pose; AU and gaze targets are absolute.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageTemplate {
    pub semantics: String,
    pub ratio: f64,
    pub targets: BTreeMap<Channel, Interval>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub exemptions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryTemplate {
    pub label: String,
    pub stages: Vec<StageTemplate>,
    /// Channels that must be visibly active somewhere for the label to read.
    pub required: Vec<Channel>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemplateTable {
    pub categories: Vec<CategoryTemplate>,
}

/// Head offsets applied to stages that leave the head alone.
pub const STABLE_HEAD: Interval = Interval::new(-1.0, 1.0);

fn stage(semantics: &str, ratio: f64, targets: &[(&[Channel], [f64; 2])]) -> StageTemplate {
    let mut map = BTreeMap::new();
    for (channels, iv) in targets {
        for &c in channels.iter() {
            map.insert(c, Interval::from(*iv));
        }
    }
    StageTemplate {
        semantics: semantics.into(),
        ratio,
        targets: map,
        exemptions: Vec::new(),
    }
}

fn exempt(mut s: StageTemplate, rule: &str) -> StageTemplate {
    s.exemptions.push(rule.into());
    s
}

use Channel::*;

const AU2: &[Channel] = &[Au2L, Au2R];
const AU4: &[Channel] = &[Au4L, Au4R];
const AU5: &[Channel] = &[Au5L, Au5R];
const AU43: &[Channel] = &[Au43L, Au43R];
const GAZE_ALL: &[Channel] = &[GazeLeft, GazeRight, GazeUp, GazeDown];

impl Default for TemplateTable {
    fn default() -> Self {
        let cat =
            |label: &str, stages: Vec<StageTemplate>, required: &[Channel]| CategoryTemplate {
                label: label.into(),
                stages,
                required: required.to_vec(),
            };
        let categories = vec![
            cat(
                "sadness",
                vec![
                    stage(
                        "inner brow raise onset",
                        0.25,
                        &[(&[Au1], [0.2, 0.4]), (AU4, [0.05, 0.15])],
                    ),
                    stage(
                        "downcast gaze with lid droop",
                        0.35,
                        &[
                            (&[Au1], [0.3, 0.5]),
                            (AU4, [0.1, 0.2]),
                            (AU43, [0.2, 0.35]),
                            (&[GazeDown], [0.15, 0.3]),
                        ],
                    ),
                    stage(
                        "head lowers while sadness is held",
                        0.40,
                        &[
                            (&[Au1], [0.25, 0.45]),
                            (AU43, [0.2, 0.35]),
                            (&[GazeDown], [0.2, 0.35]),
                            (&[Pitch], [-10.0, -4.0]),
                        ],
                    ),
                ],
                &[Au1, Au43L, Au43R, GazeDown],
            ),
            cat(
                "fear",
                vec![
                    stage(
                        "startle onset",
                        0.2,
                        &[(AU5, [0.4, 0.6]), (&[Au1], [0.3, 0.5]), (AU2, [0.2, 0.4])],
                    ),
                    stage(
                        "wide-eyed scanning",
                        0.4,
                        &[
                            (AU5, [0.5, 0.7]),
                            (&[Au1], [0.4, 0.6]),
                            (AU2, [0.3, 0.5]),
                            (AU4, [0.1, 0.2]),
                            (&[GazeRight], [0.15, 0.3]),
                        ],
                    ),
                    stage(
                        "withdrawal",
                        0.4,
                        &[
                            (AU5, [0.3, 0.5]),
                            (&[Au1], [0.3, 0.5]),
                            (&[GazeRight], [0.12, 0.25]),
                            (&[Yaw], [-8.0, -3.0]),
                        ],
                    ),
                ],
                &[Au1, Au2L, Au2R, Au5L, Au5R],
            ),
            cat(
                "disgust",
                vec![
                    stage(
                        "brow lowering onset",
                        0.25,
                        &[(AU4, [0.2, 0.35]), (&[Au7], [0.1, 0.2])],
                    ),
                    stage(
                        "squint with averted gaze",
                        0.4,
                        &[
                            (AU4, [0.3, 0.5]),
                            (&[Au7], [0.3, 0.5]),
                            (&[GazeLeft], [0.15, 0.3]),
                            (&[Yaw], [3.0, 8.0]),
                        ],
                    ),
                    stage(
                        "sustained aversion",
                        0.35,
                        &[
                            (AU4, [0.25, 0.4]),
                            (&[Au7], [0.2, 0.35]),
                            (&[GazeLeft], [0.12, 0.25]),
                            (&[Yaw], [4.0, 10.0]),
                        ],
                    ),
                ],
                &[Au4L, Au4R, Au7],
            ),
            cat(
                "contempt",
                vec![
                    stage("unilateral brow raise", 0.3, &[(&[Au2R], [0.2, 0.35])]),
                    stage(
                        "sideways glance",
                        0.35,
                        &[
                            (&[Au2R], [0.25, 0.45]),
                            (&[Au7], [0.1, 0.2]),
                            (&[GazeRight], [0.15, 0.3]),
                            (&[Roll], [2.0, 6.0]),
                        ],
                    ),
                    stage(
                        "tilted hold",
                        0.35,
                        &[
                            (&[Au2R], [0.2, 0.35]),
                            (&[Au7], [0.1, 0.2]),
                            (&[Roll], [3.0, 8.0]),
                            (&[Pitch], [1.0, 5.0]),
                        ],
                    ),
                ],
                &[Au2R, Au7],
            ),
            cat(
                "anger",
                vec![
                    stage(
                        "brow lowering",
                        0.25,
                        &[(AU4, [0.3, 0.5]), (&[Au7], [0.1, 0.2])],
                    ),
                    stage(
                        "glare",
                        0.4,
                        &[(AU4, [0.5, 0.7]), (&[Au7], [0.3, 0.5]), (AU5, [0.2, 0.35])],
                    ),
                    stage(
                        "sustained glare with chin down",
                        0.35,
                        &[
                            (AU4, [0.4, 0.6]),
                            (&[Au7], [0.25, 0.4]),
                            (&[Pitch], [-6.0, -2.0]),
                        ],
                    ),
                ],
                &[Au4L, Au4R, Au7],
            ),
            cat(
                "surprise",
                vec![
                    stage(
                        "brow raise onset",
                        0.2,
                        &[(&[Au1], [0.3, 0.5]), (AU2, [0.3, 0.5]), (AU5, [0.2, 0.4])],
                    ),
                    stage(
                        "peak widening",
                        0.3,
                        &[
                            (&[Au1], [0.6, 0.85]),
                            (AU2, [0.6, 0.85]),
                            (AU5, [0.5, 0.75]),
                            (&[Pitch], [2.0, 6.0]),
                        ],
                    ),
                    stage(
                        "relaxation",
                        0.5,
                        &[
                            (&[Au1], [0.2, 0.35]),
                            (AU2, [0.2, 0.35]),
                            (AU5, [0.1, 0.25]),
                            (&[Pitch], [0.0, 3.0]),
                        ],
                    ),
                ],
                &[Au1, Au2L, Au2R, Au5L, Au5R],
            ),
            cat(
                "laughter",
                vec![
                    stage(
                        "cheek raise onset",
                        0.25,
                        &[(&[Au7], [0.2, 0.35]), (AU43, [0.1, 0.2])],
                    ),
                    stage(
                        "laughing squint",
                        0.45,
                        &[
                            (&[Au7], [0.4, 0.6]),
                            (AU43, [0.3, 0.45]),
                            (&[Au1], [0.05, 0.15]),
                            (&[Pitch], [3.0, 8.0]),
                        ],
                    ),
                    stage(
                        "recovery",
                        0.3,
                        &[
                            (&[Au7], [0.2, 0.35]),
                            (AU43, [0.1, 0.2]),
                            (&[Pitch], [0.0, 3.0]),
                        ],
                    ),
                ],
                &[Au7, Au43L, Au43R],
            ),
            cat(
                "cognitive_effort",
                vec![
                    stage(
                        "attentive onset",
                        0.12,
                        &[(AU5, [0.15, 0.35]), (GAZE_ALL, [0.0, 0.0])],
                    ),
                    stage(
                        "gaze shifts left with a mild squint",
                        0.24,
                        &[
                            (AU4, [0.10, 0.20]),
                            (&[Au7], [0.12, 0.25]),
                            (&[GazeLeft], [0.15, 0.30]),
                            (&[GazeUp], [0.10, 0.25]),
                        ],
                    ),
                    stage(
                        "head lowers slightly while maintaining the squint",
                        0.64,
                        &[
                            (AU4, [0.05, 0.12]),
                            (&[Au7], [0.08, 0.18]),
                            (&[GazeLeft], [0.25, 0.50]),
                            (&[Pitch], [-12.0, -5.0]),
                        ],
                    ),
                ],
                &[Au4L, Au4R, Au7],
            ),
            cat(
                "low_arousal_negative",
                vec![
                    stage(
                        "lid droop onset",
                        0.3,
                        &[(AU43, [0.2, 0.35]), (AU4, [0.05, 0.15])],
                    ),
                    stage(
                        "averted downward gaze",
                        0.35,
                        &[
                            (AU43, [0.25, 0.4]),
                            (&[GazeDown], [0.15, 0.3]),
                            (&[Au1], [0.1, 0.2]),
                        ],
                    ),
                    stage(
                        "slow head drop",
                        0.35,
                        &[
                            (AU43, [0.25, 0.4]),
                            (&[GazeDown], [0.15, 0.3]),
                            (&[Pitch], [-8.0, -3.0]),
                        ],
                    ),
                ],
                &[Au43L, Au43R, GazeDown],
            ),
            cat(
                "social_engagement",
                vec![
                    stage(
                        "attentive orienting",
                        0.25,
                        &[(&[Au1], [0.1, 0.25]), (AU5, [0.1, 0.2])],
                    ),
                    stage(
                        "engaged nod",
                        0.35,
                        &[
                            (&[Au1], [0.15, 0.3]),
                            (AU2, [0.1, 0.2]),
                            (&[Pitch], [-6.0, -2.0]),
                        ],
                    ),
                    stage(
                        "warm sustained attention",
                        0.4,
                        &[(&[Au7], [0.1, 0.2]), (&[Au1], [0.05, 0.15])],
                    ),
                ],
                &[Au1, Au2L, Au2R],
            ),
            cat(
                "evasive_response",
                vec![
                    stage(
                        "gaze break",
                        0.25,
                        &[(&[GazeRight], [0.2, 0.35]), (AU4, [0.05, 0.15])],
                    ),
                    stage(
                        "blink and look away",
                        0.3,
                        &[
                            (AU43, [0.0, 0.95]),
                            (&[GazeRight], [0.25, 0.45]),
                            (&[Yaw], [-8.0, -3.0]),
                        ],
                    ),
                    stage(
                        "averted hold",
                        0.45,
                        &[
                            (&[GazeRight], [0.2, 0.4]),
                            (&[GazeDown], [0.12, 0.25]),
                            (&[Yaw], [-10.0, -4.0]),
                        ],
                    ),
                ],
                &[GazeRight, Au43L, Au43R],
            ),
            cat(
                "drowsiness",
                vec![
                    stage("droopy eyelids", 0.12, &[(AU43, [0.3, 0.45])]),
                    exempt(
                        stage("prolonged blink", 0.28, &[(AU43, [0.3, 1.0])]),
                        EXEMPT_BLINK_DURATION,
                    ),
                    stage(
                        "drowsy head nod",
                        0.60,
                        &[
                            (AU43, [0.25, 0.45]),
                            (&[Pitch], [-14.0, -4.0]),
                            (&[GazeDown], [0.12, 0.2]),
                        ],
                    ),
                ],
                &[Au43L, Au43R, Pitch],
            ),
        ];
        Self { categories }
    }
}

impl TemplateTable {
    pub fn get(&self, label: &str) -> Option<&CategoryTemplate> {
        self.categories.iter().find(|c| c.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn require(&self, label: &str) -> Result<&CategoryTemplate> {
        self.get(label).ok_or_else(|| Error::UnknownLabel {
            label: label.into(),
            supported: self.labels().join(", "),
        })
    }

    /// Checks ratios, interval order and channel ranges of every template.
    pub fn validate(&self, limits: &HeadLimits) -> Result<()> {
        for cat in &self.categories {
            if cat.stages.is_empty() {
                return Err(Error::InvalidParams(format!(
                    "category `{}` has no stages",
                    cat.label
                )));
            }
            for (k, s) in cat.stages.iter().enumerate() {
                if !(s.ratio.is_finite() && s.ratio > 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "{}: stage {k} ratio must be positive",
                        cat.label
                    )));
                }
                for (&c, iv) in &s.targets {
                    let (lo, hi) = limits.range(c);
                    if !(iv.lo <= iv.hi && lo <= iv.lo && iv.hi <= hi) {
                        return Err(Error::InvalidParams(format!(
                            "{}: stage {k} target {c} out of range",
                            cat.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One recognised instruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Directive {
    Gaze { channel: Channel, slight: bool },
    HeadPitch { down: bool },
    HeadYaw { left: bool },
    BrowRaise,
    BrowLower,
    Squint,
    Blink,
}

pub const GAZE_TARGET: Interval = Interval::new(0.25, 0.45);
pub const GAZE_TARGET_SLIGHT: Interval = Interval::new(0.15, 0.30);
pub const HEAD_TURN_OFFSET: Interval = Interval::new(5.0, 12.0);
pub const BROW_TARGET: Interval = Interval::new(0.3, 0.5);
pub const BLINK_TARGET: Interval = Interval::new(0.0, 0.95);

impl Directive {
    /// Channels this directive asks to be active.
    pub fn active_channels(&self) -> Vec<Channel> {
        match *self {
            Directive::Gaze { channel, .. } => vec![channel],
            Directive::HeadPitch { .. } => vec![Pitch],
            Directive::HeadYaw { .. } => vec![Yaw],
            Directive::BrowRaise => vec![Au1, Au2L, Au2R],
            Directive::BrowLower => vec![Au4L, Au4R],
            Directive::Squint => vec![Au7],
            Directive::Blink => vec![Au43L, Au43R],
        }
    }

    fn apply(&self, event: &mut StagedEvent, pose: &InitialPose, limits: &HeadLimits) {
        let head = |event: &mut StagedEvent, c: Channel, offset: Interval| {
            event
                .channel_targets
                .insert(c, clamp_interval(offset.shifted(pose.get(c)), c, limits));
        };
        match *self {
            Directive::Gaze { channel, slight } => {
                event.channel_targets.insert(
                    channel,
                    if slight {
                        GAZE_TARGET_SLIGHT
                    } else {
                        GAZE_TARGET
                    },
                );
                if let Some(opp) = channel.opposite_gaze() {
                    event.channel_targets.insert(opp, Interval::new(0.0, 0.0));
                }
            }
            Directive::HeadPitch { down } => {
                let off = if down {
                    HEAD_TURN_OFFSET.negated()
                } else {
                    HEAD_TURN_OFFSET
                };
                head(event, Pitch, off);
            }
            Directive::HeadYaw { left } => {
                let off = if left {
                    HEAD_TURN_OFFSET
                } else {
                    HEAD_TURN_OFFSET.negated()
                };
                head(event, Yaw, off);
            }
            Directive::BrowRaise => {
                for c in [Au1, Au2L, Au2R] {
                    event.channel_targets.insert(c, BROW_TARGET);
                }
            }
            Directive::BrowLower => {
                for c in [Au4L, Au4R] {
                    event.channel_targets.insert(c, BROW_TARGET);
                }
            }
            Directive::Squint => {
                event.channel_targets.insert(Au7, BROW_TARGET);
            }
            Directive::Blink => {
                for c in [Au43L, Au43R] {
                    event.channel_targets.insert(c, BLINK_TARGET);
                }
                for c in [Au5L, Au5R] {
                    if let Some(iv) = event.channel_targets.get_mut(&c) {
                        iv.hi = iv.hi.min(0.45);
                        iv.lo = iv.lo.min(0.3);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionClause {
    pub text: String,
    pub directives: Vec<Directive>,
}

fn words(clause: &str) -> Vec<&str> {
    clause
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .collect()
}

fn has(ws: &[&str], vocab: &[&str]) -> bool {
    ws.iter().any(|w| vocab.contains(w))
}

/// Splits `text` into clauses on `then`, `and`, commas and semicolons and
/// recognises the closed keyword vocabulary in each. Clauses without any
/// recognised keyword are dropped.
pub fn parse_instructions(text: &str) -> Vec<InstructionClause> {
    let lower = text.to_ascii_lowercase();
    let mut clauses: Vec<String> = Vec::new();
    for piece in lower.split([',', ';', '.']) {
        let mut current: Vec<&str> = Vec::new();
        for w in piece.split_whitespace() {
            if w == "then" || w == "and" {
                if !current.is_empty() {
                    clauses.push(current.join(" "));
                }
                current.clear();
            } else {
                current.push(w);
            }
        }
        if !current.is_empty() {
            clauses.push(current.join(" "));
        }
    }
    clauses
        .into_iter()
        .filter_map(|text| {
            let directives = clause_directives(&words(&text));
            (!directives.is_empty()).then_some(InstructionClause { text, directives })
        })
        .collect()
}

fn clause_directives(ws: &[&str]) -> Vec<Directive> {
    let mut out = Vec::new();
    let slight = has(ws, &["slightly", "slight", "subtly", "gently", "bit"]);
    let brow = has(ws, &["brow", "brows", "eyebrow", "eyebrows"]);
    let head = has(ws, &["head", "chin", "nod", "nods"]);
    if brow {
        if has(ws, &["raise", "raises", "lift", "lifts", "up", "arch"]) {
            out.push(Directive::BrowRaise);
        }
        if has(
            ws,
            &[
                "frown", "frowns", "lower", "lowers", "furrow", "knit", "down",
            ],
        ) {
            out.push(Directive::BrowLower);
        }
    } else {
        if has(ws, &["frown", "frowns", "furrow"]) {
            out.push(Directive::BrowLower);
        }
        let dirs: [(&[&str], Channel); 4] = [
            (&["left", "leftward", "leftwards"], GazeLeft),
            (&["right", "rightward", "rightwards"], GazeRight),
            (&["up", "upward", "upwards"], GazeUp),
            (&["down", "downward", "downwards"], GazeDown),
        ];
        for (vocab, channel) in dirs {
            if has(ws, vocab) {
                out.push(Directive::Gaze { channel, slight });
            }
        }
    }
    if head {
        if has(
            ws,
            &[
                "lower", "lowers", "down", "drop", "drops", "nod", "nods", "bow", "bows", "dip",
            ],
        ) {
            out.push(Directive::HeadPitch { down: true });
        } else if has(ws, &["raise", "raises", "up", "lift", "lifts", "tilt"]) {
            out.push(Directive::HeadPitch { down: false });
        }
        if has(ws, &["left", "leftward"]) {
            out.push(Directive::HeadYaw { left: true });
        } else if has(ws, &["right", "rightward"]) {
            out.push(Directive::HeadYaw { left: false });
        }
    }
    if has(ws, &["squint", "squints", "squinting", "narrow"]) {
        out.push(Directive::Squint);
    }
    if has(ws, &["blink", "blinks", "blinking"]) {
        out.push(Directive::Blink);
    }
    out
}

/// Event index for each clause: clauses fill the events after the onset event
/// in order, overflow lands on the last event.
pub fn assign_clauses(event_count: usize, clause_count: usize) -> Vec<usize> {
    let first = if event_count > 1 { 1 } else { 0 };
    (0..clause_count)
        .map(|i| (first + i).min(event_count.saturating_sub(1)))
        .collect()
}

/// Parsed instructions paired with the event they apply to.
pub fn instruction_assignments(
    event_count: usize,
    instructions: Option<&str>,
) -> Vec<(usize, Directive)> {
    let clauses = instructions.map(parse_instructions).unwrap_or_default();
    let slots = assign_clauses(event_count, clauses.len());
    clauses
        .iter()
        .zip(slots)
        .flat_map(|(c, e)| c.directives.iter().map(move |d| (e, *d)))
        .collect()
}

/// Planner inputs besides label and duration.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest<'a> {
    pub label: &'a str,
    pub total_frames: usize,
    pub fps: f64,
    pub instructions: Option<&'a str>,
    pub initial_pose: InitialPose,
}

fn clamp_interval(iv: Interval, c: Channel, limits: &HeadLimits) -> Interval {
    let (lo, hi) = limits.range(c);
    Interval::new(iv.lo.clamp(lo, hi), iv.hi.clamp(lo, hi))
}

/// Cumulative-rounded stage boundaries; every stage keeps at least one frame.
pub fn stage_ends(ratios: &[f64], total_frames: usize) -> Vec<usize> {
    let n = ratios.len();
    let sum: f64 = ratios.iter().sum();
    let mut ends = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut prev = 0usize;
    for (k, r) in ratios.iter().enumerate() {
        acc += r;
        let raw = libm::round(total_frames as f64 * acc / sum) as usize;
        let remaining = n - 1 - k;
        let end = raw.max(prev + 1).min(total_frames - remaining);
        ends.push(end);
        prev = end;
    }
    if let Some(last) = ends.last_mut() {
        *last = total_frames;
    }
    ends
}

fn materialize(
    stage: &StageTemplate,
    pose: &InitialPose,
    limits: &HeadLimits,
) -> (BTreeMap<Channel, Interval>, BTreeSet<String>) {
    let mut targets = BTreeMap::new();
    for (&c, iv) in &stage.targets {
        if !c.is_head() {
            targets.insert(c, *iv);
        }
    }
    for c in Channel::HEAD {
        let off = stage.targets.get(&c).copied().unwrap_or(STABLE_HEAD);
        targets.insert(c, clamp_interval(off.shifted(pose.get(c)), c, limits));
    }
    (targets, stage.exemptions.iter().cloned().collect())
}

/// Deterministic rule-based planner.
pub fn plan(req: &PlanRequest<'_>, templates: &TemplateTable) -> Result<Plan> {
    plan_relaxed(req, templates, 0, &HeadLimits::default())
}

/// Planner with AU/gaze target intervals widened by `0.05 · level` on each side.
pub fn plan_relaxed(
    req: &PlanRequest<'_>,
    templates: &TemplateTable,
    level: u32,
    limits: &HeadLimits,
) -> Result<Plan> {
    let template = templates.require(req.label)?;
    if req.total_frames == 0 {
        return Err(Error::InvalidPlan("total_frames must be at least 1".into()));
    }
    if !(req.fps.is_finite() && req.fps > 0.0) {
        return Err(Error::InvalidFps(req.fps));
    }
    if !req.initial_pose.is_within(limits) {
        return Err(Error::InvalidPlan(
            "initial pose outside the head-pose range".into(),
        ));
    }
    let pose = &req.initial_pose;
    let t = req.total_frames;
    let stages = &template.stages;

    let mut events = Vec::new();
    if t < stages.len() {
        let mut targets: BTreeMap<Channel, Interval> = BTreeMap::new();
        let mut exemptions = BTreeSet::new();
        for (k, s) in stages.iter().enumerate() {
            let (tg, ex) = materialize(s, pose, limits);
            let rest = |c: Channel| {
                if c.is_head() {
                    Interval::new(pose.get(c), pose.get(c))
                } else {
                    Interval::new(0.0, 0.0)
                }
            };
            let channels: BTreeSet<Channel> = targets.keys().chain(tg.keys()).copied().collect();
            for c in channels {
                let a = if k == 0 {
                    tg.get(&c).copied().unwrap_or(rest(c))
                } else {
                    targets.get(&c).copied().unwrap_or(rest(c))
                };
                let b = tg.get(&c).copied().unwrap_or(rest(c));
                targets.insert(c, a.hull(&b));
            }
            exemptions.extend(ex);
        }
        events.push(StagedEvent {
            start_frame: 1,
            end_frame: t,
            semantics: stages
                .iter()
                .map(|s| s.semantics.as_str())
                .collect::<Vec<_>>()
                .join("+"),
            channel_targets: targets,
            exemptions,
        });
    } else {
        let ratios: Vec<f64> = stages.iter().map(|s| s.ratio).collect();
        let ends = stage_ends(&ratios, t);
        let mut start = 1;
        for (s, &end) in stages.iter().zip(&ends) {
            let (channel_targets, exemptions) = materialize(s, pose, limits);
            events.push(StagedEvent {
                start_frame: start,
                end_frame: end,
                semantics: s.semantics.clone(),
                channel_targets,
                exemptions,
            });
            start = end + 1;
        }
    }

    let assignments = instruction_assignments(events.len(), req.instructions);
    for &(_, d) in &assignments {
        if let Directive::Gaze { channel, .. } = d {
            mirror_gaze_templates(&mut events, channel, pose, limits);
        }
    }
    for &(e, d) in &assignments {
        d.apply(&mut events[e], pose, limits);
    }

    if level > 0 {
        let widen = 0.05 * level as f64;
        for ev in &mut events {
            for (c, iv) in ev.channel_targets.iter_mut() {
                if !c.is_head() {
                    *iv = Interval::new((iv.lo - widen).max(0.0), (iv.hi + widen).min(1.0));
                }
            }
        }
    }

    Ok(Plan {
        label: req.label.to_string(),
        events,
        total_frames: t,
        fps: req.fps,
    })
}

/// Moves template activity on the direction opposing an instructed gaze onto
/// the instructed side, mirroring yaw for horizontal swaps.
fn mirror_gaze_templates(
    events: &mut [StagedEvent],
    channel: Channel,
    pose: &InitialPose,
    limits: &HeadLimits,
) {
    let Some(opp) = channel.opposite_gaze() else {
        return;
    };
    let horizontal = matches!(channel, GazeLeft | GazeRight);
    for ev in events.iter_mut() {
        let Some(iv) = ev.channel_targets.get(&opp).copied() else {
            continue;
        };
        if iv.hi <= 0.0 {
            continue;
        }
        let own = ev.channel_targets.get(&channel).copied();
        if own.is_none_or(|o| o.hi <= 0.0) {
            ev.channel_targets.insert(channel, iv);
        }
        ev.channel_targets.insert(opp, Interval::new(0.0, 0.0));
        if horizontal {
            if let Some(yaw) = ev.channel_targets.get(&Yaw).copied() {
                let rel = yaw.shifted(-pose.yaw).negated();
                ev.channel_targets
                    .insert(Yaw, clamp_interval(rel.shifted(pose.yaw), Yaw, limits));
            }
        }
    }
}

/// Required channels of `label`, with gaze sides swapped when instructions
/// point the opposite way.
pub fn required_channels(template: &CategoryTemplate, instructions: Option<&str>) -> Vec<Channel> {
    let clauses = instructions.map(parse_instructions).unwrap_or_default();
    let mut req = template.required.clone();
    for d in clauses.iter().flat_map(|c| c.directives.iter()) {
        if let Directive::Gaze { channel, .. } = d {
            if let Some(opp) = channel.opposite_gaze() {
                for r in req.iter_mut() {
                    if *r == opp {
                        *r = *channel;
                    }
                }
            }
        }
    }
    req.sort();
    req.dedup();
    req
}

/// Checks that the events tile `[1, T]` and that every target is a legal interval.
pub fn validate_plan(plan: &Plan) -> ValidationReport {
    validate_plan_with(plan, &HeadLimits::default())
}

pub fn validate_plan_with(plan: &Plan, limits: &HeadLimits) -> ValidationReport {
    let mut report = ValidationReport::default();
    if plan.events.is_empty() {
        report.push(0, "", RULE_PLAN_EMPTY, "no events");
        return report;
    }
    let mut expected = 1usize;
    for (k, ev) in plan.events.iter().enumerate() {
        if ev.start_frame < 1 || ev.end_frame < ev.start_frame {
            report.push(
                ev.start_frame,
                "",
                RULE_PLAN_BOUNDS,
                format!(
                    "event {k} has invalid span [{}, {}]",
                    ev.start_frame, ev.end_frame
                ),
            );
        }
        if ev.start_frame > expected {
            report.push(
                expected,
                "",
                RULE_PLAN_GAP,
                format!("gap at frame {expected}"),
            );
        } else if ev.start_frame < expected {
            report.push(
                ev.start_frame,
                "",
                RULE_PLAN_OVERLAP,
                format!("overlap at frame {}", ev.start_frame),
            );
        }
        expected = expected.max(ev.end_frame + 1);
        for (&c, iv) in &ev.channel_targets {
            let (lo, hi) = limits.range(c);
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                report.push(
                    ev.start_frame,
                    c.name(),
                    RULE_PLAN_TARGET,
                    format!("event {k}: target interval is not ordered"),
                );
            } else if iv.lo < lo || iv.hi > hi {
                report.push(
                    ev.start_frame,
                    c.name(),
                    RULE_PLAN_TARGET,
                    format!("event {k}: target exceeds channel range"),
                );
            }
        }
    }
    let covered: usize = plan
        .events
        .iter()
        .map(|e| e.end_frame.saturating_add(1).saturating_sub(e.start_frame))
        .sum();
    if covered != plan.total_frames || expected != plan.total_frames + 1 {
        report.push(
            plan.total_frames,
            "",
            RULE_PLAN_COVERAGE,
            "events do not partition duration",
        );
    }
    report
}
