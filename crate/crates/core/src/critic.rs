//! Rule-based critic: physiological and semantic checks, suggested edits and
//! the bounded revision loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::composer::{compose_with, ComposeOptions};
use crate::control::{Channel, ControlSequence, HeadLimits};
use crate::library::PrototypeLibrary;
use crate::planner::{
    instruction_assignments, plan_relaxed, required_channels, Directive, InitialPose, Plan,
    PlanRequest, TemplateTable, GAZE_TARGET_SLIGHT,
};

pub const RULE_BLINK_DURATION: &str = "blink_duration";
pub const RULE_INTER_BLINK: &str = "inter_blink_interval";
pub const RULE_BLINK_ASYMMETRY: &str = "blink_asymmetry";
pub const RULE_COACTIVATION: &str = "au_coactivation";
pub const RULE_MAIN_SEQUENCE: &str = "gaze_main_sequence";
pub const RULE_GAZE_HEAD: &str = "gaze_head_coordination";
pub const RULE_SEMANTIC_TARGET: &str = "semantic_target";
pub const RULE_SEMANTIC_ORDER: &str = "semantic_order";
pub const RULE_SEMANTIC_INSTRUCTION: &str = "semantic_instruction";
pub const RULE_SEMANTIC_LABEL: &str = "semantic_label";

pub const PHYSIOLOGY_RULES: [&str; 6] = [
    RULE_BLINK_DURATION,
    RULE_INTER_BLINK,
    RULE_BLINK_ASYMMETRY,
    RULE_COACTIVATION,
    RULE_MAIN_SEQUENCE,
    RULE_GAZE_HEAD,
];
pub const SEMANTIC_RULES: [&str; 4] = [
    RULE_SEMANTIC_TARGET,
    RULE_SEMANTIC_ORDER,
    RULE_SEMANTIC_INSTRUCTION,
    RULE_SEMANTIC_LABEL,
];

fn yes() -> bool {
    true
}

macro_rules! params {
    ($(#[$m:meta])* $name:ident { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        #[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
        pub struct $name {
            #[cfg_attr(feature = "serde", serde(default = "yes"))]
            pub enabled: bool,
            $(pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { enabled: yes(), $($field: $default,)* }
            }
        }
    };
}

params!(
    /// Bilateral closure episodes must last within `[min_ms, max_ms]`.
    BlinkDurationParams { threshold: f64 = 0.5, min_ms: f64 = 100.0, max_ms: f64 = 500.0, prolonged_max_ms: f64 = 1500.0 }
);
params!(InterBlinkParams {
    min_ms: f64 = 400.0
});
params!(BlinkAsymmetryParams { cap: f64 = 0.5 });
params!(CoactivationParams { level: f64 = 0.5 });
params!(
    /// Rate cap scales with `reference_fps / fps`; saccade length converts
    /// amplitude into the minimum peak step.
    MainSequenceParams {
        max_delta: f64 = 0.25,
        reference_fps: f64 = 25.0,
        ratio: f64 = 0.3,
        saccade_ms: f64 = 160.0,
        excursion_threshold: f64 = 0.1,
    }
);
params!(CoordinationParams {
    gaze_level: f64 = 0.5,
    sustain_ms: f64 = 300.0,
    window_ms: f64 = 400.0,
    min_head_deg: f64 = 2.0
});
params!(SemanticTargetParams {
    slack: f64 = 0.05,
    head_slack_deg: f64 = 1.0,
    seam_margin: usize = 3
});
params!(SemanticOrderParams { slack: f64 = 0.05 });
params!(SemanticInstructionParams {
    active: f64 = 0.1,
    inactive: f64 = 0.05,
    head_deg: f64 = 2.0,
    blink_frames: usize = 4
});
params!(SemanticLabelParams {
    active: f64 = 0.1,
    head_range_deg: f64 = 2.0
});

/// Parameters and switches for every rule, keyed by rule id.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct RuleSet {
    pub blink_duration: BlinkDurationParams,
    pub inter_blink_interval: InterBlinkParams,
    pub blink_asymmetry: BlinkAsymmetryParams,
    pub au_coactivation: CoactivationParams,
    pub gaze_main_sequence: MainSequenceParams,
    pub gaze_head_coordination: CoordinationParams,
    pub semantic_target: SemanticTargetParams,
    pub semantic_order: SemanticOrderParams,
    pub semantic_instruction: SemanticInstructionParams,
    pub semantic_label: SemanticLabelParams,
}

impl RuleSet {
    pub fn is_enabled(&self, rule: &str) -> bool {
        match rule {
            RULE_BLINK_DURATION => self.blink_duration.enabled,
            RULE_INTER_BLINK => self.inter_blink_interval.enabled,
            RULE_BLINK_ASYMMETRY => self.blink_asymmetry.enabled,
            RULE_COACTIVATION => self.au_coactivation.enabled,
            RULE_MAIN_SEQUENCE => self.gaze_main_sequence.enabled,
            RULE_GAZE_HEAD => self.gaze_head_coordination.enabled,
            RULE_SEMANTIC_TARGET => self.semantic_target.enabled,
            RULE_SEMANTIC_ORDER => self.semantic_order.enabled,
            RULE_SEMANTIC_INSTRUCTION => self.semantic_instruction.enabled,
            RULE_SEMANTIC_LABEL => self.semantic_label.enabled,
            _ => false,
        }
    }

    /// Rejects non-positive durations and intensities outside `[0, 1]`.
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("blink_duration.min_ms", self.blink_duration.min_ms),
            ("blink_duration.max_ms", self.blink_duration.max_ms),
            (
                "blink_duration.prolonged_max_ms",
                self.blink_duration.prolonged_max_ms,
            ),
            (
                "inter_blink_interval.min_ms",
                self.inter_blink_interval.min_ms,
            ),
            (
                "gaze_main_sequence.max_delta",
                self.gaze_main_sequence.max_delta,
            ),
            (
                "gaze_main_sequence.reference_fps",
                self.gaze_main_sequence.reference_fps,
            ),
            ("gaze_main_sequence.ratio", self.gaze_main_sequence.ratio),
            (
                "gaze_main_sequence.saccade_ms",
                self.gaze_main_sequence.saccade_ms,
            ),
            (
                "gaze_head_coordination.sustain_ms",
                self.gaze_head_coordination.sustain_ms,
            ),
            (
                "gaze_head_coordination.window_ms",
                self.gaze_head_coordination.window_ms,
            ),
            (
                "gaze_head_coordination.min_head_deg",
                self.gaze_head_coordination.min_head_deg,
            ),
            (
                "semantic_target.head_slack_deg",
                self.semantic_target.head_slack_deg,
            ),
            (
                "semantic_instruction.head_deg",
                self.semantic_instruction.head_deg,
            ),
            (
                "semantic_label.head_range_deg",
                self.semantic_label.head_range_deg,
            ),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        let unit = [
            ("blink_duration.threshold", self.blink_duration.threshold),
            ("blink_asymmetry.cap", self.blink_asymmetry.cap),
            ("au_coactivation.level", self.au_coactivation.level),
            (
                "gaze_main_sequence.excursion_threshold",
                self.gaze_main_sequence.excursion_threshold,
            ),
            (
                "gaze_head_coordination.gaze_level",
                self.gaze_head_coordination.gaze_level,
            ),
            ("semantic_target.slack", self.semantic_target.slack),
            ("semantic_order.slack", self.semantic_order.slack),
            (
                "semantic_instruction.active",
                self.semantic_instruction.active,
            ),
            (
                "semantic_instruction.inactive",
                self.semantic_instruction.inactive,
            ),
            ("semantic_label.active", self.semantic_label.active),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.blink_duration.min_ms > self.blink_duration.max_ms {
            return Err("blink_duration.min_ms exceeds max_ms".into());
        }
        Ok(())
    }
}

/// Inclusive 1-based frame span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
}

impl FrameSpan {
    fn from_range(r: Range<usize>) -> Self {
        Self {
            start: r.start + 1,
            end: r.end,
        }
    }

    fn range(&self) -> Range<usize> {
        self.start - 1..self.end
    }
}

/// A local repair. Spans are inclusive and 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Edit {
    /// `v ← min(v, value)`
    ClampAbove {
        channel: Channel,
        span: FrameSpan,
        value: f64,
    },
    /// `v ← max(v, value)`
    ClampBelow {
        channel: Channel,
        span: FrameSpan,
        value: f64,
    },
    /// Pulls both eyelid closures toward their mean until the gap is below `cap`.
    Symmetrize { span: FrameSpan, cap: f64 },
    /// Forward pass bounding the per-frame change of `channel`.
    LimitRate {
        channel: Channel,
        span: FrameSpan,
        max_delta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum Verdict {
    Pass,
    ReviseComposition,
    RevisePlan,
    Fail,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::ReviseComposition => "revise_composition",
            Verdict::RevisePlan => "revise_plan",
            Verdict::Fail => "fail",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Check {
    pub rule: String,
    pub passed: bool,
    pub span: Option<FrameSpan>,
    pub message: String,
    pub edits: Vec<Edit>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CriticReport {
    pub verdict: Verdict,
    pub checks: Vec<Check>,
}

impl CriticReport {
    fn from_checks(checks: Vec<Check>) -> Self {
        let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
        let verdict = if failed.is_empty() {
            Verdict::Pass
        } else if failed.iter().any(|c| !c.edits.is_empty()) {
            Verdict::ReviseComposition
        } else {
            Verdict::RevisePlan
        };
        Self { verdict, checks }
    }

    pub fn merge(self, other: CriticReport) -> CriticReport {
        let mut checks = self.checks;
        checks.extend(other.checks);
        Self::from_checks(checks)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn failed_rules(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.failures().map(|c| c.rule.as_str()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_failure(&self, rule: &str) -> bool {
        self.failures().any(|c| c.rule == rule)
    }

    pub fn edits(&self) -> Vec<Edit> {
        self.failures()
            .flat_map(|c| c.edits.iter().copied())
            .collect()
    }
}

struct Collector {
    checks: Vec<Check>,
}

impl Collector {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn fail(&mut self, rule: &str, span: Range<usize>, message: String, edits: Vec<Edit>) {
        self.checks.push(Check {
            rule: rule.into(),
            passed: false,
            span: Some(FrameSpan::from_range(span)),
            message,
            edits,
        });
    }

    /// Appends a pass record for every listed rule that produced no failure.
    fn finish(mut self, rules: &RuleSet, ids: &[&str]) -> CriticReport {
        for &id in ids {
            if rules.is_enabled(id) && !self.checks.iter().any(|c| c.rule == id) {
                self.checks.push(Check {
                    rule: id.into(),
                    passed: true,
                    span: None,
                    message: "ok".into(),
                    edits: Vec::new(),
                });
            }
        }
        CriticReport::from_checks(self.checks)
    }
}

/// Maximal runs of consecutive indices where `pred` holds.
pub fn runs(len: usize, mut pred: impl FnMut(usize) -> bool) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..len {
        match (pred(t), start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(s..t);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..len);
    }
    out
}

fn exempt_at(plan: &Plan, t: usize, rule: &str) -> bool {
    plan.event_at(t)
        .is_some_and(|e| plan.events[e].is_exempt(rule))
}

fn span_1(r: &Range<usize>) -> FrameSpan {
    FrameSpan::from_range(r.clone())
}

fn frames_for_ms(ms: f64, fps: f64) -> usize {
    libm::ceil(ms * fps / 1000.0 - 1e-9).max(0.0) as usize
}

/// Bilateral closure episodes (both lids above `threshold`).
pub fn blink_episodes(seq: &ControlSequence, threshold: f64) -> Vec<Range<usize>> {
    let f = seq.frames();
    runs(f.len(), |t| {
        f[t].get(Channel::Au43L) > threshold && f[t].get(Channel::Au43R) > threshold
    })
}

pub fn check_physiology(seq: &ControlSequence, plan: &Plan, rules: &RuleSet) -> CriticReport {
    let mut out = Collector::new();
    let frames = seq.frames();
    let n = frames.len();
    let frame_ms = seq.frame_ms();
    let fps = seq.fps();

    let bd = &rules.blink_duration;
    let blinks = blink_episodes(seq, bd.threshold);
    if bd.enabled {
        for b in &blinks {
            let ms = b.len() as f64 * frame_ms;
            let cap = if exempt_at(plan, b.start, RULE_BLINK_DURATION) {
                bd.prolonged_max_ms
            } else {
                bd.max_ms
            };
            if ms + 1e-9 < bd.min_ms {
                let need = frames_for_ms(bd.min_ms, fps);
                let extra = need.saturating_sub(b.len());
                let after = extra.min(n - b.end);
                let before = (extra - after).min(b.start);
                let span = b.start - before..b.end + after;
                let peak = b
                    .clone()
                    .map(|t| {
                        frames[t]
                            .get(Channel::Au43L)
                            .min(frames[t].get(Channel::Au43R))
                    })
                    .fold(0.0, f64::max);
                let edits = [Channel::Au43L, Channel::Au43R]
                    .map(|c| Edit::ClampBelow {
                        channel: c,
                        span: span_1(&span),
                        value: peak,
                    })
                    .to_vec();
                out.fail(
                    RULE_BLINK_DURATION,
                    b.clone(),
                    format!("blink too short: {ms:.0} ms < {:.0} ms", bd.min_ms),
                    edits,
                );
            } else if ms > cap + 1e-9 {
                let keep = ((cap / frame_ms + 1e-9) as usize).max(1);
                let tail = b.start + keep..b.end;
                let edits = [Channel::Au43L, Channel::Au43R]
                    .map(|c| Edit::ClampAbove {
                        channel: c,
                        span: span_1(&tail),
                        value: bd.threshold,
                    })
                    .to_vec();
                out.fail(
                    RULE_BLINK_DURATION,
                    b.clone(),
                    format!("blink too long: {ms:.0} ms > {cap:.0} ms"),
                    edits,
                );
            }
        }
    }

    let ib = &rules.inter_blink_interval;
    if ib.enabled {
        for w in blinks.windows(2) {
            let gap_ms = (w[1].start - w[0].end) as f64 * frame_ms;
            let exempt = exempt_at(plan, w[0].start, RULE_INTER_BLINK)
                || exempt_at(plan, w[1].start, RULE_INTER_BLINK);
            if gap_ms + 1e-9 < ib.min_ms && !exempt {
                out.fail(
                    RULE_INTER_BLINK,
                    w[0].start..w[1].end,
                    format!("inter-blink interval {gap_ms:.0} ms < {:.0} ms", ib.min_ms),
                    Vec::new(),
                );
            }
        }
    }

    let asym = &rules.blink_asymmetry;
    if asym.enabled {
        let bad = runs(n, |t| {
            (frames[t].get(Channel::Au43L) - frames[t].get(Channel::Au43R)).abs() > asym.cap + 1e-12
                && !exempt_at(plan, t, RULE_BLINK_ASYMMETRY)
        });
        for r in bad {
            let peak = r
                .clone()
                .map(|t| (frames[t].get(Channel::Au43L) - frames[t].get(Channel::Au43R)).abs())
                .fold(0.0, f64::max);
            out.fail(
                RULE_BLINK_ASYMMETRY,
                r.clone(),
                format!(
                    "blink asymmetry |AU43_L - AU43_R| = {peak:.2} > {:.2}",
                    asym.cap
                ),
                vec![Edit::Symmetrize {
                    span: span_1(&r),
                    cap: asym.cap,
                }],
            );
        }
    }

    let co = &rules.au_coactivation;
    if co.enabled {
        let pairs = [
            (Channel::Au4L, Channel::Au2L),
            (Channel::Au4R, Channel::Au2R),
            (Channel::Au5L, Channel::Au43L),
            (Channel::Au5R, Channel::Au43R),
        ];
        for (a, b) in pairs {
            let bad = runs(n, |t| {
                frames[t].get(a) > co.level
                    && frames[t].get(b) > co.level
                    && !exempt_at(plan, t, RULE_COACTIVATION)
            });
            for r in bad {
                let mean = |c: Channel| r.clone().map(|t| frames[t].get(c)).sum::<f64>();
                let weaker = if mean(a) < mean(b) { a } else { b };
                out.fail(
                    RULE_COACTIVATION,
                    r.clone(),
                    format!("{a} and {b} co-active above {:.2}", co.level),
                    vec![Edit::ClampAbove {
                        channel: weaker,
                        span: span_1(&r),
                        value: co.level,
                    }],
                );
            }
        }
    }

    let ms = &rules.gaze_main_sequence;
    if ms.enabled {
        let vmax = ms.max_delta * ms.reference_fps / fps;
        let saccade_frames = (ms.saccade_ms * fps / 1000.0).max(1.0);
        for g in Channel::GAZE {
            let v = seq.channel(g);
            let fast = runs(n, |t| {
                t > 0
                    && (v[t] - v[t - 1]).abs() > vmax + 1e-12
                    && !exempt_at(plan, t, RULE_MAIN_SEQUENCE)
            });
            if let Some(first) = fast.first() {
                let last = fast.last().map_or(first.end, |r| r.end);
                let peak = (1..n).map(|t| (v[t] - v[t - 1]).abs()).fold(0.0, f64::max);
                out.fail(
                    RULE_MAIN_SEQUENCE,
                    first.start - 1..last,
                    format!("{g} moves {peak:.2} per frame, above {vmax:.2}"),
                    vec![Edit::LimitRate {
                        channel: g,
                        span: span_1(&(first.start - 1..n)),
                        max_delta: vmax,
                    }],
                );
            }
            for r in runs(n, |t| v[t] > ms.excursion_threshold) {
                if r.start == 0 || exempt_at(plan, r.start, RULE_MAIN_SEQUENCE) {
                    continue;
                }
                let pre = v[r.start - 1];
                let amplitude = r.clone().map(|t| v[t]).fold(f64::NEG_INFINITY, f64::max) - pre;
                let peak = r
                    .clone()
                    .map(|t| (v[t] - v[t - 1]).abs())
                    .fold(0.0, f64::max);
                let need = ms.ratio * amplitude / saccade_frames;
                if peak + 1e-12 < need {
                    out.fail(
                        RULE_MAIN_SEQUENCE,
                        r.clone(),
                        format!("{g} excursion of {amplitude:.2} peaks at {peak:.3}/frame, below {need:.3}"),
                        Vec::new(),
                    );
                }
            }
        }
    }

    let co = &rules.gaze_head_coordination;
    if co.enabled {
        let window = frames_for_ms(co.window_ms, fps);
        for (g, head, sign) in [
            (Channel::GazeLeft, Channel::Yaw, 1.0),
            (Channel::GazeRight, Channel::Yaw, -1.0),
            (Channel::GazeUp, Channel::Pitch, 1.0),
            (Channel::GazeDown, Channel::Pitch, -1.0),
        ] {
            let v = seq.channel(g);
            let h = seq.channel(head);
            for r in runs(n, |t| v[t] > co.gaze_level) {
                if (r.len() as f64) * frame_ms <= co.sustain_ms
                    || exempt_at(plan, r.start, RULE_GAZE_HEAD)
                {
                    continue;
                }
                let w0 = r.start.saturating_sub(window);
                let w1 = (r.start + window + 1).min(n);
                let moved = (w0..w1).any(|t| sign * (h[t] - h[w0]) >= co.min_head_deg - 1e-12);
                if !moved {
                    out.fail(
                        RULE_GAZE_HEAD,
                        r.clone(),
                        format!(
                            "sustained {g} above {:.2} without matching {head} motion",
                            co.gaze_level
                        ),
                        vec![Edit::ClampAbove {
                            channel: g,
                            span: span_1(&r),
                            value: co.gaze_level,
                        }],
                    );
                }
            }
        }
    }

    out.finish(rules, &PHYSIOLOGY_RULES)
}

/// Frames of an event that skip its leading seam margin.
fn settled(range: Range<usize>, margin: usize) -> Range<usize> {
    let m = margin.min(range.len().saturating_sub(1));
    range.start + m..range.end
}

fn max_over(v: &[f64], r: Range<usize>) -> f64 {
    v[r].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_over(v: &[f64], r: Range<usize>) -> f64 {
    v[r].iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn check_semantic(
    seq: &ControlSequence,
    plan: &Plan,
    label: &str,
    instructions: Option<&str>,
    templates: &TemplateTable,
    rules: &RuleSet,
) -> CriticReport {
    let mut out = Collector::new();
    let n = seq.len();
    let all = 0..n;
    let in_range = |e: &crate::planner::StagedEvent| e.end_frame <= n && e.start_frame >= 1;

    let st = &rules.semantic_target;
    if st.enabled {
        for (k, e) in plan.events.iter().enumerate().filter(|(_, e)| in_range(e)) {
            let span = settled(e.range(), st.seam_margin);
            for (&c, iv) in &e.channel_targets {
                if !c.is_head() && iv.lo <= 0.0 {
                    continue;
                }
                let slack = if c.is_head() {
                    st.head_slack_deg
                } else {
                    st.slack
                };
                let v = seq.channel(c);
                let peak = max_over(&v, span.clone());
                if peak > iv.hi + slack {
                    out.fail(
                        RULE_SEMANTIC_TARGET,
                        e.range(),
                        format!(
                            "{c} peaks at {peak:.3} in event {k}, above [{:.3}, {:.3}]",
                            iv.lo, iv.hi
                        ),
                        vec![Edit::ClampAbove {
                            channel: c,
                            span: span_1(&span),
                            value: iv.hi,
                        }],
                    );
                } else if peak < iv.lo - slack {
                    out.fail(
                        RULE_SEMANTIC_TARGET,
                        e.range(),
                        format!(
                            "{c} peaks at {peak:.3} in event {k}, below [{:.3}, {:.3}]",
                            iv.lo, iv.hi
                        ),
                        vec![Edit::ClampBelow {
                            channel: c,
                            span: span_1(&span),
                            value: iv.lo,
                        }],
                    );
                }
            }
        }
    }

    let so = &rules.semantic_order;
    if so.enabled {
        let mut last_onset: Option<(usize, usize)> = None;
        for k in 1..plan.events.len() {
            let (prev, e) = (&plan.events[k - 1], &plan.events[k]);
            if !in_range(e) || !in_range(prev) {
                continue;
            }
            let mut onset: Option<usize> = None;
            for (&c, iv) in &e.channel_targets {
                if c.is_head() || iv.lo <= 0.0 {
                    continue;
                }
                let prev_hi = prev.target(c).map_or(0.0, |p| p.hi);
                let level = iv.lo - so.slack;
                if prev_hi >= level {
                    continue;
                }
                let v = seq.channel(c);
                let found = (prev.range().start..e.range().end).find(|&t| v[t] >= level);
                let Some(t) = found else { continue };
                if t < e.range().start {
                    out.fail(
                        RULE_SEMANTIC_ORDER,
                        t..e.range().start,
                        format!(
                            "{c} reaches event {k} level at frame {} before the event starts at {}",
                            t + 1,
                            e.start_frame
                        ),
                        Vec::new(),
                    );
                }
                onset = Some(onset.map_or(t, |o: usize| o.min(t)));
            }
            if let Some(t) = onset {
                if let Some((pk, pt)) = last_onset {
                    if t < pt {
                        out.fail(
                            RULE_SEMANTIC_ORDER,
                            t..pt + 1,
                            format!(
                                "event {k} onset at frame {} precedes event {pk} onset at frame {}",
                                t + 1,
                                pt + 1
                            ),
                            Vec::new(),
                        );
                    }
                }
                last_onset = Some((k, t));
            }
        }
    }

    let si = &rules.semantic_instruction;
    if si.enabled {
        for (e, d) in instruction_assignments(plan.events.len(), instructions) {
            let ev = &plan.events[e];
            if !in_range(ev) {
                continue;
            }
            let span = settled(ev.range(), rules.semantic_target.seam_margin);
            match d {
                Directive::Gaze { channel, .. } => {
                    let v = seq.channel(channel);
                    if max_over(&v, all.clone()) < si.active {
                        let lo = ev
                            .target(channel)
                            .map_or(GAZE_TARGET_SLIGHT.lo, |iv| iv.lo.max(si.active));
                        out.fail(
                            RULE_SEMANTIC_INSTRUCTION,
                            ev.range(),
                            format!("instructed {channel} never activates (event {e})"),
                            vec![Edit::ClampBelow {
                                channel,
                                span: span_1(&span),
                                value: lo,
                            }],
                        );
                    }
                    if let Some(opp) = channel.opposite_gaze() {
                        let v = seq.channel(opp);
                        let bad = runs(n, |t| v[t] > si.inactive);
                        if let (Some(first), Some(last)) = (bad.first(), bad.last()) {
                            out.fail(
                                RULE_SEMANTIC_INSTRUCTION,
                                first.start..last.end,
                                format!("{opp} active against instructed {channel}"),
                                vec![Edit::ClampAbove {
                                    channel: opp,
                                    span: span_1(&all),
                                    value: 0.0,
                                }],
                            );
                        }
                    }
                }
                Directive::HeadPitch { down } | Directive::HeadYaw { left: down } => {
                    let (c, sign) = match d {
                        Directive::HeadPitch { .. } => {
                            (Channel::Pitch, if down { -1.0 } else { 1.0 })
                        }
                        _ => (Channel::Yaw, if down { 1.0 } else { -1.0 }),
                    };
                    let v = seq.channel(c);
                    let moved = (0..n).any(|t| sign * (v[t] - v[0]) >= si.head_deg - 1e-12);
                    if !moved {
                        let goal = v[0] + sign * si.head_deg;
                        let edit = match ev.target(c) {
                            Some(iv) if sign < 0.0 => Edit::ClampAbove {
                                channel: c,
                                span: span_1(&span),
                                value: iv.hi.min(goal),
                            },
                            Some(iv) => Edit::ClampBelow {
                                channel: c,
                                span: span_1(&span),
                                value: iv.lo.max(goal),
                            },
                            None if sign < 0.0 => Edit::ClampAbove {
                                channel: c,
                                span: span_1(&span),
                                value: goal,
                            },
                            None => Edit::ClampBelow {
                                channel: c,
                                span: span_1(&span),
                                value: goal,
                            },
                        };
                        out.fail(
                            RULE_SEMANTIC_INSTRUCTION,
                            ev.range(),
                            format!("instructed head motion on {c} is missing (event {e})"),
                            vec![edit],
                        );
                    }
                }
                Directive::Blink => {
                    let th = rules.blink_duration.threshold;
                    if blink_episodes(seq, th).is_empty() {
                        let len = si.blink_frames.min(span.len()).max(1);
                        let mid = span.start + span.len().saturating_sub(len) / 2;
                        let r = mid..(mid + len).min(n);
                        let edits = [Channel::Au43L, Channel::Au43R]
                            .map(|c| Edit::ClampBelow {
                                channel: c,
                                span: span_1(&r),
                                value: 0.9,
                            })
                            .to_vec();
                        out.fail(
                            RULE_SEMANTIC_INSTRUCTION,
                            ev.range(),
                            format!("instructed blink is missing (event {e})"),
                            edits,
                        );
                    }
                }
                other => {
                    for c in other.active_channels() {
                        let v = seq.channel(c);
                        if max_over(&v, all.clone()) < si.active {
                            let lo = ev.target(c).map_or(si.active, |iv| iv.lo.max(si.active));
                            out.fail(
                                RULE_SEMANTIC_INSTRUCTION,
                                ev.range(),
                                format!("instructed {c} never activates (event {e})"),
                                vec![Edit::ClampBelow {
                                    channel: c,
                                    span: span_1(&span),
                                    value: lo,
                                }],
                            );
                        }
                    }
                }
            }
        }
    }

    let sl = &rules.semantic_label;
    if sl.enabled && n > 0 {
        match templates.get(label) {
            None => out.fail(
                RULE_SEMANTIC_LABEL,
                all.clone(),
                format!("unknown label `{label}`"),
                Vec::new(),
            ),
            Some(t) => {
                for c in required_channels(t, instructions) {
                    let v = seq.channel(c);
                    if c.is_head() {
                        let range = max_over(&v, all.clone()) - min_over(&v, all.clone());
                        if range < sl.head_range_deg {
                            out.fail(
                                RULE_SEMANTIC_LABEL,
                                all.clone(),
                                format!(
                                    "{label} needs {c} motion of {:.1} deg, found {range:.2}",
                                    sl.head_range_deg
                                ),
                                Vec::new(),
                            );
                        }
                    } else if max_over(&v, all.clone()) < sl.active {
                        out.fail(
                            RULE_SEMANTIC_LABEL,
                            all.clone(),
                            format!("{label} needs {c} active"),
                            Vec::new(),
                        );
                    }
                }
            }
        }
    }

    out.finish(rules, &SEMANTIC_RULES)
}

/// Both checks merged into one report.
pub fn check(
    seq: &ControlSequence,
    plan: &Plan,
    label: &str,
    instructions: Option<&str>,
    templates: &TemplateTable,
    rules: &RuleSet,
) -> CriticReport {
    check_physiology(seq, plan, rules).merge(check_semantic(
        seq,
        plan,
        label,
        instructions,
        templates,
        rules,
    ))
}

/// Applies `edits` in order, then re-projects every frame onto the valid set.
pub fn apply_edits(seq: &ControlSequence, edits: &[Edit], limits: &HeadLimits) -> ControlSequence {
    let mut frames = seq.frames().to_vec();
    let n = frames.len();
    let clip = |s: &FrameSpan| s.range().start.min(n)..s.range().end.min(n);
    for edit in edits {
        match *edit {
            Edit::ClampAbove {
                channel,
                span,
                value,
            } => {
                for f in &mut frames[clip(&span)] {
                    f.set(channel, f.get(channel).min(value));
                }
            }
            Edit::ClampBelow {
                channel,
                span,
                value,
            } => {
                for f in &mut frames[clip(&span)] {
                    f.set(channel, f.get(channel).max(value));
                }
            }
            Edit::Symmetrize { span, cap } => {
                let half = 0.5 * (cap - 1e-9).max(0.0);
                for f in &mut frames[clip(&span)] {
                    let (l, r) = (f.get(Channel::Au43L), f.get(Channel::Au43R));
                    if (l - r).abs() > cap - 1e-9 {
                        let m = 0.5 * (l + r);
                        let s = if l > r { 1.0 } else { -1.0 };
                        f.set(Channel::Au43L, m + s * half);
                        f.set(Channel::Au43R, m - s * half);
                    }
                }
            }
            Edit::LimitRate {
                channel,
                span,
                max_delta,
            } => {
                let r = clip(&span);
                for t in r.start.max(1)..r.end {
                    let prev = frames[t - 1].get(channel);
                    let d = (frames[t].get(channel) - prev).clamp(-max_delta, max_delta);
                    frames[t].set(channel, prev + d);
                }
            }
        }
    }
    for f in frames.iter_mut() {
        *f = f.project_valid(limits);
    }
    ControlSequence::new(frames, seq.fps()).expect("edits keep the sequence non-empty")
}

/// What the loop did after a check round.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Action {
    Accept,
    ApplyEdits { count: usize },
    Replan { level: u32 },
    GiveUp { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditRound {
    pub round: usize,
    pub report: CriticReport,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditTrail {
    pub verdict: Verdict,
    pub composition_revisions: usize,
    pub replans: usize,
    pub rounds: Vec<AuditRound>,
}

/// Everything the loop needs to re-plan and recompose.
#[derive(Clone, Debug)]
pub struct RefineContext<'a> {
    pub label: &'a str,
    pub instructions: Option<&'a str>,
    pub initial_pose: InitialPose,
    pub templates: &'a TemplateTable,
    pub rules: &'a RuleSet,
    pub compose: ComposeOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub sequence: ControlSequence,
    pub plan: Plan,
    pub audit: AuditTrail,
}

/// Critic-guided revision: edits first, re-planning once edits run out.
/// Runs at most `max_comp_revisions + max_replans + 1` check rounds.
pub fn refine(
    seq: ControlSequence,
    plan: &Plan,
    lib: &PrototypeLibrary,
    ctx: &RefineContext<'_>,
    max_comp_revisions: usize,
    max_replans: usize,
) -> Refined {
    let mut seq = seq;
    let mut plan = plan.clone();
    let mut audit = AuditTrail {
        verdict: Verdict::Fail,
        composition_revisions: 0,
        replans: 0,
        rounds: Vec::new(),
    };
    loop {
        let report = check(
            &seq,
            &plan,
            ctx.label,
            ctx.instructions,
            ctx.templates,
            ctx.rules,
        );
        let round = audit.rounds.len();
        if report.verdict == Verdict::Pass {
            audit.verdict = Verdict::Pass;
            audit.rounds.push(AuditRound {
                round,
                report,
                action: Action::Accept,
            });
            break;
        }
        let edits = report.edits();
        if !edits.is_empty() && audit.composition_revisions < max_comp_revisions {
            seq = apply_edits(&seq, &edits, &ctx.compose.limits);
            audit.composition_revisions += 1;
            audit.rounds.push(AuditRound {
                round,
                report,
                action: Action::ApplyEdits { count: edits.len() },
            });
            continue;
        }
        if audit.replans < max_replans {
            let level = audit.replans as u32 + 1;
            let req = PlanRequest {
                label: ctx.label,
                total_frames: plan.total_frames,
                fps: plan.fps,
                instructions: ctx.instructions,
                initial_pose: ctx.initial_pose,
            };
            let next =
                plan_relaxed(&req, ctx.templates, level, &ctx.compose.limits).and_then(|p| {
                    compose_with(&p, lib, &ctx.initial_pose, &ctx.compose).map(|c| (p, c.sequence))
                });
            match next {
                Ok((p, s)) => {
                    plan = p;
                    seq = s;
                    audit.replans += 1;
                    audit.rounds.push(AuditRound {
                        round,
                        report,
                        action: Action::Replan { level },
                    });
                    continue;
                }
                Err(e) => {
                    audit.rounds.push(AuditRound {
                        round,
                        report,
                        action: Action::GiveUp {
                            reason: format!("re-planning failed: {e}"),
                        },
                    });
                    break;
                }
            }
        }
        let reason = if edits.is_empty() {
            "no local repair available"
        } else {
            "revision budget exhausted"
        };
        audit.rounds.push(AuditRound {
            round,
            report,
            action: Action::GiveUp {
                reason: reason.into(),
            },
        });
        break;
    }
    Refined {
        sequence: seq,
        plan,
        audit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlState;
    use crate::demo::demo_library;
    use std::println;

    fn compile(
        label: &str,
        t: usize,
        instructions: Option<&str>,
    ) -> (ControlSequence, Plan, PrototypeLibrary) {
        let templates = TemplateTable::default();
        let req = PlanRequest {
            label,
            total_frames: t,
            fps: 25.0,
            instructions,
            initial_pose: InitialPose::default(),
        };
        let plan = plan_relaxed(&req, &templates, 0, &HeadLimits::default()).unwrap();
        let lib = demo_library().unwrap();
        let seq = compose_with(
            &plan,
            &lib,
            &InitialPose::default(),
            &ComposeOptions::default(),
        )
        .unwrap()
        .sequence;
        (seq, plan, lib)
    }

    #[test]
    fn every_category_passes_at_fifty_frames() {
        let templates = TemplateTable::default();
        let rules = RuleSet::default();
        let mut bad = std::vec::Vec::new();
        for label in templates.labels() {
            let (seq, plan, _) = compile(label, 50, None);
            let report = check(&seq, &plan, label, None, &templates, &rules);
            if report.verdict != Verdict::Pass {
                for c in report.failures() {
                    println!("{label}: {} {:?} {}", c.rule, c.span, c.message);
                }
                bad.push(label);
            }
        }
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn runs_split_on_gaps() {
        let v = [0, 1, 1, 0, 1];
        assert_eq!(runs(5, |t| v[t] == 1), vec![1..3, 4..5]);
    }

    #[test]
    fn symmetrize_brings_gap_under_cap() {
        let f = ControlState::zero().with(Channel::Au43L, 0.8);
        let seq = ControlSequence::new(vec![f; 3], 25.0).unwrap();
        let out = apply_edits(
            &seq,
            &[Edit::Symmetrize {
                span: FrameSpan { start: 1, end: 3 },
                cap: 0.5,
            }],
            &HeadLimits::default(),
        );
        for f in out.frames() {
            assert!((f.get(Channel::Au43L) - f.get(Channel::Au43R)).abs() < 0.5);
            assert!((f.get(Channel::Au43L) + f.get(Channel::Au43R) - 0.8).abs() < 1e-12);
        }
    }
}
