//! The 17-channel control space: 10 AU intensities, 4 gaze magnitudes and
//! 3 head-pose angles, plus sequences over it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

pub const AU_COUNT: usize = 10;
pub const GAZE_COUNT: usize = 4;
pub const HEAD_COUNT: usize = 3;
pub const CHANNEL_COUNT: usize = AU_COUNT + GAZE_COUNT + HEAD_COUNT;

/// Threshold above which a lid raise and a lid closure on the same side conflict.
pub const LID_CONFLICT_LEVEL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    Au,
    Gaze,
    Head,
}

/// One named channel of the control space, in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Au1,
    Au2L,
    Au2R,
    Au4L,
    Au4R,
    Au5L,
    Au5R,
    Au7,
    Au43L,
    Au43R,
    GazeLeft,
    GazeRight,
    GazeUp,
    GazeDown,
    Yaw,
    Pitch,
    Roll,
}

impl Channel {
    pub const ALL: [Channel; CHANNEL_COUNT] = [
        Channel::Au1,
        Channel::Au2L,
        Channel::Au2R,
        Channel::Au4L,
        Channel::Au4R,
        Channel::Au5L,
        Channel::Au5R,
        Channel::Au7,
        Channel::Au43L,
        Channel::Au43R,
        Channel::GazeLeft,
        Channel::GazeRight,
        Channel::GazeUp,
        Channel::GazeDown,
        Channel::Yaw,
        Channel::Pitch,
        Channel::Roll,
    ];

    pub const AUS: [Channel; AU_COUNT] = [
        Channel::Au1,
        Channel::Au2L,
        Channel::Au2R,
        Channel::Au4L,
        Channel::Au4R,
        Channel::Au5L,
        Channel::Au5R,
        Channel::Au7,
        Channel::Au43L,
        Channel::Au43R,
    ];

    pub const GAZE: [Channel; GAZE_COUNT] = [
        Channel::GazeLeft,
        Channel::GazeRight,
        Channel::GazeUp,
        Channel::GazeDown,
    ];

    pub const HEAD: [Channel; HEAD_COUNT] = [Channel::Yaw, Channel::Pitch, Channel::Roll];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Channel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Au1 => "AU1",
            Channel::Au2L => "AU2_L",
            Channel::Au2R => "AU2_R",
            Channel::Au4L => "AU4_L",
            Channel::Au4R => "AU4_R",
            Channel::Au5L => "AU5_L",
            Channel::Au5R => "AU5_R",
            Channel::Au7 => "AU7",
            Channel::Au43L => "AU43_L",
            Channel::Au43R => "AU43_R",
            Channel::GazeLeft => "gaze_left",
            Channel::GazeRight => "gaze_right",
            Channel::GazeUp => "gaze_up",
            Channel::GazeDown => "gaze_down",
            Channel::Yaw => "yaw",
            Channel::Pitch => "pitch",
            Channel::Roll => "roll",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub fn kind(self) -> ChannelKind {
        match self.index() {
            i if i < AU_COUNT => ChannelKind::Au,
            i if i < AU_COUNT + GAZE_COUNT => ChannelKind::Gaze,
            _ => ChannelKind::Head,
        }
    }

    pub fn is_head(self) -> bool {
        self.kind() == ChannelKind::Head
    }

    /// The channel a left/right mirror maps this one onto.
    pub fn mirrored(self) -> Channel {
        match self {
            Channel::Au2L => Channel::Au2R,
            Channel::Au2R => Channel::Au2L,
            Channel::Au4L => Channel::Au4R,
            Channel::Au4R => Channel::Au4L,
            Channel::Au5L => Channel::Au5R,
            Channel::Au5R => Channel::Au5L,
            Channel::Au43L => Channel::Au43R,
            Channel::Au43R => Channel::Au43L,
            Channel::GazeLeft => Channel::GazeRight,
            Channel::GazeRight => Channel::GazeLeft,
            other => other,
        }
    }

    /// Opposing gaze direction, for gaze channels only.
    pub fn opposite_gaze(self) -> Option<Channel> {
        match self {
            Channel::GazeLeft => Some(Channel::GazeRight),
            Channel::GazeRight => Some(Channel::GazeLeft),
            Channel::GazeUp => Some(Channel::GazeDown),
            Channel::GazeDown => Some(Channel::GazeUp),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Channel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Channel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let name = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        Channel::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(alloc::format!("unknown channel `{name}`")))
    }
}

/// Legal head-pose ranges, symmetric about zero, in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default)
)]
pub struct HeadLimits {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Default for HeadLimits {
    fn default() -> Self {
        Self {
            yaw: 90.0,
            pitch: 60.0,
            roll: 45.0,
        }
    }
}

impl HeadLimits {
    /// Half-width of the legal range of `channel` (1.0 for unit channels).
    pub fn half_width(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Yaw => self.yaw,
            Channel::Pitch => self.pitch,
            Channel::Roll => self.roll,
            _ => 1.0,
        }
    }

    pub fn range(&self, channel: Channel) -> (f64, f64) {
        if channel.is_head() {
            let h = self.half_width(channel);
            (-h, h)
        } else {
            (0.0, 1.0)
        }
    }
}

/// One frame of the control space.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlState {
    pub au: [f64; AU_COUNT],
    pub gaze: [f64; GAZE_COUNT],
    /// yaw, pitch, roll in degrees.
    pub head: [f64; HEAD_COUNT],
}

impl ControlState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn get(&self, channel: Channel) -> f64 {
        let i = channel.index();
        match channel.kind() {
            ChannelKind::Au => self.au[i],
            ChannelKind::Gaze => self.gaze[i - AU_COUNT],
            ChannelKind::Head => self.head[i - AU_COUNT - GAZE_COUNT],
        }
    }

    pub fn set(&mut self, channel: Channel, value: f64) {
        let i = channel.index();
        match channel.kind() {
            ChannelKind::Au => self.au[i] = value,
            ChannelKind::Gaze => self.gaze[i - AU_COUNT] = value,
            ChannelKind::Head => self.head[i - AU_COUNT - GAZE_COUNT] = value,
        }
    }

    pub fn with(mut self, channel: Channel, value: f64) -> Self {
        self.set(channel, value);
        self
    }

    pub fn to_array(&self) -> [f64; CHANNEL_COUNT] {
        let mut out = [0.0; CHANNEL_COUNT];
        out[..AU_COUNT].copy_from_slice(&self.au);
        out[AU_COUNT..AU_COUNT + GAZE_COUNT].copy_from_slice(&self.gaze);
        out[AU_COUNT + GAZE_COUNT..].copy_from_slice(&self.head);
        out
    }

    pub fn from_array(values: &[f64; CHANNEL_COUNT]) -> Self {
        let mut state = Self::zero();
        state.au.copy_from_slice(&values[..AU_COUNT]);
        state
            .gaze
            .copy_from_slice(&values[AU_COUNT..AU_COUNT + GAZE_COUNT]);
        state.head.copy_from_slice(&values[AU_COUNT + GAZE_COUNT..]);
        state
    }

    /// Left/right mirror image of this state.
    pub fn mirrored(&self) -> Self {
        let mut out = Self::zero();
        for c in Channel::ALL {
            out.set(c.mirrored(), self.get(c));
        }
        out.set(Channel::Yaw, -self.get(Channel::Yaw));
        out.set(Channel::Roll, -self.get(Channel::Roll));
        out
    }

    /// Nearest state satisfying every invariant: channels clamped to their
    /// ranges, opposing gaze magnitudes netted against each other, and the
    /// weaker of a conflicting lid raise/closure pair capped at the conflict level.
    pub fn project_valid(&self, limits: &HeadLimits) -> Self {
        let mut out = *self;
        for c in Channel::ALL {
            let (lo, hi) = limits.range(c);
            let v = out.get(c);
            let v = if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
            out.set(c, v);
        }
        for (a, b) in [
            (Channel::GazeLeft, Channel::GazeRight),
            (Channel::GazeUp, Channel::GazeDown),
        ] {
            let net = out.get(a) - out.get(b);
            out.set(a, net.max(0.0));
            out.set(b, (-net).max(0.0));
        }
        for (raise, close) in [
            (Channel::Au5L, Channel::Au43L),
            (Channel::Au5R, Channel::Au43R),
        ] {
            let (r, c) = (out.get(raise), out.get(close));
            if r > LID_CONFLICT_LEVEL && c > LID_CONFLICT_LEVEL {
                if r < c {
                    out.set(raise, LID_CONFLICT_LEVEL);
                } else {
                    out.set(close, LID_CONFLICT_LEVEL);
                }
            }
        }
        out
    }
}

/// An ordered, non-empty run of control frames at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence {
    frames: Vec<ControlState>,
    fps: f64,
}

impl ControlSequence {
    pub fn new(frames: Vec<ControlState>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidFps(fps));
        }
        Ok(Self { frames, fps })
    }

    /// A sequence of `len` copies of `state`.
    pub fn constant(state: ControlState, len: usize, fps: f64) -> Result<Self> {
        Self::new(alloc::vec![state; len], fps)
    }

    pub fn frames(&self) -> &[ControlState] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [ControlState] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<ControlState> {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Values of a single channel across all frames.
    pub fn channel(&self, channel: Channel) -> Vec<f64> {
        self.frames.iter().map(|f| f.get(channel)).collect()
    }

    pub fn frame_ms(&self) -> f64 {
        1000.0 / self.fps
    }
}

/// Per-channel mean, max and min of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSummary {
    pub mean: [f64; CHANNEL_COUNT],
    pub max: [f64; CHANNEL_COUNT],
    pub min: [f64; CHANNEL_COUNT],
}

impl ChannelSummary {
    pub fn of_frames(frames: &[ControlState]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut sum = [0.0; CHANNEL_COUNT];
        let mut max = [f64::NEG_INFINITY; CHANNEL_COUNT];
        let mut min = [f64::INFINITY; CHANNEL_COUNT];
        for frame in frames {
            for (j, v) in frame.to_array().into_iter().enumerate() {
                sum[j] += v;
                max[j] = max[j].max(v);
                min[j] = min[j].min(v);
            }
        }
        let n = frames.len() as f64;
        let mut mean = [0.0; CHANNEL_COUNT];
        for j in 0..CHANNEL_COUNT {
            // Rounding can push the mean of a constant channel one ulp out of [min, max].
            mean[j] = (sum[j] / n).clamp(min[j], max[j]);
        }
        Ok(Self { mean, max, min })
    }

    pub fn mean_of(&self, channel: Channel) -> f64 {
        self.mean[channel.index()]
    }
}

pub fn channel_summary(seq: &ControlSequence) -> Result<ChannelSummary> {
    ChannelSummary::of_frames(seq.frames())
}

/// A single broken invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub frame: usize,
    pub channel: String,
    pub rule: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(
        &mut self,
        frame: usize,
        channel: impl Into<String>,
        rule: &'static str,
        message: impl Into<String>,
    ) {
        self.violations.push(Violation {
            frame,
            channel: channel.into(),
            rule,
            message: message.into(),
        });
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

pub const RULE_CHANNEL_RANGE: &str = "channel_range";
pub const RULE_OPPOSING_GAZE: &str = "opposing_gaze";
pub const RULE_LID_CONFLICT: &str = "lid_conflict";

pub fn validate_control_state(c: &ControlState) -> ValidationReport {
    validate_control_state_with(c, &HeadLimits::default(), 0)
}

pub fn validate_control_state_with(
    c: &ControlState,
    limits: &HeadLimits,
    frame: usize,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    for ch in Channel::ALL {
        let (lo, hi) = limits.range(ch);
        let v = c.get(ch);
        if !(v >= lo && v <= hi) {
            report.push(
                frame,
                ch.name(),
                RULE_CHANNEL_RANGE,
                format!("value {v} outside [{lo}, {hi}]"),
            );
        }
    }
    for (a, b) in [
        (Channel::GazeLeft, Channel::GazeRight),
        (Channel::GazeUp, Channel::GazeDown),
    ] {
        if c.get(a) * c.get(b) != 0.0 {
            report.push(
                frame,
                format!("{}/{}", a.name(), b.name()),
                RULE_OPPOSING_GAZE,
                "opposing gaze co-active",
            );
        }
    }
    for (raise, close) in [
        (Channel::Au5L, Channel::Au43L),
        (Channel::Au5R, Channel::Au43R),
    ] {
        if c.get(raise) > LID_CONFLICT_LEVEL && c.get(close) > LID_CONFLICT_LEVEL {
            report.push(
                frame,
                format!("{}/{}", raise.name(), close.name()),
                RULE_LID_CONFLICT,
                "lid raise/closure conflict",
            );
        }
    }
    report
}

/// Framewise validation of a whole sequence.
pub fn validate_sequence(seq: &ControlSequence, limits: &HeadLimits) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, frame) in seq.frames().iter().enumerate() {
        report.merge(validate_control_state_with(frame, limits, i));
    }
    report
}

/// Linearly resamples `seq` to `target_len` frames, keeping both endpoints.
pub fn resample_sequence(seq: &ControlSequence, target_len: usize) -> Result<ControlSequence> {
    if target_len == 0 {
        return Err(Error::ZeroTargetLength);
    }
    let src = seq.frames();
    let n = src.len();
    if n == target_len {
        return Ok(seq.clone());
    }
    let mut out = Vec::with_capacity(target_len);
    for i in 0..target_len {
        if n == 1 || target_len == 1 {
            out.push(src[0]);
            continue;
        }
        if i == target_len - 1 {
            out.push(src[n - 1]);
            continue;
        }
        let pos = (i * (n - 1)) as f64 / (target_len - 1) as f64;
        let k = (libm::floor(pos) as usize).min(n - 2);
        let t = pos - k as f64;
        let (a, b) = (src[k].to_array(), src[k + 1].to_array());
        let mut v = [0.0; CHANNEL_COUNT];
        for j in 0..CHANNEL_COUNT {
            v[j] = a[j] + (b[j] - a[j]) * t;
            if j < AU_COUNT + GAZE_COUNT {
                v[j] = v[j].clamp(0.0, 1.0);
            }
        }
        out.push(ControlState::from_array(&v));
    }
    ControlSequence::new(out, seq.fps())
}
