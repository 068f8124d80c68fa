//! Mapping layer: controls → 62 eye-region keypoints.
//!
//! A canonical 62-point template is deformed linearly by the AU bases,
//! pupil/iris points are offset by the gaze channels, the point set is
//! rotated rigidly about the template centroid and finally projected with a
//! weak-perspective camera into normalized image coordinates.
//!
//! Conventions: `+x` points toward the subject's left (image right), `+y`
//! up, `+z` toward the camera, which looks down `−z`. Head rotation is
//! `R = R_roll · R_pitch · R_yaw` with yaw about `y`, pitch about `x` and roll
//! about the view axis `z`. Positive yaw turns the face toward `+x`,
//! positive pitch raises the face, positive roll takes `+x` onto `+y`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::control::{
    validate_control_state_with, Channel, ControlSequence, ControlState, HeadLimits, AU_COUNT,
    GAZE_COUNT,
};
use crate::error::{Error, Result};

pub const POINT_COUNT: usize = 62;
pub const LAYOUT_NAME: &str = "cogportrait-62-v1";

pub const LID_POINTS: usize = 8;
pub const IRIS_POINTS: usize = 4;
pub const EYE_POINTS: usize = 2 * LID_POINTS + IRIS_POINTS + 1;
pub const BROW_POINTS: usize = 10;

pub type Points3 = [Vector3<f64>; POINT_COUNT];

/// Which side of the face, from the subject's point of view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Sign of the canonical `x` coordinate on this side.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Index layout of the 62 points: per eye (left first) 8 upper-lid, 8
/// lower-lid, 4 iris and 1 pupil point, then 10 brow points per side.
pub mod layout {
    use super::*;
    use core::ops::Range;

    fn eye_base(side: Side) -> usize {
        match side {
            Side::Left => 0,
            Side::Right => EYE_POINTS,
        }
    }

    pub fn upper_lid(side: Side) -> Range<usize> {
        let b = eye_base(side);
        b..b + LID_POINTS
    }

    pub fn lower_lid(side: Side) -> Range<usize> {
        let b = eye_base(side) + LID_POINTS;
        b..b + LID_POINTS
    }

    pub fn iris(side: Side) -> Range<usize> {
        let b = eye_base(side) + 2 * LID_POINTS;
        b..b + IRIS_POINTS
    }

    pub fn pupil(side: Side) -> usize {
        eye_base(side) + 2 * LID_POINTS + IRIS_POINTS
    }

    pub fn brow(side: Side) -> Range<usize> {
        let b = 2 * EYE_POINTS
            + match side {
                Side::Left => 0,
                Side::Right => BROW_POINTS,
            };
        b..b + BROW_POINTS
    }

    /// Pupil and iris points of both eyes.
    pub fn is_gaze_point(i: usize) -> bool {
        [Side::Left, Side::Right]
            .into_iter()
            .any(|s| iris(s).contains(&i) || pupil(s) == i)
    }

    /// Index of the bilateral counterpart of point `i`.
    pub fn mirror_index(i: usize) -> usize {
        if i < 2 * EYE_POINTS {
            (i + EYE_POINTS) % (2 * EYE_POINTS)
        } else {
            let j = i - 2 * EYE_POINTS;
            2 * EYE_POINTS + (j + BROW_POINTS) % (2 * BROW_POINTS)
        }
    }
}

const EYE_CENTER_X: f64 = 0.6;
const EYE_HALF_WIDTH: f64 = 0.25;
const UPPER_LID_HEIGHT: f64 = 0.12;
const LOWER_LID_DEPTH: f64 = 0.08;
const IRIS_RADIUS: f64 = 0.09;

fn upper_param(k: usize) -> f64 {
    k as f64 / (LID_POINTS - 1) as f64
}

fn lower_param(k: usize) -> f64 {
    (k + 1) as f64 / (LID_POINTS + 1) as f64
}

fn brow_param(k: usize) -> f64 {
    k as f64 / (BROW_POINTS - 1) as f64
}

fn eye_surface_z(local_x: f64) -> f64 {
    0.1 - 0.3 * local_x * local_x
}

/// Identity-specific rest-pose landmarks in canonical face units.
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralBaseline {
    pub points: Points3,
}

impl NeutralBaseline {
    /// The shipped canonical template.
    pub fn canonical() -> Self {
        let mut points = [Vector3::zeros(); POINT_COUNT];
        for side in [Side::Left, Side::Right] {
            let sg = side.sign();
            // Lids run from the inner (medial) corner to the outer corner.
            for k in 0..LID_POINTS {
                let s = upper_param(k);
                let lx = -EYE_HALF_WIDTH + 2.0 * EYE_HALF_WIDTH * s;
                points[layout::upper_lid(side).start + k] = Vector3::new(
                    sg * (EYE_CENTER_X + lx),
                    UPPER_LID_HEIGHT * libm::sin(PI * s),
                    eye_surface_z(lx),
                );
                let s = lower_param(k);
                let lx = -EYE_HALF_WIDTH + 2.0 * EYE_HALF_WIDTH * s;
                points[layout::lower_lid(side).start + k] = Vector3::new(
                    sg * (EYE_CENTER_X + lx),
                    -LOWER_LID_DEPTH * libm::sin(PI * s),
                    eye_surface_z(lx),
                );
            }
            // Iris: top, outer, bottom, inner.
            let offsets = [
                (0.0, IRIS_RADIUS),
                (IRIS_RADIUS, 0.0),
                (0.0, -IRIS_RADIUS),
                (-IRIS_RADIUS, 0.0),
            ];
            for (k, (dx, dy)) in offsets.into_iter().enumerate() {
                points[layout::iris(side).start + k] =
                    Vector3::new(sg * (EYE_CENTER_X + dx), dy, 0.13);
            }
            points[layout::pupil(side)] = Vector3::new(sg * EYE_CENTER_X, 0.0, 0.15);
            for k in 0..BROW_POINTS {
                let s = brow_param(k);
                let x = 0.25 + 0.8 * s;
                points[layout::brow(side).start + k] = Vector3::new(
                    sg * x,
                    0.40 + 0.08 * libm::sin(PI * s),
                    0.12 - 0.25 * (x - EYE_CENTER_X) * (x - EYE_CENTER_X),
                );
            }
        }
        Self { points }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p;
        }
        c / POINT_COUNT as f64
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Largest deviation from bilateral symmetry about the `x = 0` plane.
    pub fn asymmetry(&self) -> f64 {
        (0..POINT_COUNT)
            .map(|i| {
                let p = self.points[i];
                let q = self.points[layout::mirror_index(i)];
                (p.x + q.x)
                    .abs()
                    .max((p.y - q.y).abs())
                    .max((p.z - q.z).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Weak-perspective camera: orthographic projection plus scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub scale: f64,
    pub principal: [f64; 2],
}

impl Default for Projection {
    fn default() -> Self {
        Self {
            scale: 0.25,
            principal: [0.5, 0.5],
        }
    }
}

impl Projection {
    /// Image `v` grows downward, canonical `y` upward.
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            self.principal[0] + self.scale * p.x,
            self.principal[1] - self.scale * p.y,
        ]
    }
}

/// Linear deformation model standing in for a dense face mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationModel {
    pub template: NeutralBaseline,
    /// Per-AU displacement per unit intensity, in [`Channel::AUS`] order.
    pub au_bases: Vec<Points3>,
    /// Per-direction displacement of the pupil/iris points, in [`Channel::GAZE`] order.
    pub gaze_offsets: Vec<Points3>,
    pub projection: Projection,
    pub limits: HeadLimits,
}

impl Default for DeformationModel {
    fn default() -> Self {
        Self::canonical()
    }
}

fn side_of(channel: Channel) -> Option<Side> {
    match channel {
        Channel::Au2L | Channel::Au4L | Channel::Au5L | Channel::Au43L => Some(Side::Left),
        Channel::Au2R | Channel::Au4R | Channel::Au5R | Channel::Au43R => Some(Side::Right),
        _ => None,
    }
}

fn au_basis(channel: Channel) -> Points3 {
    let mut d = [Vector3::zeros(); POINT_COUNT];
    let sides: &[Side] = match side_of(channel) {
        Some(Side::Left) => &[Side::Left],
        Some(Side::Right) => &[Side::Right],
        None => &[Side::Left, Side::Right],
    };
    for &side in sides {
        let sg = side.sign();
        match channel {
            Channel::Au1 => {
                for k in 0..BROW_POINTS {
                    let inner = 1.0 - brow_param(k);
                    d[layout::brow(side).start + k] = Vector3::new(0.0, 0.14 * inner, 0.01 * inner);
                }
            }
            Channel::Au2L | Channel::Au2R => {
                for k in 0..BROW_POINTS {
                    let outer = brow_param(k);
                    d[layout::brow(side).start + k] =
                        Vector3::new(sg * 0.01 * outer, 0.14 * outer, 0.0);
                }
            }
            Channel::Au4L | Channel::Au4R => {
                for k in 0..BROW_POINTS {
                    let inner = 1.0 - brow_param(k);
                    d[layout::brow(side).start + k] =
                        Vector3::new(-sg * 0.05 * inner, -0.10 * (0.5 + 0.5 * inner), 0.01);
                }
            }
            Channel::Au5L | Channel::Au5R => {
                for k in 0..LID_POINTS {
                    let w = libm::sin(PI * upper_param(k));
                    d[layout::upper_lid(side).start + k] = Vector3::new(0.0, 0.06 * w, 0.02 * w);
                }
            }
            Channel::Au7 => {
                for k in 0..LID_POINTS {
                    let s = upper_param(k);
                    let w = libm::sin(PI * s);
                    // Corners draw toward the eye centre while the lids narrow.
                    let inward = -sg * 0.02 * libm::cos(PI * s);
                    d[layout::upper_lid(side).start + k] = Vector3::new(-inward, -0.02 * w, 0.0);
                    let s = lower_param(k);
                    let w = libm::sin(PI * s);
                    d[layout::lower_lid(side).start + k] = Vector3::new(0.0, 0.036 * w, 0.005 * w);
                }
            }
            Channel::Au43L | Channel::Au43R => {
                for k in 0..LID_POINTS {
                    let w = libm::sin(PI * upper_param(k));
                    d[layout::upper_lid(side).start + k] = Vector3::new(0.0, -0.13 * w, -0.01 * w);
                    let w = libm::sin(PI * lower_param(k));
                    d[layout::lower_lid(side).start + k] = Vector3::new(0.0, 0.015 * w, 0.0);
                }
            }
            _ => {}
        }
    }
    d
}

fn gaze_offset(channel: Channel) -> Points3 {
    let dir = match channel {
        Channel::GazeLeft => Vector3::new(0.10, 0.0, 0.0),
        Channel::GazeRight => Vector3::new(-0.10, 0.0, 0.0),
        Channel::GazeUp => Vector3::new(0.0, 0.07, 0.0),
        Channel::GazeDown => Vector3::new(0.0, -0.07, 0.0),
        _ => Vector3::zeros(),
    };
    let mut d = [Vector3::zeros(); POINT_COUNT];
    for (i, slot) in d.iter_mut().enumerate() {
        if layout::is_gaze_point(i) {
            *slot = dir;
        }
    }
    d
}

impl DeformationModel {
    pub fn canonical() -> Self {
        let template = NeutralBaseline::canonical();
        let au_bases = Channel::AUS.iter().map(|&c| au_basis(c)).collect();
        let gaze_offsets = Channel::GAZE.iter().map(|&c| gaze_offset(c)).collect();
        Self {
            template,
            au_bases,
            gaze_offsets,
            projection: Projection::default(),
            limits: HeadLimits::default(),
        }
    }

    /// Template plus AU and gaze displacement, before any head rotation.
    pub fn deform(&self, au: &[f64; AU_COUNT], gaze: &[f64; GAZE_COUNT]) -> Points3 {
        let mut pts = self.template.points;
        for (basis, &a) in self.au_bases.iter().zip(au) {
            if a != 0.0 {
                for (p, d) in pts.iter_mut().zip(basis) {
                    *p += d * a;
                }
            }
        }
        for (offset, &g) in self.gaze_offsets.iter().zip(gaze) {
            if g != 0.0 {
                for (p, d) in pts.iter_mut().zip(offset) {
                    *p += d * g;
                }
            }
        }
        pts
    }

    /// Rotates `points` about the template centroid.
    pub fn rotate(&self, points: &Points3, rotation: &Matrix3<f64>) -> Points3 {
        let c = self.template.centroid();
        let mut out = *points;
        for p in out.iter_mut() {
            *p = rotation * (*p - c) + c;
        }
        out
    }

    pub fn project(&self, points: &Points3) -> KeypointFrame {
        let mut out = [[0.0; 2]; POINT_COUNT];
        for (o, p) in out.iter_mut().zip(points) {
            *o = self.projection.project(p);
        }
        KeypointFrame { points: out }
    }
}

/// Rotation for head pose angles in degrees, `R_roll · R_pitch · R_yaw`.
pub fn rotation_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = libm::sincos(yaw.to_radians());
    // Positive pitch raises the face, i.e. rotates about x by -pitch.
    let (sp, cp) = libm::sincos(-pitch.to_radians());
    let (sr, cr) = libm::sincos(roll.to_radians());
    let r_yaw = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let r_pitch = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let r_roll = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    r_roll * r_pitch * r_yaw
}

/// Inverse of [`rotation_matrix`] for pitch strictly inside (−90°, 90°).
pub fn euler_from_matrix(r: &Matrix3<f64>) -> [f64; 3] {
    let a = libm::asin(r[(2, 1)].clamp(-1.0, 1.0));
    let yaw = libm::atan2(-r[(2, 0)], r[(2, 2)]);
    let roll = libm::atan2(-r[(0, 1)], r[(1, 1)]);
    [yaw.to_degrees(), (-a).to_degrees(), roll.to_degrees()]
}

/// 62 landmarks in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointFrame {
    pub points: [[f64; 2]; POINT_COUNT],
}

impl KeypointFrame {
    pub fn iris_center(&self, side: Side) -> [f64; 2] {
        let mut c = [0.0; 2];
        for i in layout::iris(side) {
            c[0] += self.points[i][0];
            c[1] += self.points[i][1];
        }
        [c[0] / IRIS_POINTS as f64, c[1] / IRIS_POINTS as f64]
    }

    pub fn pupil(&self, side: Side) -> [f64; 2] {
        self.points[layout::pupil(side)]
    }

    pub fn inter_pupil_distance(&self) -> f64 {
        let (l, r) = (self.pupil(Side::Left), self.pupil(Side::Right));
        libm::hypot(l[0] - r[0], l[1] - r[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub frames: Vec<KeypointFrame>,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence3D {
    pub frames: Vec<Points3>,
    pub fps: f64,
}

impl KeypointSequence3D {
    pub fn project(&self, model: &DeformationModel) -> KeypointSequence {
        KeypointSequence {
            frames: self.frames.iter().map(|f| model.project(f)).collect(),
            fps: self.fps,
        }
    }
}

fn check_state(c: &ControlState, model: &DeformationModel, frame: usize) -> Result<()> {
    let report = validate_control_state_with(c, &model.limits, frame);
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(Error::InvalidControl {
            frame,
            message: alloc::format!("{}: {}", v.channel, v.message),
        }),
    }
}

/// Maps one control state to its 2-D keypoints and the rotated 3-D points.
pub fn map_frame(c: &ControlState, model: &DeformationModel) -> Result<(KeypointFrame, Points3)> {
    map_frame_at(c, model, 0)
}

fn map_frame_at(
    c: &ControlState,
    model: &DeformationModel,
    frame: usize,
) -> Result<(KeypointFrame, Points3)> {
    check_state(c, model, frame)?;
    let deformed = model.deform(&c.au, &c.gaze);
    let rotation = rotation_matrix(c.head[0], c.head[1], c.head[2]);
    let rotated = model.rotate(&deformed, &rotation);
    Ok((model.project(&rotated), rotated))
}

pub fn map_sequence(
    seq: &ControlSequence,
    model: &DeformationModel,
) -> Result<(KeypointSequence, KeypointSequence3D)> {
    let mut frames2 = Vec::with_capacity(seq.len());
    let mut frames3 = Vec::with_capacity(seq.len());
    for (i, c) in seq.frames().iter().enumerate() {
        let (k2, k3) = map_frame_at(c, model, i)?;
        frames2.push(k2);
        frames3.push(k3);
    }
    Ok((
        KeypointSequence {
            frames: frames2,
            fps: seq.fps(),
        },
        KeypointSequence3D {
            frames: frames3,
            fps: seq.fps(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DeformationModel {
        DeformationModel::canonical()
    }

    #[test]
    fn template_is_symmetric_and_finite() {
        let t = NeutralBaseline::canonical();
        assert!(t.is_finite());
        assert!(t.asymmetry() < 1e-12);
        assert!(t.centroid().x.abs() < 1e-12);
    }

    #[test]
    fn layout_partitions_all_points() {
        let mut seen = [0u8; POINT_COUNT];
        for side in [Side::Left, Side::Right] {
            for r in [
                layout::upper_lid(side),
                layout::lower_lid(side),
                layout::iris(side),
                layout::brow(side),
            ] {
                for i in r {
                    seen[i] += 1;
                }
            }
            seen[layout::pupil(side)] += 1;
        }
        assert!(seen.iter().all(|&n| n == 1));
        for i in 0..POINT_COUNT {
            assert_eq!(layout::mirror_index(layout::mirror_index(i)), i);
        }
    }

    #[test]
    fn zero_controls_project_template() {
        let m = model();
        let (k2, k3) = map_frame(&ControlState::zero(), &m).unwrap();
        for i in 0..POINT_COUNT {
            assert!((k3[i] - m.template.points[i]).amax() < 1e-15);
        }
        let expected = m.project(&m.template.points);
        for (a, b) in k2.points.iter().zip(&expected.points) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_identity_and_axes() {
        assert_eq!(rotation_matrix(0.0, 0.0, 0.0), Matrix3::identity());
        let r = rotation_matrix(90.0, 0.0, 0.0);
        assert!((r * Vector3::new(0.0, 0.0, 1.0) - Vector3::new(1.0, 0.0, 0.0)).amax() < 1e-15);
        let r = rotation_matrix(0.0, 0.0, 90.0);
        assert!((r * Vector3::x() - Vector3::y()).amax() < 1e-15);
        // Positive pitch tilts the facing direction upward.
        let r = rotation_matrix(0.0, 30.0, 0.0);
        assert!((r * Vector3::z()).y > 0.0);
    }

    #[test]
    fn roll_quarter_turn_maps_x_onto_y() {
        let m = model();
        let c = m.template.centroid();
        // The default roll range stops at 45 degrees; widen it for this probe.
        let mut limits = m.limits;
        limits.roll = 90.0;
        let m90 = DeformationModel {
            limits,
            ..m.clone()
        };
        let (_, k3) = map_frame(&ControlState::zero().with(Channel::Roll, 90.0), &m90).unwrap();
        let i = layout::pupil(Side::Left);
        let rel = m.template.points[i] - c;
        let expected = Vector3::new(-rel.y, rel.x, rel.z) + c;
        assert!((k3[i] - expected).amax() < 1e-12);
    }

    #[test]
    fn euler_round_trip() {
        for &(y, p, r) in &[
            (10.0, -20.0, 5.0),
            (-80.0, 55.0, -40.0),
            (0.0, 0.0, 0.0),
            (33.3, 1.0, 44.0),
        ] {
            let e = euler_from_matrix(&rotation_matrix(y, p, r));
            assert!((e[0] - y).abs() < 1e-9 && (e[1] - p).abs() < 1e-9 && (e[2] - r).abs() < 1e-9);
        }
    }

    #[test]
    fn left_closure_touches_only_left_lids() {
        let m = model();
        let (_, k3) = map_frame(&ControlState::zero().with(Channel::Au43L, 1.0), &m).unwrap();
        for i in 0..POINT_COUNT {
            let moved = (k3[i] - m.template.points[i]).amax() > 1e-15;
            let left_lid = layout::upper_lid(Side::Left).contains(&i)
                || layout::lower_lid(Side::Left).contains(&i);
            if !left_lid {
                assert!(!moved, "point {i} moved");
            }
        }
        // Upper lid drops, lower lid rises.
        let u = layout::upper_lid(Side::Left).start + 3;
        let l = layout::lower_lid(Side::Left).start + 3;
        assert!(k3[u].y < m.template.points[u].y);
        assert!(k3[l].y > m.template.points[l].y);
    }

    #[test]
    fn bases_are_mirrored() {
        let m = model();
        for (a, b) in [(1, 2), (3, 4), (5, 6), (8, 9)] {
            for i in 0..POINT_COUNT {
                let p = m.au_bases[a][i];
                let q = m.au_bases[b][layout::mirror_index(i)];
                assert!(
                    (p.x + q.x).abs() < 1e-12
                        && (p.y - q.y).abs() < 1e-12
                        && (p.z - q.z).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn invalid_state_is_rejected() {
        let c = ControlState::zero()
            .with(Channel::GazeUp, 0.2)
            .with(Channel::GazeDown, 0.1);
        assert!(matches!(
            map_frame(&c, &model()),
            Err(Error::InvalidControl { .. })
        ));
    }

    #[test]
    fn keypoints_stay_in_unit_square() {
        let m = model();
        let c = ControlState::zero()
            .with(Channel::Au1, 1.0)
            .with(Channel::Au2L, 1.0)
            .with(Channel::GazeLeft, 1.0)
            .with(Channel::Yaw, 90.0)
            .with(Channel::Pitch, 60.0)
            .with(Channel::Roll, -45.0);
        let (k2, _) = map_frame(&c, &m).unwrap();
        assert!(k2.points.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
