//! Prototype library: labeled control/keypoint trajectories, AU recovery from
//! keypoint traces, and weighted channel-mean retrieval.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::control::{
    Channel, ChannelSummary, ControlSequence, ControlState, HeadLimits, AU_COUNT, CHANNEL_COUNT,
    GAZE_COUNT,
};
use crate::error::{Error, Result};
use crate::linalg::{best_rotation, centroid, nnls_normal};
use crate::mapper::{
    euler_from_matrix, layout, DeformationModel, KeypointSequence3D, Points3, POINT_COUNT,
};

pub use crate::mapper::NeutralBaseline;

pub const LIBRARY_VERSION: u32 = 1;

/// One stored real-behavior trajectory. Head-pose channels are stored
/// relative to the rest pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub label: String,
    pub controls: ControlSequence,
    pub keypoints: KeypointSequence3D,
    pub summary: ChannelSummary,
}

impl Prototype {
    pub fn new(
        label: impl Into<String>,
        controls: ControlSequence,
        keypoints: KeypointSequence3D,
    ) -> Result<Self> {
        let label = label.into();
        if controls.len() != keypoints.frames.len() {
            return Err(Error::RecordLengthMismatch {
                index: 0,
                label,
                controls: controls.len(),
                keypoints: keypoints.frames.len(),
            });
        }
        let summary = crate::control::channel_summary(&controls)?;
        Ok(Self {
            label,
            controls,
            keypoints,
            summary,
        })
    }
}

/// Input to [`build_library`].
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: String,
    pub controls: ControlSequence,
    pub keypoints: KeypointSequence3D,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeLibrary {
    pub prototypes: Vec<Prototype>,
    pub index: BTreeMap<String, Vec<usize>>,
    pub version: u32,
}

impl PrototypeLibrary {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Prototype> {
        self.prototypes.get(id)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn ids_for(&self, label: &str) -> &[usize] {
        self.index.get(label).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn build_library(records: Vec<Record>) -> Result<PrototypeLibrary> {
    let mut lib = PrototypeLibrary {
        version: LIBRARY_VERSION,
        ..Default::default()
    };
    for (i, rec) in records.into_iter().enumerate() {
        let proto =
            Prototype::new(rec.label, rec.controls, rec.keypoints).map_err(|e| match e {
                Error::RecordLengthMismatch {
                    label,
                    controls,
                    keypoints,
                    ..
                } => Error::RecordLengthMismatch {
                    index: i,
                    label,
                    controls,
                    keypoints,
                },
                other => other,
            })?;
        lib.index.entry(proto.label.clone()).or_default().push(i);
        lib.prototypes.push(proto);
    }
    Ok(lib)
}

/// Channel-type weights for retrieval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalWeights(pub [f64; CHANNEL_COUNT]);

impl Default for RetrievalWeights {
    fn default() -> Self {
        let mut w = [1.0; CHANNEL_COUNT];
        for c in Channel::AUS {
            w[c.index()] = 2.0;
        }
        Self(w)
    }
}

/// Weighted L1 distance between a target vector and a prototype's channel
/// means. Head channels are divided by their range half-width so degrees do
/// not swamp unit intensities.
pub fn match_distance(
    target: &[f64; CHANNEL_COUNT],
    means: &[f64; CHANNEL_COUNT],
    weights: &[f64; CHANNEL_COUNT],
    limits: &HeadLimits,
) -> f64 {
    let mut d = 0.0;
    for c in Channel::ALL {
        let j = c.index();
        d += weights[j] * libm::fabs(target[j] - means[j]) / limits.half_width(c);
    }
    d
}

/// Up to `k` prototypes nearest to `target`, ascending by distance, ties by id.
pub fn query(
    lib: &PrototypeLibrary,
    target: &[f64; CHANNEL_COUNT],
    weights: &[f64; CHANNEL_COUNT],
    label_filter: Option<&str>,
    k: usize,
) -> Vec<(usize, f64)> {
    query_with_limits(
        lib,
        target,
        weights,
        label_filter,
        k,
        &HeadLimits::default(),
    )
}

pub fn query_with_limits(
    lib: &PrototypeLibrary,
    target: &[f64; CHANNEL_COUNT],
    weights: &[f64; CHANNEL_COUNT],
    label_filter: Option<&str>,
    k: usize,
    limits: &HeadLimits,
) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let score = |id: usize| {
        (
            id,
            match_distance(target, &lib.prototypes[id].summary.mean, weights, limits),
        )
    };
    let mut scored: Vec<(usize, f64)> = match label_filter {
        Some(label) => lib.ids_for(label).iter().map(|&id| score(id)).collect(),
        None => (0..lib.len()).map(score).collect(),
    };
    let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    scored
}

const MAX_ALIGN_ITERS: usize = 500;
const ALIGN_TOL: f64 = 1e-13;

/// Recovers controls from 3-D keypoints by alternating a least-squares rigid
/// alignment with linear solves for the AU (non-negative) and gaze channels.
#[derive(Clone, Debug)]
pub struct ControlInverter {
    baseline: NeutralBaseline,
    model: DeformationModel,
    au_rows: Vec<usize>,
    gaze_rows: Vec<usize>,
    au_design: DMatrix<f64>,
    au_gram: DMatrix<f64>,
    gaze_design: DMatrix<f64>,
    gaze_gram: DMatrix<f64>,
}

fn design(points: &[usize], bases: &[Points3]) -> DMatrix<f64> {
    DMatrix::from_fn(3 * points.len(), bases.len(), |r, c| {
        bases[c][points[r / 3]][r % 3]
    })
}

impl ControlInverter {
    pub fn new(baseline: &NeutralBaseline, model: &DeformationModel) -> Self {
        let (gaze_rows, au_rows): (Vec<usize>, Vec<usize>) =
            (0..POINT_COUNT).partition(|&i| layout::is_gaze_point(i));
        let au_design = design(&au_rows, &model.au_bases);
        let gaze_design = design(&gaze_rows, &model.gaze_offsets);
        Self {
            baseline: baseline.clone(),
            model: model.clone(),
            au_gram: au_design.transpose() * &au_design,
            gaze_gram: gaze_design.transpose() * &gaze_design,
            au_rows,
            gaze_rows,
            au_design,
            gaze_design,
        }
    }

    fn residual_rhs(
        &self,
        rows: &[usize],
        design: &DMatrix<f64>,
        x: &[Vector3<f64>],
    ) -> DVector<f64> {
        let d = DVector::from_fn(3 * rows.len(), |r, _| {
            let i = rows[r / 3];
            x[i][r % 3] - self.baseline.points[i][r % 3]
        });
        design.transpose() * d
    }

    pub fn invert_frame(&self, k: &Points3, frame: usize) -> Result<ControlState> {
        if k.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::DegenerateFrame { frame });
        }
        let kc = centroid(k);
        let spread = k.iter().map(|p| (p - kc).norm()).fold(0.0, f64::max);
        if spread < 1e-12 {
            return Err(Error::DegenerateFrame { frame });
        }
        let k_centered: Vec<Vector3<f64>> = k.iter().map(|p| p - kc).collect();

        let mut au = [0.0; AU_COUNT];
        let mut gaze = [0.0; GAZE_COUNT];
        let mut rotation = nalgebra::Matrix3::identity();
        let mut last_step = f64::INFINITY;
        for _ in 0..MAX_ALIGN_ITERS {
            let mut m = self.baseline.points;
            let deform = self.model.deform(&au, &gaze);
            for (p, (d, t)) in m
                .iter_mut()
                .zip(deform.iter().zip(&self.model.template.points))
            {
                *p += d - t;
            }
            let mc = centroid(&m);
            let m_centered: Vec<Vector3<f64>> = m.iter().map(|p| p - mc).collect();
            rotation = best_rotation(&m_centered, &k_centered);
            let rt = rotation.transpose();
            let x: Vec<Vector3<f64>> = k_centered.iter().map(|p| rt * p + mc).collect();

            let rhs = self.residual_rhs(&self.au_rows, &self.au_design, &x);
            let sol = nnls_normal(&self.au_gram, &rhs);
            let rhs = self.residual_rhs(&self.gaze_rows, &self.gaze_design, &x);
            let gsol = nnls_normal(&self.gaze_gram, &rhs);

            let mut step: f64 = 0.0;
            for j in 0..AU_COUNT {
                let v = sol[j].clamp(0.0, 1.0);
                step = step.max((v - au[j]).abs());
                au[j] = v;
            }
            let h = gsol[0] - gsol[1];
            let v = gsol[2] - gsol[3];
            let new_gaze =
                [h.max(0.0), (-h).max(0.0), v.max(0.0), (-v).max(0.0)].map(|g| g.min(1.0));
            for j in 0..GAZE_COUNT {
                step = step.max((new_gaze[j] - gaze[j]).abs());
            }
            gaze = new_gaze;
            last_step = step;
            if step < ALIGN_TOL {
                break;
            }
        }
        if last_step > 1e-9 {
            return Err(Error::AlignmentDiverged {
                frame,
                residual: last_step,
            });
        }
        let head = euler_from_matrix(&rotation);
        Ok(ControlState { au, gaze, head })
    }

    pub fn invert(&self, keypoints: &KeypointSequence3D) -> Result<ControlSequence> {
        let frames = keypoints
            .frames
            .iter()
            .enumerate()
            .map(|(i, k)| self.invert_frame(k, i))
            .collect::<Result<Vec<_>>>()?;
        ControlSequence::new(frames, keypoints.fps)
    }
}

pub fn invert_controls(
    keypoints: &KeypointSequence3D,
    baseline: &NeutralBaseline,
    model: &DeformationModel,
) -> Result<ControlSequence> {
    ControlInverter::new(baseline, model).invert(keypoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{map_sequence, rotation_matrix};
    use alloc::vec;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn unit(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_state(rng: &mut ChaCha8Rng) -> ControlState {
        let mut c = ControlState::zero();
        for j in 0..AU_COUNT {
            c.au[j] = unit(rng);
        }
        let h = 2.0 * unit(rng) - 1.0;
        let v = 2.0 * unit(rng) - 1.0;
        c.gaze = [h.max(0.0), (-h).max(0.0), v.max(0.0), (-v).max(0.0)];
        c.head = [
            (2.0 * unit(rng) - 1.0) * 60.0,
            (2.0 * unit(rng) - 1.0) * 45.0,
            (2.0 * unit(rng) - 1.0) * 30.0,
        ];
        c.project_valid(&HeadLimits::default())
    }

    #[test]
    fn inversion_round_trips_random_states() {
        let model = DeformationModel::canonical();
        let baseline = NeutralBaseline::canonical();
        let inv = ControlInverter::new(&baseline, &model);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for i in 0..500 {
            let c = random_state(&mut rng);
            let (_, k3) = crate::mapper::map_frame(&c, &model).unwrap();
            let est = inv.invert_frame(&k3, i).unwrap();
            for j in 0..AU_COUNT {
                worst = worst.max((est.au[j] - c.au[j]).abs());
            }
            for j in 0..GAZE_COUNT {
                worst = worst.max((est.gaze[j] - c.gaze[j]).abs());
            }
            for j in 0..3 {
                assert!(
                    (est.head[j] - c.head[j]).abs() < 1e-4,
                    "head {j}: {} vs {}",
                    est.head[j],
                    c.head[j]
                );
            }
        }
        assert!(worst <= 1e-3, "worst AU/gaze error {worst}");
    }

    #[test]
    fn inversion_survives_translation() {
        let model = DeformationModel::canonical();
        let c = ControlState::zero()
            .with(Channel::Au4L, 0.6)
            .with(Channel::GazeDown, 0.3)
            .with(Channel::Yaw, 20.0);
        let (_, mut k3) = crate::mapper::map_frame(&c, &model).unwrap();
        for p in k3.iter_mut() {
            *p += Vector3::new(0.3, -1.0, 2.0);
        }
        let est = ControlInverter::new(&model.template, &model)
            .invert_frame(&k3, 0)
            .unwrap();
        assert!((est.au[Channel::Au4L.index()] - 0.6).abs() < 1e-6);
        assert!((est.gaze[3] - 0.3).abs() < 1e-6);
        assert!((est.head[0] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_frame_is_reported_with_index() {
        let model = DeformationModel::canonical();
        let (_, good) = crate::mapper::map_frame(&ControlState::zero(), &model).unwrap();
        let bad = [Vector3::new(0.1, 0.2, 0.3); POINT_COUNT];
        let seq = KeypointSequence3D {
            frames: vec![good, good, bad],
            fps: 25.0,
        };
        let err = invert_controls(&seq, &model.template, &model).unwrap_err();
        assert_eq!(err, Error::DegenerateFrame { frame: 2 });
    }

    #[test]
    fn rotation_only_frame_recovers_pose() {
        let model = DeformationModel::canonical();
        let r = rotation_matrix(-35.0, 12.0, 8.0);
        let pts = model.rotate(&model.template.points, &r);
        let est = ControlInverter::new(&model.template, &model)
            .invert_frame(&pts, 0)
            .unwrap();
        assert!(est.au.iter().chain(&est.gaze).all(|v| v.abs() < 1e-9));
        assert!((est.head[0] + 35.0).abs() < 1e-9);
        assert!((est.head[1] - 12.0).abs() < 1e-9);
        assert!((est.head[2] - 8.0).abs() < 1e-9);
    }

    fn record(label: &str, c: ControlState, len: usize) -> Record {
        let controls = ControlSequence::constant(c, len, 25.0).unwrap();
        let (_, k3) = map_sequence(&controls, &DeformationModel::canonical()).unwrap();
        Record {
            label: label.into(),
            controls,
            keypoints: k3,
        }
    }

    #[test]
    fn build_rejects_length_mismatch() {
        let mut bad = record("fear", ControlState::zero(), 4);
        bad.keypoints.frames.pop();
        let err = build_library(vec![record("fear", ControlState::zero(), 3), bad]).unwrap_err();
        assert!(matches!(
            err,
            Error::RecordLengthMismatch {
                index: 1,
                controls: 4,
                keypoints: 3,
                ..
            }
        ));
    }

    #[test]
    fn query_filters_by_label_and_orders() {
        let lib = build_library(vec![
            record("fear", ControlState::zero().with(Channel::Au5L, 0.4), 3),
            record("anger", ControlState::zero().with(Channel::Au4L, 0.5), 3),
            record("fear", ControlState::zero().with(Channel::Au5L, 0.2), 3),
        ])
        .unwrap();
        let target = ControlState::zero().with(Channel::Au5L, 0.25).to_array();
        let w = RetrievalWeights::default().0;
        let hits = query(&lib, &target, &w, Some("fear"), 5);
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![2, 0]);
        assert!((hits[0].1 - 0.1).abs() < 1e-12);
        assert!(query(&lib, &target, &w, Some("joy"), 5).is_empty());
        assert_eq!(query(&lib, &target, &w, None, 1).len(), 1);
    }

    #[test]
    fn head_distance_is_range_normalized() {
        let w = RetrievalWeights::default().0;
        let mut a = [0.0; CHANNEL_COUNT];
        a[Channel::Yaw.index()] = 45.0;
        let d = match_distance(&a, &[0.0; CHANNEL_COUNT], &w, &HeadLimits::default());
        assert!((d - 0.5).abs() < 1e-12);
    }
}
