use gazekit_core::composer::ComposeOptions;
use gazekit_core::composer::{compose, rescale_amplitude, Segment};
use gazekit_core::control::{
    channel_summary, resample_sequence, validate_control_state_with, validate_sequence,
    CHANNEL_COUNT,
};
use gazekit_core::critic::{check, refine, RefineContext, RuleSet};
use gazekit_core::demo::demo_library;
use gazekit_core::library::{
    build_library, invert_controls, match_distance, query, NeutralBaseline, Record,
    RetrievalWeights,
};
use gazekit_core::mapper::{
    layout, map_frame, map_sequence, DeformationModel, KeypointSequence3D, POINT_COUNT,
};
use gazekit_core::planner::{
    plan, validate_plan, InitialPose, Interval, PlanRequest, TemplateTable,
};
use gazekit_core::{Channel, ControlSequence, ControlState, HeadLimits};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn state() -> impl Strategy<Value = ControlState> {
    (
        proptest::array::uniform10(0.0f64..=1.0),
        -1.0f64..=1.0,
        -1.0f64..=1.0,
        -90.0f64..=90.0,
        -60.0f64..=60.0,
        -45.0f64..=45.0,
    )
        .prop_map(|(au, h, v, yaw, pitch, roll)| {
            let c = ControlState {
                au,
                gaze: [h.max(0.0), (-h).max(0.0), v.max(0.0), (-v).max(0.0)],
                head: [yaw, pitch, roll],
            };
            c.project_valid(&HeadLimits::default())
        })
}

fn sequence(max_len: usize) -> impl Strategy<Value = ControlSequence> {
    proptest::collection::vec(state(), 1..max_len)
        .prop_map(|f| ControlSequence::new(f, 25.0).unwrap())
}

fn brute_force(
    means: &[[f64; CHANNEL_COUNT]],
    target: &[f64; CHANNEL_COUNT],
    w: &[f64; CHANNEL_COUNT],
    k: usize,
) -> Vec<usize> {
    let limits = HeadLimits::default();
    let mut all: Vec<(f64, usize)> = means
        .iter()
        .enumerate()
        .map(|(i, m)| (match_distance(target, m, w, &limits), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|p| p.1).collect()
}

fn constant_library(states: &[ControlState]) -> gazekit_core::library::PrototypeLibrary {
    let model = DeformationModel::canonical();
    let records = states
        .iter()
        .map(|s| {
            let controls = ControlSequence::constant(*s, 1, 25.0).unwrap();
            let (_, keypoints) = map_sequence(&controls, &model).unwrap();
            Record {
                label: "x".into(),
                controls,
                keypoints,
            }
        })
        .collect();
    build_library(records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projected_states_validate(c in state()) {
        prop_assert!(validate_control_state_with(&c, &HeadLimits::default(), 0).ok());
    }

    #[test]
    fn resample_same_length_is_identity(s in sequence(30)) {
        let r = resample_sequence(&s, s.len()).unwrap();
        prop_assert_eq!(r.frames(), s.frames());
    }

    #[test]
    fn resample_keeps_channel_extremes(s in sequence(30), k in 1usize..80) {
        let r = resample_sequence(&s, k).unwrap();
        prop_assert_eq!(r.len(), k);
        let (a, b) = (channel_summary(&s).unwrap(), channel_summary(&r).unwrap());
        for j in 0..CHANNEL_COUNT {
            prop_assert!(b.min[j] >= a.min[j] - 1e-12 && b.max[j] <= a.max[j] + 1e-12);
        }
    }

    #[test]
    fn resampled_mean_converges_on_ramps(start in state(), end in state(), len in 2usize..20) {
        let frames: Vec<ControlState> = (0..len)
            .map(|t| {
                let w = t as f64 / (len - 1) as f64;
                let (a, b) = (start.to_array(), end.to_array());
                let mut v = [0.0; CHANNEL_COUNT];
                for j in 0..CHANNEL_COUNT {
                    v[j] = (1.0 - w) * a[j] + w * b[j];
                }
                ControlState::from_array(&v)
            })
            .collect();
        let s = ControlSequence::new(frames, 25.0).unwrap();
        let r = resample_sequence(&s, 10 * len).unwrap();
        let (a, b) = (channel_summary(&s).unwrap(), channel_summary(&r).unwrap());
        for j in 0..CHANNEL_COUNT {
            prop_assert!((a.mean[j] - b.mean[j]).abs() < 1e-6 * (1.0 + a.mean[j].abs()));
        }
    }

    #[test]
    fn retrieval_matches_exhaustive_ranking(states in proptest::collection::vec(state(), 1..120), target in state(), k in 1usize..8) {
        let lib = constant_library(&states);
        let w = RetrievalWeights::default().0;
        let means: Vec<[f64; CHANNEL_COUNT]> = lib.prototypes.iter().map(|p| p.summary.mean).collect();
        let got: Vec<usize> = query(&lib, &target.to_array(), &w, None, k).into_iter().map(|p| p.0).collect();
        prop_assert_eq!(got, brute_force(&means, &target.to_array(), &w, k));
    }

    #[test]
    fn weight_scaling_keeps_ranking(states in proptest::collection::vec(state(), 1..60), target in state(), lambda in 0.01f64..100.0) {
        let lib = constant_library(&states);
        let w = RetrievalWeights::default().0;
        let scaled = w.map(|x| x * lambda);
        let a = query(&lib, &target.to_array(), &w, None, 5);
        let b = query(&lib, &target.to_array(), &scaled, None, 5);
        prop_assert_eq!(a.iter().map(|p| p.0).collect::<Vec<_>>(), b.iter().map(|p| p.0).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y.1 - lambda * x.1).abs() <= 1e-9 * (1.0 + y.1));
        }
    }

    #[test]
    fn inversion_round_trip(s in sequence(6)) {
        let model = DeformationModel::canonical();
        let (_, k3) = map_sequence(&s, &model).unwrap();
        let back = invert_controls(&k3, &NeutralBaseline::canonical(), &model).unwrap();
        for (a, b) in s.frames().iter().zip(back.frames()) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                prop_assert!((x - y).abs() <= 1e-3, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn au_superposition_is_exact(a in proptest::array::uniform10(0.0f64..=0.5), b in proptest::array::uniform10(0.0f64..=0.5)) {
        let m = DeformationModel::canonical();
        let g = [0.0; 4];
        let mut ab = a;
        for i in 0..10 {
            ab[i] += b[i];
        }
        let (da, db, dab) = (m.deform(&a, &g), m.deform(&b, &g), m.deform(&ab, &g));
        for i in 0..POINT_COUNT {
            let lhs = dab[i];
            let rhs = da[i] + db[i] - m.template.points[i];
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn mirrored_controls_give_mirrored_keypoints(c in state()) {
        let m = DeformationModel::canonical();
        let (k, _) = map_frame(&c, &m).unwrap();
        let (km, _) = map_frame(&c.mirrored(), &m).unwrap();
        let px = m.projection.principal[0];
        for i in 0..POINT_COUNT {
            let p = k.points[layout::mirror_index(i)];
            let q = km.points[i];
            prop_assert!((q[0] - (2.0 * px - p[0])).abs() < 1e-6 && (q[1] - p[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn head_rotation_is_rigid(c in state()) {
        let m = DeformationModel::canonical();
        let rest = ControlState { head: [0.0; 3], ..c };
        let (_, a) = map_frame(&rest, &m).unwrap();
        let (_, b) = map_frame(&c, &m).unwrap();
        for i in (0..POINT_COUNT).step_by(3) {
            for j in (i + 1..POINT_COUNT).step_by(5) {
                prop_assert!(((a[i] - a[j]).norm() - (b[i] - b[j]).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_scales_about_principal_point(c in state(), f in 0.1f64..3.0) {
        let m = DeformationModel::canonical();
        let mut m2 = m.clone();
        m2.projection.scale *= f;
        let (k1, _) = map_frame(&c, &m).unwrap();
        let (k2, _) = map_frame(&c, &m2).unwrap();
        let p = m.projection.principal;
        for i in 0..POINT_COUNT {
            for d in 0..2 {
                prop_assert!((k2.points[i][d] - p[d] - f * (k1.points[i][d] - p[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescaled_channels_stay_in_target(s in sequence(20), lo in 0.0f64..0.5, width in 0.0f64..0.5) {
        let iv = Interval::new(lo, lo + width);
        let targets: BTreeMap<Channel, Interval> = [(Channel::Au5L, iv), (Channel::GazeUp, iv)].into_iter().collect();
        let seg = Segment { controls: s, source_prototype: 0, event_index: 0 };
        let out = rescale_amplitude(&seg, &targets);
        for f in out.controls.frames() {
            for c in [Channel::Au5L, Channel::GazeUp] {
                prop_assert!(f.get(c) >= iv.lo && f.get(c) <= iv.hi);
            }
        }
    }
}

fn labels() -> Vec<String> {
    TemplateTable::default()
        .labels()
        .into_iter()
        .map(String::from)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn plans_are_valid_for_every_length(t in 1usize..=2000, which in 0usize..12) {
        let templates = TemplateTable::default();
        let label = &labels()[which];
        let req = PlanRequest { label, total_frames: t, fps: 25.0, instructions: None, initial_pose: InitialPose::default() };
        let p = plan(&req, &templates).unwrap();
        prop_assert!(validate_plan(&p).ok(), "{:?}", validate_plan(&p));
        prop_assert_eq!(p.clone(), plan(&req, &templates).unwrap());
    }

    #[test]
    fn direction_words_pick_one_side(which in 0usize..12, word in 0usize..4, t in 3usize..300) {
        let templates = TemplateTable::default();
        let label = &labels()[which];
        let (text, want) = [
            ("look to the left", Channel::GazeLeft),
            ("glance right", Channel::GazeRight),
            ("look up", Channel::GazeUp),
            ("look down", Channel::GazeDown),
        ][word];
        let req = PlanRequest { label, total_frames: t, fps: 25.0, instructions: Some(text), initial_pose: InitialPose::default() };
        let p = plan(&req, &templates).unwrap();
        let opp = want.opposite_gaze().unwrap();
        prop_assert!(p.events.iter().any(|e| e.target(want).is_some_and(|iv| iv.lo > 0.0)));
        prop_assert!(!p.events.iter().any(|e| e.target(opp).is_some_and(|iv| iv.lo > 0.0)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compositions_have_length_and_validate(which in 0usize..12, t in 1usize..200, blend in 0usize..6, yaw in -30.0f64..30.0) {
        let lib = demo_library().unwrap();
        let label = &labels()[which];
        let pose = InitialPose::new(yaw, 0.0, 0.0);
        let req = PlanRequest { label, total_frames: t, fps: 25.0, instructions: None, initial_pose: pose };
        let p = plan(&req, &TemplateTable::default()).unwrap();
        let w = RetrievalWeights::default().0;
        let a = compose(&p, &lib, &w, &pose, blend).unwrap();
        prop_assert_eq!(a.len(), t);
        prop_assert!(validate_sequence(&a, &HeadLimits::default()).ok());
        prop_assert_eq!(a.frames()[0].head, pose.as_array());
        prop_assert_eq!(&a, &compose(&p, &lib, &w, &pose, blend).unwrap());
    }

    #[test]
    fn refine_respects_round_budget(which in 0usize..12, t in 5usize..120, comp in 0usize..4, replans in 0usize..3) {
        let lib = demo_library().unwrap();
        let templates = TemplateTable::default();
        let rules = RuleSet::default();
        let label = &labels()[which];
        let pose = InitialPose::default();
        let req = PlanRequest { label, total_frames: t, fps: 25.0, instructions: None, initial_pose: pose };
        let p = plan(&req, &templates).unwrap();
        let seq = compose(&p, &lib, &RetrievalWeights::default().0, &pose, 3).unwrap();
        let ctx = RefineContext { label, instructions: None, initial_pose: pose, templates: &templates, rules: &rules, compose: ComposeOptions::default() };
        let out = refine(seq, &p, &lib, &ctx, comp, replans);
        prop_assert!(out.audit.rounds.len() <= comp + replans + 1);
        let again = check(&out.sequence, &out.plan, label, None, &templates, &rules);
        prop_assert_eq!(again.verdict, out.audit.rounds.last().unwrap().report.verdict);
    }
}

#[test]
fn zero_blend_concatenates_segments() {
    let lib = demo_library().unwrap();
    let templates = TemplateTable::default();
    let pose = InitialPose::default();
    let req = PlanRequest {
        label: "anger",
        total_frames: 60,
        fps: 25.0,
        instructions: None,
        initial_pose: pose,
    };
    let p = plan(&req, &templates).unwrap();
    let c = gazekit_core::composer::compose_with(
        &p,
        &lib,
        &pose,
        &ComposeOptions {
            blend_frames: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let mut joined: Vec<ControlState> = c
        .segments
        .iter()
        .flat_map(|s| s.controls.frames().to_vec())
        .collect();
    joined[0].head = pose.as_array();
    let joined: Vec<ControlState> = joined
        .iter()
        .map(|f| f.project_valid(&HeadLimits::default()))
        .collect();
    assert_eq!(c.sequence.frames(), &joined[..]);
}

#[test]
fn keypoint_sequences_keep_fps() {
    let s = ControlSequence::constant(ControlState::zero(), 3, 30.0).unwrap();
    let (k2, k3): (_, KeypointSequence3D) =
        map_sequence(&s, &DeformationModel::canonical()).unwrap();
    assert_eq!((k2.fps, k3.fps), (30.0, 30.0));
}
