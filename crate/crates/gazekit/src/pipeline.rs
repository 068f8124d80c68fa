//! End-to-end compilation: plan, compose, refine, map.

use std::path::Path;

use anyhow::Context;
use gazekit_core::composer::compose_with;
use gazekit_core::critic::{refine, AuditTrail, RefineContext, Verdict};
use gazekit_core::library::PrototypeLibrary;
use gazekit_core::mapper::{map_sequence, DeformationModel, KeypointSequence};
use gazekit_core::planner::{plan_relaxed, InitialPose, Plan, PlanRequest, TemplateTable};
use gazekit_core::ControlSequence;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::formats::{save_controls, save_keypoints, write_json, Keypoints, PlanEnvelope};

#[derive(Clone, Debug, PartialEq)]
pub struct CompileRequest {
    pub label: String,
    pub total_frames: usize,
    pub instructions: Option<String>,
    pub initial_pose: InitialPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    pub plan: Plan,
    pub sequence: ControlSequence,
    pub keypoints: KeypointSequence,
    pub audit: AuditTrail,
}

/// Audit file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub label: String,
    pub total_frames: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub audit: AuditTrail,
}

impl Compiled {
    pub fn passed(&self) -> bool {
        self.audit.verdict == Verdict::Pass
    }
}

/// Frames for a duration in seconds, at least one.
pub fn frames_for_seconds(seconds: f64, fps: f64) -> anyhow::Result<usize> {
    anyhow::ensure!(
        seconds.is_finite() && seconds > 0.0,
        "duration must be positive, got {seconds}"
    );
    Ok(((seconds * fps).round() as usize).max(1))
}

pub fn compile(
    cfg: &PipelineConfig,
    templates: &TemplateTable,
    lib: &PrototypeLibrary,
    req: &CompileRequest,
) -> anyhow::Result<Compiled> {
    let plan_req = PlanRequest {
        label: &req.label,
        total_frames: req.total_frames,
        fps: cfg.fps,
        instructions: req.instructions.as_deref(),
        initial_pose: req.initial_pose,
    };
    let plan = plan_relaxed(&plan_req, templates, 0, &cfg.head_limits)?;
    let opts = cfg.compose_options();
    let composition =
        compose_with(&plan, lib, &req.initial_pose, &opts).context("composition failed")?;
    let ctx = RefineContext {
        label: &req.label,
        instructions: req.instructions.as_deref(),
        initial_pose: req.initial_pose,
        templates,
        rules: &cfg.rules,
        compose: opts,
    };
    let refined = refine(
        composition.sequence,
        &plan,
        lib,
        &ctx,
        cfg.max_composition_revisions,
        cfg.max_replans,
    );
    let (keypoints, _) = map_sequence(&refined.sequence, &DeformationModel::canonical())?;
    Ok(Compiled {
        plan: refined.plan,
        sequence: refined.sequence,
        keypoints,
        audit: refined.audit,
    })
}

/// Writes `controls.csv` (with sidecar), `keypoints.json`, `plan.json` and
/// `audit.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &PipelineConfig,
    req: &CompileRequest,
    out: &Compiled,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    save_controls(&out.sequence, &dir.join("controls.csv"))?;
    save_keypoints(
        &Keypoints::Flat(out.keypoints.clone()),
        &dir.join("keypoints.json"),
    )?;
    write_json(
        &dir.join("plan.json"),
        &PlanEnvelope {
            plan: out.plan.clone(),
            instructions: req.instructions.clone(),
            initial_pose: req.initial_pose,
        },
    )?;
    write_json(
        &dir.join("audit.json"),
        &AuditReport {
            label: req.label.clone(),
            total_frames: req.total_frames,
            seed: cfg.seed,
            audit: out.audit.clone(),
        },
    )?;
    Ok(())
}
