use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use gazekit_core::composer::{ComposeOptions, Selection, DEFAULT_BLEND_FRAMES};
use gazekit_core::critic::RuleSet;
use gazekit_core::guidance::GuidanceParams;
use gazekit_core::library::RetrievalWeights;
use gazekit_core::planner::TemplateTable;
use gazekit_core::{Channel, HeadLimits};
use serde::{Deserialize, Serialize};

use crate::formats::read_json;

/// Pipeline settings, read from a JSON file. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fps: f64,
    pub blend_frames: usize,
    /// Per-channel retrieval weight overrides, keyed by channel name.
    pub weights: BTreeMap<Channel, f64>,
    pub rules: RuleSet,
    pub guidance: GuidanceParams,
    /// Template table JSON; the built-in table when absent.
    pub templates: Option<PathBuf>,
    pub seed: u64,
    /// 1 picks the best match; larger values draw among the best `top_k`.
    pub top_k: usize,
    pub max_composition_revisions: usize,
    pub max_replans: usize,
    pub head_limits: HeadLimits,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fps: 25.0,
            blend_frames: DEFAULT_BLEND_FRAMES,
            weights: BTreeMap::new(),
            rules: RuleSet::default(),
            guidance: GuidanceParams::default(),
            templates: None,
            seed: 0,
            top_k: 1,
            max_composition_revisions: 3,
            max_replans: 2,
            head_limits: HeadLimits::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a config. A relative template path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: Self = read_json(path)?;
        if let Some(t) = &cfg.templates {
            if t.is_relative() {
                cfg.templates = Some(path.parent().unwrap_or(Path::new(".")).join(t));
            }
        }
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(
            self.fps.is_finite() && self.fps > 0.0,
            "fps must be positive, got {}",
            self.fps
        );
        ensure!(self.top_k >= 1, "top_k must be at least 1");
        for (c, w) in &self.weights {
            ensure!(
                w.is_finite() && *w >= 0.0,
                "weight for {} must be non-negative",
                c.name()
            );
        }
        let l = &self.head_limits;
        ensure!(
            [l.yaw, l.pitch, l.roll]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0),
            "head limits must be positive"
        );
        if let Err(e) = self.rules.validate() {
            bail!("rules: {e}");
        }
        self.guidance.validate().context("guidance")?;
        if let Some(t) = &self.templates {
            ensure!(t.is_file(), "template file {} does not exist", t.display());
        }
        Ok(())
    }

    pub fn load_templates(&self) -> anyhow::Result<TemplateTable> {
        let Some(path) = &self.templates else {
            return Ok(TemplateTable::default());
        };
        let table: TemplateTable = read_json(path)?;
        table
            .validate(&self.head_limits)
            .with_context(|| format!("templates {}", path.display()))?;
        Ok(table)
    }

    pub fn retrieval_weights(&self) -> [f64; gazekit_core::control::CHANNEL_COUNT] {
        let mut w = RetrievalWeights::default().0;
        for (c, v) in &self.weights {
            w[c.index()] = *v;
        }
        w
    }

    pub fn compose_options(&self) -> ComposeOptions {
        ComposeOptions {
            weights: self.retrieval_weights(),
            blend_frames: self.blend_frames,
            selection: if self.top_k == 1 {
                Selection::Top1
            } else {
                Selection::RandomTopK {
                    k: self.top_k,
                    seed: self.seed,
                }
            },
            limits: self.head_limits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"weights":{"yaw":0.5},"rules":{"blink_duration":{"max_ms":600}},"guidance":{"steps":10}}"#).unwrap();
        assert_eq!(cfg.retrieval_weights()[Channel::Yaw.index()], 0.5);
        assert_eq!(cfg.retrieval_weights()[Channel::Au1.index()], 2.0);
        assert_eq!(cfg.rules.blink_duration.max_ms, 600.0);
        assert_eq!(cfg.rules.blink_duration.min_ms, 100.0);
        assert_eq!(cfg.guidance.steps, 10);
        assert_eq!(cfg.guidance.omega_hi, 8.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"fsp":25}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"weights":{"AU99":1}}"#).is_err());
        let cfg = PipelineConfig {
            top_k: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            templates: Some("/nonexistent/t.json".into()),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
