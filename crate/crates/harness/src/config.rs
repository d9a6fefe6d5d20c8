//! Run configuration: JSON files plus dot-path command-line overrides.

use crate::HarnessError;
use sarl_core::envs::EnvKind;
use sarl_core::planner::PlanConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Adaptive episodes (M).
    pub episodes: usize,
    /// Task horizon per episode (steps).
    pub horizon: usize,
    pub plan: PlanConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub prior_checkpoint: Option<PathBuf>,
    pub disturbance_checkpoint: Option<PathBuf>,
    pub buffer_dir: Option<PathBuf>,
    /// Emit per-step planner diagnostics as JSON lines.
    pub diagnostics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::CartPole,
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            episodes: 50,
            horizon: 100,
            plan: default_plan(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            prior_checkpoint: None,
            disturbance_checkpoint: None,
            buffer_dir: None,
            diagnostics: false,
        }
    }
}

fn default_plan() -> PlanConfig {
    let mut plan = PlanConfig::default_for(EnvKind::CartPole, 1.0);
    // 0 means "resolve to max|r| * horizon at run time"
    plan.lambda = 0.0;
    plan
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden widths for the disturbance-model MLPs.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub det_dim: usize,
    /// Hidden widths for the learned prior.
    pub prior_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128],
            latent_dim: 8,
            det_dim: 8,
            prior_hidden: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Gradient steps after each adaptive episode.
    pub steps_per_episode: usize,
    /// Tasks per gradient step.
    pub batch_tasks: usize,
    /// Context size is drawn uniformly from [1, n_context_max].
    pub n_context_max: usize,
    pub n_targets: usize,
    pub replay_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps_per_episode: 200,
            batch_tasks: 16,
            n_context_max: 30,
            n_targets: 20,
            replay_capacity: sarl_core::replay::DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub episodes: usize,
    /// Leading episodes driven by uniform random actions.
    pub bootstrap_episodes: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub horizon: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            episodes: 30,
            bootstrap_episodes: 10,
            train_steps: 3000,
            batch: 64,
            horizon: 100,
        }
    }
}

/// Each switch disables exactly one code path when false.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Prior-model trajectory family and its indicator in the objective.
    pub prior_constraint: bool,
    /// Condition the disturbance model on the episode context at planning
    /// time (training is unaffected).
    pub context: bool,
    /// Prioritized replay sampling of unsafe rows into targets.
    pub prioritized: bool,
    /// Load a pre-trained prior; off starts from a fresh initialization.
    pub pretrain: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            prior_constraint: true,
            context: true,
            prioritized: true,
            pretrain: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Grid resolution per axis.
    pub grid: usize,
    pub episodes_per_cell: usize,
    /// Disturbance coordinates swept by the grid (indices into the
    /// parameter vector); the rest stay nominal.
    pub coord_x: usize,
    pub coord_y: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid: 5,
            episodes_per_cell: 5,
            coord_x: 0,
            coord_y: 1,
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, apply dot-path overrides, then CLI
    /// flag overrides.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<RunConfig, HarnessError> {
        let mut doc: serde_json::Value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| {
                HarnessError::Config(format!("reading {}: {}", p.display(), e))
            })?)
            .map_err(|e| HarnessError::Config(format!("parsing {}: {}", p.display(), e)))?,
            None => serde_json::json!({}),
        };
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        serde_json::from_value(doc).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// λ = 0 in the file means "pin to max|r| * horizon for this env".
    pub fn resolved_plan(&self, reward_bound: f64) -> PlanConfig {
        let mut plan = self.plan.clone();
        if plan.lambda <= 0.0 {
            plan.lambda = reward_bound * plan.horizon as f64;
        }
        if plan.action_low.len() != self.env.action_dim() {
            let template = PlanConfig::default_for(self.env, reward_bound);
            plan.action_low = template.action_low;
            plan.action_high = template.action_high;
        }
        plan
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self).expect("config json"))?;
        Ok(())
    }
}

/// Apply one `key.path=value` override onto a JSON document. Values parse as
/// JSON when possible and fall back to strings.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{}' is not key=value", spec)))?;
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(HarnessError::Config(format!(
                "override '{}' walks through a non-object at '{}'",
                spec, part
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_deserialize_from_empty_object() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.episodes, 50);
        assert_eq!(cfg.model.hidden, vec![128, 128]);
        assert!(cfg.ablation.prior_constraint);
    }

    #[test]
    fn overrides_walk_dot_paths() {
        let mut doc = serde_json::json!({});
        apply_override(&mut doc, "plan.horizon=12").unwrap();
        apply_override(&mut doc, "ablation.context=false").unwrap();
        apply_override(&mut doc, "env=planarfeed").unwrap();
        apply_override(&mut doc, "out_dir=/tmp/x").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.plan.horizon, 12);
        assert!(!cfg.ablation.context);
        assert_eq!(cfg.env, EnvKind::PlanarFeed);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_override_is_rejected() {
        let mut doc = serde_json::json!({});
        assert!(apply_override(&mut doc, "no-equals-sign").is_err());
    }

    #[test]
    fn lambda_zero_resolves_to_bound_times_horizon() {
        let cfg = RunConfig::default();
        let plan = cfg.resolved_plan(1.0);
        assert_eq!(plan.lambda, plan.horizon as f64);
        assert!(plan.validate(1.0).is_ok());
    }
}
