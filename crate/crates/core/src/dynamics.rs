//! Composite transition model: a context-unaware prior model plus the
//! context-aware disturbance model trained on residuals. The next state is
//! the sum of one sample from each component; the disturbance is queried
//! with one latent per trajectory, held fixed along its time steps.

use crate::anp::{AnpContextCache, AnpModel, ContextSet};
use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Tape, Tensor, LOG_VAR_MAX,
    LOG_VAR_MIN,
};
use crate::envs::{Env, EnvKind, EnvParams};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::nn::{Activation, Mlp, Normalizer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::anp::{clamp_via_relu, std_from_log_var};

/// Per-dimension Gaussian over the next state; std may be zero (analytic
/// variant).
#[derive(Debug, Clone, PartialEq)]
pub struct StatePrediction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// MLP prior over state deltas with a Gaussian head.
pub struct GaussianMlpPrior {
    pub d_s: usize,
    pub d_a: usize,
    pub hidden: Vec<usize>,
    pub normalizer: Normalizer,
    mlp: Mlp,
}

impl GaussianMlpPrior {
    pub fn init(d_s: usize, d_a: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![d_s + d_a];
        dims.extend_from_slice(hidden);
        dims.push(2 * d_s);
        GaussianMlpPrior {
            d_s,
            d_a,
            hidden: hidden.to_vec(),
            normalizer: Normalizer::identity(d_s + d_a),
            mlp: Mlp::init(&dims, Activation::Tanh, rng),
        }
    }

    /// Gaussian over s' for a batch of rows: mean = s + Δmean.
    pub fn predict_batch(&self, states: &Mat, actions: &Mat) -> Result<(Mat, Mat)> {
        if states.data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "prior_predict state",
            });
        }
        let x = Mat::hcat(&[states, actions]);
        let out = self.mlp.forward_values(&self.normalizer.apply(&x));
        let mut mean = Mat::zeros(states.rows, self.d_s);
        let mut std = Mat::zeros(states.rows, self.d_s);
        for r in 0..states.rows {
            let row = out.row(r);
            for c in 0..self.d_s {
                mean.row_mut(r)[c] = states.row(r)[c] + row[c];
                std.row_mut(r)[c] = std_from_log_var(clamp_via_relu(
                    row[self.d_s + c],
                    LOG_VAR_MIN,
                    LOG_VAR_MAX,
                ));
            }
        }
        Ok((mean, std))
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.params("prior_mlp")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

/// Adam trainer for the learned prior: Gaussian NLL of state deltas.
pub struct PriorTrainer {
    pub adam: AdamState,
    pub diverged_steps: u64,
}

impl PriorTrainer {
    pub fn new(prior: &GaussianMlpPrior, cfg: AdamConfig) -> Self {
        let lens: Vec<usize> = prior.params().iter().map(|(_, t)| t.len()).collect();
        PriorTrainer {
            adam: AdamState::new(cfg, &lens),
            diverged_steps: 0,
        }
    }

    /// One NLL step on (state, action, next_state) rows.
    pub fn step(
        &mut self,
        prior: &mut GaussianMlpPrior,
        states: &Mat,
        actions: &Mat,
        next_states: &Mat,
    ) -> Result<f64> {
        let rows = states.rows;
        if rows == 0 {
            return Err(CoreError::InvalidArgument("empty prior batch".into()));
        }
        let mut deltas = Mat::zeros(rows, prior.d_s);
        for r in 0..rows {
            for c in 0..prior.d_s {
                deltas.row_mut(r)[c] = next_states.row(r)[c] - states.row(r)[c];
            }
        }
        let x = prior.normalizer.apply(&Mat::hcat(&[states, actions]));

        let mut tape = Tape::new();
        for t in prior.params_mut() {
            tape.leaf(t);
        }
        let x_node = tape.constant(vec![rows, x.cols], x.data);
        let out = prior.mlp.forward_tape(&mut tape, x_node)?;
        let mu = tape.slice_cols(out, 0, prior.d_s)?;
        let lv_raw = tape.slice_cols(out, prior.d_s, prior.d_s)?;
        let lv = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let y = tape.constant(vec![rows, prior.d_s], deltas.data);
        let nll = tape.gaussian_nll(mu, lv, y)?;
        let loss = tape.scale(nll, 1.0 / rows as f64)?;
        let loss_val = tape.values(loss)[0];
        if !loss_val.is_finite() {
            self.diverged_steps += 1;
            return Ok(loss_val);
        }
        let grads = tape.backward(loss)?;
        let gvecs: Vec<Vec<f64>> = prior
            .params()
            .iter()
            .map(|(_, t)| grads.of_or_zeros(t.node.expect("registered"), t.len()))
            .collect();
        let mut refs = prior.params_mut();
        self.adam.step(&mut refs, &gvecs)?;
        Ok(loss_val)
    }
}

/// Context-unaware prior model h.
pub enum PriorModel {
    Learned(GaussianMlpPrior),
    /// One-step integration at fixed nominal parameters; zero variance.
    Analytic { kind: EnvKind, params: EnvParams },
}

impl PriorModel {
    pub fn state_dim(&self) -> usize {
        match self {
            PriorModel::Learned(p) => p.d_s,
            PriorModel::Analytic { kind, .. } => kind.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            PriorModel::Learned(p) => p.d_a,
            PriorModel::Analytic { kind, .. } => kind.action_dim(),
        }
    }

    /// Gaussian over the next state for one (s, a).
    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<StatePrediction> {
        let (mean, std) = self.predict_batch(&Mat::row_vec(state), &Mat::row_vec(action))?;
        Ok(StatePrediction {
            mean: mean.data,
            std: std.data,
        })
    }

    pub fn predict_batch(&self, states: &Mat, actions: &Mat) -> Result<(Mat, Mat)> {
        match self {
            PriorModel::Learned(p) => p.predict_batch(states, actions),
            PriorModel::Analytic { kind, params } => {
                let mut mean = Mat::zeros(states.rows, kind.state_dim());
                for r in 0..states.rows {
                    let next = Env::nominal_step(*kind, states.row(r), actions.row(r), params)?;
                    mean.row_mut(r).copy_from_slice(&next);
                }
                let std = Mat::zeros(states.rows, kind.state_dim());
                Ok((mean, std))
            }
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        match self {
            PriorModel::Learned(p) => serde_json::json!({
                "model": "prior_mlp",
                "d_s": p.d_s,
                "d_a": p.d_a,
                "hidden": p.hidden,
                "norm_mean": p.normalizer.mean,
                "norm_std": p.normalizer.std,
            }),
            PriorModel::Analytic { kind, params } => serde_json::json!({
                "model": "prior_analytic",
                "env": kind,
                "params": params.as_vec(),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            PriorModel::Learned(p) => save_checkpoint(path, &p.params(), &self.metadata()),
            PriorModel::Analytic { .. } => save_checkpoint(path, &[], &self.metadata()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let md = &ck.metadata;
        let model = md
            .get("model")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| CoreError::Checkpoint("prior metadata missing 'model'".into()))?;
        match model {
            "prior_mlp" => {
                let get = |k: &str| -> Result<u64> {
                    md.get(k)
                        .and_then(serde_json::Value::as_u64)
                        .ok_or_else(|| CoreError::Checkpoint(format!("missing '{}'", k)))
                };
                let hidden: Vec<usize> = md
                    .get("hidden")
                    .and_then(serde_json::Value::as_array)
                    .ok_or_else(|| CoreError::Checkpoint("missing 'hidden'".into()))?
                    .iter()
                    .filter_map(serde_json::Value::as_u64)
                    .map(|u| u as usize)
                    .collect();
                let vecf = |k: &str| -> Result<Vec<f64>> {
                    md.get(k)
                        .and_then(serde_json::Value::as_array)
                        .ok_or_else(|| CoreError::Checkpoint(format!("missing '{}'", k)))?
                        .iter()
                        .map(|v| {
                            v.as_f64()
                                .ok_or_else(|| CoreError::Checkpoint(format!("bad float in '{}'", k)))
                        })
                        .collect()
                };
                use rand::SeedableRng;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut p = GaussianMlpPrior::init(
                    get("d_s")? as usize,
                    get("d_a")? as usize,
                    &hidden,
                    &mut rng,
                );
                p.normalizer = Normalizer {
                    mean: vecf("norm_mean")?,
                    std: vecf("norm_std")?,
                };
                let names: Vec<String> = p.params().iter().map(|(n, _)| n.clone()).collect();
                for (name, t) in names.iter().zip(p.params_mut()) {
                    let loaded = ck.tensor(name)?;
                    if loaded.shape != t.shape {
                        return Err(CoreError::Checkpoint(format!(
                            "prior parameter '{}' shape mismatch",
                            name
                        )));
                    }
                    t.values = loaded.values.clone();
                }
                Ok(PriorModel::Learned(p))
            }
            "prior_analytic" => {
                let kind: EnvKind = serde_json::from_value(
                    md.get("env")
                        .cloned()
                        .ok_or_else(|| CoreError::Checkpoint("missing 'env'".into()))?,
                )
                .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
                let pv: Vec<f64> = md
                    .get("params")
                    .and_then(serde_json::Value::as_array)
                    .ok_or_else(|| CoreError::Checkpoint("missing 'params'".into()))?
                    .iter()
                    .filter_map(serde_json::Value::as_f64)
                    .collect();
                Ok(PriorModel::Analytic {
                    kind,
                    params: EnvParams::from_vec(kind, &pv),
                })
            }
            other => Err(CoreError::Checkpoint(format!(
                "unknown prior model '{}'",
                other
            ))),
        }
    }
}

/// Training output for the disturbance model: y = s' - mean_h(s, a).
pub fn residual_target(
    prior: &PriorModel,
    state: &[f64],
    action: &[f64],
    next_state: &[f64],
) -> Result<Vec<f64>> {
    let pred = prior.predict(state, action)?;
    Ok(next_state
        .iter()
        .zip(pred.mean.iter())
        .map(|(s, m)| s - m)
        .collect())
}

/// Prior model plus optional disturbance model. `disturbance = None` is the
/// prior-only configuration used for pre-training, the prior-constraint
/// trajectory family, and oracle tests.
pub struct CompositeModel {
    pub prior: PriorModel,
    pub disturbance: Option<AnpModel>,
}

impl CompositeModel {
    pub fn state_dim(&self) -> usize {
        self.prior.state_dim()
    }

    /// One sampled next state: a prior draw plus a disturbance draw under a
    /// fresh latent. Rollouts that need the latent held fixed across steps
    /// go through [`CompositeRollout`] instead.
    pub fn predict_sample(
        &self,
        state: &[f64],
        action: &[f64],
        ctx: &ContextSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let pred = self.prior.predict(state, action)?;
        let mut next: Vec<f64> = pred
            .mean
            .iter()
            .zip(pred.std.iter())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(g) = &self.disturbance {
            let cache = g.prepare_context(ctx)?;
            let z = cache.latent.sample(rng);
            let x = compose_input(state, action);
            let mut z_rows = Mat::zeros(1, z.len());
            z_rows.row_mut(0).copy_from_slice(&z);
            let (mu, std) = g.predict_with_latent_rows(&cache, &Mat::row_vec(&x), &z_rows)?;
            for c in 0..next.len() {
                next[c] += mu.row(0)[c] + std.row(0)[c] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(next)
    }

    /// Deterministic composite mean: mean_h + mean_g at the latent mean.
    pub fn predict_mean(&self, state: &[f64], action: &[f64], ctx: &ContextSet) -> Result<Vec<f64>> {
        let pred = self.prior.predict(state, action)?;
        let mut next = pred.mean;
        if let Some(g) = &self.disturbance {
            let cache = g.prepare_context(ctx)?;
            let x = compose_input(state, action);
            let mut z_rows = Mat::zeros(1, cache.latent.dim());
            z_rows.row_mut(0).copy_from_slice(&cache.latent.mean);
            let (mu, _) = g.predict_with_latent_rows(&cache, &Mat::row_vec(&x), &z_rows)?;
            for c in 0..next.len() {
                next[c] += mu.row(0)[c];
            }
        }
        Ok(next)
    }

    /// Save as a directory: composite.json manifest plus component files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.prior.save(&dir.join("prior.json"))?;
        let has_g = self.disturbance.is_some();
        if let Some(g) = &self.disturbance {
            g.save(&dir.join("disturbance.json"))?;
        }
        let variant = match self.prior {
            PriorModel::Learned(_) => "learned-gaussian-mlp",
            PriorModel::Analytic { .. } => "analytic-nominal",
        };
        let manifest = serde_json::json!({
            "variant": variant,
            "has_disturbance": has_g,
        });
        save_checkpoint(&dir.join("composite.json"), &[], &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_checkpoint(&dir.join("composite.json"))?;
        let has_g = manifest
            .metadata
            .get("has_disturbance")
            .and_then(serde_json::Value::as_bool)
            .unwrap_or(false);
        let prior = PriorModel::load(&dir.join("prior.json"))?;
        let disturbance = if has_g {
            Some(AnpModel::load(&dir.join("disturbance.json"))?)
        } else {
            None
        };
        Ok(CompositeModel { prior, disturbance })
    }
}

/// x = [s ‖ a], the disturbance-model input convention.
pub fn compose_input(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action.len());
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x
}

/// Batched one-step sampling interface the planner rolls trajectories with.
/// One latent per particle is drawn at rollout start and held fixed.
pub trait RolloutDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn latent_dim(&self) -> usize {
        0
    }
    fn draw_latent(&self, _rng: &mut ChaCha8Rng, _out: &mut [f64]) {}
    /// Sample next states row-wise; `latents` has `latent_dim()` columns
    /// (zero columns when latent-free) and `rngs` one generator per row.
    fn step_batch(
        &self,
        states: &Mat,
        actions: &Mat,
        latents: &Mat,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Mat>;
}

/// Prior-only rollouts (the auxiliary trajectory family; also pre-training).
pub struct PriorRollout<'a>(pub &'a PriorModel);

impl RolloutDynamics for PriorRollout<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn step_batch(
        &self,
        states: &Mat,
        actions: &Mat,
        _latents: &Mat,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Mat> {
        let (mean, std) = self.0.predict_batch(states, actions)?;
        let mut out = Mat::zeros(states.rows, mean.cols);
        for r in 0..states.rows {
            let rng = &mut rngs[r];
            for c in 0..mean.cols {
                let s = std.row(r)[c];
                out.row_mut(r)[c] = if s == 0.0 {
                    mean.row(r)[c]
                } else {
                    mean.row(r)[c] + s * rng.sample::<f64, _>(StandardNormal)
                };
            }
        }
        Ok(out)
    }
}

/// Prior plus disturbance rollouts conditioned on a fixed context cache.
pub struct CompositeRollout<'a> {
    pub prior: &'a PriorModel,
    pub disturbance: Option<(&'a AnpModel, &'a AnpContextCache)>,
}

impl RolloutDynamics for CompositeRollout<'_> {
    fn state_dim(&self) -> usize {
        self.prior.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.prior.action_dim()
    }

    fn latent_dim(&self) -> usize {
        self.disturbance.map_or(0, |(g, _)| g.cfg.latent_dim)
    }

    fn draw_latent(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        if let Some((_, cache)) = self.disturbance {
            out.copy_from_slice(&cache.latent.sample(rng));
        }
    }

    fn step_batch(
        &self,
        states: &Mat,
        actions: &Mat,
        latents: &Mat,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Mat> {
        let (mean, std) = self.prior.predict_batch(states, actions)?;
        let mut out = Mat::zeros(states.rows, mean.cols);
        for r in 0..states.rows {
            let rng = &mut rngs[r];
            for c in 0..mean.cols {
                let s = std.row(r)[c];
                out.row_mut(r)[c] = if s == 0.0 {
                    mean.row(r)[c]
                } else {
                    mean.row(r)[c] + s * rng.sample::<f64, _>(StandardNormal)
                };
            }
        }
        if let Some((g, cache)) = self.disturbance {
            let x = Mat::hcat(&[states, actions]);
            let (g_mu, g_std) = g.predict_with_latent_rows(cache, &x, latents)?;
            for r in 0..states.rows {
                let rng = &mut rngs[r];
                for c in 0..g_mu.cols {
                    out.row_mut(r)[c] +=
                        g_mu.row(r)[c] + g_std.row(r)[c] * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(out)
    }
}
