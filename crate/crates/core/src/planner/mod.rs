//! Risk-averse constrained sampling MPC.
//!
//! Candidate action sequences are scored by rolling out two particle
//! families: one under the full composite model and one under the prior
//! model alone. Per-step chance constraints are estimated from each family's
//! particle ensemble; any indicator firing subtracts the penalty from every
//! particle's return, and candidates are ranked by the CVaR of the resulting
//! per-particle augmented returns.

pub mod cem;

pub use cem::{CemConfig, CemResult, CemState};

use crate::dynamics::RolloutDynamics;
use crate::envs::{EnvKind, RewardModel, SafetySpec};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Planning horizon τ_p (steps).
    pub horizon: usize,
    /// Trajectory particles per candidate.
    pub particles: usize,
    pub cem: CemConfig,
    /// CVaR tail level α ∈ (0, 1).
    pub alpha: f64,
    /// Chance-constraint threshold δ ∈ [0, 1).
    pub delta: f64,
    /// Constraint penalty λ ≥ max|r| · τ_p.
    pub lambda: f64,
    /// Include the prior-model trajectory family and its indicator.
    pub prior_constraint: bool,
    /// Apply safety indicators at all; pre-training plans with this off.
    pub constraints: bool,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl Default for PlanConfig {
    /// Cart-pole-scale defaults with λ = 0, meaning "resolve to
    /// max|r| · τ_p when the environment is known".
    fn default() -> Self {
        let mut plan = PlanConfig::default_for(EnvKind::CartPole, 1.0);
        plan.lambda = 0.0;
        plan
    }
}

impl PlanConfig {
    /// Paper-scale defaults for an environment; λ is pinned to the smallest
    /// valid value max|r| · τ_p.
    pub fn default_for(kind: EnvKind, reward_bound: f64) -> Self {
        let horizon = 20;
        let (lo, hi) = match kind {
            EnvKind::CartPole => (
                vec![-crate::envs::cartpole::FORCE_LIMIT],
                vec![crate::envs::cartpole::FORCE_LIMIT],
            ),
            EnvKind::PlanarFeed => (
                vec![-crate::envs::planarfeed::ACCEL_LIMIT; 2],
                vec![crate::envs::planarfeed::ACCEL_LIMIT; 2],
            ),
        };
        PlanConfig {
            horizon,
            particles: 20,
            cem: CemConfig::default(),
            alpha: 0.1,
            delta: 0.0,
            lambda: reward_bound * horizon as f64,
            prior_constraint: true,
            constraints: true,
            action_low: lo,
            action_high: hi,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn validate(&self, reward_bound: f64) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "alpha {} outside (0,1)",
                self.alpha
            )));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "delta {} outside [0,1)",
                self.delta
            )));
        }
        if self.constraints && self.lambda < reward_bound * self.horizon as f64 {
            return Err(CoreError::InvalidArgument(format!(
                "lambda {} below max|r|·horizon = {}",
                self.lambda,
                reward_bound * self.horizon as f64
            )));
        }
        if self.horizon == 0 || self.particles == 0 {
            return Err(CoreError::InvalidArgument(
                "horizon and particles must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One trajectory family for a whole candidate population.
#[derive(Debug, Clone)]
pub struct FamilyRollout {
    /// Per candidate, per particle: sum of rewards along the particle's own
    /// states (frozen once the particle diverges).
    pub reward_sums: Vec<Vec<f64>>,
    /// Per candidate, per step: fraction of particles violating the state
    /// predicate (diverged particles count as violating).
    pub violation_frac: Vec<Vec<f64>>,
    /// Per candidate, per particle: diverged at some step.
    pub diverged: Vec<Vec<bool>>,
}

impl FamilyRollout {
    /// A candidate counts as lost only if every particle diverged.
    pub fn fully_diverged(&self, candidate: usize) -> bool {
        self.diverged[candidate].iter().all(|d| *d)
    }
}

/// Empirical violation probability at one step: fraction of flagged rows.
pub fn violation_prob(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
}

/// Roll out every candidate with `particles` independent trajectories. One
/// disturbance latent is drawn per particle at the start and held fixed for
/// its whole trajectory. Particle (i, p) consumes the stream seeded by
/// (family_seed, index_offset + i, p), so results are independent of
/// batching or evaluation order, and a single candidate can be re-rolled
/// bit-identically by passing its original population index as the offset.
pub fn traj_sampling<M: RolloutDynamics + ?Sized>(
    model: &M,
    s0: &[f64],
    candidates: &[Vec<f64>],
    horizon: usize,
    particles: usize,
    safety: &SafetySpec,
    reward: &RewardModel,
    family_seed: u64,
    index_offset: u64,
) -> Result<FamilyRollout> {
    let d_s = model.state_dim();
    let d_a = model.action_dim();
    let pop = candidates.len();
    let rows = pop * particles;
    for c in candidates {
        if c.len() != horizon * d_a {
            return Err(CoreError::InvalidArgument(format!(
                "candidate length {} != horizon {} * action dim {}",
                c.len(),
                horizon,
                d_a
            )));
        }
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "traj_sampling start state",
        });
    }

    let mut rngs: Vec<ChaCha8Rng> = (0..rows)
        .map(|row| {
            let (i, p) = (row / particles, row % particles);
            rng::rng_from(family_seed, &[index_offset + i as u64, p as u64])
        })
        .collect();

    let zd = model.latent_dim();
    let mut latents = Mat::zeros(rows, zd);
    if zd > 0 {
        for row in 0..rows {
            model.draw_latent(&mut rngs[row], latents.row_mut(row));
        }
    }

    let mut states = Mat::zeros(rows, d_s);
    for row in 0..rows {
        states.row_mut(row).copy_from_slice(s0);
    }
    let mut diverged_row = vec![false; rows];
    let mut reward_sums = vec![vec![0.0; particles]; pop];
    let mut violation_frac = vec![vec![0.0; horizon]; pop];

    let mut actions = Mat::zeros(rows, d_a);
    for t in 0..horizon {
        for row in 0..rows {
            let i = row / particles;
            let a = &candidates[i][t * d_a..(t + 1) * d_a];
            actions.row_mut(row).copy_from_slice(a);
        }
        let next = model.step_batch(&states, &actions, &latents, &mut rngs)?;
        for row in 0..rows {
            let (i, p) = (row / particles, row % particles);
            if diverged_row[row] {
                violation_frac[i][t] += 1.0;
                continue;
            }
            let nrow = next.row(row);
            if nrow.iter().any(|v| !v.is_finite()) {
                diverged_row[row] = true;
                violation_frac[i][t] += 1.0;
                continue;
            }
            states.row_mut(row).copy_from_slice(nrow);
            if !safety.state_safe(nrow) {
                violation_frac[i][t] += 1.0;
            }
            reward_sums[i][p] += reward.eval(nrow, actions.row(row));
        }
    }
    for i in 0..pop {
        for t in 0..horizon {
            violation_frac[i][t] /= particles as f64;
        }
    }
    let diverged = (0..pop)
        .map(|i| (0..particles).map(|p| diverged_row[i * particles + p]).collect())
        .collect();
    Ok(FamilyRollout {
        reward_sums,
        violation_frac,
        diverged,
    })
}

/// Per-candidate, per-particle augmented returns. The two chance-constraint
/// indicators are evaluated once per step from the respective ensembles and
/// the penalty applies uniformly to every particle's sum; rewards stay
/// per-particle.
pub fn augmented_returns(
    model: &FamilyRollout,
    prior: Option<&FamilyRollout>,
    candidates: &[Vec<f64>],
    safety: &SafetySpec,
    horizon: usize,
    delta: f64,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let d_a = safety.action_low.len();
    let mut out = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        let mut indicators = 0usize;
        for t in 0..horizon {
            if model.violation_frac[i][t] > delta {
                indicators += 1;
            }
            if let Some(pr) = prior {
                if pr.violation_frac[i][t] > delta {
                    indicators += 1;
                }
            }
            if !safety.action_safe(&cand[t * d_a..(t + 1) * d_a]) {
                indicators += 1;
            }
        }
        let penalty = lambda * indicators as f64;
        out.push(
            model.reward_sums[i]
                .iter()
                .map(|r| r - penalty)
                .collect(),
        );
    }
    out
}

/// Empirical CVaR at level α: the mean of all samples at or below the lower
/// empirical α-quantile (the value at index ⌈αN⌉-1 of the ascending sort).
pub fn cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("cvar of empty sample set".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "alpha {} outside (0,1)",
            alpha
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (alpha * samples.len() as f64).ceil() as usize;
    let nu = sorted[k.max(1) - 1];
    let tail: Vec<f64> = sorted.iter().copied().filter(|s| *s <= nu).collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanDiagnostics {
    pub cvar_best: f64,
    pub model_indicator_steps: usize,
    pub prior_indicator_steps: usize,
    pub action_indicator_steps: usize,
    pub cem_trace: Vec<f64>,
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// Flattened best action sequence [horizon * action_dim].
    pub best_sequence: Vec<f64>,
    pub diagnostics: PlanDiagnostics,
}

/// MPC planner holding the warm-started CEM state between steps.
pub struct Planner {
    pub config: PlanConfig,
    cem_state: Option<CemState>,
    pub degraded_events: u64,
}

impl Planner {
    pub fn new(config: PlanConfig) -> Self {
        Planner {
            config,
            cem_state: None,
            degraded_events: 0,
        }
    }

    /// Clear the warm start at an episode boundary.
    pub fn reset(&mut self) {
        self.cem_state = None;
    }

    /// Optimize an action sequence from `s0`. The model family rolls out
    /// `model`; the prior family rolls out `prior` when the prior constraint
    /// is enabled and never queries the disturbance model.
    pub fn plan<M: RolloutDynamics + ?Sized, P: RolloutDynamics + ?Sized>(
        &mut self,
        s0: &[f64],
        model: &M,
        prior: &P,
        safety: &SafetySpec,
        reward: &RewardModel,
        seed: u64,
    ) -> Result<PlanOutcome> {
        let cfg = &self.config;
        cfg.validate(reward.bound())?;
        let d_a = cfg.action_dim();
        let dims = cfg.horizon * d_a;
        let low: Vec<f64> = (0..dims).map(|d| cfg.action_low[d % d_a]).collect();
        let high: Vec<f64> = (0..dims).map(|d| cfg.action_high[d % d_a]).collect();
        let start = match &self.cem_state {
            Some(prev) => prev.warm_shift(d_a, &low, &high, &cfg.cem),
            None => CemState::initial(dims, &low, &high, &cfg.cem),
        };

        let horizon = cfg.horizon;
        let particles = cfg.particles;
        let alpha = cfg.alpha;
        let delta = cfg.delta;
        let lambda = if cfg.constraints { cfg.lambda } else { 0.0 };
        let prior_on = cfg.constraints && cfg.prior_constraint;
        let cem_cfg = cfg.cem;

        let evaluate = |iter: usize, candidates: &[Vec<f64>]| -> Result<Vec<f64>> {
            let model_roll = traj_sampling(
                model,
                s0,
                candidates,
                horizon,
                particles,
                safety,
                reward,
                rng::derive_path(seed, &[1, iter as u64]),
                0,
            )?;
            let prior_roll = if prior_on {
                Some(traj_sampling(
                    prior,
                    s0,
                    candidates,
                    horizon,
                    particles,
                    safety,
                    reward,
                    rng::derive_path(seed, &[2, iter as u64]),
                    0,
                )?)
            } else {
                None
            };
            let rbar = augmented_returns(
                &model_roll,
                prior_roll.as_ref(),
                candidates,
                safety,
                horizon,
                delta,
                lambda,
            );
            let mut scores = Vec::with_capacity(candidates.len());
            for (i, samples) in rbar.iter().enumerate() {
                if model_roll.fully_diverged(i) {
                    scores.push(f64::NAN);
                } else {
                    scores.push(cvar(samples, alpha)?);
                }
            }
            Ok(scores)
        };

        let mut eval_err: Option<CoreError> = None;
        let result = cem::optimize(dims, &low, &high, &cem_cfg, start, seed, |iter, cands| {
            match evaluate(iter, cands) {
                Ok(scores) => scores,
                Err(e) => {
                    if eval_err.is_none() {
                        eval_err = Some(e);
                    }
                    vec![f64::NAN; cands.len()]
                }
            }
        });
        if let Some(e) = eval_err {
            return Err(e);
        }

        self.cem_state = Some(result.final_state.clone());
        if result.degraded {
            self.degraded_events += 1;
            return Ok(PlanOutcome {
                best_sequence: vec![0.0; dims],
                diagnostics: PlanDiagnostics {
                    cvar_best: f64::NAN,
                    model_indicator_steps: 0,
                    prior_indicator_steps: 0,
                    action_indicator_steps: 0,
                    cem_trace: result.trace,
                    degraded: true,
                },
            });
        }

        // Re-roll the winning candidate under its original seeds for exact
        // indicator diagnostics.
        let (best_iter, best_index) = result.best_at;
        let best_cand = vec![result.best.clone()];
        let model_roll = traj_sampling(
            model,
            s0,
            &best_cand,
            horizon,
            particles,
            safety,
            reward,
            rng::derive_path(seed, &[1, best_iter as u64]),
            best_index as u64,
        )?;
        let prior_roll = if prior_on {
            Some(traj_sampling(
                prior,
                s0,
                &best_cand,
                horizon,
                particles,
                safety,
                reward,
                rng::derive_path(seed, &[2, best_iter as u64]),
                best_index as u64,
            )?)
        } else {
            None
        };
        let mut model_ind = 0;
        let mut prior_ind = 0;
        let mut action_ind = 0;
        for t in 0..horizon {
            if model_roll.violation_frac[0][t] > delta {
                model_ind += 1;
            }
            if let Some(pr) = &prior_roll {
                if pr.violation_frac[0][t] > delta {
                    prior_ind += 1;
                }
            }
            if !safety.action_safe(&result.best[t * d_a..(t + 1) * d_a]) {
                action_ind += 1;
            }
        }

        Ok(PlanOutcome {
            best_sequence: result.best,
            diagnostics: PlanDiagnostics {
                cvar_best: result.best_score,
                model_indicator_steps: model_ind,
                prior_indicator_steps: prior_ind,
                action_indicator_steps: action_ind,
                cem_trace: result.trace,
                degraded: false,
            },
        })
    }

    /// First action of the optimized sequence; the CEM state is retained for
    /// the next call's warm start.
    pub fn act<M: RolloutDynamics + ?Sized, P: RolloutDynamics + ?Sized>(
        &mut self,
        s0: &[f64],
        model: &M,
        prior: &P,
        safety: &SafetySpec,
        reward: &RewardModel,
        seed: u64,
    ) -> Result<(Vec<f64>, PlanDiagnostics)> {
        let d_a = self.config.action_dim();
        let outcome = self.plan(s0, model, prior, safety, reward, seed)?;
        Ok((
            outcome.best_sequence[..d_a].to_vec(),
            outcome.diagnostics,
        ))
    }
}

#[cfg(test)]
mod tests;
