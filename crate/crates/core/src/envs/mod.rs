//! Non-stationary constrained environments.
//!
//! Hidden physical parameters are resampled at episode boundaries from a
//! disturbance space; within an episode they are fixed. Safety is a pure
//! predicate on states plus a box on actions, checked every step.

pub mod cartpole;
pub mod planarfeed;

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CartPole,
    PlanarFeed,
}

impl EnvKind {
    pub fn state_dim(&self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::PlanarFeed => 7,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvKind::CartPole => 1,
            EnvKind::PlanarFeed => 2,
        }
    }
}

/// Hidden episode parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EnvParams {
    CartPole {
        pole_len: f64,
        pole_mass: f64,
        cart_mass: f64,
    },
    PlanarFeed {
        forward_speed: f64,
        rotation_speed: f64,
    },
}

impl EnvParams {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvParams::CartPole { .. } => EnvKind::CartPole,
            EnvParams::PlanarFeed { .. } => EnvKind::PlanarFeed,
        }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match *self {
            EnvParams::CartPole {
                pole_len,
                pole_mass,
                cart_mass,
            } => vec![pole_len, pole_mass, cart_mass],
            EnvParams::PlanarFeed {
                forward_speed,
                rotation_speed,
            } => vec![forward_speed, rotation_speed],
        }
    }

    pub fn from_vec(kind: EnvKind, v: &[f64]) -> Self {
        match kind {
            EnvKind::CartPole => EnvParams::CartPole {
                pole_len: v[0],
                pole_mass: v[1],
                cart_mass: v[2],
            },
            EnvKind::PlanarFeed => EnvParams::PlanarFeed {
                forward_speed: v[0],
                rotation_speed: v[1],
            },
        }
    }
}

/// Which distribution episode parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSpace {
    /// Fixed nominal values used to learn the prior model.
    Pretrain,
    /// Uniform draws over the full disturbance box.
    Adapt,
}

/// Draw episode parameters. Pretrain is the fixed nominal point; adapt is
/// uniform over the per-coordinate disturbance intervals.
pub fn sample_params(kind: EnvKind, space: ParamSpace, rng: &mut ChaCha8Rng) -> EnvParams {
    match (kind, space) {
        (EnvKind::CartPole, ParamSpace::Pretrain) => EnvParams::CartPole {
            pole_len: 0.6,
            pole_mass: 0.6,
            cart_mass: 0.6,
        },
        (EnvKind::CartPole, ParamSpace::Adapt) => EnvParams::CartPole {
            pole_len: rng.gen_range(0.2..=1.0),
            pole_mass: rng.gen_range(0.2..=1.0),
            cart_mass: rng.gen_range(0.2..=1.0),
        },
        (EnvKind::PlanarFeed, ParamSpace::Pretrain) => EnvParams::PlanarFeed {
            forward_speed: 0.0,
            rotation_speed: 0.0,
        },
        (EnvKind::PlanarFeed, ParamSpace::Adapt) => EnvParams::PlanarFeed {
            forward_speed: rng.gen_range(-1.0..=1.0),
            rotation_speed: rng.gen_range(-2.0..=2.0),
        },
    }
}

/// State predicate plus action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub kind: SafetyKind,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SafetyKind {
    /// Wrapped pole angle must stay inside the closed band [lo_deg, hi_deg],
    /// measured from upright with the swing-up side positive.
    PoleAngleBand { lo_deg: f64, hi_deg: f64 },
    /// End effector must stay out of the head disc except near the mouth.
    HeadClearance {
        head_radius: f64,
        mouth_opening: f64,
    },
}

impl SafetySpec {
    pub fn state_safe(&self, state: &[f64]) -> bool {
        match &self.kind {
            SafetyKind::PoleAngleBand { lo_deg, hi_deg } => {
                cartpole::angle_within_band(state[2], *lo_deg, *hi_deg)
            }
            SafetyKind::HeadClearance {
                head_radius,
                mouth_opening,
            } => planarfeed::clear_of_head(state, *head_radius, *mouth_opening),
        }
    }

    pub fn action_safe(&self, action: &[f64]) -> bool {
        action.len() == self.action_low.len()
            && action
                .iter()
                .zip(self.action_low.iter().zip(self.action_high.iter()))
                .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi)
    }

    pub fn action_range(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(self.action_high.iter())
            .map(|(lo, hi)| hi - lo)
            .collect()
    }
}

/// Outcome of one environment step. Flags mirror the safety predicates: the
/// action flag is evaluated on the raw commanded action, the state flag on
/// the resulting state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub state_violation: bool,
    pub action_violation: bool,
}

/// Reward oracle usable inside the planner without touching an env instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardModel {
    CartPole { pole_len: f64 },
    PlanarFeed,
}

impl RewardModel {
    pub fn eval(&self, state: &[f64], action: &[f64]) -> f64 {
        match self {
            RewardModel::CartPole { pole_len } => cartpole::reward(state, *pole_len),
            RewardModel::PlanarFeed => planarfeed::reward(state, action),
        }
    }

    /// Upper bound on |r|, which fixes the planner penalty scale.
    pub fn bound(&self) -> f64 {
        match self {
            RewardModel::CartPole { .. } => 1.0,
            RewardModel::PlanarFeed => planarfeed::REWARD_BOUND,
        }
    }
}

/// A concrete environment instance owning its episode parameters and state.
#[derive(Debug, Clone)]
pub enum Env {
    CartPole(cartpole::CartPole),
    PlanarFeed(planarfeed::PlanarFeed),
}

impl Env {
    pub fn new(params: EnvParams) -> Self {
        match params {
            EnvParams::CartPole { .. } => Env::CartPole(cartpole::CartPole::new(params)),
            EnvParams::PlanarFeed { .. } => Env::PlanarFeed(planarfeed::PlanarFeed::new(params)),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::CartPole(_) => EnvKind::CartPole,
            Env::PlanarFeed(_) => EnvKind::PlanarFeed,
        }
    }

    pub fn params(&self) -> EnvParams {
        match self {
            Env::CartPole(e) => e.params,
            Env::PlanarFeed(e) => e.params,
        }
    }

    pub fn safety(&self) -> SafetySpec {
        match self {
            Env::CartPole(_) => cartpole::safety_spec(),
            Env::PlanarFeed(_) => planarfeed::safety_spec(),
        }
    }

    pub fn reward_model(&self) -> RewardModel {
        match self {
            Env::CartPole(e) => RewardModel::CartPole {
                pole_len: match e.params {
                    EnvParams::CartPole { pole_len, .. } => pole_len,
                    _ => unreachable!(),
                },
            },
            Env::PlanarFeed(_) => RewardModel::PlanarFeed,
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Env::CartPole(e) => e.reset(rng),
            Env::PlanarFeed(e) => e.reset(rng),
        }
    }

    pub fn state(&self) -> &[f64] {
        match self {
            Env::CartPole(e) => &e.state,
            Env::PlanarFeed(e) => &e.state,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        match self {
            Env::CartPole(e) => e.step(action),
            Env::PlanarFeed(e) => e.step(action),
        }
    }

    /// Whether the episode ends here (workspace exit, not a safety event).
    pub fn is_terminal(&self, state: &[f64]) -> bool {
        match self {
            Env::CartPole(_) => cartpole::rail_exit(state),
            Env::PlanarFeed(_) => planarfeed::workspace_exit(state),
        }
    }

    /// Deterministic one-step integration under explicit parameters; the
    /// analytic prior model is built on this.
    pub fn nominal_step(
        kind: EnvKind,
        state: &[f64],
        action: &[f64],
        params: &EnvParams,
    ) -> Result<Vec<f64>> {
        if state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "nominal_step state",
            });
        }
        Ok(match kind {
            EnvKind::CartPole => cartpole::integrate(state, action[0], params).to_vec(),
            EnvKind::PlanarFeed => planarfeed::integrate(state, action, params),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pretrain_params_are_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_params(EnvKind::CartPole, ParamSpace::Pretrain, &mut rng);
        assert_eq!(
            p,
            EnvParams::CartPole {
                pole_len: 0.6,
                pole_mass: 0.6,
                cart_mass: 0.6
            }
        );
        let h = sample_params(EnvKind::PlanarFeed, ParamSpace::Pretrain, &mut rng);
        assert_eq!(
            h,
            EnvParams::PlanarFeed {
                forward_speed: 0.0,
                rotation_speed: 0.0
            }
        );
    }

    #[test]
    fn adapt_params_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            match sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut rng) {
                EnvParams::CartPole {
                    pole_len,
                    pole_mass,
                    cart_mass,
                } => {
                    for v in [pole_len, pole_mass, cart_mass] {
                        assert!((0.2..=1.0).contains(&v));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn adapt_params_mean_matches_uniform_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sums = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let v = sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut rng).as_vec();
            for (s, x) in sums.iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        for s in sums {
            let mean = s / n as f64;
            assert!((mean - 0.6).abs() < 0.01, "mean {}", mean);
        }
    }
}
