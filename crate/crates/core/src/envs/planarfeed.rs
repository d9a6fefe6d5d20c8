//! Planar feeding proxy: a 2-D double-integrator end effector delivering to
//! a moving head disc. The disc translates at the hidden forward speed and
//! its mouth point oscillates at the hidden rotation speed. Contact with the
//! disc outside the mouth opening is a safety violation. 10 Hz.

use super::{EnvParams, SafetyKind, SafetySpec, StepResult};
use crate::error::{CoreError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DT: f64 = 0.1;
pub const ACCEL_LIMIT: f64 = 1.0;
pub const HEAD_RADIUS: f64 = 0.3;
/// Distance from the mouth point within which disc contact is permitted.
pub const MOUTH_OPENING: f64 = 0.12;
/// Delivery tolerance around the mouth point.
pub const MOUTH_RADIUS: f64 = 0.08;
pub const DELIVERY_BONUS: f64 = 2.0;
pub const ACTION_PENALTY: f64 = 0.05;
pub const WORKSPACE: f64 = 5.0;
/// Head translation per unit forward-speed parameter.
const FWD_SCALE: f64 = 0.1;
/// Mouth phase advance per unit rotation-speed parameter.
const ROT_SCALE: f64 = 0.5;
/// Amplitude of the mouth oscillation around the facing direction.
const MOUTH_SWING: f64 = 0.6;

/// r_dis + r_med + r_act with |r| bounded by this.
pub const REWARD_BOUND: f64 = 1.0 + DELIVERY_BONUS;

// State layout: [ee_x, ee_y, ee_vx, ee_vy, head_cx, head_cy, phase]

pub fn safety_spec() -> SafetySpec {
    SafetySpec {
        kind: SafetyKind::HeadClearance {
            head_radius: HEAD_RADIUS,
            mouth_opening: MOUTH_OPENING,
        },
        action_low: vec![-ACCEL_LIMIT; 2],
        action_high: vec![ACCEL_LIMIT; 2],
    }
}

/// Mouth point on the disc boundary; oscillates around the side facing the
/// end effector's start region (-x).
pub fn mouth_point(state: &[f64]) -> (f64, f64) {
    let (cx, cy, phase) = (state[4], state[5], state[6]);
    let ang = std::f64::consts::PI + MOUTH_SWING * phase.sin();
    (cx + HEAD_RADIUS * ang.cos(), cy + HEAD_RADIUS * ang.sin())
}

pub fn clear_of_head(state: &[f64], head_radius: f64, mouth_opening: f64) -> bool {
    let (ex, ey) = (state[0], state[1]);
    let (cx, cy) = (state[4], state[5]);
    let d_center = ((ex - cx).powi(2) + (ey - cy).powi(2)).sqrt();
    if d_center >= head_radius {
        return true;
    }
    let (mx, my) = mouth_point(state);
    let d_mouth = ((ex - mx).powi(2) + (ey - my).powi(2)).sqrt();
    d_mouth <= mouth_opening
}

pub fn workspace_exit(state: &[f64]) -> bool {
    state[0].abs() > WORKSPACE || state[1].abs() > WORKSPACE
}

pub fn reward(state: &[f64], action: &[f64]) -> f64 {
    let (ex, ey) = (state[0], state[1]);
    let (mx, my) = mouth_point(state);
    let d2 = (ex - mx).powi(2) + (ey - my).powi(2);
    let r_dis = (-d2 / 0.25).exp();
    let r_med = if d2.sqrt() < MOUTH_RADIUS {
        DELIVERY_BONUS
    } else {
        0.0
    };
    let r_act = -ACTION_PENALTY * action.iter().map(|a| a * a).sum::<f64>();
    r_dis + r_med + r_act
}

/// Deterministic one-step integration under explicit parameters.
pub fn integrate(state: &[f64], action: &[f64], params: &EnvParams) -> Vec<f64> {
    let (fwd, rot) = match *params {
        EnvParams::PlanarFeed {
            forward_speed,
            rotation_speed,
        } => (forward_speed, rotation_speed),
        _ => panic!("planar-feed integrate called with foreign params"),
    };
    let ax = action[0].clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
    let ay = action[1].clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
    vec![
        state[0] + state[2] * DT + 0.5 * ax * DT * DT,
        state[1] + state[3] * DT + 0.5 * ay * DT * DT,
        state[2] + ax * DT,
        state[3] + ay * DT,
        state[4] - fwd * FWD_SCALE * DT,
        state[5],
        state[6] + rot * ROT_SCALE * DT,
    ]
}

#[derive(Debug, Clone)]
pub struct PlanarFeed {
    pub params: EnvParams,
    pub state: Vec<f64>,
    safety: SafetySpec,
}

impl PlanarFeed {
    pub fn new(params: EnvParams) -> Self {
        assert!(matches!(params, EnvParams::PlanarFeed { .. }));
        PlanarFeed {
            params,
            state: vec![0.0, 0.0, 0.0, 0.0, 1.5, 0.0, 0.0],
            safety: safety_spec(),
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.state = vec![
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            0.0,
            0.0,
            1.5,
            rng.gen_range(-0.1..0.1),
            0.0,
        ];
        self.state.clone()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "planarfeed state",
            });
        }
        let action_violation = !self.safety.action_safe(action);
        let next = integrate(&self.state, action, &self.params);
        let r = reward(&next, action);
        let state_violation = !self.safety.state_safe(&next);
        self.state = next;
        Ok(StepResult {
            next_state: self.state.clone(),
            reward: r,
            state_violation,
            action_violation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stationary() -> EnvParams {
        EnvParams::PlanarFeed {
            forward_speed: 0.0,
            rotation_speed: 0.0,
        }
    }

    #[test]
    fn stationary_head_and_zero_action_change_nothing() {
        let mut env = PlanarFeed::new(stationary());
        let s0 = env.state.clone();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.next_state, s0);
        assert!(!r.state_violation);
        assert!(!r.action_violation);
    }

    #[test]
    fn head_center_contact_is_a_violation() {
        let mut env = PlanarFeed::new(stationary());
        env.state[0] = env.state[4];
        env.state[1] = env.state[5];
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert!(r.state_violation);
    }

    #[test]
    fn delivery_bonus_triggers_inside_mouth_radius() {
        let env = PlanarFeed::new(stationary());
        let (mx, my) = mouth_point(&env.state);
        for (d, expect) in [
            (MOUTH_RADIUS * 0.99, true),
            (MOUTH_RADIUS * 1.01, false),
        ] {
            let mut s = env.state.clone();
            s[0] = mx - d;
            s[1] = my;
            let r = reward(&s, &[0.0, 0.0]);
            let has_bonus = r > 1.0;
            assert_eq!(has_bonus, expect, "distance {}: r = {}", d, r);
        }
    }

    #[test]
    fn mouth_contact_is_permitted() {
        let env = PlanarFeed::new(stationary());
        let (mx, my) = mouth_point(&env.state);
        let mut s = env.state.clone();
        s[0] = mx;
        s[1] = my;
        assert!(clear_of_head(&s, HEAD_RADIUS, MOUTH_OPENING));
    }

    #[test]
    fn moving_head_translates_and_rotates() {
        let params = EnvParams::PlanarFeed {
            forward_speed: 1.0,
            rotation_speed: 2.0,
        };
        let mut env = PlanarFeed::new(params);
        let cx0 = env.state[4];
        let phase0 = env.state[6];
        env.step(&[0.0, 0.0]).unwrap();
        assert!(env.state[4] < cx0);
        assert!(env.state[6] > phase0);
    }

    #[test]
    fn determinism() {
        let params = EnvParams::PlanarFeed {
            forward_speed: -0.5,
            rotation_speed: 1.5,
        };
        let mut a = PlanarFeed::new(params);
        let mut b = PlanarFeed::new(params);
        let mut ra = ChaCha8Rng::seed_from_u64(4);
        let mut rb = ChaCha8Rng::seed_from_u64(4);
        a.reset(&mut ra);
        b.reset(&mut rb);
        for i in 0..10 {
            let act = [(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos() * 0.5];
            assert_eq!(a.step(&act).unwrap(), b.step(&act).unwrap());
        }
    }
}
