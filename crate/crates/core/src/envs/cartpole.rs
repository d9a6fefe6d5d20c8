//! Cart-pole swingup with an angle-band safety constraint.
//!
//! Frictionless cart with a point-mass pole of length `l`. The angle is
//! measured from upright (0 = up) and grows without wrapping; constraint
//! checks wrap it into a window centered on the allowed band. Simulated at
//! 20 Hz with RK4 sub-steps under a zero-order hold on the force.

use super::{EnvParams, SafetyKind, SafetySpec, StepResult};
use crate::error::{CoreError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAVITY: f64 = 9.81;
pub const DT: f64 = 0.05;
pub const FORCE_LIMIT: f64 = 10.0;
pub const RAIL_LIMIT: f64 = 3.0;
pub const ANGLE_LO_DEG: f64 = -10.0;
pub const ANGLE_HI_DEG: f64 = 225.0;
/// RK4 sub-steps per control interval; keeps energy drift under 1e-4/s.
const SUBSTEPS: usize = 4;

pub fn safety_spec() -> SafetySpec {
    SafetySpec {
        kind: SafetyKind::PoleAngleBand {
            lo_deg: ANGLE_LO_DEG,
            hi_deg: ANGLE_HI_DEG,
        },
        action_low: vec![-FORCE_LIMIT],
        action_high: vec![FORCE_LIMIT],
    }
}

/// Wrap an angle into the window centered on the allowed band, i.e. into
/// [-72.5°, 287.5°) for the default [-10°, 225°] constraint, then test the
/// closed band. The cut sits in the middle of the forbidden arc so no safe
/// angle is ever mapped across it.
pub fn angle_within_band(theta: f64, lo_deg: f64, hi_deg: f64) -> bool {
    let lo = lo_deg.to_radians();
    let hi = hi_deg.to_radians();
    let two_pi = std::f64::consts::TAU;
    // midpoint of the forbidden arc, then back half a turn to the cut
    let cut = (hi + (two_pi - (hi - lo)) / 2.0) - two_pi;
    let wrapped = theta - ((theta - cut) / two_pi).floor() * two_pi;
    wrapped >= lo && wrapped <= hi
}

/// Accelerations (x_dd, theta_dd) for the point-mass pole.
#[inline]
fn accel(state: &[f64; 4], force: f64, l: f64, pm: f64, cm: f64) -> (f64, f64) {
    let theta = state[2];
    let dtheta = state[3];
    let s = theta.sin();
    let c = theta.cos();
    let x_dd = (force + pm * s * (l * dtheta * dtheta - GRAVITY * c)) / (cm + pm * s * s);
    let th_dd = (GRAVITY * s - c * x_dd) / l;
    (x_dd, th_dd)
}

#[inline]
fn deriv(state: &[f64; 4], force: f64, l: f64, pm: f64, cm: f64) -> [f64; 4] {
    let (x_dd, th_dd) = accel(state, force, l, pm, cm);
    [state[1], x_dd, state[3], th_dd]
}

/// One 20 Hz control interval of RK4 integration with the force held.
pub fn integrate(state: &[f64], force: f64, params: &EnvParams) -> [f64; 4] {
    let (l, pm, cm) = match *params {
        EnvParams::CartPole {
            pole_len,
            pole_mass,
            cart_mass,
        } => (pole_len, pole_mass, cart_mass),
        _ => panic!("cart-pole integrate called with foreign params"),
    };
    let mut s = [state[0], state[1], state[2], state[3]];
    let h = DT / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        let k1 = deriv(&s, force, l, pm, cm);
        let s2 = add_scaled(&s, &k1, h / 2.0);
        let k2 = deriv(&s2, force, l, pm, cm);
        let s3 = add_scaled(&s, &k2, h / 2.0);
        let k3 = deriv(&s3, force, l, pm, cm);
        let s4 = add_scaled(&s, &k3, h);
        let k4 = deriv(&s4, force, l, pm, cm);
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    s
}

#[inline]
fn add_scaled(s: &[f64; 4], k: &[f64; 4], h: f64) -> [f64; 4] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
}

/// r = exp(-((x - l sinθ)² + (l - l cosθ)²) / l²), in (0, 1], peaking with
/// the cart centered and the pole upright.
pub fn reward(state: &[f64], pole_len: f64) -> f64 {
    let x = state[0];
    let theta = state[2];
    let a = x - pole_len * theta.sin();
    let b = pole_len - pole_len * theta.cos();
    (-(a * a + b * b) / (pole_len * pole_len)).exp()
}

pub fn rail_exit(state: &[f64]) -> bool {
    state[0].abs() > RAIL_LIMIT
}

/// Total mechanical energy; conserved under zero force.
pub fn energy(state: &[f64], params: &EnvParams) -> f64 {
    let (l, pm, cm) = match *params {
        EnvParams::CartPole {
            pole_len,
            pole_mass,
            cart_mass,
        } => (pole_len, pole_mass, cart_mass),
        _ => panic!("cart-pole energy called with foreign params"),
    };
    let (xd, th, thd) = (state[1], state[2], state[3]);
    0.5 * (cm + pm) * xd * xd
        + pm * l * th.cos() * xd * thd
        + 0.5 * pm * l * l * thd * thd
        + pm * GRAVITY * l * th.cos()
}

#[derive(Debug, Clone)]
pub struct CartPole {
    pub params: EnvParams,
    pub state: Vec<f64>,
    safety: SafetySpec,
}

impl CartPole {
    pub fn new(params: EnvParams) -> Self {
        assert!(matches!(params, EnvParams::CartPole { .. }));
        CartPole {
            params,
            state: vec![0.0, 0.0, std::f64::consts::PI, 0.0],
            safety: safety_spec(),
        }
    }

    /// Start hanging with small uniform noise on every component.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.state = vec![
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            std::f64::consts::PI + rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        self.state.clone()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "cartpole state",
            });
        }
        let raw = action[0];
        let action_violation = !self.safety.action_safe(action);
        let force = raw.clamp(-FORCE_LIMIT, FORCE_LIMIT);
        let next = integrate(&self.state, force, &self.params);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "cartpole next state",
            });
        }
        let pole_len = match self.params {
            EnvParams::CartPole { pole_len, .. } => pole_len,
            _ => unreachable!(),
        };
        let r = reward(&next, pole_len);
        let state_violation = !self.safety.state_safe(&next);
        self.state = next.to_vec();
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
    use std::f64::consts::PI;

    fn nominal() -> EnvParams {
        EnvParams::CartPole {
            pole_len: 0.6,
            pole_mass: 0.6,
            cart_mass: 0.6,
        }
    }

    #[test]
    fn hanging_equilibrium_is_stationary() {
        let s = [0.0, 0.0, PI, 0.0];
        let next = integrate(&s, 0.0, &nominal());
        for (a, b) in next.iter().zip(s.iter()) {
            assert!((a - b).abs() < 1e-12, "{:?}", next);
        }
    }

    #[test]
    fn upright_equilibrium_has_zero_acceleration() {
        let (x_dd, th_dd) = accel(&[0.0, 0.0, 0.0, 0.0], 0.0, 0.6, 0.6, 0.6);
        assert_eq!(x_dd, 0.0);
        assert_eq!(th_dd, 0.0);
    }

    #[test]
    fn small_angle_frequency_matches_linearization() {
        // About hanging: omega^2 = g (cm + pm) / (l cm).
        let params = nominal();
        let omega = (GRAVITY * 1.2 / (0.6 * 0.6)).sqrt();
        let mut s = [0.0, 0.0, PI + 0.02, 0.0];
        let mut crossings = Vec::new();
        let mut prev = s[2] - PI;
        for step in 1..=100 {
            s = integrate(&s, 0.0, &params);
            let phi = s[2] - PI;
            if prev.signum() != phi.signum() {
                // Linear interpolation of the crossing time.
                let frac = prev / (prev - phi);
                crossings.push((step as f64 - 1.0 + frac) * DT);
            }
            prev = phi;
        }
        assert!(crossings.len() >= 4, "too few crossings: {:?}", crossings);
        let mut half_periods = Vec::new();
        for w in crossings.windows(2) {
            half_periods.push(w[1] - w[0]);
        }
        let mean_half: f64 = half_periods.iter().sum::<f64>() / half_periods.len() as f64;
        let omega_est = PI / mean_half;
        let rel = (omega_est - omega).abs() / omega;
        assert!(rel < 0.02, "omega {} vs {} (rel {})", omega_est, omega, rel);
    }

    #[test]
    fn reward_examples() {
        let l = 0.6;
        assert!((reward(&[0.0, 0.0, 0.0, 0.0], l) - 1.0).abs() < 1e-15);
        let hang = reward(&[0.0, 0.0, PI, 0.0], l);
        assert!((hang - (-4.0f64).exp()).abs() < 1e-12);
        let side = reward(&[l, 0.0, PI / 2.0, 0.0], l);
        assert!((side - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn reward_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-8.0..8.0),
            ];
            let r = reward(&s, 0.6);
            assert!(r > 0.0 && r <= 1.0);
        }
    }

    #[test]
    fn angle_band_boundaries() {
        assert!(angle_within_band(0.0, -10.0, 225.0));
        assert!(!angle_within_band((-11.0f64).to_radians(), -10.0, 225.0));
        assert!(angle_within_band((225.0f64).to_radians(), -10.0, 225.0));
        assert!(!angle_within_band((226.0f64).to_radians(), -10.0, 225.0));
        // -10° is reachable from above as 350°
        assert!(angle_within_band((350.0f64).to_radians(), -10.0, 225.0));
        assert!(angle_within_band((-10.0f64).to_radians() + std::f64::consts::TAU, -10.0, 225.0));
        // full-turn aliasing of a violation stays a violation
        assert!(!angle_within_band((270.0f64).to_radians() - std::f64::consts::TAU, -10.0, 225.0));
    }

    #[test]
    fn energy_is_conserved_without_force() {
        let params = nominal();
        // swing from 90°, a large-amplitude trajectory
        let mut s = [0.0, 0.0, PI / 2.0, 0.0];
        let e0 = energy(&s, &params);
        for step in 1..=100 {
            s = integrate(&s, 0.0, &params);
            let e = energy(&s, &params);
            let elapsed = step as f64 * DT;
            let rel = (e - e0).abs() / e0.abs().max(1.0);
            assert!(
                rel <= 1e-4 * elapsed.max(DT),
                "energy drift {} after {}s",
                rel,
                elapsed
            );
        }
    }

    #[test]
    fn step_is_deterministic() {
        let mut a = CartPole::new(nominal());
        let mut b = CartPole::new(nominal());
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        a.reset(&mut rng_a);
        b.reset(&mut rng_b);
        for i in 0..20 {
            let f = [((i as f64) * 0.37).sin() * 8.0];
            let ra = a.step(&f).unwrap();
            let rb = b.step(&f).unwrap();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn action_flag_reflects_raw_action() {
        let mut env = CartPole::new(nominal());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        env.reset(&mut rng);
        let r = env.step(&[11.0]).unwrap();
        assert!(r.action_violation);
        let r = env.step(&[10.0]).unwrap();
        assert!(!r.action_violation);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let mut env = CartPole::new(nominal());
        env.state[2] = f64::NAN;
        assert!(env.step(&[0.0]).is_err());
    }
}
