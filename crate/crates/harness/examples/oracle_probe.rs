
// temporary probe for oracle-model swingup tuning
use sarl_core::dynamics::{PriorModel, PriorRollout};
use sarl_core::envs::{Env, EnvKind, EnvParams};
use sarl_core::planner::{PlanConfig, Planner};
use sarl_core::rng;

fn trial(pop: usize, iters: usize, init: f64, elite: f64, horizon: usize) -> (usize, usize, usize, f64) {
    let nominal = EnvParams::CartPole { pole_len: 0.6, pole_mass: 0.6, cart_mass: 0.6 };
    let prior = PriorModel::Analytic { kind: EnvKind::CartPole, params: nominal };
    let mut plan = PlanConfig::default_for(EnvKind::CartPole, 1.0);
    plan.horizon = horizon;
    plan.lambda = horizon as f64;
    plan.particles = 1;
    plan.cem.population = pop;
    plan.cem.elite_frac = elite;
    plan.cem.iterations = iters;
    plan.cem.init_std_frac = init;
    plan.prior_constraint = false;

    let mut strict = 0;
    let mut by_mean = 0;
    let mut zero_viol = 0;
    let t0 = std::time::Instant::now();
    for seed in 0..10u64 {
        let mut env = Env::new(nominal);
        let mut reset_rng = rng::rng_from(seed, &[1]);
        let mut state = env.reset(&mut reset_rng);
        let mut planner = Planner::new(plan.clone());
        let safety = env.safety();
        let reward = env.reward_model();
        let mut rewards = Vec::new();
        let mut violations = 0;
        for t in 0..100 {
            let roll = PriorRollout(&prior);
            let (a, _) = planner.act(&state, &roll, &roll, &safety, &reward, rng::derive_path(seed, &[2, t as u64])).unwrap();
            let step = env.step(&a).unwrap();
            state = step.next_state.clone();
            rewards.push(step.reward);
            if step.state_violation { violations += 1; }
            if env.is_terminal(&state) { break; }
        }
        let tail: f64 = rewards.iter().rev().take(20).sum::<f64>() / 20.0;
        if rewards.len() >= 100 && rewards[80..].iter().all(|r| *r > 0.8) { strict += 1; }
        if rewards.len() >= 100 && tail > 0.8 { by_mean += 1; }
        if violations == 0 { zero_viol += 1; }
    }
    (strict, by_mean, zero_viol, t0.elapsed().as_secs_f64())
}

fn main() {
    for (pop, iters, init, elite, h) in [
        (800usize, 5usize, 0.18f64, 0.08f64, 20usize),
        (800, 4, 0.2, 0.05, 20),
        (600, 5, 0.15, 0.08, 20),
    ] {
        let (s, m, z, el) = trial(pop, iters, init, elite, h);
        println!("pop {} iters {} init {} elite {} h {}: strict {}/10 mean {}/10 zero-viol {}/10 ({:.0}s)", pop, iters, init, elite, h, s, m, z, el);
    }
}
