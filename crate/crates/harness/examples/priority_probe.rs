// temporary probe for the prioritized-sampling MSE effect
use rand::Rng;
use sarl_core::anp::{AnpConfig, AnpModel, AnpTrainer, ContextSet};
use sarl_core::dynamics::{compose_input, residual_target, PriorModel};
use sarl_core::envs::{sample_params, Env, EnvKind, EnvParams, ParamSpace};
use sarl_core::linalg::Mat;
use sarl_core::replay::{EpisodeRecord, ReplayBuffer, SampleSpec, Transition};
use sarl_core::rng;

fn collect_episode(params: EnvParams, prior: &PriorModel, seed: u64, horizon: usize) -> EpisodeRecord {
    let mut env = Env::new(params);
    let mut reset = rng::rng_from(seed, &[1]);
    let mut state = env.reset(&mut reset);
    let mut act_rng = rng::rng_from(seed, &[2]);
    let safety = env.safety();
    let mut transitions = Vec::new();
    for _ in 0..horizon {
        let action: Vec<f64> = safety
            .action_low
            .iter()
            .zip(safety.action_high.iter())
            .map(|(lo, hi)| act_rng.gen_range(*lo..=*hi))
            .collect();
        let step = env.step(&action).unwrap();
        let residual = residual_target(prior, &state, &action, &step.next_state).unwrap();
        transitions.push(Transition {
            state: state.clone(),
            action,
            residual,
            next_state: step.next_state.clone(),
            state_violation: step.state_violation,
            action_violation: step.action_violation,
        });
        state = step.next_state;
        if env.is_terminal(&state) {
            break;
        }
    }
    EpisodeRecord { id: seed, transitions }
}

fn train(buffer: &ReplayBuffer, prioritized: bool, seed: u64, steps: usize) -> AnpModel {
    let cfg = AnpConfig::new(5, 4).with_hidden(vec![32, 32]);
    let mut g = AnpModel::init(cfg, &mut rng::rng_from(seed, &[12]));
    let mut xs = Mat::zeros(0, 5);
    for ep in buffer.episodes() {
        for t in &ep.transitions {
            xs.data.extend_from_slice(&t.model_input());
            xs.rows += 1;
        }
    }
    g.normalizer = sarl_core::nn::Normalizer::fit(&xs);
    let mut trainer = AnpTrainer::new(&g, Default::default());
    // Per-(step, task) streams keep the prioritized and uniform arms on the
    // same curriculum: same episodes, same set sizes, same latent noise.
    for step in 0..steps as u64 {
        let mut batch = Vec::new();
        for task in 0..8u64 {
            let mut task_rng = rng::rng_from(seed, &[13, step, task]);
            let idx = task_rng.gen_range(0..buffer.len());
            let ep = buffer.get(idx).unwrap();
            let n_targets = 20usize.min(ep.len().saturating_sub(1)).max(1);
            let max_ctx = 20usize.min(ep.len() - n_targets).max(1);
            let spec = SampleSpec {
                n_context: task_rng.gen_range(1..=max_ctx),
                n_targets,
                prioritized,
            };
            batch.push(buffer.sample_from_episode(ep, &spec, &mut task_rng).unwrap());
        }
        let mut step_rng = rng::rng_from(seed, &[14, step]);
        trainer.step(&mut g, &batch, &mut step_rng).unwrap();
    }
    g
}

fn eval_mse(g: &AnpModel, prior: &PriorModel, eps: &[EpisodeRecord]) -> (f64, f64) {
    let (mut ssum, mut sn, mut usum, mut un) = (0.0, 0usize, 0.0, 0usize);
    for ep in eps {
        let n_ctx = 15.min(ep.len() / 2);
        let mut ctx = ContextSet::empty(5, 4);
        for t in &ep.transitions[..n_ctx] {
            ctx.push(&t.model_input(), &t.residual);
        }
        let rows = &ep.transitions[n_ctx..];
        if rows.is_empty() {
            continue;
        }
        let cache = g.prepare_context(&ctx).unwrap();
        let mut xq = Mat::zeros(0, 5);
        for t in rows {
            xq.data.extend_from_slice(&compose_input(&t.state, &t.action));
            xq.rows += 1;
        }
        let mut z_rows = Mat::zeros(rows.len(), 8);
        for r in 0..rows.len() {
            z_rows.row_mut(r).copy_from_slice(&cache.latent.mean);
        }
        let (g_mu, _) = g.predict_with_latent_rows(&cache, &xq, &z_rows).unwrap();
        for (r, t) in rows.iter().enumerate() {
            let pm = prior.predict(&t.state, &t.action).unwrap().mean;
            let mut err = 0.0;
            for c in 0..4 {
                let d = pm[c] + g_mu.row(r)[c] - t.next_state[c];
                err += d * d;
            }
            err /= 4.0;
            if t.unsafe_label() {
                usum += err;
                un += 1;
            } else {
                ssum += err;
                sn += 1;
            }
        }
    }
    (ssum / sn.max(1) as f64, usum / un.max(1) as f64)
}

fn main() {
    let nominal = EnvParams::CartPole { pole_len: 0.6, pole_mass: 0.6, cart_mass: 0.6 };
    let prior = PriorModel::Analytic { kind: EnvKind::CartPole, params: nominal };
    let t0 = std::time::Instant::now();
    let mut unsafe_wins = 0;
    let mut safe_ok = 0;
    for seed in 0..6u64 {
        let mut buffer = ReplayBuffer::new(64);
        let mut unsafe_rows = 0;
        let mut total_rows = 0;
        for e in 0..60u64 {
            let mut prng = rng::rng_from(seed, &[10, e]);
            let params = sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut prng);
            let ep = collect_episode(params, &prior, rng::derive_path(seed, &[11, e]), 50);
            unsafe_rows += ep.unsafe_count();
            total_rows += ep.len();
            buffer.add_episode(ep).unwrap();
        }
        let g_pri = train(&buffer, true, seed, 2500);
        let g_uni = train(&buffer, false, seed, 2500);
        let eval_eps: Vec<EpisodeRecord> = (0..60u64)
            .map(|e| {
                let mut prng = rng::rng_from(seed, &[20, e]);
                let params = sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut prng);
                collect_episode(params, &prior, rng::derive_path(seed, &[21, e]), 50)
            })
            .collect();
        let (safe_p, unsafe_p) = eval_mse(&g_pri, &prior, &eval_eps);
        let (safe_u, unsafe_u) = eval_mse(&g_uni, &prior, &eval_eps);
        let win = unsafe_p < unsafe_u;
        let degr = (safe_p - safe_u) / safe_u;
        println!(
            "seed {}: unsafe frac {:.2}% | unsafe mse pri {:.5} uni {:.5} ({}) | safe degr {:+.1}%",
            seed,
            100.0 * unsafe_rows as f64 / total_rows as f64,
            unsafe_p,
            unsafe_u,
            if win { "WIN" } else { "loss" },
            100.0 * degr
        );
        if win {
            unsafe_wins += 1;
        }
        if degr < 0.10 {
            safe_ok += 1;
        }
    }
    println!(
        "unsafe wins {}/6, safe-degradation-ok {}/6 ({:.0}s)",
        unsafe_wins,
        safe_ok,
        t0.elapsed().as_secs_f64()
    );
}
