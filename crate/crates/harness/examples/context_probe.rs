// temporary probe for the context-awareness MSE gap
use sarl_core::anp::{AnpConfig, AnpModel, AnpTrainer, ContextSet};
use sarl_core::dynamics::{compose_input, residual_target, PriorModel};
use sarl_core::envs::{sample_params, Env, EnvKind, EnvParams, ParamSpace};
use sarl_core::linalg::Mat;
use sarl_core::replay::{EpisodeRecord, ReplayBuffer, SampleSpec, Transition};
use sarl_core::rng;
use rand::Rng;

fn collect_episode(
    params: EnvParams,
    prior: &PriorModel,
    seed: u64,
    horizon: usize,
) -> EpisodeRecord {
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

fn mse_on_episode(
    g: &AnpModel,
    prior: &PriorModel,
    ep: &EpisodeRecord,
    n_ctx: usize,
    with_context: bool,
) -> (f64, usize) {
    let d_s = ep.transitions[0].state.len();
    let d_a = ep.transitions[0].action.len();
    let mut ctx = ContextSet::empty(d_s + d_a, d_s);
    if with_context {
        for t in &ep.transitions[..n_ctx.min(ep.len())] {
            ctx.push(&t.model_input(), &t.residual);
        }
    }
    let rows = &ep.transitions[n_ctx.min(ep.len())..];
    if rows.is_empty() {
        return (0.0, 0);
    }
    let cache = g.prepare_context(&ctx).unwrap();
    let mut xq = Mat::zeros(0, d_s + d_a);
    for t in rows {
        xq.data.extend_from_slice(&compose_input(&t.state, &t.action));
        xq.rows += 1;
    }
    let mut z_rows = Mat::zeros(rows.len(), cache.latent.dim());
    for r in 0..rows.len() {
        z_rows.row_mut(r).copy_from_slice(&cache.latent.mean);
    }
    let (g_mu, _) = g.predict_with_latent_rows(&cache, &xq, &z_rows).unwrap();
    let mut total = 0.0;
    for (r, t) in rows.iter().enumerate() {
        let prior_mean = prior.predict(&t.state, &t.action).unwrap().mean;
        let mut err = 0.0;
        for c in 0..d_s {
            let d = prior_mean[c] + g_mu.row(r)[c] - t.next_state[c];
            err += d * d;
        }
        total += err / d_s as f64;
    }
    (total, rows.len())
}

fn main() {
    let nominal = EnvParams::CartPole { pole_len: 0.6, pole_mass: 0.6, cart_mass: 0.6 };
    let prior = PriorModel::Analytic { kind: EnvKind::CartPole, params: nominal };
    let t0 = std::time::Instant::now();
    let mut wins = 0;
    for seed in 0..10u64 {
        // training data
        let mut buffer = ReplayBuffer::new(64);
        for e in 0..30u64 {
            let mut prng = rng::rng_from(seed, &[10, e]);
            let params = sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut prng);
            buffer
                .add_episode(collect_episode(params, &prior, rng::derive_path(seed, &[11, e]), 40))
                .unwrap();
        }
        // model
        let cfg = AnpConfig::new(5, 4).with_hidden(vec![32, 32]);
        let mut g = AnpModel::init(cfg, &mut rng::rng_from(seed, &[12]));
        // normalize inputs over the buffer
        let mut xs = Mat::zeros(0, 5);
        for ep in buffer.episodes() {
            for t in &ep.transitions {
                xs.data.extend_from_slice(&t.model_input());
                xs.rows += 1;
            }
        }
        g.normalizer = sarl_core::nn::Normalizer::fit(&xs);
        let mut trainer = AnpTrainer::new(&g, Default::default());
        let mut train_rng = rng::rng_from(seed, &[13]);
        for _ in 0..1500 {
            let mut batch = Vec::new();
            for _ in 0..8 {
                let idx = train_rng.gen_range(0..buffer.len());
                let ep = buffer.get(idx).unwrap();
                let n_targets = 10usize.min(ep.len().saturating_sub(1)).max(1);
                let max_ctx = 15usize.min(ep.len() - n_targets).max(1);
                let spec = SampleSpec {
                    n_context: train_rng.gen_range(1..=max_ctx),
                    n_targets,
                    prioritized: false,
                };
                batch.push(buffer.sample_from_episode(ep, &spec, &mut train_rng).unwrap());
            }
            trainer.step(&mut g, &batch, &mut train_rng).unwrap();
        }
        // held-out evaluation
        let (mut with_sum, mut with_n, mut without_sum, mut without_n) = (0.0, 0, 0.0, 0);
        for e in 0..20u64 {
            let mut prng = rng::rng_from(seed, &[20, e]);
            let params = sample_params(EnvKind::CartPole, ParamSpace::Adapt, &mut prng);
            let ep = collect_episode(params, &prior, rng::derive_path(seed, &[21, e]), 40);
            let (s, n) = mse_on_episode(&g, &prior, &ep, 20, true);
            with_sum += s;
            with_n += n;
            let (s, n) = mse_on_episode(&g, &prior, &ep, 20, false);
            without_sum += s;
            without_n += n;
        }
        let with_mse = with_sum / with_n as f64;
        let without_mse = without_sum / without_n as f64;
        let gain = (without_mse - with_mse) / without_mse;
        println!(
            "seed {}: with-context {:.5} empty-context {:.5} relative gain {:.1}%",
            seed, with_mse, without_mse, 100.0 * gain
        );
        if gain >= 0.2 {
            wins += 1;
        }
    }
    println!("wins {}/10 ({:.0}s)", wins, t0.elapsed().as_secs_f64());
}
