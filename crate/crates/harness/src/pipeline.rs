//! The experiment pipeline behind the CLI subcommands.

use crate::config::{AblationConfig, RunConfig};
use crate::metrics::{write_metrics_csv, write_timings_csv, MetricsRow};
use crate::HarnessError;
use rayon::prelude::*;
use sarl_core::anp::{AnpConfig, AnpModel, AnpTrainer, ContextSet};
use sarl_core::autodiff::AdamConfig;
use sarl_core::dynamics::{
    compose_input, residual_target, CompositeRollout, GaussianMlpPrior, PriorModel,
    PriorRollout, PriorTrainer,
};
use sarl_core::envs::{sample_params, Env, EnvKind, EnvParams, ParamSpace, RewardModel};
use sarl_core::linalg::Mat;
use sarl_core::nn::Normalizer;
use sarl_core::planner::{PlanConfig, Planner};
use sarl_core::replay::{EpisodeRecord, ReplayBuffer, SampleSpec, Transition};
use sarl_core::rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Abort pre-training when this many optimizer steps have been skipped for
/// non-finite gradients.
const DIVERGENCE_ABORT: u64 = 50;

// Seed stream tags; every stochastic site gets its own lane.
const TAG_PARAMS: u64 = 10;
const TAG_RESET: u64 = 11;
const TAG_ACT: u64 = 12;
const TAG_TRAIN: u64 = 13;
const TAG_BOOT: u64 = 20;
const TAG_PRETRAIN_FIT: u64 = 23;
const TAG_EVAL: u64 = 30;

pub struct EpisodeOutcome {
    pub record: EpisodeRecord,
    /// Reward earned at each executed step, aligned with the record.
    pub rewards: Vec<f64>,
    pub return_sum: f64,
    pub violation_rate: f64,
    pub steps: usize,
    pub degraded: u64,
    pub diverged: bool,
    pub diag_lines: Vec<String>,
}

enum EpisodePolicy<'a> {
    Planner {
        prior: &'a PriorModel,
        disturbance: Option<&'a AnpModel>,
        plan: &'a PlanConfig,
        use_context: bool,
        diagnostics: bool,
    },
    RandomActions,
}

/// Run one episode, recording transitions and safety flags. The context set
/// passed to the planner at step t holds exactly the episode's first t
/// transitions, in order.
fn run_episode(
    env: &mut Env,
    policy: &EpisodePolicy,
    episode_id: u64,
    seed: u64,
    horizon: usize,
) -> Result<EpisodeOutcome, HarnessError> {
    let d_s = env.kind().state_dim();
    let d_a = env.kind().action_dim();
    let safety = env.safety();
    let reward = env.reward_model();
    let mut reset_rng = rng::rng_from(seed, &[TAG_RESET, episode_id]);
    let mut state = env.reset(&mut reset_rng);

    let mut planner = match policy {
        EpisodePolicy::Planner { plan, .. } => Some(Planner::new((*plan).clone())),
        EpisodePolicy::RandomActions => None,
    };
    let empty_ctx = ContextSet::empty(d_s + d_a, d_s);
    let mut ctx = ContextSet::empty(d_s + d_a, d_s);
    let mut record = EpisodeRecord {
        id: episode_id,
        transitions: Vec::with_capacity(horizon),
    };
    let mut return_sum = 0.0;
    let mut rewards = Vec::with_capacity(horizon);
    let mut violations = 0usize;
    let mut steps = 0usize;
    let mut degraded = 0u64;
    let mut diverged = false;
    let mut diag_lines = Vec::new();

    for t in 0..horizon {
        let action: Vec<f64> = match policy {
            EpisodePolicy::RandomActions => {
                let mut arng = rng::rng_from(seed, &[TAG_BOOT, episode_id, t as u64]);
                use rand::Rng;
                safety
                    .action_low
                    .iter()
                    .zip(safety.action_high.iter())
                    .map(|(lo, hi)| arng.gen_range(*lo..=*hi))
                    .collect()
            }
            EpisodePolicy::Planner {
                prior,
                disturbance,
                use_context,
                diagnostics,
                ..
            } => {
                debug_assert_eq!(ctx.len(), t, "context must hold the first t transitions");
                let planner_ctx = if *use_context { &ctx } else { &empty_ctx };
                let cache = match disturbance {
                    Some(g) => Some(g.prepare_context(planner_ctx)?),
                    None => None,
                };
                let model = CompositeRollout {
                    prior,
                    disturbance: disturbance.zip(cache.as_ref()).map(|(g, c)| (g, c)),
                };
                let prior_fam = PriorRollout(prior);
                let plan_seed = rng::derive_path(seed, &[TAG_ACT, episode_id, t as u64]);
                let p = planner.as_mut().unwrap();
                let (a, diag) =
                    p.act(&state, &model, &prior_fam, &safety, &reward, plan_seed)?;
                if diag.degraded {
                    degraded += 1;
                }
                if *diagnostics {
                    diag_lines.push(format!(
                        "{{\"episode\":{},\"t\":{},\"cvar\":{},\"model_ind\":{},\"prior_ind\":{},\"action_ind\":{},\"degraded\":{}}}",
                        episode_id,
                        t,
                        diag.cvar_best,
                        diag.model_indicator_steps,
                        diag.prior_indicator_steps,
                        diag.action_indicator_steps,
                        diag.degraded
                    ));
                }
                a
            }
        };

        let step = match env.step(&action) {
            Ok(s) => s,
            Err(sarl_core::CoreError::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        steps += 1;
        return_sum += step.reward;
        rewards.push(step.reward);
        if step.state_violation || step.action_violation {
            violations += 1;
        }
        let residual = match policy {
            EpisodePolicy::Planner { prior, .. } => {
                residual_target(prior, &state, &action, &step.next_state)?
            }
            // Bootstrap episodes have no prior yet; store plain deltas and
            // recompute residuals against the final checkpoint at save time.
            EpisodePolicy::RandomActions => step
                .next_state
                .iter()
                .zip(state.iter())
                .map(|(n, s)| n - s)
                .collect(),
        };
        record.transitions.push(Transition {
            state: state.clone(),
            action: action.clone(),
            residual,
            next_state: step.next_state.clone(),
            state_violation: step.state_violation,
            action_violation: step.action_violation,
        });
        ctx.push(&compose_input(&state, &action), &record.transitions[t].residual);
        state = step.next_state;
        if env.is_terminal(&state) {
            break;
        }
    }

    Ok(EpisodeOutcome {
        record,
        rewards,
        return_sum,
        violation_rate: if steps > 0 {
            violations as f64 / steps as f64
        } else {
            0.0
        },
        steps,
        degraded,
        diverged,
        diag_lines,
    })
}

/// Recompute every stored residual against a prior model (used after the
/// prior has finished training).
/// One CSV row per executed step across a run's episodes.
struct StepLog {
    header_written: bool,
    out: String,
}

impl StepLog {
    fn new() -> Self {
        StepLog {
            header_written: false,
            out: String::new(),
        }
    }

    fn append(&mut self, episode: u64, outcome: &EpisodeOutcome, params: &[f64]) {
        if outcome.record.is_empty() {
            return;
        }
        let t0 = &outcome.record.transitions[0];
        if !self.header_written {
            let mut header: Vec<String> = vec!["episode".into(), "t".into()];
            header.extend((0..t0.state.len()).map(|i| format!("s{}", i)));
            header.extend((0..t0.action.len()).map(|i| format!("a{}", i)));
            header.push("reward".into());
            header.push("state_violation".into());
            header.push("action_violation".into());
            header.extend((0..params.len()).map(|i| format!("p{}", i)));
            self.out.push_str(&header.join(","));
            self.out.push('\n');
            self.header_written = true;
        }
        for (t, tr) in outcome.record.transitions.iter().enumerate() {
            let mut row: Vec<String> = vec![episode.to_string(), t.to_string()];
            row.extend(tr.state.iter().map(|v| format!("{}", v)));
            row.extend(tr.action.iter().map(|v| format!("{}", v)));
            row.push(format!("{}", outcome.rewards[t]));
            row.push((tr.state_violation as u8).to_string());
            row.push((tr.action_violation as u8).to_string());
            row.extend(params.iter().map(|v| format!("{}", v)));
            self.out.push_str(&row.join(","));
            self.out.push('\n');
        }
    }

    fn write(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &self.out)?;
        Ok(())
    }
}

fn rebase_residuals(record: &mut EpisodeRecord, prior: &PriorModel) -> Result<(), HarnessError> {
    for t in &mut record.transitions {
        t.residual = residual_target(prior, &t.state, &t.action, &t.next_state)?;
    }
    Ok(())
}

fn dataset_mats(records: &[EpisodeRecord]) -> (Mat, Mat, Mat) {
    let d_s = records[0].transitions[0].state.len();
    let d_a = records[0].transitions[0].action.len();
    let n: usize = records.iter().map(|r| r.len()).sum();
    let mut states = Mat::zeros(0, d_s);
    let mut actions = Mat::zeros(0, d_a);
    let mut nexts = Mat::zeros(0, d_s);
    states.data.reserve(n * d_s);
    for r in records {
        for t in &r.transitions {
            states.data.extend_from_slice(&t.state);
            states.rows += 1;
            actions.data.extend_from_slice(&t.action);
            actions.rows += 1;
            nexts.data.extend_from_slice(&t.next_state);
            nexts.rows += 1;
        }
    }
    (states, actions, nexts)
}

pub struct PretrainArtifacts {
    pub prior_path: PathBuf,
    pub data_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Collect nominal-parameter episodes with unconstrained planning on the
/// current prior (random actions for the bootstrap block), fitting the prior
/// by Gaussian NLL between collection rounds. Safety flags are recorded but
/// never enforced, so the dataset covers unsafe regions too.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainArtifacts, HarnessError> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("resolved_config.json"))?;
    let kind = cfg.env;
    let params = sample_params(kind, ParamSpace::Pretrain, &mut rng::rng_from(cfg.seed, &[0]));
    let d_s = kind.state_dim();
    let d_a = kind.action_dim();

    let mut prior = GaussianMlpPrior::init(
        d_s,
        d_a,
        &cfg.model.prior_hidden,
        &mut rng::rng_from(cfg.seed, &[1]),
    );
    let mut trainer = PriorTrainer::new(
        &prior,
        AdamConfig {
            lr: cfg.train.lr,
            ..Default::default()
        },
    );

    let pc = &cfg.pretrain;
    let planned_episodes = pc.episodes.saturating_sub(pc.bootstrap_episodes);
    let chunks = planned_episodes + 1;
    let chunk_steps = pc.train_steps / chunks;
    let mut remainder = pc.train_steps - chunk_steps * chunks;

    let mut plan = cfg.resolved_plan(1.0);
    plan.constraints = false;
    plan.prior_constraint = false;

    let mut records: Vec<EpisodeRecord> = Vec::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut step_log = StepLog::new();
    let mut fit_round = 0u64;

    let fit = |prior: &mut GaussianMlpPrior,
                   trainer: &mut PriorTrainer,
                   records: &[EpisodeRecord],
                   steps: usize,
                   round: u64|
     -> Result<(), HarnessError> {
        if steps == 0 || records.is_empty() {
            return Ok(());
        }
        let (states, actions, nexts) = dataset_mats(records);
        prior.normalizer = Normalizer::fit(&Mat::hcat(&[&states, &actions]));
        let mut batch_rng = rng::rng_from(cfg.seed, &[TAG_PRETRAIN_FIT, round]);
        use rand::Rng;
        for _ in 0..steps {
            let b = pc.batch.min(states.rows);
            let mut bs = Mat::zeros(0, states.cols);
            let mut ba = Mat::zeros(0, actions.cols);
            let mut bn = Mat::zeros(0, nexts.cols);
            for _ in 0..b {
                let r = batch_rng.gen_range(0..states.rows);
                bs.data.extend_from_slice(states.row(r));
                bs.rows += 1;
                ba.data.extend_from_slice(actions.row(r));
                ba.rows += 1;
                bn.data.extend_from_slice(nexts.row(r));
                bn.rows += 1;
            }
            trainer.step(prior, &bs, &ba, &bn)?;
            if trainer.diverged_steps > DIVERGENCE_ABORT {
                return Err(HarnessError::Run(format!(
                    "pre-training diverged: {} skipped optimizer steps",
                    trainer.diverged_steps
                )));
            }
        }
        Ok(())
    };

    for ep in 0..pc.episodes {
        let started = Instant::now();
        let mut env = Env::new(params);
        let outcome = if ep < pc.bootstrap_episodes {
            run_episode(
                &mut env,
                &EpisodePolicy::RandomActions,
                ep as u64,
                cfg.seed,
                pc.horizon,
            )?
        } else {
            let prior_model = PriorModel::Learned(prior);
            let outcome = run_episode(
                &mut env,
                &EpisodePolicy::Planner {
                    prior: &prior_model,
                    disturbance: None,
                    plan: &plan,
                    use_context: true,
                    diagnostics: false,
                },
                ep as u64,
                cfg.seed,
                pc.horizon,
            )?;
            prior = match prior_model {
                PriorModel::Learned(p) => p,
                _ => unreachable!(),
            };
            outcome
        };
        rows.push(MetricsRow {
            episode: ep as u64,
            return_sum: outcome.return_sum,
            violation_rate: outcome.violation_rate,
            steps: outcome.steps,
            degraded: outcome.degraded,
            params: params.as_vec(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        step_log.append(ep as u64, &outcome, &params.as_vec());
        if !outcome.record.is_empty() {
            records.push(outcome.record);
        }

        let boundary = ep + 1 == pc.bootstrap_episodes || ep + 1 > pc.bootstrap_episodes;
        if boundary && ep + 1 >= pc.bootstrap_episodes {
            let mut steps = chunk_steps;
            if ep + 1 == pc.episodes {
                steps += remainder;
                remainder = 0;
            }
            fit(&mut prior, &mut trainer, &records, steps, fit_round)?;
            fit_round += 1;
        }
    }

    // Export: prior checkpoint plus the dataset as a replay buffer with
    // residuals rebased onto the final prior.
    let prior_model = PriorModel::Learned(prior);
    let prior_path = out.join("prior.json");
    prior_model.save(&prior_path)?;
    let mut buffer = ReplayBuffer::new(records.len().max(1));
    for mut r in records {
        rebase_residuals(&mut r, &prior_model)?;
        buffer.add_episode(r)?;
    }
    let data_dir = out.join("data");
    buffer.save(&data_dir)?;
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows, params.as_vec().len())?;
    write_timings_csv(&out.join("timings.csv"), &rows)?;
    step_log.write(&out.join("steps.csv"))?;
    Ok(PretrainArtifacts {
        prior_path,
        data_dir,
        metrics_path,
    })
}

fn load_prior(cfg: &RunConfig) -> Result<PriorModel, HarnessError> {
    if cfg.ablation.pretrain {
        let path = cfg.prior_checkpoint.as_ref().ok_or_else(|| {
            HarnessError::Config("this mode needs --prior <checkpoint> (or ablation.pretrain=false)".into())
        })?;
        Ok(PriorModel::load(path)?)
    } else {
        Ok(PriorModel::Learned(GaussianMlpPrior::init(
            cfg.env.state_dim(),
            cfg.env.action_dim(),
            &cfg.model.prior_hidden,
            &mut rng::rng_from(cfg.seed, &[2]),
        )))
    }
}

fn fresh_disturbance(cfg: &RunConfig, prior: &PriorModel) -> AnpModel {
    let d_s = cfg.env.state_dim();
    let d_a = cfg.env.action_dim();
    let anp_cfg = AnpConfig {
        d_x: d_s + d_a,
        d_y: d_s,
        hidden: cfg.model.hidden.clone(),
        latent_dim: cfg.model.latent_dim,
        det_dim: cfg.model.det_dim,
    };
    let mut g = AnpModel::init(anp_cfg, &mut rng::rng_from(cfg.seed, &[3]));
    // Inputs share the prior's standardization, frozen from pre-training.
    if let PriorModel::Learned(p) = prior {
        g.normalizer = p.normalizer.clone();
    }
    g
}

/// Build a sampling spec that fits an episode of length `len`.
fn task_spec(
    cfg: &RunConfig,
    len: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> SampleSpec {
    use rand::Rng;
    let n_targets = cfg.train.n_targets.min(len.saturating_sub(1)).max(1);
    let max_ctx = cfg.train.n_context_max.min(len - n_targets).max(1);
    SampleSpec {
        n_context: rng.gen_range(1..=max_ctx),
        n_targets,
        prioritized: cfg.ablation.prioritized,
    }
}

pub struct AdaptArtifacts {
    pub disturbance_path: PathBuf,
    pub metrics_path: PathBuf,
    pub buffer_dir: PathBuf,
}

/// The adaptive loop: per episode, resample hidden parameters, plan with the
/// growing context, merge the episode into the replay buffer, then train the
/// disturbance model.
pub fn adapt(cfg: &RunConfig) -> Result<AdaptArtifacts, HarnessError> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("resolved_config.json"))?;
    let prior = load_prior(cfg)?;
    let mut g = fresh_disturbance(cfg, &prior);
    let prior = prior;
    let mut trainer = AnpTrainer::new(
        &g,
        AdamConfig {
            lr: cfg.train.lr,
            ..Default::default()
        },
    );
    let mut buffer = ReplayBuffer::new(cfg.train.replay_capacity);

    let reward_bound = RewardModel::bound(&match cfg.env {
        EnvKind::CartPole => RewardModel::CartPole { pole_len: 0.6 },
        EnvKind::PlanarFeed => RewardModel::PlanarFeed,
    });
    let mut plan = cfg.resolved_plan(reward_bound);
    plan.prior_constraint = plan.prior_constraint && cfg.ablation.prior_constraint;
    plan.validate(reward_bound)?;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut diag_lines: Vec<String> = Vec::new();
    let mut step_log = StepLog::new();

    for ep in 0..cfg.episodes {
        let started = Instant::now();
        let mut prng = rng::rng_from(cfg.seed, &[TAG_PARAMS, ep as u64]);
        let params = sample_params(cfg.env, ParamSpace::Adapt, &mut prng);
        let mut env = Env::new(params);
        let mut outcome = run_episode(
            &mut env,
            &EpisodePolicy::Planner {
                prior: &prior,
                disturbance: Some(&g),
                plan: &plan,
                use_context: cfg.ablation.context,
                diagnostics: cfg.diagnostics,
            },
            ep as u64,
            cfg.seed,
            cfg.horizon,
        )?;
        step_log.append(ep as u64, &outcome, &params.as_vec());
        diag_lines.extend(outcome.diag_lines.drain(..).collect::<Vec<_>>());

        if !outcome.record.is_empty() {
            buffer.add_episode(outcome.record)?;
        }

        // Model learning at the episode boundary. Each (episode, step, task)
        // triple gets its own stream so ablation arms share curricula.
        use rand::Rng;
        if !buffer.is_empty() {
            for step in 0..cfg.train.steps_per_episode as u64 {
                let mut batch = Vec::with_capacity(cfg.train.batch_tasks);
                for task in 0..cfg.train.batch_tasks as u64 {
                    let mut task_rng =
                        rng::rng_from(cfg.seed, &[TAG_TRAIN, ep as u64, step, task]);
                    let idx = task_rng.gen_range(0..buffer.len());
                    let episode = buffer.get(idx).unwrap();
                    if episode.len() < 2 {
                        continue;
                    }
                    let spec = task_spec(cfg, episode.len(), &mut task_rng);
                    batch.push(buffer.sample_from_episode(episode, &spec, &mut task_rng)?);
                }
                if !batch.is_empty() {
                    let mut step_rng =
                        rng::rng_from(cfg.seed, &[TAG_TRAIN, ep as u64, step, u64::MAX]);
                    trainer.step(&mut g, &batch, &mut step_rng)?;
                }
            }
        }

        rows.push(MetricsRow {
            episode: ep as u64,
            return_sum: outcome.return_sum,
            violation_rate: outcome.violation_rate,
            steps: outcome.steps,
            degraded: outcome.degraded + outcome.diverged as u64,
            params: params.as_vec(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let disturbance_path = out.join("disturbance.json");
    g.save(&disturbance_path)?;
    let buffer_dir = out.join("buffer");
    buffer.save(&buffer_dir)?;
    let metrics_path = out.join("metrics.csv");
    let param_dim = sample_params(cfg.env, ParamSpace::Pretrain, &mut rng::rng_from(0, &[0]))
        .as_vec()
        .len();
    write_metrics_csv(&metrics_path, &rows, param_dim)?;
    write_timings_csv(&out.join("timings.csv"), &rows)?;
    step_log.write(&out.join("steps.csv"))?;
    if cfg.diagnostics {
        std::fs::write(out.join("planner.jsonl"), diag_lines.join("\n") + "\n")?;
    }
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "episodes": rows.len(),
            "mean_return": mean(rows.iter().map(|r| r.return_sum)),
            "mean_violation_rate": mean(rows.iter().map(|r| r.violation_rate)),
            "trainer_diverged_steps": trainer.diverged_steps,
        }))
        .expect("summary json"),
    )?;
    Ok(AdaptArtifacts {
        disturbance_path,
        metrics_path,
        buffer_dir,
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// (lo, hi, nominal) interval of one disturbance coordinate.
fn param_interval(kind: EnvKind, coord: usize) -> (f64, f64, f64) {
    match kind {
        EnvKind::CartPole => (0.2, 1.0, 0.6),
        EnvKind::PlanarFeed => match coord {
            0 => (-1.0, 1.0, 0.0),
            _ => (-2.0, 2.0, 0.0),
        },
    }
}

fn linspace(lo: f64, hi: f64, nominal: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![nominal];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Grid evaluation of frozen checkpoints over two disturbance coordinates.
pub fn eval_grid(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("resolved_config.json"))?;
    let prior = load_prior(cfg)?;
    let g = match &cfg.disturbance_checkpoint {
        Some(p) => Some(AnpModel::load(p)?),
        None => None,
    };
    let reward_bound = match cfg.env {
        EnvKind::CartPole => 1.0,
        EnvKind::PlanarFeed => sarl_core::envs::planarfeed::REWARD_BOUND,
    };
    let mut plan = cfg.resolved_plan(reward_bound);
    plan.prior_constraint = plan.prior_constraint && cfg.ablation.prior_constraint;
    plan.validate(reward_bound)?;

    let n = cfg.eval.grid;
    let (xlo, xhi, xnom) = param_interval(cfg.env, cfg.eval.coord_x);
    let (ylo, yhi, ynom) = param_interval(cfg.env, cfg.eval.coord_y);
    let xs = linspace(xlo, xhi, xnom, n);
    let ys = linspace(ylo, yhi, ynom, n);

    let nominal = sample_params(cfg.env, ParamSpace::Pretrain, &mut rng::rng_from(0, &[0]));
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|ix| (0..n).map(move |iy| (ix, iy)))
        .collect();

    let results: Vec<(usize, usize, f64, f64)> = cells
        .par_iter()
        .map(|&(ix, iy)| -> Result<(usize, usize, f64, f64), HarnessError> {
            let mut pv = nominal.as_vec();
            pv[cfg.eval.coord_x] = xs[ix];
            pv[cfg.eval.coord_y] = ys[iy];
            let params = EnvParams::from_vec(cfg.env, &pv);
            let mut ret = 0.0;
            let mut viol = 0.0;
            for e in 0..cfg.eval.episodes_per_cell {
                let mut env = Env::new(params);
                let cell_seed = rng::derive_path(
                    cfg.seed,
                    &[TAG_EVAL, ix as u64, iy as u64, e as u64],
                );
                let outcome = run_episode(
                    &mut env,
                    &EpisodePolicy::Planner {
                        prior: &prior,
                        disturbance: g.as_ref(),
                        plan: &plan,
                        use_context: cfg.ablation.context,
                        diagnostics: false,
                    },
                    e as u64,
                    cell_seed,
                    cfg.horizon,
                )?;
                ret += outcome.return_sum;
                viol += outcome.violation_rate;
            }
            let c = cfg.eval.episodes_per_cell.max(1) as f64;
            Ok((ix, iy, ret / c, viol / c))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut sorted = results;
    sorted.sort_by_key(|r| (r.0, r.1));
    let mut csv = String::from("ix,iy,coord_x,coord_y,mean_return,mean_violation_rate,episodes\n");
    for (ix, iy, ret, viol) in &sorted {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            ix, iy, xs[*ix], ys[*iy], ret, viol, cfg.eval.episodes_per_cell
        ));
    }
    let path = out.join("grid.csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}

/// One-step predictive-mean MSE of the composite model over a stored buffer,
/// partitioned by each row's unsafe label. Early transitions of each episode
/// serve as the context; the rest are evaluated.
pub fn mse_report(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("resolved_config.json"))?;
    let buffer_dir = cfg
        .buffer_dir
        .as_ref()
        .ok_or_else(|| HarnessError::Config("mse-report needs --buffer <dir>".into()))?;
    let buffer = ReplayBuffer::load(buffer_dir)?;
    let prior = load_prior(cfg)?;
    let g = match &cfg.disturbance_checkpoint {
        Some(p) => Some(AnpModel::load(p)?),
        None => None,
    };
    let (mut safe_sum, mut safe_n) = (0.0, 0usize);
    let (mut unsafe_sum, mut unsafe_n) = (0.0, 0usize);
    for ep in buffer.episodes() {
        let split = (ep.len() / 2).min(cfg.train.n_context_max);
        let d_s = ep.transitions[0].state.len();
        let d_a = ep.transitions[0].action.len();
        let mut ctx = ContextSet::empty(d_s + d_a, d_s);
        for t in &ep.transitions[..split] {
            ctx.push(&t.model_input(), &t.residual);
        }
        let eval_rows = &ep.transitions[split..];
        if eval_rows.is_empty() {
            continue;
        }
        let mut states = Mat::zeros(0, d_s);
        let mut actions = Mat::zeros(0, d_a);
        for t in eval_rows {
            states.data.extend_from_slice(&t.state);
            states.rows += 1;
            actions.data.extend_from_slice(&t.action);
            actions.rows += 1;
        }
        let (mut mean, _) = prior.predict_batch(&states, &actions)?;
        if let Some(gm) = &g {
            let cache = gm.prepare_context(&ctx)?;
            let x = Mat::hcat(&[&states, &actions]);
            let mut z_rows = Mat::zeros(states.rows, cache.latent.dim());
            for r in 0..states.rows {
                z_rows.row_mut(r).copy_from_slice(&cache.latent.mean);
            }
            let (g_mu, _) = gm.predict_with_latent_rows(&cache, &x, &z_rows)?;
            for i in 0..mean.data.len() {
                mean.data[i] += g_mu.data[i];
            }
        }
        for (r, t) in eval_rows.iter().enumerate() {
            let mut err = 0.0;
            for c in 0..d_s {
                let d = mean.row(r)[c] - t.next_state[c];
                err += d * d;
            }
            err /= d_s as f64;
            if t.unsafe_label() {
                unsafe_sum += err;
                unsafe_n += 1;
            } else {
                safe_sum += err;
                safe_n += 1;
            }
        }
    }
    let mut csv = String::from("label,count,mse\n");
    if safe_n > 0 {
        csv.push_str(&format!("safe,{},{}\n", safe_n, safe_sum / safe_n as f64));
    }
    if unsafe_n > 0 {
        csv.push_str(&format!(
            "unsafe,{},{}\n",
            unsafe_n,
            unsafe_sum / unsafe_n as f64
        ));
    }
    let path = out.join("mse.csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationSwitch {
    PriorConstraint,
    Context,
    Prioritized,
    Pretrain,
}

impl AblationSwitch {
    fn apply_off(&self, ab: &mut AblationConfig) {
        match self {
            AblationSwitch::PriorConstraint => ab.prior_constraint = false,
            AblationSwitch::Context => ab.context = false,
            AblationSwitch::Prioritized => ab.prioritized = false,
            AblationSwitch::Pretrain => ab.pretrain = false,
        }
    }
}

/// Paired ablation: run adapt with the switch on and off under the same
/// seed, then summarize both arms.
pub fn ablate(cfg: &RunConfig, switch: AblationSwitch) -> Result<PathBuf, HarnessError> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let mut on_cfg = cfg.clone();
    on_cfg.out_dir = out.join("on");
    let mut off_cfg = cfg.clone();
    off_cfg.out_dir = out.join("off");
    switch.apply_off(&mut off_cfg.ablation);

    let on = adapt(&on_cfg)?;
    let off = adapt(&off_cfg)?;

    let summarize = |path: &Path| -> Result<(f64, f64), HarnessError> {
        let rows = crate::metrics::read_metrics_csv(path)?;
        Ok((
            mean(rows.iter().map(|r| r.return_sum)),
            mean(rows.iter().map(|r| r.violation_rate)),
        ))
    };
    let (on_ret, on_viol) = summarize(&on.metrics_path)?;
    let (off_ret, off_viol) = summarize(&off.metrics_path)?;
    let summary = serde_json::json!({
        "switch": format!("{:?}", switch),
        "on": {"mean_return": on_ret, "mean_violation_rate": on_viol},
        "off": {"mean_return": off_ret, "mean_violation_rate": off_viol},
    });
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(path)
}
