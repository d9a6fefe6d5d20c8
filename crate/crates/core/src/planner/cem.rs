//! Generic cross-entropy optimizer over box-constrained vectors.
//!
//! The planner flattens an action sequence into one vector; tests drive the
//! same optimizer with surrogate objectives. Candidates scoring NaN are
//! treated as diverged and never selected.

use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    /// Initial sampling std as a fraction of the per-dimension box range.
    pub init_std_frac: f64,
    /// Std floor as a fraction of the range, held until the final iteration.
    pub std_floor_frac: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 400,
            elite_frac: 0.1,
            iterations: 5,
            init_std_frac: 0.25,
            std_floor_frac: 1e-3,
        }
    }
}

/// Sampling distribution over the flattened decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CemState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CemState {
    pub fn initial(dims: usize, low: &[f64], high: &[f64], cfg: &CemConfig) -> Self {
        let mean: Vec<f64> = (0..dims)
            .map(|d| (low[d % low.len()] + high[d % high.len()]) / 2.0)
            .collect();
        let std: Vec<f64> = (0..dims)
            .map(|d| (high[d % high.len()] - low[d % low.len()]) * cfg.init_std_frac)
            .collect();
        CemState { mean, std }
    }

    /// Shift the mean left by one time step (block of `step_dims` entries),
    /// padding the tail with zeros; stds reset to the initial scale.
    pub fn warm_shift(&self, step_dims: usize, low: &[f64], high: &[f64], cfg: &CemConfig) -> Self {
        let mut mean = self.mean.clone();
        mean.rotate_left(step_dims);
        let tail_start = mean.len() - step_dims;
        for v in mean.iter_mut().skip(tail_start) {
            *v = 0.0;
        }
        let fresh = CemState::initial(self.mean.len(), low, high, cfg);
        CemState {
            mean,
            std: fresh.std,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CemResult {
    /// Best-ever candidate (ties: first seen, i.e. lowest population index
    /// within the earliest iteration).
    pub best: Vec<f64>,
    pub best_score: f64,
    /// (iteration, population index) of the winner.
    pub best_at: (usize, usize),
    pub final_state: CemState,
    /// Best score seen per iteration.
    pub trace: Vec<f64>,
    /// True when no candidate in any iteration evaluated to a finite score.
    pub degraded: bool,
}

/// Run CEM. `eval` maps (iteration, candidates) to per-candidate scores;
/// higher is better; NaN marks a diverged candidate. Scores are consumed
/// from a fully materialized list so the outcome does not depend on
/// evaluation order.
pub fn optimize(
    dims: usize,
    low: &[f64],
    high: &[f64],
    cfg: &CemConfig,
    start: CemState,
    seed: u64,
    mut eval: impl FnMut(usize, &[Vec<f64>]) -> Vec<f64>,
) -> CemResult {
    assert!(cfg.population >= 1 && cfg.iterations >= 1);
    let n_elite = ((cfg.population as f64 * cfg.elite_frac).round() as usize)
        .clamp(1, cfg.population);
    let mut state = start;
    let mut best: Option<(f64, Vec<f64>, (usize, usize))> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut pop_rng: ChaCha8Rng = rng::rng_from(seed, &[0xCE, iter as u64]);
        let candidates: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..dims)
                    .map(|d| {
                        let v = state.mean[d]
                            + state.std[d] * pop_rng.sample::<f64, _>(StandardNormal);
                        v.clamp(low[d % low.len()], high[d % high.len()])
                    })
                    .collect()
            })
            .collect();
        let scores = eval(iter, &candidates);
        assert_eq!(scores.len(), candidates.len(), "eval must score every candidate");

        let mut iter_best = f64::NAN;
        for (i, &s) in scores.iter().enumerate() {
            if s.is_nan() {
                continue;
            }
            if iter_best.is_nan() || s > iter_best {
                iter_best = s;
            }
            let better = match &best {
                None => true,
                Some((bs, _, _)) => s > *bs,
            };
            if better {
                best = Some((s, candidates[i].clone(), (iter, i)));
            }
        }
        trace.push(iter_best);

        // Refit to the elite fraction of finite-scored candidates.
        let mut order: Vec<usize> = (0..cfg.population)
            .filter(|&i| !scores[i].is_nan())
            .collect();
        if order.is_empty() {
            continue; // nothing to refit on; resample from the same state
        }
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let elites: Vec<&Vec<f64>> = order
            .iter()
            .take(n_elite.min(order.len()))
            .map(|&i| &candidates[i])
            .collect();
        let m = elites.len() as f64;
        let mut mean = vec![0.0; dims];
        for e in &elites {
            for d in 0..dims {
                mean[d] += e[d];
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        let mut std = vec![0.0; dims];
        for e in &elites {
            for d in 0..dims {
                let diff = e[d] - mean[d];
                std[d] += diff * diff;
            }
        }
        let last_iteration = iter + 1 == cfg.iterations;
        for d in 0..dims {
            std[d] = (std[d] / m).sqrt();
            if !last_iteration {
                let floor = (high[d % high.len()] - low[d % low.len()]) * cfg.std_floor_frac;
                std[d] = std[d].max(floor);
            }
        }
        state = CemState { mean, std };
    }

    match best {
        Some((score, cand, at)) => CemResult {
            best: cand,
            best_score: score,
            best_at: at,
            final_state: state,
            trace,
            degraded: false,
        },
        None => CemResult {
            best: vec![0.0; dims],
            best_score: f64::NAN,
            best_at: (0, 0),
            final_state: state,
            trace,
            degraded: true,
        },
    }
}
