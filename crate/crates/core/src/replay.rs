//! Episodic replay buffer.
//!
//! One record per episode (one disturbance realization each); training tasks
//! draw their context and target sets from a single episode. Prioritized
//! sampling front-loads the episode's unsafe transitions into the target set
//! before uniform filling, countering how rare unsafe data is.

use crate::anp::{ContextSet, TargetBatch};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Residual s' - mean_h(s, a) under the prior checkpoint in force when
    /// the transition was recorded.
    pub residual: Vec<f64>,
    pub next_state: Vec<f64>,
    pub state_violation: bool,
    pub action_violation: bool,
}

impl Transition {
    pub fn unsafe_label(&self) -> bool {
        self.state_violation || self.action_violation
    }

    pub fn model_input(&self) -> Vec<f64> {
        crate::dynamics::compose_input(&self.state, &self.action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub id: u64,
    pub transitions: Vec<Transition>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn unsafe_count(&self) -> usize {
        self.transitions.iter().filter(|t| t.unsafe_label()).count()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_context: usize,
    pub n_targets: usize,
    pub prioritized: bool,
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 {
            return Err(CoreError::InvalidArgument(
                "sample spec needs at least one target".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct ReplayBuffer {
    episodes: VecDeque<EpisodeRecord>,
    capacity: usize,
}

pub const DEFAULT_CAPACITY: usize = 500;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            episodes: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn get(&self, idx: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(idx)
    }

    /// Append an episode, evicting the oldest beyond capacity.
    pub fn add_episode(&mut self, record: EpisodeRecord) -> Result<()> {
        if record.is_empty() {
            return Err(CoreError::InvalidArgument("empty episode record".into()));
        }
        self.episodes.push_back(record);
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
        }
        Ok(())
    }

    /// Draw one training task: a context set and target batch from a single
    /// uniformly chosen episode. Prioritized mode puts every unsafe
    /// transition of the episode into the targets first (capped at
    /// n_targets), then fills targets and context uniformly from the safe
    /// remainder; unsafe rows enter the context only when the safe rows run
    /// out. Within one draw no transition index repeats inside C or inside T.
    pub fn sample_task(
        &self,
        spec: &SampleSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ContextSet, TargetBatch)> {
        spec.validate()?;
        if self.episodes.is_empty() {
            return Err(CoreError::InvalidArgument("replay buffer is empty".into()));
        }
        let ep = &self.episodes[rng.gen_range(0..self.episodes.len())];
        self.sample_from_episode(ep, spec, rng)
    }

    pub fn sample_from_episode(
        &self,
        ep: &EpisodeRecord,
        spec: &SampleSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ContextSet, TargetBatch)> {
        spec.validate()?;
        let needed = spec.n_context + spec.n_targets;
        if ep.len() < needed {
            return Err(CoreError::EpisodeTooShort {
                episode: ep.id,
                len: ep.len(),
                requested: needed,
            });
        }
        let mut target_idx: Vec<usize> = Vec::with_capacity(spec.n_targets);
        let mut context_idx: Vec<usize> = Vec::with_capacity(spec.n_context);

        let mut safe: Vec<usize> = Vec::new();
        let mut unsafe_rows: Vec<usize> = Vec::new();
        for (i, t) in ep.transitions.iter().enumerate() {
            if t.unsafe_label() {
                unsafe_rows.push(i);
            } else {
                safe.push(i);
            }
        }

        if spec.prioritized && !unsafe_rows.is_empty() {
            if unsafe_rows.len() <= spec.n_targets {
                target_idx.extend_from_slice(&unsafe_rows);
            } else {
                let mut pool = unsafe_rows.clone();
                pool.shuffle(rng);
                target_idx.extend_from_slice(&pool[..spec.n_targets]);
            }
            let mut pool = safe.clone();
            pool.shuffle(rng);
            let t_fill = spec.n_targets - target_idx.len();
            let mut it = pool.into_iter();
            for _ in 0..t_fill {
                match it.next() {
                    Some(i) => target_idx.push(i),
                    None => break,
                }
            }
            for _ in 0..spec.n_context {
                if let Some(i) = it.next() {
                    context_idx.push(i);
                }
            }
            // Safe rows exhausted: backfill from unsafe rows not already in
            // the same set.
            if target_idx.len() < spec.n_targets || context_idx.len() < spec.n_context {
                let mut extra: Vec<usize> = unsafe_rows
                    .iter()
                    .copied()
                    .filter(|i| !target_idx.contains(i))
                    .collect();
                extra.shuffle(rng);
                let mut it = extra.into_iter();
                while target_idx.len() < spec.n_targets {
                    match it.next() {
                        Some(i) => target_idx.push(i),
                        None => break,
                    }
                }
                let mut ctx_extra: Vec<usize> = unsafe_rows
                    .iter()
                    .copied()
                    .filter(|i| !context_idx.contains(i))
                    .collect();
                ctx_extra.shuffle(rng);
                let mut it = ctx_extra.into_iter();
                while context_idx.len() < spec.n_context {
                    match it.next() {
                        Some(i) => context_idx.push(i),
                        None => break,
                    }
                }
            }
        } else {
            let mut pool: Vec<usize> = (0..ep.len()).collect();
            pool.shuffle(rng);
            target_idx.extend_from_slice(&pool[..spec.n_targets]);
            context_idx.extend_from_slice(&pool[spec.n_targets..spec.n_targets + spec.n_context]);
        }

        target_idx.sort_unstable();
        context_idx.sort_unstable();

        let d_x = ep.transitions[0].state.len() + ep.transitions[0].action.len();
        let d_y = ep.transitions[0].residual.len();
        let mut ctx = ContextSet::empty(d_x, d_y);
        for &i in &context_idx {
            let t = &ep.transitions[i];
            ctx.push(&t.model_input(), &t.residual);
        }
        let mut xs = Mat::zeros(0, d_x);
        let mut ys = Mat::zeros(0, d_y);
        for &i in &target_idx {
            let t = &ep.transitions[i];
            xs.data.extend_from_slice(&t.model_input());
            xs.rows += 1;
            ys.data.extend_from_slice(&t.residual);
            ys.rows += 1;
        }
        Ok((ctx, TargetBatch::new(xs, Some(ys))))
    }

    // ── Persistence: one CSV per episode plus a JSON manifest ────────

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for ep in &self.episodes {
            let file = format!("episode_{:06}.csv", ep.id);
            let mut out = String::new();
            let t0 = &ep.transitions[0];
            let (ds, da, dy) = (t0.state.len(), t0.action.len(), t0.residual.len());
            let mut header: Vec<String> = Vec::new();
            header.extend((0..ds).map(|i| format!("s{}", i)));
            header.extend((0..da).map(|i| format!("a{}", i)));
            header.extend((0..dy).map(|i| format!("y{}", i)));
            header.extend((0..ds).map(|i| format!("next{}", i)));
            header.push("state_violation".into());
            header.push("action_violation".into());
            out.push_str(&header.join(","));
            out.push('\n');
            for t in &ep.transitions {
                let mut row: Vec<String> = Vec::new();
                row.extend(t.state.iter().map(|v| format!("{}", v)));
                row.extend(t.action.iter().map(|v| format!("{}", v)));
                row.extend(t.residual.iter().map(|v| format!("{}", v)));
                row.extend(t.next_state.iter().map(|v| format!("{}", v)));
                row.push((t.state_violation as u8).to_string());
                row.push((t.action_violation as u8).to_string());
                out.push_str(&row.join(","));
                out.push('\n');
            }
            std::fs::write(dir.join(&file), out)?;
            entries.push(serde_json::json!({
                "id": ep.id,
                "file": file,
                "len": ep.len(),
                "unsafe": ep.unsafe_count(),
                "dims": {"state": ds, "action": da, "residual": dy},
            }));
        }
        let manifest = serde_json::json!({
            "capacity": self.capacity,
            "episodes": entries,
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("manifest.json"))?,
        )
        .map_err(|e| CoreError::InvalidArgument(format!("manifest: {}", e)))?;
        let capacity = manifest
            .get("capacity")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(DEFAULT_CAPACITY as u64) as usize;
        let mut buffer = ReplayBuffer::new(capacity);
        let entries = manifest
            .get("episodes")
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| CoreError::InvalidArgument("manifest missing episodes".into()))?;
        for e in entries {
            let id = e.get("id").and_then(serde_json::Value::as_u64).unwrap_or(0);
            let file = e
                .get("file")
                .and_then(serde_json::Value::as_str)
                .ok_or_else(|| CoreError::InvalidArgument("manifest entry missing file".into()))?;
            let dims = &e["dims"];
            let ds = dims["state"].as_u64().unwrap_or(0) as usize;
            let da = dims["action"].as_u64().unwrap_or(0) as usize;
            let dy = dims["residual"].as_u64().unwrap_or(0) as usize;
            let text = std::fs::read_to_string(dir.join(file))?;
            let mut transitions = Vec::new();
            for line in text.lines().skip(1) {
                let vals: Vec<&str> = line.split(',').collect();
                let f = |i: usize| -> f64 { vals[i].parse().unwrap_or(f64::NAN) };
                let state: Vec<f64> = (0..ds).map(f).collect();
                let action: Vec<f64> = (ds..ds + da).map(f).collect();
                let residual: Vec<f64> = (ds + da..ds + da + dy).map(f).collect();
                let next_state: Vec<f64> = (ds + da + dy..ds + da + dy + ds).map(f).collect();
                let sv = vals[ds + da + dy + ds] == "1";
                let av = vals[ds + da + dy + ds + 1] == "1";
                transitions.push(Transition {
                    state,
                    action,
                    residual,
                    next_state,
                    state_violation: sv,
                    action_violation: av,
                });
            }
            buffer.add_episode(EpisodeRecord { id, transitions })?;
        }
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn transition(v: f64, unsafe_row: bool) -> Transition {
        Transition {
            state: vec![v, 0.0],
            action: vec![0.5],
            residual: vec![v * 0.1, -v * 0.1],
            next_state: vec![v + 1.0, 0.0],
            state_violation: unsafe_row,
            action_violation: false,
        }
    }

    fn episode(id: u64, len: usize, unsafe_at: &[usize]) -> EpisodeRecord {
        EpisodeRecord {
            id,
            transitions: (0..len)
                .map(|i| transition(i as f64, unsafe_at.contains(&i)))
                .collect(),
        }
    }

    #[test]
    fn add_and_fifo_eviction() {
        let mut buf = ReplayBuffer::new(3);
        for id in 0..5 {
            buf.add_episode(episode(id, 4, &[])).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let ids: Vec<u64> = buf.episodes().map(|e| e.id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }

    #[test]
    fn stored_record_round_trips() {
        let mut buf = ReplayBuffer::new(2);
        let ep = episode(7, 5, &[2]);
        buf.add_episode(ep.clone()).unwrap();
        assert_eq!(buf.get(0).unwrap(), &ep);
    }

    #[test]
    fn empty_record_rejected() {
        let mut buf = ReplayBuffer::new(2);
        assert!(buf
            .add_episode(EpisodeRecord {
                id: 0,
                transitions: vec![]
            })
            .is_err());
    }

    #[test]
    fn prioritized_puts_all_unsafe_rows_in_targets() {
        let mut buf = ReplayBuffer::new(2);
        buf.add_episode(episode(0, 30, &[4, 17])).unwrap();
        let spec = SampleSpec {
            n_context: 10,
            n_targets: 8,
            prioritized: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (_, tgt) = buf.sample_task(&spec, &mut rng).unwrap();
            let ys = tgt.ys.as_ref().unwrap();
            // unsafe rows 4 and 17 have residual first components 0.4, 1.7
            let mut found4 = false;
            let mut found17 = false;
            for r in 0..ys.rows {
                if (ys.row(r)[0] - 0.4).abs() < 1e-12 {
                    found4 = true;
                }
                if (ys.row(r)[0] - 1.7).abs() < 1e-12 {
                    found17 = true;
                }
            }
            assert!(found4 && found17);
        }
    }

    #[test]
    fn no_unsafe_rows_matches_uniform_sampling() {
        let mut buf = ReplayBuffer::new(2);
        buf.add_episode(episode(0, 20, &[])).unwrap();
        let base = SampleSpec {
            n_context: 5,
            n_targets: 6,
            prioritized: true,
        };
        let uniform = SampleSpec {
            prioritized: false,
            ..base
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (c1, t1) = buf.sample_task(&base, &mut r1).unwrap();
        let (c2, t2) = buf.sample_task(&uniform, &mut r2).unwrap();
        assert_eq!(c1.xs().data, c2.xs().data);
        assert_eq!(t1.xs.data, t2.xs.data);
    }

    #[test]
    fn context_and_targets_are_disjoint_without_duplicates() {
        let mut buf = ReplayBuffer::new(2);
        buf.add_episode(episode(0, 25, &[1, 2, 3])).unwrap();
        let spec = SampleSpec {
            n_context: 10,
            n_targets: 10,
            prioritized: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (ctx, tgt) = buf.sample_task(&spec, &mut rng).unwrap();
            // index encoded in state[0]
            let mut ctx_ids: Vec<i64> = (0..ctx.len())
                .map(|r| ctx.xs().row(r)[0] as i64)
                .collect();
            let mut tgt_ids: Vec<i64> = (0..tgt.len())
                .map(|r| tgt.xs.row(r)[0] as i64)
                .collect();
            let cl = ctx_ids.len();
            let tl = tgt_ids.len();
            ctx_ids.dedup();
            tgt_ids.dedup();
            assert_eq!(cl, ctx_ids.len());
            assert_eq!(tl, tgt_ids.len());
            assert!(ctx_ids.iter().all(|i| !tgt_ids.contains(i)));
        }
    }

    #[test]
    fn unsafe_rows_back_fill_context_when_safe_exhausted() {
        // 12 transitions, 9 unsafe, ask for 6 context + 6 targets: the three
        // safe rows cannot fill the context, so unsafe rows may appear there.
        let mut buf = ReplayBuffer::new(2);
        buf.add_episode(episode(0, 12, &[0, 1, 2, 3, 4, 5, 6, 7, 8]))
            .unwrap();
        let spec = SampleSpec {
            n_context: 6,
            n_targets: 6,
            prioritized: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ctx, tgt) = buf.sample_task(&spec, &mut rng).unwrap();
        assert_eq!(ctx.len(), 6);
        assert_eq!(tgt.len(), 6);
    }

    #[test]
    fn episode_too_short_is_rejected() {
        let mut buf = ReplayBuffer::new(2);
        buf.add_episode(episode(0, 5, &[])).unwrap();
        let spec = SampleSpec {
            n_context: 4,
            n_targets: 2,
            prioritized: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            buf.sample_task(&spec, &mut rng),
            Err(CoreError::EpisodeTooShort { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let mut buf = ReplayBuffer::new(10);
        buf.add_episode(episode(0, 6, &[2])).unwrap();
        buf.add_episode(episode(1, 4, &[])).unwrap();
        let dir = std::env::temp_dir().join(format!("replay_test_{}", std::process::id()));
        buf.save(&dir).unwrap();
        let loaded = ReplayBuffer::load(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get(0).unwrap(), buf.get(0).unwrap());
        assert_eq!(loaded.get(1).unwrap(), buf.get(1).unwrap());
        std::fs::remove_dir_all(dir).ok();
    }
}
