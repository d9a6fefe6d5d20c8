// temporary probe for the prior-constraint violation-rate pairing
use sarl_harness::config::RunConfig;
use sarl_harness::pipeline;
use sarl_harness::metrics::read_metrics_csv;

fn small_cfg(seed: u64, out: &str) -> RunConfig {
    let mut doc = serde_json::json!({
        "seed": seed,
        "out_dir": out,
        "episodes": 50,
        "horizon": 50,
        "model": {"hidden": [24, 24], "prior_hidden": [32, 32], "latent_dim": 8, "det_dim": 8},
        "train": {"steps_per_episode": 60, "batch_tasks": 8, "n_context_max": 20, "n_targets": 12},
        "pretrain": {"episodes": 8, "bootstrap_episodes": 4, "horizon": 50, "train_steps": 800, "batch": 48},
        "plan": {"horizon": 12, "particles": 5, "cem": {"population": 28, "iterations": 3, "elite_frac": 0.15, "init_std_frac": 0.22}},
    });
    let _ = &mut doc;
    serde_json::from_value(doc).unwrap()
}

fn main() {
    let t0 = std::time::Instant::now();
    let mut wins = 0;
    let seeds: Vec<u64> = (0..4).collect();
    for &seed in &seeds {
        let base = format!("/tmp/prior_probe/{}", seed);
        let mut pre_cfg = small_cfg(seed, &format!("{}/pre", base));
        pre_cfg.seed = seed;
        let art = pipeline::pretrain(&pre_cfg).unwrap();

        let mut on_cfg = small_cfg(seed, &format!("{}/on", base));
        on_cfg.prior_checkpoint = Some(art.prior_path.clone());
        let on = pipeline::adapt(&on_cfg).unwrap();

        let mut off_cfg = small_cfg(seed, &format!("{}/off", base));
        off_cfg.prior_checkpoint = Some(art.prior_path.clone());
        off_cfg.ablation.prior_constraint = false;
        let off = pipeline::adapt(&off_cfg).unwrap();

        let mean_viol = |p: &std::path::Path| {
            let rows = read_metrics_csv(p).unwrap();
            rows.iter().map(|r| r.violation_rate).sum::<f64>() / rows.len() as f64
        };
        let mean_ret = |p: &std::path::Path| {
            let rows = read_metrics_csv(p).unwrap();
            rows.iter().map(|r| r.return_sum).sum::<f64>() / rows.len() as f64
        };
        let von = mean_viol(&on.metrics_path);
        let voff = mean_viol(&off.metrics_path);
        println!(
            "seed {}: viol on {:.4} off {:.4} | ret on {:.2} off {:.2} | {}",
            seed,
            von,
            voff,
            mean_ret(&on.metrics_path),
            mean_ret(&off.metrics_path),
            if von < voff { "WIN" } else { "loss" }
        );
        if von < voff {
            wins += 1;
        }
    }
    println!("wins {}/{} ({:.0}s)", wins, seeds.len(), t0.elapsed().as_secs_f64());
}
