use crate::{
    checkpoint_config, create_dir, load_config, open_checkpoint, require_file, resolve_seed, usage, write_config_echo,
    EvalArgs,
};
use anyhow::Context;
use hoverlab::checkpoint::Provenance;
use hoverlab::eval::{
    recovery_times, run_protocol, run_trial, save_trajectory, DisturbanceScript, ProtocolSummary, TrialResult,
};
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    provenance: &'a Provenance,
    config_hash: &'a str,
    #[serde(flatten)]
    summary: &'a ProtocolSummary,
}

#[derive(Serialize)]
struct DisturbanceReport<'a> {
    script: &'a DisturbanceScript,
    #[serde(flatten)]
    result: &'a TrialResult,
    /// Seconds from each push (in start order) until back within the success radius.
    recovery_times_s: Vec<Option<f64>>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_script(path: &Path) -> anyhow::Result<DisturbanceScript> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let script: DisturbanceScript =
        toml::from_str(&text).map_err(|e| usage(format!("invalid disturbance script {}: {e}", path.display())))?;
    script.validate().map_err(|e| usage(format!("invalid disturbance script {}: {e}", path.display())))?;
    Ok(script)
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(&args.checkpoint)?;
    let script = args.disturbance_script.as_deref().map(load_script).transpose()?;
    let mut cfg = match &args.config {
        Some(path) => load_config(Some(path), &args.set)?,
        None => checkpoint_config(&ckpt, &args.set)?,
    };
    ckpt.check_config(&cfg, args.allow_config_mismatch)?;
    if let Some(n) = args.trials {
        if n == 0 {
            return Err(usage("--trials must be positive"));
        }
        cfg.eval.trials = n;
    }
    cfg.env.obs_scales = ckpt.obs_scales;
    let seed = resolve_seed(args.seed, &cfg);
    cfg.seed = Some(seed);

    create_dir(&args.out)?;
    write_config_echo(&args.out, &cfg)?;

    let policy = ckpt.policy();
    let summary = run_protocol(&policy, &cfg.env, &cfg.eval, seed)?;
    let trials_dir = args.out.join("trials");
    create_dir(&trials_dir)?;
    for r in &summary.results {
        let path = trials_dir.join(format!("trial_{:02}_{}.csv", r.index, r.region.as_str()));
        save_trajectory(&r.trajectory, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        provenance: &ckpt.provenance,
        config_hash: &ckpt.config_hash,
        summary: &summary,
    };
    write_json(&args.out.join("summary.json"), &report)?;

    println!("region  trials  success  mean conv (s)  large transients");
    for r in &summary.regions {
        println!(
            "{:<6}  {:>6}  {:>7}  {:>13}  {:>16}",
            r.region.as_str(),
            r.trials,
            format!("{}/{}", r.successes, r.trials),
            r.mean_convergence_time_s.map_or("n/a".to_string(), |t| format!("{t:.2}")),
            r.large_transients
        );
    }
    println!("total   {:>6}  {:>7}", summary.trials, format!("{}/{}", summary.successes, summary.trials));

    if let Some(script) = script {
        let target = cfg.env.reward.target();
        let spec = script.trial(&cfg.eval, target);
        let result = run_trial(&policy, &cfg.env, &spec, &cfg.eval)?;
        let recovery = recovery_times(&result.trajectory, &script.pushes, target, cfg.eval.success_radius_m);
        save_trajectory(&result.trajectory, &args.out.join("disturbance.csv")).context("writing disturbance.csv")?;
        write_json(
            &args.out.join("disturbance.json"),
            &DisturbanceReport { script: &script, result: &result, recovery_times_s: recovery.clone() },
        )?;
        let mut pushes = script.pushes.clone();
        pushes.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for (p, r) in pushes.iter().zip(&recovery) {
            println!(
                "push at {:.1} s {:?} N: {}",
                p.start_s,
                p.force,
                r.map_or("not recovered".to_string(), |t| format!("recovered in {t:.2} s"))
            );
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
