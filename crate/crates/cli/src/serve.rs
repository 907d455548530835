use crate::{open_checkpoint, usage, ServeArgs};
use anyhow::Context;
use hoverlab_bridge::protocol::MAX_RATE_HZ;
use hoverlab_bridge::BridgeConfig;

pub fn run(args: &ServeArgs) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(&args.checkpoint)?;
    let mut env = ckpt.config.env;
    env.obs_scales = ckpt.obs_scales;
    let mut cfg = BridgeConfig::new(env, ckpt.config.eval);
    cfg.seed = args.seed.or(ckpt.config.seed).unwrap_or(0);
    if let Some(hz) = args.rate_hz {
        if !(hz > 0.0 && hz <= MAX_RATE_HZ) {
            return Err(usage(format!("--rate-hz must lie in (0, {}]", MAX_RATE_HZ)));
        }
        cfg.rate_hz = hz;
    }
    log::info!(
        "serving {} (stage {}, step {})",
        args.checkpoint.display(),
        ckpt.provenance.stage_id,
        ckpt.provenance.global_step
    );
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let handle = hoverlab_bridge::serve(ckpt.policy(), cfg, (args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))?;
        println!("listening on ws://{}/", handle.local_addr());
        tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
        log::info!("shutting down");
        handle.shutdown().await;
        Ok(())
    })
}
