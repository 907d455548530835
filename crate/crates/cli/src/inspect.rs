use crate::{open_checkpoint, InspectArgs};

pub fn run(args: &InspectArgs) -> anyhow::Result<()> {
    let m = open_checkpoint(&args.checkpoint)?.manifest();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&m)?);
        return Ok(());
    }
    println!("format version  {}", m.format_version);
    println!("data            {} {} values, {}-endian, sha256 {}", m.data_len, m.dtype, m.byte_order, m.data_sha256);
    println!(
        "provenance      stage {}, global step {}, master seed {}",
        m.provenance.stage_id, m.provenance.global_step, m.provenance.master_seed
    );
    println!("config hash     {}", m.config_hash);
    println!(
        "adam            lr {:e}, betas ({}, {}), eps {:e}, step {}",
        m.adam.lr, m.adam.beta1, m.adam.beta2, m.adam.eps, m.adam.step
    );
    println!(
        "return stats    mean {:.4}, var {:.4}, count {:.0}",
        m.return_stats.mean, m.return_stats.var, m.return_stats.count
    );
    let s = &m.obs_scales;
    println!("obs scales      {}", serde_json::to_string(s)?);
    println!("arrays:");
    let width = m.arrays.iter().map(|a| a.name.len()).max().unwrap_or(0);
    for a in &m.arrays {
        let shape: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
        println!("  {:<width$}  {:<8}  offset {}", a.name, shape.join("×"), a.offset);
    }
    Ok(())
}
