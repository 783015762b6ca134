//! Random miner graph, per-hop Shannon transfer times and the AoB of a route.
//!
//! `cargo run --release --example miner_instance`

use blockprop::error::Result;
use blockprop::network::{evaluate_trajectory, generate_instance, visit_count, ChannelConfig, ReputationSource, DEFAULT_VISIT_RATIO};

fn main() -> Result<()> {
    let inst = generate_instance(12, 5, &ReputationSource::simulated(0.2))?;
    let m = visit_count(inst.miner_count(), DEFAULT_VISIT_RATIO);
    let order: Vec<usize> = (0..m).collect();
    for bw in [180e3, 22e6, 100e6] {
        let channel = ChannelConfig { bandwidth_hz: bw, ..ChannelConfig::default() }.to_params()?;
        let t = evaluate_trajectory(&inst, &channel, &order, 0.5)?;
        println!(
            "{:>9.0} Hz  length {:.3}  transfer {:.2} s  AoB {:.2} s  violation {}",
            bw,
            t.route_length,
            t.total_gamma_s(),
            t.total_aob_s,
            t.reputation_violation
        );
    }
    let channel = ChannelConfig::default().to_params()?;
    evaluate_trajectory(&inst, &channel, &order, 0.5)?.write_csv(&inst, std::io::stdout())?;
    Ok(())
}
