//! Overall AoB against miner count for all six mechanisms and three
//! bandwidths. Uses the checkpoint given as the first argument, or an
//! untrained policy.
//!
//! `cargo run --release --example aob_sweep [policy.json]`

use std::path::PathBuf;

use blockprop::error::Result;
use blockprop::experiment::{run_aob_sweep, Environment, ExperimentSpec};
use blockprop::network::ChannelConfig;
use blockprop::policy::{PolicyConfig, PolicyParams};
use blockprop::reputation::ReputationParams;

fn main() -> Result<()> {
    let env = Environment::new(ChannelConfig::default(), ReputationParams::default());
    let env = match std::env::args().nth(1) {
        Some(path) => {
            let path = PathBuf::from(path);
            let hash = blockprop::config::file_hash(&path)?;
            env.with_policy(PolicyParams::load_checkpoint(&path)?, hash)
        }
        None => env.with_policy(PolicyParams::init(PolicyConfig::default(), 1234)?, "untrained"),
    };
    let spec = ExperimentSpec {
        repetitions: 20,
        output_dir: "out/aob_sweep".into(),
        ..ExperimentSpec::default()
    };
    let res = run_aob_sweep(&spec, &env)?;
    for r in res.summary.iter().filter(|r| r.fingerprint.bandwidth_hz == 22e6) {
        println!("M={:2} {:10} AoB {:8.2} s  length {:.3}", r.miners, r.mechanism.name(), r.mean_total_aob_s, r.mean_route_length);
    }
    println!("wrote {}", spec.output_dir.display());
    Ok(())
}
