//! Total trajectory reputation of masked and unmasked mechanisms.
//!
//! `cargo run --release --example reputation_sweep`

use blockprop::error::Result;
use blockprop::experiment::{run_reputation_sweep, Environment, ExperimentSpec, Mechanism};
use blockprop::network::ChannelConfig;
use blockprop::reputation::ReputationParams;

fn main() -> Result<()> {
    let env = Environment::new(ChannelConfig::default(), ReputationParams::default());
    let spec = ExperimentSpec {
        repetitions: 50,
        mechanisms: vec![Mechanism::Greedy, Mechanism::GreedyRep, Mechanism::Gossip, Mechanism::GossipRep],
        output_dir: "out/reputation_sweep".into(),
        ..ExperimentSpec::default()
    };
    let res = run_reputation_sweep(&spec, &env)?;
    for r in &res.summary {
        println!("M={:2} {:10} total reputation {:.3}", r.miners, r.mechanism.name(), r.mean_total_reputation);
    }
    Ok(())
}
