//! Greedy and sampled decoding with a freshly initialised attention policy.
//!
//! `cargo run --release --example policy_rollout`

use blockprop::error::Result;
use blockprop::network::{generate_instance, ChannelConfig, ReputationSource};
use blockprop::policy::{rollout, PolicyConfig, PolicyParams, RolloutMode};

fn main() -> Result<()> {
    let params = PolicyParams::init(PolicyConfig::default(), 1234)?;
    println!("{} parameters", params.parameter_count());
    let channel = ChannelConfig::default().to_params()?;
    let inst = generate_instance(19, 8, &ReputationSource::simulated(0.2))?;
    for (mode, seed) in [(RolloutMode::Greedy, 0), (RolloutMode::Sample, 1), (RolloutMode::Sample, 2)] {
        let r = rollout(&inst, &params, &channel, 0.5, mode, seed)?;
        println!(
            "{mode:?} seed {seed}: length {:.3}  log p {:.3}  route {:?}",
            r.trajectory.route_length, r.log_prob, r.trajectory.order
        );
    }
    Ok(())
}
