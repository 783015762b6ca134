//! Greedy and Gossip routes with and without the reputation mask.
//!
//! `cargo run --release --example baseline_routes`

use blockprop::baselines::{baseline_trajectory, BaselineConfig, BaselineKind};
use blockprop::error::Result;
use blockprop::network::{generate_instance, ChannelConfig, ReputationSource};

fn main() -> Result<()> {
    let channel = ChannelConfig::default().to_params()?;
    let inst = generate_instance(19, 3, &ReputationSource::simulated(0.2))?;
    for kind in [BaselineKind::Greedy, BaselineKind::Gossip] {
        for masked in [false, true] {
            let t = baseline_trajectory(&inst, &channel, &BaselineConfig::new(kind, masked, 0.5, 9))?;
            println!(
                "{kind:?} mask={masked:5}  length {:.3}  AoB {:.1} s  reputation {:.3}  route {:?}",
                t.route_length, t.total_aob_s, t.total_reputation, t.order
            );
        }
    }
    Ok(())
}
