//! Draws a masked Greedy route: yellow miners fall at or below the
//! threshold, green ones pass it, blue arrows give the hop order.
//!
//! `cargo run --release --example render_route`

use std::path::Path;

use blockprop::baselines::{greedy_trajectory, BaselineConfig, BaselineKind};
use blockprop::error::Result;
use blockprop::experiment::render_trajectory;
use blockprop::network::{generate_instance, ChannelConfig, ReputationSource};

fn main() -> Result<()> {
    let inst = generate_instance(19, 21, &ReputationSource::simulated(0.2))?;
    let cfg = BaselineConfig::new(BaselineKind::Greedy, true, 0.5, 0);
    let traj = greedy_trajectory(&inst, &ChannelConfig::default().to_params()?, &cfg)?;
    let svg = Path::new("out/render/greedy_rep_m19.svg");
    let csv = render_trajectory(&inst, &traj, cfg.sigma, svg)?;
    println!("wrote {} and {}", svg.display(), csv.display());
    Ok(())
}
