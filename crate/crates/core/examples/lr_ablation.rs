//! Validation curves for the learning-rate schemes and the three baselines
//! on a deliberately tiny budget.
//!
//! `cargo run --release --example lr_ablation`

use std::path::Path;

use blockprop::error::Result;
use blockprop::experiment::{run_training_ablation, AblationSpec, Environment};
use blockprop::network::ChannelConfig;
use blockprop::policy::PolicyConfig;
use blockprop::reputation::ReputationParams;
use blockprop::trainer::TrainConfig;

fn main() -> Result<()> {
    let train = TrainConfig {
        epochs: 2,
        steps_per_epoch: 4,
        batch_size: 16,
        miners: 9,
        holdout_size: 64,
        policy: PolicyConfig { embed_dim: 16, layers: 1, heads: 2, ff_dim: 32, ..PolicyConfig::default() },
        ..TrainConfig::desk()
    };
    let spec = AblationSpec { seeds: vec![1234], ..AblationSpec::default() };
    let env = Environment::new(ChannelConfig::default(), ReputationParams::default());
    let rows = run_training_ablation(&train, &spec, &env, Path::new("out/ablation"))?;
    for r in rows.iter().filter(|r| r.epoch == train.epochs) {
        println!("{:8} {:10} final validation {:.4}", r.study, r.label, r.validation_cost);
    }
    Ok(())
}
