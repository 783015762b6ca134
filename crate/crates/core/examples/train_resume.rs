//! A short REINFORCE run with the rollout baseline, stopped after one epoch
//! and resumed from its checkpoint directory.
//!
//! `cargo run --release --example train_resume [dir]`

use blockprop::error::Result;
use blockprop::policy::PolicyConfig;
use blockprop::trainer::{TrainConfig, Trainer};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out/train_resume".into());
    let small = TrainConfig {
        epochs: 1,
        steps_per_epoch: 5,
        batch_size: 16,
        miners: 9,
        holdout_size: 64,
        policy: PolicyConfig { embed_dim: 32, layers: 2, heads: 4, ff_dim: 64, ..PolicyConfig::default() },
        verbose: true,
        ..TrainConfig::desk()
    };
    let first = Trainer::new(small.clone())?.with_checkpoint_dir(&dir).run()?;
    println!("after 1 epoch: validation {:.4}", first.epochs[0].validation_cost);
    let resumed = Trainer::resume(TrainConfig { epochs: 3, ..small }, &dir)?.run()?;
    for e in &resumed.epochs {
        println!(
            "epoch {}: validation {:.4}  p {:?}  refreshed {}",
            e.epoch, e.validation_cost, e.p_value, e.baseline_refreshed
        );
    }
    println!("checkpoints and logs in {dir}");
    Ok(())
}
