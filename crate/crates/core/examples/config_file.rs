//! Loading a TOML configuration and deriving the training settings from it.
//!
//! `cargo run --release --example config_file`

use blockprop::config::Config;
use blockprop::error::Result;

const TOML: &str = r#"
[reputation]
sigma = 0.6

[train]
epochs = 3
miners = 9

[experiment]
miner_counts = [9, 19]
mechanisms = ["gat+rep", "greedy+rep"]
"#;

fn main() -> Result<()> {
    let cfg = Config::from_toml_str(TOML)?;
    let train = cfg.train_config();
    println!("fingerprint {}", cfg.fingerprint());
    println!("training: {} epochs at M={}, sigma {}", train.epochs, train.miners, train.sigma);
    println!("mechanisms: {:?}", cfg.experiment.mechanisms);
    match Config::from_toml_str("[train]\nepoch = 3\n") {
        Err(e) => println!("rejected typo: {} ({})", e, e.kind()),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }
    Ok(())
}
