//! Simulated interaction logs turned into pairwise and per-miner reputations.
//!
//! `cargo run --release --example reputation_logs`

use blockprop::error::Result;
use blockprop::reputation::{
    miner_reputations, reputation_matrix, simulate_interaction_logs, write_matrix_csv, LogProfile,
    ReputationParams,
};

fn main() -> Result<()> {
    let params = ReputationParams::default();
    let logs = simulate_interaction_logs(10, &LogProfile::default(), params.windows, 11)?;
    let scores = miner_reputations(&logs, &params)?;
    for (j, (score, honest)) in scores.iter().zip(&logs.honest).enumerate() {
        let mark = if *score > params.sigma { "eligible" } else { "masked" };
        println!("miner {j:2}  honest {honest:5}  reputation {score:.3}  {mark}");
    }
    println!("\npairwise R[i][j]:");
    write_matrix_csv(&reputation_matrix(&logs, &params)?, std::io::stdout())?;
    Ok(())
}
