//! Checks the queue simulation against both closed forms and writes the
//! report, per-seed CSV and a sawtooth age trace.
//!
//! `cargo run --release --example validate_queue`

use std::path::Path;

use blockprop::error::Result;
use blockprop::experiment::{validate_aob, AobValidationSpec};

fn main() -> Result<()> {
    let dir = Path::new("out/validate_aob");
    std::fs::create_dir_all(dir)?;
    let spec = AobValidationSpec { arrivals: 200_000, converged_arrivals: 2_000_000, ..AobValidationSpec::default() };
    let report = validate_aob(&spec, Some(dir))?;
    for r in &report.rows {
        println!(
            "load {:.1} seed {}: {:.2} +- {:.2} (converged {:.2}, closed form {:.2}, M/M/1 {:.2})",
            r.load, r.run_seed, r.des_mean, r.des_half_width_95, r.converged, r.closed_form, r.mm1_reference
        );
    }
    println!("simulation follows {}; report in {}", report.des_matches, dir.display());
    Ok(())
}
