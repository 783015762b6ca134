//! Age of Block for one hop: the closed form, the M/M/1 reference and the
//! queue simulation, plus the fork probability of a whole route.
//!
//! `cargo run --release --example aob_queue`

use blockprop::aob::{aob_closed_form, aob_mm1_reference, estimate_aob, fork_probability, AobParams};
use blockprop::error::Result;

fn main() -> Result<()> {
    let mu = 0.05;
    println!("load  gamma_s  closed_form  mm1_reference  simulated (95% CI)");
    for load in [0.1, 0.3, 0.5, 0.8] {
        let p = AobParams::new(mu, load / mu)?;
        let est = estimate_aob(p, 200_000, 20, 7)?;
        println!(
            "{load:4}  {:7.2}  {:11.2}  {:13.2}  {:.2} +- {:.2}",
            p.gamma,
            aob_closed_form(p)?,
            aob_mm1_reference(p)?,
            est.mean_age,
            est.half_width_95
        );
    }
    for total in [2.0, 20.0, 60.0] {
        println!("fork probability over {total:>4} s: {:.4}", fork_probability(mu, total)?);
    }
    Ok(())
}
