//! Age-of-Block analytics.
//!
//! Getdata requests arrive as a Poisson stream with rate `mu` and each block
//! transfer takes an exponential time with mean `gamma`, served first come
//! first served. The closed form below is the objective used for routing;
//! [`simulate_aob`] is an independent discrete-event oracle built from the
//! Lindley recursion, used to validate it.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible load `mu * gamma`; the closed form has a pole at 1.
pub const STABILITY_LIMIT: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AobParams {
    /// Getdata delivery rate (1/s).
    pub mu: f64,
    /// Mean block propagation time of the hop (s).
    pub gamma: f64,
}

impl AobParams {
    pub fn new(mu: f64, gamma: f64) -> Result<Self> {
        let p = AobParams { mu, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn load(&self) -> f64 {
        self.mu * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Domain(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        let rho = self.load();
        if rho >= STABILITY_LIMIT {
            return Err(Error::Unstable { rho });
        }
        Ok(())
    }
}

/// Per-hop Age of Block, `gamma + 1/mu + mu*gamma^3 / (1 - mu*gamma)`.
///
/// This is the routing objective exactly as the model states it. The
/// discrete-event oracle converges to [`aob_mm1_reference`] instead (the
/// textbook M/M/1 average age); both are increasing in `gamma` on the stable
/// region so route rankings agree.
pub fn aob_closed_form(p: AobParams) -> Result<f64> {
    p.validate()?;
    let rho = p.load();
    Ok(p.gamma + 1.0 / p.mu + p.mu * p.gamma.powi(3) / (1.0 - rho))
}

/// Textbook FCFS M/M/1 average age, `gamma + 1/mu + mu^2*gamma^3 / (1 - mu*gamma)`.
pub fn aob_mm1_reference(p: AobParams) -> Result<f64> {
    p.validate()?;
    let rho = p.load();
    Ok(p.gamma + 1.0 / p.mu + p.mu * p.mu * p.gamma.powi(3) / (1.0 - rho))
}

/// Density of the system time (waiting plus transfer) at `t >= 0`.
pub fn system_time_pdf(p: AobParams, t: f64) -> Result<f64> {
    p.validate()?;
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("system time must be >= 0, got {t}")));
    }
    let rate = 1.0 / p.gamma - p.mu;
    Ok(rate * ((p.mu - 1.0 / p.gamma) * t).exp())
}

/// Probability that a competing block is mined within `gamma_total` seconds.
pub fn fork_probability(mu: f64, gamma_total: f64) -> Result<f64> {
    if !(mu > 0.0) || !(gamma_total >= 0.0) {
        return Err(Error::Domain(format!(
            "fork probability needs mu > 0 and gamma >= 0, got ({mu}, {gamma_total})"
        )));
    }
    Ok(-(-mu * gamma_total).exp_m1())
}

/// Sawtooth age process sampled at block receipt instants.
///
/// Each receipt contributes two points at the same time: the age just before
/// the drop and the age just after it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgeTrace {
    pub event_times: Vec<f64>,
    pub ages_at_events: Vec<f64>,
    pub horizon: f64,
}

impl AgeTrace {
    pub fn len(&self) -> usize {
        self.event_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["event_time", "age"])?;
        for (t, a) in self.event_times.iter().zip(&self.ages_at_events) {
            w.write_record([t.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AobSimulation {
    pub mean_age: f64,
    pub trace: AgeTrace,
}

/// Inverse-CDF exponential draw with the given rate.
pub fn sample_exp<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(-u).ln_1p() / rate
}

/// Running sums of the queue recursion; shared by the simulator and the
/// batch-means estimator.
struct Lindley {
    rng: ChaCha8Rng,
    arrival_rate: f64,
    service_rate: f64,
    prev_system_time: f64,
}

struct Step {
    interarrival: f64,
    system_time: f64,
}

impl Lindley {
    fn new(p: AobParams, seed: u64) -> Self {
        Lindley {
            rng: ChaCha8Rng::seed_from_u64(seed),
            arrival_rate: p.mu,
            service_rate: 1.0 / p.gamma,
            prev_system_time: 0.0,
        }
    }

    fn next(&mut self) -> Step {
        let interarrival = sample_exp(&mut self.rng, self.arrival_rate);
        let transfer = sample_exp(&mut self.rng, self.service_rate);
        let waiting = (self.prev_system_time - interarrival).max(0.0);
        let system_time = waiting + transfer;
        self.prev_system_time = system_time;
        Step {
            interarrival,
            system_time,
        }
    }
}

/// Trapezoid area `X*D + X^2/2` for one request.
fn trapezoid(s: &Step) -> f64 {
    s.interarrival * s.system_time + 0.5 * s.interarrival * s.interarrival
}

/// Discrete-event estimate of the average age with a full sawtooth trace.
pub fn simulate_aob(p: AobParams, num_arrivals: usize, seed: u64) -> Result<AobSimulation> {
    simulate_aob_traced(p, num_arrivals, seed, usize::MAX)
}

/// As [`simulate_aob`] but records at most `max_trace_events` receipts.
pub fn simulate_aob_traced(
    p: AobParams,
    num_arrivals: usize,
    seed: u64,
    max_trace_events: usize,
) -> Result<AobSimulation> {
    if num_arrivals == 0 {
        return Err(Error::Domain("num_arrivals must be >= 1".into()));
    }
    if !(p.mu > 0.0 && p.gamma > 0.0) {
        return Err(Error::Domain("mu and gamma must be positive".into()));
    }
    let mut q = Lindley::new(p, seed);
    let mut area = 0.0;
    let mut elapsed = 0.0;
    let mut trace = AgeTrace::default();
    let mut request_time = 0.0;
    for i in 0..num_arrivals {
        let prev_request = request_time;
        let s = q.next();
        area += trapezoid(&s);
        elapsed += s.interarrival;
        request_time += s.interarrival;
        if i < max_trace_events {
            let receipt = request_time + s.system_time;
            trace.event_times.push(receipt);
            trace.ages_at_events.push(receipt - prev_request);
            trace.event_times.push(receipt);
            trace.ages_at_events.push(s.system_time);
            trace.horizon = receipt;
        }
    }
    Ok(AobSimulation {
        mean_age: area / elapsed,
        trace,
    })
}

/// Mean age with a batch-means 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AobEstimate {
    pub mean_age: f64,
    pub half_width_95: f64,
    pub batches: usize,
}

pub fn estimate_aob(
    p: AobParams,
    num_arrivals: usize,
    batches: usize,
    seed: u64,
) -> Result<AobEstimate> {
    if batches < 2 || num_arrivals < batches {
        return Err(Error::Domain(
            "need at least 2 batches and one arrival per batch".into(),
        ));
    }
    let mut q = Lindley::new(p, seed);
    let per_batch = num_arrivals / batches;
    let mut total_area = 0.0;
    let mut total_elapsed = 0.0;
    let mut means = Vec::with_capacity(batches);
    for _ in 0..batches {
        let (mut area, mut elapsed) = (0.0, 0.0);
        for _ in 0..per_batch {
            let s = q.next();
            area += trapezoid(&s);
            elapsed += s.interarrival;
        }
        total_area += area;
        total_elapsed += elapsed;
        means.push(area / elapsed);
    }
    let n = means.len() as f64;
    let avg = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (n - 1.0);
    let t = crate::stats::student_t_quantile(0.975, n - 1.0);
    Ok(AobEstimate {
        mean_age: total_area / total_elapsed,
        half_width_95: t * (var / n).sqrt(),
        batches,
    })
}
