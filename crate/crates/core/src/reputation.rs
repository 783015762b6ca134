//! Subjective-logic miner reputations.
//!
//! Each evaluator `i` forms a local opinion of miner `j` from windowed
//! interaction counts (negatives weighted by `xi`, recent windows weighted by a
//! logarithmic freshness function). Third-party recommenders contribute a
//! recommended opinion weighted by interaction frequency, and the two are
//! fused into the final opinion whose expected belief is the reputation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `T + F + U = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A (trust, distrust, uncertainty) opinion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpinionTuple {
    pub trust: f64,
    pub distrust: f64,
    pub uncertainty: f64,
}

impl OpinionTuple {
    pub fn new(trust: f64, distrust: f64, uncertainty: f64) -> Result<Self> {
        let o = OpinionTuple {
            trust,
            distrust,
            uncertainty,
        };
        if !o.is_valid() {
            return Err(Error::Domain(format!("invalid opinion {o:?}")));
        }
        Ok(o)
    }

    /// Total ignorance: no trust, no distrust.
    pub const fn vacuous() -> Self {
        OpinionTuple {
            trust: 0.0,
            distrust: 0.0,
            uncertainty: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.trust)
            && in_unit(self.distrust)
            && in_unit(self.uncertainty)
            && (self.trust + self.distrust + self.uncertainty - 1.0).abs() <= SUM_TOLERANCE
    }

    /// Expected belief `T + eta * U`.
    pub fn expectation(&self, eta: f64) -> f64 {
        self.trust + eta * self.uncertainty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionWindow {
    /// 1-based window index `k`.
    pub window_index: usize,
    pub positives: u32,
    pub negatives: u32,
    /// Probability of successful block transmission in the window.
    pub success_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReputationParams {
    /// Weight of uncertainty in the expected belief, in [0, 1].
    pub eta: f64,
    /// Weight of negative interactions, > 1.
    pub xi: f64,
    /// Freshness factor, in (0, 1).
    pub lambda_fresh: f64,
    /// Weight of positive interactions in the frequency metric, > 1.
    pub gamma_rec: f64,
    /// Default recommender coefficient.
    pub delta_rec: f64,
    pub sigma: f64,
    pub windows: usize,
}

impl Default for ReputationParams {
    fn default() -> Self {
        ReputationParams {
            eta: 0.5,
            xi: 2.0,
            lambda_fresh: 0.5,
            gamma_rec: 1.5,
            delta_rec: 1.0,
            sigma: 0.5,
            windows: 10,
        }
    }
}

impl ReputationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("reputation parameter {what}")));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if !(self.xi > 1.0) {
            return bad("xi must exceed 1");
        }
        if !(self.lambda_fresh > 0.0 && self.lambda_fresh < 1.0) {
            return bad("lambda_fresh must lie in (0, 1)");
        }
        if !(self.gamma_rec > 1.0) {
            return bad("gamma_rec must exceed 1");
        }
        if !(self.delta_rec > 0.0) {
            return bad("delta_rec must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if self.windows == 0 {
            return bad("windows must be >= 1");
        }
        Ok(())
    }
}

/// Opinion from one window, with negatives weighted by `xi`.
pub fn local_window_opinion(w: &InteractionWindow, xi: f64) -> Result<OpinionTuple> {
    if w.positives == 0 && w.negatives == 0 {
        return Err(Error::NoInteraction);
    }
    if !(0.0..=1.0).contains(&w.success_prob) {
        return Err(Error::Domain(format!(
            "success probability {} outside [0, 1]",
            w.success_prob
        )));
    }
    let uncertainty = 1.0 - w.success_prob;
    let pos = f64::from(w.positives);
    let neg = xi * f64::from(w.negatives);
    let belief = 1.0 - uncertainty;
    Ok(OpinionTuple {
        trust: belief * pos / (pos + neg),
        distrust: belief * neg / (pos + neg),
        uncertainty,
    })
}

/// Window timestamp used by the freshness function; keeps `ln t > 0`.
pub fn window_time(window_index: usize) -> f64 {
    window_index as f64 + 1.0
}

/// Freshness-weighted average of opinions observed at times `t`.
pub fn freshness_weighted(observations: &[(f64, OpinionTuple)], lambda: f64) -> Result<OpinionTuple> {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (t, o) in observations {
        let w = lambda * t.ln();
        total += w;
        acc[0] += w * o.trust;
        acc[1] += w * o.distrust;
        acc[2] += w * o.uncertainty;
    }
    if observations.is_empty() || !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(OpinionTuple {
        trust: acc[0] / total,
        distrust: acc[1] / total,
        uncertainty: acc[2] / total,
    })
}

/// Local opinion over all windows; empty windows count as vacuous.
pub fn local_opinion(windows: &[InteractionWindow], p: &ReputationParams) -> Result<OpinionTuple> {
    let observations = windows
        .iter()
        .map(|w| {
            let o = match local_window_opinion(w, p.xi) {
                Err(Error::NoInteraction) => OpinionTuple::vacuous(),
                other => other?,
            };
            Ok((window_time(w.window_index), o))
        })
        .collect::<Result<Vec<_>>>()?;
    freshness_weighted(&observations, p.lambda_fresh)
}

pub fn local_reputation(o: &OpinionTuple, eta: f64) -> f64 {
    o.expectation(eta)
}

/// One recommender's view of the target miner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recommender {
    pub opinion: OpinionTuple,
    pub positives: f64,
    pub negatives: f64,
    /// Mean of `gamma_rec * alpha + beta` over every miner this recommender
    /// could interact with.
    pub mean_interaction: f64,
    pub delta: f64,
}

impl Recommender {
    pub fn weight(&self, gamma_rec: f64) -> f64 {
        if !(self.mean_interaction > 0.0) {
            return 0.0;
        }
        let h = gamma_rec * self.positives + self.negatives;
        self.delta * h / self.mean_interaction
    }
}

/// Interaction-frequency weighted average of recommender opinions.
pub fn recommended_opinion(recommenders: &[Recommender], gamma_rec: f64) -> Result<OpinionTuple> {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for r in recommenders {
        let w = r.weight(gamma_rec);
        total += w;
        acc[0] += w * r.opinion.trust;
        acc[1] += w * r.opinion.distrust;
        acc[2] += w * r.opinion.uncertainty;
    }
    if !(total > 0.0) {
        return Err(Error::NoRecommendation);
    }
    Ok(OpinionTuple {
        trust: acc[0] / total,
        distrust: acc[1] / total,
        uncertainty: acc[2] / total,
    })
}

/// Fuses a local and a recommended opinion.
pub fn fuse_final_opinion(local: &OpinionTuple, rec: &OpinionTuple) -> Result<OpinionTuple> {
    let (ul, ur) = (local.uncertainty, rec.uncertainty);
    // A vacuous side makes the denominator exactly 1.
    let denom = if ul == 1.0 || ur == 1.0 {
        1.0
    } else {
        ul + ur - ur * ul
    };
    if !(denom > 0.0) {
        return Err(Error::FusionSingularity);
    }
    Ok(OpinionTuple {
        trust: (local.trust * ur + rec.trust * ul) / denom,
        distrust: (local.distrust * ur + rec.distrust * ul) / denom,
        uncertainty: ur * ul / denom,
    })
}

/// Fusion with the fallback for two dogmatic opinions: their plain average.
pub fn fuse_or_average(local: &OpinionTuple, rec: &OpinionTuple) -> OpinionTuple {
    match fuse_final_opinion(local, rec) {
        Ok(o) => o,
        Err(_) => OpinionTuple {
            trust: 0.5 * (local.trust + rec.trust),
            distrust: 0.5 * (local.distrust + rec.distrust),
            uncertainty: 0.5 * (local.uncertainty + rec.uncertainty),
        },
    }
}

pub fn final_reputation(o: &OpinionTuple, eta: f64) -> f64 {
    o.expectation(eta)
}

/// Behaviour mix for the interaction-log generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogProfile {
    pub honest_fraction: f64,
    /// Probability that a pair interacts at all in a given window.
    pub activity: f64,
}

impl Default for LogProfile {
    fn default() -> Self {
        LogProfile {
            honest_fraction: 0.8,
            activity: 0.9,
        }
    }
}

/// Windowed logs for every ordered pair `(i, j)`, `i != j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionLogs {
    pub miners: usize,
    /// `windows[i][j]` holds evaluator `i`'s windows about miner `j`.
    pub windows: Vec<Vec<Vec<InteractionWindow>>>,
    pub honest: Vec<bool>,
}

impl InteractionLogs {
    pub fn empty(miners: usize) -> Self {
        InteractionLogs {
            miners,
            windows: vec![vec![Vec::new(); miners]; miners],
            honest: vec![true; miners],
        }
    }

    fn counts(&self, i: usize, j: usize) -> (f64, f64) {
        self.windows[i][j].iter().fold((0.0, 0.0), |(a, b), w| {
            (a + f64::from(w.positives), b + f64::from(w.negatives))
        })
    }

    /// CSV rows `i,j,k,alpha,beta,q`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "k", "alpha", "beta", "q"])?;
        for (i, row) in self.windows.iter().enumerate() {
            for (j, ws) in row.iter().enumerate() {
                for win in ws {
                    w.write_record([
                        i.to_string(),
                        j.to_string(),
                        win.window_index.to_string(),
                        win.positives.to_string(),
                        win.negatives.to_string(),
                        win.success_prob.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(miners: usize, input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            i: usize,
            j: usize,
            k: usize,
            alpha: u32,
            beta: u32,
            q: f64,
        }
        let mut logs = InteractionLogs::empty(miners);
        for row in csv::Reader::from_reader(input).deserialize() {
            let r: Row = row?;
            if r.i >= miners || r.j >= miners || r.i == r.j {
                return Err(Error::Domain(format!("bad log pair ({}, {})", r.i, r.j)));
            }
            logs.windows[r.i][r.j].push(InteractionWindow {
                window_index: r.k,
                positives: r.alpha,
                negatives: r.beta,
                success_prob: r.q,
            });
        }
        Ok(logs)
    }
}

/// Generates windowed logs: honest miners collect mostly positive
/// interactions over reliable links, dishonest ones the reverse.
pub fn simulate_interaction_logs(
    miners: usize,
    profile: &LogProfile,
    windows: usize,
    seed: u64,
) -> Result<InteractionLogs> {
    if miners < 2 {
        return Err(Error::InvalidInstance(format!(
            "at least 2 miners required, got {miners}"
        )));
    }
    if !(0.0..=1.0).contains(&profile.honest_fraction) || !(0.0..=1.0).contains(&profile.activity)
    {
        return Err(Error::Config("log profile fractions must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dishonest = ((1.0 - profile.honest_fraction) * miners as f64).round() as usize;
    let mut ids: Vec<usize> = (0..miners).collect();
    ids.shuffle(&mut rng);
    let mut honest = vec![true; miners];
    for &i in &ids[..dishonest] {
        honest[i] = false;
    }
    let mut logs = InteractionLogs::empty(miners);
    logs.honest = honest.clone();
    for i in 0..miners {
        for j in 0..miners {
            if i == j {
                continue;
            }
            logs.windows[i][j] = (1..=windows)
                .map(|k| {
                    if !rng.gen_bool(profile.activity) {
                        return InteractionWindow {
                            window_index: k,
                            positives: 0,
                            negatives: 0,
                            success_prob: 0.0,
                        };
                    }
                    let (positives, negatives, success_prob) = if honest[j] {
                        (rng.gen_range(4..=12), rng.gen_range(0..=2), rng.gen_range(0.8..=1.0))
                    } else {
                        (rng.gen_range(0..=3), rng.gen_range(3..=10), rng.gen_range(0.3..=0.7))
                    };
                    InteractionWindow {
                        window_index: k,
                        positives,
                        negatives,
                        success_prob,
                    }
                })
                .collect();
        }
    }
    Ok(logs)
}

/// Final opinion of every evaluator about every miner.
///
/// Recommenders for `(i, j)` are all other miners with at least one recorded
/// interaction with `j`. Without recommendations the local opinion stands.
pub fn final_opinions(
    logs: &InteractionLogs,
    p: &ReputationParams,
) -> Result<Vec<Vec<Option<OpinionTuple>>>> {
    let m = logs.miners;
    let mut local = vec![vec![None; m]; m];
    let mut counts = vec![vec![(0.0, 0.0); m]; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                local[i][j] = Some(if logs.windows[i][j].is_empty() {
                    OpinionTuple::vacuous()
                } else {
                    local_opinion(&logs.windows[i][j], p)?
                });
                counts[i][j] = logs.counts(i, j);
            }
        }
    }
    let mean_interaction: Vec<f64> = (0..m)
        .map(|s| {
            counts[s]
                .iter()
                .map(|&(a, b)| p.gamma_rec * a + b)
                .sum::<f64>()
                / m as f64
        })
        .collect();

    let mut out = vec![vec![None; m]; m];
    let mut recs = Vec::with_capacity(m);
    for j in 0..m {
        for i in 0..m {
            if i == j {
                continue;
            }
            recs.clear();
            for s in (0..m).filter(|&s| s != i && s != j) {
                let (a, b) = counts[s][j];
                if a + b > 0.0 {
                    recs.push(Recommender {
                        opinion: local[s][j].expect("off-diagonal"),
                        positives: a,
                        negatives: b,
                        mean_interaction: mean_interaction[s],
                        delta: p.delta_rec,
                    });
                }
            }
            let own = local[i][j].expect("off-diagonal");
            out[i][j] = Some(match recommended_opinion(&recs, p.gamma_rec) {
                Ok(rec) => fuse_or_average(&own, &rec),
                Err(Error::NoRecommendation) => own,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(out)
}

/// Pairwise final reputations `R[i][j]`; the diagonal is 0.
pub fn reputation_matrix(logs: &InteractionLogs, p: &ReputationParams) -> Result<Vec<Vec<f64>>> {
    Ok(final_opinions(logs, p)?
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|o| o.map_or(0.0, |o| final_reputation(&o, p.eta)))
                .collect()
        })
        .collect())
}

/// Per-miner score: mean final reputation over all evaluators.
pub fn miner_reputations(logs: &InteractionLogs, p: &ReputationParams) -> Result<Vec<f64>> {
    let r = reputation_matrix(logs, p)?;
    let m = logs.miners;
    Ok((0..m)
        .map(|j| (0..m).filter(|&i| i != j).map(|i| r[i][j]).sum::<f64>() / (m - 1) as f64)
        .collect())
}

pub fn write_matrix_csv<W: Write>(matrix: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let m = matrix.len();
    let mut header = vec!["evaluator".to_string()];
    header.extend((0..m).map(|j| j.to_string()));
    w.write_record(&header)?;
    for (i, row) in matrix.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
