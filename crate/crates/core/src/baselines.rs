//! Greedy and Gossip route constructors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    distance, evaluate_trajectory, visit_count, ChannelParams, MinerInstance, Trajectory,
    DEFAULT_VISIT_RATIO,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Greedy,
    Gossip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub use_reputation_mask: bool,
    pub sigma: f64,
    pub seed: u64,
    pub visit_ratio: f64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, use_reputation_mask: bool, sigma: f64, seed: u64) -> Self {
        BaselineConfig {
            kind,
            use_reputation_mask,
            sigma,
            seed,
            visit_ratio: DEFAULT_VISIT_RATIO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        Ok(())
    }
}

fn eligible(inst: &MinerInstance, cfg: &BaselineConfig) -> Vec<bool> {
    inst.reputation
        .iter()
        .map(|&r| !cfg.use_reputation_mask || r > cfg.sigma)
        .collect()
}

fn start_miner(inst: &MinerInstance, cfg: &BaselineConfig, ok: &[bool], steps: usize) -> Result<usize> {
    let available = ok.iter().filter(|&&e| e).count();
    if available < steps {
        return Err(Error::Infeasible {
            needed: steps,
            available,
        });
    }
    if !cfg.use_reputation_mask {
        return Ok(0);
    }
    let mut best = None;
    for (i, &e) in ok.iter().enumerate() {
        if e && best.map_or(true, |b: usize| inst.reputation[i] > inst.reputation[b]) {
            best = Some(i);
        }
    }
    Ok(best.expect("at least one eligible miner"))
}

fn candidates(inst: &MinerInstance, ok: &[bool], visited: &[bool], from: usize) -> Vec<usize> {
    (0..ok.len())
        .filter(|&j| ok[j] && !visited[j] && inst.adjacency[from][j])
        .collect()
}

fn build<F>(inst: &MinerInstance, cfg: &BaselineConfig, mut pick: F) -> Result<Vec<usize>>
where
    F: FnMut(usize, &[usize]) -> Result<usize>,
{
    cfg.validate()?;
    inst.validate()?;
    let steps = visit_count(inst.miner_count(), cfg.visit_ratio);
    let ok = eligible(inst, cfg);
    let mut visited = vec![false; inst.miner_count()];
    let mut order = vec![start_miner(inst, cfg, &ok, steps)?];
    visited[order[0]] = true;
    while order.len() < steps {
        let last = *order.last().expect("non-empty");
        let cands = candidates(inst, &ok, &visited, last);
        if cands.is_empty() {
            return Err(Error::Infeasible {
                needed: steps,
                available: order.len(),
            });
        }
        let next = pick(last, &cands)?;
        visited[next] = true;
        order.push(next);
    }
    Ok(order)
}

/// Nearest unvisited eligible neighbor first; ties go to the lower index.
pub fn greedy_order(inst: &MinerInstance, cfg: &BaselineConfig) -> Result<Vec<usize>> {
    build(inst, cfg, |last, cands| {
        let mut best = cands[0];
        let mut best_d = distance(inst, last, best)?;
        for &j in &cands[1..] {
            let d = distance(inst, last, j)?;
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        Ok(best)
    })
}

/// Uniformly random unvisited eligible neighbor.
pub fn gossip_order(inst: &MinerInstance, cfg: &BaselineConfig) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build(inst, cfg, |_, cands| {
        Ok(*cands.choose(&mut rng).expect("non-empty candidates"))
    })
}

pub fn greedy_trajectory(
    inst: &MinerInstance,
    channel: &ChannelParams,
    cfg: &BaselineConfig,
) -> Result<Trajectory> {
    let order = greedy_order(inst, cfg)?;
    evaluate_trajectory(inst, channel, &order, cfg.sigma)
}

pub fn gossip_trajectory(
    inst: &MinerInstance,
    channel: &ChannelParams,
    cfg: &BaselineConfig,
) -> Result<Trajectory> {
    let order = gossip_order(inst, cfg)?;
    evaluate_trajectory(inst, channel, &order, cfg.sigma)
}

/// Dispatches on `cfg.kind`.
pub fn baseline_trajectory(
    inst: &MinerInstance,
    channel: &ChannelParams,
    cfg: &BaselineConfig,
) -> Result<Trajectory> {
    match cfg.kind {
        BaselineKind::Greedy => greedy_trajectory(inst, channel, cfg),
        BaselineKind::Gossip => gossip_trajectory(inst, channel, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_instance, route_length, ReputationSource};
    use proptest::prelude::*;

    fn cfg(kind: BaselineKind, mask: bool) -> BaselineConfig {
        BaselineConfig::new(kind, mask, 0.5, 7)
    }

    #[test]
    fn collinear_nearest_first() {
        let inst = MinerInstance::from_coords(vec![[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]]).unwrap();
        let c = BaselineConfig {
            visit_ratio: 2.0 / 3.0,
            ..cfg(BaselineKind::Greedy, false)
        };
        assert_eq!(greedy_order(&inst, &c).unwrap(), vec![0, 1]);
    }

    #[test]
    fn equidistant_tie_takes_lower_index() {
        let inst = MinerInstance::from_coords(vec![
            [0.5, 0.5],
            [0.9, 0.5],
            [0.1, 0.5],
            [0.5, 0.0],
        ])
        .unwrap();
        let c = BaselineConfig {
            visit_ratio: 0.5,
            ..cfg(BaselineKind::Greedy, false)
        };
        assert_eq!(greedy_order(&inst, &c).unwrap(), vec![0, 1]);
    }

    #[test]
    fn masked_start_is_most_reputable() {
        let reps = vec![0.6, 0.2, 0.95, 0.7, 0.95, 0.8, 0.9, 0.85];
        let inst = generate_instance(8, 3, &ReputationSource::Provided(reps)).unwrap();
        assert_eq!(greedy_order(&inst, &cfg(BaselineKind::Greedy, true)).unwrap()[0], 2);
        assert_eq!(greedy_order(&inst, &cfg(BaselineKind::Greedy, false)).unwrap()[0], 0);
    }

    #[test]
    fn forced_gossip_chain() {
        // A path graph leaves one neighbor at every step.
        let mut inst = generate_instance(4, 1, &ReputationSource::Uniform(0.9)).unwrap();
        inst.adjacency = vec![vec![false; 4]; 4];
        for i in 0..3 {
            inst.adjacency[i][i + 1] = true;
            inst.adjacency[i + 1][i] = true;
        }
        let c = BaselineConfig {
            visit_ratio: 1.0,
            ..cfg(BaselineKind::Gossip, false)
        };
        for seed in 0..5 {
            let c = BaselineConfig { seed, ..c.clone() };
            assert_eq!(gossip_order(&inst, &c).unwrap(), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn gossip_is_seeded() {
        let inst = generate_instance(19, 4, &ReputationSource::Uniform(0.9)).unwrap();
        let c = cfg(BaselineKind::Gossip, false);
        assert_eq!(gossip_order(&inst, &c).unwrap(), gossip_order(&inst, &c).unwrap());
    }

    #[test]
    fn shortfall_is_infeasible() {
        let inst = generate_instance(8, 1, &ReputationSource::Uniform(0.3)).unwrap();
        let err = greedy_order(&inst, &cfg(BaselineKind::Greedy, true)).unwrap_err();
        assert!(matches!(err, Error::Infeasible { needed: 6, available: 0 }));
    }

    #[test]
    fn gossip_is_longer_than_greedy_on_average() {
        let mut longer = 0;
        for seed in 0..200 {
            let inst = generate_instance(19, seed, &ReputationSource::Uniform(0.9)).unwrap();
            let g = route_length(&inst, &greedy_order(&inst, &cfg(BaselineKind::Greedy, false)).unwrap());
            let c = BaselineConfig {
                seed,
                ..cfg(BaselineKind::Gossip, false)
            };
            let r = route_length(&inst, &gossip_order(&inst, &c).unwrap());
            longer += usize::from(r >= g);
        }
        assert!(longer >= 190, "gossip >= greedy on {longer}/200");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn masked_routes_avoid_low_reputation(seed in 0u64..10_000, m in 5usize..30) {
            let inst = generate_instance(m, seed, &ReputationSource::simulated(0.2)).unwrap();
            for kind in [BaselineKind::Greedy, BaselineKind::Gossip] {
                match baseline_trajectory(&inst, &ChannelParams::default(), &cfg(kind, true)) {
                    Ok(t) => {
                        prop_assert!(t.order.iter().all(|&i| inst.reputation[i] > 0.5));
                        prop_assert_eq!(t.order.len(), visit_count(m, DEFAULT_VISIT_RATIO));
                    }
                    Err(e) => {
                        let infeasible = matches!(e, Error::Infeasible { .. });
                        prop_assert!(infeasible);
                    }
                }
            }
        }
    }
}
