//! Miner network instances, channel-rate propagation times and trajectory
//! evaluation.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aob::{aob_closed_form, AobParams};
use crate::error::{Error, Result};
use crate::reputation::{self, LogProfile, ReputationParams};

/// Fraction of miners that take part in validation by default.
pub const DEFAULT_VISIT_RATIO: f64 = 0.75;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Number of miners a block visits, `floor(M * ratio)`.
pub fn visit_count(miners: usize, ratio: f64) -> usize {
    ((miners as f64) * ratio + 1e-9).floor() as usize
}

/// Physical-layer constants, all linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub block_size_bits: f64,
    pub bandwidth_hz: f64,
    pub tx_power_watts: f64,
    pub unit_gain: f64,
    pub path_loss_exp: f64,
    pub noise_density_w_per_hz: f64,
    pub getdata_rate_mu: f64,
    /// Scale from unit-square coordinates to meters.
    pub meters_per_unit: f64,
}

impl ChannelParams {
    /// The simulation constants (1 MB blocks, 23 dBm, -174 dBm/Hz, exponent
    /// 3.38, -30 dB gain) at the given bandwidth.
    pub fn with_bandwidth(bandwidth_hz: f64) -> Self {
        ChannelConfig {
            bandwidth_hz,
            ..ChannelConfig::default()
        }
        .to_params()
        .expect("default channel config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("block_size_bits", self.block_size_bits),
            ("bandwidth_hz", self.bandwidth_hz),
            ("tx_power_watts", self.tx_power_watts),
            ("unit_gain", self.unit_gain),
            ("path_loss_exp", self.path_loss_exp),
            ("noise_density_w_per_hz", self.noise_density_w_per_hz),
            ("getdata_rate_mu", self.getdata_rate_mu),
            ("meters_per_unit", self.meters_per_unit),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams::with_bandwidth(180e3)
    }
}

/// Channel section of the config file; logarithmic units are named by suffix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub block_size_bits: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub unit_gain_db: f64,
    pub path_loss_exp: f64,
    pub noise_density_dbm_per_hz: f64,
    pub getdata_rate_mu: f64,
    pub meters_per_unit: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            block_size_bits: 8e6,
            bandwidth_hz: 180e3,
            tx_power_dbm: 23.0,
            unit_gain_db: -30.0,
            path_loss_exp: 3.38,
            noise_density_dbm_per_hz: -174.0,
            // Keeps mu*gamma < 0.8 for every unit-square hop at 180 kHz.
            getdata_rate_mu: 0.05,
            meters_per_unit: 1000.0,
        }
    }
}

impl ChannelConfig {
    pub fn to_params(&self) -> Result<ChannelParams> {
        let p = ChannelParams {
            block_size_bits: self.block_size_bits,
            bandwidth_hz: self.bandwidth_hz,
            tx_power_watts: dbm_to_watts(self.tx_power_dbm),
            unit_gain: db_to_linear(self.unit_gain_db),
            path_loss_exp: self.path_loss_exp,
            noise_density_w_per_hz: dbm_to_watts(self.noise_density_dbm_per_hz),
            getdata_rate_mu: self.getdata_rate_mu,
            meters_per_unit: self.meters_per_unit,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Shannon-rate transfer time of one block over `meters`.
pub fn propagation_time_meters(params: &ChannelParams, meters: f64) -> Result<f64> {
    if !(meters > 0.0) {
        return Err(Error::Domain(format!(
            "propagation distance must be positive, got {meters}"
        )));
    }
    let received = params.tx_power_watts * params.unit_gain * meters.powf(-params.path_loss_exp);
    let snr = received / (params.noise_density_w_per_hz * params.bandwidth_hz);
    let rate = params.bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2;
    Ok(params.block_size_bits / rate)
}

/// Transfer time for a unit-square distance, scaled by `meters_per_unit`.
pub fn propagation_time(params: &ChannelParams, distance: f64) -> Result<f64> {
    propagation_time_meters(params, distance * params.meters_per_unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Adjacency {
    FullyConnected,
    /// Each miner links to its `k` nearest neighbors (symmetrised).
    KNearest { k: usize },
}

/// Where per-miner reputations come from when an instance is generated.
#[derive(Debug, Clone, PartialEq)]
pub enum ReputationSource {
    /// Every miner gets the same score.
    Uniform(f64),
    /// Scores given directly, one per miner.
    Provided(Vec<f64>),
    /// Scores computed by the reputation engine from simulated logs.
    Simulated {
        profile: LogProfile,
        params: ReputationParams,
    },
}

impl ReputationSource {
    pub fn simulated(dishonest_fraction: f64) -> Self {
        ReputationSource::Simulated {
            profile: LogProfile {
                honest_fraction: 1.0 - dishonest_fraction,
                ..LogProfile::default()
            },
            params: ReputationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerInstance {
    pub coords: Vec<[f64; 2]>,
    pub reputation: Vec<f64>,
    pub adjacency: Vec<Vec<bool>>,
    pub seed: u64,
}

/// Flat serialized form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    #[serde(rename = "M")]
    pub miners: usize,
    pub seed: u64,
    pub coords: Vec<[f64; 2]>,
    pub reputations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<bool>>>,
}

impl MinerInstance {
    pub fn new(
        coords: Vec<[f64; 2]>,
        reputation: Vec<f64>,
        adjacency: Vec<Vec<bool>>,
        seed: u64,
    ) -> Result<Self> {
        let inst = MinerInstance {
            coords,
            reputation,
            adjacency,
            seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Fully connected instance with uniform reputation 1.
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self> {
        let m = coords.len();
        MinerInstance::new(coords, vec![1.0; m], full_adjacency(m), 0)
    }

    pub fn miner_count(&self) -> usize {
        self.coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.coords.len();
        if m == 0 {
            return Err(Error::InvalidInstance("no miners".into()));
        }
        if self.reputation.len() != m || self.adjacency.len() != m {
            return Err(Error::InvalidInstance(format!(
                "{m} coords but {} reputations and {} adjacency rows",
                self.reputation.len(),
                self.adjacency.len()
            )));
        }
        if let Some(r) = self.reputation.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidInstance(format!("reputation {r} outside [0, 1]")));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidInstance("adjacency is not square".into()));
            }
            if row[i] {
                return Err(Error::InvalidInstance(format!("miner {i} adjacent to itself")));
            }
            for (j, &a) in row.iter().enumerate() {
                if a != self.adjacency[j][i] {
                    return Err(Error::InvalidInstance("adjacency is not symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Shifts every coordinate by `offset` (may leave the unit square).
    pub fn translated(&self, offset: [f64; 2]) -> Self {
        let mut out = self.clone();
        for c in &mut out.coords {
            c[0] += offset[0];
            c[1] += offset[1];
        }
        out
    }

    pub fn to_record(&self) -> InstanceRecord {
        let full = self.adjacency == full_adjacency(self.miner_count());
        InstanceRecord {
            miners: self.miner_count(),
            seed: self.seed,
            coords: self.coords.clone(),
            reputations: self.reputation.clone(),
            adjacency: (!full).then(|| self.adjacency.clone()),
        }
    }

    pub fn from_record(rec: InstanceRecord) -> Result<Self> {
        if rec.coords.len() != rec.miners {
            return Err(Error::InvalidInstance(format!(
                "M = {} but {} coords",
                rec.miners,
                rec.coords.len()
            )));
        }
        let adjacency = rec.adjacency.unwrap_or_else(|| full_adjacency(rec.miners));
        MinerInstance::new(rec.coords, rec.reputations, adjacency, rec.seed)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, &self.to_record())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        MinerInstance::from_record(serde_json::from_reader(f)?)
    }
}

pub fn full_adjacency(m: usize) -> Vec<Vec<bool>> {
    (0..m).map(|i| (0..m).map(|j| i != j).collect()).collect()
}

fn knn_adjacency(coords: &[[f64; 2]], k: usize) -> Vec<Vec<bool>> {
    let m = coords.len();
    let mut adj = vec![vec![false; m]; m];
    for i in 0..m {
        let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            euclid(coords[i], coords[a])
                .total_cmp(&euclid(coords[i], coords[b]))
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    adj
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Samples `miners` uniform points in the unit square; fully connected.
pub fn generate_instance(
    miners: usize,
    seed: u64,
    reputation_source: &ReputationSource,
) -> Result<MinerInstance> {
    generate_instance_with(miners, seed, reputation_source, Adjacency::FullyConnected)
}

pub fn generate_instance_with(
    miners: usize,
    seed: u64,
    reputation_source: &ReputationSource,
    adjacency: Adjacency,
) -> Result<MinerInstance> {
    if miners < 2 {
        return Err(Error::InvalidInstance(format!(
            "at least 2 miners required, got {miners}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> = (0..miners).map(|_| [rng.gen(), rng.gen()]).collect();
    let reputation = match reputation_source {
        ReputationSource::Uniform(r) => vec![*r; miners],
        ReputationSource::Provided(r) => r.clone(),
        ReputationSource::Simulated { profile, params } => {
            // Derived seed keeps log draws independent of the coordinates.
            let logs = reputation::simulate_interaction_logs(
                miners,
                profile,
                params.windows,
                seed ^ 0x5EED_0F_1065,
            )?;
            reputation::miner_reputations(&logs, params)?
        }
    };
    let adjacency = match adjacency {
        Adjacency::FullyConnected => full_adjacency(miners),
        Adjacency::KNearest { k } => knn_adjacency(&coords, k),
    };
    MinerInstance::new(coords, reputation, adjacency, seed)
}

/// Euclidean distance between two distinct miners.
pub fn distance(inst: &MinerInstance, i: usize, j: usize) -> Result<f64> {
    let m = inst.miner_count();
    if i >= m || j >= m {
        return Err(Error::Domain(format!("index out of range for {m} miners")));
    }
    if i == j {
        return Err(Error::Domain(format!("distance needs i != j, got {i} twice")));
    }
    Ok(euclid(inst.coords[i], inst.coords[j]))
}

/// Sum of consecutive hop lengths; the training cost.
pub fn route_length(inst: &MinerInstance, order: &[usize]) -> f64 {
    order
        .windows(2)
        .map(|w| euclid(inst.coords[w[0]], inst.coords[w[1]]))
        .sum()
}

/// A block propagation route with per-hop metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub order: Vec<usize>,
    pub hop_distances: Vec<f64>,
    pub hop_gamma_s: Vec<f64>,
    pub hop_aob_s: Vec<f64>,
    pub total_aob_s: f64,
    /// Sum of the visited miners' reputation scores.
    pub total_reputation: f64,
    pub route_length: f64,
    /// Set when a miner after the first has reputation at or below sigma.
    pub reputation_violation: bool,
}

impl Trajectory {
    /// Sum of pairwise reputations `R[a][b]` along the hops.
    pub fn edge_reputation_sum(&self, pairwise: &[Vec<f64>]) -> f64 {
        self.order.windows(2).map(|w| pairwise[w[0]][w[1]]).sum()
    }

    /// Total propagation time, the input to the fork probability.
    pub fn total_gamma_s(&self) -> f64 {
        self.hop_gamma_s.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, inst: &MinerInstance, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step", "miner", "x", "y", "reputation", "hop_distance", "hop_gamma_s", "hop_aob_s",
        ])?;
        for (t, &i) in self.order.iter().enumerate() {
            let hop = |v: &[f64]| {
                t.checked_sub(1)
                    .map(|h| v[h].to_string())
                    .unwrap_or_default()
            };
            w.write_record([
                t.to_string(),
                i.to_string(),
                inst.coords[i][0].to_string(),
                inst.coords[i][1].to_string(),
                inst.reputation[i].to_string(),
                hop(&self.hop_distances),
                hop(&self.hop_gamma_s),
                hop(&self.hop_aob_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks that `order` is a valid route: distinct, in range, adjacent hops.
pub fn check_order(inst: &MinerInstance, order: &[usize]) -> Result<()> {
    let m = inst.miner_count();
    let mut seen = vec![false; m];
    for &i in order {
        if i >= m {
            return Err(Error::InvalidTrajectory(format!("miner {i} out of range")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidTrajectory(format!("miner {i} visited twice")));
        }
    }
    if let Some(w) = order.windows(2).find(|w| !inst.adjacency[w[0]][w[1]]) {
        return Err(Error::InvalidTrajectory(format!(
            "miners {} and {} are not adjacent",
            w[0], w[1]
        )));
    }
    Ok(())
}

pub fn evaluate_trajectory(
    inst: &MinerInstance,
    params: &ChannelParams,
    order: &[usize],
    sigma: f64,
) -> Result<Trajectory> {
    check_order(inst, order)?;
    let mut traj = Trajectory {
        order: order.to_vec(),
        hop_distances: Vec::with_capacity(order.len().saturating_sub(1)),
        hop_gamma_s: Vec::with_capacity(order.len().saturating_sub(1)),
        hop_aob_s: Vec::with_capacity(order.len().saturating_sub(1)),
        total_aob_s: 0.0,
        total_reputation: order.iter().map(|&i| inst.reputation[i]).sum(),
        route_length: 0.0,
        reputation_violation: order.iter().skip(1).any(|&i| inst.reputation[i] <= sigma),
    };
    for w in order.windows(2) {
        let d = distance(inst, w[0], w[1])?;
        let gamma = propagation_time(params, d)?;
        let aob = aob_closed_form(AobParams {
            mu: params.getdata_rate_mu,
            gamma,
        })?;
        traj.hop_distances.push(d);
        traj.hop_gamma_s.push(gamma);
        traj.hop_aob_s.push(aob);
    }
    traj.route_length = traj.hop_distances.iter().sum();
    traj.total_aob_s = traj.hop_aob_s.iter().sum();
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_points(a: [f64; 2], b: [f64; 2]) -> MinerInstance {
        MinerInstance::from_coords(vec![a, b]).unwrap()
    }

    #[test]
    fn minimal_instance() {
        let inst = generate_instance(2, 0, &ReputationSource::Uniform(1.0)).unwrap();
        assert_eq!(inst.coords.len(), 2);
        assert!(inst
            .coords
            .iter()
            .all(|c| (0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1])));
        assert_eq!(inst.adjacency, vec![vec![false, true], vec![true, false]]);
    }

    #[test]
    fn generation_is_deterministic() {
        let src = ReputationSource::simulated(0.2);
        assert_eq!(
            generate_instance(12, 7, &src).unwrap(),
            generate_instance(12, 7, &src).unwrap()
        );
        assert_ne!(
            generate_instance(12, 7, &src).unwrap().coords,
            generate_instance(12, 8, &src).unwrap().coords
        );
    }

    #[test]
    fn larger_instance_fully_connected() {
        let inst = generate_instance(49, 1234, &ReputationSource::Uniform(1.0)).unwrap();
        assert_eq!(inst.miner_count(), 49);
        for i in 0..49 {
            for j in 0..49 {
                assert_eq!(inst.adjacency[i][j], i != j);
            }
        }
    }

    #[test]
    fn too_few_miners() {
        assert!(matches!(
            generate_instance(1, 0, &ReputationSource::Uniform(1.0)),
            Err(Error::InvalidInstance(_))
        ));
    }

    #[test]
    fn knn_adjacency_is_symmetric() {
        let inst = generate_instance_with(
            15,
            3,
            &ReputationSource::Uniform(1.0),
            Adjacency::KNearest { k: 3 },
        )
        .unwrap();
        inst.validate().unwrap();
        assert!(inst.adjacency.iter().all(|r| r.iter().filter(|&&a| a).count() >= 3));
    }

    #[test]
    fn distance_examples() {
        let inst = two_points([0.0, 0.0], [3.0, 4.0]);
        assert_relative_eq!(distance(&inst, 0, 1).unwrap(), 5.0);
        let inst = two_points([0.25, 0.25], [0.25, 0.25]);
        assert_eq!(distance(&inst, 0, 1).unwrap(), 0.0);
        let inst = two_points([0.1, 0.2], [0.4, 0.6]);
        assert_relative_eq!(distance(&inst, 0, 1).unwrap(), 0.5, epsilon = 1e-12);
        assert!(matches!(distance(&inst, 1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn unit_conversions() {
        assert_relative_eq!(dbm_to_watts(30.0), 1.0);
        assert_relative_eq!(dbm_to_watts(23.0), 0.199_526_231, epsilon = 1e-8);
        assert_relative_eq!(db_to_linear(-30.0), 1e-3);
    }

    #[test]
    fn propagation_time_at_100m() {
        // Independent evaluation: received power 0.19953 W * 1e-3 * 100^-3.38,
        // noise 10^-20.4 W/Hz * 180e3 Hz, rate = b log2(1 + snr).
        let p = ChannelParams::with_bandwidth(180e3);
        let gamma = propagation_time_meters(&p, 100.0).unwrap();
        assert!((gamma - 2.856).abs() < 0.005, "gamma = {gamma}");
        assert!((gamma - 2.86).abs() < 0.01);
        assert!(propagation_time_meters(&p, 0.0).is_err());
    }

    #[test]
    fn evaluate_two_miner_hop() {
        // Pick a distance whose propagation time is exactly 2 s at mu = 0.1.
        let mut p = ChannelParams::with_bandwidth(180e3);
        p.getdata_rate_mu = 0.1;
        let meters = bisect(|d| propagation_time_meters(&p, d).unwrap() - 2.0, 1.0, 2000.0);
        p.meters_per_unit = meters;
        let inst = two_points([0.0, 0.0], [1.0, 0.0]);
        let t = evaluate_trajectory(&inst, &p, &[0, 1], 0.5).unwrap();
        assert_relative_eq!(t.hop_gamma_s[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(t.hop_aob_s[0], 13.0, epsilon = 1e-8);
        assert_relative_eq!(t.total_aob_s, 13.0, epsilon = 1e-8);
        assert!(!t.reputation_violation);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(lo) < 0.0) == (f(mid) < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn single_miner_route() {
        let inst = generate_instance(5, 1, &ReputationSource::Uniform(1.0)).unwrap();
        let t = evaluate_trajectory(&inst, &ChannelParams::default(), &[3], 0.5).unwrap();
        assert_eq!(t.total_aob_s, 0.0);
        assert_eq!(t.route_length, 0.0);
        assert_eq!(t.total_reputation, 1.0);
    }

    #[test]
    fn invalid_orders() {
        let inst = generate_instance_with(
            6,
            2,
            &ReputationSource::Uniform(1.0),
            Adjacency::KNearest { k: 1 },
        )
        .unwrap();
        let p = ChannelParams::default();
        assert!(matches!(
            evaluate_trajectory(&inst, &p, &[0, 1, 0], 0.5),
            Err(Error::InvalidTrajectory(_))
        ));
        let (a, b) = (0..6)
            .flat_map(|a| (0..6).map(move |b| (a, b)))
            .find(|&(a, b)| a != b && !inst.adjacency[a][b])
            .unwrap();
        assert!(matches!(
            evaluate_trajectory(&inst, &p, &[a, b], 0.5),
            Err(Error::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn unstable_hop_is_reported() {
        let mut p = ChannelParams::default();
        p.getdata_rate_mu = 1.0;
        let inst = two_points([0.0, 0.0], [1.0, 1.0]);
        assert!(matches!(
            evaluate_trajectory(&inst, &p, &[0, 1], 0.5),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn violation_flag_skips_first_miner() {
        let mut inst = generate_instance(4, 5, &ReputationSource::Uniform(0.9)).unwrap();
        inst.reputation[0] = 0.1;
        let p = ChannelParams::default();
        assert!(!evaluate_trajectory(&inst, &p, &[0, 1, 2], 0.5).unwrap().reputation_violation);
        assert!(evaluate_trajectory(&inst, &p, &[1, 0, 2], 0.5).unwrap().reputation_violation);
    }

    #[test]
    fn record_roundtrip() {
        let inst = generate_instance(7, 9, &ReputationSource::simulated(0.3)).unwrap();
        let text = serde_json::to_string(&inst.to_record()).unwrap();
        assert!(text.contains("\"M\":7"));
        let back = MinerInstance::from_record(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, inst);
    }

    proptest! {
        #[test]
        fn gamma_monotone(
            d1 in 1.0f64..2000.0,
            d2 in 1.0f64..2000.0,
            b in 1e4f64..1e8,
            bits in 1e5f64..1e8,
        ) {
            let mut p = ChannelParams::with_bandwidth(b);
            p.block_size_bits = bits;
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assume!(hi - lo > 1e-6 * hi);
            prop_assert!(propagation_time_meters(&p, lo).unwrap() < propagation_time_meters(&p, hi).unwrap());
            let mut wider = p;
            wider.bandwidth_hz *= 2.0;
            prop_assert!(propagation_time_meters(&wider, d1).unwrap() < propagation_time_meters(&p, d1).unwrap());
            let mut bigger = p;
            bigger.block_size_bits *= 1.5;
            prop_assert!(propagation_time_meters(&bigger, d1).unwrap() > propagation_time_meters(&p, d1).unwrap());
        }

        #[test]
        fn aob_invariant_under_translation(seed in 0u64..500, dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
            let inst = generate_instance(8, seed, &ReputationSource::Uniform(1.0)).unwrap();
            let p = ChannelParams::with_bandwidth(22e6);
            let order: Vec<usize> = (0..6).collect();
            let a = evaluate_trajectory(&inst, &p, &order, 0.5).unwrap();
            let b = evaluate_trajectory(&inst.translated([dx, dy]), &p, &order, 0.5).unwrap();
            prop_assert!((a.total_aob_s - b.total_aob_s).abs() < 1e-9 * a.total_aob_s);
        }

        #[test]
        fn objective_is_sum_of_hops(seed in 0u64..500) {
            let inst = generate_instance(9, seed, &ReputationSource::Uniform(1.0)).unwrap();
            let p = ChannelParams::default();
            let order: Vec<usize> = (0..9).rev().collect();
            let t = evaluate_trajectory(&inst, &p, &order, 0.5).unwrap();
            let by_hop: f64 = order.windows(2).map(|w| {
                evaluate_trajectory(&inst, &p, w, 0.5).unwrap().total_aob_s
            }).sum();
            prop_assert!((t.total_aob_s - by_hop).abs() < 1e-9 * by_hop);
            prop_assert!((t.route_length - route_length(&inst, &order)).abs() < 1e-12);
        }
    }
}
