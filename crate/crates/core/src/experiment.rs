//! Experiment drivers: AoB and reputation sweeps, trajectory renders,
//! training ablations and the AoB oracle check.
//!
//! Every CSV row carries the fingerprint columns `seed`, `sigma`, `mu`,
//! `bandwidth_hz` and `checkpoint_hash` so results can be traced back to the
//! configuration and weights that produced them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aob::{aob_closed_form, aob_mm1_reference, estimate_aob, simulate_aob, simulate_aob_traced, AobParams};
use crate::baselines::{greedy_order, gossip_order, BaselineConfig, BaselineKind};
use crate::config::{file_hash, Config};
use crate::error::{Error, Result};
use crate::network::{
    evaluate_trajectory, generate_instance, ChannelConfig, MinerInstance, ReputationSource, Trajectory,
};
use crate::policy::{greedy_orders, PolicyParams};
use crate::reputation::{LogProfile, ReputationParams};
use crate::stats::mean;
use crate::trainer::{derive_seed, BaselineMethod, EpochRecord, LrSchedule, TrainConfig, Trainer};

/// The six compared routing mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "gat")]
    Gat,
    #[serde(rename = "gat+rep")]
    GatRep,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "greedy+rep")]
    GreedyRep,
    #[serde(rename = "gossip")]
    Gossip,
    #[serde(rename = "gossip+rep")]
    GossipRep,
}

impl Mechanism {
    pub const ALL: [Mechanism; 6] = [
        Mechanism::Gat,
        Mechanism::GatRep,
        Mechanism::Greedy,
        Mechanism::GreedyRep,
        Mechanism::Gossip,
        Mechanism::GossipRep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Gat => "gat",
            Mechanism::GatRep => "gat+rep",
            Mechanism::Greedy => "greedy",
            Mechanism::GreedyRep => "greedy+rep",
            Mechanism::Gossip => "gossip",
            Mechanism::GossipRep => "gossip+rep",
        }
    }

    pub fn masked(self) -> bool {
        matches!(self, Mechanism::GatRep | Mechanism::GreedyRep | Mechanism::GossipRep)
    }

    pub fn uses_policy(self) -> bool {
        matches!(self, Mechanism::Gat | Mechanism::GatRep)
    }

    /// The same mechanism with the mask toggled.
    pub fn counterpart(self) -> Mechanism {
        match self {
            Mechanism::Gat => Mechanism::GatRep,
            Mechanism::GatRep => Mechanism::Gat,
            Mechanism::Greedy => Mechanism::GreedyRep,
            Mechanism::GreedyRep => Mechanism::Greedy,
            Mechanism::Gossip => Mechanism::GossipRep,
            Mechanism::GossipRep => Mechanism::Gossip,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub miner_counts: Vec<usize>,
    pub bandwidths_hz: Vec<f64>,
    pub mechanisms: Vec<Mechanism>,
    pub repetitions: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dishonest_fraction: f64,
    /// Train a policy when the checkpoint is missing instead of failing.
    pub train_on_demand: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "desk".into(),
            miner_counts: vec![9, 19, 29, 39, 49],
            bandwidths_hz: vec![180e3, 22e6, 100e6],
            mechanisms: Mechanism::ALL.to_vec(),
            repetitions: 100,
            seed: 1234,
            output_dir: PathBuf::from("out"),
            dishonest_fraction: 0.2,
            train_on_demand: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.miner_counts.is_empty() || self.bandwidths_hz.is_empty() || self.mechanisms.is_empty() {
            return Err(Error::Config("experiment lists must be non-empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if let Some(&m) = self.miner_counts.iter().find(|&&m| m < 2) {
            return Err(Error::InvalidInstance(format!(
                "experiments need at least 2 miners, got {m}"
            )));
        }
        if self.bandwidths_hz.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("bandwidths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dishonest_fraction) {
            return Err(Error::Config("dishonest_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn needs_policy(&self) -> bool {
        self.mechanisms.iter().any(|m| m.uses_policy())
    }
}

/// Everything an experiment needs besides its spec.
#[derive(Debug, Clone)]
pub struct Environment {
    pub channel: ChannelConfig,
    pub reputation: ReputationParams,
    pub policy: Option<PolicyParams>,
    /// Short hash of the checkpoint file, `"none"` without a policy.
    pub checkpoint_hash: String,
}

impl Environment {
    pub fn new(channel: ChannelConfig, reputation: ReputationParams) -> Self {
        Environment {
            channel,
            reputation,
            policy: None,
            checkpoint_hash: "none".into(),
        }
    }

    pub fn with_policy(mut self, policy: PolicyParams, checkpoint_hash: impl Into<String>) -> Self {
        self.policy = Some(policy);
        self.checkpoint_hash = checkpoint_hash.into();
        self
    }

    /// Builds the environment for `cfg`, loading `checkpoint` when the
    /// experiment uses the policy. With `train_on_demand`, a missing
    /// checkpoint is trained and written first.
    pub fn prepare(cfg: &Config, checkpoint: Option<&Path>) -> Result<Self> {
        let env = Environment::new(cfg.channel, cfg.reputation);
        if !cfg.experiment.needs_policy() {
            return Ok(env);
        }
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| {
            cfg.experiment.output_dir.join("train").join("policy.json")
        });
        if !path.exists() && cfg.experiment.train_on_demand {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let out = Trainer::new(cfg.train_config())?
                .with_checkpoint_dir(&dir)
                .run()?;
            out.params.save_checkpoint(&path)?;
        }
        let policy = PolicyParams::load_checkpoint(&path)?;
        Ok(env.with_policy(policy, file_hash(&path)?))
    }

    fn sigma(&self) -> f64 {
        self.reputation.sigma
    }

    fn policy(&self) -> Result<&PolicyParams> {
        self.policy.as_ref().ok_or_else(|| Error::MissingCheckpoint {
            path: "policy.json".into(),
        })
    }
}

/// Fingerprint columns shared by every CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub sigma: f64,
    pub mu: f64,
    pub bandwidth_hz: f64,
    pub checkpoint_hash: String,
}

fn fingerprint(spec: &ExperimentSpec, env: &Environment, bandwidth_hz: f64) -> Fingerprint {
    Fingerprint {
        seed: spec.seed,
        sigma: env.sigma(),
        mu: env.channel.getdata_rate_mu,
        bandwidth_hz,
        checkpoint_hash: env.checkpoint_hash.clone(),
    }
}

/// The `rep`-th evaluation instance with `miners` miners.
pub fn experiment_instance(
    spec: &ExperimentSpec,
    reputation: &ReputationParams,
    miners: usize,
    rep: usize,
) -> Result<MinerInstance> {
    let src = ReputationSource::Simulated {
        profile: LogProfile {
            honest_fraction: 1.0 - spec.dishonest_fraction,
            ..LogProfile::default()
        },
        params: *reputation,
    };
    generate_instance(miners, derive_seed(spec.seed, &[0xE7, miners as u64, rep as u64]), &src)
}

/// Routes of `mech` over `insts`; gossip seeds derive from `seed`.
pub fn mechanism_orders(
    mech: Mechanism,
    insts: &[MinerInstance],
    env: &Environment,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let sigma = env.sigma();
    if mech.uses_policy() {
        // Unmasked decoding: no reputation passes below this threshold.
        let threshold = if mech.masked() { sigma } else { f64::NEG_INFINITY };
        return greedy_orders(insts, env.policy()?, threshold, 256);
    }
    insts
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let kind = match mech {
                Mechanism::Greedy | Mechanism::GreedyRep => BaselineKind::Greedy,
                _ => BaselineKind::Gossip,
            };
            let cfg = BaselineConfig::new(kind, mech.masked(), sigma, derive_seed(seed, &[0x6055, i as u64]));
            match kind {
                BaselineKind::Greedy => greedy_order(inst, &cfg),
                BaselineKind::Gossip => gossip_order(inst, &cfg),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub miners: usize,
    pub mechanism: Mechanism,
    pub repetition: usize,
    pub total_aob_s: f64,
    pub route_length: f64,
    pub total_reputation: f64,
    pub violation: bool,
    #[serde(flatten)]
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub miners: usize,
    pub mechanism: Mechanism,
    pub mean_total_aob_s: f64,
    pub mean_route_length: f64,
    pub mean_total_reputation: f64,
    pub instances: usize,
    #[serde(flatten)]
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    /// Per-instance values of one cell, ordered by repetition.
    pub fn values<F: Fn(&SweepRow) -> f64>(
        &self,
        miners: usize,
        mech: Mechanism,
        bandwidth_hz: f64,
        f: F,
    ) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.miners == miners && r.mechanism == mech && r.fingerprint.bandwidth_hz == bandwidth_hz)
            .map(f)
            .collect()
    }

    pub fn summary_for(&self, miners: usize, mech: Mechanism, bandwidth_hz: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.miners == miners && r.mechanism == mech && r.fingerprint.bandwidth_hz == bandwidth_hz)
    }
}

fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, Mechanism, u64)> = Vec::new();
    for r in rows {
        let k = (r.miners, r.mechanism, r.fingerprint.bandwidth_hz.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(m, mech, bw)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.miners == m && r.mechanism == mech && r.fingerprint.bandwidth_hz.to_bits() == bw)
                .collect();
            let avg = |f: fn(&SweepRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / cell.len() as f64;
            SummaryRow {
                miners: m,
                mechanism: mech,
                mean_total_aob_s: avg(|r| r.total_aob_s),
                mean_route_length: avg(|r| r.route_length),
                mean_total_reputation: avg(|r| r.total_reputation),
                instances: cell.len(),
                fingerprint: cell[0].fingerprint.clone(),
            }
        })
        .collect()
}

fn sweep(spec: &ExperimentSpec, env: &Environment, bandwidths: &[f64]) -> Result<SweepResult> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &m in &spec.miner_counts {
        let insts = (0..spec.repetitions)
            .map(|rep| experiment_instance(spec, &env.reputation, m, rep))
            .collect::<Result<Vec<_>>>()?;
        for &mech in &spec.mechanisms {
            let orders = mechanism_orders(mech, &insts, env, derive_seed(spec.seed, &[m as u64]))?;
            for &bw in bandwidths {
                let channel = ChannelConfig {
                    bandwidth_hz: bw,
                    ..env.channel
                }
                .to_params()?;
                for (rep, (inst, order)) in insts.iter().zip(&orders).enumerate() {
                    let t = evaluate_trajectory(inst, &channel, order, env.sigma())?;
                    rows.push(SweepRow {
                        miners: m,
                        mechanism: mech,
                        repetition: rep,
                        total_aob_s: t.total_aob_s,
                        route_length: t.route_length,
                        total_reputation: t.total_reputation,
                        violation: t.reputation_violation,
                        fingerprint: fingerprint(spec, env, bw),
                    });
                }
            }
        }
    }
    let summary = summarize(&rows);
    Ok(SweepResult { rows, summary })
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // Rows go through JSON objects so flattened fields become columns.
    let mut w = csv::Writer::from_path(path)?;
    for (i, r) in rows.iter().enumerate() {
        let serde_json::Value::Object(obj) = serde_json::to_value(r)? else {
            return Err(Error::Domain("CSV rows must serialize to objects".into()));
        };
        if i == 0 {
            w.write_record(obj.keys())?;
        }
        w.write_record(obj.values().map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Null => String::new(),
            other => other.to_string(),
        }))?;
    }
    w.flush()?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn mechanism_color(m: Mechanism) -> RGBColor {
    match m {
        Mechanism::Gat => RGBColor(31, 119, 180),
        Mechanism::GatRep => RGBColor(214, 39, 40),
        Mechanism::Greedy => RGBColor(44, 160, 44),
        Mechanism::GreedyRep => RGBColor(148, 103, 189),
        Mechanism::Gossip => RGBColor(140, 86, 75),
        Mechanism::GossipRep => RGBColor(255, 127, 14),
    }
}

type Series = Vec<(String, RGBColor, Vec<(f64, f64)>)>;

fn bounds(series: &[&Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.iter().flat_map(|(_, _, p)| p.iter()));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: f64, b: f64| {
        let d = if b > a { (b - a) * 0.05 } else { 0.5 };
        (a - d, b + d)
    };
    (pad(x0, x1), pad(y0, y1))
}

/// Line plot with one panel per entry of `panels`.
fn line_panels(path: &Path, panels: &[(String, Series)], x_desc: &str, y_desc: &str) -> Result<()> {
    let mut svg = String::new();
    {
        let width = 520 * panels.len() as u32;
        let root = SVGBackend::with_string(&mut svg, (width, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let areas = root.split_evenly((1, panels.len()));
        for (area, (title, series)) in areas.iter().zip(panels) {
            let ((x0, x1), (y0, y1)) = bounds(&[series]);
            let mut chart = ChartBuilder::on(area)
                .caption(title, ("sans-serif", 18))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(56)
                .build_cartesian_2d(x0..x1, y0..y1)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc(x_desc)
                .y_desc(y_desc)
                .draw()
                .map_err(plot_err)?;
            for (label, color, pts) in series {
                let c = *color;
                chart
                    .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
                chart
                    .draw_series(PointSeries::of_element(pts.iter().copied(), 3, c.filled(), &|p, s, st| {
                        Circle::new(p, s, st)
                    }))
                    .map_err(plot_err)?;
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn mechanism_series<F: Fn(&SummaryRow) -> f64>(res: &SweepResult, spec: &ExperimentSpec, bw: f64, f: F) -> Series {
    spec.mechanisms
        .iter()
        .map(|&mech| {
            let pts = spec
                .miner_counts
                .iter()
                .filter_map(|&m| res.summary_for(m, mech, bw).map(|r| (m as f64, f(r))))
                .collect();
            (mech.name().to_string(), mechanism_color(mech), pts)
        })
        .collect()
}

/// Overall AoB per (M, bandwidth, mechanism). Writes `aob_sweep.csv`,
/// `aob_summary.csv` and `aob_sweep.svg` under the output directory.
pub fn run_aob_sweep(spec: &ExperimentSpec, env: &Environment) -> Result<SweepResult> {
    let res = sweep(spec, env, &spec.bandwidths_hz)?;
    let dir = &spec.output_dir;
    write_csv(&res.rows, &dir.join("aob_sweep.csv"))?;
    write_csv(&res.summary, &dir.join("aob_summary.csv"))?;
    let panels: Vec<(String, Series)> = spec
        .bandwidths_hz
        .iter()
        .map(|&bw| {
            (
                format!("b = {} kHz", bw / 1e3),
                mechanism_series(&res, spec, bw, |r| r.mean_total_aob_s),
            )
        })
        .collect();
    line_panels(&dir.join("aob_sweep.svg"), &panels, "miners M", "overall AoB (s)")?;
    Ok(res)
}

/// Total trajectory reputation per (M, mechanism). Writes
/// `reputation_sweep.csv`, `reputation_summary.csv` and `reputation_sweep.svg`.
pub fn run_reputation_sweep(spec: &ExperimentSpec, env: &Environment) -> Result<SweepResult> {
    let bw = env.channel.bandwidth_hz;
    let res = sweep(spec, env, &[bw])?;
    let dir = &spec.output_dir;
    write_csv(&res.rows, &dir.join("reputation_sweep.csv"))?;
    write_csv(&res.summary, &dir.join("reputation_summary.csv"))?;
    let panels = vec![(
        "total trajectory reputation".to_string(),
        mechanism_series(&res, spec, bw, |r| r.mean_total_reputation),
    )];
    line_panels(&dir.join("reputation_sweep.svg"), &panels, "miners M", "total reputation")?;
    Ok(res)
}

/// Draws miners (yellow at or below `sigma`, green above) and the route as
/// blue arrows; writes `<out_path>` as SVG and a sidecar CSV next to it.
pub fn render_trajectory(
    inst: &MinerInstance,
    traj: &Trajectory,
    sigma: f64,
    out_path: &Path,
) -> Result<PathBuf> {
    let low = RGBColor(230, 190, 0);
    let high = RGBColor(40, 160, 60);
    let arrow = RGBColor(30, 80, 220);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (600, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("M = {}, route length {:.3}", inst.miner_count(), traj.route_length),
                ("sans-serif", 18),
            )
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(-0.02f64..1.02, -0.02f64..1.02)
            .map_err(plot_err)?;
        chart.configure_mesh().disable_mesh().draw().map_err(plot_err)?;
        for w in traj.order.windows(2) {
            let (a, b) = (inst.coords[w[0]], inst.coords[w[1]]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt().max(1e-12);
            let (ux, uy) = (dx / len, dy / len);
            // Stop short of the target marker, then add a head.
            let tip = (b[0] - ux * 0.012, b[1] - uy * 0.012);
            let head = 0.022;
            let left = (tip.0 - head * (ux - 0.5 * uy), tip.1 - head * (uy + 0.5 * ux));
            let right = (tip.0 - head * (ux + 0.5 * uy), tip.1 - head * (uy - 0.5 * ux));
            chart
                .draw_series(std::iter::once(PathElement::new(
                    vec![(a[0], a[1]), tip],
                    arrow.stroke_width(2),
                )))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Polygon::new(vec![tip, left, right], arrow.filled())))
                .map_err(plot_err)?;
        }
        chart
            .draw_series(inst.coords.iter().zip(&inst.reputation).map(|(c, &r)| {
                let color = if r <= sigma { low } else { high };
                Circle::new((c[0], c[1]), 5, color.filled())
            }))
            .map_err(plot_err)?;
        if let Some(&first) = traj.order.first() {
            let c = inst.coords[first];
            chart
                .draw_series(std::iter::once(Circle::new((c[0], c[1]), 8, arrow.stroke_width(2))))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_path, svg)?;
    let csv_path = out_path.with_extension("csv");
    traj.write_csv(inst, std::fs::File::create(&csv_path)?)?;
    Ok(csv_path)
}

/// One curve of a training ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `lr` or `baseline`.
    pub study: String,
    pub label: String,
    pub run_seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub validation_cost: f64,
    pub mean_train_cost: f64,
    pub baseline_refreshed: bool,
    #[serde(flatten)]
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    pub lr_schemes: Vec<(String, LrSchedule)>,
    pub baselines: Vec<BaselineMethod>,
    /// Adds a `lr=0` control curve per seed.
    pub zero_lr_control: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            seeds: vec![1234, 1000],
            lr_schemes: LrSchedule::schemes()
                .into_iter()
                .map(|(n, s)| (n.to_string(), s))
                .collect(),
            baselines: vec![
                BaselineMethod::Rollout,
                BaselineMethod::exponential(),
                BaselineMethod::Critic,
            ],
            zero_lr_control: true,
        }
    }
}

/// Validation-cost curves for each learning-rate scheme and baseline, per
/// seed. Writes `ablation.csv` and `ablation.svg` under `output_dir`.
pub fn run_training_ablation(
    train: &TrainConfig,
    ablation: &AblationSpec,
    env: &Environment,
    output_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut runs: Vec<(String, String, TrainConfig)> = Vec::new();
    for &seed in &ablation.seeds {
        for (name, sched) in &ablation.lr_schemes {
            runs.push((
                "lr".into(),
                name.clone(),
                TrainConfig {
                    seed,
                    lr_schedule: *sched,
                    baseline: BaselineMethod::Rollout,
                    ..train.clone()
                },
            ));
        }
        if ablation.zero_lr_control {
            runs.push((
                "lr".into(),
                "0".into(),
                TrainConfig {
                    seed,
                    lr_schedule: LrSchedule::Constant { lr: 0.0 },
                    ..train.clone()
                },
            ));
        }
        for &b in &ablation.baselines {
            runs.push((
                "baseline".into(),
                b.name().into(),
                TrainConfig {
                    seed,
                    baseline: b,
                    ..train.clone()
                },
            ));
        }
    }
    let mut rows = Vec::new();
    let spec_seed = train.seed;
    for (study, label, cfg) in runs {
        let out = Trainer::new(cfg.clone())?.run()?;
        let initial = EpochRecord {
            epoch: 0,
            lr: cfg.lr_schedule.at(0),
            validation_cost: out.initial_validation_cost,
            mean_train_cost: f64::NAN,
            p_value: None,
            baseline_refreshed: false,
        };
        // Epoch e of the curve is the state after e epochs of training.
        let points = std::iter::once(initial).chain(out.epochs.into_iter().map(|e| EpochRecord {
            epoch: e.epoch + 1,
            ..e
        }));
        for e in points {
            rows.push(AblationRow {
                study: study.clone(),
                label: label.clone(),
                run_seed: cfg.seed,
                epoch: e.epoch,
                lr: e.lr,
                validation_cost: e.validation_cost,
                mean_train_cost: e.mean_train_cost,
                baseline_refreshed: e.baseline_refreshed,
                fingerprint: Fingerprint {
                    seed: spec_seed,
                    sigma: cfg.sigma,
                    mu: env.channel.getdata_rate_mu,
                    bandwidth_hz: env.channel.bandwidth_hz,
                    checkpoint_hash: "none".into(),
                },
            });
        }
    }
    write_csv(&rows, &output_dir.join("ablation.csv"))?;
    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(214, 39, 40),
        RGBColor(44, 160, 44),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(255, 127, 14),
        RGBColor(127, 127, 127),
    ];
    let panels: Vec<(String, Series)> = ["lr", "baseline"]
        .iter()
        .map(|&study| {
            let mut keys: Vec<(String, u64)> = Vec::new();
            for r in rows.iter().filter(|r| r.study == study) {
                let k = (r.label.clone(), r.run_seed);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let series = keys
                .iter()
                .enumerate()
                .map(|(i, (label, seed))| {
                    let pts = rows
                        .iter()
                        .filter(|r| r.study == study && &r.label == label && r.run_seed == *seed)
                        .map(|r| (r.epoch as f64, r.validation_cost))
                        .collect();
                    (format!("{label} (seed {seed})"), palette[i % palette.len()], pts)
                })
                .collect();
            (format!("{study} study"), series)
        })
        .filter(|(_, s): &(String, Series)| !s.is_empty())
        .collect();
    if !panels.is_empty() {
        line_panels(&output_dir.join("ablation.svg"), &panels, "epoch", "validation route length")?;
    }
    Ok(rows)
}

/// Settings of the AoB oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AobValidationSpec {
    pub mu: f64,
    pub loads: Vec<f64>,
    pub arrivals: usize,
    pub batches: usize,
    pub seeds: Vec<u64>,
    /// Arrivals of the long reference run per load.
    pub converged_arrivals: usize,
    /// Allowed relative error of the mean and relative CI half-width, both
    /// measured against the converged value.
    pub tolerance: f64,
}

impl Default for AobValidationSpec {
    fn default() -> Self {
        AobValidationSpec {
            mu: 0.05,
            loads: vec![0.1, 0.3, 0.5, 0.8],
            arrivals: 1_000_000,
            batches: 20,
            seeds: vec![1, 2, 3],
            converged_arrivals: 10_000_000,
            tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AobValidationRow {
    pub mu: f64,
    pub gamma: f64,
    pub load: f64,
    pub run_seed: u64,
    pub des_mean: f64,
    pub des_half_width_95: f64,
    pub converged: f64,
    /// Mean and half-width both within tolerance of the converged value.
    pub within_tolerance: bool,
    /// Stricter: both CI ends within tolerance of the converged value.
    pub ci_ends_within_tolerance: bool,
    pub closed_form: f64,
    pub mm1_reference: f64,
    pub rel_gap_closed_form: f64,
    pub rel_gap_mm1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AobValidationReport {
    pub rows: Vec<AobValidationRow>,
    pub all_within_tolerance: bool,
    /// `"mm1"` or `"closed_form"`: the form the simulation agrees with.
    pub des_matches: String,
    pub max_rel_gap_closed_form: f64,
    pub max_rel_gap_mm1: f64,
}

/// Compares the discrete-event simulation with both closed forms. Writes
/// `aob_validation.csv`, `aob_validation.json` and a sample sawtooth trace.
pub fn validate_aob(spec: &AobValidationSpec, output_dir: Option<&Path>) -> Result<AobValidationReport> {
    let mut rows = Vec::new();
    for &load in &spec.loads {
        let p = AobParams::new(spec.mu, load / spec.mu)?;
        let converged = simulate_aob(p, spec.converged_arrivals, derive_seed(0xC0DE, &[load.to_bits()]))?.mean_age;
        let closed = aob_closed_form(p)?;
        let mm1 = aob_mm1_reference(p)?;
        for &seed in &spec.seeds {
            let est = estimate_aob(p, spec.arrivals, spec.batches, seed)?;
            let lo = est.mean_age - est.half_width_95;
            let hi = est.mean_age + est.half_width_95;
            let tol = spec.tolerance * converged;
            rows.push(AobValidationRow {
                mu: spec.mu,
                gamma: p.gamma,
                load,
                run_seed: seed,
                des_mean: est.mean_age,
                des_half_width_95: est.half_width_95,
                converged,
                within_tolerance: (est.mean_age - converged).abs() <= tol && est.half_width_95 <= tol,
                ci_ends_within_tolerance: (lo - converged).abs() <= tol && (hi - converged).abs() <= tol,
                closed_form: closed,
                mm1_reference: mm1,
                rel_gap_closed_form: (est.mean_age - closed).abs() / closed,
                rel_gap_mm1: (est.mean_age - mm1).abs() / mm1,
            });
        }
    }
    let max_gap = |f: fn(&AobValidationRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let max_rel_gap_closed_form = max_gap(|r| r.rel_gap_closed_form);
    let max_rel_gap_mm1 = max_gap(|r| r.rel_gap_mm1);
    let report = AobValidationReport {
        all_within_tolerance: rows.iter().all(|r| r.within_tolerance),
        des_matches: if max_rel_gap_mm1 < max_rel_gap_closed_form {
            "mm1".into()
        } else {
            "closed_form".into()
        },
        max_rel_gap_closed_form,
        max_rel_gap_mm1,
        rows,
    };
    if let Some(dir) = output_dir {
        write_csv(&report.rows, &dir.join("aob_validation.csv"))?;
        std::fs::write(
            dir.join("aob_validation.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        let p = AobParams::new(spec.mu, 0.5 / spec.mu)?;
        simulate_aob_traced(p, 200, 7, 200)?.trace.save_csv(&dir.join("aob_trace.csv"))?;
    }
    Ok(report)
}

/// Mean of a column over rows.
pub fn column_mean<T, F: Fn(&T) -> f64>(rows: &[T], f: F) -> f64 {
    mean(&rows.iter().map(f).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn small_spec(dir: &Path) -> ExperimentSpec {
        ExperimentSpec {
            miner_counts: vec![9, 12],
            bandwidths_hz: vec![180e3, 22e6, 100e6],
            repetitions: 3,
            output_dir: dir.to_path_buf(),
            ..ExperimentSpec::default()
        }
    }

    fn small_env() -> Environment {
        let policy = PolicyParams::init(
            PolicyConfig {
                embed_dim: 16,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                ..PolicyConfig::default()
            },
            1,
        )
        .unwrap();
        Environment::new(ChannelConfig::default(), ReputationParams::default()).with_policy(policy, "test")
    }

    #[test]
    fn mechanism_names_roundtrip() {
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
            assert_eq!(m.counterpart().counterpart(), m);
            assert_ne!(m.masked(), m.counterpart().masked());
        }
        assert!("flood".parse::<Mechanism>().is_err());
    }

    #[test]
    fn aob_sweep_orders_bandwidths_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(dir.path());
        let res = run_aob_sweep(&spec, &small_env()).unwrap();
        assert_eq!(res.rows.len(), 2 * 6 * 3 * 3);
        for &m in &spec.miner_counts {
            for mech in Mechanism::ALL {
                let a = res.values(m, mech, 180e3, |r| r.total_aob_s);
                let b = res.values(m, mech, 22e6, |r| r.total_aob_s);
                let c = res.values(m, mech, 100e6, |r| r.total_aob_s);
                for i in 0..a.len() {
                    assert!(a[i] > b[i] && b[i] > c[i]);
                }
            }
        }
        for f in ["aob_sweep.csv", "aob_summary.csv", "aob_sweep.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("aob_sweep.csv")).unwrap();
        let header = text.lines().next().unwrap();
        for col in ["seed", "sigma", "mu", "bandwidth_hz", "checkpoint_hash"] {
            assert!(header.split(',').any(|h| h == col), "{col} missing from {header}");
        }
    }

    #[test]
    fn sweep_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_reputation_sweep(&small_spec(d1.path()), &small_env()).unwrap();
        run_reputation_sweep(&small_spec(d2.path()), &small_env()).unwrap();
        for f in ["reputation_sweep.csv", "reputation_sweep.svg"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn masked_mechanisms_never_violate() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_reputation_sweep(&small_spec(dir.path()), &small_env()).unwrap();
        assert!(res.rows.iter().filter(|r| r.mechanism.masked()).all(|r| !r.violation));
    }

    #[test]
    fn degenerate_miner_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            miner_counts: vec![1],
            ..small_spec(dir.path())
        };
        assert!(matches!(
            run_reputation_sweep(&spec, &small_env()),
            Err(Error::InvalidInstance(_))
        ));
    }

    #[test]
    fn missing_checkpoint_names_train_command() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config {
            experiment: small_spec(dir.path()),
            ..Config::default()
        };
        let err = Environment::prepare(&cfg, Some(&dir.path().join("nope.json"))).unwrap_err();
        assert!(err.to_string().contains("blockprop train"), "{err}");
    }

    #[test]
    fn render_outputs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let env = small_env();
        let spec = small_spec(dir.path());
        let inst = experiment_instance(&spec, &env.reputation, 9, 0).unwrap();
        let order = &mechanism_orders(Mechanism::GatRep, std::slice::from_ref(&inst), &env, 0).unwrap()[0];
        let traj = evaluate_trajectory(&inst, &ChannelConfig::default().to_params().unwrap(), order, 0.5).unwrap();
        assert_eq!(traj.order.len(), 6);
        assert!(!traj.reputation_violation);
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        render_trajectory(&inst, &traj, 0.5, &a).unwrap();
        render_trajectory(&inst, &traj, 0.5, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let csv = std::fs::read_to_string(a.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    #[test]
    fn small_aob_validation_prefers_mm1() {
        let spec = AobValidationSpec {
            loads: vec![0.5],
            arrivals: 200_000,
            converged_arrivals: 1_000_000,
            seeds: vec![1],
            ..AobValidationSpec::default()
        };
        let report = validate_aob(&spec, None).unwrap();
        assert_eq!(report.des_matches, "mm1");
    }
}
