//! REINFORCE training of the routing policy.
//!
//! Each step samples routes for a fresh batch of instances, subtracts a
//! baseline cost and follows the score-function gradient with Adam. With the
//! rollout baseline, a frozen copy of the policy decodes greedily; it is
//! replaced by the current policy at an epoch boundary only when a one-sided
//! paired t-test on a fixed held-out set says the current policy is better.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::network::{generate_instance, route_length, MinerInstance, ReputationSource};
use crate::policy::{
    encode_on_tape, greedy_orders, rollout_on_tape, DecodeMode, NormKind, PolicyConfig,
    PolicyParams,
};
use crate::reputation::{LogProfile, ReputationParams};
use crate::stats::{mean, paired_ttest_one_sided};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr * factor^epoch`.
    Decay { lr: f64, factor: f64 },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Decay { lr, factor } => lr * factor.powi(epoch as i32),
        }
    }

    /// The four schemes compared in the learning-rate ablation.
    pub fn schemes() -> [(&'static str, LrSchedule); 4] {
        [
            ("1e-3", LrSchedule::Constant { lr: 1e-3 }),
            ("1e-4", LrSchedule::Constant { lr: 1e-4 }),
            ("1e-3-decay", LrSchedule::Decay { lr: 1e-3, factor: 0.96 }),
            ("1e-4-decay", LrSchedule::Decay { lr: 1e-4, factor: 0.96 }),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineMethod {
    Rollout,
    Exponential { beta: f64 },
    Critic,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Rollout => "rollout",
            BaselineMethod::Exponential { .. } => "exponential",
            BaselineMethod::Critic => "critic",
        }
    }

    pub fn exponential() -> Self {
        BaselineMethod::Exponential { beta: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub miners: usize,
    pub lr_schedule: LrSchedule,
    pub ttest_alpha: f64,
    /// Taken from the reputation section when loaded from a config file.
    #[serde(skip)]
    pub sigma: f64,
    pub seed: u64,
    pub baseline: BaselineMethod,
    /// Share of dishonest miners in the simulated interaction logs.
    pub dishonest_fraction: f64,
    pub holdout_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Instances per chunk in inference-only rollouts.
    pub eval_chunk: usize,
    #[serde(skip)]
    pub policy: PolicyConfig,
    #[serde(skip)]
    pub reputation: ReputationParams,
    pub activity: f64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: 2500,
            batch_size: 512,
            miners: 19,
            lr_schedule: LrSchedule::Constant { lr: 1e-3 },
            ttest_alpha: 0.05,
            sigma: 0.5,
            seed: 1234,
            baseline: BaselineMethod::Rollout,
            dishonest_fraction: 0.2,
            holdout_size: 10_000,
            grad_clip: Some(1.0),
            eval_chunk: 256,
            policy: PolicyConfig::default(),
            reputation: ReputationParams::default(),
            activity: LogProfile::default().activity,
            verbose: false,
        }
    }
}

impl TrainConfig {
    /// Reduced budget that fits a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 128,
            holdout_size: 256,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, steps and batch size must be positive".into()));
        }
        if self.holdout_size < 2 {
            return Err(Error::Config("held-out set needs at least 2 instances".into()));
        }
        if !(self.ttest_alpha > 0.0 && self.ttest_alpha < 1.0) {
            return Err(Error::Config("ttest_alpha must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.dishonest_fraction) {
            return Err(Error::Config("dishonest_fraction must lie in [0, 1]".into()));
        }
        if self.lr_schedule.at(0) < 0.0 || !self.lr_schedule.at(0).is_finite() {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if let BaselineMethod::Exponential { beta } = self.baseline {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config("exponential beta must lie in [0, 1)".into()));
            }
        }
        self.policy.validate()?;
        self.reputation.validate()?;
        let steps = self.policy.steps_for(self.miners);
        let eligible = self.miners
            - ((self.dishonest_fraction * self.miners as f64).round() as usize).min(self.miners);
        if eligible < steps {
            return Err(Error::Infeasible {
                needed: steps,
                available: eligible,
            });
        }
        Ok(())
    }

    pub fn reputation_source(&self) -> ReputationSource {
        ReputationSource::Simulated {
            profile: LogProfile {
                honest_fraction: 1.0 - self.dishonest_fraction,
                activity: self.activity,
            },
            params: self.reputation.clone(),
        }
    }
}

/// SplitMix64 over a sequence of words.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const HOLDOUT_TAG: u64 = 0x484F_4C44;
const TRAIN_TAG: u64 = 0x5452_4149;

/// The fixed held-out set used for the t-test and validation curves.
pub fn holdout_instances(cfg: &TrainConfig) -> Result<Vec<MinerInstance>> {
    let src = cfg.reputation_source();
    (0..cfg.holdout_size)
        .map(|i| generate_instance(cfg.miners, derive_seed(cfg.seed, &[HOLDOUT_TAG, i as u64]), &src))
        .collect()
}

fn training_batch(cfg: &TrainConfig, epoch: usize, step: usize) -> Result<Vec<MinerInstance>> {
    let src = cfg.reputation_source();
    (0..cfg.batch_size)
        .map(|b| {
            let seed = derive_seed(cfg.seed, &[TRAIN_TAG, epoch as u64, step as u64, b as u64]);
            generate_instance(cfg.miners, seed, &src)
        })
        .collect()
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[Mat]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Mat::zeros(s.dim())).collect(),
            v: shapes.iter().map(|s| Mat::zeros(s.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Running mean `v <- beta * v + (1 - beta) * c`, seeded by the first cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialBaseline {
    pub beta: f64,
    pub value: Option<f64>,
}

impl ExponentialBaseline {
    pub fn new(beta: f64) -> Self {
        ExponentialBaseline { beta, value: None }
    }

    pub fn update(&mut self, cost: f64) -> f64 {
        let v = match self.value {
            None => cost,
            Some(v) => self.beta * v + (1.0 - self.beta) * cost,
        };
        self.value = Some(v);
        v
    }
}

/// Value network: its own encoder followed by a one-hidden-layer MLP on the
/// graph embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub encoder: PolicyParams,
    /// `[w1 (d x d), b1 (1 x d), w2 (1 x d), b2 (1 x 1)]`.
    pub head: Vec<Mat>,
}

impl Critic {
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        let encoder = PolicyParams::init(config, seed)?;
        let d = encoder.config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC817]));
        let mut uniform = |r: usize, c: usize| {
            use rand::Rng;
            let bound = 1.0 / (c as f64).sqrt();
            Mat::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
        };
        let head = vec![uniform(d, d), uniform(1, d), uniform(1, d), uniform(1, 1)];
        Ok(Critic { encoder, head })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        insts: &[&MinerInstance],
        norm: NormKind,
    ) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>, Vec<crate::autodiff::Var>, Vec<crate::autodiff::BatchStats>)> {
        let enc_vars = self.encoder.bind(tape);
        let head_vars: Vec<_> = self.head.iter().map(|h| tape.leaf(h.clone())).collect();
        let (enc, stats) = encode_on_tape(tape, &self.encoder, &enc_vars, insts, norm)?;
        let hidden = tape.linear(enc.graph, head_vars[0], Some(head_vars[1]));
        let hidden = tape.relu(hidden);
        let out = tape.linear(hidden, head_vars[2], Some(head_vars[3]));
        Ok((out, enc_vars, head_vars, stats))
    }

    /// Predicted costs with running batch-norm statistics.
    pub fn predict(&self, insts: &[MinerInstance]) -> Result<Vec<f64>> {
        let refs: Vec<&MinerInstance> = insts.iter().collect();
        let mut tape = Tape::new();
        let (out, ..) = self.forward(&mut tape, &refs, NormKind::Running)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}

struct CriticTrainer {
    critic: Critic,
    adam: Adam,
}

impl CriticTrainer {
    /// Predicts costs for the batch, then takes one MSE step toward `costs`.
    fn predict_and_fit(&mut self, insts: &[&MinerInstance], costs: &[f64], lr: f64, clip: Option<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (out, enc_vars, head_vars, stats) = self.critic.forward(&mut tape, insts, NormKind::Batch)?;
        let preds: Vec<f64> = tape.value(out).iter().copied().collect();
        if lr > 0.0 {
            let loss = tape.mean_squared_error(out, costs.to_vec());
            let mut grads = tape.backward(loss);
            let mut all = self.critic.encoder.collect_grads(&mut grads, &enc_vars);
            all.extend(
                head_vars
                    .iter()
                    .zip(&self.critic.head)
                    .map(|(v, h)| grads.take(*v).unwrap_or_else(|| Mat::zeros(h.dim()))),
            );
            clip_grads(&mut all, clip);
            let mut tensors: Vec<Mat> = std::mem::take(&mut self.critic.encoder.tensors);
            tensors.append(&mut self.critic.head);
            self.adam.step(&mut tensors, &all, lr);
            self.critic.head = tensors.split_off(self.critic.encoder.names.len());
            self.critic.encoder.tensors = tensors;
            self.critic.encoder.update_running(&stats);
        }
        Ok(preds)
    }
}

fn clip_grads(grads: &mut [Mat], clip: Option<f64>) -> f64 {
    let norm = global_norm(grads);
    if let Some(max) = clip {
        if norm > max {
            let scale = max / norm;
            grads.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Outcome of an end-of-epoch baseline comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshOutcome {
    pub candidate_mean: f64,
    pub baseline_mean: f64,
    pub p_value: f64,
    pub refreshed: bool,
}

/// Frozen greedy policy plus its costs on the held-out set.
#[derive(Debug, Clone)]
pub struct RolloutBaseline {
    pub params: PolicyParams,
    holdout_costs: Vec<f64>,
    sigma: f64,
    chunk: usize,
}

/// Greedy route lengths of `params` over `insts`.
pub fn greedy_costs(
    params: &PolicyParams,
    insts: &[MinerInstance],
    sigma: f64,
    chunk: usize,
) -> Result<Vec<f64>> {
    let orders = greedy_orders(insts, params, sigma, chunk)?;
    Ok(insts
        .iter()
        .zip(&orders)
        .map(|(inst, o)| route_length(inst, o))
        .collect())
}

impl RolloutBaseline {
    pub fn new(params: PolicyParams, holdout: &[MinerInstance], sigma: f64, chunk: usize) -> Result<Self> {
        let holdout_costs = greedy_costs(&params, holdout, sigma, chunk)?;
        Ok(RolloutBaseline {
            params,
            holdout_costs,
            sigma,
            chunk,
        })
    }

    pub fn costs(&self, insts: &[MinerInstance]) -> Result<Vec<f64>> {
        greedy_costs(&self.params, insts, self.sigma, self.chunk)
    }

    pub fn holdout_costs(&self) -> &[f64] {
        &self.holdout_costs
    }

    /// Replaces the frozen policy with `candidate` iff the one-sided paired
    /// t-test rejects at `alpha`.
    pub fn epoch_check(
        &mut self,
        candidate: &PolicyParams,
        holdout: &[MinerInstance],
        alpha: f64,
    ) -> Result<RefreshOutcome> {
        let cand = greedy_costs(candidate, holdout, self.sigma, self.chunk)?;
        Ok(self.check_costs(candidate, cand, alpha)?)
    }

    fn check_costs(&mut self, candidate: &PolicyParams, cand: Vec<f64>, alpha: f64) -> Result<RefreshOutcome> {
        let test = paired_ttest_one_sided(&cand, &self.holdout_costs)?;
        let outcome = RefreshOutcome {
            candidate_mean: mean(&cand),
            baseline_mean: mean(&self.holdout_costs),
            p_value: test.p_value,
            refreshed: test.p_value < alpha,
        };
        if outcome.refreshed {
            self.params = candidate.clone();
            self.holdout_costs = cand;
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_cost: f64,
    pub baseline_cost: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub baseline_refreshed: bool,
}

/// Per-epoch summary on the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean greedy route length of the current policy on the held-out set.
    pub validation_cost: f64,
    pub mean_train_cost: f64,
    pub p_value: Option<f64>,
    pub baseline_refreshed: bool,
}

pub fn write_log_csv(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_epochs_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub baseline_params: Option<PolicyParams>,
    pub log: Vec<TrainLogRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Mean greedy held-out cost of the policy before training.
    pub initial_validation_cost: f64,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    epochs_done: usize,
    adam: Adam,
    exponential: Option<ExponentialBaseline>,
    critic_head: Option<Vec<Mat>>,
    critic_adam: Option<Adam>,
    log: Vec<TrainLogRecord>,
    epochs: Vec<EpochRecord>,
    initial_validation_cost: f64,
}

/// Training driver. Construct, optionally seed its state, then [`run`](Trainer::run).
pub struct Trainer {
    cfg: TrainConfig,
    params: PolicyParams,
    baseline_params: Option<PolicyParams>,
    checkpoint_dir: Option<PathBuf>,
    resume: Option<ResumeState>,
    critic: Option<Critic>,
}

const POLICY_FILE: &str = "policy.json";
const BASELINE_FILE: &str = "baseline_policy.json";
const CRITIC_FILE: &str = "critic_encoder.json";
const STATE_FILE: &str = "trainer_state.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = PolicyParams::init(cfg.policy.clone(), cfg.seed)?;
        params.sigma = cfg.sigma;
        Ok(Trainer {
            cfg,
            params,
            baseline_params: None,
            checkpoint_dir: None,
            resume: None,
            critic: None,
        })
    }

    /// Starts from given policy parameters instead of a fresh init.
    pub fn with_policy(mut self, params: PolicyParams) -> Self {
        self.params = params;
        self
    }

    /// Starts the rollout baseline from `params` instead of a copy of the policy.
    pub fn with_baseline_policy(mut self, params: PolicyParams) -> Self {
        self.baseline_params = Some(params);
        self
    }

    /// Writes checkpoints and logs to `dir` after every epoch.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Continues a run from the last epoch checkpoint in `dir`.
    pub fn resume(cfg: TrainConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let mut t = Trainer::new(cfg)?.with_checkpoint_dir(dir.clone());
        t.params = PolicyParams::load_checkpoint(&dir.join(POLICY_FILE))?;
        let baseline = dir.join(BASELINE_FILE);
        if baseline.exists() {
            t.baseline_params = Some(PolicyParams::load_checkpoint(&baseline)?);
        }
        let f = std::io::BufReader::new(std::fs::File::open(dir.join(STATE_FILE))?);
        let state: ResumeState = serde_json::from_reader(f)?;
        if let (Some(head), true) = (&state.critic_head, dir.join(CRITIC_FILE).exists()) {
            t.critic = Some(Critic {
                encoder: PolicyParams::load_checkpoint(&dir.join(CRITIC_FILE))?,
                head: head.clone(),
            });
        }
        t.resume = Some(state);
        Ok(t)
    }

    pub fn run(self) -> Result<TrainOutput> {
        let Trainer {
            cfg,
            mut params,
            baseline_params,
            checkpoint_dir,
            resume,
            critic,
        } = self;
        let holdout = holdout_instances(&cfg)?;
        let chunk = cfg.eval_chunk;
        let (mut adam, mut exponential, mut log, mut epochs, start_epoch, initial_validation_cost, critic_adam) =
            match resume {
                Some(s) => (
                    s.adam,
                    s.exponential,
                    s.log,
                    s.epochs,
                    s.epochs_done,
                    s.initial_validation_cost,
                    s.critic_adam,
                ),
                None => (
                    Adam::new(&params.tensors),
                    None,
                    Vec::new(),
                    Vec::new(),
                    0,
                    mean(&greedy_costs(&params, &holdout, cfg.sigma, chunk)?),
                    None,
                ),
            };
        let mut rollout_bl = match cfg.baseline {
            BaselineMethod::Rollout => Some(RolloutBaseline::new(
                baseline_params.unwrap_or_else(|| params.clone()),
                &holdout,
                cfg.sigma,
                chunk,
            )?),
            _ => None,
        };
        if let BaselineMethod::Exponential { beta } = cfg.baseline {
            exponential.get_or_insert(ExponentialBaseline::new(beta));
        }
        let mut critic = match cfg.baseline {
            BaselineMethod::Critic => {
                let c = match critic {
                    Some(c) => c,
                    None => Critic::init(cfg.policy.clone(), derive_seed(cfg.seed, &[0xC817_1C]))?,
                };
                let mut shapes = c.encoder.tensors.clone();
                shapes.extend(c.head.iter().cloned());
                Some(CriticTrainer {
                    adam: critic_adam.unwrap_or_else(|| Adam::new(&shapes)),
                    critic: c,
                })
            }
            _ => None,
        };

        for epoch in start_epoch..cfg.epochs {
            let lr = cfg.lr_schedule.at(epoch);
            let mut epoch_costs = Vec::with_capacity(cfg.steps_per_epoch);
            for step in 0..cfg.steps_per_epoch {
                let insts = training_batch(&cfg, epoch, step)?;
                let refs: Vec<&MinerInstance> = insts.iter().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5A3B, epoch as u64, step as u64]));
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let (batch, stats) = rollout_on_tape(
                    &mut tape,
                    &params,
                    &vars,
                    &refs,
                    cfg.sigma,
                    NormKind::Batch,
                    DecodeMode::Sample(&mut rng),
                )?;
                let costs: Vec<f64> = insts
                    .iter()
                    .zip(&batch.orders)
                    .map(|(inst, o)| route_length(inst, o))
                    .collect();
                let mean_cost = mean(&costs);
                let baselines: Vec<f64> = match cfg.baseline {
                    BaselineMethod::Rollout => rollout_bl.as_ref().expect("rollout").costs(&insts)?,
                    BaselineMethod::Exponential { .. } => {
                        let v = exponential.as_mut().expect("exponential").update(mean_cost);
                        vec![v; costs.len()]
                    }
                    BaselineMethod::Critic => critic
                        .as_mut()
                        .expect("critic")
                        .predict_and_fit(&refs, &costs, lr, cfg.grad_clip)?,
                };
                let b = cfg.batch_size as f64;
                let weights: Vec<f64> = costs.iter().zip(&baselines).map(|(c, bl)| (c - bl) / b).collect();
                let loss_var = tape.weighted_sum(batch.log_prob, weights);
                let loss = tape.value(loss_var)[[0, 0]];
                let mut grads = tape.backward(loss_var);
                let mut g = params.collect_grads(&mut grads, &vars);
                let grad_norm = clip_grads(&mut g, cfg.grad_clip);
                let record = TrainLogRecord {
                    epoch,
                    step,
                    mean_cost,
                    baseline_cost: mean(&baselines),
                    loss,
                    grad_norm,
                    lr,
                    baseline_refreshed: false,
                };
                if !loss.is_finite() || !grad_norm.is_finite() {
                    log.push(record);
                    if let Some(dir) = &checkpoint_dir {
                        write_log_csv(&log, &dir.join(LOG_FILE))?;
                    }
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                log.push(record);
                // A zero learning rate freezes the whole model, running statistics included.
                if lr > 0.0 {
                    adam.step(&mut params.tensors, &g, lr);
                    params.update_running(&stats);
                }
                epoch_costs.push(mean_cost);
            }

            let mut p_value = None;
            let mut refreshed = false;
            let candidate_costs = greedy_costs(&params, &holdout, cfg.sigma, chunk)?;
            let validation_cost = mean(&candidate_costs);
            if let Some(bl) = rollout_bl.as_mut() {
                let outcome = bl.check_costs(&params, candidate_costs, cfg.ttest_alpha)?;
                p_value = Some(outcome.p_value);
                refreshed = outcome.refreshed;
                if let Some(last) = log.last_mut() {
                    last.baseline_refreshed = refreshed;
                }
            }
            let rec = EpochRecord {
                epoch,
                lr,
                validation_cost,
                mean_train_cost: mean(&epoch_costs),
                p_value,
                baseline_refreshed: refreshed,
            };
            if cfg.verbose {
                eprintln!(
                    "epoch {epoch}: train {:.4} validation {:.4} p {:?} refreshed {refreshed}",
                    rec.mean_train_cost, rec.validation_cost, p_value
                );
            }
            epochs.push(rec);

            if let Some(dir) = &checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                params.save_checkpoint(&dir.join(POLICY_FILE))?;
                params.save_checkpoint(&dir.join(format!("policy_epoch{epoch}.json")))?;
                if let Some(bl) = &rollout_bl {
                    bl.params.save_checkpoint(&dir.join(BASELINE_FILE))?;
                }
                if let Some(c) = &critic {
                    c.critic.encoder.save_checkpoint(&dir.join(CRITIC_FILE))?;
                }
                let state = ResumeState {
                    epochs_done: epoch + 1,
                    adam: adam.clone(),
                    exponential,
                    critic_head: critic.as_ref().map(|c| c.critic.head.clone()),
                    critic_adam: critic.as_ref().map(|c| c.adam.clone()),
                    log: log.clone(),
                    epochs: epochs.clone(),
                    initial_validation_cost,
                };
                let f = std::io::BufWriter::new(std::fs::File::create(dir.join(STATE_FILE))?);
                serde_json::to_writer(f, &state)?;
                write_log_csv(&log, &dir.join(LOG_FILE))?;
                write_epochs_csv(&epochs, &dir.join(EPOCHS_FILE))?;
            }
        }
        Ok(TrainOutput {
            params,
            baseline_params: rollout_bl.map(|b| b.params),
            log,
            epochs,
            initial_validation_cost,
        })
    }
}

/// Trains with `cfg` and no checkpointing.
pub fn train(cfg: TrainConfig) -> Result<TrainOutput> {
    Trainer::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 4,
            miners: 6,
            holdout_size: 8,
            policy: PolicyConfig {
                embed_dim: 16,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                ..PolicyConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_logs_each_step() {
        let out = train(tiny()).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.mean_cost >= 0.0 && r.loss.is_finite()));
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn exponential_recursion() {
        let mut e = ExponentialBaseline::new(0.8);
        assert_eq!(e.update(10.0), 10.0);
        assert_relative_eq!(e.update(20.0), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_critic_predicts_bias() {
        let mut c = Critic::init(tiny().policy, 3).unwrap();
        c.head[2].fill(0.0);
        c.head[3][[0, 0]] = 4.25;
        let insts = holdout_instances(&tiny()).unwrap();
        assert!(c.predict(&insts).unwrap().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn rollout_baseline_is_deterministic() {
        let cfg = tiny();
        let insts = holdout_instances(&cfg).unwrap();
        let p = PolicyParams::init(cfg.policy.clone(), 5).unwrap();
        let bl = RolloutBaseline::new(p, &insts, cfg.sigma, 3).unwrap();
        assert_eq!(bl.costs(&insts).unwrap(), bl.costs(&insts).unwrap());
        assert_eq!(bl.costs(&insts).unwrap(), bl.holdout_costs());
    }

    #[test]
    fn identical_candidate_never_refreshes() {
        let cfg = tiny();
        let insts = holdout_instances(&cfg).unwrap();
        let p = PolicyParams::init(cfg.policy.clone(), 5).unwrap();
        let mut bl = RolloutBaseline::new(p.clone(), &insts, cfg.sigma, 8).unwrap();
        let out = bl.epoch_check(&p, &insts, 0.05).unwrap();
        assert_eq!(out.p_value, 0.5);
        assert!(!out.refreshed);
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let cfg = TrainConfig {
            steps_per_epoch: 3,
            lr_schedule: LrSchedule::Constant { lr: 0.0 },
            ..tiny()
        };
        let init = Trainer::new(cfg.clone()).unwrap().params.clone();
        for baseline in [BaselineMethod::Rollout, BaselineMethod::exponential(), BaselineMethod::Critic] {
            let out = train(TrainConfig { baseline, ..cfg.clone() }).unwrap();
            assert_eq!(out.params, init);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Mat::from_elem((1, 2), 1.0)];
        let g = vec![Mat::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap()];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        assert_relative_eq!(p[0][[0, 0]], 0.9, epsilon = 1e-6);
        assert_relative_eq!(p[0][[0, 1]], 1.1, epsilon = 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Mat::from_elem((2, 2), 3.0)];
        let norm = clip_grads(&mut g, Some(1.0));
        assert_relative_eq!(norm, 6.0);
        assert_relative_eq!(global_norm(&g), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny()
        };
        let full = train(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Trainer::new(TrainConfig { epochs: 1, ..cfg.clone() })
            .unwrap()
            .with_checkpoint_dir(dir.path())
            .run()
            .unwrap();
        let resumed = Trainer::resume(cfg, dir.path()).unwrap().run().unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = TrainConfig {
            dishonest_fraction: 0.5,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn refresh_only_on_last_step_of_epoch() {
        let out = train(TrainConfig { epochs: 2, ..tiny() }).unwrap();
        for r in &out.log {
            if r.baseline_refreshed {
                assert_eq!(r.step, 1);
            }
        }
    }
}
