//! Attention encoder-decoder routing policy.
//!
//! The encoder projects miner features to `d_h` and runs `N` layers of
//! multi-head attention and feed-forward blocks, each wrapped in a skip
//! connection and batch normalisation. Attention only flows between adjacent
//! miners. The decoder builds a context from the graph embedding and the last
//! two selected miners, takes an 8-head glimpse over the unmasked miners and
//! scores them with a single clipped pointer head.
//!
//! All forward passes run on an [`autodiff::Tape`](crate::autodiff::Tape) so
//! the same code serves inference and training.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, BatchStats, Gradients, Mat, NormMode, PointerView, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{evaluate_trajectory, visit_count, ChannelParams, MinerInstance, Trajectory};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub clip: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Fraction of miners visited per trajectory.
    pub visit_ratio: f64,
    /// Apply the reputation mask when choosing the first miner.
    pub mask_first: bool,
    /// Append the miner's reputation to its input features.
    pub reputation_feature: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 128,
            layers: 3,
            heads: 8,
            ff_dim: 512,
            clip: 10.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            visit_ratio: crate::network::DEFAULT_VISIT_RATIO,
            mask_first: true,
            reputation_feature: false,
        }
    }
}

impl PolicyConfig {
    pub fn feature_dim(&self) -> usize {
        if self.reputation_feature {
            3
        } else {
            2
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if !(self.visit_ratio > 0.0 && self.visit_ratio <= 1.0) {
            return Err(Error::Config("visit_ratio must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("invalid batch-norm settings".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, miners: usize) -> usize {
        visit_count(miners, self.visit_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bn1_w: usize,
    bn1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    bn2_w: usize,
    bn2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    input_w: usize,
    input_b: usize,
    layers: Vec<LayerSlots>,
    ctx_wq: usize,
    glimpse_wk: usize,
    glimpse_wv: usize,
    glimpse_wo: usize,
    pointer_wq: usize,
    pointer_wk: usize,
    v1: usize,
    v2: usize,
}

fn layout_for(cfg: &PolicyConfig) -> (Layout, Vec<(String, (usize, usize))>) {
    let (d, f, ff) = (cfg.embed_dim, cfg.feature_dim(), cfg.ff_dim);
    let mut shapes = Vec::new();
    let mut add = |name: String, shape: (usize, usize)| {
        shapes.push((name, shape));
        shapes.len() - 1
    };
    let input_w = add("input.weight".into(), (d, f));
    let input_b = add("input.bias".into(), (1, d));
    let layers = (0..cfg.layers)
        .map(|r| LayerSlots {
            wq: add(format!("layer{r}.attn.wq"), (d, d)),
            wk: add(format!("layer{r}.attn.wk"), (d, d)),
            wv: add(format!("layer{r}.attn.wv"), (d, d)),
            wo: add(format!("layer{r}.attn.wo"), (d, d)),
            bn1_w: add(format!("layer{r}.bn1.weight"), (1, d)),
            bn1_b: add(format!("layer{r}.bn1.bias"), (1, d)),
            ff1_w: add(format!("layer{r}.ff1.weight"), (ff, d)),
            ff1_b: add(format!("layer{r}.ff1.bias"), (1, ff)),
            ff2_w: add(format!("layer{r}.ff2.weight"), (d, ff)),
            ff2_b: add(format!("layer{r}.ff2.bias"), (1, d)),
            bn2_w: add(format!("layer{r}.bn2.weight"), (1, d)),
            bn2_b: add(format!("layer{r}.bn2.bias"), (1, d)),
        })
        .collect();
    let layout = Layout {
        input_w,
        input_b,
        layers,
        ctx_wq: add("decoder.context.wq".into(), (d, 3 * d)),
        glimpse_wk: add("decoder.glimpse.wk".into(), (d, d)),
        glimpse_wv: add("decoder.glimpse.wv".into(), (d, d)),
        glimpse_wo: add("decoder.glimpse.wo".into(), (d, d)),
        pointer_wq: add("decoder.pointer.wq".into(), (d, d)),
        pointer_wk: add("decoder.pointer.wk".into(), (d, d)),
        v1: add("decoder.placeholder1".into(), (1, d)),
        v2: add("decoder.placeholder2".into(), (1, d)),
    };
    (layout, shapes)
}

/// Running batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        // Running variance tracks the unbiased estimate.
        let n = batch.rows as f64;
        let correction = if batch.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Metadata recorded alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub sigma: f64,
    pub visit_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub tensors: Vec<Mat>,
    pub names: Vec<String>,
    /// Two entries per encoder layer.
    pub running: Vec<RunningStats>,
    pub seed: u64,
    /// Threshold the parameters were trained under.
    pub sigma: f64,
    layout: Layout,
}

impl PolicyParams {
    /// Uniform initialisation on `(-1/sqrt(n), 1/sqrt(n))`, `n` the last dimension.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = layout_for(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes
            .iter()
            .map(|(_, (r, c))| {
                let bound = 1.0 / (*c as f64).sqrt();
                Mat::from_shape_fn((*r, *c), |_| rng.gen_range(-bound..bound))
            })
            .collect();
        Ok(PolicyParams {
            running: vec![RunningStats::new(config.embed_dim); 2 * config.layers],
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
            seed,
            sigma: crate::reputation::ReputationParams::default().sigma,
            config,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            embed_dim: self.config.embed_dim,
            layers: self.config.layers,
            heads: self.config.heads,
            sigma: self.sigma,
            visit_ratio: self.config.visit_ratio,
            seed: self.seed,
        }
    }

    /// Registers every tensor as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Per-tensor gradients, zero where a tensor was unused.
    pub fn collect_grads(&self, grads: &mut Gradients, vars: &[Var]) -> Vec<Mat> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Mat::zeros(t.dim())))
            .collect()
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        let momentum = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, momentum);
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            fingerprint: self.fingerprint(),
            config: self.config.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| TensorRecord {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
            running: self.running.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                path: path.display().to_string(),
            });
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(f)?;
        PolicyParams::from_checkpoint(file)
    }

    fn from_checkpoint(file: CheckpointFile) -> Result<Self> {
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut params = PolicyParams::init(file.config, file.fingerprint.seed)?;
        if file.tensors.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.tensors.len(),
                file.tensors.len()
            )));
        }
        for (slot, rec) in file.tensors.into_iter().enumerate() {
            let expected = params.tensors[slot].dim();
            if rec.name != params.names[slot] || (rec.shape[0], rec.shape[1]) != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {slot}: found {} {:?}, expected {} {:?}",
                    rec.name, rec.shape, params.names[slot], expected
                )));
            }
            params.tensors[slot] = Mat::from_shape_vec(expected, rec.data)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", rec.name)))?;
        }
        if file.running.len() != params.running.len()
            || file
                .running
                .iter()
                .any(|r| r.mean.len() != params.config.embed_dim || r.var.len() != params.config.embed_dim)
        {
            return Err(Error::Checkpoint("batch-norm statistics have the wrong shape".into()));
        }
        params.running = file.running;
        params.sigma = file.fingerprint.sigma;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    fingerprint: Fingerprint,
    config: PolicyConfig,
    tensors: Vec<TensorRecord>,
    running: Vec<RunningStats>,
}

/// Whether batch norm uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Running,
}

/// Encoder output living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// `(batch * M) x d_h`.
    pub nodes: Var,
    /// `batch x d_h`.
    pub graph: Var,
}

fn features(insts: &[&MinerInstance], cfg: &PolicyConfig) -> Mat {
    let f = cfg.feature_dim();
    let rows: usize = insts.iter().map(|i| i.miner_count()).sum();
    let mut out = Mat::zeros((rows, f));
    let mut r = 0;
    for inst in insts {
        for (i, c) in inst.coords.iter().enumerate() {
            out[[r, 0]] = c[0];
            out[[r, 1]] = c[1];
            if cfg.reputation_feature {
                out[[r, 2]] = inst.reputation[i];
            }
            r += 1;
        }
    }
    out
}

fn batch_miners(insts: &[&MinerInstance]) -> Result<usize> {
    let m = insts
        .first()
        .ok_or_else(|| Error::Domain("empty instance batch".into()))?
        .miner_count();
    if insts.iter().any(|i| i.miner_count() != m) {
        return Err(Error::Domain("instances in a batch must share M".into()));
    }
    Ok(m)
}

/// Multi-head attention: per-head projections packed along columns, outputs
/// combined by `wo`.
pub fn multi_head_attention(
    tape: &mut Tape,
    h_query: Var,
    h_keys: Var,
    w: [Var; 4],
    spec: AttentionSpec,
) -> Var {
    let [wq, wk, wv, wo] = w;
    let q = tape.linear(h_query, wq, None);
    let k = tape.linear(h_keys, wk, None);
    let v = tape.linear(h_keys, wv, None);
    let heads = tape.attention(q, k, v, spec);
    tape.linear(heads, wo, None)
}

/// Runs the encoder on a batch sharing the same miner count.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &[Var],
    insts: &[&MinerInstance],
    norm: NormKind,
) -> Result<(EncodedVars, Vec<BatchStats>)> {
    let m = batch_miners(insts)?;
    let cfg = &params.config;
    let lay = &params.layout;
    let x = tape.leaf(features(insts, cfg));
    let mut h = tape.linear(x, vars[lay.input_w], Some(vars[lay.input_b]));
    let allowed: Vec<bool> = insts
        .iter()
        .flat_map(|inst| inst.adjacency.iter().flatten().copied())
        .collect();
    let mut stats = Vec::new();
    let mut bn = |tape: &mut Tape, x: Var, w: usize, b: usize, slot: usize| {
        let mode = match norm {
            NormKind::Batch => NormMode::Train,
            NormKind::Running => NormMode::Frozen {
                mean: &params.running[slot].mean,
                var: &params.running[slot].var,
            },
        };
        let (y, s) = tape.batch_norm(x, vars[w], vars[b], mode, cfg.bn_eps);
        stats.extend(s);
        y
    };
    for (r, l) in lay.layers.iter().enumerate() {
        let mha = multi_head_attention(
            tape,
            h,
            h,
            [vars[l.wq], vars[l.wk], vars[l.wv], vars[l.wo]],
            AttentionSpec {
                groups: insts.len(),
                queries_per_group: m,
                keys_per_group: m,
                heads: cfg.heads,
                allowed: Some(allowed.clone()),
            },
        );
        let skip = tape.add(h, mha);
        let h1 = bn(tape, skip, l.bn1_w, l.bn1_b, 2 * r);
        let hidden = tape.linear(h1, vars[l.ff1_w], Some(vars[l.ff1_b]));
        let hidden = tape.relu(hidden);
        let ff = tape.linear(hidden, vars[l.ff2_w], Some(vars[l.ff2_b]));
        let skip = tape.add(h1, ff);
        h = bn(tape, skip, l.bn2_w, l.bn2_b, 2 * r + 1);
    }
    let graph = tape.segment_mean(h, insts.len());
    Ok((EncodedVars { nodes: h, graph }, stats))
}

/// Encoder output as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub node_embeddings: Array2<f64>,
    pub graph_embedding: Array1<f64>,
}

/// Evaluation-mode encoding of one instance.
pub fn encode(inst: &MinerInstance, params: &PolicyParams) -> Result<Encoding> {
    inst.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (enc, _) = encode_on_tape(&mut tape, params, &vars, &[inst], NormKind::Running)?;
    Ok(Encoding {
        node_embeddings: tape.value(enc.nodes).clone(),
        graph_embedding: tape.value(enc.graph).row(0).to_owned(),
    })
}

/// Eligibility under threshold `sigma`: `true` where the miner is masked.
pub fn reputation_mask(inst: &MinerInstance, sigma: f64) -> Vec<bool> {
    inst.reputation.iter().map(|&r| r <= sigma).collect()
}

/// Autoregressive decoding state for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// 1-based step index of the next selection.
    pub step_t: usize,
    pub visited_mask: Vec<bool>,
    /// `true` where a miner is excluded for low reputation.
    pub reputation_mask: Vec<bool>,
    pub first_selected: Option<usize>,
    pub last_two: Option<(usize, usize)>,
    pub log_prob_accum: f64,
    pub selected: Vec<usize>,
    /// Whether the reputation mask also constrains the first pick.
    pub mask_first: bool,
    adjacency: Vec<Vec<bool>>,
}

impl DecoderState {
    pub fn new(inst: &MinerInstance, sigma: f64, mask_first: bool) -> Self {
        let m = inst.miner_count();
        DecoderState {
            step_t: 1,
            visited_mask: vec![false; m],
            reputation_mask: reputation_mask(inst, sigma),
            first_selected: None,
            last_two: None,
            log_prob_accum: 0.0,
            selected: Vec::new(),
            mask_first,
            adjacency: inst.adjacency.clone(),
        }
    }

    /// Miners selectable at the current step.
    pub fn allowed(&self) -> Vec<bool> {
        let apply_rep = self.step_t > 1 || self.mask_first;
        let last = self.selected.last().copied();
        (0..self.visited_mask.len())
            .map(|j| {
                !self.visited_mask[j]
                    && !(apply_rep && self.reputation_mask[j])
                    && last.map_or(true, |l| self.adjacency[l][j])
            })
            .collect()
    }

    /// Records the selection of `miner` with probability `prob`.
    pub fn advance(&mut self, miner: usize, prob: f64) -> Result<()> {
        if !self.allowed().get(miner).copied().unwrap_or(false) {
            return Err(Error::InvalidTrajectory(format!(
                "miner {miner} is masked at step {}",
                self.step_t
            )));
        }
        self.visited_mask[miner] = true;
        self.first_selected.get_or_insert(miner);
        if let Some(&prev) = self.selected.last() {
            self.last_two = Some((prev, miner));
        }
        self.selected.push(miner);
        self.log_prob_accum += prob.ln();
        self.step_t += 1;
        Ok(())
    }

    /// Context rows for the two node slots: `None` means a placeholder.
    fn context_slots(&self) -> (Option<usize>, Option<usize>) {
        match self.selected.as_slice() {
            [] => (None, None),
            [a] => (None, Some(*a)),
            [.., a, b] => (Some(*a), Some(*b)),
        }
    }
}

/// Decoder keys precomputed once per episode.
#[derive(Debug, Clone, Copy)]
struct DecoderKeys {
    nodes: Var,
    graph: Var,
    glimpse_k: Var,
    glimpse_v: Var,
    pointer_k: Var,
}

fn decoder_keys(tape: &mut Tape, params: &PolicyParams, vars: &[Var], enc: EncodedVars) -> DecoderKeys {
    let lay = &params.layout;
    DecoderKeys {
        nodes: enc.nodes,
        graph: enc.graph,
        glimpse_k: tape.linear(enc.nodes, vars[lay.glimpse_wk], None),
        glimpse_v: tape.linear(enc.nodes, vars[lay.glimpse_wv], None),
        pointer_k: tape.linear(enc.nodes, vars[lay.pointer_wk], None),
    }
}

/// One decoding step for every group. `slots[g]` holds the context rows of
/// group `g` (already offset into the stacked node matrix).
fn decoder_step<F>(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &[Var],
    keys: DecoderKeys,
    step_t: usize,
    slots: &[(Option<usize>, Option<usize>)],
    allowed: Vec<bool>,
    select: F,
) -> Var
where
    F: FnOnce(&PointerView<'_>) -> Vec<usize>,
{
    let lay = &params.layout;
    let groups = slots.len();
    let m = allowed.len() / groups;
    // Step 1 uses [v1, v2]; step 2 uses [v2, h_first].
    let fill_a = if step_t == 1 { vars[lay.v1] } else { vars[lay.v2] };
    let a = tape.gather(keys.nodes, fill_a, slots.iter().map(|s| s.0).collect());
    let b = tape.gather(keys.nodes, vars[lay.v2], slots.iter().map(|s| s.1).collect());
    let ctx = tape.concat_cols(&[keys.graph, a, b]);
    let q = tape.linear(ctx, vars[lay.ctx_wq], None);
    let glimpse = tape.attention(
        q,
        keys.glimpse_k,
        keys.glimpse_v,
        AttentionSpec {
            groups,
            queries_per_group: 1,
            keys_per_group: m,
            heads: params.config.heads,
            allowed: Some(allowed.clone()),
        },
    );
    let glimpse = tape.linear(glimpse, vars[lay.glimpse_wo], None);
    let q_ptr = tape.linear(glimpse, vars[lay.pointer_wq], None);
    tape.pointer(q_ptr, keys.pointer_k, allowed, params.config.clip, select)
}

/// Probabilities and clipped logits of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Next-miner distribution for `state` given precomputed embeddings.
pub fn decode_step(state: &DecoderState, enc: &Encoding, params: &PolicyParams) -> Result<StepOutput> {
    let allowed = state.allowed();
    if !allowed.iter().any(|&a| a) {
        return Err(Error::Infeasible {
            needed: 1,
            available: 0,
        });
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let nodes = tape.leaf(enc.node_embeddings.clone());
    let graph = tape.leaf(enc.graph_embedding.clone().insert_axis(ndarray::Axis(0)));
    let keys = decoder_keys(&mut tape, params, &vars, EncodedVars { nodes, graph });
    let mut out = None;
    let first = allowed.iter().position(|&a| a).expect("checked above");
    decoder_step(
        &mut tape,
        params,
        &vars,
        keys,
        state.step_t,
        &[state.context_slots()],
        allowed,
        |view| {
            out = Some(StepOutput {
                probs: view.probs.to_vec(),
                logits: view.logits.to_vec(),
            });
            vec![first]
        },
    );
    Ok(out.expect("select called"))
}

/// How each step's miner is chosen.
pub enum DecodeMode<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
    /// Replays given orders; each must have exactly `m` entries.
    Forced(&'a [Vec<usize>]),
}

/// Decoded batch living on a tape.
#[derive(Debug, Clone)]
pub struct BatchRollout {
    pub orders: Vec<Vec<usize>>,
    /// `batch x 1` summed log-probabilities.
    pub log_prob: Var,
    /// Probability of each chosen miner, per instance and step.
    pub step_probs: Vec<Vec<f64>>,
}

fn argmax(p: &[f64]) -> usize {
    // First maximum wins, so ties go to the lowest index.
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > 0.0 {
            acc += v;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Checks that at least `m` miners pass the reputation mask.
pub fn check_feasible(inst: &MinerInstance, sigma: f64, m: usize) -> Result<()> {
    let available = inst.reputation.iter().filter(|&&r| r > sigma).count();
    if available < m {
        return Err(Error::Infeasible {
            needed: m,
            available,
        });
    }
    Ok(())
}

/// Encodes and decodes a batch sharing the same miner count.
pub fn rollout_on_tape(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &[Var],
    insts: &[&MinerInstance],
    sigma: f64,
    norm: NormKind,
    mut mode: DecodeMode<'_>,
) -> Result<(BatchRollout, Vec<BatchStats>)> {
    let m_total = batch_miners(insts)?;
    let steps = params.config.steps_for(m_total);
    for inst in insts {
        check_feasible(inst, sigma, steps)?;
    }
    if let DecodeMode::Forced(orders) = &mode {
        if orders.len() != insts.len() || orders.iter().any(|o| o.len() != steps) {
            return Err(Error::InvalidTrajectory(format!(
                "forced orders must give {steps} miners for each of {} instances",
                insts.len()
            )));
        }
    }
    let (enc, stats) = encode_on_tape(tape, params, vars, insts, norm)?;
    let keys = decoder_keys(tape, params, vars, enc);
    let mut states: Vec<DecoderState> = insts
        .iter()
        .map(|i| DecoderState::new(i, sigma, params.config.mask_first))
        .collect();
    let mut log_prob: Option<Var> = None;
    let mut step_probs = vec![Vec::with_capacity(steps); insts.len()];
    for t in 0..steps {
        let mut allowed = Vec::with_capacity(insts.len() * m_total);
        for (g, s) in states.iter().enumerate() {
            let a = s.allowed();
            if !a.iter().any(|&x| x) {
                return Err(Error::InvalidInstance(format!(
                    "instance {g}: no adjacent eligible miner after {} hops",
                    s.selected.len()
                )));
            }
            allowed.extend(a);
        }
        let slots: Vec<_> = states
            .iter()
            .enumerate()
            .map(|(g, s)| {
                let (a, b) = s.context_slots();
                (a.map(|i| g * m_total + i), b.map(|i| g * m_total + i))
            })
            .collect();
        let mut picked: Vec<(usize, f64)> = Vec::with_capacity(slots.len());
        let mut forced_err = None;
        let lp = decoder_step(tape, params, vars, keys, t + 1, &slots, allowed, |view| {
            let nk = view.keys_per_group;
            for g in 0..slots.len() {
                let p = &view.probs[g * nk..(g + 1) * nk];
                let j = match &mut mode {
                    DecodeMode::Greedy => argmax(p),
                    DecodeMode::Sample(rng) => sample_index(p, rng),
                    DecodeMode::Forced(orders) => {
                        let j = orders[g][t];
                        if j < nk && p[j] > 0.0 {
                            j
                        } else {
                            forced_err.get_or_insert(g);
                            argmax(p)
                        }
                    }
                };
                picked.push((j, p[j]));
            }
            picked.iter().map(|&(j, _)| j).collect()
        });
        if let Some(g) = forced_err {
            return Err(Error::InvalidTrajectory(format!(
                "forced order for instance {g} selects a masked miner at step {}",
                t + 1
            )));
        }
        log_prob = Some(match log_prob {
            None => lp,
            Some(acc) => tape.add(acc, lp),
        });
        for ((s, probs), &(j, p)) in states.iter_mut().zip(&mut step_probs).zip(&picked) {
            probs.push(p);
            s.advance(j, p)?;
        }
    }
    let orders = states.into_iter().map(|s| s.selected).collect();
    Ok((
        BatchRollout {
            orders,
            log_prob: log_prob.expect("at least one step"),
            step_probs,
        },
        stats,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub log_prob: f64,
    /// Probability of each chosen miner.
    pub step_probs: Vec<f64>,
}

/// Evaluation-mode rollout of one instance.
pub fn rollout(
    inst: &MinerInstance,
    params: &PolicyParams,
    channel: &ChannelParams,
    sigma: f64,
    mode: RolloutMode,
    seed: u64,
) -> Result<RolloutResult> {
    inst.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decode = match mode {
        RolloutMode::Greedy => DecodeMode::Greedy,
        RolloutMode::Sample => DecodeMode::Sample(&mut rng),
    };
    let (batch, _) = rollout_on_tape(
        &mut tape,
        params,
        &vars,
        &[inst],
        sigma,
        NormKind::Running,
        decode,
    )?;
    let order = batch.orders.into_iter().next().expect("one instance");
    Ok(RolloutResult {
        trajectory: evaluate_trajectory(inst, channel, &order, sigma)?,
        log_prob: tape.value(batch.log_prob)[[0, 0]],
        step_probs: batch.step_probs.into_iter().next().expect("one instance"),
    })
}

/// Greedy orders for many instances, decoded in chunks with running
/// batch-norm statistics.
pub fn greedy_orders(
    insts: &[MinerInstance],
    params: &PolicyParams,
    sigma: f64,
    chunk: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(insts.len());
    for part in insts.chunks(chunk.max(1)) {
        let refs: Vec<&MinerInstance> = part.iter().collect();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (batch, _) = rollout_on_tape(
            &mut tape,
            params,
            &vars,
            &refs,
            sigma,
            NormKind::Running,
            DecodeMode::Greedy,
        )?;
        out.extend(batch.orders);
    }
    Ok(out)
}
