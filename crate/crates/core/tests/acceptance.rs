//! Acceptance suite. Runs every criterion in order, prints one
//! `criterion N: PASS|FAIL ...` line each to stderr, then fails if any failed.
//!
//! Criterion 6 trains the full-size policy at desk scale (about 17 minutes on
//! one core); criteria 7 and 9 reuse that policy.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockprop::aob::{fork_probability, sample_exp};
use blockprop::autodiff::Tape;
use blockprop::baselines::{greedy_order, gossip_order, BaselineConfig, BaselineKind};
use blockprop::experiment::{
    run_aob_sweep, validate_aob, AobValidationRow, AobValidationSpec, Environment, ExperimentSpec, Mechanism,
};
use blockprop::network::{
    generate_instance, route_length, ChannelConfig, MinerInstance, ReputationSource,
};
use blockprop::policy::{rollout_on_tape, DecodeMode, NormKind, PolicyConfig, PolicyParams};
use blockprop::policy::greedy_orders;
use blockprop::reputation::{
    fuse_final_opinion, local_opinion, recommended_opinion, InteractionWindow, OpinionTuple,
    Recommender, ReputationParams,
};
use blockprop::stats::{mean, paired_ttest_one_sided};
use blockprop::trainer::{derive_seed, LrSchedule, TrainConfig, Trainer};

// Pinned tolerances and sizes.
const C1_LOGS: usize = 100_000;
const C1_SUM_TOL: f64 = 1e-9;
const C1_MAX_SECS: f64 = 60.0;
const C2_REL_TOL: f64 = 0.02;
const C2_MAX_SECS: f64 = 300.0;
const C3_DRAWS: usize = 1_000_000;
const C3_ABS_TOL: f64 = 0.005;
const C3_MAX_SECS: f64 = 30.0;
const C4_REL_TOL: f64 = 1e-4;
const C4_MIN_SHARE: f64 = 0.99;
const C4_COORDS: usize = 2000;
/// Initial step of the extrapolated difference.
const C4_STEP: f64 = 1e-3;
const C4_MAX_SECS: f64 = 120.0;
const C5_ROLLOUTS: usize = 1000;
const C5_LOW_SHARE: f64 = 0.2;
const C6_GREEDY_RATIO: f64 = 1.02;
const C6_GOSSIP_MARGIN: f64 = 0.10;
const C6_EVAL: usize = 256;
const C6_MAX_SECS: f64 = 7200.0;
const C7_ALPHA: f64 = 0.05;
const C7_INSTANCES: usize = 100;
const C8_INSTANCES: usize = 100;
const SIGMA: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, o: &Outcome, secs: f64) {
    // Written to the raw handle so the line shows without --nocapture.
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n}: {verdict} ({secs:.1} s) {}", o.detail);
}

fn random_opinion(rng: &mut ChaCha8Rng) -> OpinionTuple {
    let u: f64 = rng.gen();
    let t: f64 = rng.gen::<f64>() * (1.0 - u);
    OpinionTuple {
        trust: t,
        distrust: 1.0 - u - t,
        uncertainty: u,
    }
}

fn random_windows(rng: &mut ChaCha8Rng, n: usize) -> Vec<InteractionWindow> {
    (1..=n)
        .map(|k| InteractionWindow {
            window_index: k,
            positives: if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..60) },
            negatives: if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..30) },
            success_prob: if rng.gen_bool(0.05) { rng.gen_range(0..2) as f64 } else { rng.gen() },
        })
        .collect()
}

fn valid(o: &OpinionTuple) -> bool {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    unit(o.trust)
        && unit(o.distrust)
        && unit(o.uncertainty)
        && (o.trust + o.distrust + o.uncertainty - 1.0).abs() <= C1_SUM_TOL
}

fn criterion_1() -> Outcome {
    let p = ReputationParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    let mut bad = 0usize;
    for _ in 0..C1_LOGS {
        let n = rng.gen_range(1..=p.windows);
        let local = local_opinion(&random_windows(&mut rng, n), &p).expect("windows are non-empty");
        let recs: Vec<Recommender> = (0..rng.gen_range(1..6))
            .map(|_| {
                let n = rng.gen_range(1..=p.windows);
                Recommender {
                    opinion: local_opinion(&random_windows(&mut rng, n), &p).expect("non-empty"),
                    positives: rng.gen_range(0..200) as f64,
                    negatives: rng.gen_range(0..100) as f64,
                    mean_interaction: rng.gen_range(1.0..300.0),
                    delta: p.delta_rec,
                }
            })
            .collect();
        let mut opinions = vec![local];
        if let Ok(rec) = recommended_opinion(&recs, p.gamma_rec) {
            opinions.push(rec);
            if let Ok(f) = fuse_final_opinion(&local, &rec) {
                opinions.push(f);
            }
        }
        checked += opinions.len();
        bad += opinions.iter().filter(|o| !valid(o)).count();
    }
    let mut degenerate_ok = true;
    for _ in 0..10_000 {
        let o = random_opinion(&mut rng);
        let vac = OpinionTuple::vacuous();
        degenerate_ok &= fuse_final_opinion(&vac, &o).map_or(false, |f| f == o);
        degenerate_ok &= fuse_final_opinion(&o, &vac).map_or(false, |f| f == o);
    }
    outcome(
        bad == 0 && degenerate_ok,
        format!("{checked} opinions from {C1_LOGS} fuzzed logs, {bad} invalid; vacuous fusion exact: {degenerate_ok}"),
    )
}

fn criterion_2() -> Outcome {
    let spec = AobValidationSpec {
        tolerance: C2_REL_TOL,
        ..AobValidationSpec::default()
    };
    let report = validate_aob(&spec, None).expect("aob validation");
    let worst = |f: fn(&AobValidationRow) -> f64| report.rows.iter().map(f).fold(0.0, f64::max);
    let err = worst(|r| (r.des_mean - r.converged).abs() / r.converged);
    let hw = worst(|r| r.des_half_width_95 / r.converged);
    let ends = worst(|r| ((r.des_mean - r.converged).abs() + r.des_half_width_95) / r.converged);
    let strict = report.rows.iter().filter(|r| r.ci_ends_within_tolerance).count();
    let other = if report.des_matches == "mm1" { "closed_form" } else { "mm1" };
    outcome(
        report.all_within_tolerance,
        format!(
            "{} runs: worst mean error {err:.4}, worst half-width {hw:.4} (limit {C2_REL_TOL}); \
             both CI ends within limit on {strict}/{} (worst {ends:.4}); simulation matches {} (gap {:.4}) not {other} (gap {:.4})",
            report.rows.len(),
            report.rows.len(),
            report.des_matches,
            report.max_rel_gap_mm1.min(report.max_rel_gap_closed_form),
            report.max_rel_gap_mm1.max(report.max_rel_gap_closed_form),
        ),
    )
}

fn criterion_3() -> Outcome {
    let mu = 0.05;
    let mut worst: f64 = 0.0;
    for (i, load) in [0.1, 1.0].into_iter().enumerate() {
        let gamma = load / mu;
        let analytic = fork_probability(mu, gamma).expect("fork probability");
        let mut rng = ChaCha8Rng::seed_from_u64(30 + i as u64);
        // A competing block wins if it is mined before propagation ends.
        let hits = (0..C3_DRAWS).filter(|_| sample_exp(&mut rng, mu) < gamma).count();
        worst = worst.max((hits as f64 / C3_DRAWS as f64 - analytic).abs());
    }
    outcome(worst <= C3_ABS_TOL, format!("max |MC - analytic| = {worst:.5}"))
}

/// Ridders' extrapolated central difference of `f` at 0.
fn ridders(f: &dyn Fn(f64) -> f64, h0: f64) -> f64 {
    const CON: f64 = 1.4;
    const N: usize = 8;
    let mut a = [[0.0; N]; N];
    let mut h = h0;
    let (mut best, mut err) = (f64::NAN, f64::MAX);
    a[0][0] = (f(h) - f(-h)) / (2.0 * h);
    for i in 1..N {
        h /= CON;
        a[0][i] = (f(h) - f(-h)) / (2.0 * h);
        let mut fac = CON * CON;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON * CON;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

fn criterion_4() -> Outcome {
    let inst = generate_instance(4, 41, &ReputationSource::Uniform(0.9)).expect("instance");
    let mut params = PolicyParams::init(PolicyConfig::default(), 42).expect("policy");
    // Freeze batch-norm statistics measured on 4-miner graphs; the default
    // unit statistics shrink activations until every gradient is ~1e-12.
    let calibration: Vec<MinerInstance> = (0..64)
        .map(|s| generate_instance(4, 1000 + s, &ReputationSource::Uniform(0.9)).expect("instance"))
        .collect();
    let refs: Vec<&MinerInstance> = calibration.iter().collect();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (_, stats) = rollout_on_tape(&mut tape, &params, &vars, &refs, SIGMA, NormKind::Batch, DecodeMode::Greedy)
        .expect("calibration pass");
    params.config.bn_momentum = 1.0;
    params.update_running(&stats);
    params.config.bn_momentum = PolicyConfig::default().bn_momentum;

    let orders = vec![vec![1, 3, 0], vec![2, 0, 1], vec![0, 2, 3]];
    let advantages = [0.7, -0.4, 0.25];
    let insts = [&inst, &inst, &inst];
    let loss = |p: &PolicyParams| {
        let mut t = Tape::new();
        let vars = p.bind(&mut t);
        let (b, _) = rollout_on_tape(&mut t, p, &vars, &insts, SIGMA, NormKind::Running, DecodeMode::Forced(&orders))
            .expect("forced rollout");
        let l = t.weighted_sum(b.log_prob, advantages.iter().map(|a| a / 3.0).collect());
        (t, vars, l)
    };
    let (t, vars, l) = loss(&params);
    let mut grads = t.backward(l);
    let analytic = params.collect_grads(&mut grads, &vars);
    let sizes: Vec<usize> = params.tensors.iter().map(|x| x.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut within = 0;
    for _ in 0..C4_COORDS {
        let mut flat = rng.gen_range(0..total);
        let slot = sizes
            .iter()
            .position(|&s| {
                if flat < s {
                    true
                } else {
                    flat -= s;
                    false
                }
            })
            .expect("index in range");
        let shifted = |d: f64| {
            let mut q = params.clone();
            q.tensors[slot].as_slice_mut().expect("standard layout")[flat] += d;
            let (t, _, l) = loss(&q);
            t.value(l)[[0, 0]]
        };
        let numeric = ridders(&shifted, C4_STEP);
        let a = analytic[slot].as_slice().expect("standard layout")[flat];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - numeric).abs() / scale };
        within += usize::from(rel <= C4_REL_TOL);
    }
    let share = within as f64 / C4_COORDS as f64;
    outcome(
        share >= C4_MIN_SHARE,
        format!("{within}/{C4_COORDS} sampled coordinates within {C4_REL_TOL:e} ({total} parameters)"),
    )
}

fn criterion_5() -> Outcome {
    let params = PolicyParams::init(PolicyConfig::default(), 51).expect("policy");
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (mut masked_picks, mut repeats, mut bad_len, mut done) = (0, 0, 0, 0);
    while done < C5_ROLLOUTS {
        let m: usize = rng.gen_range(8..=30);
        let low = (C5_LOW_SHARE * m as f64).round() as usize;
        let batch: Vec<MinerInstance> = (0..50)
            .map(|_| {
                let mut reps: Vec<f64> = (0..m).map(|i| if i < low { 0.2 } else { 0.9 }).collect();
                rand::seq::SliceRandom::shuffle(reps.as_mut_slice(), &mut rng);
                generate_instance(m, rng.gen(), &ReputationSource::Provided(reps)).expect("instance")
            })
            .collect();
        let refs: Vec<&MinerInstance> = batch.iter().collect();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let (out, _) = rollout_on_tape(
            &mut tape,
            &params,
            &vars,
            &refs,
            SIGMA,
            NormKind::Running,
            DecodeMode::Sample(&mut sample_rng),
        )
        .expect("rollout");
        for (inst, order) in batch.iter().zip(&out.orders) {
            masked_picks += order.iter().filter(|&&i| inst.reputation[i] <= SIGMA).count();
            let mut seen = vec![false; m];
            for &i in order {
                repeats += usize::from(seen[i]);
                seen[i] = true;
            }
            bad_len += usize::from(order.len() != 3 * m / 4);
        }
        done += batch.len();
    }
    outcome(
        masked_picks == 0 && repeats == 0 && bad_len == 0,
        format!("{done} rollouts: {masked_picks} masked picks, {repeats} repeats, {bad_len} wrong lengths"),
    )
}

/// Desk-scale training shared by criteria 6, 7 and 9.
/// Desk budget stretched to 25 epochs; ten epochs stop around 1.04x Greedy.
fn desk_config() -> TrainConfig {
    TrainConfig { lr_schedule: LrSchedule::Constant { lr: 1e-3 }, epochs: 25, ..TrainConfig::desk() }
}

fn criterion_6(trained: &PolicyParams, cfg: &TrainConfig, train_secs: f64) -> Outcome {
    let src = cfg.reputation_source();
    let insts: Vec<MinerInstance> = (0..C6_EVAL)
        .map(|i| generate_instance(cfg.miners, derive_seed(0xE7A1, &[i as u64]), &src).expect("instance"))
        .collect();
    let gat: Vec<f64> = greedy_orders(&insts, trained, cfg.sigma, 256)
        .expect("policy routes")
        .iter()
        .zip(&insts)
        .map(|(o, i)| route_length(i, o))
        .collect();
    let baseline = |kind: BaselineKind| -> f64 {
        mean(
            &insts
                .iter()
                .enumerate()
                .map(|(k, inst)| {
                    let c = BaselineConfig::new(kind, true, cfg.sigma, derive_seed(0x6055, &[k as u64]));
                    let order = match kind {
                        BaselineKind::Greedy => greedy_order(inst, &c),
                        BaselineKind::Gossip => gossip_order(inst, &c),
                    }
                    .expect("baseline route");
                    route_length(inst, &order)
                })
                .collect::<Vec<_>>(),
        )
    };
    let (g, greedy, gossip) = (mean(&gat), baseline(BaselineKind::Greedy), baseline(BaselineKind::Gossip));
    let pass = g <= C6_GREEDY_RATIO * greedy && g <= (1.0 - C6_GOSSIP_MARGIN) * gossip && train_secs <= C6_MAX_SECS;
    outcome(
        pass,
        format!(
            "gat {g:.4}, greedy {greedy:.4} (ratio {:.4}, need <= {C6_GREEDY_RATIO}), gossip {gossip:.4} (gat {:.1}% below, need >= {:.0}%), training {train_secs:.0} s",
            g / greedy,
            100.0 * (1.0 - g / gossip),
            100.0 * C6_GOSSIP_MARGIN
        ),
    )
}

fn sweep_environment(trained: &PolicyParams) -> Environment {
    Environment::new(ChannelConfig::default(), ReputationParams::default()).with_policy(trained.clone(), "desk")
}

fn criterion_7(trained: &PolicyParams) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = ExperimentSpec {
        miner_counts: vec![9, 19],
        bandwidths_hz: vec![22e6],
        repetitions: C7_INSTANCES,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentSpec::default()
    };
    let res = run_aob_sweep(&spec, &sweep_environment(trained)).expect("sweep");
    let mut pass = true;
    let mut parts = Vec::new();
    for &m in &spec.miner_counts {
        for mech in [Mechanism::GatRep, Mechanism::GreedyRep, Mechanism::GossipRep] {
            let masked = res.values(m, mech, 22e6, |r| r.total_reputation);
            let open = res.values(m, mech.counterpart(), 22e6, |r| r.total_reputation);
            let p = paired_ttest_one_sided(&open, &masked).map_or(1.0, |t| t.p_value);
            let ok = mean(&masked) > mean(&open) && p < C7_ALPHA;
            pass &= ok;
            parts.push(format!("M={m} {mech} {:.3}>{:.3} p={p:.1e}", mean(&masked), mean(&open)));
        }
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8(trained: &PolicyParams) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = ExperimentSpec {
        miner_counts: vec![19],
        repetitions: C8_INSTANCES,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentSpec::default()
    };
    let res = run_aob_sweep(&spec, &sweep_environment(trained)).expect("sweep");
    let (mut ordered, mut total) = (0, 0);
    for mech in Mechanism::ALL {
        let a = res.values(19, mech, 180e3, |r| r.total_aob_s);
        let b = res.values(19, mech, 22e6, |r| r.total_aob_s);
        let c = res.values(19, mech, 100e6, |r| r.total_aob_s);
        for i in 0..a.len() {
            total += 1;
            ordered += usize::from(a[i] > b[i] && b[i] > c[i]);
        }
    }
    outcome(
        ordered == total && total == 6 * C8_INSTANCES,
        format!("{ordered}/{total} (mechanism, instance) pairs ordered 180 kHz > 22 MHz > 100 MHz"),
    )
}

fn criterion_9(trained: &PolicyParams, cfg: &TrainConfig) -> Outcome {
    let frozen = TrainConfig {
        lr_schedule: LrSchedule::Constant { lr: 0.0 },
        steps_per_epoch: 2,
        batch_size: 8,
        ..cfg.clone()
    };
    let untrained = PolicyParams::init(cfg.policy.clone(), cfg.seed).expect("policy");
    let dominate = Trainer::new(TrainConfig { epochs: 1, ..frozen.clone() })
        .expect("trainer")
        .with_policy(trained.clone())
        .with_baseline_policy(untrained)
        .run()
        .expect("dominating run");
    let refreshed = dominate.epochs[0].baseline_refreshed;
    let identical = Trainer::new(TrainConfig { epochs: 5, ..frozen })
        .expect("trainer")
        .run()
        .expect("identical run");
    let refreshes = identical.epochs.iter().filter(|e| e.baseline_refreshed).count();
    let flagged_steps = identical.log.iter().filter(|r| r.baseline_refreshed).count();
    outcome(
        refreshed && refreshes == 0 && flagged_steps == 0,
        format!(
            "dominating candidate refreshed at epoch 0: {refreshed} (p {:?}); identical candidate refreshed {refreshes} times in 5 epochs",
            dominate.epochs[0].p_value
        ),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        report(n, &o, secs);
        results.push((n, o.pass, secs));
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);

    let cfg = desk_config();
    let start = Instant::now();
    let trained = Trainer::new(cfg.clone()).expect("trainer").run().expect("desk training").params;
    let train_secs = start.elapsed().as_secs_f64();
    run(6, &mut || criterion_6(&trained, &cfg, train_secs));
    run(7, &mut || criterion_7(&trained));
    run(8, &mut || criterion_8(&trained));
    run(9, &mut || criterion_9(&trained, &cfg));

    let limits = [(1, C1_MAX_SECS), (2, C2_MAX_SECS), (3, C3_MAX_SECS), (4, C4_MAX_SECS)];
    let slow: Vec<usize> = limits
        .iter()
        .filter(|&&(n, max)| results.iter().any(|&(m, _, s)| m == n && s > max))
        .map(|&(n, _)| n)
        .collect();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(slow.is_empty(), "criteria over their runtime budget: {slow:?}");
}
