use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use blockprop::config::Config;
use blockprop::error::Result;
use blockprop::experiment::{
    experiment_instance, mechanism_orders, render_trajectory, run_aob_sweep, run_reputation_sweep,
    run_training_ablation, validate_aob, AblationSpec, AobValidationSpec, Environment, Mechanism,
};
use blockprop::network::evaluate_trajectory;
use blockprop::trainer::Trainer;

#[derive(Parser)]
#[command(name = "blockprop", version, about = "Reputation-constrained block propagation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and experiment seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Policy checkpoint file; for `train`, a run directory to resume.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the policy; writes checkpoints and logs to the output directory.
    Train,
    /// Overall AoB against miner count for every bandwidth and mechanism.
    SweepAob,
    /// Total trajectory reputation against miner count.
    SweepReputation,
    /// Render one routing trajectory as SVG plus CSV.
    RenderTraj {
        #[arg(long, default_value_t = 19)]
        miners: usize,
        #[arg(long, default_value = "gat+rep")]
        mechanism: String,
        /// Index of the evaluation instance.
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Learning-rate and baseline ablations.
    Ablate,
    /// Check the queue simulation against the closed forms.
    ValidateAob {
        /// Arrivals per seed.
        #[arg(long)]
        arrivals: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            return fail("usage", msg.trim());
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}

fn load(common: &Common) -> Result<Config> {
    let mut cfg = Config::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.experiment.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let cfg = load(&cli.common)?;
    let out = cfg.experiment.output_dir.clone();
    let checkpoint = cli.common.checkpoint.as_deref();
    match cli.command {
        Command::Train => train(&cfg, checkpoint),
        Command::SweepAob => {
            let env = Environment::prepare(&cfg, checkpoint)?;
            let res = run_aob_sweep(&cfg.experiment, &env)?;
            Ok(json!({ "command": "sweep-aob", "rows": res.rows.len(), "output_dir": out }))
        }
        Command::SweepReputation => {
            let env = Environment::prepare(&cfg, checkpoint)?;
            let res = run_reputation_sweep(&cfg.experiment, &env)?;
            Ok(json!({ "command": "sweep-reputation", "rows": res.rows.len(), "output_dir": out }))
        }
        Command::RenderTraj {
            miners,
            mechanism,
            instance,
        } => {
            let mech: Mechanism = mechanism.parse()?;
            let mut exp = cfg.experiment.clone();
            exp.mechanisms = vec![mech];
            exp.miner_counts = vec![miners];
            exp.validate()?;
            let env = Environment::prepare(&Config { experiment: exp.clone(), ..cfg.clone() }, checkpoint)?;
            let inst = experiment_instance(&exp, &env.reputation, miners, instance)?;
            let order = mechanism_orders(mech, std::slice::from_ref(&inst), &env, exp.seed)?.remove(0);
            let traj = evaluate_trajectory(&inst, &cfg.channel_params()?, &order, env.reputation.sigma)?;
            let name = format!("traj_{}_m{miners}_i{instance}.svg", mech.name().replace('+', "_"));
            let svg = out.join(name);
            let csv = render_trajectory(&inst, &traj, env.reputation.sigma, &svg)?;
            Ok(json!({
                "command": "render-traj",
                "svg": svg,
                "csv": csv,
                "route_length": traj.route_length,
                "total_aob_s": traj.total_aob_s,
                "total_reputation": traj.total_reputation,
            }))
        }
        Command::Ablate => {
            let env = Environment::new(cfg.channel, cfg.reputation);
            let mut spec = AblationSpec::default();
            if let Some(seed) = cli.common.seed {
                spec.seeds = vec![seed];
            }
            let rows = run_training_ablation(&cfg.train_config(), &spec, &env, &out)?;
            Ok(json!({ "command": "ablate", "rows": rows.len(), "output_dir": out }))
        }
        Command::ValidateAob { arrivals } => {
            let mut spec = AobValidationSpec {
                mu: cfg.channel.getdata_rate_mu,
                ..AobValidationSpec::default()
            };
            if let Some(n) = arrivals {
                spec.arrivals = n;
            }
            if let Some(seed) = cli.common.seed {
                spec.seeds = vec![seed, seed + 1, seed + 2];
            }
            std::fs::create_dir_all(&out)?;
            let report = validate_aob(&spec, Some(&out))?;
            Ok(json!({
                "command": "validate-aob",
                "all_within_tolerance": report.all_within_tolerance,
                "des_matches": report.des_matches,
                "max_rel_gap_closed_form": report.max_rel_gap_closed_form,
                "max_rel_gap_mm1": report.max_rel_gap_mm1,
                "output_dir": out,
            }))
        }
    }
}

/// Trains into `<out>/train`, or continues the run stored in `resume`.
fn train(cfg: &Config, resume: Option<&Path>) -> Result<serde_json::Value> {
    let tc = cfg.train_config();
    let (dir, trainer) = match resume {
        Some(from) => (from.to_path_buf(), Trainer::resume(tc, from)?),
        None => {
            let dir = cfg.experiment.output_dir.join("train");
            (dir.clone(), Trainer::new(tc)?.with_checkpoint_dir(dir))
        }
    };
    let res = trainer.run()?;
    let last = res.epochs.last();
    Ok(json!({
        "command": "train",
        "checkpoint": dir.join("policy.json"),
        "epochs": res.epochs.len(),
        "initial_validation_cost": res.initial_validation_cost,
        "final_validation_cost": last.map(|e| e.validation_cost),
    }))
}
