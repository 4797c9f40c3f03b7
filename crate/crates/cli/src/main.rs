use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cade_core::experiment::{
    cmd_bench, cmd_eval, cmd_oracle, cmd_qsweep, cmd_train, mean_profits, ExperimentError,
    ExperimentSpec, Output, PolicyKind, SweepAxis, TrainOptions,
};

#[derive(Parser)]
#[command(name = "cade", about = "EV charging-station experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (train) or the evaluation seed (other commands).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train CADE and write weights plus per-episode metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total episodes, counting resumed ones.
        #[arg(long)]
        episodes: Option<usize>,
        /// Continue from the weight file in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate policies on shared trajectories.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policies to run (repeatable or comma separated); defaults to the spec's list.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<String>,
    },
    /// Per-step decision latency and per-charger profit by station size.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Q-value curves while one observation component is swept.
    Qsweep {
        #[command(flatten)]
        common: Common,
        /// h_onehot, t_r, n_wait or L_current; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        axis: Vec<String>,
    },
    /// Exact optimum of one tiny evaluation trajectory.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Trajectory index in the evaluation stream.
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
}

fn load(common: &Common) -> Result<(ExperimentSpec, Output), ExperimentError> {
    let spec = match &common.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    let dir = common.out.clone().unwrap_or_else(|| spec.output_dir.clone());
    Ok((spec, Output::new(dir, common.force)))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train { common, episodes, resume } => {
            let (mut spec, out) = load(&common)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let report = cmd_train(&spec, &out, &TrainOptions { episodes, resume }, |m| {
                if (m.episode + 1) % 50 == 0 {
                    eprintln!(
                        "episode {:5}  profit {:9.2}  penalty {:8.2}  epsilon {:.3}",
                        m.episode + 1,
                        m.profit,
                        m.penalty,
                        m.epsilon
                    );
                }
            })?;
            println!("trained {} episodes -> {}", report.episodes_done, report.weights.display());
        }
        Command::Eval { common, policy } => {
            let (mut spec, out) = load(&common)?;
            if let Some(s) = common.seed {
                spec.eval_seed = s;
            }
            let kinds: Vec<PolicyKind> =
                policy.iter().map(|p| p.parse()).collect::<Result<_, _>>()?;
            let rows = cmd_eval(&spec, &out, (!kinds.is_empty()).then_some(kinds.as_slice()))?;
            for (p, z) in mean_profits(&rows) {
                println!("{p:16} mean profit {z:10.2}");
            }
        }
        Command::Bench { common } => {
            let (mut spec, out) = load(&common)?;
            if let Some(s) = common.seed {
                spec.eval_seed = s;
            }
            let (latency, scale) = cmd_bench(&spec, &out)?;
            for r in latency {
                println!("{:10} {:4} chargers  {:10.3} ms/step", r.policy, r.n_chargers, r.mean_ms);
            }
            for r in scale {
                println!("{:10} {:4} chargers  {:8.2} $/charger", r.policy, r.n_chargers, r.profit_per_charger);
            }
        }
        Command::Qsweep { common, axis } => {
            let (spec, out) = load(&common)?;
            let axes: Vec<SweepAxis> = if axis.is_empty() {
                SweepAxis::ALL.to_vec()
            } else {
                axis.iter().map(|a| a.parse()).collect::<Result<_, _>>()?
            };
            let rows = cmd_qsweep(&spec, &out, &axes)?;
            println!("wrote {} rows", rows.len());
        }
        Command::Oracle { common, instance } => {
            let (mut spec, out) = load(&common)?;
            if let Some(s) = common.seed {
                spec.eval_seed = s;
            }
            let z = cmd_oracle(&spec, &out, instance)?;
            println!("optimal profit {z:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
