use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use longact::cli::{self, SaliencyAxis, SaliencySource};
use longact::perturb::{MeanMode, PerturbSpec, Side, Target};
use longact::saliency::PolicyKind;
use longact::training::Algorithm;
use longact::{Overrides, Result, RunConfig};

#[derive(Parser)]
#[command(name = "longact", version, about = "Saliency-masked RL fine-tuning of a toy transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML file with dotted keys; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, global = true, value_enum)]
    algo: Option<AlgoArg>,
    /// Supervised steps for `sft`, RL steps for `rl` and `pipeline`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output root; defaults to $LONGACT_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run directory name under the output root.
    #[arg(long, global = true)]
    name: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Massive,
    Min,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Grpo,
    Dapo,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    HeadDim,
    Sequence,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Q,
    K,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Top,
    Bottom,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the sft / rl / eval splits.
    Gen,
    /// Supervised warm-up from a fresh init.
    Sft,
    /// RL from the supervised checkpoint.
    Rl {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy accuracy on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Magnitude heatmaps as CSV.
    Saliency {
        #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
        checkpoint: Option<PathBuf>,
        /// A head x dim magnitude grid instead of a checkpoint.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "head-dim")]
        axis: AxisArg,
    },
    /// Clamp the most or least salient Q/K columns to their global mean.
    Perturb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_enum)]
        side: Option<SideArg>,
        /// Comma-separated layer indices; all layers when absent.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Take one mean across all selected layers.
        #[arg(long)]
        joint_mean: bool,
    },
    /// gen, sft, rl and eval in sequence.
    Pipeline,
}

fn overrides(c: &Common, cmd: &Cmd) -> Overrides {
    let (sft_steps, rl_steps) = match cmd {
        Cmd::Sft => (c.steps, None),
        _ => (None, c.steps),
    };
    Overrides {
        name: c.name.clone(),
        seed: c.seed,
        lambda: c.lambda,
        policy: c.policy.map(|p| match p {
            PolicyArg::Massive => PolicyKind::Massive,
            PolicyArg::Min => PolicyKind::Min,
            PolicyArg::Random => PolicyKind::Random,
        }),
        algorithm: c.algo.map(|a| match a {
            AlgoArg::Grpo => Algorithm::Grpo,
            AlgoArg::Dapo => Algorithm::Dapo,
            AlgoArg::Full => Algorithm::FullUpdate,
        }),
        sft_steps,
        rl_steps,
        out: c.out.clone(),
    }
}

fn run(args: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(args.common.config.as_deref(), &overrides(&args.common, &args.cmd))?;
    match args.cmd {
        Cmd::Gen => {
            cli::cmd_gen(&cfg)?;
        }
        Cmd::Sft => {
            let r = cli::cmd_sft(&cfg)?;
            println!("sft: {} steps, eval accuracy {:.4} -> {}", r.outcome.steps, r.eval.accuracy, r.checkpoint.display());
        }
        Cmd::Rl { checkpoint } => {
            let r = cli::cmd_rl(&cfg, checkpoint.as_deref())?;
            println!("rl: eval accuracy {:.4} -> {}", r.eval.accuracy, r.checkpoint.display());
        }
        Cmd::Eval { checkpoint } => {
            let r = cli::cmd_eval(&cfg, &checkpoint)?;
            println!(
                "accuracy {:.4}  reward {:.4}  format {:.4}  collapse {:.4}  (n={})",
                r.accuracy, r.mean_reward, r.format_rate, r.collapse_rate, r.n
            );
        }
        Cmd::Saliency { checkpoint, matrix, axis } => {
            let source = match (checkpoint, matrix) {
                (_, Some(m)) => SaliencySource::Matrix(m),
                (Some(c), None) => SaliencySource::Checkpoint(c),
                (None, None) => unreachable!("clap enforces one source"),
            };
            let axis = match axis {
                AxisArg::HeadDim => SaliencyAxis::HeadDim,
                AxisArg::Sequence => SaliencyAxis::Sequence,
            };
            for p in cli::cmd_saliency(&cfg, &source, axis)? {
                println!("{}", p.display());
            }
        }
        Cmd::Perturb {
            checkpoint,
            target,
            fraction,
            side,
            layers,
            joint_mean,
        } => {
            let d = &cfg.perturb;
            let spec = PerturbSpec {
                target: target.map_or(d.target, |t| match t {
                    TargetArg::Q => Target::Q,
                    TargetArg::K => Target::K,
                    TargetArg::Both => Target::Both,
                }),
                fraction: fraction.unwrap_or(d.fraction),
                side: side.map_or(d.side, |s| match s {
                    SideArg::Top => Side::Top,
                    SideArg::Bottom => Side::Bottom,
                }),
                layers: layers.or_else(|| d.layers.clone()),
                mean_mode: if joint_mean { MeanMode::Joint } else { d.mean_mode },
            };
            let rows = cli::cmd_perturb(&cfg, &checkpoint, &spec)?;
            print!("{}", longact::perturb::render_report(&rows));
        }
        Cmd::Pipeline => {
            let r = cli::pipeline(&cfg)?;
            println!(
                "sft eval accuracy {:.4}  rl eval accuracy {:.4}  ({})",
                r.sft.eval.accuracy,
                r.rl.eval.accuracy,
                cfg.run_dir().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
