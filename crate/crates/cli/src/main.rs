use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualteach::pipeline::{cmd_eval, cmd_gen_data, cmd_mine, cmd_train, Split, TrainOptions, Workspace};
use dualteach::trainer::Ablation;
use dualteach::Error;

#[derive(Parser)]
#[command(name = "dualteach", version, about = "Sparse-label pseudo-label mining lab")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation corpora.
    GenData(Common),
    /// Train one ablation.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pretrain the static teacher first (otherwise it is loaded).
        #[arg(long)]
        pretrain_static: bool,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        #[arg(long)]
        i_max: Option<usize>,
        #[arg(long)]
        i_refine: Option<usize>,
        /// Snapshot student and dynamic teacher every N iterations.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Mine pseudo labels with trained teachers and tabulate their quality.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
    },
    /// Evaluate a trained run on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        /// Also score a mining dump.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Split the dump was mined from.
        #[arg(long, default_value = "train", value_parser = parse_split)]
        dump_split: Split,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| "expected `train` or `val`".to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn workspace(common: &Common) -> dualteach::Result<Workspace> {
    Workspace::load(&common.config)
}

fn run(cli: Cli) -> dualteach::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let m = cmd_gen_data(&workspace(&c)?)?;
            println!(
                "train {} scenes, val {} scenes, sparse ratio {:.3}",
                m.train.stats.scenes, m.val.stats.scenes, m.train.stats.sparse_ratio
            );
        }
        Command::Train {
            common,
            pretrain_static,
            ablation,
            i_max,
            i_refine,
            checkpoint_every,
        } => {
            let mut ws = workspace(&common)?;
            if let Some(n) = i_max {
                ws.config.trainer.i_max = n;
            }
            if i_refine.is_some() {
                ws.config.trainer.i_refine = i_refine;
            }
            ws.config.validate()?;
            let s = cmd_train(
                &ws,
                TrainOptions {
                    ablation,
                    pretrain_static,
                    checkpoint_every,
                },
            )?;
            println!(
                "{}: {} iterations, final loss {:.4}",
                s.ablation,
                s.iterations,
                s.final_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Mine {
            common,
            ablation,
            split,
        } => {
            let s = cmd_mine(&workspace(&common)?, ablation, split)?;
            println!("sigma_st  main fpr/mpr/an    +supplement fpr/mpr/an");
            for r in &s.sweep {
                println!(
                    "{:<8}  {:.3}/{:.3}/{:.2}   {:.3}/{:.3}/{:.2}",
                    r.sigma_st,
                    r.main.fpr,
                    r.main.mpr,
                    r.main.an,
                    r.with_supplement.fpr,
                    r.with_supplement.mpr,
                    r.with_supplement.an
                );
            }
        }
        Command::Eval {
            common,
            ablation,
            dump,
            dump_split,
        } => {
            let ws = workspace(&common)?;
            let r = cmd_eval(&ws, ablation, dump.as_deref().map(|p| (p, dump_split)))?;
            for row in &r.ap {
                println!("AP@{}: {:.4}", row.iou_threshold, row.outcome.ap);
            }
            if let Some(q) = r.dump_quality {
                println!("dump fpr {:.4} mpr {:.4} an {:.3}", q.fpr, q.mpr, q.an);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
