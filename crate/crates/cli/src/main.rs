use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrds_cli::{cmd_ablate, cmd_compare, cmd_distill, cmd_eval, cmd_score, cmd_teach, AblationSpec, CliError, Experiment};

/// Knowledge distillation with label revision and influence-based data selection.
#[derive(Parser)]
#[command(name = "lrds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every model and training seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher; writes teacher.json and teacher_log.csv.
    Teach {
        #[command(flatten)]
        common: Common,
    },
    /// Influence-score every training sample; writes scores.csv.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Split by score and distil the student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Print a saved model's accuracy on the test set (training set if none).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sweep one or two distillation parameters over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Ablation spec (JSON).
        #[arg(long)]
        ablation: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train CE-only, vanilla KD, LR only, DS only and LR+DS students per seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(Experiment, PathBuf), CliError> {
    let exp = Experiment::load(&common.config, common.seed)?;
    let out = common.out.clone().unwrap_or_else(|| exp.output_dir().to_path_buf());
    Ok((exp, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Teach { common } => {
            let (exp, out) = load(&common)?;
            let t = cmd_teach(&exp, &out)?;
            match t.train_acc {
                Some(acc) => println!("teacher written to {} (train accuracy {acc})", t.checkpoint.display()),
                None => println!("teacher written to {}", t.checkpoint.display()),
            }
        }
        Command::Score { common, teacher } => {
            let (exp, out) = load(&common)?;
            let path = cmd_score(&exp, &teacher, &out)?;
            println!("scores written to {}", path.display());
        }
        Command::Distill { common, teacher, scores } => {
            let (exp, out) = load(&common)?;
            let d = cmd_distill(&exp, &teacher, &scores, &out)?;
            println!(
                "student written to {} (test accuracy {}, {} teacher-supervised samples)",
                d.dir.display(),
                d.run.test_acc,
                d.run.plan.dt_indices.len()
            );
        }
        Command::Eval { common, model } => {
            let (exp, _) = load(&common)?;
            println!("{}", cmd_eval(&exp, &model)?);
        }
        Command::Ablate {
            common,
            ablation,
            teacher,
            scores,
        } => {
            let (exp, out) = load(&common)?;
            let spec = AblationSpec::load(&ablation)?;
            let summary = cmd_ablate(&exp, &spec, teacher.as_deref(), scores.as_deref(), &out)?;
            let failed = summary.rows.iter().filter(|r| r.test_acc.is_none()).count();
            println!(
                "{} runs ({failed} failed); summary in {}",
                summary.rows.len(),
                out.join(lrds_cli::ablation::SUMMARY_FILE).display()
            );
        }
        Command::Compare {
            common,
            seeds,
            teacher,
            scores,
        } => {
            let (exp, out) = load(&common)?;
            let rows = cmd_compare(&exp, &seeds, teacher.as_deref(), scores.as_deref(), &out)?;
            for (name, mean, std) in lrds_cli::pipeline::comparison_means(&rows) {
                println!("{name:<12} {mean:.4} +- {std:.4}");
            }
            println!("table written to {}", Path::new(&out).join(lrds_cli::pipeline::COMPARISON_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LRDS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
