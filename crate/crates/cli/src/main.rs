use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hessfree::corpus::GenParams;
use hessfree::Error;
use hessfree_cli::report::{self, RunData};
use hessfree_cli::{cmd_gen, cmd_train, default_workers, exit_code, output_dir, RunConfig};

#[derive(Parser)]
#[command(name = "hessfree", version, about = "Hessian-free training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic utterance corpus.
    Gen(GenArgs),
    /// Train a network from a config file.
    Train {
        config: PathBuf,
        /// Worker threads for the sharded passes (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Also write per-iteration series files into this directory.
        #[arg(long)]
        series: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    train_utts: usize,
    #[arg(long, default_value_t = 200)]
    heldout_utts: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Probability that the label stays the same from one frame to the next.
    #[arg(long, default_value_t = 0.9)]
    p_stay: f64,
    /// Spread of the class means.
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short = 'o', long)]
    output: PathBuf,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(a) => {
            let params = GenParams {
                classes: a.classes,
                feature_dim: a.dim,
                train_utts: a.train_utts,
                heldout_utts: a.heldout_utts,
                min_len: a.min_len,
                max_len: a.max_len,
                p_stay: a.p_stay,
                mean_scale: a.mean_scale,
                seed: a.seed,
                ..GenParams::default()
            };
            println!("{}", cmd_gen(&params, &a.output)?);
        }
        Command::Train { config, workers, out } => {
            let cfg = RunConfig::load(&config)?;
            let workers = workers.or(cfg.workers).unwrap_or_else(default_workers);
            if workers == 0 {
                return Err(Error::Config("--workers must be positive".into()));
            }
            let dir = output_dir(out, &cfg, &config);
            let s = cmd_train(&cfg, &dir, workers)?;
            println!(
                "{}: {} HF iterations, {} CG iterations, {} accessed points, final held-out loss {:.6} -> {}",
                s.method,
                s.hf_iterations,
                s.total_cg_iterations,
                s.total_accessed_points,
                s.final_heldout_loss,
                dir.display()
            );
        }
        Command::Report { csvs, series } => {
            let runs = csvs.iter().map(|p| RunData::load(p)).collect::<Result<Vec<_>, _>>()?;
            let rep = report::build(&runs);
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", rep.table);
            if let Some(dir) = series {
                for p in report::write_series(&runs, &dir)? {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
