use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use foura_core::workbench::commands::{threads_from_env, SeedRun};
use foura_core::workbench::{
    cmd_analyze, cmd_denoise_report, cmd_gradcheck, cmd_merge, cmd_train, AnalyzeArgs, BoundInputs, MergeArgs,
    TrainArgs,
};
use foura_core::FouraError;

#[derive(Parser)]
#[command(name = "foura", version, about = "Train, analyse and merge frequency-domain low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters from a key=value config.
    Train {
        config: PathBuf,
        /// One or more seeds; overrides the config's `seed`.
        #[arg(long, num_args = 1..)]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Singular-value spread, amplification and bound reports.
    Analyze {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Checkpoint supplying W0 (defaults to each adapter's own).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
        /// Emit projection norms between every ordered pair of checkpoints.
        #[arg(long)]
        pairwise: bool,
        /// Also write a singular-value plot.
        #[arg(long)]
        svg: bool,
        #[arg(long, default_value_t = 1.0)]
        bound_c: f64,
        #[arg(long, default_value_t = 1.0)]
        bound_rho: f64,
        #[arg(long, default_value_t = 0.0)]
        bound_lambda_min: f64,
        #[arg(long, default_value_t = 100)]
        bound_n: usize,
        #[arg(long, default_value_t = 0.1)]
        bound_delta: f64,
        #[arg(long, default_value_t = 0.0)]
        bound_r_hat: f64,
    },
    /// Merge two adapter checkpoints on seeded probes.
    Merge {
        first: PathBuf,
        second: PathBuf,
        #[arg(long, num_args = 2, value_names = ["A1", "A2"], allow_negative_numbers = true, default_values_t = [1.0, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        probe: u64,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        /// Projection rank for the compatibility score.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of every layer combination.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a wrong gradient (exercises the failure path).
        #[arg(long)]
        corrupt: bool,
    },
    /// Per-timestep effective ranks of the toy denoiser, adaptive and frozen.
    DenoiseReport {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(e: &FouraError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_numerical() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn print_runs(runs: &[SeedRun]) {
    for r in runs {
        println!("seed {}: final loss {:.6e} -> {}", r.seed, r.final_loss, r.dir.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode, FouraError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let args = TrainArgs {
                config,
                seeds: seed,
                out,
                threads: threads_from_env()?,
            };
            print_runs(&cmd_train(&args)?);
        }
        Command::Analyze {
            checkpoints,
            base,
            rank,
            out,
            pairwise,
            svg,
            bound_c,
            bound_rho,
            bound_lambda_min,
            bound_n,
            bound_delta,
            bound_r_hat,
        } => {
            let args = AnalyzeArgs {
                checkpoints,
                base,
                rank,
                out,
                pairwise,
                svg,
                bound: BoundInputs {
                    c: bound_c,
                    rho: bound_rho,
                    lambda_min: bound_lambda_min,
                    n: bound_n,
                    delta: bound_delta,
                    r_hat: bound_r_hat,
                },
            };
            for p in cmd_analyze(&args)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Merge {
            first,
            second,
            alphas,
            probe,
            probes,
            rank,
            out,
        } => {
            let args = MergeArgs {
                first,
                second,
                alphas: [alphas[0], alphas[1]],
                probe_seed: probe,
                probes,
                rank,
                out,
            };
            let outcome = cmd_merge(&args)?;
            for (i, [s12, s21]) in outcome.compatibility.iter().enumerate() {
                println!("layer {i}: compatibility {s12:.6} (first onto second), {s21:.6} (second onto first)");
            }
        }
        Command::Gradcheck { seed, corrupt } => {
            let summary = cmd_gradcheck(seed, corrupt)?;
            print!("{}", summary.render());
            if !summary.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::DenoiseReport { config, seed, out } => {
            let report = cmd_denoise_report(&config, seed, &out)?;
            for (mode, recs) in [("adaptive", &report.adaptive), ("frozen", &report.frozen)] {
                let mut ranks: Vec<usize> = recs.iter().map(|r| r.effective_rank).collect();
                ranks.sort_unstable();
                ranks.dedup();
                println!("{mode}: effective ranks seen {ranks:?} (nominal {})", report.nominal_rank);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
