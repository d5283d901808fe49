//! Experiment driver: dataset generation, graph analysis, influence checks,
//! training, evaluation and UDR selection.
//!
//! Exit codes: 0 success (or check passed), 1 check failed, 2 usage or
//! missing artifacts, 3 numeric abort during training.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(
    name = "mechsparse",
    version,
    about = "Mechanism-sparsity disentanglement toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print a graph/criterion summary.
    Generate {
        /// Family name, e.g. ActionDiag, TimeNonDiag, SingleTargetInterv.
        #[arg(long)]
        family: String,
        #[arg(long)]
        dz: usize,
        /// Action dimension; defaults to the family's natural choice.
        #[arg(long)]
        da: Option<usize>,
        #[arg(long)]
        dx: usize,
        #[arg(long)]
        n: usize,
        /// Sequence length; defaults to 1 for action families, 2 for
        /// one-lag time families, 3 for two-lag families.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        obs_sigma: f64,
        /// Edge probability for the random-graph families.
        #[arg(long, default_value_t = 0.3)]
        edge_prob: f64,
        /// Seed of sampled family parameters (weights, random graphs).
        #[arg(long, default_value_t = 0)]
        param_seed: u64,
        /// Decoder hidden widths.
        #[arg(long, value_delimiter = ',', default_values_t = vec![20usize, 20, 20])]
        hidden: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print criterion verdict, entanglement masks and symmetry permutations.
    AnalyzeGraph {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run a sufficient-influence / variability check; exits 1 on failure.
    CheckInfluence {
        #[arg(long)]
        dataset: PathBuf,
        /// One of: a-cont, a-disc, z, z-expfam, variability.
        #[arg(long)]
        assumption: String,
        #[arg(long, default_value_t = 0)]
        n_probe: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the sparsity-constrained VAE on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_dual: Option<f64>,
        /// Freeze every edge on (no mask learning).
        #[arg(long, default_value_t = false)]
        frozen: bool,
        /// Graph side to learn: a or z; defaults to the family's side.
        #[arg(long)]
        side: Option<String>,
        /// JSON TrainConfig; explicit flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against ground-truth latents.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Consistency mode for R_con: a, z or az.
        #[arg(long)]
        mode: String,
        /// Number of evaluation sequences (first `n`).
        #[arg(long, default_value_t = 10_000)]
        eval_n: usize,
        /// Write the JSON report here (defaults to eval.json in the
        /// checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for CSV matrix dumps (correlations, |L P|, graphs).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Append a `beta,seed,mcc,r_con,r,shd` row to this sweep table.
        #[arg(long)]
        append_csv: Option<PathBuf>,
    },
    /// Filtered UDR selection over trained runs.
    Udr {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint directories (at least two).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Runs whose learned graph keeps fewer edges are excluded;
        /// defaults to d_z.
        #[arg(long)]
        min_edges: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        eval_n: usize,
        /// Write the selection table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate {
            family,
            dz,
            da,
            dx,
            n,
            t,
            seed,
            obs_sigma,
            edge_prob,
            param_seed,
            hidden,
            out,
        } => commands::generate(
            &family, dz, da, dx, n, t, seed, obs_sigma, edge_prob, param_seed, &hidden, &out,
        ),
        Command::AnalyzeGraph { dataset } => commands::analyze_graph(&dataset),
        Command::CheckInfluence {
            dataset,
            assumption,
            n_probe,
            tol,
            seed,
            out,
        } => commands::check_influence(&dataset, &assumption, n_probe, tol, seed, out.as_deref()),
        Command::Train {
            dataset,
            beta,
            iters,
            seed,
            batch,
            lr,
            lr_dual,
            frozen,
            side,
            config,
            out,
        } => commands::train(
            &dataset,
            commands::TrainOverrides {
                beta,
                iters,
                seed,
                batch,
                lr,
                lr_dual,
                frozen,
                side,
                config,
            },
            &out,
        ),
        Command::Evaluate {
            checkpoint,
            dataset,
            mode,
            eval_n,
            out,
            dump,
            append_csv,
        } => commands::evaluate(
            &checkpoint,
            &dataset,
            &mode,
            eval_n,
            out.as_deref(),
            dump.as_deref(),
            append_csv.as_deref(),
        ),
        Command::Udr {
            dataset,
            runs,
            min_edges,
            eval_n,
            out,
        } => commands::udr(&dataset, &runs, min_edges, eval_n, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
