use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use moleclue::clue::{clue_optimize, ClueConfig};
use moleclue::harness::{
    aggregate_curves, emit_report, find_molecule, read_toml, run_sweep, seed_from_env, SweepConfig, TrajectoryFile,
};
use moleclue::molgraph::contaminate;
use moleclue::training::{
    certificate_latents, fit_with_progress, load_checkpoint, refit_certificates, save_checkpoint, TrainConfig,
};

#[derive(Parser)]
#[command(name = "moleclue", version, about = "Uncertainty-lowering counterfactual conformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and its certificate bank.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the certificate bank of a checkpoint and report its fit.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the updated checkpoint; defaults to overwriting.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search for a lower-uncertainty conformer of one molecule.
    Clue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        molecule: String,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        label: Option<f64>,
        #[arg(long)]
        normalize_terms: bool,
        /// Seed of the contamination noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trajectory as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a contamination sweep.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a sweep directory into curves, plots and a summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `<in>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_toml(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed_from_env()? {
                cfg.seed = seed;
            }
            cfg.dataset.get_or_insert_with(Default::default);
            let (train, test) = cfg.load_data()?;
            eprintln!("training on {} molecules ({} held out)", train.len(), test.len());
            let output = fit_with_progress(&train, &cfg, |log| {
                eprintln!(
                    "epoch {:>4}  total {:.5}  L_y {:.4}  L_v {:.4}  L_k {:.4}  L_l {:.4}",
                    log.epoch, log.train.total, log.train.l_y, log.train.l_v, log.train.l_k, log.train.l_l
                );
            })?;
            fs::create_dir_all(&out)?;
            let path = out.join("checkpoint.mclu");
            save_checkpoint(&output.checkpoint, &path)?;
            fs::write(out.join("history.json"), serde_json::to_string_pretty(&output.history)?)?;
            println!(
                "wrote {}; certificates: {} steps, orthonormality error {:.2e}",
                path.display(),
                output.certificates.steps,
                output.certificates.orthonormality_error
            );
        }
        Command::Certify { checkpoint, out } => {
            let mut ck = load_checkpoint(&checkpoint, None)?;
            let (train, test) = ck.config.load_data()?;
            let latents = certificate_latents(&train, &ck.model, &ck.config)?;
            let (bank, report) =
                refit_certificates(&ck.model, &latents, &ck.config.certificates, ck.config.seed)?;
            ck.model.certificates = bank;
            let median_u = |xs: &[moleclue::molgraph::LabeledExample]| -> Result<Option<f64>> {
                let mut u = moleclue::training::posterior_means(xs, &ck.model)?
                    .iter()
                    .map(|z| ck.model.certificates.epistemic_u(z.values()))
                    .collect::<moleclue::Result<Vec<f64>>>()?;
                u.sort_by(f64::total_cmp);
                Ok(u.get(u.len() / 2).copied())
            };
            println!(
                "{} steps, loss {:.5}, orthonormality error {:.2e}",
                report.steps, report.loss, report.orthonormality_error
            );
            println!("median u_e: train {:?}, test {:?}", median_u(&train)?, median_u(&test)?);
            let dst = out.unwrap_or(checkpoint);
            save_checkpoint(&ck, &dst)?;
            println!("wrote {}", dst.display());
        }
        Command::Clue {
            checkpoint,
            molecule,
            tau,
            lr,
            steps,
            label,
            normalize_terms,
            seed,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint, None)?;
            let ex = find_molecule(&ck, &molecule)?;
            let x0 = contaminate(&ex.conformer, tau, seed)?;
            let cfg = ClueConfig {
                steps,
                clue_lr: lr,
                normalize_terms,
                ..ClueConfig::default()
            };
            let traj = clue_optimize(&ex.graph, &x0, label, &ck.model, &cfg)?;
            println!("step      L_e          L_a          L_r          L_y          L_total");
            for s in &traj.steps {
                let ly = s.l_y.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
                println!(
                    "{:>4}  {:.6e}  {:.6e}  {:.6e}  {:>12}  {:.6e}",
                    s.step, s.l_e, s.l_a, s.l_r, ly, s.l_total
                );
            }
            if traj.truncated {
                println!("stopped early: non-finite gradient");
            }
            if let Some(p) = out {
                let file = TrajectoryFile::from_trajectory(&traj, &ex, tau, lr);
                fs::write(&p, serde_json::to_string_pretty(&file)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Sweep { config, out } => {
            let mut cfg: SweepConfig = match config {
                Some(p) => read_toml(&p)?,
                None => SweepConfig::default(),
            };
            if let Some(seed) = seed_from_env()? {
                cfg.train.seed = seed;
            }
            let manifest = run_sweep(&cfg, &out)?;
            let mut failures = 0;
            for run in &manifest.runs {
                if let Some(e) = &run.error {
                    failures += 1;
                    eprintln!("run {}: {e}", run.repeat);
                }
                for cell in run.cells.iter().filter(|c| c.error.is_some()) {
                    failures += 1;
                    eprintln!("run {} tau {}: {}", run.repeat, cell.tau, cell.error.as_deref().unwrap_or(""));
                }
            }
            println!("sweep written to {} ({failures} failed stages)", out.display());
        }
        Command::Report { input, out } => {
            let curves = aggregate_curves(&input)?;
            let dst = out.unwrap_or_else(|| input.join("report"));
            let files = emit_report(&curves, &input, &dst)?;
            let absent = curves.cells.iter().filter(|c| c.curve.is_none()).count();
            println!("wrote {} and {} plots ({absent} absent curves)", files.csv.display(), files.svgs.len());
        }
    }
    Ok(())
}
