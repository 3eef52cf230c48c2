use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use posbias::eval::{empirical_curve, evaluate};
use posbias::experiment::probe_rows;
use posbias::fusion::{approx_unaware_curve, epsilon_closed_form, grid_search_alpha};
use posbias::models::train_with_history;
use posbias::paperrepro::{format_table1, l2_sweep, table1};
use posbias::synthgen::{export_jsonl, import_jsonl};
use posbias::{Dataset, ModelKind, PositionCurve, TrainedModel};
use posbias_cli::pipeline::{write_json, RunMetrics};
use posbias_cli::{emit_plot_data, run_pipeline, ConfigArgs};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "posbias", version, about = "Position-bias laboratory")]
struct Cli {
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, validation, eps_fit and test splits as JSONL under --out.
    Gen(ConfigArgs),
    /// Train one model and write its checkpoint to --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// base, st_psf, pal or gi:<rate>.
        #[arg(long)]
        kind: ModelKind,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        /// Also write the training history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a random-traffic JSONL split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        probe_size: usize,
        /// Metrics JSON path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the served curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Closed-form fusing weight from three curve CSVs.
    #[command(alias = "fusion")]
    Fuse {
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        aware: PathBuf,
        /// Defaults to the mean of the aware curve.
        #[arg(long)]
        unaware: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search of the fusing weight by AUC.
    GridEps {
        #[arg(long)]
        aware: PathBuf,
        #[arg(long)]
        unaware: PathBuf,
        /// JSONL split to score on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the linear overestimation example.
    ReproTable1,
    /// Overestimation ratio of ST_PSF across L2 strengths.
    SweepL2 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 1e-4, 1e-3])]
        lambdas: Vec<f64>,
    },
    /// Full pipeline into the run directory --out.
    Run(ConfigArgs),
    /// Plot-ready CSVs for a finished run directory.
    EmitPlots {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(path: &Path, k: usize) -> anyhow::Result<Dataset> {
    let groups = import_jsonl(path, k)?;
    Ok(Dataset::from_groups(&groups, k)?)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn print_summary(metrics: &RunMetrics) {
    println!("{:<12} {:>8} {:>10} {:>11}", "model", "auc", "ratio", "gradient");
    for s in &metrics.summary {
        println!(
            "{:<12} {:>8.4} {:>10.3} {:>11.5}",
            s.name, s.auc, s.overestimation_ratio, s.position_gradient
        );
    }
    for r in &metrics.seeds {
        if let Some(f) = &r.fusion {
            println!("seed {}: alpha = {:.4}", r.seed, f.alpha);
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Gen(args) => {
            let config = args.resolve()?;
            let seed = config.seeds[0];
            let groups = config.plan().groups(seed)?;
            fs::create_dir_all(&config.out)?;
            for (name, split) in [
                ("train", &groups.train),
                ("validation", &groups.validation),
                ("eps_fit", &groups.eps_fit),
                ("test", &groups.test),
            ] {
                let path = config.out.join(format!("{name}.jsonl"));
                export_jsonl(split, &path)?;
                println!("{}: {} users", path.display(), split.len());
            }
        }
        Command::Train {
            config,
            kind,
            train,
            validation,
            history,
        } => {
            let config = config.resolve()?;
            let k = config.items_per_query;
            let (train, validation) = (load_split(&train, k)?, load_split(&validation, k)?);
            let (model, h) =
                train_with_history(kind, &train, &validation, &config.train_config(config.seeds[0]), None)?;
            model.save(&config.out)?;
            if let Some(p) = history {
                write_json(&p, &h)?;
            }
            let best = &h.epochs[h.best_epoch];
            println!(
                "{kind}: {} epochs, best validation AUC {:.4} at epoch {}",
                h.epochs.len(),
                best.validation_auc,
                best.epoch
            );
        }
        Command::Eval {
            model,
            test,
            probe_size,
            out,
            curve,
        } => {
            let model = TrainedModel::load(&model)?;
            let test = load_split(&test, model.k())?;
            let gt = empirical_curve(&test)?;
            let report = evaluate(&model, &test, &gt, probe_rows(&test, probe_size).view())?;
            if let Some(p) = curve {
                fs::write(&p, report.curve.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&report, out.as_deref())?;
        }
        Command::Fuse {
            ground_truth,
            aware,
            unaware,
            out,
        } => {
            let g = PositionCurve::read_csv(&ground_truth)?;
            let a = PositionCurve::read_csv(&aware)?;
            let u = match unaware {
                Some(p) => PositionCurve::read_csv(&p)?,
                None => approx_unaware_curve(&a)?,
            };
            emit(&epsilon_closed_form(&g, &a, &u)?, out.as_deref())?;
        }
        Command::GridEps {
            aware,
            unaware,
            data,
            step,
            out,
        } => {
            let aware = TrainedModel::load(&aware)?;
            let unaware = TrainedModel::load(&unaware)?;
            let data = load_split(&data, aware.k())?;
            emit(&grid_search_alpha(&aware, &unaware, &data, step)?, out.as_deref())?;
        }
        Command::ReproTable1 => print!("{}", format_table1(&table1())),
        Command::SweepL2 { config, lambdas } => {
            let config = config.resolve()?;
            let report = l2_sweep(&lambdas, &config.plan(), &config.train_config(0), &config.seeds)?;
            fs::create_dir_all(&config.out)?;
            fs::write(config.out.join("sweep.csv"), report.to_csv())?;
            write_json(&config.out.join("sweep.json"), &report)?;
            println!("lambda,mean_ratio");
            for (l, r) in &report.mean_ratio {
                println!("{l},{r}");
            }
        }
        Command::Run(args) => {
            let config = args.resolve()?;
            let metrics = run_pipeline(&config, cli.deterministic)?;
            print_summary(&metrics);
        }
        Command::EmitPlots { out } => {
            for p in emit_plot_data(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
