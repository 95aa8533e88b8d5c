use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mb_core::data::{
    apply_cloud_masks, export_png_previews, generate_synthetic_pairs, load_dataset, save_dataset,
    split_dataset,
};
use mb_core::eval::{write_metrics_file, LossTrace};
use mb_core::experiments::{
    delta_summary, evaluate_run, plot_loss_trace, plot_sweep, read_sweep_csv, run_pipeline,
    sweep_cloud_content, ExperimentConfig, Method,
};
use mb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mb", version, about = "Optical → optical+SAR transfer with modality loss balancing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset generation and preparation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Run one method for one seed and persist the run.
    Train {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a persisted run from its snapshot and checkpoints.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// IRM vs no-IRM over cloud fractions × seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
        fractions: Vec<f64>,
        /// Defaults to the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Extra methods to run in every cell.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Defaults to the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a sweep directory (`sweep.csv`) and/or run traces (`trace.csv`).
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Generate the configured synthetic dataset.
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many optical PNG previews.
        #[arg(long, default_value_t = 0)]
        previews: usize,
    },
    /// Apply the configured cloud simulation to a saved dataset.
    SimulateClouds {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign the labeled / unlabeled / test split to a saved dataset.
    Split {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn data(action: DataAction) -> Result<()> {
    match action {
        DataAction::GenSynthetic {
            config,
            seed,
            out,
            previews,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_synthetic_pairs(&cfg.data.synthetic, seed)?;
            create_dir(&out)?;
            save_dataset(&ds, &out)?;
            if previews > 0 {
                export_png_previews(&ds, &out.join("previews"), previews)?;
            }
            println!("wrote {} pairs to {}", ds.len(), out.display());
        }
        DataAction::SimulateClouds {
            config,
            seed,
            input,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, ds) = load_dataset(&input)?;
            let clouded = apply_cloud_masks(&ds, &cfg.clouds, &cfg.clouds.library(seed)?, seed)?;
            create_dir(&out)?;
            save_dataset(&clouded, &out)?;
            let covered = clouded.samples.iter().filter(|s| s.cloud.covered).count();
            println!("masked {covered} of {} pairs into {}", clouded.len(), out.display());
        }
        DataAction::Split {
            config,
            seed,
            input,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, ds) = load_dataset(&input)?;
            let split = split_dataset(&ds, &cfg.split, seed)?;
            create_dir(&out)?;
            save_dataset(&split, &out)?;
            println!("split {} pairs into {}", split.len(), out.display());
        }
    }
    Ok(())
}

/// Every `trace.csv` below `dir`, in sorted order.
fn find_traces(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_traces(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "trace.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn plot(input: &Path, out: &Path) -> Result<()> {
    if !input.is_dir() {
        return Err(Error::MissingFile {
            path: input.to_path_buf(),
            sample_id: 0,
        });
    }
    let sweep_csv = input.join("sweep.csv");
    let mut traces = Vec::new();
    find_traces(input, &mut traces)?;
    if !sweep_csv.exists() && traces.is_empty() {
        return Err(Error::InvalidInput(format!(
            "nothing to plot in {}: missing sweep.csv and */trace.csv",
            input.display()
        )));
    }
    create_dir(out)?;
    if sweep_csv.exists() {
        let (svg, _) = plot_sweep(&delta_summary(&read_sweep_csv(&sweep_csv)?), out, "sweep-delta")?;
        println!("{}", svg.display());
    }
    for t in traces {
        let trace = LossTrace::read_csv(&t)?;
        if trace.is_empty() {
            continue;
        }
        let rel = t.parent().unwrap().strip_prefix(input).unwrap_or(Path::new(""));
        let stem: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
        let stem = if stem.is_empty() { "loss".to_string() } else { format!("loss-{}", stem.join("-")) };
        let (svg, _) = plot_loss_trace(&trace, out, &stem)?;
        println!("{}", svg.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { action } => data(action),
        Command::Train {
            method,
            config,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m;
            }
            let seed = seed.or(cfg.seeds.first().copied()).ok_or_else(|| {
                Error::Config("no seed given and the config has none".into())
            })?;
            create_dir(&out)?;
            let rec = run_pipeline(&cfg, seed, &out)?;
            let m = rec.metrics.as_ref().expect("completed runs carry metrics");
            println!(
                "{} seed {}: OA {:.4} AA {:.4} kappa {:.4}",
                rec.method, rec.seed, m.overall.oa, m.overall.aa, m.overall.kappa
            );
            Ok(())
        }
        Command::Eval { run } => {
            let m = evaluate_run(&run)?;
            let path = run.join("eval-metrics.toml");
            write_metrics_file(&path, &m)?;
            let stored = run.join("metrics.toml");
            let same = std::fs::read(&stored).ok() == std::fs::read(&path).ok();
            println!(
                "OA {:.4} AA {:.4} kappa {:.4}; matches stored metrics: {}",
                m.overall.oa,
                m.overall.aa,
                m.overall.kappa,
                if same { "yes" } else { "no" }
            );
            Ok(())
        }
        Command::Sweep {
            config,
            fractions,
            seeds,
            methods,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let res = sweep_cloud_content(&cfg, &fractions, &seeds, &methods, Some(&out));
            // The CSV is written even for a partial sweep; plot what exists.
            let csv = out.join("sweep.csv");
            if csv.exists() {
                let deltas = delta_summary(&read_sweep_csv(&csv)?);
                for d in &deltas {
                    println!(
                        "fraction {:.2}: mean delta OA {:+.4} (sd {:.4}, {} seeds)",
                        d.fraction,
                        d.mean,
                        d.std,
                        d.per_seed.len()
                    );
                }
                plot_sweep(&deltas, &out, "sweep-delta")?;
            }
            res.map(|_| ())
        }
        Command::Plot { input, out } => plot(&input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
