use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amd_core::pipeline::{
    compare_runs, export_plot_data, load_reference, load_run, run_amd_from, run_rdmd,
    write_simulation, PipelineConfig, REFERENCE_CONFIG,
};
use amd_core::tensor_io::import_spectra_csv;
use amd_core::AmdError;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "amd",
    version,
    about = "Hyperspectral neutron CT material decomposition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated counts, open beams, phantom and reference spectra.
    Simulate(RunArgs),
    /// Run the AMD pipeline.
    RunAmd {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this stage using persisted intermediates.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Run the reconstruction-domain baseline.
    RunRdmd(RunArgs),
    /// Tabulate per-material NRMSE and cost of an AMD and an RDMD run.
    Compare {
        #[arg(long)]
        amd: PathBuf,
        #[arg(long)]
        rdmd: PathBuf,
        /// Reference spectra CSV; defaults to the one saved with the AMD run.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-material spectra of one or two runs as plot-ready CSV.
    ExportPlots {
        #[arg(long)]
        amd: PathBuf,
        #[arg(long)]
        rdmd: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the reference configuration with every default.
    DefaultConfig,
}

fn load_config(a: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn reference_for(
    amd_dir: &Path,
    explicit: &Option<PathBuf>,
) -> anyhow::Result<Option<amd_core::simulation::SpectraTable>> {
    Ok(match explicit {
        Some(p) => Some(import_spectra_csv(p)?),
        None => load_reference(amd_dir)?,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = load_config(&a)?;
            let files = write_simulation(&cfg, &cfg.output_dir)?;
            for f in files {
                println!("{}", cfg.output_dir.join(f).display());
            }
        }
        Command::RunAmd { run, stage } => {
            let cfg = load_config(&run)?;
            let r = run_amd_from(&cfg, stage.as_deref())?;
            println!(
                "amd complete in {:.1} s, {} reconstructions, outputs in {}",
                r.total_seconds(),
                r.metrics.n_reconstructions,
                cfg.output_dir.display()
            );
            for e in &r.metrics.spectra_nrmse {
                println!(
                    "  {} ~ {}: NRMSE {:.3}%",
                    e.reference,
                    e.estimated,
                    100.0 * e.nrmse
                );
            }
        }
        Command::RunRdmd(a) => {
            let cfg = load_config(&a)?;
            let r = run_rdmd(&cfg)?;
            println!(
                "rdmd complete in {:.1} s, {} reconstructions, outputs in {}",
                r.total_seconds(),
                r.metrics.n_reconstructions,
                cfg.output_dir.display()
            );
            for e in &r.metrics.spectra_nrmse {
                println!(
                    "  {} ~ {}: NRMSE {:.3}%",
                    e.reference,
                    e.estimated,
                    100.0 * e.nrmse
                );
            }
        }
        Command::Compare {
            amd,
            rdmd,
            reference,
            out,
        } => {
            let (ra, sa) = load_run(&amd)?;
            let (rr, sr) = load_run(&rdmd)?;
            let Some(reference) = reference_for(&amd, &reference)? else {
                bail!("no reference spectra: pass --reference");
            };
            let c = compare_runs(&ra, &sa, &rr, &sr, &reference)?;
            println!("{c}");
            if let Some(o) = out {
                std::fs::write(&o, serde_json::to_string_pretty(&c)?)
                    .with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::ExportPlots {
            amd,
            rdmd,
            reference,
            out,
        } => {
            let (_, sa) = load_run(&amd)?;
            let sr = match &rdmd {
                Some(d) => Some(load_run(d)?.1),
                None => None,
            };
            let reference = reference_for(&amd, &reference)?;
            let mut runs = vec![("amd", &sa)];
            if let Some(s) = &sr {
                runs.push(("rdmd", s));
            }
            export_plot_data(&runs, reference.as_ref(), &out)?;
            println!("{}", out.display());
        }
        Command::DefaultConfig => print!("{REFERENCE_CONFIG}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<AmdError>() {
                Some(AmdError::Stage { stage, source }) => {
                    eprintln!("error: stage {stage} failed: {source}")
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
