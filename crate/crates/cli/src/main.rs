use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use poisson_sgs::diagnostics::MetricsReport;
use poisson_sgs::experiments::image::{read_image, read_raw_f32, write_pnm, write_raw_f32};
use poisson_sgs::experiments::phantom::checksum;
use poisson_sgs::experiments::{run_experiment, shepp_logan_phantom, ExperimentConfig, ImageBuffer, SCHEMA_VERSION};
use poisson_sgs::validation::run_oracle_battery;
use poisson_sgs::{Error, Result};

#[derive(Parser)]
#[command(name = "poisson-sgs", version, about = "Bayesian Poisson image reconstruction by split Gibbs sampling")]
struct Cli {
    /// Master seed; overrides `sampler.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `phantom`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override a config entry, e.g. `--set sampler.n_mc=5000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the validation battery.
    Oracle,
    /// Write the ellipse phantom.
    Phantom {
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, value_enum, default_value_t = PhantomFormat::Pgm)]
        format: PhantomFormat,
    },
    /// Recompute image metrics from stored artifacts.
    Metrics {
        /// Run directory holding `truth` and `posterior_mean` raw images.
        run_dir: Option<PathBuf>,
        #[arg(long, requires = "estimate", conflicts_with = "run_dir")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        estimate: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomFormat {
    Pgm,
    Raw,
}

fn cmd_run(cli: &Cli, config: &Path, overrides: &[String]) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let out = run_experiment(&cfg)?;
    let s = &out.summary;
    println!(
        "{}: PSNR {:.2} dB, SSIM {:.4}, guard rate {:.2e}, artifacts in {}",
        s.task.name(),
        s.metrics.psnr_db,
        s.metrics.ssim,
        s.guard_rate,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_oracle(cli: &Cli) -> Result<bool> {
    let outcomes = run_oracle_battery(cli.seed.unwrap_or(0))?;
    let mut csv = String::from("check,passed,detail\n");
    for o in &outcomes {
        println!("{:<28} {} {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        csv.push_str(&format!("{},{},\"{}\"\n", o.name, o.passed, o.detail));
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("oracle.csv"), csv)?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

fn cmd_phantom(cli: &Cli, size: usize, format: PhantomFormat) -> Result<()> {
    let img = shepp_logan_phantom(size)?;
    let default = match format {
        PhantomFormat::Pgm => format!("phantom_{size}.pgm"),
        PhantomFormat::Raw => format!("phantom_{size}.raw"),
    };
    let path = match &cli.out {
        Some(p) if p.is_dir() => p.join(default),
        Some(p) => p.clone(),
        None => PathBuf::from(default),
    };
    match format {
        PhantomFormat::Pgm => write_pnm(&path, &img, 16, 0.0, 1.0)?,
        PhantomFormat::Raw => write_raw_f32(&path, size, size, &img.data)?,
    }
    println!("{} checksum {:016x}", path.display(), checksum(&img.data));
    Ok(())
}

/// Loads `stem.raw`, or `stem_ch0.raw`, `stem_ch1.raw`, ... for colour runs.
fn load_planes(dir: &Path, stem: &str) -> Result<ImageBuffer> {
    let single = dir.join(format!("{stem}.raw"));
    if single.exists() {
        let (h, w, data) = read_raw_f32(single)?;
        return ImageBuffer::new(h, w, 1, data);
    }
    let mut planes = Vec::new();
    let mut dims = None;
    while let Ok((h, w, data)) = read_raw_f32(dir.join(format!("{stem}_ch{}.raw", planes.len()))) {
        dims = Some((h, w));
        planes.push(data);
    }
    let (h, w) = dims.ok_or_else(|| Error::Format(format!("no {stem} raw image in {}", dir.display())))?;
    ImageBuffer::from_channels(h, w, &planes)
}

fn cmd_metrics(cli: &Cli, run_dir: Option<&Path>, pair: Option<(&Path, &Path)>, peak: f64) -> Result<()> {
    let (reference, estimate) = match (run_dir, pair) {
        (Some(dir), _) => (load_planes(dir, "truth")?, load_planes(dir, "posterior_mean")?),
        (None, Some((r, e))) => (read_image(r)?, read_image(e)?),
        (None, None) => return Err(Error::Config("give a run directory or --reference and --estimate".into())),
    };
    if (reference.height, reference.width, reference.channels) != (estimate.height, estimate.width, estimate.channels) {
        return Err(Error::Format("reference and estimate shapes differ".into()));
    }
    let report = MetricsReport::compute(
        &reference.data,
        &estimate.data,
        reference.height,
        reference.width,
        reference.channels,
        peak,
    )?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
    print!("{csv}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), &csv)?;
        let json = serde_json::json!({ "schema_version": SCHEMA_VERSION, "metrics": report });
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&json).expect("serializable") + "\n")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Run { config, overrides } => cmd_run(&cli, config, overrides).map(|_| true),
        Command::Oracle => cmd_oracle(&cli),
        Command::Phantom { size, format } => cmd_phantom(&cli, *size, *format).map(|_| true),
        Command::Metrics { run_dir, reference, estimate, peak } => cmd_metrics(
            &cli,
            run_dir.as_deref(),
            reference.as_deref().zip(estimate.as_deref()),
            *peak,
        )
        .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
