use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evtrack::cli_io::{cmd_evaluate, cmd_simulate, cmd_track, load_config, CliError, RunConfig};

/// Fraction of rejected frames above which `track` exits with status 2.
const MAX_REJECTED_FRACTION: f64 = 0.2;

#[derive(Parser)]
#[command(name = "evtrack", version, about = "Event camera tracking against semi-dense 3D edge maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence directory.
    Simulate {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a sequence and write the estimated trajectory.
    Track {
        /// Run configuration; defaults to `<seq>/config.toml`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_stsm: bool,
        #[arg(long)]
        no_culling: bool,
        #[arg(long, value_name = "HZ")]
        tsm_rate: Option<f64>,
    },
    /// Compare an estimated trajectory with ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn config_or_default(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let config = config_or_default(config.as_ref())?;
            let s = cmd_simulate(&config, &out)?;
            println!(
                "wrote {}: {} events, {} depth frames, {} map points, {} ground-truth poses",
                out.display(),
                s.events,
                s.depth_frames,
                s.map_points,
                s.groundtruth
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Track {
            config,
            seq,
            out,
            no_stsm,
            no_culling,
            tsm_rate,
        } => {
            let path = config.unwrap_or_else(|| seq.join("config.toml"));
            let mut config = load_config(&path)?;
            if no_stsm {
                config.tracker.use_stsm = false;
            }
            if no_culling {
                config.tracker.use_occlusion_culling = false;
            }
            if let Some(rate) = tsm_rate {
                config.tracker.tsm_rate = rate;
            }
            let s = cmd_track(&config, &seq, &out)?;
            println!(
                "{} frames, {} rejected ({:.1}%), {} keyframes, {:.2} s; report in {}",
                s.frames,
                s.rejected,
                100.0 * s.rejected_fraction(),
                s.keyframes,
                s.runtime_s,
                s.report_path.display()
            );
            if s.rejected_fraction() > MAX_REJECTED_FRACTION {
                eprintln!("error: more than {:.0}% of frames rejected", 100.0 * MAX_REJECTED_FRACTION);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { est, gt, json } => {
            let m = cmd_evaluate(&est, &gt)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialise"));
            } else {
                let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("pairs      {}", m.pairs);
                println!("t_ate      {:.4} cm", m.t_ate_cm);
                println!("R_ate      {:.4} deg", m.r_ate_deg);
                println!("t_rpe      {} cm/s", opt(m.t_rpe_cm_s));
                println!("R_rpe      {} deg/s", opt(m.r_rpe_deg_s));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 1; clap's own default of 2 means too many rejected frames here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
