//! Command-line runner: execute scenarios, compare run logs, and sweep
//! domain-gap severities.
//!
//! Exit codes: 0 success, 2 filter divergence (partial log flushed),
//! 3 configuration error.

use clap::{Parser, Subcommand};
use relnav::scenario::{
    self, compare, format_comparison, write_comparison_csv, RunLog, RunSummary, ScenarioConfig,
    ScenarioError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Output directory override; takes precedence over `--out`.
const OUT_DIR_ENV: &str = "RELNAV_OUT_DIR";

#[derive(Parser)]
#[command(name = "relnav", about = "Relative navigation simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario from a TOML/JSON config file.
    Run {
        config: PathBuf,
        /// Override the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force online training on or off.
        #[arg(long, value_parser = parse_on_off)]
        ost: Option<bool>,
        /// Output directory for the run and summary CSVs.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Also emit a gnuplot script for the error curves.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Summarize one or more run logs into a comparison table.
    Compare {
        logs: Vec<PathBuf>,
        /// Write the comparison table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario across gap severities, with and without online
    /// training, and print the comparison.
    Sweep {
        config: PathBuf,
        /// Comma-separated severity multipliers applied to the gap model.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,1.5")]
        severities: Vec<f64>,
        /// Seeds per severity.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

fn out_dir(cli_out: &Path) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cli_out.to_path_buf())
}

fn run_name(cfg: &ScenarioConfig) -> String {
    format!(
        "{}_seed{}_ost-{}",
        cfg.name,
        cfg.seed,
        if cfg.ost.enabled { "on" } else { "off" }
    )
}

fn write_log(log: &RunLog, dir: &Path, name: &str, gnuplot: bool) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{name}.csv"));
    log.write_csv(&csv)?;
    log.write_summary_csv(&dir.join(format!("{name}_summary.csv")))?;
    if gnuplot {
        write_gnuplot(&dir.join(format!("{name}.gp")), &csv)?;
    }
    Ok(csv)
}

fn write_gnuplot(path: &Path, csv: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let data = csv.file_name().unwrap().to_string_lossy();
    writeln!(
        f,
        "set datafile separator ','\n\
         set xlabel 'time [s]'\n\
         set multiplot layout 2,1\n\
         set ylabel 'E_t [m]'\n\
         plot '{data}' every ::2 using 2:27 with lines title 'filter', \\\n\
         \x20    '{data}' every ::2 using 2:32 with lines title 'pnp'\n\
         set ylabel 'E_q [deg]'\n\
         plot '{data}' every ::2 using 2:28 with lines title 'filter', \\\n\
         \x20    '{data}' every ::2 using 2:33 with lines title 'pnp'\n\
         unset multiplot"
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                ScenarioError::Config(_) => ExitCode::from(3),
                ScenarioError::FilterDiverged { .. } => ExitCode::from(2),
                ScenarioError::Io(_) => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ScenarioError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            ost,
            out,
            gnuplot,
        } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(ost) = ost {
                cfg.ost.enabled = ost;
            }
            let dir = out_dir(&out);
            let name = run_name(&cfg);
            match scenario::run(&cfg) {
                Ok(log) => {
                    let csv = write_log(&log, &dir, &name, gnuplot)?;
                    if let Some(s) = &log.summary {
                        println!(
                            "{name}: e_t_ss = {:.4} m, e_q_ss = {:.4} deg (pnp: {:.4} m, {:.4} deg)",
                            s.e_t_ss_filter, s.e_q_ss_filter, s.e_t_ss_pnp, s.e_q_ss_pnp
                        );
                    }
                    println!("log written to {}", csv.display());
                    Ok(())
                }
                Err(ScenarioError::FilterDiverged {
                    epoch,
                    reason,
                    partial,
                }) => {
                    let csv = write_log(&partial, &dir, &format!("{name}_partial"), false)?;
                    eprintln!("partial log written to {}", csv.display());
                    Err(ScenarioError::FilterDiverged {
                        epoch,
                        reason,
                        partial,
                    })
                }
                Err(e) => Err(e),
            }
        }
        Command::Compare { logs, out } => {
            if logs.is_empty() {
                return Err(ScenarioError::Config("no logs given".into()));
            }
            let summaries: Vec<RunSummary> = logs
                .iter()
                .map(|p| RunLog::read_csv_summary(p))
                .collect::<Result<_, _>>()?;
            let rows = compare(&summaries);
            print!("{}", format_comparison(&rows));
            if let Some(out) = out {
                write_comparison_csv(&rows, &out)?;
                println!("comparison written to {}", out.display());
            }
            Ok(())
        }
        Command::Sweep {
            config,
            severities,
            seeds,
            out,
        } => {
            let base = ScenarioConfig::load(&config)?;
            let dir = out_dir(&out);
            std::fs::create_dir_all(&dir)?;
            let base_gap = base.gap;
            let mut summaries = Vec::new();
            for &severity in &severities {
                for seed in 0..seeds {
                    for ost_on in [false, true] {
                        let mut cfg = base.clone();
                        cfg.gap = base_gap.scaled(severity);
                        cfg.seed = base.seed + seed;
                        cfg.ost.enabled = ost_on;
                        cfg.name = format!("{}_sev{:.2}", base.name, severity);
                        let log = scenario::run(&cfg)?;
                        write_log(&log, &dir, &run_name(&cfg), false)?;
                        if let Some(s) = log.summary {
                            summaries.push(s);
                        }
                    }
                }
            }
            let rows = compare(&summaries);
            print!("{}", format_comparison(&rows));
            write_comparison_csv(&rows, &dir.join("sweep_comparison.csv"))?;
            Ok(())
        }
    }
}
