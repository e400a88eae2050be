use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sip_core::checks::table_checks;
use sip_core::experiment::{
    dump_figures, emit_report, fit_gp, instance_data, render_table, run_experiment, run_instance,
    train_sip, ExperimentConfig, Report, FIG_GP_PREDICTIVE, FIG_SIP_SAMPLES, REPORT_JSON, TABLE_TXT,
    TRACE_INSTANCE0,
};
use sip_core::bridge::dump_predictive_samples;
use sip_core::datasets::{grid, X_HIGH, X_LOW};
use sip_core::exact_gp::dump_gp_predictive;
use sip_core::rng::{Purpose, Rng};
use sip_core::SipError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "sip", version, about = "Sparse implicit process regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sip.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full multi-instance experiment with reports and figure data.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Exit with status 4 if the aggregate misses its target bands.
        #[arg(long)]
        check: bool,
    },
    /// Fit the exact GP on one instance and write its predictive.
    FitGp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Train SIP on one instance and write its trace and predictive draws.
    TrainSip {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Re-render the table (and optionally check bands) from a report.json.
    Metrics {
        report: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Run one instance and write all figure CSVs.
    DumpFigures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_instance(cfg: &ExperimentConfig, instance: usize) -> Result<ExperimentConfig> {
    if instance >= cfg.n_instances {
        return Err(SipError::Config(format!(
            "instance {instance} out of range for n_instances {}",
            cfg.n_instances
        ))
        .into());
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg.clone())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_checks(report: &Report) -> Result<bool> {
    let mut ok = true;
    let mut kinds = Vec::new();
    for r in &report.records {
        if !kinds.contains(&r.dataset) {
            kinds.push(r.dataset);
        }
    }
    for kind in kinds {
        for c in table_checks(report, kind)? {
            println!("{} {kind}.{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            ok &= c.passed;
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { cfg, jobs, check } => {
            let cfg = load_config(&cfg)?;
            let result = run_experiment(&cfg, jobs)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            let (table, _) = render_table(&result.report.aggregate)?;
            print!("{table}");
            if check && !print_checks(&result.report)? {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::FitGp { cfg, instance } => {
            let cfg = single_instance(&load_config(&cfg)?, instance)?;
            let ds = instance_data(&cfg, instance)?;
            let gp = fit_gp(&ds, &cfg.gp)?;
            let st = ds.standardization.context("dataset is standardized")?;
            let xs = grid(X_LOW, X_HIGH, cfg.figure_grid);
            let (mean, var) = gp.predict_original(&xs, &st)?;
            let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            dump_gp_predictive(&xs, &mean, &std, &cfg.out_dir.join(FIG_GP_PREDICTIVE))?;
            write_json(&cfg.out_dir.join("gp_fit.json"), &serde_json::json!({
                "hyper": gp.model.hyper,
                "metrics": gp.record,
            }))?;
            println!("{}", serde_json::to_string(&gp.record)?);
        }
        Command::TrainSip { cfg, instance } => {
            let cfg = single_instance(&load_config(&cfg)?, instance)?;
            let ds = instance_data(&cfg, instance)?;
            let sip = train_sip(&ds, &cfg.sip_for(ds.seed))?;
            let st = ds.standardization.context("dataset is standardized")?;
            let xs = grid(X_LOW, X_HIGH, cfg.figure_grid);
            let mut rng = Rng::for_purpose(ds.seed, Purpose::Figures);
            let mix = sip.predict_original(&xs, &st, &mut rng)?;
            let draws = mix.sample(&mut rng, cfg.figure_predictive_draws)?;
            dump_predictive_samples(&xs, &draws, &cfg.out_dir.join(FIG_SIP_SAMPLES))?;
            sip.trace.write_csv(&cfg.out_dir.join(TRACE_INSTANCE0))?;
            write_json(&cfg.out_dir.join("sip_metrics.json"), &sip.record)?;
            println!("{}", serde_json::to_string(&sip.record)?);
        }
        Command::Metrics { report, check } => {
            let text = fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let parsed = Report::from_json(&text)?;
            let dir = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let (report, warnings) = emit_report(&parsed.records, &parsed.failures, dir)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", fs::read_to_string(dir.join(TABLE_TXT))?);
            if check && !print_checks(&report)? {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::DumpFigures { cfg, instance } => {
            let cfg = single_instance(&load_config(&cfg)?, instance)?;
            let inst = run_instance(&cfg, instance)?;
            dump_figures(&cfg, &inst, &cfg.out_dir)?;
            emit_report(&inst.records(), &[], &cfg.out_dir)?;
            println!("wrote figures and {REPORT_JSON} for instance {instance} to {}", cfg.out_dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SipError>() {
        Some(SipError::Config(_)) | Some(SipError::Json(_)) => EXIT_CONFIG,
        Some(e) if e.is_numerical() => EXIT_NUMERIC,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
