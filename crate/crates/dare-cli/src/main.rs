//! Batch experiment driver for the DARE simulator.
//!
//! `run` executes one experiment from a JSON config (CLI flags override
//! config fields), verifies the timed machine against the functional
//! executor, and writes the report. `sweep` reruns one config axis over
//! a value list. `choose` reads a directory of reports and recommends
//! FRE or FULL per block size.
//!
//! Exit codes: 0 success (verification passed), 1 usage error,
//! 2 architectural verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use dare_sim::harness::{
    self, ExperimentConfig, HarnessError, Kernel, MatrixSource, RfuSetting, SweepSpec, Variant,
};
use dare_sim::stats::{Report, ReportFormat};

#[derive(Parser)]
#[command(name = "dare", version, about = "Cycle-level DARE matrix-processing-unit simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and emit its report.
    Run(RunArgs),
    /// Run a one-axis sweep over a shared base config.
    Sweep(SweepArgs),
    /// Recommend FRE or FULL per block size from a report directory.
    Choose(ChooseArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override: kernel (spmm | sddmm).
    #[arg(long)]
    kernel: Option<String>,
    /// Override: variant (baseline | fre | gsa | full | nvr | oracle).
    #[arg(long)]
    variant: Option<String>,
    /// Override: block size for blockification.
    #[arg(long)]
    block: Option<usize>,
    /// Override: synthetic matrix sparsity.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Override: synthetic matrix seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: runahead issue queue capacity.
    #[arg(long)]
    riq: Option<usize>,
    /// Override: vector matrix register entries.
    #[arg(long)]
    vmr: Option<usize>,
    /// Override: runahead filter mode (dynamic | off | static:<cycles>).
    #[arg(long)]
    rfu: Option<String>,
    /// Report destination (default: config's `out`, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, default_value = "json")]
    format: String,
    /// Also dump the generated kernel: <path>.asm and <path>.manifest.json.
    #[arg(long)]
    dump_kernel: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config field to vary (riq, vmr, block, sparsity, seed, dense_dim,
    /// llc_hit_latency, llc_capacity, dram_latency, dram_bandwidth).
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Directory for per-point reports (written as points complete, so
    /// partial results survive a failing sweep).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Summary table destination (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChooseArgs {
    /// Directory of run reports (JSON).
    #[arg(long)]
    reports: PathBuf,
    /// Recommendation table destination (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_rfu(text: &str) -> Result<RfuSetting> {
    match text {
        "dynamic" => Ok(RfuSetting::Dynamic),
        "off" => Ok(RfuSetting::Off),
        other => {
            let t = other
                .strip_prefix("static:")
                .ok_or_else(|| anyhow!(HarnessError::Usage(format!("bad rfu setting '{other}'"))))?;
            let cycles: u64 = t
                .parse()
                .map_err(|_| anyhow!(HarnessError::Usage(format!("bad static threshold '{t}'"))))?;
            Ok(RfuSetting::Static(cycles))
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| anyhow!(HarnessError::Usage(format!("bad config: {e}"))))?;
    Ok(cfg)
}

fn apply_overrides(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<ExperimentConfig> {
    if let Some(k) = &args.kernel {
        cfg.kernel = match k.as_str() {
            "spmm" => Kernel::Spmm,
            "sddmm" => Kernel::Sddmm,
            other => return Err(anyhow!(HarnessError::Usage(format!("bad kernel '{other}'")))),
        };
    }
    if let Some(v) = &args.variant {
        cfg.variant = match v.as_str() {
            "baseline" => Variant::Baseline,
            "fre" => Variant::Fre,
            "gsa" => Variant::Gsa,
            "full" => Variant::Full,
            "nvr" => Variant::Nvr,
            "oracle" => Variant::Oracle,
            other => return Err(anyhow!(HarnessError::Usage(format!("bad variant '{other}'")))),
        };
    }
    if let Some(b) = args.block {
        cfg.block = b;
    }
    if args.sparsity.is_some() || args.seed.is_some() {
        match &mut cfg.matrix {
            MatrixSource::Synthetic { sparsity, seed, .. } => {
                if let Some(s) = args.sparsity {
                    *sparsity = s;
                }
                if let Some(s) = args.seed {
                    *seed = s;
                }
            }
            MatrixSource::MatrixMarket { .. } => {
                return Err(anyhow!(HarnessError::Usage(
                    "--sparsity/--seed apply only to synthetic matrix sources".into()
                )))
            }
        }
    }
    if let Some(r) = args.riq {
        cfg.riq = Some(r);
    }
    if let Some(v) = args.vmr {
        cfg.vmr = Some(v);
    }
    if let Some(r) = &args.rfu {
        cfg.rfu = Some(parse_rfu(r)?);
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(p, content).with_context(|| format!("writing {}", p.display()))?;
        }
        None => println!("{content}"),
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = apply_overrides(load_config(&args.config)?, &args)?;
    if let Some(dump) = &args.dump_kernel {
        cfg.validate().map_err(|e| anyhow!(e))?;
        let program = harness::build_program(&cfg)?;
        std::fs::write(dump.with_extension("asm"), program.to_assembly())?;
        std::fs::write(
            dump.with_extension("manifest.json"),
            serde_json::to_string_pretty(&program.manifest_json())?,
        )?;
    }
    let result = harness::run(&cfg)?;
    let format = match args.format.as_str() {
        "json" => ReportFormat::Json,
        "csv" => ReportFormat::Csv,
        other => {
            return Err(anyhow!(HarnessError::Usage(format!(
                "bad format '{other}' (json | csv)"
            ))))
        }
    };
    write_or_print(cfg.out.as_deref(), &result.report.emit(format))?;
    Ok(())
}

fn parse_values(text: &str) -> Vec<serde_json::Value> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            if let Ok(i) = t.parse::<u64>() {
                serde_json::json!(i)
            } else if let Ok(f) = t.parse::<f64>() {
                serde_json::json!(f)
            } else {
                serde_json::json!(t)
            }
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = load_config(&args.config)?;
    let spec = SweepSpec {
        base,
        axis: args.axis.clone(),
        values: parse_values(&args.values),
    };
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let axis = args.axis.clone();
    let out_dir = args.out_dir.clone();
    let table = harness::sweep(&spec, |point| {
        if let Some(dir) = &out_dir {
            let name = format!("{}_{}.json", axis, point.value.to_string().replace('.', "_"));
            let _ = std::fs::write(dir.join(name), point.report.emit(ReportFormat::Json));
        }
    })?;
    let summary = serde_json::json!({
        "axis": table.axis,
        "points": table
            .points
            .iter()
            .map(|p| serde_json::json!({
                "value": p.value,
                "cycles": p.cycles,
            }))
            .collect::<Vec<_>>(),
        "normalized_cycles": table.normalized_cycles(),
    });
    write_or_print(args.out.as_deref(), &serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_choose(args: ChooseArgs) -> Result<()> {
    let mut reports: Vec<Report> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.reports)
        .with_context(|| format!("reading {}", args.reports.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    for path in entries {
        let text = std::fs::read_to_string(&path)?;
        match serde_json::from_str::<Report>(&text) {
            Ok(r) => reports.push(r),
            Err(_) => continue, // not a run report (e.g. a sweep summary)
        }
    }
    let table = harness::choose_variant(&reports)?;
    write_or_print(args.out.as_deref(), &serde_json::to_string_pretty(&table)?)?;
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(HarnessError::VerificationFailed { .. }) => 2,
        Some(HarnessError::SweepFailed { source, .. })
            if matches!(**source, HarnessError::VerificationFailed { .. }) =>
        {
            2
        }
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Choose(args) => cmd_choose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
