//! Command-line interface: `demo-data`, `degrade`, `restore`, `evaluate`, `ablate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig, CONFIG_ENV};
use crate::error::{Error, StageExt};
use crate::io::{export_frames, load_flow, load_raw, save_flow, save_raw};
use crate::pipeline::{degrade, generate_synthetic, run_restoration, RunReport, SyntheticKind, TaskSpec};
use crate::quality::evaluate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const ABLATION_HEADER: &str = "strategy,m,r,psnr,ssim,quality,warp_error";

fn config_help() -> String {
    format!(
        "Configuration precedence: flags > --set > config file > defaults.\n\
         The config file defaults to ${CONFIG_ENV} when --config is absent.\n\n\
         Default configuration:\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "vidfuse",
    version,
    about = "Zero-shot video restoration with fused diffusion trajectories"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clean clip, its flow and its degraded version.
    DemoData(DemoDataArgs),
    /// Apply the configured degradation to a clip.
    Degrade(DegradeArgs),
    /// Restore a degraded clip.
    #[command(after_long_help = config_help())]
    Restore(RestoreArgs),
    /// Print metrics of a clip against a reference as CSV.
    Evaluate(EvaluateArgs),
    /// Sweep search settings (M, r) plus the fixed-ratio strategy.
    #[command(after_long_help = config_help())]
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set search.m=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the configuration precedence chain to stderr.
    #[arg(long, short = 'v')]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct DemoDataArgs {
    /// Fixture kind: moving_square, ramp or static.
    #[arg(long, default_value = "moving_square")]
    pub kind: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// Degraded clip (overrides paths.input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ground-truth clip for PSNR/SSIM (overrides paths.ground_truth).
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Flow file for warping error (overrides paths.flow).
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Output directory (overrides paths.out_dir).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Keep the fusion ratios at their initial values (no search).
    #[arg(long)]
    pub fixed_ratios: bool,
    /// Skip temporal-strengthening post-processing.
    #[arg(long)]
    pub no_postprocess: bool,
    /// Run the image branch alone.
    #[arg(long)]
    pub no_fusion: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Flow file; adds the warp_error column.
    #[arg(long)]
    pub flow: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Candidate counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub m: Vec<usize>,
    /// Initial radii to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.40,0.45,0.50")]
    pub r: Vec<f64>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

impl ConfigArgs {
    fn config_path(&self) -> Option<PathBuf> {
        self.config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
    }

    pub fn load(&self) -> crate::Result<RunConfig> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<crate::Result<Vec<_>>>()?;
        let path = self.config_path();
        let mut cfg = RunConfig::load(path.as_deref(), &overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.verbose {
            let sets: Vec<String> = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            eprintln!(
                "config: defaults < file {} < --set [{}] < flags{}; seed = {}",
                path.as_ref().map_or("(none)".into(), |p| p.display().to_string()),
                sets.join(", "),
                self.seed.map_or(String::new(), |s| format!(" [--seed {s}]")),
                cfg.seed
            );
        }
        Ok(cfg)
    }
}

impl RunArgs {
    fn load(&self) -> crate::Result<RunConfig> {
        let mut cfg = self.cfg.load()?;
        let p = &mut cfg.paths;
        for (flag, slot) in [
            (&self.input, &mut p.input),
            (&self.ground_truth, &mut p.ground_truth),
            (&self.flow, &mut p.flow),
            (&self.out_dir, &mut p.out_dir),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(cfg: &RunConfig) -> crate::Result<PathBuf> {
        cfg.paths.out_dir.clone().ok_or_else(|| {
            Error::Config("an output directory is required (--out-dir or paths.out_dir)".into())
        })
    }
}

fn write_file(path: &Path, contents: &str) -> crate::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_demo_data(a: &DemoDataArgs) -> CliResult {
    let kind: SyntheticKind = a.kind.parse().map_err(|e: Error| CliError {
        code: EXIT_USAGE,
        message: e.to_string(),
    })?;
    let cfg = a.cfg.load()?;
    let (clean, flow) = generate_synthetic(kind, a.frames, a.height, a.width, cfg.seed)?;
    let degraded = degrade(&clean, &cfg)?;
    create_dir(&a.out)?;
    save_raw(&clean, a.out.join("clean.vten"))?;
    save_flow(&flow, a.out.join("flow.vten"))?;
    save_raw(&degraded, a.out.join("degraded.vten"))?;
    export_frames(&clean, a.out.join("previews").join("clean"))?;
    export_frames(&degraded, a.out.join("previews").join("degraded"))?;
    Ok(())
}

fn cmd_degrade(a: &DegradeArgs) -> CliResult {
    let cfg = a.cfg.load()?;
    let clean = load_raw(&a.input)?;
    save_raw(&degrade(&clean, &cfg)?, &a.out)?;
    Ok(())
}

/// Writes `restored.vten`, `report.json`, the two CSV traces and frame previews.
pub fn write_run_outputs(dir: &Path, restored: &crate::VideoTensor, report: &RunReport) -> crate::Result<()> {
    create_dir(dir)?;
    save_raw(restored, dir.join("restored.vten"))?;
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("lambda_trace.csv"), &report.lambda_trace_csv())?;
    write_file(&dir.join("candidates.csv"), &report.candidates_csv())?;
    export_frames(restored, dir.join("previews"))
}

fn cmd_restore(a: &RestoreArgs) -> CliResult {
    let mut cfg = a.run.load()?;
    if a.fixed_ratios {
        cfg.search.fixed_mode = true;
    }
    if a.no_postprocess {
        cfg.postprocess.enabled = false;
    }
    if a.no_fusion {
        cfg.fusion.enabled = false;
    }
    let out = RunArgs::out_dir(&cfg)?;
    let spec = TaskSpec::from_paths(&cfg).stage("load")?;
    let (restored, report) = run_restoration(&spec, &cfg)?;
    write_run_outputs(&out, &restored, &report).stage("write")?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let v = load_raw(&a.input)?;
    let r = load_raw(&a.reference)?;
    let flow = a.flow.as_ref().map(load_flow).transpose()?;
    let m = evaluate(&v, Some(&r), flow.as_ref())?;
    let mut out = String::from("psnr,ssim,sharpness");
    if flow.is_some() {
        out.push_str(",warp_error");
    }
    out.push('\n');
    out.push_str(&format!(
        "{},{},{}",
        fmt_opt(m.psnr),
        fmt_opt(m.ssim),
        m.sharpness
    ));
    if flow.is_some() {
        out.push_str(&format!(",{}", fmt_opt(m.warp_error)));
    }
    out.push('\n');
    print!("{out}");
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: &'static str,
    pub m: Option<usize>,
    pub r: Option<f64>,
    pub report: RunReport,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        let m = &self.report.metrics;
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy,
            self.m.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt(self.r),
            fmt_opt(m.psnr),
            fmt_opt(m.ssim),
            m.sharpness,
            fmt_opt(m.warp_error)
        )
    }
}

/// Runs the `(m, r)` grid plus one fixed-ratio run, concurrently.
pub fn run_ablation(
    spec: &TaskSpec,
    base: &RunConfig,
    ms: &[usize],
    rs: &[f64],
) -> crate::Result<Vec<AblationRow>> {
    let mut plans: Vec<(&'static str, Option<usize>, Option<f64>, RunConfig)> = Vec::new();
    for &m in ms {
        for &r in rs {
            let mut cfg = base.clone();
            cfg.search.m = m;
            cfg.search.r0 = r;
            cfg.search.fixed_mode = false;
            cfg.search.parallel = false;
            plans.push(("search", Some(m), Some(r), cfg));
        }
    }
    let mut fixed = base.clone();
    fixed.search.fixed_mode = true;
    plans.push(("fixed", None, None, fixed));

    std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .into_iter()
            .map(|(strategy, m, r, cfg)| {
                s.spawn(move || {
                    run_restoration(spec, &cfg).map(|(_, report)| AblationRow {
                        strategy,
                        m,
                        r,
                        report,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

fn cmd_ablate(a: &AblateArgs) -> CliResult {
    let cfg = a.run.load()?;
    if a.m.is_empty() || a.r.is_empty() {
        return Err(CliError {
            code: EXIT_USAGE,
            message: "--m and --r need at least one value".into(),
        });
    }
    let spec = TaskSpec::from_paths(&cfg).stage("load")?;
    let rows = run_ablation(&spec, &cfg, &a.m, &a.r)?;
    let csv = ablation_csv(&rows);
    if let Some(dir) = &cfg.paths.out_dir {
        create_dir(dir)?;
        write_file(&dir.join("ablation.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::DemoData(a) => cmd_demo_data(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
