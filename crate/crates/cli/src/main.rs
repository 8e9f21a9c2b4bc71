use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use netdecouple::complements::{apply_pipeline, DimPolicy, Pipeline, Step};
use netdecouple::decouple::{energy_profile, Ordering, RankPolicy};
use netdecouple::flopsmodel::{compare_models, human_flops, FlopsReport};
use netdecouple::model::{Layer, Model};
use netdecouple::modelio::{load_model_with, save_model, LoadOptions};
use netdecouple::validate::{validate_models, ValidationOptions, APPROX_TOL, EXACT_TOL};

/// Decouple regular convolutions into sums of depthwise separable ones.
#[derive(Parser)]
#[command(name = "netdecouple", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulative energy ratio per layer and block count, as CSV.
    Profile(ProfileArgs),
    /// Transform every layer and write the new model plus a FLOPs report.
    Decouple(DecoupleArgs),
    /// Compare two models layer by layer on random inputs.
    Validate(ValidateArgs),
    /// Theoretical FLOPs of a model, or of a transformed model against its original.
    Flops(FlopsArgs),
    /// Check a manifest and its weight files.
    Check(CheckArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Model directory or manifest file.
    model: PathBuf,
    /// Load weights containing NaN or Inf instead of rejecting them.
    #[arg(long)]
    allow_non_finite: bool,
}

impl ModelArg {
    fn load(&self) -> Result<Model> {
        load(&self.model, self.allow_non_finite)
    }
}

fn load(path: &Path, allow_non_finite: bool) -> Result<Model> {
    load_model_with(path, LoadOptions { allow_non_finite })
        .with_context(|| format!("loading {}", path.display()))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrderingChoice {
    Both,
    Dwpw,
    Pwdw,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "both")]
    ordering: OrderingChoice,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecoupleArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Output directory for the transformed model and reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dwpw")]
    ordering: Ordering,
    /// `exact`, `fixed:T` or `energy:TAU`.
    #[arg(long, default_value = "exact")]
    policy: RankPolicy,
    /// Leave the first layer untouched.
    #[arg(long)]
    skip_first: bool,
    /// JSON file with per-layer overrides: {"overrides": {"conv1": "fixed:2", "conv2": "skip"}}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel-decompose every non-1x1 layer first (`fixed:D` or `energy:TAU`).
    #[arg(long)]
    channel: Option<DimPolicy>,
    /// Spatial-decompose every non-1x1 layer first (`fixed:D` or `energy:TAU`).
    #[arg(long)]
    spatial: Option<DimPolicy>,
    /// Only run the channel/spatial steps.
    #[arg(long)]
    no_decouple: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Exact,
    Approx,
}

#[derive(Args)]
struct ValidateArgs {
    original: PathBuf,
    transformed: PathBuf,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Input height and width for every layer (default: the model's own, capped at 32).
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    hw: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the tolerance implied by --mode.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum, default_value = "exact")]
    mode: Mode,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    allow_non_finite: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Transformed model to compare against.
    transformed: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    model: ModelArg,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DecoupleConfig {
    #[serde(default)]
    overrides: BTreeMap<String, String>,
}

/// Per-layer setting from the config file.
#[derive(Clone, Copy)]
enum Override {
    Skip,
    Policy(RankPolicy),
}

fn read_overrides(path: &Path, model: &Model) -> Result<BTreeMap<String, Override>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: DecoupleConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let names: BTreeSet<&str> = model.layers.iter().map(|l| l.layer.name()).collect();
    let mut out = BTreeMap::new();
    for (name, value) in cfg.overrides {
        if !names.contains(name.as_str()) {
            bail!("override for unknown layer `{name}`");
        }
        let o = if value == "skip" {
            Override::Skip
        } else {
            Override::Policy(
                value
                    .parse()
                    .with_context(|| format!("override for `{name}`"))?,
            )
        };
        out.insert(name, o);
    }
    Ok(out)
}

fn run_profile(args: ProfileArgs) -> Result<()> {
    let model = args.model.load()?;
    let orderings: &[Ordering] = match args.ordering {
        OrderingChoice::Both => &Ordering::ALL,
        OrderingChoice::Dwpw => &[Ordering::DwPw],
        OrderingChoice::Pwdw => &[Ordering::PwDw],
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "ordering", "t", "cumulative_ratio", "K"])?;
    for entry in &model.layers {
        let Layer::Conv(k) = &entry.layer else {
            log::info!(
                "skipping `{}`: already {}",
                entry.layer.name(),
                entry.layer.kind()
            );
            continue;
        };
        for &ordering in orderings {
            let p = energy_profile(k, ordering)?;
            for (t, ratio) in p.cumulative_ratio.iter().enumerate() {
                w.write_record([
                    k.name().to_string(),
                    ordering.to_string(),
                    (t + 1).to_string(),
                    ratio.to_string(),
                    p.decoupling_rank.to_string(),
                ])?;
            }
        }
    }
    let bytes = w.into_inner()?;
    match args.out {
        Some(path) => {
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn run_decouple(args: DecoupleArgs) -> Result<()> {
    let model = args.model.load()?;
    let overrides = match &args.config {
        Some(path) => read_overrides(path, &model)?,
        None => BTreeMap::new(),
    };
    let skipped = |name: &str| matches!(overrides.get(name), Some(Override::Skip));
    let dim_step = |policy: DimPolicy| -> Vec<Option<DimPolicy>> {
        model
            .layers
            .iter()
            .map(|l| {
                let area = l.layer.shape()[2] * l.layer.shape()[3];
                let eligible =
                    matches!(l.layer, Layer::Conv(_)) && area > 1 && !skipped(l.layer.name());
                eligible.then_some(policy)
            })
            .collect()
    };

    let mut steps = Vec::new();
    if let Some(p) = args.channel {
        steps.push(Step::ChannelDecompose(dim_step(p)));
    }
    if let Some(p) = args.spatial {
        steps.push(Step::SpatialDecompose(dim_step(p)));
    }
    if !args.no_decouple {
        let policies = model
            .layers
            .iter()
            .map(|l| match overrides.get(l.layer.name()) {
                Some(Override::Skip) => None,
                Some(Override::Policy(p)) => Some(*p),
                None if matches!(l.layer, Layer::Decoupled(_)) => None,
                None => Some(args.policy),
            })
            .collect();
        steps.push(Step::Decouple {
            ordering: args.ordering,
            policies,
        });
    }
    let pipeline = Pipeline {
        steps,
        skip_first: args.skip_first,
    };
    let out = apply_pipeline(&model, &pipeline)?;

    save_model(&out.model, &args.out)?;
    write(&args.out.join("flops_report.json"), out.report.to_json())?;
    write(&args.out.join("flops_report.csv"), out.report.to_csv())?;
    write(
        &args.out.join("transform_log.json"),
        serde_json::to_string_pretty(&out.log)? + "\n",
    )?;

    for r in &out.log {
        println!(
            "{:<24} {:<9} {:<20} rel_err={:.3e}",
            r.layer, r.step, r.detail, r.relative_error
        );
    }
    print_total(&out.report);
    Ok(())
}

fn write(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_total(r: &FlopsReport) {
    println!(
        "total: {} -> {} FLOPs, speedup {:.4}x",
        human_flops(r.total_orig),
        human_flops(r.total_new),
        r.ratio
    );
}

/// Returns whether validation passed.
fn run_validate(args: ValidateArgs) -> Result<bool> {
    let orig = load(&args.original, args.allow_non_finite)?;
    let new = load(&args.transformed, args.allow_non_finite)?;
    let tol = args.tol.unwrap_or(match args.mode {
        Mode::Exact => EXACT_TOL,
        Mode::Approx => APPROX_TOL,
    });
    let opts = ValidationOptions {
        trials: args.trials,
        hw: args.hw.map(|v| (v[0], v[1])),
        seed: args.seed,
        tol,
    };
    let report = validate_models(&orig, &new, &opts)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for l in &report.layers {
            println!(
                "{:<24} {:<9} max_rel_err={:.3e}",
                l.layer, l.kind, l.max_rel_error
            );
        }
        println!(
            "{}: max relative error {:.3e} (tolerance {:.1e})",
            if report.passed { "PASS" } else { "FAIL" },
            report.max_rel_error,
            report.tol
        );
    }
    Ok(report.passed)
}

fn run_flops(args: FlopsArgs) -> Result<()> {
    let orig = args.model.load()?;
    let report = match &args.transformed {
        Some(path) => compare_models(&orig, &load(path, args.model.allow_non_finite)?)?,
        None => FlopsReport::single(&orig)?,
    };
    match args.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Table => {
            println!(
                "{:<24} {:<9} {:>16} {:>16} {:>9}",
                "layer", "kind", "flops_orig", "flops_new", "ratio"
            );
            for l in &report.layers {
                println!(
                    "{:<24} {:<9} {:>16} {:>16} {:>9.4}",
                    l.layer, l.kind, l.flops_orig, l.flops_new, l.ratio
                );
            }
            print_total(&report);
        }
    }
    Ok(())
}

fn run_check(args: CheckArgs) -> Result<()> {
    let model = args.model.load()?;
    let report = FlopsReport::single(&model)?;
    println!(
        "ok: `{}`, {} layers, input {:?}, {} FLOPs",
        model.name,
        model.len(),
        model.input_resolution,
        human_flops(report.total_orig)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile(a) => run_profile(a).map(|_| true),
        Command::Decouple(a) => run_decouple(a).map(|_| true),
        Command::Validate(a) => run_validate(a),
        Command::Flops(a) => run_flops(a).map(|_| true),
        Command::Check(a) => run_check(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
