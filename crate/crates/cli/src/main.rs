//! Command-line front end: synthetic data, partitioning, single-model
//! training, penalty tuning, full experiments and report rendering.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairfed::data::{generate_synthetic, write_partition};
use fairfed::federation::Framework;
use fairfed::harness::{
    emit_report, federation_for, load_config, prepare_data, read_result_json, report_rows, run_on_clients,
    sweep_base_config, DataSource, ExperimentConfig, ExperimentResult, ModelKind, ReportFormat,
};
use fairfed::objective::PenaltyForm;
use fairfed::trainer::write_sweep_csv;
use fairfed::tuning::{select_lambda, two_step_gamma, write_gamma_csv, LambdaPolicy, RefineMode};

#[derive(Parser, Debug)]
#[command(name = "fairfed", version)]
#[command(about = "Federated fairness-penalized logistic regression experiments")]
#[command(after_help = "Examples:
  fairfed run --out-dir out
  fairfed run --config experiment.toml --formats csv,md
  fairfed run --dump-config > experiment.toml
  fairfed tune-lambda --config experiment.toml --lambda-policy max
  fairfed report --result out/result.json --out-dir rendered")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort as CSV
    Synth(SynthArgs),
    /// Split the configured cohort into per-site CSV files plus a manifest
    Partition(PartitionArgs),
    /// Train and evaluate one roster model
    Train(TrainArgs),
    /// Run the per-site lambda sweeps and print the lambda candidates
    TuneLambda(TuneLambdaArgs),
    /// Run the two-step gamma search for one lambda
    TuneGamma(TuneGammaArgs),
    /// Run a full experiment and write its reports
    Run(RunArgs),
    /// Render reports from a saved result.json
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8000)]
    n: usize,
    /// Number of features
    #[arg(long, default_value_t = 6)]
    d: usize,
    /// Direct effect of group membership on the outcome logit
    #[arg(long, default_value_t = 0.5)]
    bias: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Options shared by every subcommand that reads an experiment config.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); the built-in synthetic demo when omitted
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Replace every seed in the config (data, partition, split, training)
    #[arg(long)]
    seed: Option<u64>,
    /// Penalty form
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    /// Aggregation of per-site lambda sweeps into candidates
    #[arg(long, value_enum)]
    lambda_policy: Option<PolicyArg>,
    /// Pin lambda instead of sweeping
    #[arg(long)]
    lambda: Option<f64>,
    /// Pin gamma instead of searching
    #[arg(long)]
    gamma: Option<f64>,
    /// Train the clients of each round one after another
    #[arg(long)]
    sequential: bool,
    /// Output directory (overrides the config)
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// One of central, local, fedavg, perfedavg, fair-fedavg, fair-perfedavg
    #[arg(long)]
    model: String,
}

#[derive(Args, Debug)]
struct TuneLambdaArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TuneGammaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = FrameworkArg::Fedavg)]
    framework: FrameworkArg,
    /// Refined-range convention
    #[arg(long, value_enum)]
    refine: Option<RefineArg>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated roster, e.g. central,fedavg,fair-fedavg
    #[arg(long, value_delimiter = ',')]
    roster: Option<Vec<String>>,
    /// Comma-separated subset of csv, md, meta, json
    #[arg(long, value_delimiter = ',', default_value = "csv,md,meta,json")]
    formats: Vec<String>,
    /// Print the resolved config as TOML and exit
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(short, long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv,md,meta")]
    formats: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FormArg {
    Squared,
    Signed,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PolicyArg {
    Min,
    Max,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FrameworkArg {
    Fedavg,
    Perfedavg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RefineArg {
    One,
    Two,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path).with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::demo(),
        };
        if let Some(seed) = self.seed {
            if let DataSource::Synthetic { seed: s, .. } = &mut cfg.data {
                *s = seed;
            }
            if let Some(p) = &mut cfg.partition {
                p.seed = seed;
            }
            cfg.split.seed = seed;
            cfg.federation.train.seed = seed;
        }
        if let Some(f) = self.form {
            cfg.penalty.form = match f {
                FormArg::Squared => PenaltyForm::SquaredAverage,
                FormArg::Signed => PenaltyForm::SignedAverage,
            };
        }
        if let Some(p) = self.lambda_policy {
            cfg.penalty.tuning.lambda_policy = match p {
                PolicyArg::Min => LambdaPolicy::Min,
                PolicyArg::Max => LambdaPolicy::Max,
            };
        }
        if self.lambda.is_some() {
            cfg.penalty.lambda = self.lambda;
        }
        if self.gamma.is_some() {
            cfg.penalty.gamma = self.gamma;
        }
        if self.sequential {
            cfg.federation.parallel = false;
        }
        if let Some(dir) = &self.out_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_formats(names: &[String]) -> Result<Vec<ReportFormat>> {
    let mut out = Vec::new();
    for n in names {
        let f: ReportFormat = n.trim().parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        bail!("no output formats requested");
    }
    Ok(out)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn print_table(result: &ExperimentResult) {
    println!(
        "{:<14} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "Testing Data", "Model", "AUC", "DPD", "DPR", "EOD", "EOR"
    );
    for (label, kind, vals) in report_rows(result) {
        println!(
            "{:<14} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
            label,
            kind.label(),
            fmt(vals[0]),
            fmt(vals[1]),
            fmt(vals[2]),
            fmt(vals[3]),
            fmt(vals[4])
        );
    }
    for m in &result.models {
        if m.kind.is_fair() {
            println!("{}: lambda = {}, gamma = {}", m.kind.label(), m.penalty.lambda, m.penalty.gamma);
        }
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let ds = generate_synthetic(args.n, args.d, args.bias, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    ds.write_csv(&args.out)?;
    let [g0, g1] = ds.group_counts();
    println!(
        "wrote {} rows to {} (group 0: {g0}, group 1: {g1}, prevalence {:.4})",
        ds.len(),
        args.out.display(),
        ds.prevalence()
    );
    Ok(())
}

fn partition_cmd(args: &PartitionArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let spec = cfg
        .partition
        .as_ref()
        .context("the config has no [partition] section")?;
    let cohort = match &cfg.data {
        DataSource::Synthetic { n, d, bias, seed } => generate_synthetic(*n, *d, *bias, *seed)?,
        DataSource::Csv { path, roles } => fairfed::data::load_csv(path, roles)?,
        DataSource::Clients { .. } => bail!("the config's data is already partitioned"),
    };
    let sites = fairfed::data::partition(&cohort, spec)?;
    let manifest = write_partition(&cfg.output_dir, &sites)?;
    println!("client,file,n,group0,group1,prevalence");
    for e in manifest {
        println!("{},{},{},{},{},{:.4}", e.client, e.file, e.n, e.group0, e.group1, e.prevalence);
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let kind: ModelKind = args.model.parse()?;
    cfg.roster = vec![kind];
    cfg.subgroup_attribute = None;
    let prepared = prepare_data(&cfg)?;
    let result = run_on_clients(&cfg, &prepared.clients, prepared.standardization)?;
    print_table(&result);
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let path = cfg.output_dir.join(format!("model_{}.json", kind.key()));
    let model = result.model(kind).expect("roster model present");
    fs::write(&path, serde_json::to_string_pretty(&model.weights)?).with_context(|| format!("writing {}", path.display()))?;
    println!("weights written to {}", path.display());
    Ok(())
}

fn tune_lambda(args: &TuneLambdaArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let prepared = prepare_data(&cfg)?;
    let t = &cfg.penalty.tuning;
    let sel = select_lambda(
        &prepared.clients,
        &sweep_base_config(&cfg),
        &t.sweep,
        t.lambda_policy,
        t.lambda_count,
    )?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    for (k, s) in sel.per_client.iter().enumerate() {
        let path = cfg.output_dir.join(format!("lambda_sweep_client_{}.csv", k + 1));
        write_sweep_csv(&path, s)?;
        println!(
            "client {}: baseline {:.4}, lambda_k = {}{} ({})",
            k + 1,
            s.baseline,
            s.lambda_k,
            if s.reached_max { " (reached max)" } else { "" },
            path.display()
        );
    }
    println!("candidates: {:?}", sel.candidates);
    Ok(())
}

fn tune_gamma(args: &TuneGammaArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let Some(lambda) = cfg.penalty.lambda else {
        bail!("tune-gamma needs a lambda (--lambda or penalty.lambda in the config)");
    };
    if let Some(r) = args.refine {
        cfg.penalty.tuning.refine = match r {
            RefineArg::One => RefineMode::OneInterval,
            RefineArg::Two => RefineMode::TwoInterval,
        };
    }
    cfg.penalty.tuning.threshold = cfg.threshold;
    let framework = match args.framework {
        FrameworkArg::Fedavg => Framework::FedAvg,
        FrameworkArg::Perfedavg => Framework::PerFedAvg,
    };
    let prepared = prepare_data(&cfg)?;
    let fed = federation_for(&cfg, framework);
    let out = two_step_gamma(lambda, &prepared.clients, &fed, &cfg.penalty.tuning)?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    for (stage, search) in [("coarse", &out.coarse), ("refined", &out.refined)] {
        let path = cfg.output_dir.join(format!("gamma_{stage}.csv"));
        write_gamma_csv(&path, search)?;
        println!("{stage}: selected gamma {} ({})", search.selected, path.display());
    }
    println!(
        "refined range [{}, {}] ({:?}); final gamma {}",
        out.refined_range[0], out.refined_range[1], out.refine, out.gamma_final
    );
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(names) = &args.roster {
        cfg.roster = names.iter().map(|n| n.trim().parse()).collect::<Result<_, _>>()?;
        cfg.validate()?;
    }
    if args.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let formats = parse_formats(&args.formats)?;
    let prepared = prepare_data(&cfg)?;
    let result = run_on_clients(&cfg, &prepared.clients, prepared.standardization)?;
    print_table(&result);
    let written = emit_report(&result, &cfg.output_dir, &formats)?;
    report_written(&written);
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let result = read_result_json(&args.result)?;
    let formats = parse_formats(&args.formats)?;
    print_table(&result);
    let written = emit_report(&result, &args.out_dir, &formats)?;
    report_written(&written);
    Ok(())
}

fn report_written(paths: &[PathBuf]) {
    println!("wrote {} files:", paths.len());
    for p in paths {
        println!("  {}", p.display());
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Partition(a) => partition_cmd(a),
        Command::Train(a) => train(a),
        Command::TuneLambda(a) => tune_lambda(a),
        Command::TuneGamma(a) => tune_gamma(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    }
}
