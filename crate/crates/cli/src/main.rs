//! Command-line interface for graphical point-process attribution:
//! simulation, model fitting, path-level scoring, baseline methods, and
//! channel-level evaluation, wired into reproducible seeded experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path as FsPath, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pathattr_core::baselines::BaselineSpec;
use pathattr_core::catalog::{load_paths, write_paths, EventCatalog};
use pathattr_core::estimation::{
    default_gamma_grid, fit_all_with_gammas, select_gamma, FitConfig, Quadrature,
};
use pathattr_core::experiment::reproduce_hawkes;
use pathattr_core::kernels::{
    extract_graph, params_from_json, params_to_json, Kernel, KernelShape, Kernels,
};
use pathattr_core::metrics::{hellinger, kl_divergence};
use pathattr_core::report::{
    read_reports, score_paths, score_paths_baseline, write_reports, AttributionReport, Granularity,
    ModelMethod,
};
use pathattr_core::simulate::{
    ccc_all_channels, scenario_from_json, simulate_all, ChannelCcc, Scenario,
};

#[derive(Parser)]
#[command(
    name = "pathattr",
    about = "Graphical point-process multi-touch attribution toolkit",
    version
)]
struct Cli {
    /// Cap worker threads (default: available cores). Results do not depend
    /// on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic paths from a scenario file.
    Simulate(SimulateArgs),
    /// Fit model parameters from paths by regularized least squares.
    Fit(FitArgs),
    /// Score conversions on paths with a fitted model.
    Attribute(AttributeArgs),
    /// Score conversions with a reference baseline method.
    Baselines(BaselinesArgs),
    /// Compare aggregated channel scores against ground-truth counts.
    Evaluate(EvaluateArgs),
    /// Run the bundled two-channel benchmark end to end.
    ReproduceHawkes(ReproduceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON (catalog, model, firm rates, horizon, size, seed).
    #[arg(long)]
    scenario: PathBuf,
    /// Output paths file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Disable every touchpoint type of this channel (coupled z-off run).
    #[arg(long)]
    disable: Option<String>,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also compute ground-truth channel conversion counts via coupled
    /// channel-off reruns and write them here.
    #[arg(long)]
    ccc: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Input paths file (JSON Lines).
    #[arg(long)]
    paths: PathBuf,
    /// Catalog JSON.
    #[arg(long)]
    catalog: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Kernel shape shared by all pairs.
    #[arg(long, value_enum, default_value_t = KernelArg::ExpDecay)]
    kernel: KernelArg,
    /// Kernel time scale T0 in days.
    #[arg(long, default_value_t = 10.0)]
    t0: f64,
    /// Fixed L1 strength for every node; omit to select per node by
    /// cross-validation over the default grid.
    #[arg(long)]
    gamma: Option<f64>,
    /// Cross-validation folds for gamma selection.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Optional per-node diagnostics JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Boxcar,
    ExpDecay,
    HalfGaussian,
}

impl From<KernelArg> for KernelShape {
    fn from(value: KernelArg) -> Self {
        match value {
            KernelArg::Boxcar => KernelShape::Boxcar,
            KernelArg::ExpDecay => KernelShape::ExpDecay,
            KernelArg::HalfGaussian => KernelShape::HalfGaussian,
        }
    }
}

#[derive(Args)]
struct AttributeArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Catalog JSON.
    #[arg(long)]
    catalog: PathBuf,
    /// Input paths file (JSON Lines).
    #[arg(long)]
    paths: PathBuf,
    /// Scoring method.
    #[arg(long, value_enum, default_value_t = MethodArg::Tre)]
    method: MethodArg,
    /// Monte-Carlo replicates for tre-thinning.
    #[arg(long, default_value_t = 10_000)]
    replicates: usize,
    /// Seed for tre-thinning replicates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GranularityArg::Touchpoint)]
    granularity: GranularityArg,
    /// Output report file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dre,
    Tre,
    TreThinning,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Touchpoint,
    Channel,
}

#[derive(Args)]
struct BaselinesArgs {
    /// Baseline method.
    #[arg(long, value_enum)]
    method: BaselineArg,
    /// Half-life in days for the time-decay rule.
    #[arg(long, default_value_t = 7.0)]
    half_life: f64,
    #[arg(long)]
    paths: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Output report file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Last,
    First,
    Linear,
    Decay,
    UShaped,
    Logistic,
    Markov,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth CCC JSON written by `simulate --ccc`.
    #[arg(long)]
    truth: PathBuf,
    /// Attribution reports (JSON Lines), any mix of methods.
    #[arg(long)]
    scores: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Number of independent runs.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Master seed; run r uses seed + r.
    #[arg(long, default_value_t = 20260808)]
    seed: u64,
    /// Paths per run.
    #[arg(long, default_value_t = 10_000)]
    n_paths: usize,
    /// Observation horizon in days.
    #[arg(long, default_value_t = 365.0)]
    horizon: f64,
    /// Output summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing the thread pool")?;
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Attribute(args) => cmd_attribute(args),
        Command::Baselines(args) => cmd_baselines(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::ReproduceHawkes(args) => cmd_reproduce(args),
    }
}

fn read_catalog(path: &FsPath) -> Result<EventCatalog> {
    let json =
        fs::read_to_string(path).with_context(|| format!("reading catalog {}", path.display()))?;
    Ok(EventCatalog::from_json(&json)?)
}

fn read_path_file(
    path: &FsPath,
    catalog: &EventCatalog,
) -> Result<Vec<pathattr_core::catalog::Path>> {
    let file = fs::File::open(path).with_context(|| format!("reading paths {}", path.display()))?;
    Ok(load_paths(BufReader::new(file), catalog)?)
}

fn read_scenario(path: &FsPath) -> Result<Scenario> {
    let json =
        fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
    Ok(scenario_from_json(&json)?)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CccFile {
    total_conversions: u64,
    channels: Vec<ChannelCcc>,
    proportions: BTreeMap<String, f64>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut scenario = read_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.master_seed = seed;
    }
    let disabled: BTreeSet<usize> = match &args.disable {
        None => BTreeSet::new(),
        Some(name) => {
            let z = scenario
                .catalog
                .channel_index(name)
                .with_context(|| format!("unknown channel `{name}`"))?;
            scenario.channel_types(z)
        }
    };
    let paths = simulate_all(&scenario, &disabled)?;
    let mut out =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_paths(&mut out, &paths, &scenario.catalog)?;

    println!("{:<16} {:>12}", "event type", "count");
    for idx in 0..scenario.catalog.n_types() {
        let count: usize = paths
            .iter()
            .map(|p| p.events().iter().filter(|e| e.type_idx == idx).count())
            .sum();
        println!("{:<16} {:>12}", scenario.catalog.type_name(idx), count);
    }
    println!("{:<16} {:>12}", "paths", paths.len());

    if let Some(ccc_path) = args.ccc {
        if args.disable.is_some() {
            bail!("--ccc computes its own channel-off runs; drop --disable");
        }
        let (_, channels) = ccc_all_channels(&scenario)?;
        let total = channels
            .first()
            .map(|c| c.total_conversions)
            .unwrap_or_default();
        let positive_total: f64 = channels.iter().map(|c| c.ccc.max(0) as f64).sum();
        let proportions = channels
            .iter()
            .map(|c| {
                (
                    c.channel.clone(),
                    if positive_total > 0.0 {
                        c.ccc.max(0) as f64 / positive_total
                    } else {
                        0.0
                    },
                )
            })
            .collect();
        let file = CccFile {
            total_conversions: total,
            channels,
            proportions,
        };
        fs::write(&ccc_path, serde_json::to_string_pretty(&file)?)
            .with_context(|| format!("writing {}", ccc_path.display()))?;
        println!("\n{:<16} {:>12} {:>12}", "channel", "ccc", "proportion");
        for c in &file.channels {
            println!(
                "{:<16} {:>12} {:>12.4}",
                c.channel, c.ccc, file.proportions[&c.channel]
            );
        }
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let catalog = read_catalog(&args.catalog)?;
    let paths = read_path_file(&args.paths, &catalog)?;
    let kernel = Kernel::new(args.kernel.into(), args.t0)?;
    let kernels = Kernels::shared(kernel, catalog.n_types(), catalog.n_customer());
    let config = FitConfig {
        quadrature: Quadrature::AnalyticExp,
        ..FitConfig::default()
    };

    let (gammas, warnings) = match args.gamma {
        Some(g) => (vec![g; catalog.n_customer()], Vec::new()),
        None => {
            let selection = select_gamma(
                &paths,
                &catalog,
                &kernels,
                &default_gamma_grid(),
                args.folds,
                &config,
            )?;
            (selection.per_node, selection.warnings)
        }
    };
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    let fit = fit_all_with_gammas(&paths, &catalog, &kernels, &config, &gammas)?;

    fs::write(&args.out, params_to_json(&fit.params)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(diag_path) = &args.diagnostics {
        fs::write(diag_path, serde_json::to_string_pretty(&fit.node_fits)?)
            .with_context(|| format!("writing {}", diag_path.display()))?;
    }

    println!(
        "{:<14} {:>10} {:>7} {:>11} {:>11} {:>10}",
        "node", "gamma", "iters", "primal", "dual", "converged"
    );
    for node in &fit.node_fits {
        println!(
            "{:<14} {:>10.2e} {:>7} {:>11.2e} {:>11.2e} {:>10}",
            catalog.type_name(node.target),
            node.gamma,
            node.iterations,
            node.primal_residual,
            node.dual_residual,
            node.converged
        );
    }
    let graph = extract_graph(&fit.params, 0.0);
    println!("granger edges ({}):", graph.n_edges());
    for edge in graph.describe(&catalog) {
        println!("  {edge}");
    }
    Ok(())
}

fn cmd_attribute(args: AttributeArgs) -> Result<()> {
    let catalog = read_catalog(&args.catalog)?;
    let paths = read_path_file(&args.paths, &catalog)?;
    let model_json = fs::read_to_string(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let params = params_from_json(&model_json, &catalog)?;
    let method = match args.method {
        MethodArg::Dre => ModelMethod::Dre,
        MethodArg::Tre => ModelMethod::Tre,
        MethodArg::TreThinning => ModelMethod::TreThinning {
            replicates: args.replicates,
            seed: args.seed,
        },
    };
    let granularity = match args.granularity {
        GranularityArg::Touchpoint => Granularity::Touchpoint,
        GranularityArg::Channel => Granularity::Channel,
    };
    let reports = score_paths(&paths, &params, &catalog, method, granularity)?;
    let mut out =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_reports(&mut out, &reports)?;
    print_channel_table(&reports);
    Ok(())
}

fn cmd_baselines(args: BaselinesArgs) -> Result<()> {
    let catalog = read_catalog(&args.catalog)?;
    let paths = read_path_file(&args.paths, &catalog)?;
    let spec = match args.method {
        BaselineArg::Last => BaselineSpec::Last,
        BaselineArg::First => BaselineSpec::First,
        BaselineArg::Linear => BaselineSpec::Linear,
        BaselineArg::Decay => BaselineSpec::Decay {
            half_life: args.half_life,
        },
        BaselineArg::UShaped => BaselineSpec::UShaped,
        BaselineArg::Logistic => BaselineSpec::Logistic,
        BaselineArg::Markov => BaselineSpec::Markov,
    };
    let reports = score_paths_baseline(&paths, &catalog, &spec)?;
    let mut out =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_reports(&mut out, &reports)?;
    print_channel_table(&reports);
    Ok(())
}

fn print_channel_table(reports: &[AttributionReport]) {
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for report in reports {
        for (channel, score) in &report.channel_scores {
            *totals.entry(channel).or_default() += score;
        }
    }
    let grand: f64 = totals.values().sum();
    println!("{:<16} {:>14} {:>12}", "channel", "aggregate", "proportion");
    for (channel, total) in &totals {
        let proportion = if grand > 0.0 { total / grand } else { 0.0 };
        println!("{:<16} {:>14.4} {:>12.4}", channel, total, proportion);
    }
    println!("({} report lines)", reports.len());
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let truth_file: CccFile = serde_json::from_str(
        &fs::read_to_string(&args.truth)
            .with_context(|| format!("reading truth {}", args.truth.display()))?,
    )
    .context("parsing ground-truth ccc json")?;
    let reports = read_reports(BufReader::new(fs::File::open(&args.scores)?))?;

    let channel_names: Vec<String> = truth_file.proportions.keys().cloned().collect();
    let truth: Vec<f64> = channel_names
        .iter()
        .map(|c| truth_file.proportions[c])
        .collect();

    let mut by_method: BTreeMap<String, Vec<&AttributionReport>> = BTreeMap::new();
    for report in &reports {
        by_method
            .entry(report.method.clone())
            .or_default()
            .push(report);
    }

    #[derive(serde::Serialize)]
    struct MethodOut {
        proportions: BTreeMap<String, f64>,
        kl: f64,
        hellinger: f64,
    }
    let mut out_methods = BTreeMap::new();
    println!(
        "{:<12} {:>12} {:>12}  proportions",
        "method", "kl", "hellinger"
    );
    for (method, method_reports) in &by_method {
        let mut raw: Vec<f64> = vec![0.0; channel_names.len()];
        for report in method_reports {
            for (channel, score) in &report.channel_scores {
                match channel_names.iter().position(|c| c == channel) {
                    Some(z) => raw[z] += score,
                    None => bail!("report channel `{channel}` missing from the truth file"),
                }
            }
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            bail!("method `{method}` has an all-zero aggregate");
        }
        let proportions: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let kl = kl_divergence(&truth, &proportions)?;
        let h = hellinger(&truth, &proportions)?;
        let props: Vec<String> = channel_names
            .iter()
            .zip(&proportions)
            .map(|(c, p)| format!("{c}={p:.4}"))
            .collect();
        println!(
            "{:<12} {:>12.5} {:>12.5}  {}",
            method,
            kl,
            h,
            props.join(" ")
        );
        out_methods.insert(
            method.clone(),
            MethodOut {
                proportions: channel_names
                    .iter()
                    .cloned()
                    .zip(proportions.iter().copied())
                    .collect(),
                kl,
                hellinger: h,
            },
        );
    }

    #[derive(serde::Serialize)]
    struct MetricsOut {
        truth_proportions: BTreeMap<String, f64>,
        methods: BTreeMap<String, MethodOut>,
    }
    let payload = MetricsOut {
        truth_proportions: truth_file.proportions.clone(),
        methods: out_methods,
    };
    fs::write(&args.out, serde_json::to_string_pretty(&payload)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<()> {
    let summary = reproduce_hawkes(args.runs, args.seed, args.n_paths, args.horizon)?;
    print!("{summary}");
    std::io::stdout().flush()?;
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
