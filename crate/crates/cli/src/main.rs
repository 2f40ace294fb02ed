//! `sensgrad` command-line entry point.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 training divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sensgrad::data::{gen_toy, load_cifar10_dir, load_mnist_idx, scale_features, Dataset};
use sensgrad::experiment::{
    cv_protocol, toy_experiment, CvConfig, CvReport, EarlyStop, ModelSpec, ToyConfig, ToyReport,
    TrainConfig,
};
use sensgrad::pseudograd::{unit_grid, write_curves_csv};
use sensgrad::report::{save_summary, save_trials_csv};
use sensgrad::seed::{rng_for, stream};
use sensgrad::verify::{run_suite, SuiteConfig};
use sensgrad::{Activation, Error, InitScheme, Sensitivity, K_GRID};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "sensgrad", version, about = "Pseudo-gradient training experiments")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel trials. Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Threshold experiment on the synthetic interval distribution.
    Toy(ToyArgs),
    /// Cross-validated selection of (k, η) and final retraining.
    Cv(CvArgs),
    /// Numerical checks of the pseudo-gradient.
    Verify(VerifyArgs),
    /// |f_y| against ε_y for each k.
    Curves(CurvesArgs),
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    /// Learning rate.
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Size of each of the train, validation and test sets.
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Training images (IDX) or, for cifar10, the batch directory.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    clip: Option<f64>,
    /// Role-rotated rounds per (k, η).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Toy dataset only: interval end.
    #[arg(long)]
    alpha: Option<f64>,
    /// Toy dataset only: train and test size.
    #[arg(long)]
    examples: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    /// Random (ε, k) pairs in the constraint check.
    #[arg(long)]
    samples: Option<usize>,
    /// Networks in the finite-difference check.
    #[arg(long)]
    networks: Option<usize>,
    /// Swap in a deliberately wrong backward pass.
    #[arg(long)]
    inject_mutant: bool,
}

#[derive(Debug, Args)]
struct CurvesArgs {
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    /// Grid points on |ε_y| ∈ (0, 1].
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DatasetKind {
    Mnist,
    Cifar10,
    Toy,
}

/// Config file contents. Every field is optional except the version.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    format_version: u32,
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    alpha: Option<f64>,
    k_grid: Option<Vec<f64>>,
    eta0: Option<f64>,
    momentum: Option<f64>,
    layers: Option<Vec<usize>>,
    activation: Option<Activation>,
    clip: Option<f64>,
    t: Option<usize>,
    dataset: Option<DatasetKind>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    runs: Option<usize>,
    examples: Option<usize>,
    minibatch: Option<usize>,
    max_epochs: Option<usize>,
    samples: Option<usize>,
    networks: Option<usize>,
    points: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Verification,
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if let Failure::Config(msg) | Failure::Diverged(msg) = &failure {
                eprintln!("error: {msg}");
            }
            ExitCode::from(failure.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification => 1,
            Failure::Config(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig {
            format_version: CONFIG_VERSION,
            ..FileConfig::default()
        });
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if cfg.format_version != CONFIG_VERSION {
        return Err(Failure::Config(format!(
            "unsupported config format_version {} (expected {CONFIG_VERSION})",
            cfg.format_version
        )));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let jobs = cli.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let out = cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    match cli.command {
        Command::Toy(args) => cmd_toy(args, &file, seed, jobs, &out),
        Command::Cv(args) => cmd_cv(args, &file, seed, jobs, &out),
        Command::Verify(args) => cmd_verify(args, &file, seed, &out),
        Command::Curves(args) => cmd_curves(args, &file, &out),
    }
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Config(format!("{}: {e}", out.display())))
}

fn cmd_toy(args: ToyArgs, file: &FileConfig, seed: u64, jobs: usize, out: &Path) -> Result<(), Failure> {
    let defaults = ToyConfig::default();
    let examples = args.examples.or(file.examples);
    let cfg = ToyConfig {
        alpha: args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        k_list: args.k_grid.or(file.k_grid.clone()).unwrap_or(defaults.k_list),
        runs: args.runs.or(file.runs).unwrap_or(defaults.runs),
        train_size: examples.unwrap_or(defaults.train_size),
        validation_size: examples.unwrap_or(defaults.validation_size),
        test_size: examples.unwrap_or(defaults.test_size),
        learning_rate: args.eta0.or(file.eta0).unwrap_or(defaults.learning_rate),
        max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(defaults.max_epochs),
        seed,
        jobs,
        ..defaults
    };
    let report = toy_experiment(&cfg)?;
    prepare_out(out)?;
    save_trials_csv(&out.join("toy_trials.csv"), &report.trials)?;
    write_toy_table(&out.join("toy_table.csv"), &report)?;
    save_summary(&out.join("toy_summary.json"), &report, "toy")?;
    print_toy_table(&report);
    Ok(())
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-k averages. Spread columns appear only with more than one run.
fn write_toy_table(path: &Path, report: &ToyReport) -> Result<(), Failure> {
    let with_spread = report.config.runs > 1;
    let mut text = String::from("k,runs,mean_test_error");
    if with_spread {
        text.push_str(",std_test_error");
    }
    text.push_str(",mean_threshold");
    if with_spread {
        text.push_str(",std_threshold");
    }
    text.push_str(",mean_ce");
    if with_spread {
        text.push_str(",std_ce");
    }
    text.push_str(",mean_epochs\n");
    for row in &report.rows {
        let mut fields = vec![row.k.to_string(), row.runs.to_string(), row.mean_test_error.to_string()];
        if with_spread {
            fields.push(cell(row.std_test_error));
        }
        fields.push(cell(row.mean_threshold));
        if with_spread {
            fields.push(cell(row.std_threshold));
        }
        fields.push(row.mean_cross_entropy.to_string());
        if with_spread {
            fields.push(cell(row.std_cross_entropy));
        }
        fields.push(row.mean_epochs.to_string());
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn print_toy_table(report: &ToyReport) {
    println!("{:>8} {:>10} {:>10} {:>8} {:>10}", "k", "error %", "threshold", "CE", "epochs");
    for row in &report.rows {
        println!(
            "{:>8} {:>10.2} {:>10} {:>8.3} {:>10.0}",
            row.k,
            100.0 * row.mean_test_error,
            row.mean_threshold.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into()),
            row.mean_cross_entropy,
            row.mean_epochs
        );
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    let path = path
        .as_deref()
        .ok_or_else(|| Failure::Config(format!("{flag} is required")))?;
    if !path.exists() {
        return Err(Failure::Config(format!("{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_datasets(
    kind: DatasetKind,
    args: &CvArgs,
    file: &FileConfig,
    seed: u64,
) -> Result<(Dataset, Dataset), Failure> {
    let images = args.images.clone().or(file.images.clone());
    let labels = args.labels.clone().or(file.labels.clone());
    let test_images = args.test_images.clone().or(file.test_images.clone());
    let test_labels = args.test_labels.clone().or(file.test_labels.clone());
    match kind {
        DatasetKind::Mnist => {
            let train = load_mnist_idx(required(&images, "--images")?, required(&labels, "--labels")?)?;
            let test = load_mnist_idx(
                required(&test_images, "--test-images")?,
                required(&test_labels, "--test-labels")?,
            )?;
            Ok((scale_features(&train, 0.0, 255.0)?, scale_features(&test, 0.0, 255.0)?))
        }
        DatasetKind::Cifar10 => {
            let (train, test) = load_cifar10_dir(required(&images, "--images")?)?;
            Ok((scale_features(&train, 0.0, 255.0)?, scale_features(&test, 0.0, 255.0)?))
        }
        DatasetKind::Toy => {
            let alpha = args.alpha.or(file.alpha).unwrap_or(0.95);
            let n = args.examples.or(file.examples).unwrap_or(30_000);
            let train = gen_toy(n, alpha, &mut rng_for(seed, &[stream::TRAIN_DATA]))?;
            let test = gen_toy(n, alpha, &mut rng_for(seed, &[stream::TEST_DATA]))?;
            Ok((train, test))
        }
    }
}

/// Serialized alongside the cv results.
#[derive(Serialize)]
struct CvSummary<'a> {
    dataset: DatasetKind,
    config: &'a CvConfig,
    selected_k: f64,
    selected_eta: f64,
    baseline_eta: f64,
    selected_test_error: Option<f64>,
    baseline_test_error: Option<f64>,
    selected_test_ce: Option<f64>,
    baseline_test_ce: Option<f64>,
    report: &'a CvReport,
}

fn cmd_cv(args: CvArgs, file: &FileConfig, seed: u64, jobs: usize, out: &Path) -> Result<(), Failure> {
    let kind = args.dataset.or(file.dataset).unwrap_or(DatasetKind::Mnist);
    let (default_eta, default_t, default_hidden) = match kind {
        DatasetKind::Mnist => (1.0, 10, vec![400]),
        DatasetKind::Cifar10 => (0.01, 7, vec![400]),
        DatasetKind::Toy => (0.1, 5, vec![]),
    };
    let momentum = args.momentum.or(file.momentum).unwrap_or(0.5);
    let cfg = CvConfig {
        k_grid: args.k_grid.clone().or(file.k_grid.clone()).unwrap_or_else(|| K_GRID.to_vec()),
        eta0: args.eta0.or(file.eta0).unwrap_or(default_eta),
        rounds: args.t.or(file.t).unwrap_or(default_t),
        model: ModelSpec {
            hidden: args.layers.clone().or(file.layers.clone()).unwrap_or(default_hidden),
            activation: args.activation.or(file.activation).unwrap_or_default(),
            init: InitScheme::GlorotUniform,
        },
        train: TrainConfig {
            k: Sensitivity::CROSS_ENTROPY,
            learning_rate: 1.0,
            momentum,
            minibatch: args.minibatch.or(file.minibatch).unwrap_or(128),
            clip: args.clip.or(file.clip),
            early_stop: EarlyStop::PATIENCE_15,
            max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(1000),
            seed: 0,
        },
        max_extensions: 12,
        seed,
        jobs,
    };
    cfg.train.validate()?;
    let (train, test) = load_datasets(kind, &args, file, seed)?;
    let report = cv_protocol(&train, &test, &cfg)?;

    prepare_out(out)?;
    let mut trials = report.selection.trials.clone();
    trials.push(report.selected.clone());
    trials.push(report.baseline.clone());
    save_trials_csv(&out.join("cv_trials.csv"), &trials)?;
    let mut table = String::from("k,eta,err,std,diverged_rounds\n");
    for c in &report.selection.cells {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            c.k,
            c.eta,
            c.err,
            cell(c.std),
            c.diverged_rounds
        ));
    }
    fs::write(out.join("cv_err_table.csv"), table)?;
    let summary = CvSummary {
        dataset: kind,
        config: &cfg,
        selected_k: report.selection.k,
        selected_eta: report.selection.eta,
        baseline_eta: report.selection.baseline_eta,
        selected_test_error: report.selected.test_error,
        baseline_test_error: report.baseline.test_error,
        selected_test_ce: report.selected.cross_entropy,
        baseline_test_ce: report.baseline.cross_entropy,
        report: &report,
    };
    save_summary(&out.join("cv_summary.json"), &summary, "cv")?;
    println!(
        "selected k={} eta={}: test error {} | k=1 eta={}: test error {}",
        report.selection.k,
        report.selection.eta,
        cell(report.selected.test_error),
        report.selection.baseline_eta,
        cell(report.baseline.test_error)
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Failure> {
    let defaults = SuiteConfig::default();
    let cfg = SuiteConfig {
        ks: args.k_grid.or(file.k_grid.clone()).unwrap_or(defaults.ks),
        seed,
        gradient_networks: args.networks.or(file.networks).unwrap_or(defaults.gradient_networks),
        constraint_samples: args.samples.or(file.samples).unwrap_or(defaults.constraint_samples),
        inject_mutant: args.inject_mutant,
    };
    let verdicts = run_suite(&cfg)?;
    let json = serde_json::to_string_pretty(&verdicts).map_err(|e| Failure::Config(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}")?;
    prepare_out(out)?;
    save_summary(&out.join("verify.json"), &verdicts, "verify")?;
    if verdicts.iter().all(|v| v.pass) {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn cmd_curves(args: CurvesArgs, file: &FileConfig, out: &Path) -> Result<(), Failure> {
    let ks: Vec<Sensitivity> = args
        .k_grid
        .or(file.k_grid.clone())
        .unwrap_or_else(|| K_GRID.to_vec())
        .into_iter()
        .map(Sensitivity::new)
        .collect::<Result<_, _>>()?;
    let points = args.points.or(file.points).unwrap_or(1000);
    if points == 0 {
        return Err(Failure::Config("--points must be at least 1".into()));
    }
    prepare_out(out)?;
    let path = out.join("curves.csv");
    let handle = fs::File::create(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    write_curves_csv(std::io::BufWriter::new(handle), &ks, &unit_grid(points))?;
    println!("wrote {}", path.display());
    Ok(())
}
