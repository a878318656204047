use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use sd3mf::commands::{cmd_experiment, cmd_generate, cmd_gradcheck, cmd_interpret, cmd_paramcount, cmd_train, RunConfig};

/// Supervised deep multimodal matrix tri-factorization for graph populations.
#[derive(Parser, Debug)]
#[command(name = "sd3mf", version)]
struct Cli {
    /// Seed for splits, initialization and data generation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file with run settings; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted synthetic dataset with its ground truth.
    Generate(GenerateArgs),
    /// Train on every subject of a dataset.
    Train(TrainArgs),
    /// Repeated stratified split, training and evaluation.
    Experiment(ExperimentArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export communities, saliency, group approximations and edges.
    Interpret(InterpretArgs),
    /// Count free parameters.
    Paramcount(ParamcountArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Nodes per graph.
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Planted communities.
    #[arg(long, default_value_t = 5)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    /// Subject count; classes are balanced.
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    /// Gaussian edge noise.
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    /// Strength of the label-dependent interaction shift.
    #[arg(long, default_value_t = 1.0)]
    label_signal: f64,
    /// Scale of subject-specific interaction noise.
    #[arg(long, default_value_t = 0.1)]
    interaction_noise: f64,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// Layer widths, comma separated; the last is the community count.
    #[arg(long, value_delimiter = ',', default_value = "30,20,10")]
    widths: Vec<usize>,
    /// Reconstruction weight.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Learning rate.
    #[arg(long, default_value = "1e-5")]
    lr: f64,
    /// Gradient steps.
    #[arg(long, default_value_t = 30000)]
    iters: usize,
    /// Scale of the orthogonal factor initialization.
    #[arg(long, default_value = "1e-3")]
    init_scale: f64,
    /// Optimize reconstruction only.
    #[arg(long)]
    no_supervision: bool,
    /// Pin the classifier offset to zero.
    #[arg(long)]
    no_bias: bool,
    /// Iterations between history records.
    #[arg(long, default_value_t = 100)]
    log_interval: usize,
    /// Mini-batch size [default: full batch].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Restrict to one modality.
    #[arg(long)]
    modality: Option<String>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Repetitions; run j uses seed + j.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Per-class share of subjects used for training.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Comma-separated mu values; one experiment per value.
    #[arg(long, value_delimiter = ',')]
    mu_sweep: Vec<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Finite-difference step.
    #[arg(long, default_value = "1e-5")]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value = "1e-4")]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct InterpretArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Edges and nodes kept in each ranking.
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Group label used for saliency.
    #[arg(long, default_value_t = 1)]
    target_group: u8,
}

#[derive(Args, Debug)]
struct ParamcountArgs {
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "30,20,10")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    #[arg(long, default_value_t = 40)]
    subjects: usize,
}

/// Copies flags into the config: explicit flags always, defaults only when no
/// config file supplies the value.
struct Overlay<'a> {
    matches: [&'a ArgMatches; 2],
    has_file: bool,
}

impl Overlay<'_> {
    fn take(&self, id: &str) -> bool {
        let explicit = self.matches.iter().any(|m| {
            m.try_contains_id(id).unwrap_or(false) && m.value_source(id) == Some(ValueSource::CommandLine)
        });
        explicit || !self.has_file
    }
}

fn apply_hyper(o: &Overlay, a: HyperArgs, c: &mut RunConfig) {
    if o.take("widths") {
        c.hyper.widths = a.widths;
    }
    if o.take("mu") {
        c.hyper.mu = a.mu;
    }
    if o.take("lr") {
        c.hyper.learning_rate = a.lr;
    }
    if o.take("iters") {
        c.hyper.max_iters = a.iters;
    }
    if o.take("init_scale") {
        c.hyper.init_scale = a.init_scale;
    }
    if o.take("no_supervision") {
        c.hyper.supervision_on = !a.no_supervision;
    }
    if o.take("no_bias") {
        c.hyper.use_bias = !a.no_bias;
    }
    if o.take("log_interval") {
        c.hyper.log_interval = a.log_interval;
    }
    if a.batch_size.is_some() || !o.has_file {
        c.hyper.batch_size = a.batch_size;
    }
    if a.modality.is_some() || !o.has_file {
        c.modality = a.modality;
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset;
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Generate,
    Train,
    Experiment,
    Gradcheck,
    Interpret,
    Paramcount,
}

fn resolve(matches: &ArgMatches) -> Result<(Kind, RunConfig), sd3mf::Error> {
    let cli = Cli::from_arg_matches(matches).unwrap_or_else(|e| e.exit());
    let sub = matches.subcommand().map(|(_, m)| m).unwrap_or(matches);
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    let o = Overlay {
        matches: [matches, sub],
        has_file: cli.config.is_some(),
    };
    if o.take("seed") {
        config.hyper.seed = cli.seed;
    }
    if o.take("out") {
        config.out = cli.out.clone();
    }
    let kind = match cli.command {
        Command::Generate(a) => {
            if o.take("n") {
                config.n = a.n;
            }
            if o.take("r") {
                config.r = a.r;
            }
            if o.take("modalities") {
                config.modalities = a.modalities;
            }
            if o.take("subjects") {
                config.subjects = a.subjects;
            }
            if o.take("noise_sigma") {
                config.noise_sigma = a.noise_sigma;
            }
            if o.take("label_signal") {
                config.label_signal = a.label_signal;
            }
            if o.take("interaction_noise") {
                config.interaction_noise = a.interaction_noise;
            }
            Kind::Generate
        }
        Command::Train(a) => {
            apply_hyper(&o, a.hyper, &mut config);
            Kind::Train
        }
        Command::Experiment(a) => {
            apply_hyper(&o, a.hyper, &mut config);
            if o.take("runs") {
                config.n_runs = a.runs;
            }
            if o.take("train_fraction") {
                config.train_fraction = a.train_fraction;
            }
            if !a.mu_sweep.is_empty() || !o.has_file {
                config.mu_sweep = a.mu_sweep;
            }
            Kind::Experiment
        }
        Command::Gradcheck(a) => {
            apply_hyper(&o, a.hyper, &mut config);
            if o.take("h") {
                config.h = a.h;
            }
            if o.take("tolerance") {
                config.tolerance = a.tolerance;
            }
            Kind::Gradcheck
        }
        Command::Interpret(a) => {
            if a.dataset.is_some() {
                config.dataset = a.dataset;
            }
            if a.checkpoint.is_some() {
                config.checkpoint = a.checkpoint;
            }
            if o.take("top_k") {
                config.top_k = a.top_k;
            }
            if o.take("target_group") {
                config.target_group = a.target_group;
            }
            Kind::Interpret
        }
        Command::Paramcount(a) => {
            if o.take("n") {
                config.n = a.n;
            }
            if o.take("widths") {
                config.hyper.widths = a.widths;
            }
            if o.take("modalities") {
                config.modalities = a.modalities;
            }
            if o.take("subjects") {
                config.subjects = a.subjects;
            }
            Kind::Paramcount
        }
    };
    Ok((kind, config))
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&matches).and_then(|(kind, config)| match kind {
        Kind::Generate => cmd_generate(&config),
        Kind::Train => cmd_train(&config),
        Kind::Experiment => cmd_experiment(&config),
        Kind::Gradcheck => cmd_gradcheck(&config),
        Kind::Interpret => cmd_interpret(&config),
        Kind::Paramcount => cmd_paramcount(&config),
    });
    match result {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("output serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
