use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use pet_core::backend::protocol::serve;
use pet_core::data::Dataset;
use pet_core::ensemble::Weighting;
use pet_core::pipeline::{prepare, BackendSpec, RunConfig};
use pet_core::run::{execute, read_manifest, rerun, write_synthetic, Command, DataPaths, MetricsReport, OutputOptions};
use pet_core::synthetic::SyntheticTaskSpec;
use pet_core::task::TaskConfig;
use pet_core::{PetError, Result};

#[derive(Parser)]
#[command(name = "pet", version, about = "Pattern-exploiting training, iPET and verbalizer search")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finetune every PVP, soft-label the unlabeled set, train the final classifier.
    Pet(PetArgs),
    /// Iterative PET, optionally starting from zero labeled examples.
    Ipet(IpetArgs),
    /// Baseline: a classification head trained on the labeled set only.
    Supervised(SupervisedArgs),
    /// Search verbalizers for the task's patterns.
    Avs(AvsArgs),
    /// Score a saved model of a run on a labeled file.
    Eval(EvalArgs),
    /// Soft-label a file with the PVP models of a run.
    Label(LabelArgs),
    /// Train a classifier on a soft-labeled file.
    Distill(DistillArgs),
    /// Generate a synthetic task as JSONL files.
    Synth(SynthArgs),
    /// Serve the toy backend over the wire protocol.
    Serve(ServeArgs),
    /// Re-execute a run from its manifest and check the metrics are identical.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct Common {
    /// Task file (labels, patterns, verbalizers).
    #[arg(long)]
    task: PathBuf,
    /// Run config file with one section per module.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// `toy` or `external:<tcp://host:port | cmd:...>`.
    #[arg(long)]
    backend: Option<String>,
    /// Master seed; derives every module seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Models per PVP.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Parallel training jobs (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_seq_length: Option<usize>,
    /// Also write reports/metrics.csv.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    /// Labeled evaluation set.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    /// Weight of the auxiliary language modeling loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Finetuning steps per PVP model.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_multiplier: Option<f64>,
    /// `uniform` or `weighted`.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// Soft-label temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    classifier_steps: Option<usize>,
}

#[derive(Args)]
struct PetArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct IpetArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Start from untrained models instead of finetuning on the labeled set.
    #[arg(long)]
    zero_shot: bool,
    /// Reuse completed generations found in the run directory.
    #[arg(long)]
    resume: bool,
    /// Fraction of other models that annotate for each model.
    #[arg(long)]
    lambda: Option<f64>,
    /// Growth factor of the training set per generation.
    #[arg(long)]
    d: Option<usize>,
    /// Training set size the last generation reaches.
    #[arg(long)]
    target_examples: Option<usize>,
    /// Generations to run, e.g. `1,4` to skip 2 and 3.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
}

#[derive(Args)]
struct SupervisedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_multiplier: Option<f64>,
}

#[derive(Args)]
struct AvsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Sampled assignments per iteration.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    imax: Option<usize>,
    /// Verbalizers kept per label.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding the model.
    #[arg(long)]
    run: PathBuf,
    /// Labeled JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// `classifier`, `supervised` or a PVP model name such as `p1-r0`.
    #[arg(long, default_value = "classifier")]
    model: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Run whose backend and config the classifier starts from.
    #[arg(long)]
    run: PathBuf,
    /// Soft-labeled JSONL file, as written by `label`.
    #[arg(long)]
    soft: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classifier_steps: Option<usize>,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic task spec; the built-in sentiment-lite task when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Task whose pattern and verbalizer words join the vocabulary.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    /// Texts for the vocabulary and MLM pretraining.
    #[arg(long)]
    unlabeled: PathBuf,
    /// Listen on this TCP address (one model per connection); stdin/stdout otherwise.
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct RerunArgs {
    /// Run directory holding manifest.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl Common {
    fn resolve(&self) -> Result<(TaskConfig, RunConfig, usize)> {
        let task = TaskConfig::load(&self.task)?;
        let mut config = load_config(self.config.as_deref())?;
        if let Some(b) = &self.backend {
            config.backend = b.parse::<BackendSpec>()?;
        }
        if let Some(seed) = self.seed {
            config.reseed(seed);
        }
        if let Some(r) = self.repetitions {
            config.repetitions = r;
        }
        if let Some(n) = self.max_seq_length {
            config.set_max_seq_length(n);
        }
        Ok((task, config, self.jobs.unwrap_or_else(default_jobs)))
    }

    fn options(&self) -> OutputOptions {
        OutputOptions { csv: self.csv }
    }
}

impl DataArgs {
    fn paths(&self) -> DataPaths {
        DataPaths {
            train: self.train.clone(),
            unlabeled: self.unlabeled.clone(),
            test: self.test.clone(),
        }
    }
}

impl TrainFlags {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(a) = self.alpha {
            config.train.alpha = a;
        }
        if let Some(s) = self.steps {
            config.train.steps = s;
        }
        if let Some(m) = self.lr_multiplier {
            config.train.lr_multiplier = m;
            config.classifier.lr_multiplier = m;
        }
        if let Some(w) = self.weighting {
            config.ensemble.weighting = w;
        }
        if let Some(t) = self.temperature {
            config.ensemble.temperature = t;
        }
        if let Some(s) = self.classifier_steps {
            config.classifier.steps = s;
        }
    }
}

/// Eval, label and distill take task and config from the run they read.
fn source_run(run: &Path) -> Result<(TaskConfig, RunConfig)> {
    let m = read_manifest(run)?;
    Ok((m.task, m.config))
}

fn run(cli: Cli) -> Result<Option<MetricsReport>> {
    let report = match cli.command {
        Cmd::Pet(a) => {
            let (task, mut config, jobs) = a.common.resolve()?;
            a.train.apply(&mut config);
            let command = Command::Pet { data: a.data.paths() };
            execute(command, task, config, &a.common.out, jobs, &a.common.options())?
        }
        Cmd::Ipet(a) => {
            let (task, mut config, jobs) = a.common.resolve()?;
            a.train.apply(&mut config);
            config.ipet.zero_shot |= a.zero_shot;
            if let Some(l) = a.lambda {
                config.ipet.lambda = l;
            }
            if let Some(d) = a.d {
                config.ipet.d = d;
            }
            if let Some(t) = a.target_examples {
                config.ipet.target_examples = t;
            }
            if a.schedule.is_some() {
                config.ipet.schedule = a.schedule.clone();
            }
            let command = Command::Ipet {
                data: a.data.paths(),
                resume: a.resume,
            };
            execute(command, task, config, &a.common.out, jobs, &a.common.options())?
        }
        Cmd::Supervised(a) => {
            let (task, mut config, jobs) = a.common.resolve()?;
            if let Some(s) = a.steps {
                config.supervised.steps = s;
            }
            if let Some(m) = a.lr_multiplier {
                config.supervised.lr_multiplier = m;
            }
            let command = Command::Supervised { data: a.data.paths() };
            execute(command, task, config, &a.common.out, jobs, &a.common.options())?
        }
        Cmd::Avs(a) => {
            let (task, mut config, jobs) = a.common.resolve()?;
            if let Some(k) = a.k {
                config.avs.k = k;
            }
            if let Some(i) = a.imax {
                config.avs.i_max = i;
            }
            if let Some(m) = a.m {
                config.avs.m = m;
            }
            if let Some(e) = a.epsilon {
                config.avs.epsilon = e;
            }
            let command = Command::Avs { data: a.data.paths() };
            execute(command, task, config, &a.common.out, jobs, &a.common.options())?
        }
        Cmd::Eval(a) => {
            let (task, config) = source_run(&a.run)?;
            let command = Command::Eval {
                run: a.run,
                data: a.data,
                model: a.model,
            };
            execute(command, task, config, &a.out, 1, &OutputOptions { csv: a.csv })?
        }
        Cmd::Label(a) => {
            let (task, config) = source_run(&a.run)?;
            let command = Command::Label {
                run: a.run,
                unlabeled: a.unlabeled,
            };
            execute(command, task, config, &a.out, 1, &OutputOptions::default())?
        }
        Cmd::Distill(a) => {
            let (task, mut config) = source_run(&a.run)?;
            if let Some(s) = a.classifier_steps {
                config.classifier.steps = s;
            }
            let command = Command::Distill {
                run: a.run,
                soft: a.soft,
                test: a.test,
            };
            execute(command, task, config, &a.out, 1, &OutputOptions { csv: a.csv })?
        }
        Cmd::Rerun(a) => rerun(&a.run, &a.out, &OutputOptions { csv: a.csv })?,
        Cmd::Synth(a) => {
            let mut spec = match &a.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| PetError::Config(format!("reading {}: {e}", p.display())))?;
                    toml::from_str::<SyntheticTaskSpec>(&text)
                        .map_err(|e| PetError::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticTaskSpec::sentiment_lite(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            write_synthetic(&spec, a.n_train, a.n_unlabeled, a.n_test, &a.out)?;
            return Ok(None);
        }
        Cmd::Serve(a) => {
            serve_toy(&a)?;
            return Ok(None);
        }
    };
    Ok(Some(report))
}

fn serve_toy(a: &ServeArgs) -> Result<()> {
    let task = TaskConfig::load(&a.task)?;
    let mut config = load_config(a.config.as_deref())?;
    config.backend = BackendSpec::Toy;
    let labels = task.label_set()?;
    let train = Dataset::load_jsonl(&a.train, &labels)?;
    let unlabeled = Dataset::load_jsonl(&a.unlabeled, &labels)?.without_labels();
    let prepared = prepare(&task, &config, &train, &unlabeled, None)?;
    let factory = Arc::new(prepared.factory);
    let io_err = |e: std::io::Error| PetError::BackendUnavailable(e.to_string());
    match &a.listen {
        None => {
            let mut backend = factory.create()?;
            let stdin = std::io::stdin();
            serve(backend.as_mut(), stdin.lock(), std::io::stdout().lock()).map_err(io_err)
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(io_err)?;
            let local = listener.local_addr().map_err(io_err)?;
            println!("listening on {local}");
            std::io::stdout().flush().map_err(io_err)?;
            for stream in listener.incoming() {
                let stream = stream.map_err(io_err)?;
                let factory = Arc::clone(&factory);
                std::thread::spawn(move || {
                    let result = (|| -> Result<()> {
                        let mut backend = factory.create()?;
                        let reader = BufReader::new(stream.try_clone().map_err(io_err)?);
                        serve(backend.as_mut(), reader, stream).map_err(io_err)
                    })();
                    if let Err(e) = result {
                        log::warn!("connection ended: {e}");
                    }
                });
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Some(report)) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
