use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use edgeloop::bench::{generate_synthetic, run_sustainability_loop, run_tradeoff_bench};
use edgeloop::config::{CliConfig, SEED_ENV};
use edgeloop::data::Dataset;
use edgeloop::exchange::{self, check_references, rewrite_bytes, validate_ops, ExchangeFile, OpSupportTable};
use edgeloop::preprocess::decode_ppm;
use edgeloop::runtime::{load_session, OutputFormat};
use edgeloop::train::{
    apply_regime, fit_preprocess, load_checkpoint, save_checkpoint, split_train_test, train, Regime, TensorSet,
};
use edgeloop::Error;

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_MODEL: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "edgeloop",
    version,
    about = "Train, export, check and run small image classifiers"
)]
struct Cli {
    /// key=value settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (falls back to train.seed, then EDGELOOP_SEED, then 7).
    #[arg(long, global = true)]
    seed: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic glyph dataset (PPM images plus labels.csv).
    Datagen(DatagenArgs),
    /// Train a model on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Turn a checkpoint into a deployable exchange file.
    Export {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an exchange file against an operator support table.
    Check {
        model: PathBuf,
        /// `default` or a support-table file.
        #[arg(long, default_value = "default")]
        support: String,
        /// Rewrite flattening Reshape nodes into Flatten.
        #[arg(long, requires = "out")]
        fix: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify PPM images with an exchange file.
    Infer {
        model: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Line)]
        format: Format,
        #[arg(long, default_value = "default")]
        support: String,
    },
    /// Accuracy/complexity trade-off over several configurations.
    Bench(BenchArgs),
    /// Two deployment iterations with operation data sent back for retraining.
    Loop(LoopArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Line,
    Kv,
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    first_glyph: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    base_channels: Option<String>,
    #[arg(long)]
    fc1_out: Option<String>,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// fe, ft or tfs.
    #[arg(long)]
    regime: Option<String>,
    /// Checkpoint to start from (required for fe and ft).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<String>,
    /// Comma-separated conv block counts.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    /// Print the aligned table on stdout.
    #[arg(long)]
    table: bool,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct LoopArgs {
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    op: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    table: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Settings(_) | Error::Config(_) => EXIT_USAGE,
            Error::Data(_) | Error::Ppm(_) | Error::DegenerateChannel { .. } => EXIT_DATA,
            Error::Format(_) | Error::Checkpoint(_) | Error::Dimension { .. } | Error::InvalidArgument { .. } => {
                EXIT_MODEL
            }
            Error::Diverged { .. } | Error::TapeConsumed | Error::Io(_) => EXIT_FAILED,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<edgeloop::config::ConfigError> for Failure {
    fn from(e: edgeloop::config::ConfigError) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<u8, Failure>;

fn set(cfg: &mut CliConfig, key: &str, value: &Option<String>) -> Result<(), Failure> {
    if let Some(v) = value {
        cfg.set(key, v)?;
    }
    Ok(())
}

fn apply_model(cfg: &mut CliConfig, m: &ModelArgs) -> Result<(), Failure> {
    set(cfg, "model.family", &m.family)?;
    set(cfg, "model.size", &m.size)?;
    set(cfg, "model.blocks", &m.blocks)?;
    set(cfg, "model.base_channels", &m.base_channels)?;
    set(cfg, "model.fc1_out", &m.fc1_out)
}

fn apply_training(cfg: &mut CliConfig, t: &TrainingArgs) -> Result<(), Failure> {
    set(cfg, "train.epochs", &t.epochs)?;
    set(cfg, "train.batch_size", &t.batch_size)?;
    set(cfg, "train.learning_rate", &t.lr)?;
    set(cfg, "train.optimizer", &t.optimizer)?;
    if t.no_augment {
        cfg.set("train.augment", "false")?;
    }
    Ok(())
}

fn read_model(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::new(EXIT_MODEL, format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::new(EXIT_FAILED, format!("cannot write {}: {e}", path.display())))
}

fn support_table(arg: &str) -> Result<OpSupportTable, Failure> {
    if arg == "default" {
        return Ok(OpSupportTable::default_table());
    }
    let text = fs::read_to_string(arg).map_err(|e| Failure::new(EXIT_USAGE, format!("cannot read {arg}: {e}")))?;
    OpSupportTable::parse(&text).map_err(|e| Failure::new(EXIT_USAGE, format!("{arg}: {e}")))
}

fn datagen(cfg: &mut CliConfig, seed: u64, a: &DatagenArgs) -> Outcome {
    set(cfg, "data.classes", &a.classes)?;
    set(cfg, "data.per_class", &a.per_class)?;
    set(cfg, "data.size", &a.size)?;
    set(cfg, "data.shift", &a.shift)?;
    set(cfg, "data.first_glyph", &a.first_glyph)?;
    let spec = cfg.synth_spec(seed)?;
    let data = generate_synthetic(&spec).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    data.write_dir(&a.out)
        .map_err(|e| Failure::new(EXIT_FAILED, format!("cannot write {}: {e}", a.out.display())))?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(0)
}

fn train_cmd(cfg: &mut CliConfig, seed: u64, a: &TrainArgs) -> Outcome {
    apply_model(cfg, &a.model)?;
    apply_training(cfg, &a.training)?;
    set(cfg, "train.regime", &a.regime)?;
    set(cfg, "data.test_fraction", &a.test_fraction)?;
    let tc = cfg.train_config(seed)?;
    let data = Dataset::load_dir(&a.data)?;
    let (train_data, test_data) =
        split_train_test(&data, cfg.get("data.test_fraction", "a fraction in (0, 1)")?, seed)?;
    let model = cfg.model_spec(data.num_classes())?;
    let spec = fit_preprocess(&train_data, model.image_size())?;
    let train_set = TensorSet::from_dataset(&train_data, &spec, tc.augment)?;
    let test_set = TensorSet::from_dataset(&test_data, &spec, false)?;
    let mut g = model.build(seed)?;
    if tc.regime != Regime::TrainFromScratch {
        let path = a
            .pretrained
            .as_ref()
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("regime {} needs --pretrained", tc.regime)))?;
        let pretrained = load_checkpoint(&read_model(path)?)?;
        g = apply_regime(g, tc.regime, Some(&pretrained), seed)?;
    }
    g.meta.preprocess = Some(spec);
    let (g, report) = train(g, &train_set, Some(&test_set), &tc)?;
    write(&a.out, &save_checkpoint(&g, Some(&report)))?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch={} loss={loss:.6}", i + 1);
    }
    println!(
        "params={} test_accuracy={:.4}",
        g.param_count(),
        report.test_accuracy.unwrap_or(0.0)
    );
    eprintln!(
        "trained in {:.1}s, checkpoint {}",
        report.wall_time.as_secs_f64(),
        a.out.display()
    );
    Ok(0)
}

fn export_cmd(checkpoint: &Path, out: &Path) -> Outcome {
    let g = load_checkpoint(&read_model(checkpoint)?)?;
    if g.meta.preprocess.is_none() {
        return Err(Failure::new(EXIT_MODEL, "checkpoint carries no preprocessing spec"));
    }
    let bytes = exchange::export_model(&g, None);
    write(out, &bytes)?;
    println!("{} bytes", bytes.len());
    Ok(0)
}

fn check_cmd(model: &Path, support: &str, fix: bool, out: Option<&Path>) -> Outcome {
    let table = support_table(support)?;
    let bytes = read_model(model)?;
    let file = ExchangeFile::decode(&bytes).map_err(Error::from)?;
    check_references(&file).map_err(Error::from)?;
    let violations = validate_ops(&file, &table);
    for v in &violations {
        println!("{v}");
    }
    if !fix {
        return Ok(if violations.is_empty() { 0 } else { EXIT_FAILED });
    }
    let out = out.expect("clap enforces --out with --fix");
    let fixed = rewrite_bytes(&bytes)?;
    let remaining = validate_ops(&ExchangeFile::decode(&fixed).map_err(Error::from)?, &table);
    write(out, &fixed)?;
    println!(
        "rewrote {} node(s); {} violation(s) remain",
        violations.iter().filter(|v| v.rewritable).count(),
        remaining.len()
    );
    for v in &remaining {
        println!("{v}");
    }
    Ok(if remaining.is_empty() { 0 } else { EXIT_FAILED })
}

fn infer_cmd(model: &Path, images: &[PathBuf], format: Format, support: &str) -> Outcome {
    let session = load_session(&read_model(model)?, &support_table(support)?)?;
    let format = match format {
        Format::Line => OutputFormat::Line,
        Format::Kv => OutputFormat::Kv,
    };
    for path in images {
        let bytes =
            fs::read(path).map_err(|e| Failure::new(EXIT_DATA, format!("cannot read {}: {e}", path.display())))?;
        let img = decode_ppm(&bytes).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
        println!("{}", format.render(&session.predict(&img)?));
    }
    Ok(0)
}

fn bench_cmd(cfg: &mut CliConfig, seed: u64, a: &BenchArgs) -> Outcome {
    apply_training(cfg, &a.training)?;
    set(cfg, "bench.jobs", &a.jobs)?;
    set(cfg, "bench.blocks", &a.blocks)?;
    set(cfg, "data.test_fraction", &a.test_fraction)?;
    let tc = cfg.train_config(seed)?;
    let data = Dataset::load_dir(&a.data)?;
    let (train_data, test_data) =
        split_train_test(&data, cfg.get("data.test_fraction", "a fraction in (0, 1)")?, seed)?;
    let models = cfg.bench_models(data.num_classes())?;
    let report = run_tradeoff_bench(
        &models,
        &train_data,
        &test_data,
        &tc,
        cfg.get("bench.jobs", "a worker count")?,
    )?;
    match &a.out {
        Some(path) => write(path, report.to_csv().as_bytes())?,
        None if !a.table => print!("{}", report.to_csv()),
        None => {}
    }
    if a.table {
        print!("{}", report.to_table());
    }
    let diverged = report.rows.iter().filter(|r| r.test_accuracy.is_none()).count();
    if diverged > 0 {
        eprintln!("{diverged} configuration(s) diverged");
        return Ok(EXIT_FAILED);
    }
    Ok(0)
}

fn loop_cmd(cfg: &mut CliConfig, seed: u64, a: &LoopArgs) -> Outcome {
    apply_model(cfg, &a.model)?;
    apply_training(cfg, &a.training)?;
    let tc = cfg.train_config(seed)?;
    let dev = Dataset::load_dir(&a.dev)?;
    let op = Dataset::load_dir(&a.op)?;
    let model = cfg.model_spec(dev.num_classes().max(op.num_classes()))?;
    let report = run_sustainability_loop(&model, &dev, &op, &tc)?;
    match &a.out {
        Some(path) => write(path, report.to_csv().as_bytes())?,
        None if !a.table => print!("{}", report.to_csv()),
        None => {}
    }
    if a.table {
        print!("{}", report.to_table());
    }
    if !report.is_disjoint() {
        return Err(Failure::new(
            EXIT_DATA,
            format!(
                "{} held-out operation image(s) also appear in training data",
                report.eval_overlap
            ),
        ));
    }
    Ok(0)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(s) = &cli.seed {
        cfg.set("train.seed", s)?;
    }
    let seed = cfg.seed(std::env::var(SEED_ENV).ok().as_deref())?;
    match &cli.command {
        Command::Datagen(a) => datagen(&mut cfg, seed, a),
        Command::Train(a) => train_cmd(&mut cfg, seed, a),
        Command::Export { checkpoint, out } => export_cmd(checkpoint, out),
        Command::Check {
            model,
            support,
            fix,
            out,
        } => check_cmd(model, support, *fix, out.as_deref()),
        Command::Infer {
            model,
            images,
            format,
            support,
        } => infer_cmd(model, images, *format, support),
        Command::Bench(a) => bench_cmd(&mut cfg, seed, a),
        Command::Loop(a) => loop_cmd(&mut cfg, seed, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
