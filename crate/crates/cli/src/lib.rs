//! The `resc` command line: encode, decode, train, eval, inspect.

use clap::{Args, Parser, Subcommand};
use resc_core::codec::image::write_atomic;
use resc_core::codec::lossy::backend_from_spec;
use resc_core::codec::models::{NeuralModel, ResidualModel, UniformModel};
use resc_core::codec::CodecError;
use resc_core::model::ModelError;
use resc_core::train::{self, synth, PatchDataset, TrainConfig, TrainError};
use resc_core::{decode, encode, Checkpoint, Container, EncodeOptions, Image, LossyBackend, ModelConfig};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "resc", version, about = "Lossless image codec: lossy base layer plus a learned residual coder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a PPM/PGM image into a container.
    Encode(EncodeArgs),
    /// Restore the original image from a container.
    Decode(DecodeArgs),
    /// Train an entropy model checkpoint on a corpus directory.
    Train(TrainArgs),
    /// Report per-image lossy/residual/total bits per subpixel.
    Eval(EvalArgs),
    /// Print container header fields and the size split.
    Inspect(InspectArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Write a seeded synthetic image corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint path, or `uniform` for the flat baseline model.
    #[arg(short = 'm', long = "model")]
    pub model: String,
    /// Patch side for the uniform model.
    #[arg(long, default_value_t = 16)]
    pub uniform_patch: usize,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Patch worker threads; 0 uses every core. Defaults to $RESC_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `identity`, `[builtin:]qdown:2|4|8` or `external:<config file>`.
    #[arg(short = 'b', long, default_value = "qdown:2")]
    pub backend: String,
    #[command(flatten)]
    pub workers: WorkerArgs,
    /// Omit the whole-image checksum.
    #[arg(long)]
    pub no_checksum: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Lossy backend; defaults to the builtin named in the container.
    #[arg(short = 'b', long)]
    pub backend: Option<String>,
    #[command(flatten)]
    pub workers: WorkerArgs,
}

#[derive(Debug, Args)]
pub struct ModelShape {
    #[arg(long, default_value_t = ModelConfig::default().d)]
    pub d: usize,
    #[arg(long, default_value_t = ModelConfig::default().layers)]
    pub layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().mixtures)]
    pub mixtures: usize,
    #[arg(long, default_value_t = ModelConfig::default().patch)]
    pub patch: usize,
    #[arg(long, default_value_t = ModelConfig::default().global_tokens)]
    pub global_tokens: usize,
    #[arg(long, default_value_t = ModelConfig::default().channels)]
    pub channels: usize,
}

impl ModelShape {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            mixtures: self.mixtures,
            patch: self.patch,
            global_tokens: self.global_tokens,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of PPM/PGM training images.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint written periodically and at the end.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// Continue from this checkpoint instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ModelShape,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short = 'b', long, default_value = "qdown:2")]
    pub backend: String,
    /// Validation fraction of corpus images.
    #[arg(long, default_value_t = TrainConfig::default().split)]
    pub split: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().log_every)]
    pub log_every: u64,
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    pub checkpoint_every: u64,
    /// JSON summary path; defaults to the checkpoint path plus `.json`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub workers: WorkerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of images to code.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Individual image files.
    #[arg(short = 'i', long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(short = 'b', long, default_value = "qdown:2")]
    pub backend: String,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub workers: WorkerArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(short = 'i', long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub shape: ModelShape,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Domain(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Io(_) => EXIT_IO,
            Failure::Domain(_) => EXIT_DOMAIN,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Domain(m) => m,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Io(_) => "io",
            Failure::Domain(_) => "error",
        }
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io(_) => Failure::Io(e.to_string()),
            CodecError::Model(m) => m.into(),
            other => Failure::Domain(other.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Domain(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(_) => Failure::Io(e.to_string()),
            TrainError::Codec(c) => c.into(),
            TrainError::Model(m) => m.into(),
            other => Failure::Domain(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn context(cmd: &str, e: impl Into<Failure>) -> Failure {
    match e.into() {
        Failure::Usage(m) => Failure::Usage(format!("{cmd}: {m}")),
        Failure::Io(m) => Failure::Io(format!("{cmd}: {m}")),
        Failure::Domain(m) => Failure::Domain(format!("{cmd}: {m}")),
    }
}

fn need_file(p: &Path) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!("{}: no such file", p.display())))
    }
}

fn need_dir(p: &Path) -> Outcome {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Io(format!("{}: no such directory", p.display())))
    }
}

fn need_parent(p: &Path) -> Outcome {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => need_dir(d),
        _ => Ok(()),
    }
}

fn workers(w: &WorkerArgs) -> Result<usize, Failure> {
    if let Some(n) = w.workers {
        return Ok(n);
    }
    match std::env::var("RESC_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("RESC_WORKERS={v:?} is not a worker count"))),
        Err(_) => Ok(0),
    }
}

fn load_model(m: &ModelArgs) -> Result<Box<dyn ResidualModel>, Failure> {
    if m.model == "uniform" {
        if m.uniform_patch == 0 || m.uniform_patch > u16::MAX as usize {
            return Err(Failure::Usage(format!("uniform patch {} is out of range", m.uniform_patch)));
        }
        return Ok(Box::new(UniformModel::new(m.uniform_patch)));
    }
    let path = Path::new(&m.model);
    need_file(path)?;
    Ok(Box::new(NeuralModel::new(&Checkpoint::load(path)?)))
}

fn load_backend(spec: &str) -> Result<Box<dyn LossyBackend>, Failure> {
    if let Some(cfg) = spec.strip_prefix("external:") {
        need_file(Path::new(cfg))?;
    }
    Ok(backend_from_spec(spec)?)
}

fn run_encode(a: &EncodeArgs, out: &mut dyn Write) -> Outcome {
    need_file(&a.input)?;
    need_parent(&a.output)?;
    let workers = workers(&a.workers)?;
    let backend = load_backend(&a.backend)?;
    let model = load_model(&a.model)?;
    let img = Image::read(&a.input)?;
    let c = encode(&img, backend.as_ref(), model.as_ref(), &EncodeOptions { workers, checksum: !a.no_checksum })?;
    let bytes = c.to_bytes();
    write_atomic(&a.output, &bytes)?;
    let r = c.bpsp();
    let _ = writeln!(
        out,
        "{}: {} bytes, {:.4} bpsp (lossy {:.4}, residual {:.4}, header {:.4})",
        a.output.display(),
        bytes.len(),
        r.total(),
        r.lossy(),
        r.residual(),
        r.header()
    );
    Ok(())
}

fn builtin_for(id: &str) -> Result<String, Failure> {
    if id.starts_with("external:") {
        return Err(Failure::Usage(format!("container uses {id}; pass --backend external:<config>")));
    }
    Ok(id.to_string())
}

fn run_decode(a: &DecodeArgs, out: &mut dyn Write) -> Outcome {
    need_file(&a.input)?;
    need_parent(&a.output)?;
    let workers = workers(&a.workers)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))?;
    let c = Container::parse(&bytes)?;
    let spec = match &a.backend {
        Some(s) => s.clone(),
        None => builtin_for(&c.backend)?,
    };
    let backend = load_backend(&spec)?;
    let model: Box<dyn ResidualModel> = if a.model.model == "uniform" {
        Box::new(UniformModel::new(c.patch as usize))
    } else {
        load_model(&a.model)?
    };
    let img = decode(&c, backend.as_ref(), model.as_ref(), workers)?;
    img.write(&a.output)?;
    let _ = writeln!(
        out,
        "{}: {}x{}x{}",
        a.output.display(),
        img.width(),
        img.height(),
        img.channels()
    );
    Ok(())
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> Outcome {
    need_dir(&a.corpus)?;
    need_parent(&a.output)?;
    if let Some(p) = &a.init {
        need_file(p)?;
    }
    let init = match &a.init {
        Some(p) => Checkpoint::load(p)?,
        None => Checkpoint::init(a.shape.config(), a.seed)?,
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        steps: a.steps,
        seed: a.seed,
        backend: a.backend.clone(),
        patch: init.config.patch,
        split: a.split,
        weight_decay: a.weight_decay,
        log_every: a.log_every,
        checkpoint_every: a.checkpoint_every,
        workers: workers(&a.workers)?,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let backend = load_backend(&cfg.backend)?;
    let data = PatchDataset::from_dir(&a.corpus, backend.as_ref(), cfg.patch, init.config.channels, cfg.split, cfg.seed)?;
    for (name, why) in data.skipped() {
        let _ = writeln!(out, "skipping {name}: {why}");
    }
    let _ = writeln!(
        out,
        "training {} parameters on {} images ({} held out)",
        init.parameter_count(),
        data.train_images().len(),
        data.validation_images().len()
    );
    let outcome = train::train(&cfg, init, &data, Some(&a.output), out)?;
    let summary = a.summary.clone().unwrap_or_else(|| {
        let mut s = a.output.clone().into_os_string();
        s.push(".json");
        PathBuf::from(s)
    });
    write_atomic(&summary, outcome.report.to_json().as_bytes())?;
    let _ = writeln!(out, "wrote {} and {}", a.output.display(), summary.display());
    Ok(())
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> Outcome {
    let mut paths = a.inputs.clone();
    if let Some(dir) = &a.corpus {
        need_dir(dir)?;
        paths.extend(train::corpus_files(dir)?);
    }
    if paths.is_empty() {
        return Err(Failure::Usage("give --corpus or at least one --input".into()));
    }
    if let Some(j) = &a.json {
        need_parent(j)?;
    }
    let workers = workers(&a.workers)?;
    let backend = load_backend(&a.backend)?;
    let model = load_model(&a.model)?;
    let rep = train::evaluate_files(model.as_ref(), backend.as_ref(), &paths, workers);
    let _ = write!(out, "{}", rep.to_table());
    if let Some(j) = &a.json {
        let text = serde_json::to_string_pretty(&rep).expect("report serializes");
        write_atomic(j, text.as_bytes())?;
    }
    if rep.rows.is_empty() {
        return Err(Failure::Domain("no image could be evaluated".into()));
    }
    Ok(())
}

fn run_inspect(a: &InspectArgs, out: &mut dyn Write) -> Outcome {
    need_file(&a.input)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))?;
    let c = Container::parse(&bytes)?;
    let r = c.bpsp();
    let file_bpsp = 8.0 * bytes.len() as f64 / r.subpixels as f64;
    let _ = writeln!(out, "size        {}x{}x{}", c.width, c.height, c.channels);
    let _ = writeln!(out, "patch       {}", c.patch);
    let _ = writeln!(out, "mixtures    {}", c.mixtures);
    let _ = writeln!(out, "model       {:016x}", c.model_hash);
    let _ = writeln!(out, "backend     {}", c.backend);
    let _ = writeln!(out, "patches     {}", c.streams.len());
    let _ = writeln!(out, "checksum    {}", c.checksum.map_or("none".into(), |s| format!("{s:016x}")));
    let _ = writeln!(out, "bytes       {} (lossy {}, residual {}, header {})", bytes.len(), r.lossy_bytes, r.residual_bytes, r.header_bytes());
    let _ = writeln!(out, "lossy bpsp     {:.4}", r.lossy());
    let _ = writeln!(out, "residual bpsp  {:.4}", r.residual());
    let _ = writeln!(out, "header bpsp    {:.4}", r.header());
    let _ = writeln!(out, "total bpsp     {:.4}", file_bpsp);
    Ok(())
}

fn run_init(a: &InitArgs, out: &mut dyn Write) -> Outcome {
    need_parent(&a.output)?;
    let c = Checkpoint::init(a.shape.config(), a.seed)?;
    c.save(&a.output)?;
    let _ = writeln!(out, "{}: {} parameters, hash {:016x}", a.output.display(), c.parameter_count(), c.fingerprint());
    Ok(())
}

fn run_synth(a: &SynthArgs, out: &mut dyn Write) -> Outcome {
    if a.width == 0 || a.height == 0 || (a.channels != 1 && a.channels != 3) {
        return Err(Failure::Usage("synthetic images need positive sides and 1 or 3 channels".into()));
    }
    std::fs::create_dir_all(&a.output).map_err(|e| Failure::Io(format!("{}: {e}", a.output.display())))?;
    for (name, img) in synth::corpus(a.seed, a.count, a.width, a.height, a.channels) {
        img.write(&a.output.join(name))?;
    }
    let _ = writeln!(out, "wrote {} images to {}", a.count, a.output.display());
    Ok(())
}

/// Runs one parsed command, writing progress to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Outcome {
    match &cli.command {
        Command::Encode(a) => run_encode(a, out).map_err(|e| context("encode", e)),
        Command::Decode(a) => run_decode(a, out).map_err(|e| context("decode", e)),
        Command::Train(a) => run_train(a, out).map_err(|e| context("train", e)),
        Command::Eval(a) => run_eval(a, out).map_err(|e| context("eval", e)),
        Command::Inspect(a) => run_inspect(a, out).map_err(|e| context("inspect", e)),
        Command::Init(a) => run_init(a, out).map_err(|e| context("init", e)),
        Command::Synth(a) => run_synth(a, out).map_err(|e| context("synth", e)),
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "resc: {}: {}", f.kind(), f.message());
            f.code()
        }
    }
}
