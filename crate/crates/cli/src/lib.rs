//! Command-line entry points: inversion, proxies, sketch-inverter training,
//! recipe edits, benchmarks and the HTTP service.
//!
//! Exit codes: 0 on success, 2 when the input is invalid (bad flags, files,
//! recipes or config), 1 when the engine fails on valid input. Logs go to
//! standard error; artifacts go to the `--out` location.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hairproxy_core::inversion::{embed_fs, invert_wplus};
use hairproxy_core::io::{self, LatentFile};
use hairproxy_core::metrics::{load_dataset_spec, run_benchmark, toy_benchmark_items};
use hairproxy_core::proxies::{
    make_reference_proxy, make_sketch_proxy, make_text_proxy, ProxyEnv, TextProxyOptions,
};
use hairproxy_core::sketch::{
    generate_toy_dataset, load_dataset, save_dataset, train_sketch_inverter, SketchTrainConfig,
};
use hairproxy_core::{
    Config, Engine, Error, LatentFS, NoProgress, OptimConfig, Proxy, RecipeFile, Resolve,
    SketchInput, StageError, StageId, ToyGenerator,
};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "hairproxy",
    version,
    about = "Hair editing by proxy feature blending"
)]
pub struct Cli {
    /// Generator backend; overrides the config file.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendChoice>,

    /// Seed for commands that sample. Overrides a recipe's seed. Default 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Engine/service config (TOML). Defaults apply when absent.
    #[arg(long, global = true, env = "HAIRPROXY_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Toy,
    Pretrained,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert an image to W+ and embed it in FS space.
    Invert(InvertArgs),
    /// Build a single hairstyle proxy.
    MakeProxy(MakeProxyArgs),
    /// Write the procedural toy sketch dataset.
    GenSketchDataset(GenDatasetArgs),
    /// Train the sketch inverter on a `<name>.sketch` + `<name>.png` dataset.
    TrainSketch(TrainSketchArgs),
    /// Run one edit from a recipe file.
    Edit(EditArgs),
    /// Edit and score a dataset (a TOML spec or `toy:N`).
    Benchmark(BenchmarkArgs),
    /// Run the HTTP service.
    Serve,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory: `latent.hplt`, `reconstruction.png`, `inversion.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProxyChoice {
    Text,
    Reference,
    Sketch,
}

#[derive(Debug, Args)]
pub struct MakeProxyArgs {
    #[arg(long, value_enum)]
    pub kind: ProxyChoice,
    /// Source image (text and reference proxies).
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Stroke document (sketch proxies).
    #[arg(long)]
    pub sketch: Option<PathBuf>,
    /// Trained inverter weights; overrides the config.
    #[arg(long)]
    pub inverter: Option<PathBuf>,
    /// Output directory: `proxy.hplt`, `region.png`, `preview.png`, `proxy.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSketchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Output directory: `inverter.bin`, `curve.csv`, `training.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub recipe: PathBuf,
    /// Output directory: `result.png` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Dataset spec (TOML) or `toy:N` for N procedural toy items.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub report: PathBuf,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Invert(a) => invert(&cli, a),
        Command::MakeProxy(a) => make_proxy(&cli, a),
        Command::GenSketchDataset(a) => gen_sketch_dataset(&cli, a),
        Command::TrainSketch(a) => train_sketch(&cli, a),
        Command::Edit(a) => edit(&cli, a),
        Command::Benchmark(a) => benchmark(&cli, a),
        Command::Serve => serve(&cli),
    }
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(b) = cli.backend {
        cfg.generator.backend = match b {
            BackendChoice::Toy => "toy",
            BackendChoice::Pretrained => "pretrained",
        }
        .into();
    }
    Ok(cfg)
}

fn engine(cli: &Cli) -> CliResult<Engine> {
    Ok(load_config(cli)?.engine()?)
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn out_dir(p: &Path) -> CliResult {
    std::fs::create_dir_all(p)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", p.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::usage(format!("serializing {}: {e}", path.display())))?;
    Ok(io::save_text(path, &(text + "\n"))?)
}

/// The only concrete generator today; proxies that need its internals
/// (the sketch dataset) use it directly.
fn toy_only(engine: &Engine) -> CliResult<ToyGenerator> {
    if engine.gen.name() != "toy" {
        return Err(CliError::usage(format!(
            "this command needs the toy generator, not `{}`",
            engine.gen.name()
        )));
    }
    Ok(ToyGenerator::default())
}

#[derive(Serialize)]
struct InversionSummary {
    wplus_initial_loss: f64,
    wplus_loss: f64,
    wplus_flagged: bool,
    fs_initial_loss: f64,
    fs_loss: f64,
    fs_flagged: bool,
}

fn invert(cli: &Cli, a: &InvertArgs) -> CliResult {
    let engine = engine(cli)?;
    let img = io::load_image(&a.image)?;
    let seed = seed(cli);
    let b = &engine.budgets;
    let gen = engine.gen.as_ref();
    let patch = engine.backends.patch.as_ref();
    let inv = invert_wplus(
        &img,
        gen,
        patch,
        &OptimConfig::new(b.learning_rate, b.invert_steps, seed),
        &NoProgress,
    )?;
    let fs = embed_fs(
        &img,
        &inv.w,
        gen,
        patch,
        &OptimConfig::new(b.learning_rate, b.fs_steps, seed),
        &NoProgress,
    )?;
    out_dir(&a.out)?;
    let recon = hairproxy_core::inversion::synthesize_fs(&fs.fs, gen)?;
    io::save_latent(
        &a.out.join("latent.hplt"),
        &LatentFile {
            w: inv.w,
            fs: Some(fs.fs),
        },
    )?;
    io::save_image(&a.out.join("reconstruction.png"), &recon)?;
    write_json(
        &a.out.join("inversion.json"),
        &InversionSummary {
            wplus_initial_loss: inv.initial_loss,
            wplus_loss: inv.loss,
            wplus_flagged: inv.flagged,
            fs_initial_loss: fs.initial_loss,
            fs_loss: fs.loss,
            fs_flagged: fs.flagged,
        },
    )
}

#[derive(Serialize)]
struct ProxySummary<'a> {
    kind: hairproxy_core::ProxyKind,
    region_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    optim: Option<&'a hairproxy_core::proxies::OptimSummary>,
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, kind: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::usage(format!("--{flag} is required for {kind} proxies")))
}

fn make_proxy(cli: &Cli, a: &MakeProxyArgs) -> CliResult {
    let mut engine = engine(cli)?;
    let seed = seed(cli);
    let b = engine.budgets.clone();
    let proxy: Proxy = match a.kind {
        ProxyChoice::Sketch => {
            let sketch = SketchInput::load(need(&a.sketch, "sketch", "sketch")?)?;
            if let Some(p) = &a.inverter {
                engine.inverter = Some(std::sync::Arc::new(hairproxy_core::SketchInverter::load(
                    p,
                )?));
            }
            let inverter = engine
                .inverter
                .as_ref()
                .ok_or_else(|| CliError::usage("no sketch inverter configured"))?;
            make_sketch_proxy(&sketch, inverter, engine.gen.as_ref())?
        }
        kind => {
            let src = io::load_image(need(&a.image, "image", "text and reference")?)?;
            let env = ProxyEnv {
                gen: engine.gen.as_ref(),
                backends: &engine.backends,
                weights: &engine.weights,
                progress: &NoProgress,
            };
            if kind == ProxyChoice::Text {
                let text = need(&a.text, "text", "text")?;
                make_text_proxy(
                    text,
                    &src,
                    &env,
                    &OptimConfig::new(b.learning_rate, b.text_steps, seed),
                    None,
                    &TextProxyOptions::default(),
                )?
            } else {
                let reference = io::load_image(need(&a.reference, "reference", "reference")?)?;
                make_reference_proxy(
                    &reference,
                    &src,
                    &env,
                    &OptimConfig::new(b.learning_rate, b.reference_steps, seed),
                    &OptimConfig::new(b.learning_rate, b.invert_steps, seed),
                    None,
                )?
            }
        }
    };
    out_dir(&a.out)?;
    let w = proxy
        .w
        .clone()
        .ok_or_else(|| CliError::usage("proxy has no latent code"))?;
    let f_style = match &proxy.f_style {
        Some(f) => f.clone(),
        None => engine.gen.synth_to_stage(&w, StageId::Style)?,
    };
    io::save_image(&a.out.join("preview.png"), &engine.gen.synthesize(&w)?)?;
    io::save_latent(
        &a.out.join("proxy.hplt"),
        &LatentFile {
            fs: Some(LatentFS::new(f_style, w.slice(8, 18))?),
            w,
        },
    )?;
    io::save_mask(&a.out.join("region.png"), &proxy.region)?;
    write_json(
        &a.out.join("proxy.json"),
        &ProxySummary {
            kind: proxy.kind,
            region_cells: proxy.region.count(),
            optim: proxy.optim.as_ref(),
        },
    )
}

fn gen_sketch_dataset(cli: &Cli, a: &GenDatasetArgs) -> CliResult {
    let engine = engine(cli)?;
    let gen = toy_only(&engine)?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let pairs = generate_toy_dataset(&gen, engine.backends.parsing.as_ref(), a.count, seed(cli))?;
    out_dir(&a.out)?;
    save_dataset(&a.out, &pairs)?;
    log::info!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainingSummary {
    pairs: usize,
    steps: usize,
    seed: u64,
    learning_rate: f64,
    dropout: f64,
    initial_mean_loss: f64,
    final_mean_loss: f64,
    /// `1 − final/initial` of the dataset-mean loss.
    relative_drop: f64,
}

fn train_sketch(cli: &Cli, a: &TrainSketchArgs) -> CliResult {
    if a.steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let engine = engine(cli)?;
    let pairs = load_dataset(&a.dataset)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!(
            "no <name>.sketch + <name>.png pairs in {}",
            a.dataset.display()
        )));
    }
    let cfg = SketchTrainConfig::new(a.steps, seed(cli));
    let t = Instant::now();
    let out = train_sketch_inverter(
        &pairs,
        engine.gen.as_ref(),
        engine.backends.parsing.as_ref(),
        engine.backends.patch.as_ref(),
        &engine.weights,
        &cfg,
        &NoProgress,
    )?;
    log::info!(
        "trained {} steps in {:.1}s: mean loss {:.6} -> {:.6}",
        a.steps,
        t.elapsed().as_secs_f64(),
        out.initial_mean_loss,
        out.final_mean_loss
    );
    out_dir(&a.out)?;
    out.inverter.save(&a.out.join("inverter.bin"))?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in out.step_losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:e}\n"));
    }
    io::save_text(&a.out.join("curve.csv"), &curve)?;
    write_json(
        &a.out.join("training.json"),
        &TrainingSummary {
            pairs: pairs.len(),
            steps: a.steps,
            seed: cfg.optim.seed,
            learning_rate: cfg.optim.learning_rate,
            dropout: cfg.dropout,
            initial_mean_loss: out.initial_mean_loss,
            final_mean_loss: out.final_mean_loss,
            relative_drop: 1.0 - out.final_mean_loss / out.initial_mean_loss,
        },
    )
}

fn edit(cli: &Cli, a: &EditArgs) -> CliResult {
    let base = engine(cli)?;
    let image = io::load_image(&a.image)?;
    let (recipe, dir) = RecipeFile::load(&a.recipe)?;
    let mut request = recipe.to_request(Resolve::Dir(&dir))?;
    if let Some(s) = cli.seed {
        request.seed = s;
    }
    request.validate(base.gen.as_ref())?;
    let engine = recipe.apply_overrides(&base)?;
    let out = engine.run_edit(&image, &request, &NoProgress)?;
    for t in &out.report.timings {
        eprintln!("timing {:<16} {:.3}s", t.stage, t.seconds);
    }
    out_dir(&a.out)?;
    io::save_image(&a.out.join("result.png"), &out.image)?;
    write_json(&a.out.join("report.json"), &out.report.without_timings())
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> CliResult {
    let engine = engine(cli)?;
    let (items, skipped) = match a.dataset.strip_prefix("toy:") {
        Some(n) => {
            let count: usize = n
                .parse()
                .map_err(|_| CliError::usage(format!("`{}` is not toy:<count>", a.dataset)))?;
            (
                toy_benchmark_items(&toy_only(&engine)?, count, seed(cli))?,
                Vec::new(),
            )
        }
        None => load_dataset_spec(Path::new(&a.dataset))?,
    };
    if items.is_empty() {
        return Err(CliError::usage("benchmark dataset has no usable items"));
    }
    let report = run_benchmark(&items, &engine, skipped);
    eprintln!(
        "aggregate over {} items ({} skipped): ids {:.4} psnr {:.2} dB ssim {:.4} runtime {:.2}s",
        report.items.len(),
        report.skipped.len(),
        report.aggregate.ids,
        report.aggregate.psnr_db,
        report.aggregate.ssim,
        report.aggregate.runtime_s
    );
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    Ok(io::save_text(&a.report, &(report.to_json()? + "\n"))?)
}

fn serve(cli: &Cli) -> CliResult {
    let cfg = load_config(cli)?;
    // Anything that stops the service from starting is a config problem.
    let engine = cfg.engine().map_err(|e| CliError::usage(e.to_string()))?;
    let addr = hairproxy_service::bind_address(&cfg.service)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {addr}: {e}")))?;
        let service = hairproxy_service::Service::start(
            engine,
            &hairproxy_service::ServiceOptions::from_section(&cfg.service),
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::usage(e.to_string()))?;
        eprintln!("listening on {local}");
        service
            .run(listener, shutdown_signal())
            .await
            .map_err(|e| CliError {
                code: 1,
                message: e.to_string(),
            })
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutdown requested");
}
