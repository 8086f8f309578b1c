use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use p2d_core::corpus::{ingest_directory, load_manifest, save_manifest, CorpusError, DomainTag};
use p2d_core::depth::{depth_to_relief_mesh, estimate_depth, export_depth_png16, normalize_depth, DepthError};
use p2d_core::imaging::{Image, ImagingError};
use p2d_core::matcher::{
    build_clip_matched_dataset, default_dictionary, Dictionary, EmbeddingCache, MatchError, MatchingContext,
    DEFAULT_TEMPERATURE,
};
use p2d_core::pipeline::{
    k_sweep, run_full, BackendSpec, MeshSettings, PipelineConfig, PipelineError, RunRecord, Stage,
};
use p2d_core::refine::{refine_image, RefineError, RefineRequest, DEFAULT_STEPS, DEFAULT_STRENGTH};
use p2d_core::translation::{
    load_checkpoint, train, translate_image, RunTarget, TrainConfig, TrainingData, TranslationError,
    TranslatorPair,
};
use p2d_study_server::ServerError;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Translation(#[from] TranslationError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Oriental landscape paintings to real-scene photographs, depth maps and
/// printable relief meshes.
#[derive(Debug, Parser)]
#[command(name = "p2d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan an image directory into a manifest.
    Ingest(IngestArgs),
    /// Pair every painting with its K best-matching photos.
    Match(MatchArgs),
    /// Train the unpaired painting/photo translator on a matched manifest.
    Train(TrainArgs),
    /// Translate one painting into a pseudo-real photo with a checkpoint.
    Translate(TranslateArgs),
    /// Turn a pseudo-real image into a real-scene image guided by the painting.
    Refine(RefineArgs),
    /// Estimate a depth map and optionally export a relief mesh.
    Depth(DepthArgs),
    /// Run the whole pipeline from a config file, resuming where possible.
    Run(RunArgs),
    /// Run the pipeline once per K and write a comparison sheet.
    Sweep(SweepArgs),
    /// Serve user studies over HTTP.
    ServeStudy(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Tag {
    Painting,
    Photo,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, value_enum)]
    tag: Tag,
    #[arg(long)]
    out: PathBuf,
    /// Keep a seeded random subset of this many records.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum BackendKind {
    #[default]
    Stub,
    External,
}

/// Backend choice shared by every model-backed command.
#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "stub")]
    backend: BackendKind,
    /// Executable implementing the backend's command contract.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Extra leading argument for the program; repeatable.
    #[arg(long = "arg", allow_hyphen_values = true)]
    args: Vec<String>,
    /// Version string recorded for the external backend.
    #[arg(long = "backend-version", default_value = "external")]
    backend_version: String,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec, CliError> {
        match self.backend {
            BackendKind::Stub => Ok(BackendSpec::Stub),
            BackendKind::External => Ok(BackendSpec::Command {
                program: self
                    .program
                    .clone()
                    .ok_or_else(|| CliError::Usage("--backend external needs --program".into()))?,
                args: self.args.clone(),
                version: self.backend_version.clone(),
            }),
        }
    }
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long)]
    paintings: PathBuf,
    #[arg(long)]
    photos: PathBuf,
    #[arg(short, long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Dictionary text file; the built-in dictionary when omitted.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[command(flatten)]
    encoder: BackendArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    matched: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    /// A checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Longest side fed to the generator; the training size by default.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// The painting whose structure is kept.
    #[arg(long)]
    content: PathBuf,
    /// The pseudo-real image that supplies appearance.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
struct DepthArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// 16-bit grayscale PNG of normalized inverse depth.
    #[arg(long)]
    out: PathBuf,
    /// Relief mesh path; `.obj` writes OBJ, anything else binary STL.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = MeshSettings::default().pitch_mm)]
    pitch: f64,
    #[arg(long, default_value_t = MeshSettings::default().relief_height_mm)]
    height: f64,
    #[arg(long, default_value_t = MeshSettings::default().base_thickness_mm)]
    base: f64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 10])]
    k: Vec<usize>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// A study directory, or a directory of study directories.
    #[arg(long)]
    study: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let tag = match a.tag {
        Tag::Painting => DomainTag::Painting,
        Tag::Photo => DomainTag::Photo,
    };
    let ingested = ingest_directory(&a.dir, tag)?;
    for s in &ingested.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let manifest = match a.sample {
        Some(n) => ingested.manifest.sampled(n, a.seed),
        None => ingested.manifest,
    };
    save_manifest(&manifest, &a.out)?;
    println!(
        "{} records, {} undecodable, {} non-image files -> {}",
        manifest.records.len(),
        ingested.skipped.len(),
        ingested.non_image_count,
        a.out.display()
    );
    Ok(())
}

fn match_cmd(a: MatchArgs) -> Result<(), CliError> {
    let paintings = load_manifest(&a.paintings)?;
    let photos = load_manifest(&a.photos)?;
    let dictionary = match &a.dictionary {
        Some(p) => Dictionary::load(p)?,
        None => default_dictionary(),
    };
    let spec = a.encoder.spec()?;
    let (text, image) = (spec.text_encoder(), spec.image_encoder());
    let cache = EmbeddingCache::from_env();
    let ctx = MatchingContext {
        text_encoder: text.as_ref(),
        image_encoder: image.as_ref(),
        cache: &cache,
        temperature: a.temperature,
    };
    let matched = build_clip_matched_dataset(&paintings, &photos, &dictionary, a.k, &ctx)?;
    save_manifest(&matched, &a.out)?;
    println!("{} pairs -> {}", matched.pairs.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    config.iterations = a.iterations.unwrap_or(config.iterations);
    config.image_size = a.image_size.unwrap_or(config.image_size);
    config.seed = a.seed.unwrap_or(config.seed);
    config.validate()?;
    let matched = load_manifest(&a.matched)?;
    let data = TrainingData::from_manifest(&matched, config.image_size)?;
    let mut pair = TranslatorPair::new(&config.architecture, config.seed);
    let outcome = train(
        &mut pair,
        &data,
        &config,
        Some(RunTarget {
            root: &a.out,
            dictionary_hash: None,
            manifest_hash: None,
        }),
    )?;
    if let Some(last) = outcome.reports.last() {
        println!(
            "step {}: adv_ori {:.4} adv_photo {:.4} cyc {:.4} total {:.4}",
            last.step, last.adv_ori, last.adv_photo, last.cyc, last.total
        );
    }
    if let Some(dir) = outcome.checkpoints.last() {
        println!("checkpoint -> {}", dir.display());
    }
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<(), CliError> {
    let (pair, meta) = load_checkpoint(&a.checkpoint)?;
    let painting = Image::open(&a.input)?;
    let out = translate_image(&pair, &painting, a.image_size.unwrap_or(meta.config.image_size));
    out.save_png(&a.out)?;
    println!("{} -> {}", a.input.display(), a.out.display());
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<(), CliError> {
    let backend = a.backend.spec()?.refiner();
    let request = RefineRequest {
        steps: a.steps,
        strength: a.strength,
        ..RefineRequest::new(Image::open(&a.content)?, Image::open(&a.reference)?, a.seed)
    };
    let refined = refine_image(&request, backend.as_ref())?;
    refined.image.save_png(&a.out)?;
    println!(
        "structure_score {:.4} ({}) -> {}",
        refined.structure_score,
        refined.backend_id,
        a.out.display()
    );
    Ok(())
}

fn depth_cmd(a: DepthArgs) -> Result<(), CliError> {
    let backend = a.backend.spec()?.depth();
    let image = Image::open(&a.input)?;
    let map = normalize_depth(&estimate_depth(&image, &stem(&a.input), backend.as_ref())?);
    export_depth_png16(&map, &a.out)?;
    println!("{}x{} depth -> {}", map.width, map.height, a.out.display());
    if let Some(path) = &a.mesh {
        let mesh = depth_to_relief_mesh(&map, a.pitch, a.height, a.base)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
            mesh.save_obj(path)?;
        } else {
            mesh.save_stl(path)?;
        }
        let [x, y, z] = mesh.extent();
        println!(
            "{} triangles, {x:.1} x {y:.1} x {z:.1} mm -> {}",
            mesh.triangles.len(),
            path.display()
        );
    }
    Ok(())
}

fn summarize(record: &RunRecord) {
    println!("run {} (K = {}) -> {}", record.run_id, record.k, record.output_root.display());
    for stage in [Stage::Match, Stage::Train, Stage::Translate, Stage::Refine, Stage::Depth, Stage::Mesh] {
        let c = record.counter(stage);
        println!("  {stage:<9} computed {:>3}  skipped {:>3}  failed {:>3}", c.computed, c.skipped, c.failed);
    }
    for f in &record.failures {
        println!("  failed {} at {}: {}", f.painting_id, f.stage, f.message);
    }
}

fn run_cmd(a: RunArgs) -> Result<(), CliError> {
    let record = run_full(&PipelineConfig::load(&a.config)?)?;
    summarize(&record);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), CliError> {
    let config = PipelineConfig::load(&a.config)?;
    for record in k_sweep(&config, &a.k)? {
        summarize(&record);
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
        path: a.study.clone(),
        source,
    })?;
    let addr = SocketAddr::new(a.host, a.port);
    println!("serving {} on http://{addr}", a.study.display());
    runtime.block_on(p2d_study_server::serve(&a.study, addr))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Match(a) => match_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Depth(a) => depth_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ServeStudy(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
