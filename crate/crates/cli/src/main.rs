use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use artmap::collage::{compose, feathered_compose, CollageInput, CompositeMode};
use artmap::eurosat::{fetch_dataset, DatasetManifest, EUROSAT_RGB_MD5, EUROSAT_RGB_URL};
use artmap::mlp::{majority_filter, segment, MlpParams, TrainConfig};
use artmap::nst::{stylize, InitKind, NstConfig, OptimizerKind};
use artmap::pipeline::{
    self, load_net, read_label_png, write_label_png, ConfigOverrides, DatasetTrainConfig, PipelineConfig, RunOptions,
};
use artmap::raster::{load_image, save_image};
use artmap::vgg::{Pooling, VggWeights, VGG19_WIDTHS};

#[derive(Parser)]
#[command(name = "artmap", version, about = "Segment an aerial image into land and water, stylize each class, and assemble a collage")]
struct Cli {
    /// Run on a single thread (fully deterministic).
    #[arg(long, global = true)]
    single_thread: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset download and fixtures.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the pixel classifier on a EuroSAT-layout directory.
    Train(TrainArgs),
    /// Label every pixel of an image as land or water.
    Segment(SegmentArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// Combine stylized images through a label map.
    Collage(CollageArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
    /// Check a config file and print the resolved configuration.
    Validate {
        config: PathBuf,
    },
    /// Re-check the artifacts of a finished run.
    Verify {
        output_dir: PathBuf,
    },
    /// Feature-extractor weight files.
    #[command(subcommand)]
    Weights(WeightsCommand),
    /// Write the demo scene, style images, model and config.
    DemoAssets {
        #[arg(long, default_value = "assets")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Download (or copy from file://), verify and unpack the RGB archive.
    Fetch {
        #[arg(long, default_value = EUROSAT_RGB_URL)]
        url: String,
        #[arg(long, default_value = "data/eurosat")]
        dest: PathBuf,
        /// MD5 (32 hex digits) or SHA-256 (64 hex digits) of the archive.
        #[arg(long, default_value = EUROSAT_RGB_MD5)]
        checksum: String,
    },
    /// Write procedural patches in the dataset's directory layout.
    Synth {
        #[arg(long)]
        dest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "Forest,SeaLake")]
        categories: Vec<String>,
        #[arg(long, default_value_t = 20)]
        per_category: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (category directories).
    #[arg(long)]
    data: PathBuf,
    /// Category directories to use (default: all present). SeaLake and River are water.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Patches per category (default: all).
    #[arg(long)]
    per_category: Option<usize>,
    /// Pixels sampled per patch.
    #[arg(long, default_value_t = 64)]
    per_patch: usize,
    /// Odd neighborhood side length around each pixel.
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
    /// Per-epoch loss and accuracy as JSON.
    #[arg(long, default_value = "train_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Majority filter radius; 0 disables it.
    #[arg(long, default_value_t = 0)]
    majority_radius: usize,
    #[arg(long, default_value = "labels.png")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    PlainGd,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Content,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Average,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Feather,
}

impl From<ModeArg> for CompositeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hard => CompositeMode::Hard,
            ModeArg::Feather => CompositeMode::Feather,
        }
    }
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Expected MD5 or SHA-256 of the weight file.
    #[arg(long)]
    checksum: Option<String>,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long, default_value = "stylized.png")]
    out: PathBuf,
    /// Write per-iteration losses as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// TOML file with NST settings (the `[nst]` table of a run config, without the header).
    #[arg(long)]
    nst_config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clamp_every_step: bool,
}

#[derive(Args)]
struct CollageArgs {
    #[arg(long)]
    labels: PathBuf,
    /// One image per category, land first.
    #[arg(long, num_args = 2, required = true)]
    stylized: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "hard")]
    mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    feather_radius: usize,
    #[arg(long, default_value = "collage.png")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML). The flags below override its values.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    content_image: Option<PathBuf>,
    #[arg(long, num_args = 2)]
    style_images: Option<Vec<PathBuf>>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    #[arg(long)]
    vgg_checksum: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    majority_radius: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    feather_radius: Option<usize>,
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Write seeded random weights with the canonical shapes. Useful for
    /// running the pipeline offline; the style transfer is not meaningful.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Load and verify a weight file.
    Check {
        path: PathBuf,
        #[arg(long)]
        checksum: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not restrict the thread pool: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Fetch { url, dest, checksum }) => {
            let manifest = fetch_dataset(&url, &dest, &checksum)?;
            for (cat, n) in manifest.count_by_category() {
                println!("{cat}\t{n}");
            }
            println!("total\t{}", manifest.total_count());
        }
        Command::Dataset(DatasetCommand::Synth {
            dest,
            categories,
            per_category,
            seed,
        }) => {
            let cats: Vec<&str> = categories.iter().map(String::as_str).collect();
            artmap::synth::write_synthetic_dataset(&dest, &cats, per_category, seed)?;
            println!("wrote {} patches to {}", cats.len() * per_category, dest.display());
        }
        Command::Train(a) => train(a)?,
        Command::Segment(a) => {
            let model = MlpParams::read(&a.model)?;
            let image = load_image(&a.image)?;
            let mut labels = segment(&model, &image, a.window)?;
            if a.majority_radius > 0 {
                labels = majority_filter(&labels, a.majority_radius);
            }
            write_label_png(&labels, &a.out)?;
            let hist = labels.histogram();
            println!("land\t{}\nwater\t{}", hist[0], hist[1]);
        }
        Command::Stylize(a) => stylize_cmd(a)?,
        Command::Collage(a) => {
            let labels = read_label_png(&a.labels)?;
            let sources = a.stylized.iter().map(load_image).collect::<artmap::Result<Vec<_>>>()?;
            let input = CollageInput::new(&labels, sources.iter().collect())?;
            let out = match CompositeMode::from(a.mode) {
                CompositeMode::Hard => compose(&input),
                CompositeMode::Feather => feathered_compose(&input, a.feather_radius),
            };
            save_image(&out, &a.out)?;
        }
        Command::Run(a) => {
            let overrides = ConfigOverrides {
                content_image: a.content_image,
                style_images: a.style_images,
                model: a.model,
                vgg_weights: a.vgg_weights,
                vgg_checksum: a.vgg_checksum,
                output_dir: a.output_dir,
                cache_dir: a.cache_dir,
                seed: a.seed,
                iterations: a.iterations,
                alpha: a.alpha,
                beta: a.beta,
                step_size: a.step_size,
                window: a.window,
                majority_filter_radius: a.majority_radius,
                mode: a.mode.map(Into::into),
                feather_radius: a.feather_radius,
            };
            let cfg = PipelineConfig::load(&a.config, &overrides)?;
            let report = pipeline::run(
                &cfg,
                &RunOptions {
                    single_thread: cli.single_thread,
                },
            )?;
            for s in &report.stages {
                println!("{}\t{:.2}s", s.stage, s.seconds);
            }
            println!("histogram\t{:?}", report.histogram);
            println!("report\t{}", cfg.output_dir.join("report.json").display());
        }
        Command::Validate { config } => {
            let cfg = pipeline::validate_config(&config)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Verify { output_dir } => {
            let report = pipeline::verify_artifacts(&output_dir)?;
            println!("ok\t{} artifacts, histogram {:?}", report.artifacts.len(), report.histogram);
        }
        Command::Weights(WeightsCommand::Init { out, seed }) => {
            VggWeights::<f32>::seeded(VGG19_WIDTHS, seed).save(&out)?;
            println!("{}\t{}", artmap::checksum::sha256_file(&out)?, out.display());
        }
        Command::Weights(WeightsCommand::Check { path, checksum }) => {
            let net = load_net(&path, checksum.as_deref(), Pooling::Average)?;
            println!("ok\twidths {:?}", net.weights.widths());
        }
        Command::DemoAssets { out, seed } => {
            pipeline::write_demo_assets(&out, seed)?;
            println!("wrote demo assets to {}", out.display());
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::scan(&a.data)?;
    let cfg = DatasetTrainConfig {
        categories: a.categories,
        per_category: a.per_category,
        per_patch: a.per_patch,
        window: a.window,
        seed: a.seed,
        train: TrainConfig {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: a.batch_size,
            hidden_sizes: a.hidden,
            ..Default::default()
        },
        ..Default::default()
    };
    let outcome = pipeline::train_on_dataset(&manifest, &cfg)?;
    outcome.params.write(&a.out)?;
    outcome.report.write_json(&a.report)?;
    println!(
        "patches train/val/test {:?}, samples {:?}",
        outcome.patches, outcome.samples
    );
    if let Some(last) = outcome.report.epochs.last() {
        println!("final train_acc {:.4} val_acc {:?}", last.train_acc, last.val_acc);
    }
    if let Some(acc) = outcome.test_accuracy {
        println!("test_acc {acc:.4}");
    }
    Ok(())
}

fn stylize_cmd(a: StylizeArgs) -> Result<()> {
    let mut cfg = match &a.nst_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<NstConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => NstConfig::default(),
    };
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = match v {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::PlainGd => OptimizerKind::PlainGd,
        };
    }
    if let Some(v) = a.init {
        cfg.init = match v {
            InitArg::Content => InitKind::Content,
            InitArg::Noise => InitKind::Noise,
        };
    }
    if let Some(v) = a.pooling {
        cfg.pooling = match v {
            PoolingArg::Average => Pooling::Average,
            PoolingArg::Max => Pooling::Max,
        };
    }
    cfg.clamp_every_step |= a.clamp_every_step;
    if cfg.iterations == 0 {
        bail!("--iterations must be at least 1");
    }
    let net = load_net(&a.weights, a.checksum.as_deref(), cfg.pooling)?;
    let content = load_image(&a.content)?;
    let style = load_image(&a.style)?;
    let (out, trace) = stylize(&net, &content, &style, &cfg)?;
    save_image(&out, &a.out)?;
    if let Some(p) = &a.trace {
        trace.write_jsonl(p)?;
    }
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("total loss {:.6e} -> {:.6e}", first.total, last.total);
    }
    Ok(())
}
