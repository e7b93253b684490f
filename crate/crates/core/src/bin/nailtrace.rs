use std::fs;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nailtrace::metrics::{evaluate, measure_runtime, RUNTIME_FRAMES, RUNTIME_WARMUP};
use nailtrace::model::{EncoderVariant, Model, ModelConfig, Normalization};
use nailtrace::objectives::{PixelNormalization, LossConfig};
use nailtrace::pipeline::{decode_png, encode_png, segment};
use nailtrace::postprocess::{NailInstance, PostprocessParams};
use nailtrace::render::{render_overlay, RenderParams};
use nailtrace::service::{serve, ServiceConfig};
use nailtrace::synth::{dataset_checksum, generate_dataset, read_dataset, write_dataset, DatasetSpec, Split};
use nailtrace::train::{run_ablation, train, Optimizer, TrainConfig};

/// Fingernail segmentation, instance extraction and polish rendering.
#[derive(Parser)]
#[command(name = "nailtrace", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "NAILTRACE_SEED", default_value_t = 0)]
    seed: u64,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare the weighted baseline, LMP and LMP with cascade.
    Ablate(AblateArgs),
    /// Segment one image into nail instances.
    Infer(InferArgs),
    /// Paint polish onto one image.
    Render(RenderArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = "NAILTRACE_OUT")]
    out: PathBuf,
    #[arg(long, env = "NAILTRACE_COUNT", default_value_t = 300)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, env = "NAILTRACE_SIZE", default_value_t = 128)]
    size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lmp,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum PixelNormArg {
    All,
    Valid,
}

impl From<PixelNormArg> for PixelNormalization {
    fn from(v: PixelNormArg) -> Self {
        match v {
            PixelNormArg::All => PixelNormalization::AllPixels,
            PixelNormArg::Valid => PixelNormalization::ValidPixels,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    Group,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, env = "NAILTRACE_WIDTH_MULTIPLIER", default_value_t = 0.25)]
    width_multiplier: f64,
    #[arg(long, env = "NAILTRACE_SHALLOW")]
    shallow: bool,
    #[arg(long, env = "NAILTRACE_NO_CASCADE")]
    no_cascade: bool,
    /// Normalization after each convolution.
    #[arg(long, env = "NAILTRACE_NORM", value_enum, default_value = "none")]
    norm: NormArg,
}

#[derive(Args)]
struct TrainKnobs {
    #[arg(long, env = "NAILTRACE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "NAILTRACE_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "NAILTRACE_LR")]
    lr: Option<f64>,
    /// Square training crop side.
    #[arg(long, env = "NAILTRACE_CROP")]
    crop: Option<usize>,
    #[arg(long, env = "NAILTRACE_OPTIMIZER", value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Denominator of the class loss: every pixel or nail pixels only.
    #[arg(long, env = "NAILTRACE_CLASS_NORM", value_enum)]
    class_norm: Option<PixelNormArg>,
    /// Denominator of the field loss: every pixel or nail pixels only.
    #[arg(long, env = "NAILTRACE_FIELD_NORM", value_enum)]
    field_norm: Option<PixelNormArg>,
    #[arg(long, env = "NAILTRACE_MAX_TRAIN")]
    max_train: Option<usize>,
    #[arg(long, env = "NAILTRACE_MAX_EVAL")]
    max_eval: Option<usize>,
    #[arg(long, env = "NAILTRACE_EVAL_EVERY")]
    eval_every: Option<usize>,
}

impl TrainKnobs {
    fn apply(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.crop {
            cfg.crop = (v, v);
        }
        match self.optimizer {
            Some(OptimizerArg::Sgd) => cfg.optimizer = Optimizer::Sgd,
            Some(OptimizerArg::Adam) => cfg.optimizer = Optimizer::Adam,
            None => {}
        }
        if let Some(v) = self.class_norm {
            cfg.loss.class_normalization = v.into();
        }
        if let Some(v) = self.field_norm {
            cfg.loss.field_normalization = v.into();
        }
        if self.max_train.is_some() {
            cfg.max_train_images = self.max_train;
        }
        if self.max_eval.is_some() {
            cfg.max_eval_images = self.max_eval;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "NAILTRACE_DATA")]
    data: PathBuf,
    /// Directory for model.ntck, model.json, train_log.jsonl and eval.json.
    #[arg(long, env = "NAILTRACE_OUT")]
    out: PathBuf,
    #[arg(long, env = "NAILTRACE_LOSS", value_enum, default_value = "lmp")]
    loss: LossArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long, env = "NAILTRACE_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Model config JSON; defaults to the checkpoint path with a .json extension.
    #[arg(long, env = "NAILTRACE_CONFIG")]
    config: Option<PathBuf>,
}

impl CheckpointArgs {
    fn config_path(&self) -> PathBuf {
        self.config.clone().unwrap_or_else(|| self.checkpoint.with_extension("json"))
    }

    fn load(&self) -> anyhow::Result<Model> {
        let cfg = self.config_path();
        Model::load(&self.checkpoint, &cfg)
            .with_context(|| format!("loading {} with {}", self.checkpoint.display(), cfg.display()))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "NAILTRACE_DATA")]
    data: PathBuf,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, env = "NAILTRACE_SPLIT", value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, env = "NAILTRACE_MAX_IMAGES")]
    max_images: Option<usize>,
    /// Also time forward plus postprocessing on one thread.
    #[arg(long)]
    runtime: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, env = "NAILTRACE_DATA")]
    data: PathBuf,
    #[arg(long, env = "NAILTRACE_SEEDS", value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// CSV output; printed to stdout as well.
    #[arg(long, env = "NAILTRACE_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, env = "NAILTRACE_IMAGE")]
    image: PathBuf,
    /// Directory for instances.json, fgbg.png and classes.png.
    #[arg(long, env = "NAILTRACE_OUT")]
    out: PathBuf,
}

fn parse_color(s: &str) -> Result<[u8; 3], String> {
    let hex = s.trim_start_matches('#');
    if hex.len() == 6 && hex.chars().all(|c| c.is_ascii_hexdigit()) {
        let v = u32::from_str_radix(hex, 16).map_err(|e| e.to_string())?;
        return Ok([(v >> 16) as u8, (v >> 8) as u8, v as u8]);
    }
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 3 {
        let mut out = [0u8; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.trim().parse().map_err(|_| format!("bad channel {p:?}"))?;
        }
        return Ok(out);
    }
    Err(format!("expected #rrggbb or r,g,b, got {s:?}"))
}

#[derive(Args)]
struct RenderKnobs {
    /// Polish colour as #rrggbb or r,g,b.
    #[arg(long, env = "NAILTRACE_COLOR", value_parser = parse_color)]
    color: Option<[u8; 3]>,
    #[arg(long, env = "NAILTRACE_OPACITY")]
    opacity: Option<f64>,
    #[arg(long, env = "NAILTRACE_GRADIENT_STRENGTH")]
    gradient_strength: Option<f64>,
    #[arg(long, env = "NAILTRACE_GLOSS_POSITION")]
    gloss_position: Option<f64>,
    #[arg(long, env = "NAILTRACE_STRETCH")]
    stretch: Option<usize>,
    #[arg(long, env = "NAILTRACE_FEATHER")]
    feather: Option<f64>,
}

impl RenderKnobs {
    fn apply(&self, mut p: RenderParams) -> RenderParams {
        if let Some(v) = self.color {
            p.color = v;
        }
        if let Some(v) = self.opacity {
            p.opacity = v;
        }
        if let Some(v) = self.gradient_strength {
            p.gradient_strength = v;
        }
        if let Some(v) = self.gloss_position {
            p.gloss_band_position = v;
        }
        if let Some(v) = self.stretch {
            p.stretch_px = v;
        }
        if let Some(v) = self.feather {
            p.edge_feather_px = v;
        }
        p
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["instances", "checkpoint"]))]
struct RenderArgs {
    #[arg(long, env = "NAILTRACE_IMAGE")]
    image: PathBuf,
    /// Composited PNG.
    #[arg(long, env = "NAILTRACE_OUT")]
    out: PathBuf,
    /// Optional RGBA overlay PNG.
    #[arg(long, env = "NAILTRACE_OVERLAY")]
    overlay: Option<PathBuf>,
    /// instances.json written by `infer`.
    #[arg(long, env = "NAILTRACE_INSTANCES")]
    instances: Option<PathBuf>,
    #[arg(long, env = "NAILTRACE_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "NAILTRACE_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    render: RenderKnobs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "NAILTRACE_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, env = "NAILTRACE_MAX_EDGE", default_value_t = 1024)]
    max_edge: usize,
    #[arg(long, env = "NAILTRACE_CORS_ORIGIN")]
    cors_origin: Option<String>,
    #[command(flatten)]
    render: RenderKnobs,
}

fn model_config(args: &ModelArgs, size: (usize, usize)) -> ModelConfig {
    ModelConfig {
        input_size: size,
        width_multiplier: args.width_multiplier,
        encoder_variant: if args.shallow {
            EncoderVariant::Shallow43
        } else {
            EncoderVariant::Deep55
        },
        cascade_enabled: !args.no_cascade,
        normalization: match args.norm {
            NormArg::None => Normalization::None,
            NormArg::Group => Normalization::Group,
        },
        ..ModelConfig::default()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen(seed: u64, a: &GenArgs) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        seed,
        count: a.count,
        width: a.size,
        height: a.size,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec)?;
    write_dataset(&a.out, &ds)?;
    println!(
        "{} images ({} train / {} val / {} test), fg fraction {:.4}, checksum {}",
        ds.samples.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        ds.split(Split::Test).len(),
        ds.manifest.fg_fraction,
        dataset_checksum(&a.out)?
    );
    Ok(())
}

fn run_train(seed: u64, a: &TrainArgs) -> anyhow::Result<()> {
    let ds = read_dataset(&a.data)?;
    let first = ds.samples.first().context("dataset is empty")?;
    let mut cfg = a.knobs.apply(seed);
    if let LossArg::Weighted = a.loss {
        cfg.loss.fgbg = LossConfig::weighted_baseline().fgbg;
    }
    let mut model = Model::build(model_config(&a.model, (first.height, first.width)), seed)?;
    fs::create_dir_all(&a.out)?;
    let log = fs::File::create(a.out.join("train_log.jsonl"))?;
    let out = train(&mut model, &ds, &cfg, BufWriter::new(log))?;
    model.save(&a.out.join("model.ntck"), &a.out.join("model.json"))?;
    if let Some(r) = &out.best_report {
        write_json(&a.out.join("eval.json"), r)?;
        println!(
            "best epoch {}: binary mIoU {:.4}, angular error {:.2} deg",
            out.best_epoch, r.binary_miou, r.mean_angular_error_deg
        );
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ds = read_dataset(&a.data)?;
    let model = a.ckpt.load()?;
    let mut samples = ds.split(a.split.into());
    if let Some(m) = a.max_images {
        samples.truncate(m);
    }
    let first = *samples.first().context("split is empty")?;
    let params = PostprocessParams::for_size(first.width, first.height);
    let report = evaluate(&model, &samples, &params, 8)?;
    let mut json = serde_json::to_value(&report)?;
    if a.runtime {
        let m = model.with_input_size(first.height, first.width)?;
        let stats = measure_runtime(&m, &first.image, &params, RUNTIME_WARMUP, RUNTIME_FRAMES)?;
        json["runtime"] = serde_json::to_value(stats)?;
    }
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn run_ablate(seed: u64, a: &AblateArgs) -> anyhow::Result<()> {
    let ds = read_dataset(&a.data)?;
    let first = ds.samples.first().context("dataset is empty")?;
    let model_cfg = model_config(&a.model, (first.height, first.width));
    let train_cfg = a.knobs.apply(seed);
    let table = run_ablation(&ds, &model_cfg, &train_cfg, &a.seeds, |row| {
        eprintln!("{} seed {}: mIoU {:.4}", row.setting.label(), row.seed, row.miou);
    })?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    let (ok, n) = table.monotone_count();
    println!("monotone for {ok} of {n} seeds");
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct InferOutput {
    width: usize,
    height: usize,
    instances: Vec<NailInstance>,
}

fn run_infer(a: &InferArgs) -> anyhow::Result<()> {
    let model = a.ckpt.load()?;
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = decode_png(&bytes)?;
    let seg = segment(&model, &img, None)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("fgbg.png"), seg.fgbg_png()?)?;
    fs::write(a.out.join("classes.png"), seg.classes_png()?)?;
    let out = InferOutput {
        width: img.width,
        height: img.height,
        instances: seg.instances,
    };
    write_json(&a.out.join("instances.json"), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn run_render(a: &RenderArgs) -> anyhow::Result<()> {
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = decode_png(&bytes)?;
    let instances = match (&a.instances, &a.checkpoint) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let parsed: InferOutput = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if (parsed.width, parsed.height) != (img.width, img.height) {
                bail!(
                    "instances are for a {}x{} image, {} is {}x{}",
                    parsed.width,
                    parsed.height,
                    a.image.display(),
                    img.width,
                    img.height
                );
            }
            parsed.instances
        }
        (None, Some(ckpt)) => {
            let ck = CheckpointArgs {
                checkpoint: ckpt.clone(),
                config: a.config.clone(),
            };
            segment(&ck.load()?, &img, None)?.instances
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let params = a.render.apply(RenderParams::default());
    let out = render_overlay(&img.data, img.width, img.height, &instances, &params)?;
    fs::write(&a.out, encode_png(&out.composited, img.width, img.height, 3)?)?;
    if let Some(p) = &a.overlay {
        fs::write(p, encode_png(&out.overlay, img.width, img.height, 4)?)?;
    }
    println!("{} instances painted", instances.len());
    Ok(())
}

fn run_serve(a: &ServeArgs) -> anyhow::Result<()> {
    let cfg = ServiceConfig {
        bind: a.bind,
        checkpoint: a.ckpt.checkpoint.clone(),
        model_config: a.ckpt.config_path(),
        max_edge: a.max_edge,
        render: a.render.apply(RenderParams::default()),
        cors_origin: a.cors_origin.clone(),
    };
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(cfg))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.cmd {
        Cmd::Gen(a) => gen(cli.seed, a),
        Cmd::Train(a) => run_train(cli.seed, a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Ablate(a) => run_ablate(cli.seed, a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Render(a) => run_render(a),
        Cmd::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
