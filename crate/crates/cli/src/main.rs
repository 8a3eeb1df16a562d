use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use pansharp::fusion::{fuse, fuse_naive, FusionKind, FusionMethod};
use pansharp::metrics::{evaluate, to_csv, to_markdown, EvalConfig, EvalInputs, MetricReport, QConfig, CSV_HEADER};
use pansharp::models::{
    load_weights, pansharpen_nn, save_weights, train_with, GeneratorVariant, InferenceConfig, Profile, TrainConfig,
    WeightsFile,
};
use pansharp::protocol::{
    extract_patches, read_dataset, synth_sample, wald_degrade, write_dataset, ManifestEntry, SamplerConfig,
    TrainingSample,
};
use pansharp::raster::{load_msrf, save_msrf, upsample, MultiBandImage, ResampleFilter, SampleType};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "pansharp",
    version,
    about = "Pan-sharpening toolkit: synthesis, fusion, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset of synthetic Wald-degraded scenes.
    Synth(SynthArgs),
    /// Degrade an (MS, PAN) pair by the resolution ratio.
    Degrade(DegradeArgs),
    /// Fuse an MS image with a PAN image.
    Fuse(FuseArgs),
    /// Train a generator on a dataset directory.
    Train(TrainArgs),
    /// Compute quality indexes of a fused image.
    Eval(EvalArgs),
    /// Merge CSV metric rows into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Edge of the PAN and reference images; the MS is a quarter of it.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FilterArg {
    Gaussian,
    Box,
    Bicubic,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    ms: PathBuf,
    #[arg(long)]
    pan: PathBuf,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    /// Low-pass filter; gaussian uses sigma = ratio / 2.
    #[arg(long, value_enum, default_value_t = FilterArg::Gaussian)]
    filter: FilterArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// ihs, brovey, hpf, sfim, gs, lmvm, lmm, bicubic, gan, or a generator variant name.
    #[arg(long)]
    method: String,
    #[arg(long)]
    ms: PathBuf,
    #[arg(long)]
    pan: PathBuf,
    /// Generator weights (PSGW) for neural methods.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Expected generator variant; defaults to the one stored in the weights.
    #[arg(long)]
    variant: Option<GeneratorVariant>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    variant: GeneratorVariant,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long)]
    use_bn: bool,
    /// MS patch edge; larger dataset samples are cropped to it.
    #[arg(long)]
    patch: Option<usize>,
    /// Preset for batch size and patch edge.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Md,
    Json,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    fused: PathBuf,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "pan")]
    ms: Option<PathBuf>,
    #[arg(long, requires = "ms")]
    pan: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    /// Block edge for D_lambda and D_s, or "global".
    #[arg(long, default_value = "32")]
    q_block: String,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Row label; defaults to the fused file's stem.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// CSV files written by `eval --format csv`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    format: Format,
}

enum Failure {
    Usage(String),
    Data(String),
}

type Outcome = Result<(), Failure>;

fn data<E: Display>(context: impl Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

fn read_image(path: &Path) -> Result<MultiBandImage, Failure> {
    load_msrf(path)
        .map(|img| img.normalized())
        .map_err(data(path.display()))
}

/// Writes `img` in the encoding and nominal range of `like`.
fn write_image(img: &MultiBandImage, like: (f64, SampleType), path: &Path) -> Outcome {
    save_msrf(&img.denormalized(like.0, like.1), path).map_err(data(path.display()))
}

fn encoding(path: &Path) -> Result<(f64, SampleType), Failure> {
    let img = load_msrf(path).map_err(data(path.display()))?;
    Ok((img.value_range().1, img.dtype()))
}

fn ratio_of(ms: &MultiBandImage, pan: &MultiBandImage) -> Result<usize, Failure> {
    let r = pan.width() / ms.width().max(1);
    if r < 2 || pan.width() != ms.width() * r || pan.height() != ms.height() * r {
        return Err(Failure::Data(format!(
            "PAN {}x{} is not an integer multiple of MS {}x{}",
            pan.width(),
            pan.height(),
            ms.width(),
            ms.height()
        )));
    }
    Ok(r)
}

fn synth(a: SynthArgs) -> Outcome {
    if a.bands == 0 {
        return Err(Failure::Usage("--bands must be at least 1".into()));
    }
    let samples = (0..a.count)
        .map(|i| {
            let seed = a.seed.wrapping_add(i as u64);
            let sample = synth_sample(a.size, a.bands, 4, seed).map_err(|e| Failure::Usage(format!("--size: {e}")))?;
            let entry = ManifestEntry {
                index: i,
                seed,
                corner_x: 0,
                corner_y: 0,
            };
            Ok((sample, entry))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    write_dataset(&a.out_dir, &samples).map_err(data(a.out_dir.display()))?;
    eprintln!("wrote {} samples to {}", a.count, a.out_dir.display());
    Ok(())
}

fn degrade(a: DegradeArgs) -> Outcome {
    let filter = match a.filter {
        FilterArg::Gaussian => ResampleFilter::wald(a.ratio),
        FilterArg::Box => ResampleFilter::Box,
        FilterArg::Bicubic => ResampleFilter::Bicubic,
    };
    let (ms, pan) = (read_image(&a.ms)?, read_image(&a.pan)?);
    let sample = wald_degrade(&ms, &pan, a.ratio, filter).map_err(data("degrade"))?;
    std::fs::create_dir_all(&a.out_dir).map_err(data(a.out_dir.display()))?;
    let (ms_enc, pan_enc) = (encoding(&a.ms)?, encoding(&a.pan)?);
    write_image(&sample.ms, ms_enc, &a.out_dir.join("ms.msrf"))?;
    write_image(&sample.pan, pan_enc, &a.out_dir.join("pan.msrf"))?;
    write_image(&sample.reference, ms_enc, &a.out_dir.join("ref.msrf"))?;
    Ok(())
}

fn fuse_cmd(a: FuseArgs) -> Outcome {
    let (ms, pan) = (read_image(&a.ms)?, read_image(&a.pan)?);
    let ratio = ratio_of(&ms, &pan)?;
    let method = a.method.to_ascii_lowercase();
    let fused = if method == "bicubic" {
        fuse_naive(&ms, ratio).map_err(data("bicubic"))?
    } else if let Ok(kind) = method.parse::<FusionKind>() {
        let up = upsample(&ms, ratio, ResampleFilter::Bicubic).map_err(data("upsample"))?;
        let out = fuse(FusionMethod::new(kind), &up, &pan).map_err(data(kind))?;
        if out.floored > 0 {
            eprintln!("{kind}: {} samples hit the denominator floor", out.floored);
        }
        out.image
    } else if method == "gan" || method.parse::<GeneratorVariant>().is_ok() {
        let path = a
            .weights
            .as_deref()
            .ok_or_else(|| Failure::Usage(format!("--method {method} requires --weights")))?;
        let named = method.parse::<GeneratorVariant>().ok();
        if let (Some(m), Some(v)) = (named, a.variant) {
            if m != v {
                return Err(Failure::Usage(format!("--method {m} conflicts with --variant {v}")));
            }
        }
        let file = load_weights(path).map_err(data(path.display()))?;
        let variant = named.or(a.variant).unwrap_or(file.variant);
        let generator = file.to_generator(variant).map_err(data(path.display()))?;
        if ratio != 4 {
            return Err(Failure::Data(format!(
                "generators fuse at ratio 4, inputs have ratio {ratio}"
            )));
        }
        pansharpen_nn(&ms, &pan, &generator, variant, &InferenceConfig::default()).map_err(data(variant))?
    } else {
        return Err(Failure::Usage(format!("unknown --method {:?}", a.method)));
    };
    write_image(&fused, encoding(&a.ms)?, &a.out)
}

/// Crops samples larger than `patch` into that many random aligned patches
/// as fit without overlap.
fn fit_patches(dataset: Vec<TrainingSample>, patch: usize, seed: u64) -> Result<Vec<TrainingSample>, Failure> {
    let mut out = Vec::new();
    for (i, s) in dataset.into_iter().enumerate() {
        if s.ms.width() == patch && s.ms.height() == patch {
            out.push(s);
            continue;
        }
        let cfg = SamplerConfig {
            ms_patch: patch,
            count: (s.ms.width() / patch) * (s.ms.height() / patch),
            seed: seed.wrapping_add(i as u64),
        };
        out.extend(extract_patches(&s, &cfg).map_err(data(format!("sample {i}")))?);
    }
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let dataset = read_dataset(&a.data_dir).map_err(data(a.data_dir.display()))?;
    let first = dataset
        .first()
        .ok_or_else(|| Failure::Data(format!("{}: dataset is empty", a.data_dir.display())))?;
    let bands = first.ms.bands();
    let mut cfg = match a.profile {
        Some(ProfileArg::Paper) => TrainConfig::profile(Profile::Paper),
        Some(ProfileArg::Desk) => TrainConfig::profile(Profile::Desk),
        None => TrainConfig {
            ms_patch: first.ms.width().min(first.ms.height()),
            ..TrainConfig::default()
        },
    };
    if let Some(p) = a.patch {
        cfg.ms_patch = p;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    cfg.steps = a.steps;
    cfg.seed = a.seed;
    cfg.alpha = a.alpha;
    cfg.beta = a.beta;
    cfg.adam.lr = a.lr;
    cfg.use_bn = a.use_bn;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dataset = fit_patches(dataset, cfg.ms_patch, cfg.seed)?;
    eprintln!(
        "training {} on {} patches: {} steps, batch {}, MS patch {}",
        a.variant,
        dataset.len(),
        cfg.steps,
        cfg.batch,
        cfg.ms_patch
    );
    let trained = train_with(&dataset, a.variant, &cfg, |step, r| {
        if (step + 1) % 10 == 0 || step + 1 == cfg.steps {
            eprintln!(
                "step {:>5}/{}  g {:.5}  adv {:.4}  l1 {:.5}  d {:.4}",
                step + 1,
                cfg.steps,
                r.g_loss,
                r.g_adv,
                r.g_l1,
                r.d_loss
            );
        }
    })
    .map_err(data("training"))?;
    let file = WeightsFile::from_generator(a.variant, bands, &trained.generator);
    save_weights(&a.out, &file).map_err(data(a.out.display()))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn q_block(s: &str) -> Result<QConfig, Failure> {
    if s.eq_ignore_ascii_case("global") {
        return Ok(QConfig::GLOBAL);
    }
    match s.parse::<usize>() {
        Ok(n) if n >= 8 => Ok(QConfig::blocks(n)),
        _ => Err(Failure::Usage(format!(
            "--q-block {s:?}: expected \"global\" or a block edge of at least 8"
        ))),
    }
}

fn render(reports: &[MetricReport], format: Format) -> Result<String, Failure> {
    Ok(match format {
        Format::Csv => to_csv(reports),
        Format::Md => to_markdown(reports),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(reports).map_err(data("json"))?;
            s.push('\n');
            s
        }
    })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let cfg = EvalConfig {
        no_reference: q_block(&a.q_block)?,
        ..EvalConfig::default()
    };
    if a.reference.is_none() && a.ms.is_none() {
        return Err(Failure::Usage("eval needs --ref, or --ms with --pan".into()));
    }
    let fused = read_image(&a.fused)?;
    let load = |p: &Option<PathBuf>| p.as_deref().map(read_image).transpose();
    let (reference, ms, pan) = (load(&a.reference)?, load(&a.ms)?, load(&a.pan)?);
    let label = a.method.unwrap_or_else(|| {
        a.fused
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let inputs = EvalInputs {
        fused: &fused,
        reference: reference.as_ref(),
        ms: ms.as_ref(),
        pan: pan.as_ref(),
    };
    let report = evaluate(&label, inputs, a.ratio, &cfg);
    for note in &report.notes {
        eprintln!("{label}: {note}");
    }
    let text = match a.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&report).map_err(data("json"))?;
            s.push('\n');
            s
        }
        f => render(std::slice::from_ref(&report), f)?,
    };
    print!("{text}");
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Outcome {
    let mut rows = Vec::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path).map_err(data(path.display()))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_end() == CSV_HEADER {
                continue;
            }
            let row = MetricReport::from_csv_row(line)
                .ok_or_else(|| Failure::Data(format!("{}:{}: not a metric row", path.display(), n + 1)))?;
            rows.push(row);
        }
    }
    print!("{}", render(&rows, a.format)?);
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var("PANSHARP_THREADS") else {
        return Ok(());
    };
    let n = value
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("PANSHARP_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("PANSHARP_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Degrade(_) => "degrade",
        Command::Fuse(_) => "fuse",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Degrade(a) => degrade(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
