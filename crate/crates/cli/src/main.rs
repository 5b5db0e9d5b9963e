mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dlabel::checkpoint::Checkpoint;
use dlabel::data::io::{load_dataset, read_image, read_labels, write_dataset, write_labels, Manifest};
use dlabel::data::palette::CLASS_NAMES;
use dlabel::data::synth::{synth_dataset, synth_tile, SynthConfig, SYNTH_CHANNELS, SYNTH_CLASSES};
use dlabel::gradcheck::{run_suite, KINDS, TOLERANCE};
use dlabel::inference::{scores_to_map, time_dense, time_sliding, write_scores, PredictOptions};
use dlabel::metrics::{F1Mode, RegimeAccumulator};
use dlabel::{ArchSpec, Error, Network, Result, Tensor};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dlabel", version, about = "Dense semantic labeling of aerial imagery")]
struct Cli {
    /// Worker threads for inference; overrides DLABEL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic labeled dataset and its manifest.
    Synth(SynthArgs),
    /// Trains a network from a TOML configuration.
    Train(TrainArgs),
    /// Labels images with a trained checkpoint.
    Predict(PredictArgs),
    /// Scores label rasters against references in four regimes.
    Evaluate(EvaluateArgs),
    /// Compares analytic and numeric gradients of every layer kind.
    Gradcheck(GradcheckArgs),
    /// Times whole-image labeling per architecture.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long, default_value_t = 512)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Final checkpoint; overrides `[train] out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single spectral raster.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    image: Option<PathBuf>,
    /// Height raster matching `--image`.
    #[arg(long, requires = "image")]
    height: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    height_scale: f32,
    /// Labels every tile of the selected split instead of one image.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Sliding-window stride of the patch classifier.
    #[arg(long, default_value_t = 2)]
    stride: usize,
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Also writes the class-probability maps.
    #[arg(long)]
    scores: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label raster; pairs with `--reference` by position.
    #[arg(long)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    reference: Vec<PathBuf>,
    /// Pairs `<predictions>/<id>_pred.png` with the manifest's labels.
    #[arg(long, requires = "predictions")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
    split: String,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// F1 as the geometric mean of precision and recall.
    #[arg(long)]
    geometric: bool,
    /// Writes `regime.metric = value` lines here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated layer kinds; all by default.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Kinds whose backward pass is deliberately perturbed (negative control).
    #[arg(long, value_delimiter = ',')]
    corrupt: Vec<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Trained checkpoints to time; untrained networks of `--arch` otherwise.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "pc,spl,fpl")]
    arch: Vec<String>,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    /// Side of the synthetic test image.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pc_stride: Vec<usize>,
    /// Time only this many sliding windows and scale to the full count.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        std::env::set_var("DLABEL_THREADS", n.to_string());
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Benchmark(a) => benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2: configuration, 3: data, 4: numeric.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::UnknownArch(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("output directory {} does not exist", p.display())))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.train == 0 || a.size < 65 {
        return Err(Error::Config("synth needs at least one training tile of side 65 or more".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ds = synth_dataset(&SynthConfig::new(a.seed, a.train, a.val, a.size))?;
    let manifest = write_dataset(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let mut rc = RunConfig::with_overrides(&text, &a.overrides)?;
    if a.out.is_some() {
        rc.train.out = a.out;
    }
    let out = rc.train.out.clone().ok_or_else(|| Error::Config("no output checkpoint: set [train] out or --out".into()))?;
    let manifest = rc.manifest()?.to_path_buf();
    // Validates everything that does not need the rasters before loading them.
    let probe = Manifest::load(&manifest)?;
    let classes: usize = probe.parse_key("classes")?.unwrap_or(6);
    rc.train_config(1, classes)?;
    let loaded = load_dataset(&manifest)?;
    let ds = &loaded.dataset;
    let cfg = rc.train_config(ds.channels(), ds.classes)?;
    let warm = rc.train.warm_start.as_deref().map(Checkpoint::load).transpose()?;
    info!(
        "training {} on {} tiles ({} validation), {} epochs",
        cfg.spec.tag,
        ds.train.len(),
        ds.val.len(),
        cfg.schedule.total_epochs()
    );
    let (ck, log) = dlabel::train::train(&cfg, ds, loaded.height_range, warm.as_ref())?;
    if let Some(last) = log.epochs.last() {
        info!("{}", last.line());
    }
    ck.save(&out)?;
    println!("{}", out.display());
    Ok(())
}

struct Job {
    name: String,
    image: Tensor<f32>,
}

fn predict(a: PredictArgs) -> Result<()> {
    require_file(&a.checkpoint)?;
    require_dir(&a.out)?;
    if a.stride == 0 || a.tile == 0 || a.batch == 0 {
        return Err(Error::Config("stride, tile and batch must be positive".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (spec, mut net) = ck.network()?;
    let pre = ck.preprocessing()?;
    let arch = spec.architecture()?;
    let opts = PredictOptions { stride: a.stride, tile: a.tile, batch: a.batch, ..PredictOptions::default() };
    let mut jobs = Vec::new();
    if let Some(m) = &a.manifest {
        require_file(m)?;
        let m = Manifest::load(m)?;
        let scale: f32 = m.parse_key("height.scale")?.unwrap_or(1.0);
        for id in tiles_in_split(&m, &a.split) {
            let spectral = m.path(&format!("tile.{id}.spectral")).ok_or_else(|| Error::Data(format!("tile `{id}` has no spectral raster")))?;
            let height = m.path(&format!("tile.{id}.height"));
            jobs.push(Job { image: read_image(&spectral, height.as_deref(), scale)?, name: id });
        }
    } else if let Some(img) = &a.image {
        require_file(img)?;
        if let Some(h) = &a.height {
            require_file(h)?;
        }
        let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        jobs.push(Job { image: read_image(img, a.height.as_deref(), a.height_scale)?, name: stem });
    }
    for mut job in jobs {
        pre.apply_raw(&mut job.image)?;
        let t0 = std::time::Instant::now();
        let scores = arch.predict(&mut net, &spec, &job.image, &opts)?;
        let s = scores.shape();
        let path = a.out.join(format!("{}_pred.png", job.name));
        write_labels(&path, &scores_to_map(&scores), s.height, s.width)?;
        if a.scores {
            write_scores(a.out.join(format!("{}.scores", job.name)), &scores)?;
        }
        info!("{} {}x{} in {:.2}s", job.name, s.height, s.width, t0.elapsed().as_secs_f64());
        println!("{}", path.display());
    }
    Ok(())
}

fn tiles_in_split(m: &Manifest, split: &str) -> Vec<String> {
    m.tile_ids()
        .into_iter()
        .filter(|id| {
            let s = match m.get(&format!("tile.{id}.split")).unwrap_or("train") {
                "validation" => "val",
                s => s,
            };
            split == "all" || s == split
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
    if a.pred.len() != a.reference.len() {
        return Err(Error::Config(format!("{} --pred but {} --reference", a.pred.len(), a.reference.len())));
    }
    pairs.extend(a.pred.iter().cloned().zip(a.reference.iter().cloned()));
    let mut lenient = false;
    if let (Some(m), Some(dir)) = (&a.manifest, &a.predictions) {
        require_file(m)?;
        require_dir(dir)?;
        let m = Manifest::load(m)?;
        lenient = m.parse_key("labels.lenient")?.unwrap_or(false);
        for id in tiles_in_split(&m, &a.split) {
            let r = m.path(&format!("tile.{id}.labels")).ok_or_else(|| Error::Data(format!("tile `{id}` has no label raster")))?;
            pairs.push((dir.join(format!("{id}_pred.png")), r));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate: give --pred/--reference or --manifest/--predictions".into()));
    }
    for (p, r) in &pairs {
        require_file(p)?;
        require_file(r)?;
    }
    let mut acc = RegimeAccumulator::new(a.classes);
    for (p, r) in &pairs {
        let (pred, ph, pw) = read_labels(p, false)?;
        let (reference, rh, rw) = read_labels(r, lenient)?;
        if (ph, pw) != (rh, rw) {
            return Err(Error::Data(format!("{} is {ph}x{pw} but {} is {rh}x{rw}", p.display(), r.display())));
        }
        acc.add(&pred, &reference, rh, rw)?;
    }
    let mode = if a.geometric { F1Mode::Geometric } else { F1Mode::Harmonic };
    let report = acc.report(mode);
    let names: Vec<&str> = if a.classes == CLASS_NAMES.len() { CLASS_NAMES.to_vec() } else { Vec::new() };
    print!("{}", report.table(&names));
    if let Some(path) = &a.report {
        std::fs::write(path, report.key_values()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let kinds: Vec<&str> = if a.kinds.is_empty() { KINDS.to_vec() } else { a.kinds.iter().map(String::as_str).collect() };
    let corrupt: Vec<&str> = a.corrupt.iter().map(String::as_str).collect();
    for k in kinds.iter().chain(&corrupt) {
        if !KINDS.contains(k) {
            return Err(Error::Config(format!("unknown layer kind `{k}`; expected one of {}", KINDS.join(", "))));
        }
    }
    if a.cases == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    let t0 = std::time::Instant::now();
    let reports = run_suite(&kinds, a.cases, a.seed, &corrupt)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(TOLERANCE);
        println!("{:<13} {:>3} cases  worst {:.2e}  {}", r.kind, r.cases.len(), r.worst(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.kind.clone());
        }
    }
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient mismatch above {TOLERANCE:e} in {}", failed.join(", "))))
    }
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    if a.size < 65 || a.pc_stride.contains(&0) {
        return Err(Error::Config("benchmark needs --size of at least 65 and positive strides".into()));
    }
    let mut nets: Vec<(ArchSpec, Network<f32>)> = Vec::new();
    if a.checkpoint.is_empty() {
        for tag in &a.arch {
            let mut spec = ArchSpec::new(tag, SYNTH_CHANNELS, SYNTH_CLASSES);
            spec.width_divisor = a.width_divisor;
            let net = spec.build()?;
            nets.push((spec, net));
        }
    } else {
        for p in &a.checkpoint {
            require_file(p)?;
        }
        for p in &a.checkpoint {
            nets.push(Checkpoint::load(p)?.network()?);
        }
    }
    let opts = PredictOptions { tile: a.tile, batch: a.batch, ..PredictOptions::default() };
    for (spec, mut net) in nets {
        let mut image = synth_tile(1, 0, a.size).spectral;
        if image.shape().channels != spec.in_channels {
            return Err(Error::Config(format!("network expects {} channels, the test image has {}", spec.in_channels, image.shape().channels)));
        }
        image.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let entries = if spec.tag == "pc" {
            let mut v = Vec::new();
            for &s in &a.pc_stride {
                v.push(time_sliding(&mut net, &spec, &image, s, &opts, a.sample)?);
            }
            v
        } else {
            vec![time_dense(&spec.tag, &mut net, &spec, &image, &opts)?]
        };
        for e in entries {
            println!(
                "{:<12} {}x{}  {:>10.3} s/image  {} units{}",
                e.method,
                a.size,
                a.size,
                e.seconds,
                e.units,
                if e.extrapolated { "  (extrapolated)" } else { "" }
            );
        }
    }
    Ok(())
}
