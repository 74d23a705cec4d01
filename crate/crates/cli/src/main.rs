//! Command-line front end for the velocity-field pipeline.
//!
//! Each stage of the pipeline is a subcommand reading and writing plain
//! files, so stages can be rerun, swapped out or inspected in isolation;
//! `pipeline` chains them all on a synthetic scene. Every subcommand is
//! deterministic: identical inputs, config and seeds give byte-identical
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use velofield::classify::{build_labels, train, LabeledPixelSet, StrongClassifier};
use velofield::config::PipelineConfig;
use velofield::detect::{detect_frame, load_detections_csv, save_detections_csv, Detection};
use velofield::field::{decode_field, encode_field, render_maps, RenderedMaps, VelocityField};
use velofield::pipeline;
use velofield::raster::{encode_pgm, encode_ppm, read_pgm, IntegralImage, RasterImage, RgbImage};
use velofield::register::{
    build_displacement_field, case_deletion_fit, match_grid, save_correspondences_csv,
    save_displacement_field, save_transform, CaseDeletionOptions, PolyprojectiveTransform,
};
use velofield::sim::{
    load_scene, load_truth_csv, parse_scene, save_truth_csv, truth_labels, NoiseSpec, SceneSpec,
    Simulation,
};
use velofield::track::{chain_tracklets, load_tracklets_csv, match_frames, save_tracklets_csv, Match};

/// Built-in scene used by `--demo`: two opposing straight lanes on a
/// textured 256x256 background, busy enough to fill a velocity field in
/// under a hundred frames.
const DEMO_SCENE: &str = "\
width = 256
height = 256

[lane]
points = 0,96 255,96
speed = 4
width = 14
spawn_rate = 0.10

[lane]
points = 255,160 0,160
speed = 3
width = 14
spawn_rate = 0.10
";

/// Config preset layered under `--demo` runs (a file or --set still wins).
/// Flat-shaded synthetic cars detect as blobs whose moment axis does not
/// follow the direction of travel, so the axis-vs-travel gate is opened
/// fully; the smaller classifier keeps the demo under a minute.
const DEMO_CONFIG: &str = "\
max_direction_degrees = 90
boost_rounds = 60
feature_pool = 150
train_start = 20
train_frames = 8
";

const CONFIG_HELP: &str = "\
Config keys (usable in --config files and --set KEY=VALUE, defaults shown):
  blur_sigma = 3                response smoothing width, px
  detect_threshold = 0          minimum blurred response for seeds and growth
  min_region = 10               smallest accepted detection region, px
  label_fg_radius = 6           training foreground disc radius, px
  label_bg_exclusion = 20       background kept this far from any car, px
  label_fg_fraction = 0.15      target share of foreground among labels
  boost_rounds = 200            boosting rounds (weak classifiers)
  feature_pool = 250            candidate features sampled per round
  train_start = 20              first frame of the training window
  train_frames = 10             frames in the training window
  max_displacement = 30         match gate: centre motion per frame, px
  max_rotation_degrees = 30     match gate: axis rotation between frames
  max_direction_degrees = 30    match gate: axis against travel direction
  low_speed_exemption = 5       direction gate waived below this speed, px/s
  max_acceleration = 4          tracklet gate: velocity change, px/frame^2
  direction_reference = frame_n axis gate reference: frame_n | frame_n_plus_1 | mean_axis
  patch_across = 8              match patch samples across the car axis
  patch_along = 16              match patch samples along the car axis
  frame_rate = 5                frames per second
  ground_resolution = 0.23      metres per pixel
  field_vmax = 30               velocity histogram half-range, px/frame
  field_bin_width = 1           velocity histogram bin width, px/frame
  blob_sigma = 1                histogram deposit smoothing, bins
  overlay_alpha = 0.6           rendered map opacity over the base frame
  seed = 1                      master random seed
";

/// Per-pixel traffic velocity fields from overhead image sequences.
#[derive(Parser)]
#[command(name = "velofield", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic traffic scene to numbered PGM frames plus a
    /// truth table of car positions and velocities
    Simulate(SimulateArgs),
    /// Train the boosted pixel classifier on frames with known car centres
    Train(TrainArgs),
    /// Run a trained classifier over frames and extract car detections
    Detect(DetectArgs),
    /// Match detections across consecutive frames into 3-frame tracklets
    Track(TrackArgs),
    /// Accumulate tracklet velocities into a per-pixel histogram field
    BuildField(BuildFieldArgs),
    /// Render a velocity field into speed and direction maps
    Render(RenderArgs),
    /// Register one frame onto another: grid matching, robust warp fit
    /// and a cellwise displacement field
    Register(RegisterArgs),
    /// Run the whole chain on a scene and write every artifact
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text config file of `key = value` lines overriding the
    /// defaults listed below
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Single config override (KEY=VALUE), highest precedence; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Layers config sources: defaults, then the demo preset when asked,
    /// then the file, then each --set, and validates the result.
    fn load(&self, demo: bool) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if demo {
            cfg.apply_text(DEMO_CONFIG).expect("demo preset parses");
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            cfg.apply(key.trim(), value.trim())
                .with_context(|| format!("--set {kv}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SceneArgs {
    /// Scene description file (see `simulate --help` for the format)
    #[arg(long, value_name = "FILE", required_unless_present = "demo", conflicts_with = "demo")]
    scene: Option<PathBuf>,

    /// Use the bundled two-lane demo scene; also layers a demo config
    /// preset (relaxed direction gate, 60 boosting rounds) under any
    /// --config/--set overrides
    #[arg(long)]
    demo: bool,
}

impl SceneArgs {
    fn load(&self) -> Result<SceneSpec> {
        match &self.scene {
            Some(path) => load_scene(path)
                .with_context(|| format!("loading scene {}", path.display())),
            None => parse_scene(DEMO_SCENE).context("parsing the bundled demo scene"),
        }
    }
}

#[derive(Args)]
struct NoiseArgs {
    /// Standard deviation of per-pixel intensity noise
    #[arg(long, default_value_t = 0.02)]
    intensity_sigma: f64,

    /// Standard deviation of whole-frame position jitter, px
    #[arg(long, default_value_t = 1.0)]
    jitter_sigma: f64,
}

impl NoiseArgs {
    fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            intensity_sigma: self.intensity_sigma,
            jitter_sigma: self.jitter_sigma,
        }
    }
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArgs,

    /// Number of frames to render
    #[arg(long, default_value_t = 80)]
    frames: usize,

    /// Directory for frame_NNNNN.pgm files and truth.csv (created if missing)
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    #[command(flatten)]
    noise: NoiseArgs,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct TrainArgs {
    /// Directory of numbered .pgm frames
    #[arg(long, value_name = "DIR")]
    frames_dir: PathBuf,

    /// Truth table with car centres per frame (as written by simulate)
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,

    /// Output model file
    #[arg(long, value_name = "FILE", default_value = "model.txt")]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct DetectArgs {
    /// Directory of numbered .pgm frames
    #[arg(long, value_name = "DIR")]
    frames_dir: PathBuf,

    /// Trained model file (as written by train)
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Output detections table
    #[arg(long, value_name = "FILE", default_value = "detections.csv")]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct TrackArgs {
    /// Directory of numbered .pgm frames; numbers must be consecutive
    #[arg(long, value_name = "DIR")]
    frames_dir: PathBuf,

    /// Detections table (as written by detect)
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,

    /// Output tracklets table
    #[arg(long, value_name = "FILE", default_value = "tracklets.csv")]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct BuildFieldArgs {
    /// Tracklets table (as written by track)
    #[arg(long, value_name = "FILE")]
    tracklets: PathBuf,

    /// Field width, px (alternative: --frames-dir)
    #[arg(long)]
    width: Option<usize>,

    /// Field height, px (alternative: --frames-dir)
    #[arg(long)]
    height: Option<usize>,

    /// Take the field dimensions from the first frame in this directory
    #[arg(long, value_name = "DIR")]
    frames_dir: Option<PathBuf>,

    /// Output field file
    #[arg(long, value_name = "FILE", default_value = "field.vff")]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct RenderArgs {
    /// Velocity field file (as written by build-field)
    #[arg(long, value_name = "FILE")]
    field: PathBuf,

    /// Base intensity frame the maps are drawn over (.pgm)
    #[arg(long, value_name = "FILE")]
    base: PathBuf,

    /// Directory for speed.pgm, speed.ppm and direction.ppm
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RegisterArgs {
    /// Image to register (the moving frame, .pgm)
    #[arg(long, value_name = "FILE")]
    source: PathBuf,

    /// Image registered onto (the fixed frame, .pgm)
    #[arg(long, value_name = "FILE")]
    target: PathBuf,

    /// Directory for matches.csv, transform.txt and displacement.txt
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    /// Spacing of the match grid, px
    #[arg(long, default_value_t = 50)]
    spacing: usize,

    /// Half-size of each matched patch, px (patches are 2r+1 square)
    #[arg(long, default_value_t = 37)]
    patch_radius: usize,

    /// Search range around each grid point, px
    #[arg(long, default_value_t = 25)]
    search_radius: usize,

    /// Cell size of the residual displacement field, px
    #[arg(long, default_value_t = 200)]
    cell_size: usize,

    /// Fraction of worst matches deleted per fitting round
    #[arg(long, default_value_t = 0.05)]
    drop_fraction: f64,

    /// Mean residual (px) at which fitting stops deleting matches
    #[arg(long, default_value_t = 2.0)]
    target_error: f64,
}

#[derive(Args)]
#[command(after_help = CONFIG_HELP)]
struct PipelineArgs {
    #[command(flatten)]
    scene: SceneArgs,

    /// Frames to simulate and process
    #[arg(long, default_value_t = 80)]
    frames: usize,

    /// Directory for all output artifacts (created if missing)
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    /// Also write the rendered input frames under <OUT_DIR>/frames
    #[arg(long)]
    save_frames: bool,

    #[command(flatten)]
    noise: NoiseArgs,

    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Train(args) => train_cmd(args),
        Command::Detect(args) => detect(args),
        Command::Track(args) => track(args),
        Command::BuildField(args) => build_field(args),
        Command::Render(args) => render(args),
        Command::Register(args) => register(args),
        Command::Pipeline(args) => pipeline_cmd(args),
    }
}

/// Caps rayon's worker count from VF_THREADS (default: all cores).
fn init_threads() -> Result<()> {
    match std::env::var("VF_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .with_context(|| format!("VF_THREADS={v}: expected a positive integer"))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("initializing the worker pool")?;
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

/// Trailing integer in a file stem ("frame_00012" -> 12), if any.
fn frame_number(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits = stem
        .bytes()
        .rev()
        .take_while(|b| b.is_ascii_digit())
        .count();
    if digits == 0 {
        return None;
    }
    stem[stem.len() - digits..].parse().ok()
}

/// All .pgm files in a directory, sorted by the trailing integer in the
/// file stem. Rejects unnumbered and duplicate-numbered frames.
fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("reading frame directory {}", dir.display()))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry
            .with_context(|| format!("reading frame directory {}", dir.display()))?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        match frame_number(&path) {
            Some(n) => frames.push((n, path)),
            None => bail!(
                "frame file {} has no trailing frame number in its name",
                path.display()
            ),
        }
    }
    if frames.is_empty() {
        bail!("no .pgm frames found in {}", dir.display());
    }
    frames.sort();
    for pair in frames.windows(2) {
        if pair[0].0 == pair[1].0 {
            bail!(
                "frame number {} appears twice ({} and {})",
                pair[0].0,
                pair[0].1.display(),
                pair[1].1.display()
            );
        }
    }
    Ok(frames)
}

fn read_frame(path: &Path) -> Result<RasterImage> {
    read_pgm(path).with_context(|| format!("reading frame {}", path.display()))
}

fn write_pgm16(img: &RasterImage, path: &Path) -> Result<()> {
    let bytes = encode_pgm(img, u16::MAX)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_frames(sim: &Simulation, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for frame in 0..sim.n_frames() {
        let img = sim.render_frame(frame);
        write_pgm16(&img, &dir.join(format!("frame_{frame:05}.pgm")))?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = args.config.load(args.scene.demo)?;
    let scene = args.scene.load()?;
    let sim = Simulation::new(scene, args.frames, args.noise.spec(), cfg.seed)?;
    write_frames(&sim, &args.out_dir)?;
    save_truth_csv(sim.truth(), &args.out_dir.join("truth.csv"))?;
    println!(
        "wrote {} frames and truth.csv ({} car sightings) to {}",
        args.frames,
        sim.truth().len(),
        args.out_dir.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load(false)?;
    let frames = list_frames(&args.frames_dir)?;
    let truth = load_truth_csv(&args.truth)
        .with_context(|| format!("reading truth table {}", args.truth.display()))?;

    let n_train = cfg.train_frames.min(frames.len());
    let start = cfg.train_start.min(frames.len() - n_train);
    let window = &frames[start..start + n_train];

    let mut labels = LabeledPixelSet::default();
    let mut images = Vec::new();
    let mut dims = None;
    for (frame, path) in window {
        let img = read_frame(path)?;
        let (w, h) = img.dims();
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => bail!(
                "frame {} is {}x{} but earlier frames are {}x{}",
                path.display(),
                w,
                h,
                d.0,
                d.1
            ),
            Some(_) => {}
        }
        let centres = truth_labels(&truth, *frame);
        if centres.is_empty() {
            continue;
        }
        labels.merge(build_labels(
            *frame,
            &centres,
            w,
            h,
            &cfg.labeling(),
            cfg.seed.wrapping_add(*frame as u64),
        )?);
        images.push((*frame, IntegralImage::new(&img)));
    }
    if labels.is_empty() {
        bail!(
            "no frames in the training window (frames {}..{} of the directory) have car centres in {}",
            start,
            start + n_train,
            args.truth.display()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trained = train(&labels, &images, &cfg.training(), &mut rng)?;
    trained
        .classifier
        .save(&args.out)
        .with_context(|| format!("writing model {}", args.out.display()))?;
    println!(
        "trained {} rounds on {} labeled pixels from {} frames -> {}",
        trained.classifier.rounds.len(),
        labels.len(),
        images.len(),
        args.out.display()
    );
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let cfg = args.config.load(false)?;
    let classifier = StrongClassifier::load(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let frames = list_frames(&args.frames_dir)?;
    let opts = cfg.detect_options();

    let per_frame: Vec<Vec<Detection>> = frames
        .par_iter()
        .map(|(frame, path)| -> Result<Vec<Detection>> {
            let img = read_frame(path)?;
            Ok(detect_frame(&classifier, &img, *frame, &opts)?)
        })
        .collect::<Result<_>>()?;

    let detections: Vec<Detection> = per_frame.into_iter().flatten().collect();
    save_detections_csv(&detections, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} detections across {} frames -> {}",
        detections.len(),
        frames.len(),
        args.out.display()
    );
    Ok(())
}

fn track(args: TrackArgs) -> Result<()> {
    let cfg = args.config.load(false)?;
    let frames = list_frames(&args.frames_dir)?;
    if frames.len() < 3 {
        bail!(
            "tracking needs at least 3 consecutive frames, found {}",
            frames.len()
        );
    }
    for pair in frames.windows(2) {
        if pair[1].0 != pair[0].0 + 1 {
            bail!(
                "frame numbers jump from {} to {}; tracking needs consecutive frames",
                pair[0].0,
                pair[1].0
            );
        }
    }
    let all = load_detections_csv(&args.detections)
        .with_context(|| format!("reading detections {}", args.detections.display()))?;
    let base = frames[0].0;
    let mut per_frame: Vec<Vec<Detection>> = vec![Vec::new(); frames.len()];
    for d in all {
        match d.frame.checked_sub(base).filter(|&i| i < frames.len()) {
            Some(slot) => per_frame[slot].push(d),
            None => bail!(
                "detection at frame {} has no frame file in {}",
                d.frame,
                args.frames_dir.display()
            ),
        }
    }

    let gates = cfg.gates();
    let patch = cfg.patch();
    let matches: Vec<Vec<Match>> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|k| -> Result<Vec<Match>> {
            let a = read_frame(&frames[k].1)?;
            let b = read_frame(&frames[k + 1].1)?;
            Ok(match_frames(
                &a,
                &b,
                &per_frame[k],
                &per_frame[k + 1],
                &gates,
                cfg.frame_rate,
                &patch,
            ))
        })
        .collect::<Result<_>>()?;

    let mut tracklets = Vec::new();
    for k in 0..matches.len() - 1 {
        tracklets.extend(chain_tracklets(
            &matches[k],
            &matches[k + 1],
            &per_frame[k],
            &per_frame[k + 1],
            &per_frame[k + 2],
            &gates,
        ));
    }
    save_tracklets_csv(&tracklets, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} tracklets from {} matched frame pairs -> {}",
        tracklets.len(),
        matches.len(),
        args.out.display()
    );
    Ok(())
}

fn build_field(args: BuildFieldArgs) -> Result<()> {
    let cfg = args.config.load(false)?;
    let (width, height) = match (args.width, args.height, &args.frames_dir) {
        (Some(w), Some(h), None) => (w, h),
        (None, None, Some(dir)) => {
            let frames = list_frames(dir)?;
            read_frame(&frames[0].1)?.dims()
        }
        _ => bail!("pass either --width and --height, or --frames-dir"),
    };
    let tracklets = load_tracklets_csv(&args.tracklets)
        .with_context(|| format!("reading tracklets {}", args.tracklets.display()))?;
    let mut field = VelocityField::new(width, height, cfg.geometry())?;
    field.deposit_all(&tracklets, cfg.blob_sigma)?;
    fs::write(&args.out, encode_field(&field))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} tracklets deposited over {} occupied pixels -> {}",
        tracklets.len(),
        field.occupied_pixels(),
        args.out.display()
    );
    Ok(())
}

fn write_maps(maps: &RenderedMaps, dir: &Path) -> Result<()> {
    write_pgm16(&maps.speed_gray, &dir.join("speed.pgm"))?;
    write_ppm(&maps.speed_overlay, &dir.join("speed.ppm"))?;
    write_ppm(&maps.direction_overlay, &dir.join("direction.ppm"))?;
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let cfg = args.config.load(false)?;
    let bytes = fs::read(&args.field)
        .with_context(|| format!("reading field {}", args.field.display()))?;
    let field = decode_field(&bytes)
        .with_context(|| format!("decoding field {}", args.field.display()))?;
    let base = read_frame(&args.base)?;
    let maps = render_maps(&field, &base, cfg.overlay_alpha)?;
    create_dir(&args.out_dir)?;
    write_maps(&maps, &args.out_dir)?;
    println!(
        "wrote speed.pgm, speed.ppm and direction.ppm to {}",
        args.out_dir.display()
    );
    Ok(())
}

fn register(args: RegisterArgs) -> Result<()> {
    let source = read_frame(&args.source)?;
    let target = read_frame(&args.target)?;
    let (corrs, skipped) = match_grid(
        &source,
        &target,
        args.spacing,
        args.patch_radius,
        args.search_radius,
    )?;
    create_dir(&args.out_dir)?;
    save_correspondences_csv(&corrs, &args.out_dir.join("matches.csv"))
        .with_context(|| format!("writing {}", args.out_dir.join("matches.csv").display()))?;

    let opts = CaseDeletionOptions {
        drop_fraction: args.drop_fraction,
        target_mean_error: args.target_error,
        ..CaseDeletionOptions::default()
    };
    let fit = case_deletion_fit(&corrs, &PolyprojectiveTransform::identity(), &opts)?;
    save_transform(&fit.transform, &args.out_dir.join("transform.txt"))
        .with_context(|| format!("writing {}", args.out_dir.join("transform.txt").display()))?;

    let (w, h) = source.dims();
    let disp = build_displacement_field(
        &corrs,
        w,
        h,
        args.cell_size,
        args.drop_fraction,
        args.target_error,
    )?;
    save_displacement_field(&disp, &args.out_dir.join("displacement.txt"))
        .with_context(|| format!("writing {}", args.out_dir.join("displacement.txt").display()))?;
    println!(
        "{} grid matches ({} flat patches skipped); fit deleted {} and kept {} at mean residual {:.3} px in {} rounds",
        corrs.len(),
        skipped,
        fit.deleted_indices.len(),
        fit.surviving_indices.len(),
        fit.mean_residual,
        fit.rounds
    );
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let cfg = args.config.load(args.scene.demo)?;
    let scene = args.scene.load()?;
    let noise = args.noise.spec();
    let run = pipeline::run(&scene, args.frames, &noise, &cfg)?;

    create_dir(&args.out_dir)?;
    let out = |name: &str| args.out_dir.join(name);

    let sim = Simulation::new(scene, args.frames, noise, cfg.seed)?;
    save_truth_csv(sim.truth(), &out("truth.csv"))?;
    if args.save_frames {
        write_frames(&sim, &args.out_dir.join("frames"))?;
    }

    run.classifier
        .save(&out("model.txt"))
        .with_context(|| format!("writing {}", out("model.txt").display()))?;
    let detections: Vec<Detection> = run.detections.iter().flatten().cloned().collect();
    save_detections_csv(&detections, &out("detections.csv"))?;
    save_tracklets_csv(&run.tracklets, &out("tracklets.csv"))?;
    fs::write(out("field.vff"), encode_field(&run.field))
        .with_context(|| format!("writing {}", out("field.vff").display()))?;
    write_maps(&run.maps, &args.out_dir)?;
    fs::write(out("report.txt"), run.report.table())
        .with_context(|| format!("writing {}", out("report.txt").display()))?;
    fs::write(out("report.csv"), run.report.csv())
        .with_context(|| format!("writing {}", out("report.csv").display()))?;

    for (stage, secs) in &run.timings {
        eprintln!("{stage:>14}  {secs:7.2} s");
    }
    print!("{}", run.report.table());
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}
