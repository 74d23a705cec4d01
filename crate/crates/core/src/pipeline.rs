//! End-to-end orchestration: simulate, train, detect, track, build the
//! velocity field and render its maps, holding at most two frames in
//! memory at a time.
//!
//! Everything here is deterministic for a fixed scene, noise spec and
//! configuration. Wall-clock stage timings are reported alongside the run
//! but kept out of the report text, so written artifacts stay
//! byte-identical across runs.

use std::time::Instant;

use crate::classify::{build_labels, train, LabeledPixelSet, RoundStats, StrongClassifier};
use crate::config::PipelineConfig;
use crate::detect::{detect_frame, Detection};
use crate::error::{Error, Result};
use crate::field::{render_maps, ModeMap, PixelState, RenderedMaps, VelocityField};
use crate::raster::{IntegralImage, RasterImage};
use crate::sim::{truth_labels, NoiseSpec, SceneSpec, Simulation};
use crate::track::{chain_tracklets, match_frames, Match, Tracklet};

/// Deterministic run summary. Every value is a pure function of the scene,
/// noise spec, frame count and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub frames: usize,
    pub truth_records: usize,
    pub labeled_pixels: usize,
    /// Boosting rounds actually kept (early stop may trim the request).
    pub boosting_rounds: usize,
    pub detections: usize,
    pub matched_pairs: usize,
    pub tracklets: usize,
    /// Pixels holding at least one histogram deposit.
    pub occupied_pixels: usize,
    /// Occupied fraction of the canvas.
    pub coverage: f64,
    /// Occupied pixels whose modal velocity is nonzero.
    pub moving_pixels: usize,
    pub total_mass: f64,
}

impl PipelineReport {
    /// Machine-readable form: one `metric,value` row per field.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Human-readable aligned table.
    pub fn table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("frames", self.frames.to_string()),
            ("truth_records", self.truth_records.to_string()),
            ("labeled_pixels", self.labeled_pixels.to_string()),
            ("boosting_rounds", self.boosting_rounds.to_string()),
            ("detections", self.detections.to_string()),
            ("matched_pairs", self.matched_pairs.to_string()),
            ("tracklets", self.tracklets.to_string()),
            ("occupied_pixels", self.occupied_pixels.to_string()),
            ("coverage", self.coverage.to_string()),
            ("moving_pixels", self.moving_pixels.to_string()),
            ("total_mass", self.total_mass.to_string()),
        ]
    }
}

/// Everything a full run produces.
pub struct PipelineRun {
    pub classifier: StrongClassifier,
    pub training_stats: Vec<RoundStats>,
    /// Per-frame detections, indexed by frame.
    pub detections: Vec<Vec<Detection>>,
    pub tracklets: Vec<Tracklet>,
    pub field: VelocityField,
    pub modes: ModeMap,
    pub maps: RenderedMaps,
    pub report: PipelineReport,
    /// Wall-clock seconds per stage, for console display only.
    pub timings: Vec<(&'static str, f64)>,
}

/// Runs the whole pipeline on a synthetic scene.
///
/// The classifier trains on `cfg.train_frames` frames starting at
/// `cfg.train_start` (clamped into range) using ground-truth centres as
/// labels, then every frame is detected, adjacent frames matched, matches
/// chained into tracklets and the tracklets deposited into the velocity
/// field. Frame images stream through one at a time; only frame 0 is
/// retained as the render base.
pub fn run(
    scene: &SceneSpec,
    n_frames: usize,
    noise: &NoiseSpec,
    cfg: &PipelineConfig,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let stamp = Instant::now();
    let sim = Simulation::new(scene.clone(), n_frames, *noise, cfg.seed)?;
    let simulate_seconds = stamp.elapsed().as_secs_f64();

    let mut out = run_frames(
        scene.width,
        scene.height,
        n_frames,
        |frame| sim.render_frame(frame),
        |frame| truth_labels(sim.truth(), frame),
        cfg,
    )?;
    out.report.truth_records = sim.truth().len();
    out.timings.insert(0, ("simulate", simulate_seconds));
    Ok(out)
}

/// Runs the train/detect/track/field stages over an arbitrary frame
/// sequence.
///
/// `frame` returns the image for a frame index (frames in the training
/// window are requested twice, all others once); `centres` returns the
/// ground-truth car centres used to label that frame for training. The
/// report's `truth_records` is left at zero since no simulation is
/// attached.
pub fn run_frames<F, L>(
    width: usize,
    height: usize,
    n_frames: usize,
    frame: F,
    centres: L,
    cfg: &PipelineConfig,
) -> Result<PipelineRun>
where
    F: Fn(usize) -> RasterImage,
    L: Fn(usize) -> Vec<(f64, f64)>,
{
    cfg.validate()?;
    if n_frames < 3 {
        return Err(Error::config(
            "frames",
            "tracklets span three frames; need at least 3",
        ));
    }
    let mut timings = Vec::new();
    let mut stamp = Instant::now();
    let mut lap = |timings: &mut Vec<(&'static str, f64)>, stage: &'static str| {
        let now = Instant::now();
        timings.push((stage, (now - stamp).as_secs_f64()));
        stamp = now;
    };

    let (classifier, training_stats, labeled_pixels) =
        train_on_centres(width, height, n_frames, &frame, &centres, cfg)?;
    lap(&mut timings, "train");

    let gates = cfg.gates();
    let patch = cfg.patch();
    let opts = cfg.detect_options();
    let mut detections: Vec<Vec<Detection>> = Vec::with_capacity(n_frames);
    let mut matches: Vec<Vec<Match>> = Vec::with_capacity(n_frames.saturating_sub(1));
    let mut base = None;
    let mut prev: Option<RasterImage> = None;
    for idx in 0..n_frames {
        let img = frame(idx);
        if idx == 0 {
            base = Some(img.clone());
        }
        detections.push(detect_frame(&classifier, &img, idx, &opts)?);
        if let Some(prev_img) = &prev {
            let pair = match_frames(
                prev_img,
                &img,
                &detections[idx - 1],
                &detections[idx],
                &gates,
                cfg.frame_rate,
                &patch,
            );
            matches.push(pair);
        }
        prev = Some(img);
    }
    lap(&mut timings, "detect+match");

    let mut tracklets = Vec::new();
    for k in 0..matches.len().saturating_sub(1) {
        tracklets.extend(chain_tracklets(
            &matches[k],
            &matches[k + 1],
            &detections[k],
            &detections[k + 1],
            &detections[k + 2],
            &gates,
        ));
    }
    lap(&mut timings, "track");

    let mut field = VelocityField::new(width, height, cfg.geometry())?;
    field.deposit_all(&tracklets, cfg.blob_sigma)?;
    let modes = field.mode_map();
    let maps = render_maps(&field, base.as_ref().expect("n_frames >= 3"), cfg.overlay_alpha)?;
    lap(&mut timings, "field+render");

    let moving_pixels = modes
        .state
        .as_slice()
        .iter()
        .filter(|s| **s == PixelState::Moving)
        .count();
    let report = PipelineReport {
        frames: n_frames,
        truth_records: 0,
        labeled_pixels,
        boosting_rounds: classifier.rounds.len(),
        detections: detections.iter().map(Vec::len).sum(),
        matched_pairs: matches.iter().map(Vec::len).sum(),
        tracklets: tracklets.len(),
        occupied_pixels: field.occupied_pixels(),
        coverage: field.occupied_pixels() as f64 / (width * height) as f64,
        moving_pixels,
        total_mass: field.total_mass(),
    };
    Ok(PipelineRun {
        classifier,
        training_stats,
        detections,
        tracklets,
        field,
        modes,
        maps,
        report,
        timings,
    })
}

/// Labels the training-window frames from the given centres and trains the
/// boosted classifier on them.
fn train_on_centres<F, L>(
    width: usize,
    height: usize,
    n_frames: usize,
    frame: &F,
    centres: &L,
    cfg: &PipelineConfig,
) -> Result<(StrongClassifier, Vec<RoundStats>, usize)>
where
    F: Fn(usize) -> RasterImage,
    L: Fn(usize) -> Vec<(f64, f64)>,
{
    use rand::SeedableRng;

    let mut labels = LabeledPixelSet::default();
    let mut images = Vec::new();
    let n_train = cfg.train_frames.min(n_frames);
    let start = cfg.train_start.min(n_frames - n_train);
    for idx in start..start + n_train {
        let frame_centres = centres(idx);
        if frame_centres.is_empty() {
            continue;
        }
        labels.merge(build_labels(
            idx,
            &frame_centres,
            width,
            height,
            &cfg.labeling(),
            cfg.seed.wrapping_add(idx as u64),
        )?);
        images.push((idx, IntegralImage::new(&frame(idx))));
    }
    if labels.is_empty() {
        return Err(Error::NoCarCentres);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = train(&labels, &images, &cfg.training(), &mut rng)?;
    Ok((out.classifier, out.stats, labels.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{LaneDirection, LaneSpec};

    fn quick_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.boost_rounds = 25;
        cfg.feature_pool = 60;
        cfg.train_start = 14;
        cfg.train_frames = 6;
        // Synthetic uniform-brightness cars give detections whose moment
        // axis tracks the training-label disc, not the car body, so the
        // axis-vs-travel gate is opened fully; see the field tests for the
        // gate's own contract coverage.
        cfg.max_direction_degrees = 90.0;
        cfg.seed = 3;
        cfg
    }

    fn small_scene() -> SceneSpec {
        SceneSpec {
            width: 96,
            height: 96,
            lanes: vec![LaneSpec {
                points: vec![(0.0, 48.0), (95.0, 48.0)],
                speed: 4.0,
                width: 12.0,
                spawn_rate: 0.5,
                direction: LaneDirection::Forward,
            }],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn small_scene_produces_tracklets_and_a_consistent_report() {
        let run = run(&small_scene(), 30, &NoiseSpec::none(), &quick_config()).unwrap();
        assert!(run.report.tracklets > 0, "report: {}", run.report.table());
        assert_eq!(run.report.tracklets, run.tracklets.len());
        assert_eq!(run.report.frames, 30);
        assert_eq!(
            run.report.detections,
            run.detections.iter().map(Vec::len).sum::<usize>()
        );
        assert_eq!(run.report.occupied_pixels, run.field.occupied_pixels());
        assert!(run.report.moving_pixels > 0);
        assert!(run.report.coverage > 0.0 && run.report.coverage < 1.0);
        assert_eq!(run.timings.len(), 5);

        let csv = run.report.csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("\ntracklets,"));
        let table = run.report.table();
        assert!(table.contains("tracklets"));
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let scene = small_scene();
        let cfg = quick_config();
        let a = run(&scene, 24, &NoiseSpec::default(), &cfg).unwrap();
        let b = run(&scene, 24, &NoiseSpec::default(), &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.csv(), b.report.csv());
        assert_eq!(a.tracklets, b.tracklets);
        assert_eq!(
            crate::field::encode_field(&a.field),
            crate::field::encode_field(&b.field)
        );
        assert_eq!(a.maps.speed_overlay.as_bytes(), b.maps.speed_overlay.as_bytes());
        assert_eq!(
            a.maps.direction_overlay.as_bytes(),
            b.maps.direction_overlay.as_bytes()
        );
    }

    #[test]
    fn car_free_scenes_cannot_train() {
        let scene = SceneSpec {
            width: 64,
            height: 64,
            ..SceneSpec::default()
        };
        let err = run(&scene, 10, &NoiseSpec::none(), &quick_config()).map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::NoCarCentres), "got {err:?}");
    }

    #[test]
    fn too_few_frames_for_a_tracklet_is_an_error() {
        let err = run(&small_scene(), 2, &NoiseSpec::none(), &quick_config()).map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }
}
