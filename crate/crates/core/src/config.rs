//! Pipeline configuration: every tunable in one validated struct.
//!
//! Defaults are the values the rest of the crate documents per stage. A
//! plain-text `key = value` file (or individual overrides) adjusts them;
//! unknown keys and out-of-range values are rejected rather than ignored.

use std::fs;
use std::path::Path;

use crate::classify::{LabelingConfig, TrainConfig};
use crate::detect::DetectOptions;
use crate::error::{Error, Result};
use crate::field::FieldGeometry;
use crate::kvfile::{parse_lines, Line};
use crate::track::{DirectionReference, Gates, PatchShape};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Gaussian blur applied to the classifier response, pixels.
    pub blur_sigma: f64,
    /// Response threshold for region seeds and growth.
    pub detect_threshold: f64,
    /// Regions smaller than this many pixels are discarded.
    pub min_region: usize,

    /// Pixels within this distance of a marked centre label as car.
    pub label_fg_radius: f64,
    /// Pixels inside this distance (but outside the car radius) are left
    /// out of training as ambiguous.
    pub label_bg_exclusion: f64,
    /// Fraction of the training set that is foreground after subsampling.
    pub label_fg_fraction: f64,

    /// Boosting rounds (one weak classifier each).
    pub boost_rounds: usize,
    /// Candidate features drawn per round.
    pub feature_pool: usize,
    /// First frame used for classifier training, skipping the warmup
    /// period while traffic is still filling the scene (clamped so the
    /// training window fits the run).
    pub train_start: usize,
    /// Number of consecutive frames whose truth labels train the
    /// classifier.
    pub train_frames: usize,

    /// Largest allowed between-frame displacement, pixels.
    pub max_displacement: f64,
    /// Largest allowed between-frame rotation, degrees (mod 180).
    pub max_rotation_degrees: f64,
    /// Largest allowed offset between travel direction and car axis, degrees.
    pub max_direction_degrees: f64,
    /// Ground speed below which the direction gate is skipped, px/s.
    pub low_speed_exemption: f64,
    /// Largest allowed tracklet velocity change, px/frame^2.
    pub max_acceleration: f64,
    /// Which frame's detected axis the direction gate compares against.
    pub direction_reference: DirectionReference,

    /// Appearance patch size across the car axis, samples.
    pub patch_across: usize,
    /// Appearance patch size along the car axis, samples.
    pub patch_along: usize,

    /// Frames per second of the source video.
    pub frame_rate: f64,
    /// Metres per pixel on the ground.
    pub ground_resolution: f64,

    /// Velocity field half-range per axis, px/frame.
    pub field_vmax: f64,
    /// Velocity bin width, px/frame.
    pub field_bin_width: f64,
    /// Gaussian blob radius of each histogram deposit, bins.
    pub blob_sigma: f64,

    /// Overlay opacity when rendering maps over a base frame, in [0, 1].
    pub overlay_alpha: f64,

    /// Master seed for label subsampling and feature sampling.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            blur_sigma: 3.0,
            detect_threshold: 0.0,
            min_region: 10,
            label_fg_radius: 6.0,
            label_bg_exclusion: 20.0,
            label_fg_fraction: 0.15,
            boost_rounds: 200,
            feature_pool: 250,
            train_start: 20,
            train_frames: 10,
            max_displacement: 30.0,
            max_rotation_degrees: 30.0,
            max_direction_degrees: 30.0,
            low_speed_exemption: 5.0,
            max_acceleration: 4.0,
            direction_reference: DirectionReference::FrameN,
            patch_across: 8,
            patch_along: 16,
            frame_rate: 5.0,
            ground_resolution: 0.23,
            field_vmax: 30.0,
            field_bin_width: 1.0,
            blob_sigma: 1.0,
            overlay_alpha: 0.6,
            seed: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blur_sigma", self.blur_sigma),
            ("label_fg_radius", self.label_fg_radius),
            ("label_bg_exclusion", self.label_bg_exclusion),
            ("max_displacement", self.max_displacement),
            ("max_rotation_degrees", self.max_rotation_degrees),
            ("max_direction_degrees", self.max_direction_degrees),
            ("max_acceleration", self.max_acceleration),
            ("frame_rate", self.frame_rate),
            ("ground_resolution", self.ground_resolution),
            ("field_vmax", self.field_vmax),
            ("field_bin_width", self.field_bin_width),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        if !self.detect_threshold.is_finite() {
            return Err(Error::config("detect_threshold", "must be finite"));
        }
        if !(self.label_fg_fraction > 0.0 && self.label_fg_fraction < 1.0) {
            return Err(Error::config(
                "label_fg_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if self.label_bg_exclusion < self.label_fg_radius {
            return Err(Error::config(
                "label_bg_exclusion",
                "must be at least label_fg_radius",
            ));
        }
        let counted = [
            ("min_region", self.min_region),
            ("boost_rounds", self.boost_rounds),
            ("feature_pool", self.feature_pool),
            ("train_frames", self.train_frames),
            ("patch_across", self.patch_across),
            ("patch_along", self.patch_along),
        ];
        for (key, v) in counted {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [
            ("max_rotation_degrees", self.max_rotation_degrees),
            ("max_direction_degrees", self.max_direction_degrees),
        ] {
            if v > 90.0 {
                return Err(Error::config(key, "angle gates are capped at 90 degrees"));
            }
        }
        if self.low_speed_exemption < 0.0 || !self.low_speed_exemption.is_finite() {
            return Err(Error::config("low_speed_exemption", "must be non-negative"));
        }
        // Every velocity that passes the displacement gate must land inside
        // the field's histogram range.
        if self.field_vmax < self.max_displacement {
            return Err(Error::config(
                "field_vmax",
                "must be at least max_displacement, or gated velocities overflow the field",
            ));
        }
        if !self.blob_sigma.is_finite() || self.blob_sigma < 0.0 {
            return Err(Error::config("blob_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::config("overlay_alpha", "must lie in [0, 1]"));
        }
        self.gates().validate()?;
        self.geometry().validate()?;
        Ok(())
    }

    /// Sets one tunable from its text form, as written in a config file or
    /// a command-line override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(key, format!("expected {what}, got `{value}`"));
        macro_rules! num {
            ($field:ident, $what:expr) => {
                self.$field = value.parse().map_err(|_| bad($what))?
            };
        }
        match key {
            "blur_sigma" => num!(blur_sigma, "a number"),
            "detect_threshold" => num!(detect_threshold, "a number"),
            "min_region" => num!(min_region, "an integer"),
            "label_fg_radius" => num!(label_fg_radius, "a number"),
            "label_bg_exclusion" => num!(label_bg_exclusion, "a number"),
            "label_fg_fraction" => num!(label_fg_fraction, "a number"),
            "boost_rounds" => num!(boost_rounds, "an integer"),
            "feature_pool" => num!(feature_pool, "an integer"),
            "train_start" => num!(train_start, "an integer"),
            "train_frames" => num!(train_frames, "an integer"),
            "max_displacement" => num!(max_displacement, "a number"),
            "max_rotation_degrees" => num!(max_rotation_degrees, "a number"),
            "max_direction_degrees" => num!(max_direction_degrees, "a number"),
            "low_speed_exemption" => num!(low_speed_exemption, "a number"),
            "max_acceleration" => num!(max_acceleration, "a number"),
            "direction_reference" => {
                self.direction_reference = match value {
                    "frame_n" => DirectionReference::FrameN,
                    "frame_n_plus_1" => DirectionReference::FrameNPlus1,
                    "mean_axis" => DirectionReference::MeanAxis,
                    _ => return Err(bad("`frame_n`, `frame_n_plus_1` or `mean_axis`")),
                }
            }
            "patch_across" => num!(patch_across, "an integer"),
            "patch_along" => num!(patch_along, "an integer"),
            "frame_rate" => num!(frame_rate, "a number"),
            "ground_resolution" => num!(ground_resolution, "a number"),
            "field_vmax" => num!(field_vmax, "a number"),
            "field_bin_width" => num!(field_bin_width, "a number"),
            "blob_sigma" => num!(blob_sigma, "a number"),
            "overlay_alpha" => num!(overlay_alpha, "a number"),
            "seed" => num!(seed, "an integer"),
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Applies a config file's `key = value` lines on top of the current
    /// values, without validating. Callers stacking several sources
    /// (defaults, then a file, then command-line overrides) validate once
    /// at the end.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line_no, line) in parse_lines(text, "config file")? {
            match line {
                Line::Section(name) => {
                    return Err(Error::parse(
                        "config file",
                        format!("line {line_no}: unexpected section `[{name}]`"),
                    ))
                }
                Line::Pair(key, value) => self.apply(key, value)?,
            }
        }
        Ok(())
    }

    /// Parses a config file's overrides on top of the defaults and
    /// validates the result.
    pub fn from_text(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn labeling(&self) -> LabelingConfig {
        LabelingConfig {
            fg_radius: self.label_fg_radius,
            bg_exclusion_radius: self.label_bg_exclusion,
            fg_fraction: self.label_fg_fraction,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.boost_rounds,
            pool: self.feature_pool,
            ..TrainConfig::default()
        }
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            blur_sigma: self.blur_sigma,
            threshold: self.detect_threshold,
            min_pixels: self.min_region,
        }
    }

    pub fn gates(&self) -> Gates {
        Gates {
            max_displacement: self.max_displacement,
            max_rotation: self.max_rotation_degrees.to_radians(),
            max_direction_offset: self.max_direction_degrees.to_radians(),
            low_speed_exemption: self.low_speed_exemption,
            max_acceleration: self.max_acceleration,
            direction_reference: self.direction_reference,
        }
    }

    pub fn patch(&self) -> PatchShape {
        PatchShape {
            across: self.patch_across,
            along: self.patch_along,
        }
    }

    pub fn geometry(&self) -> FieldGeometry {
        FieldGeometry {
            vmax: self.field_vmax,
            bin_width: self.field_bin_width,
        }
    }

    /// Ground speed the displacement gate corresponds to, km/h.
    pub fn gate_speed_kmh(&self) -> f64 {
        self.max_displacement * self.frame_rate * self.ground_resolution * 3.6
    }
}
