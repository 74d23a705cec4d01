//! Crate-wide error type.

use crate::register::PolyprojectiveTransform;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Raster construction with a zero dimension.
    #[error("raster dimensions must be positive, got {width}x{height}")]
    EmptyRaster { width: usize, height: usize },

    /// Raster construction from a buffer of the wrong length.
    #[error("raster data length {got} does not match {width}x{height}")]
    DataSizeMismatch {
        width: usize,
        height: usize,
        got: usize,
    },

    /// Rectangle query outside the summed image.
    #[error("rectangle [{x0},{x1})x[{y0},{y1}) out of bounds for {width}x{height} image")]
    RectOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },

    /// Two rasters or fields that must share a shape do not.
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },

    /// Labeling requires at least one marked car centre.
    #[error("cannot build labels from an empty centre list")]
    NoCarCentres,

    /// A marked car centre lies outside the image.
    #[error("car centre ({x}, {y}) outside {width}x{height} image")]
    CentreOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    /// Training needs at least one sample of each class.
    #[error("training set must contain both foreground and background pixels")]
    DegenerateLabels,

    /// A labeled pixel references a frame with no loaded image.
    #[error("no image supplied for frame {frame} referenced by the label set")]
    MissingFrameImage { frame: usize },

    /// Region growing was seeded outside the image.
    #[error("seed ({x}, {y}) outside {width}x{height} image")]
    SeedOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    /// Region growing was seeded on a pixel at or below the growth threshold.
    #[error("seed ({x}, {y}) has response {value} not above threshold {threshold}")]
    SeedBelowThreshold {
        x: usize,
        y: usize,
        value: f64,
        threshold: f64,
    },

    /// The same pixel was passed twice as a region seed.
    #[error("duplicate region seed ({x}, {y})")]
    DuplicateSeed { x: usize, y: usize },

    /// A velocity outside the histogram range was deposited.
    #[error("velocity ({vx}, {vy}) outside histogram range [-{vmax}, {vmax}]")]
    VelocityOutOfRange { vx: f64, vy: f64, vmax: f64 },

    /// Merging velocity fields with different bin layouts.
    #[error("velocity field geometry mismatch: vmax {left_vmax} vs {right_vmax}, bin width {left_bin} vs {right_bin}")]
    GeometryMismatch {
        left_vmax: f64,
        right_vmax: f64,
        left_bin: f64,
        right_bin: f64,
    },

    /// Fitting a 17-parameter transform needs enough correspondences.
    #[error("{points} correspondences given but at least {needed} are required")]
    UnderdeterminedFit { points: usize, needed: usize },

    /// The rational transform was evaluated where its denominator vanishes.
    #[error("transform denominator {q} below safe minimum at ({x}, {y})")]
    PoleInTransform { x: f64, y: f64, q: f64 },

    /// Case-deletion fitting ran out of points or rounds before reaching the
    /// residual target. Carries the last fit so callers can inspect it.
    #[error("robust fit did not converge: mean residual {mean_residual:.3} px over {survivors} survivors after {rounds} rounds")]
    RobustFitDidNotConverge {
        rounds: usize,
        mean_residual: f64,
        survivors: usize,
        last_fit: Box<PolyprojectiveTransform>,
    },

    /// Correlation matching against a constant patch or window is undefined.
    #[error("zero-variance {what} makes normalized correlation undefined")]
    ZeroVariance { what: &'static str },

    /// The search region cannot contain a single patch placement.
    #[error("search region {region_width}x{region_height} smaller than patch {patch_width}x{patch_height}")]
    SearchRegionTooSmall {
        patch_width: usize,
        patch_height: usize,
        region_width: usize,
        region_height: usize,
    },

    /// A displacement field was requested but no cell received a match.
    #[error("no grid cell received a correspondence")]
    NoMatchedCells,

    /// Scene or configuration value rejected by validation.
    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    /// Unrecognized key in a config or scene file.
    #[error("unknown configuration key `{key}`")]
    UnknownConfigKey { key: String },

    /// Malformed content in one of the documented file formats.
    #[error("cannot parse {what}: {detail}")]
    FormatParse { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::FormatParse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }
}
