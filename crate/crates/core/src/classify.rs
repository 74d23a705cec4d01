//! Boosted pixel classifier.
//!
//! A weak classifier thresholds one rectangle-sum feature: the sum of the
//! image over a few "positive" rectangles minus the sum over a few
//! "negative" ones, all placed relative to the probe pixel. Training runs
//! discrete AdaBoost over pools of randomly sampled features; the strong
//! classifier's signed vote total, evaluated at every pixel, is the
//! car-likelihood response image consumed by detection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{IntegralImage, Raster, RasterImage};

/// One rectangle of a feature, offsets relative to the probe pixel. The
/// span is half-open `[x0, x1) x [y0, y1)`, so coincident corners give an
/// empty rectangle that always sums to zero. Parts outside the image
/// contribute zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RectSpec {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

/// Sum over the positive rectangles minus sum over the negative ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RectFeature {
    pub positive: Vec<RectSpec>,
    pub negative: Vec<RectSpec>,
}

impl RectFeature {
    pub fn evaluate(&self, ii: &IntegralImage, x: usize, y: usize) -> f64 {
        let px = x as i64;
        let py = y as i64;
        let mut acc = 0.0;
        for r in &self.positive {
            acc += ii.rect_sum_clamped(
                px + r.x0 as i64,
                py + r.y0 as i64,
                px + r.x1 as i64,
                py + r.y1 as i64,
            );
        }
        for r in &self.negative {
            acc -= ii.rect_sum_clamped(
                px + r.x0 as i64,
                py + r.y0 as i64,
                px + r.x1 as i64,
                py + r.y1 as i64,
            );
        }
        acc
    }
}

/// Distribution the feature pool is sampled from: corner coordinates are
/// independent draws from a rounded normal, clamped to a square window
/// around the probe pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureDistribution {
    pub corner_sigma: f64,
    pub max_offset: i32,
    pub max_rects: usize,
}

impl Default for FeatureDistribution {
    fn default() -> Self {
        FeatureDistribution {
            corner_sigma: 10.0,
            max_offset: 40,
            max_rects: 5,
        }
    }
}

/// Draws one feature: 1..=max_rects positive and negative rectangles, each
/// from two normal corner draws normalized so `x0 <= x1` and `y0 <= y1`.
pub fn sample_feature<R: Rng + ?Sized>(rng: &mut R, dist: &FeatureDistribution) -> RectFeature {
    assert!(
        dist.corner_sigma > 0.0 && dist.max_offset >= 1 && dist.max_rects >= 1,
        "feature distribution parameters must be positive"
    );
    let normal = Normal::new(0.0, dist.corner_sigma).expect("sigma checked above");
    let n_pos = rng.gen_range(1..=dist.max_rects);
    let n_neg = rng.gen_range(1..=dist.max_rects);
    let draw_group = |rng: &mut R, count: usize| {
        let mut rects = Vec::with_capacity(count);
        for _ in 0..count {
            let mut corner = [0i32; 4];
            for c in &mut corner {
                *c = (normal.sample(rng).round() as i32).clamp(-dist.max_offset, dist.max_offset);
            }
            let [xa, ya, xb, yb] = corner;
            rects.push(RectSpec {
                x0: xa.min(xb),
                y0: ya.min(yb),
                x1: xa.max(xb),
                y1: ya.max(yb),
            });
        }
        rects
    };
    let positive = draw_group(rng, n_pos);
    let negative = draw_group(rng, n_neg);
    RectFeature { positive, negative }
}

/// Thresholded feature with its boosting vote weight. Predicts
/// `polarity` when the feature value exceeds the threshold, `-polarity`
/// otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakClassifier {
    pub feature: RectFeature,
    pub threshold: f64,
    pub polarity: i8,
    pub alpha: f64,
}

impl WeakClassifier {
    /// Signed vote `alpha * h(x, y)` with `h` in `{-1, +1}`.
    pub fn vote(&self, ii: &IntegralImage, x: usize, y: usize) -> f64 {
        let v = self.feature.evaluate(ii, x, y);
        let h = if v > self.threshold {
            self.polarity
        } else {
            -self.polarity
        };
        self.alpha * h as f64
    }
}

/// Sum of weak-classifier votes. Positive responses lean "car pixel".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrongClassifier {
    pub rounds: Vec<WeakClassifier>,
}

impl StrongClassifier {
    /// Response at a single pixel; bit-identical to the corresponding pixel
    /// of [`StrongClassifier::respond`].
    pub fn response_at(&self, ii: &IntegralImage, x: usize, y: usize) -> f64 {
        let mut acc = 0.0;
        for stump in &self.rounds {
            acc += stump.vote(ii, x, y);
        }
        acc
    }

    /// Evaluates the response over every pixel of the image.
    pub fn respond(&self, img: &RasterImage) -> RasterImage {
        self.respond_from_integral(&IntegralImage::new(img))
    }

    /// Same, reusing a precomputed integral image.
    ///
    /// Runs stump-major with a per-row accumulator: interior columns, where
    /// no rectangle needs clamping, go through contiguous slices of the
    /// summed-area table; border columns fall back to the clamped lookup.
    pub fn respond_from_integral(&self, ii: &IntegralImage) -> RasterImage {
        let (w, h) = (ii.width(), ii.height());
        let mut resp = vec![0.0f64; w * h];
        let mut feat = vec![0.0f64; w];
        for stump in &self.rounds {
            let vote = stump.alpha * stump.polarity as f64;
            let threshold = stump.threshold;
            for y in 0..h {
                feat.fill(0.0);
                for r in &stump.feature.positive {
                    accumulate_rect_row(ii, r, y, 1.0, &mut feat);
                }
                for r in &stump.feature.negative {
                    accumulate_rect_row(ii, r, y, -1.0, &mut feat);
                }
                let row = &mut resp[y * w..(y + 1) * w];
                for x in 0..w {
                    row[x] += if feat[x] > threshold { vote } else { -vote };
                }
            }
        }
        Raster::from_vec(w, h, resp).expect("integral image dimensions are positive")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read_to_string(path)?)
    }

    /// Model text format: a version header, the round count, then one line
    /// per round holding `alpha polarity threshold n_pos n_neg` followed by
    /// four corner offsets per rectangle (positive group first).
    pub fn encode(&self) -> String {
        let mut out = String::from("velofield-model 1\n");
        out.push_str(&format!("rounds {}\n", self.rounds.len()));
        for stump in &self.rounds {
            out.push_str(&format!(
                "{} {} {} {} {}",
                stump.alpha,
                stump.polarity,
                stump.threshold,
                stump.feature.positive.len(),
                stump.feature.negative.len()
            ));
            for r in stump.feature.positive.iter().chain(&stump.feature.negative) {
                out.push_str(&format!(" {} {} {} {}", r.x0, r.y0, r.x1, r.y1));
            }
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::parse("classifier model", detail);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        if header.trim() != "velofield-model 1" {
            return Err(bad(format!("unsupported header `{}`", header.trim())));
        }
        let counts = lines.next().ok_or_else(|| bad("missing round count".into()))?;
        let n: usize = counts
            .trim()
            .strip_prefix("rounds ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad round count line `{counts}`")))?;
        let mut rounds = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut tok = line.split_whitespace();
            let mut next_f64 = |what: &str| -> Result<f64> {
                tok.next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("round {i}: missing or bad {what}")))
            };
            let alpha = next_f64("alpha")?;
            let polarity = next_f64("polarity")? as i8;
            if polarity != 1 && polarity != -1 {
                return Err(bad(format!("round {i}: polarity must be +1 or -1")));
            }
            let threshold = next_f64("threshold")?;
            let n_pos = next_f64("positive rectangle count")? as usize;
            let n_neg = next_f64("negative rectangle count")? as usize;
            if n_pos == 0 || n_neg == 0 {
                return Err(bad(format!("round {i}: rectangle groups cannot be empty")));
            }
            let mut read_rects = |count: usize| -> Result<Vec<RectSpec>> {
                let mut rects = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut c = [0i32; 4];
                    for v in &mut c {
                        *v = tok
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| bad(format!("round {i}: truncated rectangle list")))?;
                    }
                    if c[0] > c[2] || c[1] > c[3] {
                        return Err(bad(format!("round {i}: rectangle corners not normalized")));
                    }
                    rects.push(RectSpec {
                        x0: c[0],
                        y0: c[1],
                        x1: c[2],
                        y1: c[3],
                    });
                }
                Ok(rects)
            };
            let positive = read_rects(n_pos)?;
            let negative = read_rects(n_neg)?;
            if tok.next().is_some() {
                return Err(bad(format!("round {i}: trailing tokens")));
            }
            rounds.push(WeakClassifier {
                feature: RectFeature { positive, negative },
                threshold,
                polarity,
                alpha,
            });
        }
        if rounds.len() != n {
            return Err(bad(format!("expected {n} rounds, found {}", rounds.len())));
        }
        Ok(StrongClassifier { rounds })
    }
}

/// Adds `sign *` (rectangle sum anchored at each x of row `y`) into `feat`.
fn accumulate_rect_row(ii: &IntegralImage, r: &RectSpec, y: usize, sign: f64, feat: &mut [f64]) {
    let w = ii.width() as i64;
    let h = ii.height() as i64;
    if r.x0 >= r.x1 || r.y0 >= r.y1 {
        return;
    }
    let y0 = (y as i64 + r.y0 as i64).clamp(0, h) as usize;
    let y1 = (y as i64 + r.y1 as i64).clamp(0, h) as usize;
    if y0 >= y1 {
        return;
    }
    let x0 = r.x0 as i64;
    let x1 = r.x1 as i64;
    let lo = (-x0).clamp(0, w) as usize;
    let hi = (w - x1 + 1).clamp(0, w) as usize;
    let hi = hi.max(lo);

    let scalar = |x: usize, feat: &mut [f64]| {
        feat[x] += sign
            * ii.rect_sum_clamped(
                x as i64 + x0,
                y as i64 + r.y0 as i64,
                x as i64 + x1,
                y as i64 + r.y1 as i64,
            );
    };
    for x in 0..lo {
        scalar(x, feat);
    }
    for x in hi..w as usize {
        scalar(x, feat);
    }
    if lo < hi {
        let row0 = ii.padded_row(y0);
        let row1 = ii.padded_row(y1);
        let n = hi - lo;
        let a0 = (lo as i64 + x0) as usize;
        let a1 = (lo as i64 + x1) as usize;
        let r1p = &row1[a1..a1 + n];
        let r1m = &row1[a0..a0 + n];
        let r0p = &row0[a1..a1 + n];
        let r0m = &row0[a0..a0 + n];
        let dst = &mut feat[lo..hi];
        for i in 0..n {
            dst[i] += sign * (r1p[i] - r1m[i] - r0p[i] + r0m[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Labeled pixels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLabel {
    Foreground,
    Background,
}

impl fmt::Display for PixelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PixelLabel::Foreground => write!(f, "foreground"),
            PixelLabel::Background => write!(f, "background"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPixel {
    pub frame: usize,
    pub x: u32,
    pub y: u32,
    pub label: PixelLabel,
}

/// Training set of pixel labels, possibly spanning several frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPixelSet {
    pub pixels: Vec<LabeledPixel>,
}

impl LabeledPixelSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let fg = self
            .pixels
            .iter()
            .filter(|p| p.label == PixelLabel::Foreground)
            .count();
        (fg, self.pixels.len() - fg)
    }

    pub fn merge(&mut self, other: LabeledPixelSet) {
        self.pixels.extend(other.pixels);
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("frame,x,y,label\n");
        for p in &self.pixels {
            out.push_str(&format!("{},{},{},{}\n", p.frame, p.x, p.y, p.label));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pixels = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (idx == 0 && line == "frame,x,y,label") {
                continue;
            }
            let bad = || Error::parse("label CSV", format!("line {}: `{line}`", idx + 1));
            let mut parts = line.split(',');
            let frame = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let x = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let y = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let label = match parts.next().ok_or_else(bad)? {
                "foreground" => PixelLabel::Foreground,
                "background" => PixelLabel::Background,
                _ => return Err(bad()),
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            pixels.push(LabeledPixel { frame, x, y, label });
        }
        Ok(LabeledPixelSet { pixels })
    }
}

/// Label geometry around marked car centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelingConfig {
    /// Pixels within this distance of a centre are foreground.
    pub fg_radius: f64,
    /// Pixels within this distance (but outside `fg_radius`) are excluded:
    /// close enough to a car that their class is ambiguous.
    pub bg_exclusion_radius: f64,
    /// Background is subsampled so foreground makes up this fraction of the
    /// final set.
    pub fg_fraction: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            fg_radius: 6.0,
            bg_exclusion_radius: 20.0,
            fg_fraction: 0.15,
        }
    }
}

/// Builds the labeled pixel set for one frame from its marked car centres.
///
/// Foreground pixels are kept in raster order; eligible background pixels
/// are subsampled without replacement (seeded, so the set is reproducible)
/// and also emitted in raster order.
pub fn build_labels(
    frame: usize,
    centres: &[(f64, f64)],
    width: usize,
    height: usize,
    cfg: &LabelingConfig,
    seed: u64,
) -> Result<LabeledPixelSet> {
    use rand::SeedableRng;

    if centres.is_empty() {
        return Err(Error::NoCarCentres);
    }
    if !(cfg.fg_fraction > 0.0 && cfg.fg_fraction < 1.0) {
        return Err(Error::config("fg_fraction", "must lie strictly between 0 and 1"));
    }
    if cfg.fg_radius <= 0.0 || cfg.bg_exclusion_radius < cfg.fg_radius {
        return Err(Error::config(
            "fg_radius/bg_exclusion_radius",
            "radii must be positive with fg_radius <= bg_exclusion_radius",
        ));
    }
    for &(cx, cy) in centres {
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            return Err(Error::CentreOutOfBounds {
                x: cx,
                y: cy,
                width,
                height,
            });
        }
    }

    let mut foreground = vec![false; width * height];
    let mut excluded = vec![false; width * height];
    for &(cx, cy) in centres {
        let r = cfg.bg_exclusion_radius;
        let x_lo = ((cx - r).floor().max(0.0)) as usize;
        let x_hi = ((cx + r).ceil().min(width as f64 - 1.0)) as usize;
        let y_lo = ((cy - r).floor().max(0.0)) as usize;
        let y_hi = ((cy + r).ceil().min(height as f64 - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                if d <= cfg.fg_radius {
                    foreground[y * width + x] = true;
                } else if d <= cfg.bg_exclusion_radius {
                    excluded[y * width + x] = true;
                }
            }
        }
    }

    let mut pixels = Vec::new();
    let mut eligible = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if foreground[i] {
                pixels.push(LabeledPixel {
                    frame,
                    x: x as u32,
                    y: y as u32,
                    label: PixelLabel::Foreground,
                });
            } else if !excluded[i] {
                eligible.push((x as u32, y as u32));
            }
        }
    }
    let fg_count = pixels.len();

    let desired = ((fg_count as f64) * (1.0 - cfg.fg_fraction) / cfg.fg_fraction).round() as usize;
    let take = desired.min(eligible.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), take);
    let mut keep = vec![false; eligible.len()];
    for i in chosen {
        keep[i] = true;
    }
    for (i, &(x, y)) in eligible.iter().enumerate() {
        if keep[i] {
            pixels.push(LabeledPixel {
                frame,
                x,
                y,
                label: PixelLabel::Background,
            });
        }
    }
    Ok(LabeledPixelSet { pixels })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Fresh candidate features drawn per round.
    pub pool: usize,
    pub feature: FeatureDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 200,
            pool: 250,
            feature: FeatureDistribution::default(),
        }
    }
}

/// Per-round training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    /// Weighted error of the selected stump, in `[0, 0.5)`.
    pub weighted_error: f64,
    pub alpha: f64,
    /// Exponential loss of the boosted ensemble over the training set after
    /// this round.
    pub exponential_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub classifier: StrongClassifier,
    pub stats: Vec<RoundStats>,
}

struct Sample {
    image: u32,
    x: u32,
    y: u32,
    /// +1 foreground, -1 background.
    target: f64,
}

/// Floor applied to the weighted error before computing alpha, which caps
/// the vote weight of a perfectly separating stump.
const MIN_WEIGHTED_ERROR: f64 = 1e-12;

/// Trains a strong classifier with discrete AdaBoost.
///
/// Each round draws `pool` fresh candidate features from the sampling
/// distribution, picks the candidate/threshold/polarity with the lowest
/// weighted error (ties broken toward the earlier candidate and lower
/// threshold), and stops early if even the best candidate is no better
/// than chance. Identical inputs and RNG state reproduce the model
/// bit-for-bit.
pub fn train<R: Rng + ?Sized>(
    labels: &LabeledPixelSet,
    images: &[(usize, IntegralImage)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutput> {
    let (fg, bg) = labels.class_counts();
    if fg == 0 || bg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if cfg.rounds == 0 || cfg.pool == 0 {
        return Err(Error::config("rounds/pool", "must be positive"));
    }

    let frame_to_image: BTreeMap<usize, usize> = images
        .iter()
        .enumerate()
        .map(|(i, (frame, _))| (*frame, i))
        .collect();
    let mut samples = Vec::with_capacity(labels.len());
    for p in &labels.pixels {
        let image = *frame_to_image
            .get(&p.frame)
            .ok_or(Error::MissingFrameImage { frame: p.frame })?;
        let (w, h) = (images[image].1.width(), images[image].1.height());
        if p.x as usize >= w || p.y as usize >= h {
            return Err(Error::CentreOutOfBounds {
                x: p.x as f64,
                y: p.y as f64,
                width: w,
                height: h,
            });
        }
        samples.push(Sample {
            image: image as u32,
            x: p.x,
            y: p.y,
            target: match p.label {
                PixelLabel::Foreground => 1.0,
                PixelLabel::Background => -1.0,
            },
        });
    }

    let n = samples.len();
    let mut weights = vec![1.0 / n as f64; n];
    let mut margins = vec![0.0f64; n];
    let mut values = vec![0.0f64; n];
    let mut order: Vec<u32> = Vec::with_capacity(n);
    let mut rounds = Vec::new();
    let mut stats = Vec::new();

    for _ in 0..cfg.rounds {
        let candidates: Vec<RectFeature> = (0..cfg.pool)
            .map(|_| sample_feature(rng, &cfg.feature))
            .collect();

        let mut best: Option<(f64, usize, f64, i8)> = None;
        for (ci, feature) in candidates.iter().enumerate() {
            evaluate_feature(feature, &samples, images, &mut values);
            let (err, threshold, polarity) = best_stump(&values, &weights, &samples, &mut order);
            if best.as_ref().map_or(true, |b| err < b.0) {
                best = Some((err, ci, threshold, polarity));
            }
        }
        let (err, ci, threshold, polarity) = best.expect("pool is non-empty");
        if err >= 0.5 {
            break;
        }

        let alpha = 0.5 * ((1.0 - err) / err.max(MIN_WEIGHTED_ERROR)).ln();
        let feature = candidates[ci].clone();
        evaluate_feature(&feature, &samples, images, &mut values);
        let mut total = 0.0;
        for i in 0..n {
            let h = if values[i] > threshold {
                polarity
            } else {
                -polarity
            } as f64;
            margins[i] += alpha * h;
            weights[i] *= (-alpha * samples[i].target * h).exp();
            total += weights[i];
        }
        for w in &mut weights {
            *w /= total;
        }
        let exponential_loss = samples
            .iter()
            .zip(&margins)
            .map(|(s, m)| (-s.target * m).exp())
            .sum();

        rounds.push(WeakClassifier {
            feature,
            threshold,
            polarity,
            alpha,
        });
        stats.push(RoundStats {
            weighted_error: err,
            alpha,
            exponential_loss,
        });
    }

    Ok(TrainOutput {
        classifier: StrongClassifier { rounds },
        stats,
    })
}

fn evaluate_feature(
    feature: &RectFeature,
    samples: &[Sample],
    images: &[(usize, IntegralImage)],
    values: &mut [f64],
) {
    for (v, s) in values.iter_mut().zip(samples) {
        *v = feature.evaluate(&images[s.image as usize].1, s.x as usize, s.y as usize);
    }
}

/// Optimal threshold and polarity for one feature under the current sample
/// weights, by sweeping thresholds between consecutive distinct sorted
/// values (plus one below the minimum and one above the maximum).
fn best_stump(
    values: &[f64],
    weights: &[f64],
    samples: &[Sample],
    order: &mut Vec<u32>,
) -> (f64, f64, i8) {
    let n = values.len();
    order.clear();
    order.extend(0..n as u32);
    order.sort_unstable_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));

    let weight_of_negatives: f64 = samples
        .iter()
        .zip(weights)
        .filter(|(s, _)| s.target < 0.0)
        .map(|(_, w)| *w)
        .sum();

    fn consider(err: f64, thr: f64, pol: i8, best: &mut (f64, f64, i8)) {
        if err < best.0 {
            *best = (err, thr, pol);
        }
    }
    let mut best = (f64::INFINITY, 0.0, 1i8);

    // Threshold below every value: everything classified as `polarity`.
    let v_min = values[order[0] as usize];
    consider(weight_of_negatives, v_min - 1.0, 1, &mut best);
    consider(1.0 - weight_of_negatives, v_min - 1.0, -1, &mut best);

    // `running` is the error of (polarity +1) as the threshold moves above
    // each sorted value in turn.
    let mut running = weight_of_negatives;
    for k in 0..n {
        let i = order[k] as usize;
        running += if samples[i].target > 0.0 {
            weights[i]
        } else {
            -weights[i]
        };
        let at_end = k + 1 == n;
        let boundary = at_end || values[order[k + 1] as usize] > values[i];
        if boundary {
            let thr = if at_end {
                values[i] + 1.0
            } else {
                0.5 * (values[i] + values[order[k + 1] as usize])
            };
            consider(running, thr, 1, &mut best);
            consider(1.0 - running, thr, -1, &mut best);
        }
    }
    (best.0.clamp(0.0, 1.0), best.1, best.2)
}
