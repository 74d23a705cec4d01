//! Segmentation of the classifier response into oriented detections.
//!
//! The blurred response is segmented by growing regions outward from its
//! local maxima: every iteration, each labeled pixel offers its label to
//! its four neighbours, and an unlabeled neighbour above the response
//! threshold takes the first offer. Growth stops when an iteration changes
//! nothing. Each surviving region is summarized by its pixel count, mean
//! response, centroid and principal-axis orientation.

use std::fs;
use std::path::Path;

use crate::classify::StrongClassifier;
use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, LabelMap, Raster, RasterImage};

/// One segmented region in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    /// Centroid of the region's pixel centres.
    pub centre: (f64, f64),
    /// Principal axis of the region in radians, folded into `[0, pi)`.
    /// Zero (with `degenerate` set) when the axis is ill-defined.
    pub orientation: f64,
    pub pixel_count: usize,
    pub mean_response: f64,
    /// Set when the second-moment eigenvalues nearly coincide, so the
    /// orientation carries no information. Not persisted to CSV.
    pub degenerate: bool,
}

/// Result of region growing: per-pixel labels (0 = unassigned, region k
/// carries label k+1) plus the number of seeded regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: LabelMap,
    pub region_count: usize,
}

/// Pixels strictly greater than the threshold and strictly greater than
/// each of their (in-bounds) 8 neighbours, in raster order.
pub fn find_local_maxima(response: &RasterImage, threshold: f64) -> Vec<(usize, usize)> {
    let (w, h) = response.dims();
    let mut maxima = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = response.get(x, y);
            if !(v > threshold) {
                continue;
            }
            let mut is_max = true;
            'search: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if response.in_bounds(nx, ny)
                        && response.get(nx as usize, ny as usize) >= v
                    {
                        is_max = false;
                        break 'search;
                    }
                }
            }
            if is_max {
                maxima.push((x, y));
            }
        }
    }
    maxima
}

/// Grows labeled regions from `seeds` over pixels whose response exceeds
/// `threshold`.
///
/// Spreading is synchronous: each iteration reads the previous label map
/// and writes the next, visiting source pixels in raster order and their
/// neighbours in the fixed order right, left, down, up; a pixel keeps the
/// first label written to it. Seeds must be distinct, in bounds and above
/// the threshold.
pub fn region_grow(
    response: &RasterImage,
    seeds: &[(usize, usize)],
    threshold: f64,
) -> Result<SegmentationMap> {
    let (w, h) = response.dims();
    let mut labels = vec![0u32; w * h];
    for (k, &(x, y)) in seeds.iter().enumerate() {
        if x >= w || y >= h {
            return Err(Error::SeedOutOfBounds {
                x,
                y,
                width: w,
                height: h,
            });
        }
        let value = response.get(x, y);
        if !(value > threshold) {
            return Err(Error::SeedBelowThreshold {
                x,
                y,
                value,
                threshold,
            });
        }
        let i = y * w + x;
        if labels[i] != 0 {
            return Err(Error::DuplicateSeed { x, y });
        }
        labels[i] = k as u32 + 1;
    }

    let data = response.as_slice();
    let mut prev = labels;
    loop {
        let mut next = prev.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let label = prev[y * w + x];
                if label == 0 {
                    continue;
                }
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if next[j] == 0 && data[j] > threshold {
                        next[j] = label;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return Ok(SegmentationMap {
                labels: Raster::from_vec(w, h, next)?,
                region_count: seeds.len(),
            });
        }
        prev = next;
    }
}

/// Summarizes regions of at least `min_pixels` pixels into detections, in
/// region-label order. `response` supplies the per-region mean response and
/// must share the segmentation's shape.
pub fn extract_detections(
    seg: &SegmentationMap,
    response: &RasterImage,
    frame: usize,
    min_pixels: usize,
) -> Result<Vec<Detection>> {
    let (w, h) = seg.labels.dims();
    if (w, h) != response.dims() {
        return Err(Error::DimensionMismatch {
            left_width: w,
            left_height: h,
            right_width: response.width(),
            right_height: response.height(),
        });
    }

    let k = seg.region_count;
    let mut count = vec![0usize; k];
    let mut sum_x = vec![0.0f64; k];
    let mut sum_y = vec![0.0f64; k];
    let mut sum_r = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let label = seg.labels.get(x, y);
            if label == 0 {
                continue;
            }
            let r = (label - 1) as usize;
            count[r] += 1;
            sum_x[r] += x as f64;
            sum_y[r] += y as f64;
            sum_r[r] += response.get(x, y);
        }
    }

    // Second pass accumulates second moments about each region's mean,
    // which avoids the cancellation of the raw-moment formula.
    let mean: Vec<(f64, f64)> = (0..k)
        .map(|r| {
            if count[r] == 0 {
                (0.0, 0.0)
            } else {
                (sum_x[r] / count[r] as f64, sum_y[r] / count[r] as f64)
            }
        })
        .collect();
    let mut cov_xx = vec![0.0f64; k];
    let mut cov_yy = vec![0.0f64; k];
    let mut cov_xy = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let label = seg.labels.get(x, y);
            if label == 0 {
                continue;
            }
            let r = (label - 1) as usize;
            let dx = x as f64 - mean[r].0;
            let dy = y as f64 - mean[r].1;
            cov_xx[r] += dx * dx;
            cov_yy[r] += dy * dy;
            cov_xy[r] += dx * dy;
        }
    }

    let mut detections = Vec::new();
    for r in 0..k {
        if count[r] < min_pixels.max(1) {
            continue;
        }
        let n = count[r] as f64;
        let cxx = cov_xx[r] / n;
        let cyy = cov_yy[r] / n;
        let cxy = cov_xy[r] / n;
        // Eigenvalue gap of the symmetric 2x2 covariance.
        let gap = (cxx - cyy).hypot(2.0 * cxy);
        let (orientation, degenerate) = if gap < 1e-9 {
            (0.0, true)
        } else {
            let mut theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            (theta, false)
        };
        detections.push(Detection {
            frame,
            centre: mean[r],
            orientation,
            pixel_count: count[r],
            mean_response: sum_r[r] / n,
            degenerate,
        });
    }
    Ok(detections)
}

/// Detector parameters applied to each frame's response image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub blur_sigma: f64,
    /// Growth/seed threshold on the blurred response.
    pub threshold: f64,
    /// Regions with fewer pixels are discarded.
    pub min_pixels: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            blur_sigma: 3.0,
            threshold: 0.0,
            min_pixels: 10,
        }
    }
}

/// Full single-frame detector: response, blur, maxima, growth, extraction.
pub fn detect_frame(
    classifier: &StrongClassifier,
    img: &RasterImage,
    frame: usize,
    opts: &DetectOptions,
) -> Result<Vec<Detection>> {
    let blurred = gaussian_blur(&classifier.respond(img), opts.blur_sigma);
    let seeds = find_local_maxima(&blurred, opts.threshold);
    let seg = region_grow(&blurred, &seeds, opts.threshold)?;
    extract_detections(&seg, &blurred, frame, opts.min_pixels)
}

pub fn save_detections_csv(detections: &[Detection], path: &Path) -> Result<()> {
    let mut out = String::from("frame,x,y,theta,pixels,mean_response\n");
    for d in detections {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.frame, d.centre.0, d.centre.1, d.orientation, d.pixel_count, d.mean_response
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path)?;
    let mut detections = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame,")) {
            continue;
        }
        let bad = || Error::parse("detection CSV", format!("line {}: `{line}`", idx + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad());
        }
        detections.push(Detection {
            frame: fields[0].parse().map_err(|_| bad())?,
            centre: (
                fields[1].parse().map_err(|_| bad())?,
                fields[2].parse().map_err(|_| bad())?,
            ),
            orientation: fields[3].parse().map_err(|_| bad())?,
            pixel_count: fields[4].parse().map_err(|_| bad())?,
            mean_response: fields[5].parse().map_err(|_| bad())?,
            degenerate: false,
        });
    }
    Ok(detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h)
            .map(|_| rng.gen_range(0u32..=256) as f64 / 256.0)
            .collect();
        Raster::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn local_maxima_are_strict_and_above_threshold() {
        let mut img = RasterImage::new(7, 5).unwrap();
        img.set(2, 2, 0.9);
        img.set(5, 1, 0.6);
        // A two-pixel plateau: neither side is strictly greater.
        img.set(0, 4, 0.8);
        img.set(1, 4, 0.8);
        assert_eq!(find_local_maxima(&img, 0.5), vec![(5, 1), (2, 2)]);
        // Raising the threshold drops the weaker maximum.
        assert_eq!(find_local_maxima(&img, 0.7), vec![(2, 2)]);
        // Values equal to the threshold do not qualify.
        assert_eq!(find_local_maxima(&img, 0.9), vec![]);
    }

    #[test]
    fn border_pixels_can_be_maxima() {
        let mut img = RasterImage::new(4, 4).unwrap();
        img.set(0, 0, 1.0);
        assert_eq!(find_local_maxima(&img, 0.5), vec![(0, 0)]);
    }

    /// Independent formulation of the same growth process: instead of
    /// sources offering labels, each unlabeled pixel above the threshold
    /// adopts the label of its lowest-raster-index occupied neighbour.
    fn region_grow_reference(
        response: &RasterImage,
        seeds: &[(usize, usize)],
        threshold: f64,
    ) -> LabelMap {
        let (w, h) = response.dims();
        let mut current = vec![0u32; w * h];
        for (k, &(x, y)) in seeds.iter().enumerate() {
            current[y * w + x] = k as u32 + 1;
        }
        loop {
            let mut next = current.clone();
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if current[i] != 0 || !(response.get(x, y) > threshold) {
                        continue;
                    }
                    // Neighbours in increasing raster-index order.
                    let neighbours = [
                        (x as i64, y as i64 - 1),
                        (x as i64 - 1, y as i64),
                        (x as i64 + 1, y as i64),
                        (x as i64, y as i64 + 1),
                    ];
                    for (nx, ny) in neighbours {
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let label = current[ny as usize * w + nx as usize];
                        if label != 0 {
                            next[i] = label;
                            changed = true;
                            break;
                        }
                    }
                }
            }
            if !changed {
                return Raster::from_vec(w, h, next).unwrap();
            }
            current = next;
        }
    }

    #[test]
    fn region_grow_matches_the_adoption_formulation() {
        for seed in 0..30u64 {
            let img = gaussian_blur(&noise_image(64, 64, seed), 1.2);
            let threshold = 0.5;
            let seeds = find_local_maxima(&img, 0.52);
            if seeds.is_empty() {
                continue;
            }
            let grown = region_grow(&img, &seeds, threshold).unwrap();
            let reference = region_grow_reference(&img, &seeds, threshold);
            assert_eq!(grown.labels, reference, "divergence on image {seed}");
            assert_eq!(grown.region_count, seeds.len());
        }
    }

    #[test]
    fn single_region_fills_its_connected_component() {
        let img = gaussian_blur(&noise_image(48, 48, 3), 1.5);
        let threshold = 0.5;
        let seeds = find_local_maxima(&img, 0.52);
        assert!(!seeds.is_empty());
        let seed = seeds[0];
        let grown = region_grow(&img, &[seed], threshold).unwrap();

        // Breadth-first component of `response > threshold` around the seed.
        let (w, h) = img.dims();
        let mut member = vec![false; w * h];
        let mut queue = std::collections::VecDeque::new();
        member[seed.1 * w + seed.0] = true;
        queue.push_back(seed);
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !member[j] && img.get(nx as usize, ny as usize) > threshold {
                    member[j] = true;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let expected = if member[y * w + x] { 1 } else { 0 };
                assert_eq!(grown.labels.get(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn region_grow_validates_seeds() {
        let img = noise_image(16, 16, 5);
        assert!(matches!(
            region_grow(&img, &[(16, 2)], 0.0),
            Err(Error::SeedOutOfBounds { .. })
        ));
        assert!(matches!(
            region_grow(&img, &[(3, 3)], 2.0),
            Err(Error::SeedBelowThreshold { .. })
        ));
        let mut flat = RasterImage::new(8, 8).unwrap();
        flat.set(2, 2, 1.0);
        assert!(matches!(
            region_grow(&flat, &[(2, 2), (2, 2)], 0.5),
            Err(Error::DuplicateSeed { .. })
        ));
    }

    /// Segmentation with a single region over the given pixels.
    fn seg_of_pixels(w: usize, h: usize, pixels: &[(usize, usize)]) -> SegmentationMap {
        let mut labels = LabelMap::new(w, h).unwrap();
        for &(x, y) in pixels {
            labels.set(x, y, 1);
        }
        SegmentationMap {
            labels,
            region_count: 1,
        }
    }

    /// Principal axis by explicit eigenvector computation.
    fn principal_axis_reference(pixels: &[(usize, usize)]) -> (f64, f64) {
        let n = pixels.len() as f64;
        let mx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let my = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for &(x, y) in pixels {
            let dx = x as f64 - mx;
            let dy = y as f64 - my;
            a += dx * dx;
            b += dx * dy;
            c += dy * dy;
        }
        a /= n;
        b /= n;
        c /= n;
        let lambda = 0.5 * (a + c) + 0.5 * (a - c).hypot(2.0 * b);
        // Eigenvector of the larger eigenvalue.
        let (vx, vy) = if b.abs() > 1e-15 {
            (b, lambda - a)
        } else if a >= c {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let mut theta = vy.atan2(vx);
        if theta < 0.0 {
            theta += std::f64::consts::PI;
        }
        if theta >= std::f64::consts::PI {
            theta -= std::f64::consts::PI;
        }
        let gap = (a - c).hypot(2.0 * b);
        (theta, gap)
    }

    #[test]
    fn orientation_matches_eigenvector_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let response = RasterImage::from_vec(40, 40, vec![1.0; 1600]).unwrap();
        for trial in 0..50 {
            let mut pixels = std::collections::BTreeSet::new();
            while pixels.len() < 25 {
                pixels.insert((rng.gen_range(0..40usize), rng.gen_range(0..40usize)));
            }
            let pixels: Vec<_> = pixels.into_iter().collect();
            let (expected, gap) = principal_axis_reference(&pixels);
            if gap < 1e-6 {
                continue;
            }
            let seg = seg_of_pixels(40, 40, &pixels);
            let dets = extract_detections(&seg, &response, 0, 1).unwrap();
            assert_eq!(dets.len(), 1);
            let mut diff = (dets[0].orientation - expected).abs();
            diff = diff.min(std::f64::consts::PI - diff);
            assert!(diff < 1e-9, "trial {trial}: {} vs {expected}", dets[0].orientation);
            assert!(!dets[0].degenerate);
        }
    }

    #[test]
    fn symmetric_region_is_degenerate() {
        let square: Vec<_> = (10..14)
            .flat_map(|y| (20..24).map(move |x| (x, y)))
            .collect();
        let response = RasterImage::from_vec(40, 40, vec![0.5; 1600]).unwrap();
        let seg = seg_of_pixels(40, 40, &square);
        let dets = extract_detections(&seg, &response, 7, 1).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(dets[0].degenerate);
        assert_eq!(dets[0].orientation, 0.0);
        assert_eq!(dets[0].frame, 7);
        assert_eq!(dets[0].centre, (21.5, 11.5));
        assert_eq!(dets[0].pixel_count, 16);
        assert_eq!(dets[0].mean_response, 0.5);
    }

    #[test]
    fn small_regions_are_discarded() {
        // Two horizontal strips: 9 pixels and 10 pixels.
        let mut labels = LabelMap::new(30, 10).unwrap();
        for x in 0..9 {
            labels.set(x, 2, 1);
        }
        for x in 0..10 {
            labels.set(x, 6, 2);
        }
        let seg = SegmentationMap {
            labels,
            region_count: 2,
        };
        let response = RasterImage::from_vec(30, 10, vec![1.0; 300]).unwrap();
        let dets = extract_detections(&seg, &response, 0, 10).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].pixel_count, 10);
        assert_eq!(dets[0].centre, (4.5, 6.0));
        // The strip's axis is horizontal.
        assert_eq!(dets[0].orientation, 0.0);
        assert!(!dets[0].degenerate);
    }

    #[test]
    fn oriented_bar_recovers_its_angle() {
        // Rasterize a 16x8 bar at 25 degrees and check the recovered axis.
        let angle = 25f64.to_radians();
        let (cx, cy) = (20.3, 19.6);
        let mut pixels = Vec::new();
        for y in 0..40usize {
            for x in 0..40usize {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let along = dx * angle.cos() + dy * angle.sin();
                let across = -dx * angle.sin() + dy * angle.cos();
                if along.abs() <= 8.0 && across.abs() <= 4.0 {
                    pixels.push((x, y));
                }
            }
        }
        let response = RasterImage::from_vec(40, 40, vec![1.0; 1600]).unwrap();
        let seg = seg_of_pixels(40, 40, &pixels);
        let dets = extract_detections(&seg, &response, 0, 10).unwrap();
        assert_eq!(dets.len(), 1);
        let diff_deg = (dets[0].orientation - angle).abs().to_degrees();
        assert!(diff_deg < 2.0, "axis off by {diff_deg} degrees");
        assert!((dets[0].centre.0 - cx).abs() < 0.5);
        assert!((dets[0].centre.1 - cy).abs() < 0.5);
    }

    #[test]
    fn detections_csv_roundtrip_is_exact() {
        let dets = vec![
            Detection {
                frame: 3,
                centre: (12.625, 47.25),
                orientation: 1.2345678901234567,
                pixel_count: 42,
                mean_response: 3.0625,
                degenerate: false,
            },
            Detection {
                frame: 4,
                centre: (0.1, 99.9),
                orientation: 0.0,
                pixel_count: 10,
                mean_response: -0.5,
                degenerate: false,
            },
        ];
        let dir = std::env::temp_dir().join("velofield-det-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("detections.csv");
        save_detections_csv(&dets, &path).unwrap();
        let back = load_detections_csv(&path).unwrap();
        assert_eq!(back, dets);
        std::fs::remove_dir_all(&dir).ok();
    }
}
