//! Frame-to-frame association of detections and three-frame tracklets.
//!
//! Candidate pairs between consecutive frames pass kinematic gates
//! (displacement, axis rotation, travel direction relative to the car's
//! axis), are scored by a symmetric sum-of-absolute-differences over an
//! oriented patch, and survive only as mutual best matches. Two chained
//! matches make a tracklet; a final filter drops tracklets whose implied
//! acceleration is physically implausible.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Difference between two axes (angles defined modulo pi), folded into
/// `[0, pi/2]`. Also measures a direction vector against an axis, since a
/// car may point either way along its orientation axis.
pub fn axis_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    if d > FRAC_PI_2 {
        PI - d
    } else {
        d
    }
}

/// Axis halfway between two axes (modulo pi).
pub fn mean_axis(a: f64, b: f64) -> f64 {
    let mut d = (b - a).rem_euclid(PI);
    if d > FRAC_PI_2 {
        d -= PI;
    }
    (a + 0.5 * d).rem_euclid(PI)
}

/// Which orientation axis anchors the travel-direction gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DirectionReference {
    /// The detection's axis in the earlier frame.
    #[default]
    FrameN,
    /// The detection's axis in the later frame.
    FrameNPlus1,
    /// Mean of the two axes.
    MeanAxis,
}

/// Kinematic gates for pairing detections one frame apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gates {
    /// Maximum centre displacement between consecutive frames, pixels.
    pub max_displacement: f64,
    /// Maximum change of the orientation axis, radians in `[0, pi/2]`.
    pub max_rotation: f64,
    /// Maximum angle between the displacement vector and the reference
    /// axis, radians in `[0, pi/2]`.
    pub max_direction_offset: f64,
    /// Apparent speeds at or below this (pixels per second) skip the
    /// direction gate: jitter on a stopped car points anywhere.
    pub low_speed_exemption: f64,
    /// Maximum change of the per-frame velocity vector across a tracklet,
    /// pixels per frame squared.
    pub max_acceleration: f64,
    pub direction_reference: DirectionReference,
}

impl Default for Gates {
    fn default() -> Self {
        Gates {
            max_displacement: 30.0,
            max_rotation: 30f64.to_radians(),
            max_direction_offset: 30f64.to_radians(),
            low_speed_exemption: 5.0,
            max_acceleration: 4.0,
            direction_reference: DirectionReference::FrameN,
        }
    }
}

impl Gates {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_displacement", self.max_displacement),
            ("max_rotation", self.max_rotation),
            ("max_direction_offset", self.max_direction_offset),
            ("max_acceleration", self.max_acceleration),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        if self.low_speed_exemption < 0.0 || !self.low_speed_exemption.is_finite() {
            return Err(Error::config("low_speed_exemption", "must be non-negative"));
        }
        if self.max_rotation > FRAC_PI_2 || self.max_direction_offset > FRAC_PI_2 {
            return Err(Error::config(
                "max_rotation/max_direction_offset",
                "angles compare against a fold into [0, pi/2]",
            ));
        }
        Ok(())
    }
}

/// Index pairs `(i into a, j into b)` that pass every gate, in
/// lexicographic order. `frame_rate` converts displacement per frame into
/// the apparent speed checked against the low-speed exemption.
pub fn gate_pairs(
    a: &[Detection],
    b: &[Detection],
    gates: &Gates,
    frame_rate: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let dx = db.centre.0 - da.centre.0;
            let dy = db.centre.1 - da.centre.1;
            let displacement = dx.hypot(dy);
            if displacement > gates.max_displacement {
                continue;
            }
            if axis_difference(da.orientation, db.orientation) > gates.max_rotation {
                continue;
            }
            let speed = displacement * frame_rate;
            if speed > gates.low_speed_exemption {
                let axis = match gates.direction_reference {
                    DirectionReference::FrameN => da.orientation,
                    DirectionReference::FrameNPlus1 => db.orientation,
                    DirectionReference::MeanAxis => mean_axis(da.orientation, db.orientation),
                };
                if axis_difference(dy.atan2(dx), axis) > gates.max_direction_offset {
                    continue;
                }
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// Appearance patch: `across` samples perpendicular to the orientation
/// axis by `along` samples parallel to it, at unit spacing centred on the
/// detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub across: usize,
    pub along: usize,
}

impl Default for PatchShape {
    fn default() -> Self {
        PatchShape {
            across: 8,
            along: 16,
        }
    }
}

fn sample_patch(
    img: &RasterImage,
    det: &Detection,
    patch: &PatchShape,
) -> Option<Vec<f64>> {
    let (w, h) = img.dims();
    let (sin, cos) = det.orientation.sin_cos();
    let (cx, cy) = det.centre;
    let u_mid = (patch.across as f64 - 1.0) / 2.0;
    let v_mid = (patch.along as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(patch.across * patch.along);
    for k in 0..patch.across {
        let u = k as f64 - u_mid;
        for l in 0..patch.along {
            let v = l as f64 - v_mid;
            let x = cx + v * cos - u * sin;
            let y = cy + v * sin + u * cos;
            if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                return None;
            }
            values.push(img.bilinear(x, y));
        }
    }
    Some(values)
}

/// Symmetric SAD between oriented patches around two detections.
///
/// Because orientations are only defined modulo pi, the second patch is
/// compared both as-is and rotated 180 degrees; the smaller sum wins.
/// Returns infinity when either patch leaves its image.
pub fn sad_score(
    img_a: &RasterImage,
    img_b: &RasterImage,
    det_a: &Detection,
    det_b: &Detection,
    patch: &PatchShape,
) -> f64 {
    let (Some(pa), Some(pb)) = (
        sample_patch(img_a, det_a, patch),
        sample_patch(img_b, det_b, patch),
    ) else {
        return f64::INFINITY;
    };
    let n = patch.across * patch.along;
    let mut direct = 0.0;
    let mut flipped = 0.0;
    for i in 0..n {
        direct += (pa[i] - pb[i]).abs();
        flipped += (pa[i] - pb[n - 1 - i]).abs();
    }
    direct.min(flipped)
}

/// A retained association between detection `a` in frame n and `b` in
/// frame n+1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Keeps the scored pairs that are the best for both of their endpoints.
///
/// Ties on score break toward the lower opposing index; non-finite scores
/// never match. Each detection therefore appears in at most one match.
pub fn symmetric_match(n_a: usize, n_b: usize, scored: &[(usize, usize, f64)]) -> Vec<Match> {
    let mut best_a: Vec<Option<usize>> = vec![None; n_a];
    let mut best_b: Vec<Option<usize>> = vec![None; n_b];
    for (p, &(i, j, score)) in scored.iter().enumerate() {
        assert!(i < n_a && j < n_b, "pair ({i},{j}) outside detection lists");
        if !score.is_finite() {
            continue;
        }
        let better = |incumbent: Option<usize>, key: (f64, usize)| match incumbent {
            None => true,
            Some(q) => {
                let (qi, qj, qs) = scored[q];
                let _ = qi;
                key < (qs, qj)
            }
        };
        // For the a-side the tie-break index is the opposing b index, and
        // vice versa, so the two comparisons use different keys.
        if better(best_a[i], (score, j)) {
            best_a[i] = Some(p);
        }
        let better_b = match best_b[j] {
            None => true,
            Some(q) => {
                let (qi, _, qs) = scored[q];
                (score, i) < (qs, qi)
            }
        };
        if better_b {
            best_b[j] = Some(p);
        }
    }
    scored
        .iter()
        .enumerate()
        .filter(|&(p, &(i, j, _))| best_a[i] == Some(p) && best_b[j] == Some(p))
        .map(|(_, &(i, j, score))| Match { a: i, b: j, score })
        .collect()
}

/// Gate, score and symmetrically match two consecutive frames.
pub fn match_frames(
    img_a: &RasterImage,
    img_b: &RasterImage,
    dets_a: &[Detection],
    dets_b: &[Detection],
    gates: &Gates,
    frame_rate: f64,
    patch: &PatchShape,
) -> Vec<Match> {
    let pairs = gate_pairs(dets_a, dets_b, gates, frame_rate);
    let scored: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(i, j)| {
            (
                i,
                j,
                sad_score(img_a, img_b, &dets_a[i], &dets_b[j], patch),
            )
        })
        .collect();
    symmetric_match(dets_a.len(), dets_b.len(), &scored)
}

/// Three matched detections in consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tracklet {
    /// Frame index of the first detection.
    pub start_frame: usize,
    pub centres: [(f64, f64); 3],
}

impl Tracklet {
    /// The two per-frame velocity vectors, pixels per frame.
    pub fn velocities(&self) -> ((f64, f64), (f64, f64)) {
        let [c0, c1, c2] = self.centres;
        ((c1.0 - c0.0, c1.1 - c0.1), (c2.0 - c1.0, c2.1 - c1.1))
    }
}

/// Chains matches over frames (n, n+1) and (n+1, n+2) into tracklets and
/// applies the acceleration filter: the velocity change between the two
/// segments may not exceed `gates.max_acceleration` (boundary retained).
pub fn chain_tracklets(
    first: &[Match],
    second: &[Match],
    dets0: &[Detection],
    dets1: &[Detection],
    dets2: &[Detection],
    gates: &Gates,
) -> Vec<Tracklet> {
    let mut by_middle: Vec<Option<&Match>> = vec![None; dets1.len()];
    for m in first {
        by_middle[m.b] = Some(m);
    }
    let mut tracklets = Vec::new();
    for m12 in second {
        let Some(m01) = by_middle[m12.a] else {
            continue;
        };
        let c0 = dets0[m01.a].centre;
        let c1 = dets1[m01.b].centre;
        let c2 = dets2[m12.b].centre;
        let v1 = (c1.0 - c0.0, c1.1 - c0.1);
        let v2 = (c2.0 - c1.0, c2.1 - c1.1);
        let accel = (v2.0 - v1.0).hypot(v2.1 - v1.1);
        if accel <= gates.max_acceleration {
            tracklets.push(Tracklet {
                start_frame: dets0[m01.a].frame,
                centres: [c0, c1, c2],
            });
        }
    }
    tracklets
}

pub fn save_tracklets_csv(tracklets: &[Tracklet], path: &Path) -> Result<()> {
    let mut out = String::from("frame_n,x0,y0,x1,y1,x2,y2\n");
    for t in tracklets {
        let [c0, c1, c2] = t.centres;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.start_frame, c0.0, c0.1, c1.0, c1.1, c2.0, c2.1
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tracklets_csv(path: &Path) -> Result<Vec<Tracklet>> {
    let text = fs::read_to_string(path)?;
    let mut tracklets = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame_n,")) {
            continue;
        }
        let bad = || Error::parse("tracklet CSV", format!("line {}: `{line}`", idx + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad());
        }
        let mut nums = [0.0f64; 6];
        for (n, f) in nums.iter_mut().zip(&fields[1..]) {
            *n = f.parse().map_err(|_| bad())?;
        }
        tracklets.push(Tracklet {
            start_frame: fields[0].parse().map_err(|_| bad())?,
            centres: [(nums[0], nums[1]), (nums[2], nums[3]), (nums[4], nums[5])],
        });
    }
    Ok(tracklets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, orientation_deg: f64) -> Detection {
        Detection {
            frame: 0,
            centre: (x, y),
            orientation: orientation_deg.to_radians(),
            pixel_count: 50,
            mean_response: 1.0,
            degenerate: false,
        }
    }

    #[test]
    fn axis_difference_folds_correctly() {
        let deg = |d: f64| d.to_radians();
        assert!((axis_difference(deg(10.0), deg(170.0)) - deg(20.0)).abs() < 1e-12);
        assert!((axis_difference(deg(170.0), deg(10.0)) - deg(20.0)).abs() < 1e-12);
        assert!((axis_difference(deg(0.0), deg(90.0)) - deg(90.0)).abs() < 1e-12);
        assert!(axis_difference(deg(45.0), deg(45.0)).abs() < 1e-12);
        // A vector pointing backwards along the axis has zero offset.
        assert!(axis_difference(deg(180.0 + 25.0), deg(25.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_axis_splits_the_short_way() {
        let deg = |d: f64| d.to_radians();
        assert!((mean_axis(deg(10.0), deg(30.0)) - deg(20.0)).abs() < 1e-12);
        // 170 and 10 degrees are 20 degrees apart across the fold; the mean
        // sits at 0, not at 90.
        assert!(mean_axis(deg(170.0), deg(10.0)).rem_euclid(std::f64::consts::PI) < deg(0.01));
    }

    #[test]
    fn displacement_gate_limits_travel() {
        let gates = Gates::default();
        let a = [det(100.0, 100.0, 0.0)];
        let b = [det(129.0, 100.0, 0.0), det(131.0, 100.0, 0.0)];
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0), vec![(0, 0)]);
        // Exactly 30 px passes.
        let b = [det(130.0, 100.0, 0.0)];
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0), vec![(0, 0)]);
    }

    #[test]
    fn rotation_gate_compares_axes_mod_pi() {
        let gates = Gates::default();
        let a = [det(100.0, 100.0, 10.0)];
        // 35 degrees of true rotation: rejected.
        let b = [det(110.0, 100.0, 45.0)];
        assert!(gate_pairs(&a, &b, &gates, 5.0).is_empty());
        // 170 degrees looks like -10: accepted (20 degrees of rotation),
        // and the displacement along the axis keeps the direction gate
        // happy.
        let b = [det(110.0, 100.0, 170.0)];
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0), vec![(0, 0)]);
    }

    #[test]
    fn direction_gate_and_low_speed_exemption() {
        let gates = Gates::default();
        // Car axis horizontal, but it moved straight up by 10 px: the
        // displacement is perpendicular to the axis.
        let a = [det(100.0, 100.0, 0.0)];
        let b = [det(100.0, 110.0, 0.0)];
        assert!(gate_pairs(&a, &b, &gates, 5.0).is_empty());
        // The same sideways slip of only 0.8 px at 5 frames/s is 4 px/s,
        // under the exemption: accepted as a stopped car's jitter.
        let b = [det(100.0, 100.8, 0.0)];
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0), vec![(0, 0)]);
        // At a higher frame rate the same slip is 8 px/s: gated again.
        assert!(gate_pairs(&a, &b, &gates, 10.0).is_empty());
        // Reversing along the axis is fine: direction offsets fold mod pi.
        let b = [det(90.0, 100.0, 0.0)];
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0), vec![(0, 0)]);
    }

    #[test]
    fn direction_gate_reference_axis_is_selectable() {
        let mut gates = Gates::default();
        // Axis turns from 0 to 28 degrees; displacement at 28 degrees.
        let a = [det(100.0, 100.0, 0.0)];
        let b = [det(
            100.0 + 10.0 * 28f64.to_radians().cos(),
            100.0 + 10.0 * 28f64.to_radians().sin(),
            28.0,
        )];
        gates.direction_reference = DirectionReference::FrameN;
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0).len(), 1);
        gates.direction_reference = DirectionReference::FrameNPlus1;
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0).len(), 1);
        gates.max_direction_offset = 20f64.to_radians();
        gates.direction_reference = DirectionReference::FrameN;
        assert!(gate_pairs(&a, &b, &gates, 5.0).is_empty());
        gates.direction_reference = DirectionReference::MeanAxis;
        assert_eq!(gate_pairs(&a, &b, &gates, 5.0).len(), 1);
    }

    #[test]
    fn sad_of_constant_images_is_the_level_difference() {
        let img_a = Raster::from_vec(64, 64, vec![0.5; 64 * 64]).unwrap();
        let img_b = Raster::from_vec(64, 64, vec![0.2; 64 * 64]).unwrap();
        let da = det(32.0, 32.0, 30.0);
        let db = det(30.0, 31.0, 75.0);
        let patch = PatchShape::default();
        let score = sad_score(&img_a, &img_b, &da, &db, &patch);
        let expected = 128.0 * 0.3;
        assert!(
            (score - expected).abs() < 1e-9,
            "constant SAD {score} vs {expected}"
        );
    }

    #[test]
    fn sad_near_border_is_infinite() {
        let img = Raster::from_vec(32, 32, vec![0.5; 32 * 32]).unwrap();
        let patch = PatchShape::default();
        // Patch half-length along the axis is 7.5: a centre 5 px from the
        // edge pushes samples outside.
        let da = det(5.0, 16.0, 0.0);
        let db = det(16.0, 16.0, 0.0);
        assert!(sad_score(&img, &img, &da, &db, &patch).is_infinite());
        assert!(sad_score(&img, &img, &db, &da, &patch).is_infinite());
        assert!(sad_score(&img, &img, &db, &db, &patch).is_finite());
    }

    #[test]
    fn sad_flip_handles_the_orientation_ambiguity() {
        // img_b is img_a rotated 180 degrees about (19.5, 15.5). Sampling
        // on the half-integer grid makes bilinear reads exact, so the
        // flipped comparison must be exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img_a = Raster::from_vec(
            40,
            32,
            (0..40 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut img_b = RasterImage::new(40, 32).unwrap();
        for y in 0..32 {
            for x in 0..40 {
                img_b.set(x, y, img_a.get(39 - x, 31 - y));
            }
        }
        let da = det(19.5, 15.5, 0.0);
        let db = det(19.5, 15.5, 0.0);
        let patch = PatchShape::default();
        assert_eq!(sad_score(&img_a, &img_b, &da, &db, &patch), 0.0);
        // Against itself the direct comparison already wins.
        assert_eq!(sad_score(&img_a, &img_a, &da, &da, &patch), 0.0);
    }

    /// Brute-force mutual-best reference over a dense score matrix.
    fn symmetric_reference(
        n_a: usize,
        n_b: usize,
        scored: &[(usize, usize, f64)],
    ) -> Vec<(usize, usize)> {
        let mut matrix = vec![vec![f64::INFINITY; n_b]; n_a];
        for &(i, j, s) in scored {
            matrix[i][j] = s;
        }
        let mut out = Vec::new();
        for &(i, j, s) in scored {
            if !s.is_finite() {
                continue;
            }
            let best_j = (0..n_b).fold(None::<usize>, |acc, jj| {
                if matrix[i][jj].is_finite()
                    && acc.map_or(true, |a| matrix[i][jj] < matrix[i][a])
                {
                    Some(jj)
                } else {
                    acc
                }
            });
            let best_i = (0..n_a).fold(None::<usize>, |acc, ii| {
                if matrix[ii][j].is_finite()
                    && acc.map_or(true, |a| matrix[ii][j] < matrix[a][j])
                {
                    Some(ii)
                } else {
                    acc
                }
            });
            if best_j == Some(j) && best_i == Some(i) {
                out.push((i, j));
            }
        }
        out
    }

    #[test]
    fn symmetric_match_keeps_mutual_bests() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..100 {
            let n_a = rng.gen_range(1..12);
            let n_b = rng.gen_range(1..12);
            let mut scored = Vec::new();
            for i in 0..n_a {
                for j in 0..n_b {
                    if rng.gen_bool(0.45) {
                        // Occasional duplicates exercise the tie-break, and
                        // occasional infinities the out-of-bounds path.
                        let s = if rng.gen_bool(0.1) {
                            f64::INFINITY
                        } else {
                            (rng.gen_range(0..8) as f64) * 0.5
                        };
                        scored.push((i, j, s));
                    }
                }
            }
            let got: Vec<(usize, usize)> = symmetric_match(n_a, n_b, &scored)
                .iter()
                .map(|m| (m.a, m.b))
                .collect();
            let expected = symmetric_reference(n_a, n_b, &scored);
            assert_eq!(got, expected, "trial {trial} with {scored:?}");

            // Partial injection: no endpoint repeats.
            let mut seen_a = std::collections::HashSet::new();
            let mut seen_b = std::collections::HashSet::new();
            for &(i, j) in &got {
                assert!(seen_a.insert(i));
                assert!(seen_b.insert(j));
            }
        }
    }

    #[test]
    fn tie_break_prefers_the_lower_index() {
        // Two equal scores from one a-detection: b = 0 wins both sides.
        let scored = vec![(0usize, 0usize, 1.0f64), (0, 1, 1.0)];
        let got = symmetric_match(1, 2, &scored);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].a, got[0].b), (0, 0));
    }

    fn mk_det(frame: usize, x: f64, y: f64) -> Detection {
        Detection {
            frame,
            centre: (x, y),
            orientation: 0.0,
            pixel_count: 40,
            mean_response: 1.0,
            degenerate: false,
        }
    }

    #[test]
    fn chaining_joins_through_the_middle_frame() {
        let d0 = vec![mk_det(4, 0.0, 0.0), mk_det(4, 50.0, 50.0)];
        let d1 = vec![mk_det(5, 4.0, 0.0), mk_det(5, 53.0, 50.0)];
        let d2 = vec![mk_det(6, 8.0, 0.0)];
        let first = vec![
            Match { a: 0, b: 0, score: 0.1 },
            Match { a: 1, b: 1, score: 0.2 },
        ];
        let second = vec![Match { a: 0, b: 0, score: 0.1 }];
        let gates = Gates::default();
        let tracklets = chain_tracklets(&first, &second, &d0, &d1, &d2, &gates);
        assert_eq!(tracklets.len(), 1);
        assert_eq!(tracklets[0].start_frame, 4);
        assert_eq!(
            tracklets[0].centres,
            [(0.0, 0.0), (4.0, 0.0), (8.0, 0.0)]
        );
        let (v1, v2) = tracklets[0].velocities();
        assert_eq!(v1, (4.0, 0.0));
        assert_eq!(v2, (4.0, 0.0));
    }

    #[test]
    fn acceleration_filter_keeps_the_boundary() {
        let gates = Gates::default();
        let mk = |c2x: f64| {
            let d0 = vec![mk_det(0, 0.0, 0.0)];
            let d1 = vec![mk_det(1, 0.0, 0.0)];
            let d2 = vec![mk_det(2, c2x, 0.0)];
            let first = vec![Match { a: 0, b: 0, score: 0.0 }];
            let second = vec![Match { a: 0, b: 0, score: 0.0 }];
            chain_tracklets(&first, &second, &d0, &d1, &d2, &gates).len()
        };
        // v1 = 0, v2 = (x, 0): acceleration is exactly x.
        assert_eq!(mk(3.9), 1);
        assert_eq!(mk(4.0), 1, "boundary acceleration must be retained");
        assert_eq!(mk(4.0000001), 0);
    }

    #[test]
    fn tracklet_csv_roundtrip_is_exact() {
        let tracklets = vec![
            Tracklet {
                start_frame: 12,
                centres: [(1.5, 2.25), (3.125, 4.0), (5.0625, 6.5)],
            },
            Tracklet {
                start_frame: 13,
                centres: [(-0.5, 0.0), (0.7071067811865476, 1.0), (2.0, 2.0)],
            },
        ];
        let dir = std::env::temp_dir().join("velofield-trk-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tracklets.csv");
        save_tracklets_csv(&tracklets, &path).unwrap();
        let back = load_tracklets_csv(&path).unwrap();
        assert_eq!(back, tracklets);
        std::fs::remove_dir_all(&dir).ok();
    }
}
