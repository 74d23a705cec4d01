//! Geometric registration toolkit: a second-order rational transform,
//! robust fitting by case deletion, correlation-based grid matching, and a
//! per-cell displacement field.
//!
//! The transform maps (x, y) to (P1(x,y)/Q(x,y), P2(x,y)/Q(x,y)) where P1,
//! P2 and Q are full bivariate quadratics and Q's constant term is pinned
//! to one, leaving 17 free parameters. With the quadratic terms zero this
//! is exactly a homography; the extra terms absorb mild lens and terrain
//! distortion. Fitting minimizes sum-squared reprojection error with a
//! hand-rolled Downhill-Simplex search over internally normalized
//! coordinates, and the case-deletion loop repeatedly discards the worst
//! few percent of correspondences until the survivors' mean residual is
//! acceptable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{IntegralImage, RasterImage};

/// Denominator values at or below this count as a pole.
pub const POLE_MINIMUM: f64 = 1e-9;

/// 17 parameters, two constraints per point, rounded up.
pub const MIN_FIT_POINTS: usize = 9;

/// Quadratic coefficient order used throughout: constant, x, y, x^2, xy,
/// y^2.
fn quad(c: &[f64; 6], x: f64, y: f64) -> f64 {
    c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
}

/// Second-order rational mapping of the plane. `q[0]` is fixed at 1 by
/// construction and fitting never varies it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyprojectiveTransform {
    pub p1: [f64; 6],
    pub p2: [f64; 6],
    pub q: [f64; 6],
}

impl PolyprojectiveTransform {
    pub fn identity() -> Self {
        PolyprojectiveTransform {
            p1: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            p2: [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            q: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    /// Embeds a 3x3 homography (row-major, mapping homogeneous column
    /// vectors) by dividing through by its lower-right entry.
    pub fn from_homography(h: &[[f64; 3]; 3]) -> Result<Self> {
        let s = h[2][2];
        if s.abs() < 1e-12 {
            return Err(Error::config(
                "homography",
                "lower-right entry must be nonzero to fix the scale",
            ));
        }
        Ok(PolyprojectiveTransform {
            p1: [h[0][2] / s, h[0][0] / s, h[0][1] / s, 0.0, 0.0, 0.0],
            p2: [h[1][2] / s, h[1][0] / s, h[1][1] / s, 0.0, 0.0, 0.0],
            q: [1.0, h[2][0] / s, h[2][1] / s, 0.0, 0.0, 0.0],
        })
    }

    pub fn apply(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let q = quad(&self.q, p.0, p.1);
        if q <= POLE_MINIMUM {
            return Err(Error::PoleInTransform {
                x: p.0,
                y: p.1,
                q,
            });
        }
        Ok((quad(&self.p1, p.0, p.1) / q, quad(&self.p2, p.0, p.1) / q))
    }

    fn to_params(&self) -> [f64; 17] {
        let mut v = [0.0; 17];
        v[0..6].copy_from_slice(&self.p1);
        v[6..12].copy_from_slice(&self.p2);
        v[12..17].copy_from_slice(&self.q[1..6]);
        v
    }

    fn from_params(v: &[f64]) -> Self {
        let mut t = PolyprojectiveTransform {
            p1: [0.0; 6],
            p2: [0.0; 6],
            q: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        t.p1.copy_from_slice(&v[0..6]);
        t.p2.copy_from_slice(&v[6..12]);
        t.q[1..6].copy_from_slice(&v[12..17]);
        t
    }
}

/// One matched point pair with an optional confidence weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: (f64, f64),
    pub target: (f64, f64),
    pub weight: f64,
}

/// Coefficients of `x -> quad(c, a*x + b)` for an isotropic scale `a` and
/// translation `b` applied to the argument.
fn subst_quad(c: &[f64; 6], a: f64, b: (f64, f64)) -> [f64; 6] {
    let (bx, by) = b;
    [
        c[0] + c[1] * bx + c[2] * by + c[3] * bx * bx + c[4] * bx * by + c[5] * by * by,
        a * (c[1] + 2.0 * c[3] * bx + c[4] * by),
        a * (c[2] + c[4] * bx + 2.0 * c[5] * by),
        a * a * c[3],
        a * a * c[4],
        a * a * c[5],
    ]
}

/// Similarity (isotropic scale plus translation) acting as p -> a*p + b.
#[derive(Debug, Clone, Copy)]
struct Similarity {
    a: f64,
    b: (f64, f64),
}

impl Similarity {
    fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (self.a * p.0 + self.b.0, self.a * p.1 + self.b.1)
    }

    fn inverse(&self) -> Similarity {
        Similarity {
            a: 1.0 / self.a,
            b: (-self.b.0 / self.a, -self.b.1 / self.a),
        }
    }
}

/// Hartley-style normalizer: translate the centroid to the origin and
/// scale the mean distance to sqrt(2).
fn normalizer<I: Iterator<Item = (f64, f64)> + Clone>(points: I) -> Similarity {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in points.clone() {
        sx += x;
        sy += y;
        n += 1;
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let mut mean_dist = 0.0;
    for (x, y) in points {
        mean_dist += (x - mx).hypot(y - my);
    }
    mean_dist /= n as f64;
    let a = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Similarity {
        a,
        b: (-a * mx, -a * my),
    }
}

/// Conjugates the transform by similarities: returns `outer . t . inner`
/// with the denominator's constant term renormalized to one.
fn conjugate(
    t: &PolyprojectiveTransform,
    inner: Similarity,
    outer: Similarity,
) -> Result<PolyprojectiveTransform> {
    let p1 = subst_quad(&t.p1, inner.a, inner.b);
    let p2 = subst_quad(&t.p2, inner.a, inner.b);
    let q = subst_quad(&t.q, inner.a, inner.b);
    let mut out = PolyprojectiveTransform {
        p1: [0.0; 6],
        p2: [0.0; 6],
        q,
    };
    for i in 0..6 {
        out.p1[i] = outer.a * p1[i] + outer.b.0 * q[i];
        out.p2[i] = outer.a * p2[i] + outer.b.1 * q[i];
    }
    // Dividing by a negative constant flips the gauge: the rational map is
    // unchanged, and a transform whose denominator was negative over the
    // data simply keeps failing the pole check downstream.
    let q0 = out.q[0];
    if q0.abs() < 1e-12 {
        return Err(Error::PoleInTransform {
            x: 0.0,
            y: 0.0,
            q: q0,
        });
    }
    for i in 0..6 {
        out.p1[i] /= q0;
        out.p2[i] /= q0;
        out.q[i] /= q0;
    }
    Ok(out)
}

/// Downhill-Simplex controls. The coefficients are the textbook
/// reflection/expansion/contraction/shrink factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    pub max_iterations: usize,
    /// Stop when the objective spread across the simplex falls below this
    /// times (1 + |best|).
    pub relative_tolerance: f64,
    /// Initial per-parameter perturbation, scaled by max(|param|, 1).
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            max_iterations: 20_000,
            relative_tolerance: 1e-10,
            initial_step: 1e-3,
        }
    }
}

/// Result of one simplex minimization.
#[derive(Debug, Clone)]
pub struct SimplexOutcome {
    pub parameters: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Best objective value after each iteration; never increases.
    pub best_values: Vec<f64>,
}

/// Minimizes `objective` from `init` with the Downhill-Simplex method.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    init: &[f64],
    opts: &SimplexOptions,
) -> SimplexOutcome {
    let n = init.len();
    assert!(n > 0, "cannot optimize zero parameters");
    let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    vertices.push(init.to_vec());
    for i in 0..n {
        let mut v = init.to_vec();
        v[i] += opts.initial_step * v[i].abs().max(1.0);
        vertices.push(v);
    }
    let mut values: Vec<f64> = vertices.iter().map(|v| objective(v)).collect();
    let mut best_values = Vec::new();
    let mut iterations = 0;

    let mut centroid = vec![0.0; n];
    let mut candidate = vec![0.0; n];
    for _ in 0..opts.max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        best_values.push(values[best]);
        if values[best] == f64::INFINITY {
            // Every vertex is in forbidden territory; there is no gradient
            // information to follow.
            break;
        }
        let spread = values[worst] - values[best];
        if spread <= opts.relative_tolerance * (1.0 + values[best].abs()) {
            break;
        }
        iterations += 1;

        centroid.fill(0.0);
        for (i, v) in vertices.iter().enumerate() {
            if i != worst {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x;
                }
            }
        }
        for c in &mut centroid {
            *c /= n as f64;
        }

        let try_point = |coeff: f64, from_worst: &[f64], obj: &mut F, out: &mut [f64]| {
            for i in 0..n {
                out[i] = centroid[i] + coeff * (centroid[i] - from_worst[i]);
            }
            obj(out)
        };

        let fr = try_point(opts.reflection, &vertices[worst], &mut objective, &mut candidate);
        if fr < values[best] {
            let reflected = candidate.clone();
            let fe = try_point(
                opts.reflection * opts.expansion,
                &vertices[worst],
                &mut objective,
                &mut candidate,
            );
            if fe < fr {
                vertices[worst].copy_from_slice(&candidate);
                values[worst] = fe;
            } else {
                vertices[worst].copy_from_slice(&reflected);
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            vertices[worst].copy_from_slice(&candidate);
            values[worst] = fr;
        } else if fr < values[worst] {
            let reflected = candidate.clone();
            // Outside contraction: between the centroid and the reflected
            // point.
            for i in 0..n {
                candidate[i] = centroid[i] + opts.contraction * (reflected[i] - centroid[i]);
            }
            let fc = objective(&candidate);
            if fc <= fr {
                vertices[worst].copy_from_slice(&candidate);
                values[worst] = fc;
            } else {
                shrink(&mut vertices, &mut values, best, opts.shrink, &mut objective);
            }
        } else {
            for i in 0..n {
                candidate[i] =
                    centroid[i] - opts.contraction * (centroid[i] - vertices[worst][i]);
            }
            let fc = objective(&candidate);
            if fc < values[worst] {
                vertices[worst].copy_from_slice(&candidate);
                values[worst] = fc;
            } else {
                shrink(&mut vertices, &mut values, best, opts.shrink, &mut objective);
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    SimplexOutcome {
        parameters: vertices[best].clone(),
        value: values[best],
        iterations,
        best_values,
    }
}

fn shrink<F: FnMut(&[f64]) -> f64>(
    vertices: &mut [Vec<f64>],
    values: &mut [f64],
    best: usize,
    sigma: f64,
    objective: &mut F,
) {
    let anchor = vertices[best].clone();
    for i in 0..vertices.len() {
        if i == best {
            continue;
        }
        for (x, a) in vertices[i].iter_mut().zip(&anchor) {
            *x = a + sigma * (*x - a);
        }
        values[i] = objective(&vertices[i]);
    }
}

/// Per-point reprojection distances; a pole maps to infinity.
pub fn residuals(t: &PolyprojectiveTransform, corrs: &[Correspondence]) -> Vec<f64> {
    corrs
        .iter()
        .map(|c| match t.apply(c.source) {
            Ok((x, y)) => (x - c.target.0).hypot(y - c.target.1),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

pub fn mean_residual(t: &PolyprojectiveTransform, corrs: &[Correspondence]) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    residuals(t, corrs).iter().sum::<f64>() / corrs.len() as f64
}

/// Result of a sum-squared-error fit.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub transform: PolyprojectiveTransform,
    /// Weighted sum of squared residuals in original coordinates.
    pub sse: f64,
    pub iterations: usize,
    /// Simplex best-objective trace (internally normalized coordinates).
    pub best_values: Vec<f64>,
}

fn check_correspondences(corrs: &[Correspondence]) -> Result<()> {
    if corrs.len() < MIN_FIT_POINTS {
        return Err(Error::UnderdeterminedFit {
            points: corrs.len(),
            needed: MIN_FIT_POINTS,
        });
    }
    for c in corrs {
        let coords = [c.source.0, c.source.1, c.target.0, c.target.1, c.weight];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "correspondences",
                "coordinates and weights must be finite",
            ));
        }
    }
    Ok(())
}

/// Fits the transform minimizing the weighted sum of squared reprojection
/// errors, starting the simplex at `init`.
///
/// Source and target points are renormalized internally (centroid to the
/// origin, mean distance sqrt(2)) so the search is well conditioned
/// regardless of image scale; the returned transform is in original
/// coordinates.
pub fn fit_sse(
    corrs: &[Correspondence],
    init: &PolyprojectiveTransform,
    opts: &SimplexOptions,
) -> Result<FitOutcome> {
    check_correspondences(corrs)?;
    let ns = normalizer(corrs.iter().map(|c| c.source));
    let nd = normalizer(corrs.iter().map(|c| c.target));
    let normalized: Vec<Correspondence> = corrs
        .iter()
        .map(|c| Correspondence {
            source: ns.apply(c.source),
            target: nd.apply(c.target),
            weight: c.weight,
        })
        .collect();

    let start = conjugate(init, ns.inverse(), nd)?;
    let objective = |params: &[f64]| {
        let t = PolyprojectiveTransform::from_params(params);
        let mut sum = 0.0;
        for c in &normalized {
            match t.apply(c.source) {
                Ok((x, y)) => {
                    let (dx, dy) = (x - c.target.0, y - c.target.1);
                    sum += c.weight * (dx * dx + dy * dy);
                }
                Err(_) => return f64::INFINITY,
            }
        }
        sum
    };
    let outcome = nelder_mead(objective, &start.to_params(), opts);
    let fitted = PolyprojectiveTransform::from_params(&outcome.parameters);
    let transform = conjugate(&fitted, ns, nd.inverse())?;

    let mut sse = 0.0;
    for c in corrs {
        if let Ok((x, y)) = transform.apply(c.source) {
            let (dx, dy) = (x - c.target.0, y - c.target.1);
            sse += c.weight * (dx * dx + dy * dy);
        } else {
            sse = f64::INFINITY;
            break;
        }
    }
    Ok(FitOutcome {
        transform,
        sse,
        iterations: outcome.iterations,
        best_values: outcome.best_values,
    })
}

/// Controls for the case-deletion loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseDeletionOptions {
    /// Fraction of the active set deleted per round (ceiling, at least 1).
    pub drop_fraction: f64,
    /// Mean residual (pixels) below which the fit is accepted.
    pub target_mean_error: f64,
    pub max_rounds: usize,
    pub simplex: SimplexOptions,
}

impl Default for CaseDeletionOptions {
    fn default() -> Self {
        CaseDeletionOptions {
            drop_fraction: 0.05,
            target_mean_error: 2.0,
            max_rounds: 40,
            simplex: SimplexOptions::default(),
        }
    }
}

/// Result of a converged case-deletion fit.
#[derive(Debug, Clone)]
pub struct CaseDeletionOutcome {
    pub transform: PolyprojectiveTransform,
    /// Indices into the input set that survived, ascending.
    pub surviving_indices: Vec<usize>,
    /// Deleted indices in deletion order (worst first within each round).
    pub deleted_indices: Vec<usize>,
    pub rounds: usize,
    /// Mean residual over the survivors under the final transform.
    pub mean_residual: f64,
    /// Post-fit mean residual over the active set, one entry per round.
    pub residual_history: Vec<f64>,
}

/// Robust fit: repeatedly fit, rank points by residual, and delete the
/// worst few percent until the survivors' mean residual drops below the
/// target. Each refit warm-starts from the previous solution. Fails (with
/// the last fit attached) when deletion would leave too few points or the
/// round budget runs out.
pub fn case_deletion_fit(
    corrs: &[Correspondence],
    init: &PolyprojectiveTransform,
    opts: &CaseDeletionOptions,
) -> Result<CaseDeletionOutcome> {
    check_correspondences(corrs)?;
    if !(opts.drop_fraction > 0.0 && opts.drop_fraction < 1.0) {
        return Err(Error::config("drop_fraction", "must lie in (0, 1)"));
    }
    let mut active: Vec<usize> = (0..corrs.len()).collect();
    let mut deleted = Vec::new();
    let mut current = init.clone();
    let mut residual_history = Vec::new();

    for round in 1..=opts.max_rounds {
        let subset: Vec<Correspondence> = active.iter().map(|&i| corrs[i]).collect();
        let fit = fit_sse(&subset, &current, &opts.simplex)?;
        let res = residuals(&fit.transform, &subset);
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        residual_history.push(mean);
        if mean < opts.target_mean_error {
            return Ok(CaseDeletionOutcome {
                transform: fit.transform,
                surviving_indices: active,
                deleted_indices: deleted,
                rounds: round,
                mean_residual: mean,
                residual_history,
            });
        }
        let n_drop = ((opts.drop_fraction * active.len() as f64).ceil() as usize).max(1);
        if active.len() - n_drop < MIN_FIT_POINTS {
            return Err(Error::RobustFitDidNotConverge {
                rounds: round,
                mean_residual: mean,
                survivors: active.len(),
                last_fit: Box::new(fit.transform),
            });
        }
        // Worst residual first; ties to the lower original index.
        let mut by_badness: Vec<usize> = (0..active.len()).collect();
        by_badness.sort_by(|&a, &b| {
            res[b].total_cmp(&res[a]).then(active[a].cmp(&active[b]))
        });
        let mut dropped: Vec<usize> = by_badness[..n_drop].iter().map(|&k| active[k]).collect();
        deleted.append(&mut dropped);
        let keep: std::collections::HashSet<usize> =
            by_badness[n_drop..].iter().map(|&k| active[k]).collect();
        active.retain(|i| keep.contains(i));
        current = fit.transform;
    }

    let subset: Vec<Correspondence> = active.iter().map(|&i| corrs[i]).collect();
    let fit = fit_sse(&subset, &current, &opts.simplex)?;
    let mean = mean_residual(&fit.transform, &subset);
    Err(Error::RobustFitDidNotConverge {
        rounds: opts.max_rounds,
        mean_residual: mean,
        survivors: active.len(),
        last_fit: Box::new(fit.transform),
    })
}

/// A correlation match: integer displacement of the patch's best placement
/// relative to the centred one, and its score in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccMatch {
    pub displacement: (i32, i32),
    pub score: f64,
}

/// Finds the placement of `patch` inside `region` maximizing the
/// zero-normalized cross correlation. Displacement (0, 0) means the patch
/// sits centred in the region. Constant patches are an error; constant
/// region windows are skipped.
pub fn ncc_match(patch: &RasterImage, region: &RasterImage) -> Result<NccMatch> {
    let (pw, ph) = patch.dims();
    let (rw, rh) = region.dims();
    if pw > rw || ph > rh {
        return Err(Error::SearchRegionTooSmall {
            patch_width: pw,
            patch_height: ph,
            region_width: rw,
            region_height: rh,
        });
    }
    let n = (pw * ph) as f64;
    let patch_sum: f64 = patch.as_slice().iter().sum();
    let patch_mean = patch_sum / n;
    let patch_var: f64 = patch
        .as_slice()
        .iter()
        .map(|v| (v - patch_mean) * (v - patch_mean))
        .sum::<f64>()
        / n;
    if patch_var <= 1e-18 {
        return Err(Error::ZeroVariance { what: "patch" });
    }
    let patch_std = patch_var.sqrt();

    let sums = IntegralImage::new(region);
    let squares = {
        let mut sq = region.clone();
        for v in sq.as_mut_slice() {
            *v *= *v;
        }
        IntegralImage::new(&sq)
    };

    let centre = (((rw - pw) / 2) as i32, ((rh - ph) / 2) as i32);
    let mut best: Option<NccMatch> = None;
    for oy in 0..=(rh - ph) {
        for ox in 0..=(rw - pw) {
            let s = sums.rect_sum(ox, oy, ox + pw, oy + ph).expect("in bounds");
            let s2 = squares
                .rect_sum(ox, oy, ox + pw, oy + ph)
                .expect("in bounds");
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            if var <= 1e-18 {
                continue;
            }
            let mut cross = 0.0;
            for y in 0..ph {
                for x in 0..pw {
                    cross += patch.get(x, y) * region.get(ox + x, oy + y);
                }
            }
            let score =
                ((cross - n * patch_mean * mean) / (n * patch_std * var.sqrt())).clamp(-1.0, 1.0);
            if best.map_or(true, |b| score > b.score) {
                best = Some(NccMatch {
                    displacement: (ox as i32 - centre.0, oy as i32 - centre.1),
                    score,
                });
            }
        }
    }
    best.ok_or(Error::ZeroVariance {
        what: "search region",
    })
}

/// Matches a grid of patches from `source` against `target`, producing
/// one correspondence per grid point whose surroundings carry texture.
/// Returns the matches and the number of grid points skipped for zero
/// variance.
pub fn match_grid(
    source: &RasterImage,
    target: &RasterImage,
    spacing: usize,
    patch_radius: usize,
    search_radius: usize,
) -> Result<(Vec<Correspondence>, usize)> {
    if source.dims() != target.dims() {
        return Err(Error::DimensionMismatch {
            left_width: source.width(),
            left_height: source.height(),
            right_width: target.width(),
            right_height: target.height(),
        });
    }
    if spacing == 0 {
        return Err(Error::config("spacing", "must be positive"));
    }
    let (w, h) = source.dims();
    let patch_size = 2 * patch_radius + 1;
    let region_size = patch_size + 2 * search_radius;
    let margin = patch_radius + search_radius;
    if w < region_size || h < region_size {
        return Err(Error::SearchRegionTooSmall {
            patch_width: patch_size,
            patch_height: patch_size,
            region_width: w,
            region_height: h,
        });
    }
    let mut matches = Vec::new();
    let mut skipped = 0usize;
    let mut gy = margin;
    while gy + margin < h {
        let mut gx = margin;
        while gx + margin < w {
            let patch = source.crop(gx - patch_radius, gy - patch_radius, patch_size, patch_size)?;
            let region = target.crop(gx - margin, gy - margin, region_size, region_size)?;
            match ncc_match(&patch, &region) {
                Ok(m) => matches.push(Correspondence {
                    source: (gx as f64, gy as f64),
                    target: (
                        gx as f64 + m.displacement.0 as f64,
                        gy as f64 + m.displacement.1 as f64,
                    ),
                    weight: 1.0,
                }),
                Err(Error::ZeroVariance { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
            gx += spacing;
        }
        gy += spacing;
    }
    Ok((matches, skipped))
}

/// One cell of a displacement field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellVector {
    pub vector: (f64, f64),
    /// True when the cell had no matches and copied its nearest matched
    /// neighbour.
    pub inherited: bool,
}

/// A displacement vector per image cell, bilinearly interpolated between
/// cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    cell_size: usize,
    cells_x: usize,
    cells_y: usize,
    cells: Vec<CellVector>,
}

impl DisplacementField {
    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.cells_x, self.cells_y)
    }

    pub fn cell(&self, cx: usize, cy: usize) -> CellVector {
        assert!(cx < self.cells_x && cy < self.cells_y, "cell out of range");
        self.cells[cy * self.cells_x + cx]
    }

    /// Displacement at an arbitrary pixel: bilinear interpolation of the
    /// four surrounding cell-centre vectors, clamped at the borders so the
    /// field extends constantly beyond the outermost centres.
    pub fn evaluate(&self, p: (f64, f64)) -> (f64, f64) {
        let coord = |v: f64, cells: usize| -> (usize, usize, f64) {
            let u = (v / self.cell_size as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(cells - 1);
            (i0, i1, u - i0 as f64)
        };
        let (x0, x1, fx) = coord(p.0, self.cells_x);
        let (y0, y1, fy) = coord(p.1, self.cells_y);
        let at = |cx: usize, cy: usize| self.cells[cy * self.cells_x + cx].vector;
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| {
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        };
        let top = lerp(at(x0, y0), at(x1, y0), fx);
        let bottom = lerp(at(x0, y1), at(x1, y1), fx);
        lerp(top, bottom, fy)
    }
}

/// Robust single vector for one cell's match displacements: case deletion
/// over the constant model, whose least-squares fit is the mean.
fn constant_case_deletion(
    displacements: &[(f64, f64)],
    drop_fraction: f64,
    target_mean_error: f64,
) -> (f64, f64) {
    let mut active: Vec<(f64, f64)> = displacements.to_vec();
    loop {
        let n = active.len() as f64;
        let mean = active
            .iter()
            .fold((0.0, 0.0), |acc, d| (acc.0 + d.0, acc.1 + d.1));
        let mean = (mean.0 / n, mean.1 / n);
        let res: Vec<f64> = active
            .iter()
            .map(|d| (d.0 - mean.0).hypot(d.1 - mean.1))
            .collect();
        let mean_res = res.iter().sum::<f64>() / n;
        if mean_res < target_mean_error || active.len() == 1 {
            return mean;
        }
        let n_drop = ((drop_fraction * n).ceil() as usize).max(1).min(active.len() - 1);
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| res[b].total_cmp(&res[a]).then(a.cmp(&b)));
        let keep: Vec<(f64, f64)> = order[n_drop..]
            .iter()
            .map(|&k| active[k])
            .collect();
        active = keep;
    }
}

/// Builds the per-cell displacement field from correspondences, bucketing
/// each match by its source point. Cells without matches inherit the
/// vector of the nearest matched cell (by centre distance) and are
/// flagged.
pub fn build_displacement_field(
    corrs: &[Correspondence],
    width: usize,
    height: usize,
    cell_size: usize,
    drop_fraction: f64,
    target_mean_error: f64,
) -> Result<DisplacementField> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyRaster { width, height });
    }
    if cell_size == 0 {
        return Err(Error::config("cell_size", "must be positive"));
    }
    let cells_x = width.div_ceil(cell_size);
    let cells_y = height.div_ceil(cell_size);
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cells_x * cells_y];
    for c in corrs {
        let cx = ((c.source.0 / cell_size as f64).floor() as i64).clamp(0, cells_x as i64 - 1);
        let cy = ((c.source.1 / cell_size as f64).floor() as i64).clamp(0, cells_y as i64 - 1);
        buckets[cy as usize * cells_x + cx as usize]
            .push((c.target.0 - c.source.0, c.target.1 - c.source.1));
    }
    if buckets.iter().all(|b| b.is_empty()) {
        return Err(Error::NoMatchedCells);
    }
    let mut cells = vec![
        CellVector {
            vector: (0.0, 0.0),
            inherited: true,
        };
        cells_x * cells_y
    ];
    let mut matched = Vec::new();
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let bucket = &buckets[cy * cells_x + cx];
            if bucket.is_empty() {
                continue;
            }
            cells[cy * cells_x + cx] = CellVector {
                vector: constant_case_deletion(bucket, drop_fraction, target_mean_error),
                inherited: false,
            };
            matched.push((cx, cy));
        }
    }
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            if !cells[cy * cells_x + cx].inherited {
                continue;
            }
            // Nearest matched cell by centre distance; ties to the lowest
            // (cy, cx).
            let mut nearest = matched[0];
            let mut best = f64::INFINITY;
            for &(mx, my) in &matched {
                let d = (mx as f64 - cx as f64).hypot(my as f64 - cy as f64);
                if d < best {
                    best = d;
                    nearest = (mx, my);
                }
            }
            cells[cy * cells_x + cx].vector =
                cells[nearest.1 * cells_x + nearest.0].vector;
        }
    }
    Ok(DisplacementField {
        cell_size,
        cells_x,
        cells_y,
        cells,
    })
}

pub fn save_transform(t: &PolyprojectiveTransform, path: &Path) -> Result<()> {
    let row = |c: &[f64]| {
        c.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let text = format!(
        "velofield-transform 1\n\
         # rows list quadratic coefficients: constant x y x^2 xy y^2\n\
         # q's constant term is fixed at 1 and omitted\n\
         p1 = {}\np2 = {}\nq = {}\n",
        row(&t.p1),
        row(&t.p2),
        row(&t.q[1..6])
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<PolyprojectiveTransform> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| Error::parse("transform file", detail);
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    if lines.next() != Some("velofield-transform 1") {
        return Err(bad("missing `velofield-transform 1` header".into()));
    }
    let mut t = PolyprojectiveTransform::identity();
    let mut seen = [false; 3];
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `name = coefficients`, got `{line}`")))?;
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| bad(format!("bad coefficient `{tok}`")))
            })
            .collect::<Result<_>>()?;
        match key.trim() {
            "p1" | "p2" => {
                if nums.len() != 6 {
                    return Err(bad(format!("{} needs 6 coefficients", key.trim())));
                }
                if key.trim() == "p1" {
                    t.p1.copy_from_slice(&nums);
                    seen[0] = true;
                } else {
                    t.p2.copy_from_slice(&nums);
                    seen[1] = true;
                }
            }
            "q" => {
                if nums.len() != 5 {
                    return Err(bad("q needs 5 coefficients (constant omitted)".into()));
                }
                t.q[0] = 1.0;
                t.q[1..6].copy_from_slice(&nums);
                seen[2] = true;
            }
            other => return Err(bad(format!("unknown row `{other}`"))),
        }
    }
    if seen != [true; 3] {
        return Err(bad("file must define p1, p2 and q".into()));
    }
    Ok(t)
}

pub fn save_correspondences_csv(corrs: &[Correspondence], path: &Path) -> Result<()> {
    let mut out = String::from("sx,sy,tx,ty,w\n");
    for c in corrs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.source.0, c.source.1, c.target.0, c.target.1, c.weight
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_correspondences_csv(path: &Path) -> Result<Vec<Correspondence>> {
    let text = fs::read_to_string(path)?;
    let mut corrs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("sx,")) {
            continue;
        }
        let bad = || Error::parse("correspondence CSV", format!("line {}: `{line}`", idx + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(bad());
        }
        let mut nums = Vec::with_capacity(5);
        for f in &fields {
            nums.push(f.trim().parse::<f64>().map_err(|_| bad())?);
        }
        corrs.push(Correspondence {
            source: (nums[0], nums[1]),
            target: (nums[2], nums[3]),
            weight: if nums.len() == 5 { nums[4] } else { 1.0 },
        });
    }
    Ok(corrs)
}

pub fn save_displacement_field(field: &DisplacementField, path: &Path) -> Result<()> {
    let mut out = String::from("velofield-displacement 1\n");
    out.push_str(&format!("cell_size = {}\n", field.cell_size));
    out.push_str(&format!("cells = {} {}\n", field.cells_x, field.cells_y));
    out.push_str("# cell_i,cell_j,dx,dy,inherited\n");
    for cy in 0..field.cells_y {
        for cx in 0..field.cells_x {
            let c = field.cell(cx, cy);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cx,
                cy,
                c.vector.0,
                c.vector.1,
                u8::from(c.inherited)
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_displacement_field(path: &Path) -> Result<DisplacementField> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| Error::parse("displacement field file", detail);
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    if lines.next() != Some("velofield-displacement 1") {
        return Err(bad("missing `velofield-displacement 1` header".into()));
    }
    let mut cell_size = None;
    let mut dims = None;
    let mut rows = Vec::new();
    for line in lines {
        if let Some((key, value)) = line.split_once('=') {
            match key.trim() {
                "cell_size" => {
                    cell_size = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|_| bad(format!("bad cell_size `{value}`")))?,
                    )
                }
                "cells" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(bad("cells needs two counts".into()));
                    }
                    let cx = parts[0]
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad cell count `{}`", parts[0])))?;
                    let cy = parts[1]
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad cell count `{}`", parts[1])))?;
                    dims = Some((cx, cy));
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(bad(format!("expected cell_i,cell_j,dx,dy[,inherited]: `{line}`")));
        }
        let ci: usize = fields[0].parse().map_err(|_| bad(format!("bad row `{line}`")))?;
        let cj: usize = fields[1].parse().map_err(|_| bad(format!("bad row `{line}`")))?;
        let dx: f64 = fields[2].parse().map_err(|_| bad(format!("bad row `{line}`")))?;
        let dy: f64 = fields[3].parse().map_err(|_| bad(format!("bad row `{line}`")))?;
        let inherited = match fields.get(4) {
            None => false,
            Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => return Err(bad(format!("bad inherited flag `{other}`"))),
        };
        rows.push((ci, cj, dx, dy, inherited));
    }
    let cell_size = cell_size.ok_or_else(|| bad("missing cell_size".into()))?;
    let (cells_x, cells_y) = dims.ok_or_else(|| bad("missing cells".into()))?;
    if cells_x == 0 || cells_y == 0 {
        return Err(bad("cell counts must be positive".into()));
    }
    if rows.len() != cells_x * cells_y {
        return Err(bad(format!(
            "expected {} rows, found {}",
            cells_x * cells_y,
            rows.len()
        )));
    }
    let mut cells = vec![None; cells_x * cells_y];
    for (ci, cj, dx, dy, inherited) in rows {
        if ci >= cells_x || cj >= cells_y {
            return Err(bad(format!("cell ({ci},{cj}) outside {cells_x}x{cells_y}")));
        }
        let slot = &mut cells[cj * cells_x + ci];
        if slot.is_some() {
            return Err(bad(format!("duplicate cell ({ci},{cj})")));
        }
        *slot = Some(CellVector {
            vector: (dx, dy),
            inherited,
        });
    }
    Ok(DisplacementField {
        cell_size,
        cells_x,
        cells_y,
        cells: cells.into_iter().map(Option::unwrap).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planted_warp() -> PolyprojectiveTransform {
        PolyprojectiveTransform {
            p1: [3.0, 1.02, 0.015, 2e-5, -1e-5, 6e-6],
            p2: [-2.0, -0.01, 0.985, -8e-6, 1.2e-5, 1.5e-5],
            q: [1.0, 2e-5, -1e-5, 0.0, 0.0, 0.0],
        }
    }

    fn grid_correspondences(
        t: &PolyprojectiveTransform,
        nx: usize,
        ny: usize,
        extent: f64,
    ) -> Vec<Correspondence> {
        let mut corrs = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let s = (
                    extent * i as f64 / (nx - 1) as f64,
                    extent * j as f64 / (ny - 1) as f64,
                );
                corrs.push(Correspondence {
                    source: s,
                    target: t.apply(s).unwrap(),
                    weight: 1.0,
                });
            }
        }
        corrs
    }

    #[test]
    fn identity_transform_maps_points_to_themselves() {
        let t = PolyprojectiveTransform::identity();
        for p in [(0.0, 0.0), (13.5, -2.25), (640.0, 480.0)] {
            assert_eq!(t.apply(p).unwrap(), p);
        }
    }

    #[test]
    fn homography_coefficients_match_the_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut h = [[0.0; 3]; 3];
            for (r, row) in h.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    let base = if r == c { 1.0 } else { 0.0 };
                    let scale = if r == 2 && c != 2 { 1e-4 } else { 0.2 };
                    *v = base + rng.gen_range(-scale..scale);
                }
            }
            let t = PolyprojectiveTransform::from_homography(&h).unwrap();
            for _ in 0..50 {
                let p = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                let w = h[2][0] * p.0 + h[2][1] * p.1 + h[2][2];
                let expected = (
                    (h[0][0] * p.0 + h[0][1] * p.1 + h[0][2]) / w,
                    (h[1][0] * p.0 + h[1][1] * p.1 + h[1][2]) / w,
                );
                let got = t.apply(p).unwrap();
                assert!(
                    (got.0 - expected.0).abs() < 1e-12 && (got.1 - expected.1).abs() < 1e-12,
                    "{got:?} vs {expected:?}"
                );
            }
        }
    }

    #[test]
    fn quadratic_warp_evaluates_the_polynomials_directly() {
        let t = planted_warp();
        for p in [(10.0, 20.0), (300.0, 150.0), (499.0, 0.0)] {
            let q = 1.0 + 2e-5 * p.0 - 1e-5 * p.1;
            let expected = (
                (3.0 + 1.02 * p.0 + 0.015 * p.1 + 2e-5 * p.0 * p.0 - 1e-5 * p.0 * p.1
                    + 6e-6 * p.1 * p.1)
                    / q,
                (-2.0 - 0.01 * p.0 + 0.985 * p.1 - 8e-6 * p.0 * p.0 + 1.2e-5 * p.0 * p.1
                    + 1.5e-5 * p.1 * p.1)
                    / q,
            );
            let got = t.apply(p).unwrap();
            assert!((got.0 - expected.0).abs() < 1e-9);
            assert!((got.1 - expected.1).abs() < 1e-9);
        }
    }

    #[test]
    fn poles_are_reported_not_divided() {
        let mut t = PolyprojectiveTransform::identity();
        t.q = [1.0, -0.1, 0.0, 0.0, 0.0, 0.0];
        assert!(t.apply((5.0, 0.0)).is_ok());
        let err = t.apply((10.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::PoleInTransform { .. }));
        assert!(t.apply((20.0, 0.0)).is_err(), "negative q is also a pole");
    }

    #[test]
    fn zero_quadratic_terms_reproduce_the_homography_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = [
            [1.05, 0.02, -3.0],
            [-0.01, 0.97, 4.5],
            [1e-4, -5e-5, 1.0],
        ];
        let t = PolyprojectiveTransform::from_homography(&h).unwrap();
        assert_eq!(t.p1[3..6], [0.0; 3]);
        for _ in 0..1000 {
            let p = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
            let w = h[2][0] * p.0 + h[2][1] * p.1 + h[2][2];
            let expected = (
                (h[0][0] * p.0 + h[0][1] * p.1 + h[0][2]) / w,
                (h[1][0] * p.0 + h[1][1] * p.1 + h[1][2]) / w,
            );
            let got = t.apply(p).unwrap();
            assert!((got.0 - expected.0).abs() < 1e-12);
            assert!((got.1 - expected.1).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_minimizes_a_quadratic_bowl() {
        let objective = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, x)| (i as f64 + 1.0) * (x - i as f64) * (x - i as f64))
                .sum::<f64>()
        };
        let outcome = nelder_mead(objective, &[5.0, -3.0, 8.0, 0.5], &SimplexOptions::default());
        for (i, x) in outcome.parameters.iter().enumerate() {
            assert!((x - i as f64).abs() < 1e-4, "param {i} = {x}");
        }
        assert!(outcome.value < 1e-8);
        for pair in outcome.best_values.windows(2) {
            assert!(pair[1] <= pair[0], "best value increased: {pair:?}");
        }
    }

    #[test]
    fn fitting_identity_data_returns_identity() {
        let corrs = grid_correspondences(&PolyprojectiveTransform::identity(), 5, 5, 100.0);
        let fit = fit_sse(
            &corrs,
            &PolyprojectiveTransform::identity(),
            &SimplexOptions::default(),
        )
        .unwrap();
        assert!(fit.sse < 1e-16, "sse {}", fit.sse);
        assert!(mean_residual(&fit.transform, &corrs) < 1e-9);
    }

    #[test]
    fn fit_recovers_a_planted_warp_from_a_nearby_start() {
        let truth = planted_warp();
        let corrs = grid_correspondences(&truth, 8, 8, 500.0);
        let mut init = truth.clone();
        init.p1[0] += 0.5;
        init.p2[0] -= 0.4;
        init.p1[1] *= 1.002;
        init.q[1] *= 0.9;
        let fit = fit_sse(&corrs, &init, &SimplexOptions::default()).unwrap();
        let mean = mean_residual(&fit.transform, &corrs);
        assert!(mean < 1e-3, "mean residual {mean}");
        for pair in fit.best_values.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn too_few_points_are_rejected() {
        let corrs = grid_correspondences(&PolyprojectiveTransform::identity(), 2, 4, 50.0);
        assert_eq!(corrs.len(), 8);
        let err = fit_sse(
            &corrs,
            &PolyprojectiveTransform::identity(),
            &SimplexOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::UnderdeterminedFit { points: 8, needed: 9 }
        ));
    }

    #[test]
    fn case_deletion_removes_outliers_before_inliers() {
        let truth = planted_warp();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut corrs = grid_correspondences(&truth, 8, 8, 400.0);
        let n_inliers = corrs.len();
        for c in corrs.iter_mut() {
            c.target.0 += rng.gen_range(-0.3..0.3);
            c.target.1 += rng.gen_range(-0.3..0.3);
        }
        for k in 0..10 {
            let s = (rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0));
            let mut t = truth.apply(s).unwrap();
            t.0 += 80.0 + 5.0 * k as f64;
            t.1 -= 60.0;
            corrs.push(Correspondence {
                source: s,
                target: t,
                weight: 1.0,
            });
        }
        let outcome =
            case_deletion_fit(&corrs, &truth, &CaseDeletionOptions::default()).unwrap();
        assert!(outcome.mean_residual < 2.0);
        // Every outlier gets deleted, and all of them go before the first
        // inlier in deletion order (a final mixed round may take a few
        // inliers, but never ahead of a gross outlier).
        assert!(outcome.surviving_indices.iter().all(|&i| i < n_inliers));
        let first_inlier_deletion = outcome
            .deleted_indices
            .iter()
            .position(|&d| d < n_inliers)
            .unwrap_or(outcome.deleted_indices.len());
        let outliers_deleted = outcome.deleted_indices[..first_inlier_deletion]
            .iter()
            .filter(|&&d| d >= n_inliers)
            .count();
        assert_eq!(outliers_deleted, 10, "outliers must all go first");
        for pair in outcome.residual_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "mean residual rose across rounds: {pair:?}"
            );
        }
    }

    #[test]
    fn clean_data_converges_without_deletions() {
        let truth = planted_warp();
        let corrs = grid_correspondences(&truth, 6, 6, 300.0);
        let outcome =
            case_deletion_fit(&corrs, &truth, &CaseDeletionOptions::default()).unwrap();
        assert_eq!(outcome.rounds, 1);
        assert!(outcome.deleted_indices.is_empty());
        assert_eq!(outcome.surviving_indices.len(), corrs.len());
    }

    #[test]
    fn impossible_targets_report_failure_with_the_last_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        // Pure noise: no transform achieves sub-pixel mean residual.
        let corrs: Vec<Correspondence> = (0..20)
            .map(|_| Correspondence {
                source: (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
                target: (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
                weight: 1.0,
            })
            .collect();
        let opts = CaseDeletionOptions {
            target_mean_error: 1e-12,
            max_rounds: 3,
            ..CaseDeletionOptions::default()
        };
        let err = case_deletion_fit(&corrs, &PolyprojectiveTransform::identity(), &opts)
            .unwrap_err();
        match err {
            Error::RobustFitDidNotConverge {
                rounds, survivors, ..
            } => {
                assert!(rounds <= 3);
                assert!(survivors >= MIN_FIT_POINTS);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn textured_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RasterImage {
        RasterImage::from_vec(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn ncc_finds_an_exact_copy_with_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let region = textured_image(&mut rng, 40, 36);
        let patch = region.crop(11, 7, 15, 15).unwrap();
        let m = ncc_match(&patch, &region).unwrap();
        // Centred placement is at ((40-15)/2, (36-15)/2) = (12, 10).
        assert_eq!(m.displacement, (11 - 12, 7 - 10));
        assert!((m.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_scores_minus_one_against_the_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let patch = textured_image(&mut rng, 15, 15);
        let mut region = patch.clone();
        for v in region.as_mut_slice() {
            *v = 1.0 - *v;
        }
        let m = ncc_match(&patch, &region).unwrap();
        assert_eq!(m.displacement, (0, 0));
        assert!((m.score + 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_matches_a_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..10 {
            let patch = textured_image(&mut rng, 9, 7);
            let region = textured_image(&mut rng, 24, 20);
            let got = ncc_match(&patch, &region).unwrap();

            let (pw, ph) = patch.dims();
            let n = (pw * ph) as f64;
            let pm = patch.as_slice().iter().sum::<f64>() / n;
            let ps =
                (patch.as_slice().iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() / n).sqrt();
            let mut best: Option<((i32, i32), f64)> = None;
            for oy in 0..=(20 - ph) {
                for ox in 0..=(24 - pw) {
                    let mut wm = 0.0;
                    for y in 0..ph {
                        for x in 0..pw {
                            wm += region.get(ox + x, oy + y);
                        }
                    }
                    wm /= n;
                    let mut ws = 0.0;
                    let mut cross = 0.0;
                    for y in 0..ph {
                        for x in 0..pw {
                            let r = region.get(ox + x, oy + y) - wm;
                            ws += r * r;
                            cross += (patch.get(x, y) - pm) * r;
                        }
                    }
                    ws = (ws / n).sqrt();
                    let score = cross / (n * ps * ws);
                    if best.map_or(true, |(_, s)| score > s) {
                        best = Some((
                            (
                                ox as i32 - ((24 - pw) / 2) as i32,
                                oy as i32 - ((20 - ph) / 2) as i32,
                            ),
                            score,
                        ));
                    }
                }
            }
            let (disp, score) = best.unwrap();
            assert_eq!(got.displacement, disp);
            assert!((got.score - score.clamp(-1.0, 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn ncc_is_invariant_to_affine_intensity_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let patch = textured_image(&mut rng, 11, 11);
        let region = textured_image(&mut rng, 30, 30);
        let base = ncc_match(&patch, &region).unwrap();

        let mut scaled_patch = patch.clone();
        for v in scaled_patch.as_mut_slice() {
            *v = 3.5 * *v + 0.7;
        }
        let mut scaled_region = region.clone();
        for v in scaled_region.as_mut_slice() {
            *v = 0.25 * *v - 2.0;
        }
        let m1 = ncc_match(&scaled_patch, &region).unwrap();
        let m2 = ncc_match(&patch, &scaled_region).unwrap();
        assert_eq!(m1.displacement, base.displacement);
        assert_eq!(m2.displacement, base.displacement);
        assert!((m1.score - base.score).abs() < 1e-9);
        assert!((m2.score - base.score).abs() < 1e-9);
    }

    #[test]
    fn flat_patches_and_undersized_regions_are_errors() {
        let flat = RasterImage::new(15, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let region = textured_image(&mut rng, 30, 30);
        assert!(matches!(
            ncc_match(&flat, &region),
            Err(Error::ZeroVariance { what: "patch" })
        ));
        let patch = textured_image(&mut rng, 15, 15);
        let flat_region = RasterImage::new(30, 30).unwrap();
        assert!(matches!(
            ncc_match(&patch, &flat_region),
            Err(Error::ZeroVariance { .. })
        ));
        let small = RasterImage::new(10, 10).unwrap();
        assert!(matches!(
            ncc_match(&patch, &small),
            Err(Error::SearchRegionTooSmall { .. })
        ));
    }

    #[test]
    fn grid_matching_recovers_a_uniform_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let source = textured_image(&mut rng, 90, 90);
        // Target is the source shifted right 3, down 2 (toroidal fill at
        // the edges keeps texture everywhere).
        let mut target = RasterImage::new(90, 90).unwrap();
        for y in 0..90 {
            for x in 0..90 {
                target.set(x, y, source.get((x + 90 - 3) % 90, (y + 90 - 2) % 90));
            }
        }
        let (matches, skipped) = match_grid(&source, &target, 20, 7, 6).unwrap();
        assert_eq!(skipped, 0);
        assert!(!matches.is_empty());
        for m in &matches {
            assert_eq!(
                (m.target.0 - m.source.0, m.target.1 - m.source.1),
                (3.0, 2.0),
                "grid point {:?}",
                m.source
            );
        }
    }

    #[test]
    fn displacement_field_is_constant_for_identical_matches() {
        let corrs: Vec<Correspondence> = (0..30)
            .map(|k| {
                let s = (10.0 + 13.0 * k as f64 % 290.0, 7.0 + 11.0 * k as f64 % 190.0);
                Correspondence {
                    source: s,
                    target: (s.0 + 4.5, s.1 - 1.25),
                    weight: 1.0,
                }
            })
            .collect();
        let field = build_displacement_field(&corrs, 300, 200, 100, 0.05, 2.0).unwrap();
        assert_eq!(field.cells(), (3, 2));
        for cy in 0..2 {
            for cx in 0..3 {
                assert_eq!(field.cell(cx, cy).vector, (4.5, -1.25));
            }
        }
        for p in [(0.0, 0.0), (150.0, 100.0), (299.0, 199.0), (40.5, 170.2)] {
            assert_eq!(field.evaluate(p), (4.5, -1.25));
        }
    }

    #[test]
    fn interpolation_is_exact_at_cell_centres_and_continuous_between() {
        let mut corrs = Vec::new();
        for cy in 0..2 {
            for cx in 0..3 {
                // A handful of matches per cell, each with that cell's
                // planted vector.
                let v = (cx as f64 * 2.0, cy as f64 * -3.0 + 1.0);
                for k in 0..5 {
                    let s = (
                        cx as f64 * 100.0 + 20.0 + 10.0 * k as f64,
                        cy as f64 * 100.0 + 30.0 + 8.0 * k as f64,
                    );
                    corrs.push(Correspondence {
                        source: s,
                        target: (s.0 + v.0, s.1 + v.1),
                        weight: 1.0,
                    });
                }
            }
        }
        let field = build_displacement_field(&corrs, 300, 200, 100, 0.05, 2.0).unwrap();
        for cy in 0..2 {
            for cx in 0..3 {
                let centre = (cx as f64 * 100.0 + 50.0, cy as f64 * 100.0 + 50.0);
                assert_eq!(field.evaluate(centre), field.cell(cx, cy).vector);
            }
        }
        // Continuity across the vertical boundary between cells (0,0) and
        // (1,0).
        let eps = 1e-7;
        let left = field.evaluate((100.0 - eps, 80.0));
        let right = field.evaluate((100.0 + eps, 80.0));
        assert!((left.0 - right.0).abs() < 1e-5);
        assert!((left.1 - right.1).abs() < 1e-5);
        // Midway between centres the value is the average of the two.
        let mid = field.evaluate((100.0, 50.0));
        let expected = (
            (field.cell(0, 0).vector.0 + field.cell(1, 0).vector.0) / 2.0,
            (field.cell(0, 0).vector.1 + field.cell(1, 0).vector.1) / 2.0,
        );
        assert!((mid.0 - expected.0).abs() < 1e-12);
        assert!((mid.1 - expected.1).abs() < 1e-12);
    }

    #[test]
    fn cell_fits_shed_gross_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let planted = |x: f64, y: f64| (2.0 + 0.002 * x, -1.0 + 0.001 * y);
        let mut corrs = Vec::new();
        for k in 0..200 {
            let s = (rng.gen_range(0.0..400.0), rng.gen_range(0.0..300.0));
            let mut v = planted(s.0, s.1);
            if k % 10 == 0 {
                v.0 += 100.0;
                v.1 -= 80.0;
            }
            corrs.push(Correspondence {
                source: s,
                target: (s.0 + v.0, s.1 + v.1),
                weight: 1.0,
            });
        }
        let field = build_displacement_field(&corrs, 400, 300, 100, 0.05, 2.0).unwrap();
        for cy in 0..3 {
            for cx in 0..4 {
                let centre = (cx as f64 * 100.0 + 50.0, cy as f64 * 100.0 + 50.0);
                let truth = planted(centre.0, centre.1);
                let got = field.cell(cx, cy).vector;
                let err = (got.0 - truth.0).hypot(got.1 - truth.1);
                assert!(err < 0.5, "cell ({cx},{cy}): {got:?} vs {truth:?}");
                assert!(!field.cell(cx, cy).inherited);
            }
        }
    }

    #[test]
    fn empty_cells_inherit_their_nearest_neighbour() {
        // Matches only in the top-left cell of a 3x2 grid.
        let corrs: Vec<Correspondence> = (0..6)
            .map(|k| {
                let s = (10.0 + 5.0 * k as f64, 12.0 + 4.0 * k as f64);
                Correspondence {
                    source: s,
                    target: (s.0 + 2.0, s.1 + 3.0),
                    weight: 1.0,
                }
            })
            .collect();
        let field = build_displacement_field(&corrs, 300, 200, 100, 0.05, 2.0).unwrap();
        assert!(!field.cell(0, 0).inherited);
        for cy in 0..2 {
            for cx in 0..3 {
                assert_eq!(field.cell(cx, cy).vector, (2.0, 3.0));
                if (cx, cy) != (0, 0) {
                    assert!(field.cell(cx, cy).inherited);
                }
            }
        }
        assert!(matches!(
            build_displacement_field(&[], 300, 200, 100, 0.05, 2.0),
            Err(Error::NoMatchedCells)
        ));
    }

    #[test]
    fn transform_file_roundtrip_is_exact() {
        let t = planted_warp();
        let dir = std::env::temp_dir().join("velofield-xform-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("warp.txt");
        save_transform(&t, &path).unwrap();
        assert_eq!(load_transform(&path).unwrap(), t);

        std::fs::write(&path, "velofield-transform 1\np1 = 1 2 3\n").unwrap();
        assert!(load_transform(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn correspondence_csv_roundtrip_accepts_optional_weights() {
        let corrs = vec![
            Correspondence {
                source: (1.5, 2.0),
                target: (3.25, 4.125),
                weight: 1.0,
            },
            Correspondence {
                source: (-7.0, 0.5),
                target: (0.0, 100.0),
                weight: 0.25,
            },
        ];
        let dir = std::env::temp_dir().join("velofield-corr-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrs.csv");
        save_correspondences_csv(&corrs, &path).unwrap();
        assert_eq!(load_correspondences_csv(&path).unwrap(), corrs);

        std::fs::write(&path, "sx,sy,tx,ty,w\n1,2,3,4\n").unwrap();
        let loaded = load_correspondences_csv(&path).unwrap();
        assert_eq!(loaded[0].weight, 1.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn displacement_field_file_roundtrip_is_exact() {
        let corrs: Vec<Correspondence> = (0..8)
            .map(|k| {
                let s = (15.0 + 30.0 * k as f64, 20.0 + 17.0 * k as f64 % 150.0);
                Correspondence {
                    source: s,
                    target: (s.0 + 1.5 + 0.1 * k as f64, s.1 - 2.0),
                    weight: 1.0,
                }
            })
            .collect();
        let field = build_displacement_field(&corrs, 250, 180, 90, 0.05, 2.0).unwrap();
        let dir = std::env::temp_dir().join("velofield-dfield-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.txt");
        save_displacement_field(&field, &path).unwrap();
        assert_eq!(load_displacement_field(&path).unwrap(), field);
        std::fs::remove_dir_all(&dir).ok();
    }
}
