//! Synthetic traffic scenes with exact ground truth.
//!
//! Vehicles travel along lane polylines at constant speed and render as
//! oriented bright rectangles over a static value-noise background, with
//! optional per-frame camera jitter and per-pixel intensity noise. The
//! trajectory solution is exact and independent of rendering noise, so a
//! simulation doubles as the oracle when checking what the detection and
//! tracking stages recover.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kvfile::{parse_lines, Line};
use crate::raster::RasterImage;

/// Hard bound on ground-truth acceleration magnitude, px/frame^2. Scene
/// validation rejects lane corners a vehicle could not turn through
/// without exceeding it.
pub const TRUTH_MAX_ACCELERATION: f64 = 1.74;

/// Largest lane speed the tracker's gates can follow.
pub const MAX_LANE_SPEED: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LaneDirection {
    #[default]
    Forward,
    /// Traverse the polyline from its last point to its first.
    Reverse,
}

/// One traffic lane: a polyline centreline traversed at constant speed.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneSpec {
    pub points: Vec<(f64, f64)>,
    /// Pixels per frame.
    pub speed: f64,
    /// Lane width in pixels; must fit a car.
    pub width: f64,
    /// Probability of attempting a spawn each frame.
    pub spawn_rate: f64,
    pub direction: LaneDirection,
}

/// Scene description: canvas, background texture, car shape and lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Mean background intensity in [0, 1].
    pub background_level: f64,
    /// Peak deviation of the background texture around its mean.
    pub texture_amplitude: f64,
    /// Lattice spacing of the background texture, pixels.
    pub texture_cell: usize,
    pub car_width: f64,
    pub car_length: f64,
    /// Minimum along-lane gap behind a newly spawned vehicle, pixels.
    pub min_headway: f64,
    pub lanes: Vec<LaneSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            background_level: 0.35,
            texture_amplitude: 0.08,
            texture_cell: 16,
            car_width: 8.0,
            car_length: 16.0,
            min_headway: 40.0,
            lanes: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width/height", "canvas must be non-empty"));
        }
        let positive = [
            ("background_level", self.background_level),
            ("car_width", self.car_width),
            ("car_length", self.car_length),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        if self.texture_amplitude < 0.0 || !self.texture_amplitude.is_finite() {
            return Err(Error::config("texture_amplitude", "must be non-negative"));
        }
        if self.texture_cell == 0 {
            return Err(Error::config("texture_cell", "must be positive"));
        }
        if self.min_headway < 0.0 || !self.min_headway.is_finite() {
            return Err(Error::config("min_headway", "must be non-negative"));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            let ctx = |msg: String| Error::config(format!("lane {i}"), msg);
            if lane.points.len() < 2 {
                return Err(ctx("needs at least two polyline points".into()));
            }
            for &(x, y) in &lane.points {
                if !x.is_finite() || !y.is_finite() {
                    return Err(ctx("polyline coordinates must be finite".into()));
                }
                if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64
                {
                    return Err(ctx(format!(
                        "point ({x}, {y}) outside {}x{} canvas",
                        self.width, self.height
                    )));
                }
            }
            if !(lane.speed > 0.0) || lane.speed > MAX_LANE_SPEED {
                return Err(ctx(format!(
                    "speed must lie in (0, {MAX_LANE_SPEED}] px/frame"
                )));
            }
            if lane.width < self.car_width {
                return Err(ctx("lane must be at least a car wide".into()));
            }
            if !(0.0..=1.0).contains(&lane.spawn_rate) {
                return Err(ctx("spawn_rate must lie in [0, 1]".into()));
            }
            // A corner turned in a single frame changes the velocity vector
            // by 2*speed*sin(angle/2); reject corners a car could not take.
            for w in lane.points.windows(3) {
                let a = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                let b = (w[2].0 - w[1].0, w[2].1 - w[1].1);
                let (la, lb) = (a.0.hypot(a.1), b.0.hypot(b.1));
                if la < 1e-9 || lb < 1e-9 {
                    return Err(ctx("repeated polyline points".into()));
                }
                let cos = ((a.0 * b.0 + a.1 * b.1) / (la * lb)).clamp(-1.0, 1.0);
                let turn = cos.acos();
                let dv = 2.0 * lane.speed * (turn / 2.0).sin();
                if dv > TRUTH_MAX_ACCELERATION {
                    return Err(ctx(format!(
                        "corner of {:.1} degrees at {} px/frame implies {dv:.2} px/frame^2 \
                         of acceleration (limit {TRUTH_MAX_ACCELERATION})",
                        turn.to_degrees(),
                        lane.speed
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rendering noise: additive per-pixel intensity noise and a global
/// per-frame translation of the whole image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub intensity_sigma: f64,
    pub jitter_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            intensity_sigma: 0.02,
            jitter_sigma: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            intensity_sigma: 0.0,
            jitter_sigma: 0.0,
        }
    }
}

/// Ground-truth state of one vehicle in one frame. Positions are ideal:
/// camera jitter moves the rendering, never the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub frame: usize,
    pub id: u32,
    pub centre: (f64, f64),
    /// Travel direction, radians in [0, 2pi).
    pub orientation: f64,
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

/// Arc-length parameterized polyline.
struct Polyline {
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    total: f64,
}

impl Polyline {
    fn new(points: Vec<(f64, f64)>) -> Polyline {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        let total = *cumulative.last().unwrap();
        Polyline {
            points,
            cumulative,
            total,
        }
    }

    fn segment_of(&self, s: f64) -> usize {
        let mut seg = match self
            .cumulative
            .binary_search_by(|c| c.total_cmp(&s))
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        seg = seg.min(self.points.len() - 2);
        seg
    }

    fn position(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.total);
        let seg = self.segment_of(s);
        let a = self.points[seg];
        let (tx, ty) = self.tangent(s);
        let along = s - self.cumulative[seg];
        (a.0 + along * tx, a.1 + along * ty)
    }

    fn tangent(&self, s: f64) -> (f64, f64) {
        let seg = self.segment_of(s.clamp(0.0, self.total));
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        (dx / len, dy / len)
    }
}

struct Placement {
    centre: (f64, f64),
    direction: f64,
    brightness: f64,
}

/// A solved scene: exact trajectories plus deterministic rendering.
pub struct Simulation {
    scene: SceneSpec,
    noise: NoiseSpec,
    n_frames: usize,
    truth: Vec<TruthRecord>,
    placements: Vec<Placement>,
    /// Index of the first placement of each frame, plus a final sentinel.
    frame_starts: Vec<usize>,
    lattice: RasterImage,
    render_seed: u64,
}

impl Simulation {
    /// Solves all trajectories up front. Rendering afterwards is pure and
    /// may happen frame by frame in any order.
    pub fn new(
        scene: SceneSpec,
        n_frames: usize,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<Simulation> {
        scene.validate()?;
        for (key, sigma) in [
            ("intensity_sigma", noise.intensity_sigma),
            ("jitter_sigma", noise.jitter_sigma),
        ] {
            if sigma < 0.0 || !sigma.is_finite() {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let render_seed = master.gen::<u64>();

        // Static background texture lattice; padded so jitter can shift
        // sampling beyond the canvas without running off the edge.
        let cell = scene.texture_cell;
        let lw = scene.width.div_ceil(cell) + 3;
        let lh = scene.height.div_ceil(cell) + 3;
        let mut lattice = RasterImage::new(lw, lh)?;
        for v in lattice.as_mut_slice() {
            *v = scene.background_level
                + scene.texture_amplitude * (2.0 * master.gen::<f64>() - 1.0);
        }

        let polylines: Vec<Polyline> = scene
            .lanes
            .iter()
            .map(|lane| {
                let mut pts = lane.points.clone();
                if lane.direction == LaneDirection::Reverse {
                    pts.reverse();
                }
                Polyline::new(pts)
            })
            .collect();

        struct Vehicle {
            id: u32,
            lane: usize,
            s: f64,
            brightness: f64,
        }
        let mut vehicles: Vec<Vehicle> = Vec::new();
        let mut next_id = 0u32;
        let mut truth = Vec::new();
        let mut placements = Vec::new();
        let mut frame_starts = Vec::with_capacity(n_frames + 1);
        let in_canvas = |c: (f64, f64)| {
            c.0 >= 0.0
                && c.1 >= 0.0
                && c.0 <= (scene.width - 1) as f64
                && c.1 <= (scene.height - 1) as f64
        };
        for frame in 0..n_frames {
            frame_starts.push(placements.len());
            for (li, lane) in scene.lanes.iter().enumerate() {
                let roll: f64 = master.gen();
                let clear = vehicles
                    .iter()
                    .filter(|v| v.lane == li)
                    .all(|v| v.s >= scene.min_headway);
                if roll < lane.spawn_rate && clear {
                    vehicles.push(Vehicle {
                        id: next_id,
                        lane: li,
                        s: 0.0,
                        brightness: master.gen_range(0.7..1.0),
                    });
                    next_id += 1;
                }
            }
            for v in &vehicles {
                let poly = &polylines[v.lane];
                let centre = poly.position(v.s);
                if !in_canvas(centre) {
                    continue;
                }
                let (tx, ty) = poly.tangent(v.s);
                let speed = scene.lanes[v.lane].speed;
                let direction = ty.atan2(tx).rem_euclid(TAU);
                truth.push(TruthRecord {
                    frame,
                    id: v.id,
                    centre,
                    orientation: direction,
                    velocity: (tx * speed, ty * speed),
                });
                placements.push(Placement {
                    centre,
                    direction,
                    brightness: v.brightness,
                });
            }
            for v in &mut vehicles {
                v.s += scene.lanes[v.lane].speed;
            }
            vehicles.retain(|v| v.s <= polylines[v.lane].total);
        }
        frame_starts.push(placements.len());
        Ok(Simulation {
            scene,
            noise,
            n_frames,
            truth,
            placements,
            frame_starts,
            lattice,
            render_seed,
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn truth(&self) -> &[TruthRecord] {
        &self.truth
    }

    /// Renders one frame. Each frame draws from its own random stream, so
    /// rendering order (or skipping frames entirely) cannot change the
    /// pixels.
    pub fn render_frame(&self, frame: usize) -> RasterImage {
        assert!(frame < self.n_frames, "frame {frame} out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.render_seed);
        rng.set_stream(frame as u64 + 1);
        let (jx, jy) = if self.noise.jitter_sigma > 0.0 {
            let jitter = Normal::new(0.0, self.noise.jitter_sigma).expect("validated sigma");
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };

        let (w, h) = (self.scene.width, self.scene.height);
        let cell = self.scene.texture_cell as f64;
        let (lw, lh) = self.lattice.dims();
        let mut img = RasterImage::new(w, h).expect("validated dims");
        for y in 0..h {
            for x in 0..w {
                let u = ((x as f64 - jx) / cell).clamp(0.0, (lw - 1) as f64);
                let v = ((y as f64 - jy) / cell).clamp(0.0, (lh - 1) as f64);
                img.set(x, y, self.lattice.bilinear(u, v));
            }
        }

        let start = self.frame_starts[frame];
        let end = self.frame_starts[frame + 1];
        for p in &self.placements[start..end] {
            draw_vehicle(
                &mut img,
                (p.centre.0 + jx, p.centre.1 + jy),
                p.direction,
                self.scene.car_length,
                self.scene.car_width,
                p.brightness,
            );
        }

        if self.noise.intensity_sigma > 0.0 {
            let pixel_noise =
                Normal::new(0.0, self.noise.intensity_sigma).expect("validated sigma");
            for v in img.as_mut_slice() {
                *v = (*v + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn generate(&self) -> Vec<RasterImage> {
        (0..self.n_frames).map(|f| self.render_frame(f)).collect()
    }
}

/// Anti-aliased oriented rectangle: each pixel blends toward the car
/// brightness by its 4x4-subsampled coverage.
fn draw_vehicle(
    img: &mut RasterImage,
    centre: (f64, f64),
    direction: f64,
    length: f64,
    width: f64,
    brightness: f64,
) {
    let (sin, cos) = direction.sin_cos();
    let (half_l, half_w) = (length / 2.0, width / 2.0);
    let reach = half_l + half_w + 1.0;
    let x0 = ((centre.0 - reach).floor().max(0.0)) as usize;
    let y0 = ((centre.1 - reach).floor().max(0.0)) as usize;
    let x1 = ((centre.0 + reach).ceil().min((img.width() - 1) as f64)) as usize;
    let y1 = ((centre.1 + reach).ceil().min((img.height() - 1) as f64)) as usize;
    if centre.0 + reach < 0.0 || centre.1 + reach < 0.0 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0u32;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5 - centre.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5 - centre.1;
                    let along = px * cos + py * sin;
                    let across = -px * sin + py * cos;
                    if along.abs() <= half_l && across.abs() <= half_w {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let coverage = hits as f64 / 16.0;
                let v = img.get(x, y);
                img.set(x, y, v * (1.0 - coverage) + brightness * coverage);
            }
        }
    }
}

/// Car centres of one frame, in truth order; the training labeler's input.
pub fn truth_labels(truth: &[TruthRecord], frame: usize) -> Vec<(f64, f64)> {
    truth
        .iter()
        .filter(|t| t.frame == frame)
        .map(|t| t.centre)
        .collect()
}

pub fn save_truth_csv(truth: &[TruthRecord], path: &Path) -> Result<()> {
    let mut out = String::from("frame,id,x,y,theta,vx,vy\n");
    for t in truth {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.frame, t.id, t.centre.0, t.centre.1, t.orientation, t.velocity.0, t.velocity.1
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_truth_csv(path: &Path) -> Result<Vec<TruthRecord>> {
    let text = fs::read_to_string(path)?;
    let mut truth = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame,")) {
            continue;
        }
        let bad = || Error::parse("truth CSV", format!("line {}: `{line}`", idx + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        truth.push(TruthRecord {
            frame: fields[0].parse().map_err(|_| bad())?,
            id: fields[1].parse().map_err(|_| bad())?,
            centre: (num(fields[2])?, num(fields[3])?),
            orientation: num(fields[4])?,
            velocity: (num(fields[5])?, num(fields[6])?),
        });
    }
    Ok(truth)
}

/// Parses a scene file: top-level `key = value` pairs followed by one
/// `[lane]` section per lane. Lane polylines are written as
/// `points = x,y x,y ...`.
pub fn parse_scene(text: &str) -> Result<SceneSpec> {
    let mut scene = SceneSpec::default();
    let mut lanes: Vec<LaneSpec> = Vec::new();
    let mut in_lane = false;
    for (line_no, line) in parse_lines(text, "scene file")? {
        match line {
            Line::Section(name) => {
                if name != "lane" {
                    return Err(Error::parse(
                        "scene file",
                        format!("line {line_no}: unknown section `[{name}]`"),
                    ));
                }
                in_lane = true;
                lanes.push(LaneSpec {
                    points: Vec::new(),
                    speed: 0.0,
                    width: 0.0,
                    spawn_rate: 0.0,
                    direction: LaneDirection::Forward,
                });
            }
            Line::Pair(key, value) => {
                let bad_value = |what: &str| {
                    Error::config(key, format!("line {line_no}: expected {what}, got `{value}`"))
                };
                if in_lane {
                    let lane = lanes.last_mut().expect("inside a section");
                    match key {
                        "points" => {
                            for pair in value.split_whitespace() {
                                let (x, y) = pair
                                    .split_once(',')
                                    .ok_or_else(|| bad_value("x,y pairs"))?;
                                lane.points.push((
                                    x.parse().map_err(|_| bad_value("x,y pairs"))?,
                                    y.parse().map_err(|_| bad_value("x,y pairs"))?,
                                ));
                            }
                        }
                        "speed" => lane.speed = value.parse().map_err(|_| bad_value("a number"))?,
                        "width" => lane.width = value.parse().map_err(|_| bad_value("a number"))?,
                        "spawn_rate" => {
                            lane.spawn_rate = value.parse().map_err(|_| bad_value("a number"))?
                        }
                        "direction" => {
                            lane.direction = match value {
                                "forward" => LaneDirection::Forward,
                                "reverse" => LaneDirection::Reverse,
                                _ => return Err(bad_value("`forward` or `reverse`")),
                            }
                        }
                        other => {
                            return Err(Error::UnknownConfigKey {
                                key: format!("lane {other}"),
                            })
                        }
                    }
                } else {
                    match key {
                        "width" => scene.width = value.parse().map_err(|_| bad_value("an integer"))?,
                        "height" => {
                            scene.height = value.parse().map_err(|_| bad_value("an integer"))?
                        }
                        "background_level" => {
                            scene.background_level =
                                value.parse().map_err(|_| bad_value("a number"))?
                        }
                        "texture_amplitude" => {
                            scene.texture_amplitude =
                                value.parse().map_err(|_| bad_value("a number"))?
                        }
                        "texture_cell" => {
                            scene.texture_cell =
                                value.parse().map_err(|_| bad_value("an integer"))?
                        }
                        "car_width" => {
                            scene.car_width = value.parse().map_err(|_| bad_value("a number"))?
                        }
                        "car_length" => {
                            scene.car_length = value.parse().map_err(|_| bad_value("a number"))?
                        }
                        "min_headway" => {
                            scene.min_headway = value.parse().map_err(|_| bad_value("a number"))?
                        }
                        other => {
                            return Err(Error::UnknownConfigKey {
                                key: other.to_string(),
                            })
                        }
                    }
                }
            }
        }
    }
    for (i, lane) in lanes.iter().enumerate() {
        for (key, v) in [
            ("speed", lane.speed),
            ("width", lane.width),
        ] {
            if v == 0.0 {
                return Err(Error::config(
                    format!("lane {i}"),
                    format!("missing required key `{key}`"),
                ));
            }
        }
        if lane.points.is_empty() {
            return Err(Error::config(
                format!("lane {i}"),
                "missing required key `points`",
            ));
        }
    }
    scene.lanes = lanes;
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    parse_scene(&fs::read_to_string(path)?)
}
