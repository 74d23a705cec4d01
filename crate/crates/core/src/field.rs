//! Per-pixel 2D velocity histograms aggregated from tracklets.
//!
//! Every image pixel touched by a tracklet segment accumulates a histogram
//! over (vx, vy). Rather than incrementing a single bin, each deposit
//! spreads a truncated Gaussian blob of total mass one around the
//! continuous velocity vector, so histogram mass counts observations while
//! nearby velocities reinforce each other. Storage is sparse: most of an
//! aerial frame is not road, and a dense bin cube would be enormous.

use std::collections::HashMap;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{rasterize_segment, Raster, RasterImage, RgbImage};
use crate::track::Tracklet;

const VFF_MAGIC: &[u8; 4] = b"VFF1";

/// Bin layout of the velocity plane: a square grid of odd side length
/// covering `[-vmax, vmax]` per axis, with the centre bin at velocity
/// zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGeometry {
    /// Largest representable velocity component, pixels per frame.
    pub vmax: f64,
    /// Bin width, pixels per frame.
    pub bin_width: f64,
}

impl Default for FieldGeometry {
    fn default() -> Self {
        FieldGeometry {
            vmax: 30.0,
            bin_width: 1.0,
        }
    }
}

impl FieldGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.vmax > 0.0) || !self.vmax.is_finite() {
            return Err(Error::config("vmax", "must be positive and finite"));
        }
        if !(self.bin_width > 0.0) || !self.bin_width.is_finite() {
            return Err(Error::config("bin_width", "must be positive and finite"));
        }
        if self.half_bins() > 2000 {
            return Err(Error::config(
                "vmax/bin_width",
                "more than 4001 bins per axis",
            ));
        }
        Ok(())
    }

    /// Bins on either side of the zero bin.
    pub fn half_bins(&self) -> u32 {
        (self.vmax / self.bin_width).round() as u32
    }

    pub fn bins_per_axis(&self) -> u32 {
        2 * self.half_bins() + 1
    }

    /// Velocity at the centre of bin `i` along one axis.
    pub fn axis_centre(&self, i: u32) -> f64 {
        (i as f64 - self.half_bins() as f64) * self.bin_width
    }

    pub fn bin_centre(&self, ix: u32, iy: u32) -> (f64, f64) {
        (self.axis_centre(ix), self.axis_centre(iy))
    }

    /// Continuous bin coordinate of a velocity component (the zero bin's
    /// centre maps to `half_bins`).
    fn axis_coord(&self, v: f64) -> f64 {
        v / self.bin_width + self.half_bins() as f64
    }

    pub fn nearest_bin(&self, v: (f64, f64)) -> (u32, u32) {
        let n = self.bins_per_axis() as f64 - 1.0;
        let ix = self.axis_coord(v.0).round().clamp(0.0, n) as u32;
        let iy = self.axis_coord(v.1).round().clamp(0.0, n) as u32;
        (ix, iy)
    }

    /// Row-major flat index; ascending order is ascending (vy, vx).
    pub fn flat(&self, ix: u32, iy: u32) -> u32 {
        iy * self.bins_per_axis() + ix
    }

    pub fn unflat(&self, flat: u32) -> (u32, u32) {
        let n = self.bins_per_axis();
        (flat % n, flat / n)
    }

    fn check_velocity(&self, v: (f64, f64)) -> Result<()> {
        if v.0.abs() > self.vmax || v.1.abs() > self.vmax || !v.0.is_finite() || !v.1.is_finite()
        {
            return Err(Error::VelocityOutOfRange {
                vx: v.0,
                vy: v.1,
                vmax: self.vmax,
            });
        }
        Ok(())
    }

    /// Blob bin weights for one deposit: a 2D Gaussian centred on the
    /// continuous velocity, truncated at three sigma, clipped to the grid
    /// and renormalized so the masses sum to one. A sigma of zero (or one
    /// so small the window is empty) degenerates to the nearest bin.
    fn blob_weights(&self, v: (f64, f64), blob_sigma: f64) -> Vec<(u32, f64)> {
        let cx = self.axis_coord(v.0);
        let cy = self.axis_coord(v.1);
        let n = self.bins_per_axis();
        let window = |c: f64| -> Option<(u32, u32)> {
            let lo = (c - 3.0 * blob_sigma).ceil().max(0.0) as i64;
            let hi = (c + 3.0 * blob_sigma).floor().min(n as f64 - 1.0) as i64;
            (lo <= hi).then_some((lo as u32, hi as u32))
        };
        if blob_sigma > 0.0 {
            if let (Some((x0, x1)), Some((y0, y1))) = (window(cx), window(cy)) {
                let gauss = |i: u32, c: f64| {
                    let d = i as f64 - c;
                    (-d * d / (2.0 * blob_sigma * blob_sigma)).exp()
                };
                let mut weights = Vec::with_capacity(
                    ((x1 - x0 + 1) * (y1 - y0 + 1)) as usize,
                );
                let mut total = 0.0;
                for iy in y0..=y1 {
                    let wy = gauss(iy, cy);
                    for ix in x0..=x1 {
                        let w = gauss(ix, cx) * wy;
                        total += w;
                        weights.push((self.flat(ix, iy), w));
                    }
                }
                for (_, w) in &mut weights {
                    *w /= total;
                }
                return weights;
            }
        }
        let (ix, iy) = self.nearest_bin(v);
        vec![(self.flat(ix, iy), 1.0)]
    }
}

/// Sparse per-pixel velocity histogram field over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    width: usize,
    height: usize,
    geometry: FieldGeometry,
    pixels: HashMap<usize, BTreeMap<u32, f64>>,
}

impl VelocityField {
    pub fn new(width: usize, height: usize, geometry: FieldGeometry) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster { width, height });
        }
        geometry.validate()?;
        Ok(VelocityField {
            width,
            height,
            geometry,
            pixels: HashMap::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn geometry(&self) -> &FieldGeometry {
        &self.geometry
    }

    /// Number of pixels holding a non-empty histogram.
    pub fn occupied_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn histogram_at(&self, x: usize, y: usize) -> Option<&BTreeMap<u32, f64>> {
        self.pixels.get(&(y * self.width + x))
    }

    /// Sums in pixel order, so equal fields always report bit-equal mass.
    pub fn total_mass(&self) -> f64 {
        let mut keys: Vec<usize> = self.pixels.keys().copied().collect();
        keys.sort_unstable();
        keys.iter()
            .map(|k| self.pixels[k].values().sum::<f64>())
            .sum()
    }

    /// Deposits one segment: every rasterized pixel between the endpoints
    /// gains a blob of total mass one centred on `velocity`.
    pub fn deposit_segment(
        &mut self,
        from: (f64, f64),
        to: (f64, f64),
        velocity: (f64, f64),
        blob_sigma: f64,
    ) -> Result<()> {
        for (x, y) in [from, to] {
            if !(0.0..=(self.width - 1) as f64).contains(&x)
                || !(0.0..=(self.height - 1) as f64).contains(&y)
            {
                return Err(Error::CentreOutOfBounds {
                    x,
                    y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        self.geometry.check_velocity(velocity)?;
        let blob = self.geometry.blob_weights(velocity, blob_sigma);
        // Rounded samples of a segment between in-range endpoints stay in
        // range, so the rasterized pixels need no further checks.
        for (px, py) in rasterize_segment(from, to) {
            let hist = self
                .pixels
                .entry(py as usize * self.width + px as usize)
                .or_default();
            for &(bin, mass) in &blob {
                *hist.entry(bin).or_insert(0.0) += mass;
            }
        }
        Ok(())
    }

    /// Deposits both segments of a tracklet with their respective
    /// velocities.
    pub fn deposit_tracklet(&mut self, tracklet: &Tracklet, blob_sigma: f64) -> Result<()> {
        let [c0, c1, c2] = tracklet.centres;
        let (v1, v2) = tracklet.velocities();
        self.deposit_segment(c0, c1, v1, blob_sigma)?;
        self.deposit_segment(c1, c2, v2, blob_sigma)
    }

    pub fn deposit_all(&mut self, tracklets: &[Tracklet], blob_sigma: f64) -> Result<()> {
        for t in tracklets {
            self.deposit_tracklet(t, blob_sigma)?;
        }
        Ok(())
    }

    /// Adds another field's mass into this one. Fields built from disjoint
    /// tracklet partitions merge into the same result as sequential
    /// deposition, which is what makes parallel aggregation safe.
    pub fn merge(&mut self, other: &VelocityField) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            });
        }
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch {
                left_vmax: self.geometry.vmax,
                right_vmax: other.geometry.vmax,
                left_bin: self.geometry.bin_width,
                right_bin: other.geometry.bin_width,
            });
        }
        for (&pixel, hist) in &other.pixels {
            let mine = self.pixels.entry(pixel).or_default();
            for (&bin, &mass) in hist {
                *mine.entry(bin).or_insert(0.0) += mass;
            }
        }
        Ok(())
    }

    /// Modal bin of one pixel's histogram, or None where nothing was
    /// deposited. Ties break toward the lowest (vy, vx) bin.
    pub fn mode_at(&self, x: usize, y: usize) -> Option<PixelMode> {
        let hist = self.histogram_at(x, y)?;
        let mut best: Option<(u32, f64)> = None;
        for (&bin, &mass) in hist {
            match best {
                Some((_, m)) if mass <= m => {}
                _ => best = Some((bin, mass)),
            }
        }
        let (flat, mass) = best?;
        let (ix, iy) = self.geometry.unflat(flat);
        let (vx, vy) = self.geometry.bin_centre(ix, iy);
        Some(PixelMode {
            speed: vx.hypot(vy),
            direction: vy.atan2(vx).rem_euclid(TAU),
            bin: (ix, iy),
            mass,
        })
    }

    /// Modal speed and direction over the whole image.
    pub fn mode_map(&self) -> ModeMap {
        let mut speed = RasterImage::new(self.width, self.height).expect("validated dims");
        let mut direction = RasterImage::new(self.width, self.height).expect("validated dims");
        let mut state = Raster::new(self.width, self.height).expect("validated dims");
        for y in 0..self.height {
            for x in 0..self.width {
                let Some(mode) = self.mode_at(x, y) else {
                    continue;
                };
                speed.set(x, y, mode.speed);
                if mode.speed == 0.0 {
                    state.set(x, y, PixelState::ZeroSpeed);
                } else {
                    direction.set(x, y, mode.direction);
                    state.set(x, y, PixelState::Moving);
                }
            }
        }
        ModeMap {
            speed,
            direction,
            state,
        }
    }
}

/// Modal velocity of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMode {
    /// Euclidean norm of the modal bin centre, pixels per frame.
    pub speed: f64,
    /// Angle of the modal bin centre, radians in [0, 2pi).
    pub direction: f64,
    /// Bin indices (ix, iy).
    pub bin: (u32, u32),
    pub mass: f64,
}

/// What a pixel's histogram says about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelState {
    /// No tracklet ever touched this pixel.
    #[default]
    Absent,
    /// Modal velocity is the zero bin; a direction would be meaningless.
    ZeroSpeed,
    Moving,
}

/// Modal speed (px/frame) and direction (radians) images with a per-pixel
/// validity state. Speed and direction are zero wherever the state says
/// they carry no information.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMap {
    pub speed: RasterImage,
    pub direction: RasterImage,
    pub state: Raster<PixelState>,
}

/// Rendered views of a field over a base image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMaps {
    /// Modal speed scaled by 1/vmax into [0,1]; absent pixels are 0.
    pub speed_gray: RasterImage,
    /// Speed color ramp blended over the base image.
    pub speed_overlay: RgbImage,
    /// Direction hue blended over the base image; zero-speed and absent
    /// pixels show the base.
    pub direction_overlay: RgbImage,
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_u8 = |f: f64| ((f + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Speed color ramp: hue runs from blue (240 degrees) at zero to red (0)
/// at `vmax`, fully saturated.
pub fn speed_color(speed: f64, vmax: f64) -> [u8; 3] {
    let t = (speed / vmax).clamp(0.0, 1.0);
    hsv_to_rgb(240.0 * (1.0 - t), 1.0, 1.0)
}

/// Direction color: the angle maps directly to hue (0 rad = red,
/// advancing counterclockwise through the HSV wheel).
pub fn direction_color(direction: f64) -> [u8; 3] {
    hsv_to_rgb(direction.to_degrees(), 1.0, 1.0)
}

fn gray_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blend(color: [u8; 3], base: u8, alpha: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, c) in out.iter_mut().zip(color) {
        *o = (alpha * c as f64 + (1.0 - alpha) * base as f64).round() as u8;
    }
    out
}

/// Renders the field's modal maps over a base intensity image. `alpha` is
/// the overlay opacity: 1.0 paints pure ramp colors, 0.0 leaves the base
/// untouched.
pub fn render_maps(
    field: &VelocityField,
    base: &RasterImage,
    alpha: f64,
) -> Result<RenderedMaps> {
    if base.dims() != (field.width(), field.height()) {
        return Err(Error::DimensionMismatch {
            left_width: field.width(),
            left_height: field.height(),
            right_width: base.width(),
            right_height: base.height(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0, 1]"));
    }
    let modes = field.mode_map();
    let (w, h) = base.dims();
    let vmax = field.geometry().vmax;
    let mut speed_gray = RasterImage::new(w, h)?;
    let mut speed_overlay = RgbImage::new(w, h)?;
    let mut direction_overlay = RgbImage::new(w, h)?;
    for y in 0..h {
        for x in 0..w {
            let bg = gray_to_u8(base.get(x, y));
            let base_rgb = [bg, bg, bg];
            match modes.state.get(x, y) {
                PixelState::Absent => {
                    speed_overlay.set(x, y, base_rgb);
                    direction_overlay.set(x, y, base_rgb);
                }
                PixelState::ZeroSpeed => {
                    speed_overlay.set(x, y, blend(speed_color(0.0, vmax), bg, alpha));
                    direction_overlay.set(x, y, base_rgb);
                }
                PixelState::Moving => {
                    let speed = modes.speed.get(x, y);
                    speed_gray.set(x, y, (speed / vmax).clamp(0.0, 1.0));
                    speed_overlay.set(x, y, blend(speed_color(speed, vmax), bg, alpha));
                    direction_overlay.set(
                        x,
                        y,
                        blend(direction_color(modes.direction.get(x, y)), bg, alpha),
                    );
                }
            }
        }
    }
    Ok(RenderedMaps {
        speed_gray,
        speed_overlay,
        direction_overlay,
    })
}

pub fn encode_field(field: &VelocityField) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VFF_MAGIC);
    out.extend_from_slice(&(field.width as u32).to_le_bytes());
    out.extend_from_slice(&(field.height as u32).to_le_bytes());
    out.extend_from_slice(&field.geometry.vmax.to_le_bytes());
    out.extend_from_slice(&field.geometry.bin_width.to_le_bytes());
    out.extend_from_slice(&(field.pixels.len() as u64).to_le_bytes());
    let mut order: Vec<usize> = field.pixels.keys().copied().collect();
    order.sort_unstable();
    for pixel in order {
        let hist = &field.pixels[&pixel];
        let x = (pixel % field.width) as u32;
        let y = (pixel / field.width) as u32;
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
        out.extend_from_slice(&(hist.len() as u32).to_le_bytes());
        for (&bin, &mass) in hist {
            out.extend_from_slice(&bin.to_le_bytes());
            out.extend_from_slice(&mass.to_le_bytes());
        }
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<VelocityField> {
    let bad = |detail: &str| Error::parse("VFF1 field", detail);
    if bytes.len() < 36 || &bytes[0..4] != VFF_MAGIC {
        return Err(bad("missing VFF1 magic"));
    }
    let mut pos = 4usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).ok_or_else(|| bad("length overflow"))?;
        if end > bytes.len() {
            return Err(bad("truncated"));
        }
        let slice = &bytes[pos..end];
        pos = end;
        Ok(slice)
    };
    let mut read_u32 = || -> Result<u32> {
        Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()))
    };
    let width = read_u32()? as usize;
    let height = read_u32()? as usize;
    let mut read_f64 = || -> Result<f64> {
        Ok(f64::from_le_bytes(take(8)?.try_into().unwrap()))
    };
    let vmax = read_f64()?;
    let bin_width = read_f64()?;
    let n_pixels = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut field = VelocityField::new(width, height, FieldGeometry { vmax, bin_width })?;
    let bin_limit = field.geometry.bins_per_axis() * field.geometry.bins_per_axis();
    for _ in 0..n_pixels {
        let x = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let y = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n_bins = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if x >= width || y >= height {
            return Err(bad("pixel outside image"));
        }
        let mut hist = BTreeMap::new();
        for _ in 0..n_bins {
            let bin = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let mass = f64::from_le_bytes(take(8)?.try_into().unwrap());
            if bin >= bin_limit {
                return Err(bad("bin index outside grid"));
            }
            if !mass.is_finite() || mass < 0.0 {
                return Err(bad("invalid bin mass"));
            }
            hist.insert(bin, mass);
        }
        if field.pixels.insert(y * width + x, hist).is_some() {
            return Err(bad("duplicate pixel record"));
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing data"));
    }
    Ok(field)
}

pub fn write_field(field: &VelocityField, path: &Path) -> Result<()> {
    fs::write(path, encode_field(field))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<VelocityField> {
    decode_field(&fs::read(path)?)
}
