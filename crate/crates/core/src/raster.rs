//! Raster containers, integral images, separable blur, segment
//! rasterization and the image file formats used by the pipeline.
//!
//! Intensity rasters store `f64` in `[0, 1]`; classifier responses use the
//! same container without the range restriction. All buffers are row-major
//! with `(0, 0)` in the top-left corner, x growing right and y growing down.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Grayscale intensity or classifier response image.
pub type RasterImage = Raster<f64>;

/// Per-pixel region labels; 0 means unassigned.
pub type LabelMap = Raster<u32>;

impl<T: Copy + Default> Raster<T> {
    /// Creates a raster filled with `T::default()`.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster { width, height });
        }
        Ok(Raster {
            width,
            height,
            data: vec![T::default(); width * height],
        })
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster { width, height });
        }
        if data.len() != width * height {
            return Err(Error::DataSizeMismatch {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        self.data[y * self.width + x] = value;
    }

    /// Reads with indices clamped to the border, the edge policy used by the
    /// blur and the background sampler.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> T {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        assert!(y < self.height, "row out of bounds");
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `width x height` window anchored at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::RectOutOfBounds {
                x0,
                y0,
                x1: x0 + width,
                y1: y0 + height,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Raster::from_vec(width, height, data)
    }
}

impl RasterImage {
    /// Bilinear sample at a continuous position. The caller must keep
    /// `(x, y)` inside `[0, width-1] x [0, height-1]`.
    #[inline]
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        debug_assert!(x >= 0.0 && y >= 0.0);
        debug_assert!(x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.data[y0 * self.width + x0] * (1.0 - fx) + self.data[y0 * self.width + x1] * fx;
        let bot = self.data[y1 * self.width + x0] * (1.0 - fx) + self.data[y1 * self.width + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Summed-area table with one extra row and column of zeros, so any
/// rectangle sum is four lookups.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &RasterImage) -> Self {
        let (w, h) = img.dims();
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let src = img.row(y);
            let mut run = 0.0;
            for x in 0..w {
                run += src[x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + run;
            }
        }
        IntegralImage {
            width: w,
            height: h,
            sums,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Row `y` of the padded table, `width + 1` entries. `y` may be `height`.
    #[inline]
    pub(crate) fn padded_row(&self, y: usize) -> &[f64] {
        let stride = self.width + 1;
        &self.sums[y * stride..(y + 1) * stride]
    }

    /// Sum over the half-open rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<f64> {
        if x0 > x1 || y0 > y1 || x1 > self.width || y1 > self.height {
            return Err(Error::RectOutOfBounds {
                x0,
                y0,
                x1,
                y1,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.at(x1, y1) - self.at(x0, y1) - self.at(x1, y0) + self.at(x0, y0))
    }

    /// Sum over `[x0, x1) x [y0, y1)` intersected with the image; pixels
    /// outside contribute zero, an empty intersection sums to zero.
    #[inline]
    pub fn rect_sum_clamped(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> f64 {
        let x0 = x0.clamp(0, self.width as i64) as usize;
        let x1 = x1.clamp(0, self.width as i64) as usize;
        let y0 = y0.clamp(0, self.height as i64) as usize;
        let y1 = y1.clamp(0, self.height as i64) as usize;
        if x0 >= x1 || y0 >= y1 {
            return 0.0;
        }
        self.at(x1, y1) - self.at(x0, y1) - self.at(x1, y0) + self.at(x0, y0)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 * inv).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    kernel
}

/// Separable Gaussian blur with border clamping. The kernel is truncated at
/// three standard deviations and renormalized; `sigma == 0` returns a copy.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> RasterImage {
    assert!(sigma.is_finite() && sigma >= 0.0, "blur sigma must be finite and non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;

    let mut horizontal = Raster::new(w, h).expect("source raster is non-empty");
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, weight) in kernel.iter().enumerate() {
                acc += weight * img.get_clamped(x as i64 + i as i64 - radius, y as i64);
            }
            horizontal.set(x, y, acc);
        }
    }
    let mut out = Raster::new(w, h).expect("source raster is non-empty");
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, weight) in kernel.iter().enumerate() {
                acc += weight * horizontal.get_clamped(x as i64, y as i64 + i as i64 - radius);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Pixels traced by a straight segment between two continuous points.
///
/// The segment is sampled at unit steps along its major axis (endpoints
/// included), each sample is rounded to the nearest pixel and consecutive
/// duplicates are dropped. Consecutive output pixels are 8-adjacent, and the
/// result contains the same pixels in reverse when the endpoints are
/// swapped.
pub fn rasterize_segment(p0: (f64, f64), p1: (f64, f64)) -> Vec<(i64, i64)> {
    assert!(
        p0.0.is_finite() && p0.1.is_finite() && p1.0.is_finite() && p1.1.is_finite(),
        "segment endpoints must be finite"
    );
    // Walk in a canonical direction so both endpoint orders round to the
    // identical pixel set.
    let swapped = (p1.0, p1.1) < (p0.0, p0.1);
    let (a, b) = if swapped { (p1, p0) } else { (p0, p1) };
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    let steps = dx.abs().max(dy.abs()).ceil() as usize;
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = if steps == 0 {
            0.0
        } else {
            i as f64 / steps as f64
        };
        let px = (a.0 + t * dx).round() as i64;
        let py = (a.1 + t * dy).round() as i64;
        if out.last() != Some(&(px, py)) {
            out.push((px, py));
        }
    }
    if swapped {
        out.reverse();
    }
    out
}

/// 8-bit RGB image for the rendered overlay maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster { width, height });
        }
        Ok(RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

// ---------------------------------------------------------------------------
// PGM (P5), PPM (P6)
// ---------------------------------------------------------------------------

/// Encodes intensities in `[0, 1]` as a binary PGM. Values are clamped,
/// scaled by `maxval` and rounded; `maxval` above 255 switches to the
/// two-byte big-endian sample format.
pub fn encode_pgm(img: &RasterImage, maxval: u16) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(Error::config("maxval", "must be positive"));
    }
    let (w, h) = img.dims();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    let scale = maxval as f64;
    for &v in img.as_slice() {
        let q = (v.clamp(0.0, 1.0) * scale).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<RasterImage> {
    let bad = |detail: &str| Error::parse("PGM image", detail);
    let mut pos = 0usize;

    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse("PGM image", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if next_token(&mut pos)? != "P5" {
        return Err(bad("not a binary PGM (expected magic `P5`)"));
    }
    let width: usize = next_token(&mut pos)?
        .parse()
        .map_err(|_| bad("invalid width"))?;
    let height: usize = next_token(&mut pos)?
        .parse()
        .map_err(|_| bad("invalid height"))?;
    let maxval: u32 = next_token(&mut pos)?
        .parse()
        .map_err(|_| bad("invalid maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;

    let pixels = width
        .checked_mul(height)
        .ok_or_else(|| bad("image dimensions overflow"))?;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    if bytes.len() < pos + pixels * bytes_per {
        return Err(bad("truncated sample data"));
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(pixels);
    if bytes_per == 1 {
        for &b in &bytes[pos..pos + pixels] {
            data.push(b as f64 / scale);
        }
    } else {
        for chunk in bytes[pos..pos + pixels * 2].chunks_exact(2) {
            data.push(u16::from_be_bytes([chunk[0], chunk[1]]) as f64 / scale);
        }
    }
    Raster::from_vec(width, height, data)
}

pub fn write_pgm(img: &RasterImage, path: &Path, maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(img, maxval)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<RasterImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_bytes());
    out
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// VFR1: lossless raster snapshot
// ---------------------------------------------------------------------------

/// Contents of a VFR1 file: either a float raster (bit-exact responses,
/// intensities) or a label map.
#[derive(Debug, Clone, PartialEq)]
pub enum VfrData {
    F64(RasterImage),
    U32(LabelMap),
}

const VFR_MAGIC: &[u8; 4] = b"VFR1";
const VFR_KIND_F64: u32 = 0;
const VFR_KIND_U32: u32 = 1;

/// VFR1 layout: magic `VFR1`, then little-endian u32 kind (0 = f64,
/// 1 = u32), u32 width, u32 height, then row-major little-endian samples.
pub fn encode_vfr(data: &VfrData) -> Vec<u8> {
    let (kind, w, h) = match data {
        VfrData::F64(img) => (VFR_KIND_F64, img.width(), img.height()),
        VfrData::U32(map) => (VFR_KIND_U32, map.width(), map.height()),
    };
    let sample_bytes = match data {
        VfrData::F64(_) => 8,
        VfrData::U32(_) => 4,
    };
    let mut out = Vec::with_capacity(16 + w * h * sample_bytes);
    out.extend_from_slice(VFR_MAGIC);
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    match data {
        VfrData::F64(img) => {
            for &v in img.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        VfrData::U32(map) => {
            for &v in map.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_vfr(bytes: &[u8]) -> Result<VfrData> {
    let bad = |detail: &str| Error::parse("VFR1 raster", detail);
    if bytes.len() < 16 || &bytes[0..4] != VFR_MAGIC {
        return Err(bad("missing VFR1 magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let kind = u32_at(4);
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let pixels = width
        .checked_mul(height)
        .ok_or_else(|| bad("dimensions overflow"))?;
    match kind {
        VFR_KIND_F64 => {
            if bytes.len() != 16 + pixels * 8 {
                return Err(bad("sample data length mismatch"));
            }
            let data = bytes[16..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(VfrData::F64(Raster::from_vec(width, height, data)?))
        }
        VFR_KIND_U32 => {
            if bytes.len() != 16 + pixels * 4 {
                return Err(bad("sample data length mismatch"));
            }
            let data = bytes[16..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(VfrData::U32(Raster::from_vec(width, height, data)?))
        }
        other => Err(bad(&format!("unknown sample kind {other}"))),
    }
}

pub fn write_vfr(data: &VfrData, path: &Path) -> Result<()> {
    fs::write(path, encode_vfr(data))?;
    Ok(())
}

pub fn read_vfr(path: &Path) -> Result<VfrData> {
    decode_vfr(&fs::read(path)?)
}
