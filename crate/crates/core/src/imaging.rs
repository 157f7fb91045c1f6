//! Image containers, raster/DICOM decoding and the canonical image file format.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every canonical image.
pub const CANONICAL_SIZE: usize = 1024;

const CANONICAL_MAGIC: &[u8; 4] = b"CXRC";
const CANONICAL_VERSION: u32 = 1;

/// A grayscale radiograph as decoded from disk, before any normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    bit_depth: u8,
    pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::InvalidImage(format!("unsupported bit depth {bit_depth}")));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        let max = max_for_depth(bit_depth);
        if let Some(v) = pixels.iter().find(|&&v| v as u32 > max) {
            return Err(Error::InvalidImage(format!(
                "intensity {v} exceeds {bit_depth}-bit range"
            )));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn max_intensity(&self) -> u32 {
        max_for_depth(self.bit_depth)
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    /// Copies the sub-rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        Self {
            width: x1 - x0,
            height: y1 - y0,
            bit_depth: self.bit_depth,
            pixels,
        }
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<u16>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            pixels,
            ..self.clone()
        }
    }
}

fn max_for_depth(bit_depth: u8) -> u32 {
    (1u32 << bit_depth) - 1
}

/// Row-major single-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-center coordinates; samples outside
    /// `[0, w-1] x [0, h-1]` blend with zero.
    pub fn sample_zero_fill(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        if x0 >= 0 && y0 >= 0 && ((x0 + 1) as usize) < self.width && ((y0 + 1) as usize) < self.height {
            let i = y0 as usize * self.width + x0 as usize;
            let r0 = &self.data[i..i + 2];
            let r1 = &self.data[i + self.width..i + self.width + 2];
            let v = r0[0] as f64 * (1.0 - fx) * (1.0 - fy)
                + r0[1] as f64 * fx * (1.0 - fy)
                + r1[0] as f64 * (1.0 - fx) * fy
                + r1[1] as f64 * fx * fy;
            return v as f32;
        }
        let px = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize] as f64
            }
        };
        let v = px(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + px(x0 + 1, y0) * fx * (1.0 - fy)
            + px(x0, y0 + 1) * (1.0 - fx) * fy
            + px(x0 + 1, y0 + 1) * fx * fy;
        v as f32
    }

    /// Bilinear resample to `width x height` with half-pixel centers and
    /// clamped edges.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Plane {
        let (xs, ys) = (
            axis_samples(self.width, width),
            axis_samples(self.height, height),
        );
        let mut out = vec![0f32; width * height];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &self.data[y0 * self.width..(y0 + 1) * self.width];
            let r1 = &self.data[y1 * self.width..(y1 + 1) * self.width];
            let row = &mut out[oy * width..(oy + 1) * width];
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
                let bottom = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
                *o = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
        Plane::new(width, height, out)
    }

    /// Averages `factor x factor` blocks. Dimensions must be divisible by `factor`.
    pub fn downsample_area(&self, factor: usize) -> Plane {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut acc = vec![0f64; w * h];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let dst = &mut acc[(y / factor) * w..(y / factor + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                dst[x / factor] += v as f64;
            }
        }
        let norm = 1.0 / (factor * factor) as f64;
        Plane::new(w, h, acc.into_iter().map(|v| (v * norm) as f32).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Source coordinates `(i0, i1, frac)` for each destination index along one axis.
pub(crate) fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Half-open rectangle `[x0, x1) x [y0, y1)` holding real image content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PadBox {
    pub fn full(size: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: size,
            y1: size,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// A 1024x1024 image with intensities in `[0, 1]`, zero outside `pad_box`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalImage {
    plane: Plane,
    pad_box: PadBox,
}

impl CanonicalImage {
    pub fn new(plane: Plane, pad_box: PadBox) -> Result<Self> {
        if plane.width != CANONICAL_SIZE || plane.height != CANONICAL_SIZE {
            return Err(Error::ShapeMismatch {
                expected: format!("{CANONICAL_SIZE}x{CANONICAL_SIZE}"),
                actual: format!("{}x{}", plane.width, plane.height),
            });
        }
        Self::from_parts(plane, pad_box)
    }

    /// Like [`CanonicalImage::new`] but for any square size; used by tests and
    /// reduced-resolution tooling.
    pub fn from_parts(plane: Plane, pad_box: PadBox) -> Result<Self> {
        if plane.width != plane.height {
            return Err(Error::InvalidImage("canonical images are square".into()));
        }
        if pad_box.x1 > plane.width || pad_box.y1 > plane.height || pad_box.x0 >= pad_box.x1 || pad_box.y0 >= pad_box.y1 {
            return Err(Error::InvalidImage(format!("pad box {pad_box:?} out of range")));
        }
        if plane.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("intensity outside [0, 1]".into()));
        }
        Ok(Self { plane, pad_box })
    }

    pub(crate) fn from_parts_unchecked(plane: Plane, pad_box: PadBox) -> Self {
        Self { plane, pad_box }
    }

    pub fn size(&self) -> usize {
        self.plane.width
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn pixels(&self) -> &[f32] {
        &self.plane.data
    }

    pub fn pad_box(&self) -> PadBox {
        self.pad_box
    }

    pub fn into_plane(self) -> Plane {
        self.plane
    }

    /// Serializes as `CXRC | version | height | width | pad box | f32 LE pixels`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.plane.data.len() * 4);
        out.extend_from_slice(CANONICAL_MAGIC);
        for v in [
            CANONICAL_VERSION,
            self.plane.height as u32,
            self.plane.width as u32,
            self.pad_box.x0 as u32,
            self.pad_box.y0 as u32,
            self.pad_box.x1 as u32,
            self.pad_box.y1 as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.plane.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidImage(format!("canonical file: {m}"));
        if bytes.len() < 32 || &bytes[..4] != CANONICAL_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) as u32 != CANONICAL_VERSION {
            return Err(bad("unsupported version"));
        }
        let (h, w) = (word(1), word(2));
        let pad_box = PadBox {
            x0: word(3),
            y0: word(4),
            x1: word(5),
            y1: word(6),
        };
        let body = &bytes[32..];
        if body.len() != w * h * 4 {
            return Err(bad("truncated pixel data"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(Plane::new(w, h, data), pad_box)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// 8-bit PNG rendering for display.
    pub fn to_png(&self) -> Vec<u8> {
        plane_to_png(&self.plane)
    }
}

pub fn plane_to_png(plane: &Plane) -> Vec<u8> {
    let bytes: Vec<u8> = plane
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, bytes)
        .expect("plane dimensions");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encoding to memory");
    out
}

/// Writes via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Decodes an 8/16-bit grayscale raster or an uncompressed DICOM file.
pub fn decode_raw_image(bytes: &[u8]) -> Result<RawImage> {
    if crate::dicom::is_dicom(bytes) {
        return crate::dicom::decode(bytes);
    }
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if format == image::ImageFormat::Jpeg {
        tracing::warn!("lossy JPEG source; full-resolution lossless images are expected");
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            RawImage::new(w, h, 8, g.into_raw().into_iter().map(u16::from).collect())
        }
        image::DynamicImage::ImageLuma16(g) => RawImage::new(w, h, 16, g.into_raw()),
        other => {
            tracing::warn!("color image converted to grayscale");
            if other.color().bits_per_pixel() / other.color().channel_count() as u16 > 8 {
                RawImage::new(w, h, 16, other.to_luma16().into_raw())
            } else {
                RawImage::new(
                    w,
                    h,
                    8,
                    other.to_luma8().into_raw().into_iter().map(u16::from).collect(),
                )
            }
        }
    }
}

pub fn load_raw_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_image(&bytes).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes a raw image as PNG (8 or 16 bit grayscale).
pub fn encode_png(img: &RawImage) -> Vec<u8> {
    let mut out = Vec::new();
    let (w, h) = (img.width() as u32, img.height() as u32);
    if img.bit_depth() == 8 {
        let buf: Vec<u8> = img.pixels().iter().map(|&v| v as u8).collect();
        image::GrayImage::from_raw(w, h, buf)
            .expect("dimensions")
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("png encoding");
    } else {
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, img.pixels().to_vec())
            .expect("dimensions")
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("png encoding");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_image_validates_range_and_shape() {
        assert!(RawImage::new(0, 3, 8, vec![]).is_err());
        assert!(RawImage::new(2, 2, 8, vec![0, 1, 2]).is_err());
        assert!(RawImage::new(1, 1, 8, vec![256]).is_err());
        assert!(RawImage::new(1, 1, 12, vec![0]).is_err());
        assert_eq!(RawImage::new(1, 1, 16, vec![65535]).unwrap().max_intensity(), 65535);
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let mut plane = Plane::filled(8, 8, 0.0);
        plane.set(3, 4, 0.25);
        let img = CanonicalImage::from_parts(plane, PadBox { x0: 1, y0: 2, x1: 7, y1: 8 }).unwrap();
        let back = CanonicalImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        let bytes = img.to_bytes();
        assert!(CanonicalImage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_8_and_16_bit() {
        let a = RawImage::new(3, 2, 8, vec![0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(decode_raw_image(&encode_png(&a)).unwrap(), a);
        let b = RawImage::new(2, 2, 16, vec![0, 1000, 40000, 65535]).unwrap();
        assert_eq!(decode_raw_image(&encode_png(&b)).unwrap(), b);
    }

    #[test]
    fn truncated_png_fails_to_decode() {
        let a = RawImage::new(16, 16, 8, vec![7; 256]).unwrap();
        let png = encode_png(&a);
        assert!(matches!(decode_raw_image(&png[..png.len() / 2]), Err(Error::Decode(_))));
        assert!(decode_raw_image(b"not an image at all").is_err());
    }

    #[test]
    fn downsample_area_averages_blocks() {
        let p = Plane::new(4, 2, vec![0., 1., 2., 3., 4., 5., 6., 7.]);
        let d = p.downsample_area(2);
        assert_eq!(d.data, vec![2.5, 4.5]);
    }
}
