//! Deterministic canonicalization: border crop, brightness stretch,
//! aspect-preserving pad/resize to 1024x1024, and CLAHE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{CanonicalImage, PadBox, Plane, RawImage, CANONICAL_SIZE};

/// Fraction of a row/column that must be dark for it to count as border.
const DARK_LINE_FRACTION: f64 = 0.99;
pub const CLAHE_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub dark_threshold: f64,
    pub clahe_clip_limit: f64,
    pub clahe_tile_grid: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dark_threshold: 0.02,
            clahe_clip_limit: 2.0,
            clahe_tile_grid: (8, 8),
        }
    }
}

/// Full canonicalization: crop, brightness, resize, CLAHE.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Result<CanonicalImage> {
    let cropped = crop_borders(img, cfg.dark_threshold)?;
    let bright = standardize_brightness(&cropped);
    let canonical = resize_canonical(&bright);
    Ok(clahe(&canonical, cfg.clahe_clip_limit, cfg.clahe_tile_grid))
}

/// The "no preprocessing" path: geometry normalization only.
pub fn preprocess_resize_only(img: &RawImage) -> CanonicalImage {
    resize_canonical(img)
}

/// Trims leading/trailing rows then columns in which at least 99% of pixels
/// fall below `dark_threshold * max_intensity`.
pub fn crop_borders(img: &RawImage, dark_threshold: f64) -> Result<RawImage> {
    let limit = dark_threshold * img.max_intensity() as f64;
    let dark = |v: u16| (v as f64) < limit;
    let (w, h) = (img.width(), img.height());

    let row_dark = |y: usize| {
        let n = (0..w).filter(|&x| dark(img.get(x, y))).count();
        n as f64 >= DARK_LINE_FRACTION * w as f64
    };
    let y0 = (0..h).find(|&y| !row_dark(y)).ok_or(Error::NoContent)?;
    let y1 = (0..h).rev().find(|&y| !row_dark(y)).unwrap() + 1;

    let rows = y1 - y0;
    let col_dark = |x: usize| {
        let n = (y0..y1).filter(|&y| dark(img.get(x, y))).count();
        n as f64 >= DARK_LINE_FRACTION * rows as f64
    };
    let x0 = (0..w).find(|&x| !col_dark(x)).ok_or(Error::NoContent)?;
    let x1 = (0..w).rev().find(|&x| !col_dark(x)).unwrap() + 1;

    Ok(img.crop(x0, y0, x1, y1))
}

/// Linear-interpolated percentile of integer intensities via a histogram.
fn percentile_from_hist(hist: &[u64], total: u64, q: f64) -> f64 {
    let pos = q * (total - 1) as f64;
    let lo = pos.floor() as u64;
    let frac = pos - lo as f64;
    let nth = |k: u64| -> usize {
        let mut acc = 0u64;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if acc > k {
                return v;
            }
        }
        hist.len() - 1
    };
    let a = nth(lo) as f64;
    if frac == 0.0 {
        return a;
    }
    let b = nth(lo + 1) as f64;
    a + (b - a) * frac
}

/// Linear stretch mapping the 1st percentile to 0 and the 99th to the
/// maximum intensity, clipped. Images with p1 == p99 are returned unchanged.
pub fn standardize_brightness(img: &RawImage) -> RawImage {
    let max = img.max_intensity();
    let mut hist = vec![0u64; max as usize + 1];
    for &v in img.pixels() {
        hist[v as usize] += 1;
    }
    let total = img.pixels().len() as u64;
    let p1 = percentile_from_hist(&hist, total, 0.01);
    let p99 = percentile_from_hist(&hist, total, 0.99);
    if p99 <= p1 {
        return img.clone();
    }
    let scale = max as f64 / (p99 - p1);
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| ((v as f64 - p1) * scale).round().clamp(0.0, max as f64) as u16)
        .collect();
    img.with_pixels(pixels)
}

/// Content rectangle of a `w x h` image centered in a `size x size` canvas
/// after uniform scaling of its longer side to `size`.
pub fn content_box(w: usize, h: usize, size: usize) -> PadBox {
    let side = w.max(h) as f64;
    let cw = ((w as f64 * size as f64 / side).round() as usize).clamp(1, size);
    let ch = ((h as f64 * size as f64 / side).round() as usize).clamp(1, size);
    let x0 = (size - cw) / 2;
    let y0 = (size - ch) / 2;
    PadBox {
        x0,
        y0,
        x1: x0 + cw,
        y1: y0 + ch,
    }
}

/// Pads to a centered square with zeros and bilinearly resamples to
/// `size x size`, normalizing intensities to `[0, 1]`.
pub fn resize_padded(img: &RawImage, size: usize) -> (Plane, PadBox) {
    let norm = 1.0 / img.max_intensity() as f32;
    let src = Plane::new(
        img.width(),
        img.height(),
        img.pixels().iter().map(|&v| v as f32 * norm).collect(),
    );
    let bx = content_box(img.width(), img.height(), size);
    let content = src.resize_bilinear(bx.width(), bx.height());
    let mut out = Plane::filled(size, size, 0.0);
    for y in 0..bx.height() {
        let dst = (bx.y0 + y) * size + bx.x0;
        out.data[dst..dst + bx.width()]
            .copy_from_slice(&content.data[y * bx.width()..(y + 1) * bx.width()]);
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    (out, bx)
}

pub fn resize_canonical(img: &RawImage) -> CanonicalImage {
    let (plane, pad_box) = resize_padded(img, CANONICAL_SIZE);
    CanonicalImage::from_parts_unchecked(plane, pad_box)
}

#[inline]
fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * CLAHE_BINS as f32) as usize).min(CLAHE_BINS - 1)
}

/// Per-tile lookup table; `None` marks a single-bin tile that maps identically.
fn tile_lut(hist: &[f64; CLAHE_BINS], n: f64, clip_limit: f64) -> Option<[f64; CLAHE_BINS]> {
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return None;
    }
    let clip = (clip_limit * n / CLAHE_BINS as f64).max(1.0);
    let mut clipped = *hist;
    let mut excess = 0.0;
    if clip.is_finite() {
        for c in clipped.iter_mut() {
            if *c > clip {
                excess += *c - clip;
                *c = clip;
            }
        }
    }
    let bonus = excess / CLAHE_BINS as f64;
    let mut lut = [0.0; CLAHE_BINS];
    let mut acc = 0.0;
    for (l, c) in lut.iter_mut().zip(clipped.iter()) {
        acc += c + bonus;
        *l = (acc / n).clamp(0.0, 1.0);
    }
    Some(lut)
}

/// Tile boundaries and centers along one axis of length `len`.
fn tiles(len: usize, count: usize) -> (Vec<(usize, usize)>, f64) {
    let width = len as f64 / count as f64;
    let bounds = (0..count)
        .map(|i| {
            let a = (i as f64 * width).floor() as usize;
            let b = if i + 1 == count {
                len
            } else {
                ((i + 1) as f64 * width).floor() as usize
            };
            (a, b)
        })
        .collect();
    (bounds, width)
}

/// Neighbouring tiles and blend weight for a pixel index along one axis.
fn blend_axis(p: usize, tile_width: f64, count: usize) -> (usize, usize, f64) {
    let pos = (p as f64 + 0.5) / tile_width - 0.5;
    if pos <= 0.0 {
        return (0, 0, 0.0);
    }
    let t0 = pos.floor() as usize;
    if t0 + 1 >= count {
        return (count - 1, count - 1, 0.0);
    }
    (t0, t0 + 1, pos - t0 as f64)
}

/// Contrast-limited adaptive histogram equalization over the content
/// rectangle, 256 bins, bilinear blending between tile mappings.
///
/// `clip_limit` is a multiple of the mean bin count; `f64::INFINITY` turns off
/// clipping. Pixels outside `pad_box` are left at zero.
pub fn clahe_plane(plane: &Plane, pad_box: PadBox, clip_limit: f64, tile_grid: (usize, usize)) -> Plane {
    assert!(clip_limit > 0.0, "clip limit must be positive");
    let (cw, ch) = (pad_box.width(), pad_box.height());
    let gx = tile_grid.0.clamp(1, cw);
    let gy = tile_grid.1.clamp(1, ch);
    let (xb, tw) = tiles(cw, gx);
    let (yb, th) = tiles(ch, gy);

    let mut luts: Vec<Option<[f64; CLAHE_BINS]>> = Vec::with_capacity(gx * gy);
    for &(ya, yz) in &yb {
        for &(xa, xz) in &xb {
            let mut hist = [0.0; CLAHE_BINS];
            for y in ya..yz {
                let row = &plane.data[(pad_box.y0 + y) * plane.width + pad_box.x0..];
                for &v in &row[xa..xz] {
                    hist[bin_of(v)] += 1.0;
                }
            }
            luts.push(tile_lut(&hist, ((yz - ya) * (xz - xa)) as f64, clip_limit));
        }
    }

    let xs: Vec<_> = (0..cw).map(|x| blend_axis(x, tw, gx)).collect();
    let mut out = Plane::filled(plane.width, plane.height, 0.0);
    for y in 0..ch {
        let (ty0, ty1, fy) = blend_axis(y, th, gy);
        let base = (pad_box.y0 + y) * plane.width + pad_box.x0;
        for (x, &(tx0, tx1, fx)) in xs.iter().enumerate() {
            let v = plane.data[base + x];
            let b = bin_of(v);
            let corners = [
                (&luts[ty0 * gx + tx0], (1.0 - fx) * (1.0 - fy)),
                (&luts[ty0 * gx + tx1], fx * (1.0 - fy)),
                (&luts[ty1 * gx + tx0], (1.0 - fx) * fy),
                (&luts[ty1 * gx + tx1], fx * fy),
            ];
            let mapped = if corners.iter().all(|(l, _)| l.is_none()) {
                v
            } else {
                let s: f64 = corners
                    .iter()
                    .map(|(l, w)| w * l.as_ref().map_or(v as f64, |l| l[b]))
                    .sum();
                s.clamp(0.0, 1.0) as f32
            };
            out.data[base + x] = mapped;
        }
    }
    out
}

pub fn clahe(img: &CanonicalImage, clip_limit: f64, tile_grid: (usize, usize)) -> CanonicalImage {
    let plane = clahe_plane(img.plane(), img.pad_box(), clip_limit, tile_grid);
    CanonicalImage::from_parts_unchecked(plane, img.pad_box())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw8(w: usize, h: usize, f: impl Fn(usize, usize) -> u16) -> RawImage {
        let px = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        RawImage::new(w, h, 8, px).unwrap()
    }

    #[test]
    fn crop_leaves_borderless_image_unchanged() {
        let img = raw8(20, 10, |x, y| 50 + (x + y) as u16);
        assert_eq!(crop_borders(&img, 0.02).unwrap(), img);
    }

    #[test]
    fn crop_removes_dark_frame() {
        let img = raw8(100, 100, |x, y| {
            if (10..90).contains(&x) && (10..90).contains(&y) {
                204
            } else {
                0
            }
        });
        // Oracle: scan rows and columns directly.
        let lit_rows: Vec<_> = (0..100).filter(|&y| (0..100).any(|x| img.get(x, y) > 0)).collect();
        let lit_cols: Vec<_> = (0..100).filter(|&x| (0..100).any(|y| img.get(x, y) > 0)).collect();
        let out = crop_borders(&img, 0.02).unwrap();
        assert_eq!(out.height(), lit_rows.len());
        assert_eq!(out.width(), lit_cols.len());
        assert_eq!((out.width(), out.height()), (80, 80));
        assert!(out.pixels().iter().all(|&v| v == 204));
    }

    #[test]
    fn crop_ignores_sparse_text_in_border() {
        let img = raw8(300, 120, |x, y| {
            if (10..110).contains(&y) {
                128
            } else if y == 3 && x < 2 {
                255
            } else {
                0
            }
        });
        let out = crop_borders(&img, 0.02).unwrap();
        assert_eq!(out.height(), 100);
    }

    #[test]
    fn crop_all_dark_is_no_content() {
        let img = raw8(10, 10, |_, _| 0);
        assert!(matches!(crop_borders(&img, 0.02), Err(Error::NoContent)));
    }

    #[test]
    fn brightness_constant_image_unchanged() {
        let img = raw8(7, 5, |_, _| 90);
        assert_eq!(standardize_brightness(&img), img);
    }

    #[test]
    fn brightness_full_range_unchanged() {
        // 1st percentile already at 0 and 99th already at max.
        let img = raw8(16, 16, |x, y| match y * 16 + x {
            i if i < 8 => 0,
            i if i >= 248 => 255,
            i => i as u16,
        });
        assert_eq!(standardize_brightness(&img), img);
    }

    #[test]
    fn brightness_two_values_stretch_to_extremes() {
        let img = raw8(10, 10, |x, _| if x < 5 { 10 } else { 200 });
        let out = standardize_brightness(&img);
        let mut vals: Vec<_> = out.pixels().to_vec();
        vals.sort();
        vals.dedup();
        assert_eq!(vals, vec![0, 255]);
    }

    #[test]
    fn square_canonical_input_keeps_geometry() {
        let img = RawImage::new(
            1024,
            1024,
            8,
            (0..1024 * 1024usize).map(|i| ((i * 7919) % 256) as u16).collect(),
        )
        .unwrap();
        let c = resize_canonical(&img);
        assert_eq!(c.pad_box(), PadBox::full(1024));
        for (o, &r) in c.pixels().iter().zip(img.pixels()) {
            assert!((o - r as f32 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_rectangle_fills_pad_box_only() {
        let img = raw8(300, 200, |_, _| 100);
        let c = resize_canonical(&img);
        let b = c.pad_box();
        assert_eq!((b.width(), b.height()), (1024, 683));
        let inside = 100.0 / 255.0;
        for y in 0..1024 {
            for x in 0..1024 {
                let v = c.plane().get(x, y);
                if b.contains(x, y) {
                    assert!((v - inside).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn bilinear_midpoint_of_checker() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        // Upscaling 2 -> 3 puts the middle sample exactly at (0.5, 0.5).
        let up = p.resize_bilinear(3, 3);
        assert!((up.get(1, 1) - 0.5).abs() < 1e-7);
        assert!((p.sample_zero_fill(0.5, 0.5) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn clahe_constant_image_is_identity() {
        let img = CanonicalImage::new(Plane::filled(1024, 1024, 0.37), PadBox::full(1024)).unwrap();
        let out = clahe(&img, 2.0, (8, 8));
        assert_eq!(out, img);
    }

    #[test]
    fn clahe_unclipped_single_tile_is_global_equalization() {
        let n = 64;
        let data: Vec<f32> = (0..n * n)
            .map(|i| (((i * 37) % 101) as f32 / 100.0).powf(2.0))
            .collect();
        let plane = Plane::new(n, n, data);
        let out = clahe_plane(&plane, PadBox::full(n), f64::INFINITY, (1, 1));
        // Oracle: rank of each pixel's bin among all pixels.
        let bins: Vec<usize> = plane.data.iter().map(|&v| ((v * 256.0) as usize).min(255)).collect();
        for (i, &b) in bins.iter().enumerate() {
            let le = bins.iter().filter(|&&o| o <= b).count() as f32 / bins.len() as f32;
            assert!((out.data[i] - le).abs() <= 1.0 / 256.0, "pixel {i}");
        }
    }

    #[test]
    fn clahe_leaves_padding_black_and_in_range() {
        let img = raw8(400, 150, |x, y| ((x * 3 + y * 5) % 256) as u16);
        let c = resize_canonical(&img);
        let out = clahe(&c, 2.0, (8, 8));
        let b = out.pad_box();
        for y in 0..1024 {
            for x in 0..1024 {
                let v = out.plane().get(x, y);
                assert!((0.0..=1.0).contains(&v));
                if !b.contains(x, y) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn brightness_is_monotone(px in prop::collection::vec(0u16..256, 64)) {
                let img = RawImage::new(8, 8, 8, px.clone()).unwrap();
                let out = standardize_brightness(&img);
                for i in 0..64 {
                    for j in 0..64 {
                        if px[i] <= px[j] {
                            prop_assert!(out.pixels()[i] <= out.pixels()[j]);
                        }
                    }
                }
            }

            #[test]
            fn resize_preserves_aspect(w in 1usize..300, h in 1usize..300) {
                let img = RawImage::new(w, h, 8, vec![200; w * h]).unwrap();
                let c = resize_canonical(&img);
                let b = c.pad_box();
                // Each content side is the scaled input side, rounded.
                let s = 1024.0 / w.max(h) as f64;
                prop_assert!((b.width() as f64 - w as f64 * s).abs() <= 0.5 + 1e-9);
                prop_assert!((b.height() as f64 - h as f64 * s).abs() <= 0.5 + 1e-9);
                let inside = 200.0 / 255.0;
                let ok = c.pixels().iter().enumerate().all(|(i, &v)| {
                    let (x, y) = (i % 1024, i / 1024);
                    if b.contains(x, y) { (v - inside).abs() < 1e-6 } else { v == 0.0 }
                });
                prop_assert!(ok);
            }

            #[test]
            fn clahe_output_in_unit_range(seed in any::<u64>(), gx in 1usize..6, gy in 1usize..6, clip in 0.5f64..8.0) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n = 48;
                let plane = Plane::new(n, n, (0..n * n).map(|_| rng.random::<f32>()).collect());
                let out = clahe_plane(&plane, PadBox { x0: 3, y0: 5, x1: 45, y1: 40 }, clip, (gx, gy));
                prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
