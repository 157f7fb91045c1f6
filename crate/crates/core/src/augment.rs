//! Stochastic label-preserving augmentation with seeded reproducibility.
//!
//! A [`AugmentationPolicy`] lists transforms with an inclusion probability and
//! a parameter range. [`sample_plan`] draws one concrete [`AugmentationPlan`]
//! from a seed, and [`apply_plan`] runs it on a canonical image. Augmentation
//! works on images only; labels never pass through this module.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{CanonicalImage, PadBox, Plane};
use crate::preprocess::clahe_plane;

pub const MAX_ROTATE_DEGREES: f64 = 7.0;
pub const MAX_SHEAR_DEGREES: f64 = 7.0;
pub const MAX_SCALE: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Brighten,
    GammaContrast,
    Clahe,
    Rotate,
    Shear,
    Scale,
    HorizontalFlip,
    SharpenOrBlur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub kind: TransformKind,
    pub probability: f64,
    /// Inclusive `[lo, hi]` parameter range; unused for flip and CLAHE.
    #[serde(default)]
    pub range: Option<[f64; 2]>,
}

impl PolicyEntry {
    pub fn new(kind: TransformKind, probability: f64, range: Option<[f64; 2]>) -> Self {
        Self {
            kind,
            probability,
            range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub entries: Vec<PolicyEntry>,
    /// CLAHE settings used when the CLAHE entry fires.
    #[serde(default = "default_clahe_clip")]
    pub clahe_clip_limit: f64,
    #[serde(default = "default_clahe_grid")]
    pub clahe_tile_grid: (usize, usize),
}

fn default_clahe_clip() -> f64 {
    2.0
}

fn default_clahe_grid() -> (usize, usize) {
    (8, 8)
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        default_policy()
    }
}

/// The radiologist-vetted training policy.
pub fn default_policy() -> AugmentationPolicy {
    use TransformKind::*;
    AugmentationPolicy {
        entries: vec![
            PolicyEntry::new(Brighten, 0.4, Some([0.9, 1.25])),
            PolicyEntry::new(GammaContrast, 0.3, Some([0.7, 1.4])),
            PolicyEntry::new(Clahe, 0.4, None),
            PolicyEntry::new(Rotate, 0.4, Some([-MAX_ROTATE_DEGREES, MAX_ROTATE_DEGREES])),
            PolicyEntry::new(Shear, 0.4, Some([-MAX_SHEAR_DEGREES, MAX_SHEAR_DEGREES])),
            PolicyEntry::new(Scale, 0.4, Some([1.0, MAX_SCALE])),
            PolicyEntry::new(HorizontalFlip, 0.5, None),
            PolicyEntry::new(SharpenOrBlur, 0.5, Some([0.5, 1.0])),
        ],
        clahe_clip_limit: default_clahe_clip(),
        clahe_tile_grid: default_clahe_grid(),
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        use TransformKind::*;
        let bad = |m: String| Err(Error::InvalidArgument(format!("augmentation policy: {m}")));
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.probability) {
                return bad(format!("{:?} probability {} outside [0, 1]", e.kind, e.probability));
            }
            let needs_range = !matches!(e.kind, Clahe | HorizontalFlip);
            let range = match (needs_range, e.range) {
                (true, None) => return bad(format!("{:?} needs a parameter range", e.kind)),
                (_, Some([lo, hi])) if !(lo <= hi) => {
                    return bad(format!("{:?} range [{lo}, {hi}] is inverted", e.kind))
                }
                (_, r) => r,
            };
            if let Some([lo, hi]) = range {
                let ok = match e.kind {
                    Rotate => lo >= -MAX_ROTATE_DEGREES && hi <= MAX_ROTATE_DEGREES,
                    Shear => lo >= -MAX_SHEAR_DEGREES && hi <= MAX_SHEAR_DEGREES,
                    Scale => lo >= 1.0 && hi <= MAX_SCALE,
                    Brighten | GammaContrast | SharpenOrBlur => lo > 0.0,
                    Clahe | HorizontalFlip => true,
                };
                if !ok {
                    return bad(format!("{:?} range [{lo}, {hi}] out of bounds", e.kind));
                }
            }
        }
        if !(self.clahe_clip_limit > 0.0) || self.clahe_tile_grid.0 == 0 || self.clahe_tile_grid.1 == 0 {
            return bad("invalid CLAHE settings".into());
        }
        Ok(())
    }
}

/// One concrete transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Brighten { factor: f64 },
    GammaContrast { gamma: f64 },
    Clahe { clip_limit: f64, tile_grid: (usize, usize) },
    Rotate { degrees: f64 },
    Shear { degrees: f64 },
    Scale { sx: f64, sy: f64 },
    HorizontalFlip,
    Sharpen { amount: f64 },
    GaussianBlur { sigma: f64 },
}

impl Step {
    pub fn kind(&self) -> TransformKind {
        match self {
            Step::Brighten { .. } => TransformKind::Brighten,
            Step::GammaContrast { .. } => TransformKind::GammaContrast,
            Step::Clahe { .. } => TransformKind::Clahe,
            Step::Rotate { .. } => TransformKind::Rotate,
            Step::Shear { .. } => TransformKind::Shear,
            Step::Scale { .. } => TransformKind::Scale,
            Step::HorizontalFlip => TransformKind::HorizontalFlip,
            Step::Sharpen { .. } | Step::GaussianBlur { .. } => TransformKind::SharpenOrBlur,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Brighten { factor } => write!(f, "brighten(x{factor:.4})"),
            Step::GammaContrast { gamma } => write!(f, "gamma({gamma:.4})"),
            Step::Clahe { clip_limit, tile_grid } => {
                write!(f, "clahe(clip={clip_limit}, grid={}x{})", tile_grid.0, tile_grid.1)
            }
            Step::Rotate { degrees } => write!(f, "rotate({degrees:.4}deg)"),
            Step::Shear { degrees } => write!(f, "shear({degrees:.4}deg)"),
            Step::Scale { sx, sy } => write!(f, "scale({sx:.4}, {sy:.4})"),
            Step::HorizontalFlip => write!(f, "hflip"),
            Step::Sharpen { amount } => write!(f, "sharpen({amount:.4})"),
            Step::GaussianBlur { sigma } => write!(f, "blur(sigma={sigma:.4})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub steps: Vec<Step>,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn empty() -> Self {
        Self {
            steps: Vec::new(),
            seed: 0,
        }
    }
}

impl fmt::Display for AugmentationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seed={} [", self.seed)?;
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(" -> ")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("]")
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: Option<[f64; 2]>) -> f64 {
    let [lo, hi] = range.unwrap_or([0.0, 0.0]);
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws inclusion for every entry independently, then uniform parameters
/// for the included ones.
pub fn sample_plan(policy: &AugmentationPolicy, seed: u64) -> AugmentationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    for e in &policy.entries {
        let draw: f64 = rng.random();
        if draw >= e.probability {
            continue;
        }
        let step = match e.kind {
            TransformKind::Brighten => Step::Brighten {
                factor: uniform(&mut rng, e.range),
            },
            TransformKind::GammaContrast => Step::GammaContrast {
                gamma: uniform(&mut rng, e.range),
            },
            TransformKind::Clahe => Step::Clahe {
                clip_limit: policy.clahe_clip_limit,
                tile_grid: policy.clahe_tile_grid,
            },
            TransformKind::Rotate => Step::Rotate {
                degrees: uniform(&mut rng, e.range),
            },
            TransformKind::Shear => Step::Shear {
                degrees: uniform(&mut rng, e.range),
            },
            TransformKind::Scale => Step::Scale {
                sx: uniform(&mut rng, e.range),
                sy: uniform(&mut rng, e.range),
            },
            TransformKind::HorizontalFlip => Step::HorizontalFlip,
            TransformKind::SharpenOrBlur => {
                let sharpen = rng.random_bool(0.5);
                let v = uniform(&mut rng, e.range);
                if sharpen {
                    Step::Sharpen { amount: v }
                } else {
                    Step::GaussianBlur { sigma: v }
                }
            }
        };
        steps.push(step);
    }
    AugmentationPlan { steps, seed }
}

/// Row-major 2x3 affine map `[a, b, tx, c, d, ty]`: `(x, y) -> (a x + b y + tx, c x + d y + ty)`.
type Affine = [f64; 6];

fn map(m: &Affine, x: f64, y: f64) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

/// Forward and inverse maps for a linear transform `lin` about the image center.
fn about_center(lin: [f64; 4], size: usize) -> (Affine, Affine) {
    let c = (size as f64 - 1.0) / 2.0;
    let [a, b, cc, d] = lin;
    let det = a * d - b * cc;
    let inv = [d / det, -b / det, -cc / det, a / det];
    let affine = |[a, b, c2, d]: [f64; 4]| -> Affine {
        [a, b, c - a * c - b * c, c2, d, c - c2 * c - d * c]
    };
    (affine(lin), affine(inv))
}

fn linear_part(step: &Step) -> Option<[f64; 4]> {
    match *step {
        Step::Rotate { degrees } => {
            let t = degrees.to_radians();
            Some([t.cos(), -t.sin(), t.sin(), t.cos()])
        }
        Step::Shear { degrees } => Some([1.0, degrees.to_radians().tan(), 0.0, 1.0]),
        Step::Scale { sx, sy } => Some([sx, 0.0, 0.0, sy]),
        _ => None,
    }
}

fn warp(plane: &Plane, pad: PadBox, lin: [f64; 4]) -> (Plane, PadBox) {
    let n = plane.width;
    let (fwd, inv) = about_center(lin, n);
    // Content occupies pixel centers x0..x1-1; spread one pixel for bilinear support.
    let corners = [
        (pad.x0 as f64 - 1.0, pad.y0 as f64 - 1.0),
        (pad.x1 as f64, pad.y0 as f64 - 1.0),
        (pad.x0 as f64 - 1.0, pad.y1 as f64),
        (pad.x1 as f64, pad.y1 as f64),
    ];
    let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in corners {
        let (u, v) = map(&fwd, x, y);
        lx = lx.min(u);
        ly = ly.min(v);
        hx = hx.max(u);
        hy = hy.max(v);
    }
    let clampi = |v: f64| v.clamp(0.0, n as f64) as usize;
    let new_box = PadBox {
        x0: clampi(lx.floor()),
        y0: clampi(ly.floor()),
        x1: clampi(hx.ceil() + 1.0),
        y1: clampi(hy.ceil() + 1.0),
    };
    let mut out = Plane::filled(n, plane.height, 0.0);
    for y in new_box.y0..new_box.y1 {
        for x in new_box.x0..new_box.x1 {
            let (sx, sy) = map(&inv, x as f64, y as f64);
            out.data[y * n + x] = plane.sample_zero_fill(sx, sy).clamp(0.0, 1.0);
        }
    }
    if new_box.x0 >= new_box.x1 || new_box.y0 >= new_box.y1 {
        return (out, PadBox::full(n));
    }
    (out, new_box)
}

fn flip(plane: &Plane, pad: PadBox) -> (Plane, PadBox) {
    let n = plane.width;
    let mut out = plane.clone();
    for row in out.data.chunks_exact_mut(n) {
        row.reverse();
    }
    (
        out,
        PadBox {
            x0: n - pad.x1,
            x1: n - pad.x0,
            ..pad
        },
    )
}

fn map_inside(plane: &mut Plane, pad: PadBox, f: impl Fn(f32) -> f32) {
    for y in pad.y0..pad.y1 {
        let row = &mut plane.data[y * plane.width + pad.x0..y * plane.width + pad.x1];
        for v in row {
            *v = f(*v).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur restricted to the content box, clamped edges.
fn blur_inside(plane: &Plane, pad: PadBox, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (pad.width(), pad.height());
    let n = plane.width;
    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        let row = &plane.data[(pad.y0 + y) * n + pad.x0..(pad.y0 + y) * n + pad.x1];
        for x in 0..w {
            let mut acc = 0.0;
            if x as i64 >= r && x as i64 + r < w as i64 {
                let win = &row[x - r as usize..=x + r as usize];
                for (kv, &v) in k.iter().zip(win) {
                    acc += kv * v as f64;
                }
            } else {
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * row[xx] as f64;
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = plane.clone();
    let mut acc = vec![0f64; w];
    for y in 0..h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, kv) in k.iter().enumerate() {
            let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
            for (a, &t) in acc.iter_mut().zip(&tmp[yy * w..(yy + 1) * w]) {
                *a += kv * t;
            }
        }
        let dst = &mut out.data[(pad.y0 + y) * n + pad.x0..(pad.y0 + y) * n + pad.x1];
        for (o, &a) in dst.iter_mut().zip(&acc) {
            *o = (a as f32).clamp(0.0, 1.0);
        }
    }
    out
}

fn apply_step(plane: Plane, pad: PadBox, step: &Step) -> (Plane, PadBox) {
    match *step {
        Step::Brighten { factor } => {
            let mut p = plane;
            map_inside(&mut p, pad, |v| (v as f64 * factor) as f32);
            (p, pad)
        }
        Step::GammaContrast { gamma } => {
            let mut p = plane;
            map_inside(&mut p, pad, |v| (v as f64).powf(gamma) as f32);
            (p, pad)
        }
        Step::Clahe { clip_limit, tile_grid } => (clahe_plane(&plane, pad, clip_limit, tile_grid), pad),
        Step::Rotate { .. } | Step::Shear { .. } | Step::Scale { .. } => {
            warp(&plane, pad, linear_part(step).unwrap())
        }
        Step::HorizontalFlip => flip(&plane, pad),
        Step::Sharpen { amount } => {
            let blurred = blur_inside(&plane, pad, 1.0);
            let mut p = plane;
            for y in pad.y0..pad.y1 {
                for x in pad.x0..pad.x1 {
                    let i = y * p.width + x;
                    let v = p.data[i] as f64;
                    p.data[i] = (v + amount * (v - blurred.data[i] as f64)).clamp(0.0, 1.0) as f32;
                }
            }
            (p, pad)
        }
        Step::GaussianBlur { sigma } => (blur_inside(&plane, pad, sigma), pad),
    }
}

/// Runs the plan's steps in order. An empty plan returns the input unchanged.
pub fn apply_plan(img: &CanonicalImage, plan: &AugmentationPlan) -> CanonicalImage {
    let mut plane = img.plane().clone();
    let mut pad = img.pad_box();
    for step in &plan.steps {
        (plane, pad) = apply_step(plane, pad, step);
    }
    CanonicalImage::from_parts_unchecked(plane, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::CANONICAL_SIZE;

    fn textured(size: usize) -> CanonicalImage {
        let data = (0..size * size)
            .map(|i| (((i * 2654435761usize) >> 7) % 1000) as f32 / 999.0)
            .collect();
        CanonicalImage::from_parts(Plane::new(size, size, data), PadBox::full(size)).unwrap()
    }

    #[test]
    fn default_policy_matches_table() {
        let p = default_policy();
        p.validate().unwrap();
        assert!(p.entries.contains(&PolicyEntry::new(TransformKind::Rotate, 0.4, Some([-7.0, 7.0]))));
        assert!(p.entries.contains(&PolicyEntry::new(TransformKind::HorizontalFlip, 0.5, None)));
        assert_eq!(
            p.entries.iter().filter(|e| e.kind == TransformKind::HorizontalFlip).count(),
            1
        );
        assert!(p.entries.iter().all(|e| (0.3..=0.5).contains(&e.probability)));
        let prob = |k| p.entries.iter().find(|e| e.kind == k).unwrap().probability;
        assert_eq!(prob(TransformKind::Brighten), 0.4);
        assert_eq!(prob(TransformKind::GammaContrast), 0.3);
        assert_eq!(prob(TransformKind::Clahe), 0.4);
        assert_eq!(prob(TransformKind::Shear), 0.4);
        assert_eq!(prob(TransformKind::Scale), 0.4);
    }

    #[test]
    fn validate_rejects_out_of_bounds() {
        let mut p = default_policy();
        p.entries[3].range = Some([-8.0, 7.0]);
        assert!(p.validate().is_err());
        let mut p = default_policy();
        p.entries[5].range = Some([1.0, 1.3]);
        assert!(p.validate().is_err());
        let mut p = default_policy();
        p.entries[0].probability = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_probability_gives_empty_plan_and_one_gives_full_plan() {
        let mut p = default_policy();
        for e in &mut p.entries {
            e.probability = 0.0;
        }
        assert!(sample_plan(&p, 9).steps.is_empty());
        for e in &mut p.entries {
            e.probability = 1.0;
        }
        let plan = sample_plan(&p, 9);
        let kinds: Vec<_> = plan.steps.iter().map(Step::kind).collect();
        let expected: Vec<_> = p.entries.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, expected);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = default_policy();
        assert_eq!(sample_plan(&p, 1234), sample_plan(&p, 1234));
        let differ = (0..20).any(|s| sample_plan(&p, s) != sample_plan(&p, s + 100));
        assert!(differ);
    }

    #[test]
    fn empty_plan_is_identity() {
        let img = textured(64);
        assert_eq!(apply_plan(&img, &AugmentationPlan::empty()), img);
    }

    #[test]
    fn flip_twice_restores() {
        let img = textured(CANONICAL_SIZE);
        let plan = AugmentationPlan {
            steps: vec![Step::HorizontalFlip],
            seed: 0,
        };
        let once = apply_plan(&img, &plan);
        assert_ne!(once, img);
        assert_eq!(apply_plan(&once, &plan), img);
    }

    #[test]
    fn rotated_impulse_lands_where_the_affine_oracle_says() {
        let n = CANONICAL_SIZE;
        let (px, py) = (700usize, 400usize);
        let mut plane = Plane::filled(n, n, 0.0);
        plane.set(px, py, 1.0);
        let img = CanonicalImage::new(plane, PadBox::full(n)).unwrap();
        let out = apply_plan(
            &img,
            &AugmentationPlan {
                steps: vec![Step::Rotate { degrees: 7.0 }],
                seed: 0,
            },
        );
        let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let v = out.plane().get(x, y) as f64;
                m += v;
                mx += v * x as f64;
                my += v * y as f64;
            }
        }
        // Oracle: rotate the impulse coordinate about the center directly.
        let c = (n as f64 - 1.0) / 2.0;
        let t = 7f64.to_radians();
        let (dx, dy) = (px as f64 - c, py as f64 - c);
        let ex = c + t.cos() * dx - t.sin() * dy;
        let ey = c + t.sin() * dx + t.cos() * dy;
        assert!(m > 0.5);
        assert!((mx / m - ex).abs() < 0.5 && (my / m - ey).abs() < 0.5, "{} {} vs {ex} {ey}", mx / m, my / m);
    }

    #[test]
    fn geometric_steps_zero_outside_pad_box() {
        let n = 128;
        let mut plane = Plane::filled(n, n, 0.0);
        let pad = PadBox { x0: 20, y0: 0, x1: 108, y1: n };
        for y in pad.y0..pad.y1 {
            for x in pad.x0..pad.x1 {
                plane.set(x, y, 0.6);
            }
        }
        let img = CanonicalImage::from_parts(plane, pad).unwrap();
        for step in [
            Step::Rotate { degrees: -6.0 },
            Step::Shear { degrees: 5.0 },
            Step::Scale { sx: 1.2, sy: 1.1 },
            Step::HorizontalFlip,
            Step::GaussianBlur { sigma: 1.0 },
            Step::Sharpen { amount: 1.0 },
        ] {
            let out = apply_plan(&img, &AugmentationPlan { steps: vec![step.clone()], seed: 0 });
            let b = out.pad_box();
            for y in 0..n {
                for x in 0..n {
                    if !b.contains(x, y) {
                        assert_eq!(out.plane().get(x, y), 0.0, "{step} at {x},{y}");
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn sampled_parameters_stay_in_bounds(seed in any::<u64>()) {
                let plan = sample_plan(&default_policy(), seed);
                for s in &plan.steps {
                    match *s {
                        Step::Rotate { degrees } | Step::Shear { degrees } => prop_assert!(degrees.abs() <= 7.0),
                        Step::Scale { sx, sy } => prop_assert!((1.0..=1.2).contains(&sx) && (1.0..=1.2).contains(&sy)),
                        Step::Brighten { factor } => prop_assert!((0.9..=1.25).contains(&factor)),
                        Step::GammaContrast { gamma } => prop_assert!((0.7..=1.4).contains(&gamma)),
                        Step::Sharpen { amount: v } | Step::GaussianBlur { sigma: v } => prop_assert!((0.5..=1.0).contains(&v)),
                        _ => {}
                    }
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn any_plan_keeps_shape_and_range(seed in any::<u64>()) {
                let mut policy = default_policy();
                for e in &mut policy.entries { e.probability = 0.7; }
                let img = textured(96);
                let plan = sample_plan(&policy, seed);
                let out = apply_plan(&img, &plan);
                prop_assert_eq!(out.size(), 96);
                prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(&out, &apply_plan(&img, &plan));
            }
        }
    }
}
