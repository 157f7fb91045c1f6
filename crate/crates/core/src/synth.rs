//! Synthetic radiographs for desk-scale runs and tests.
//!
//! Chest images are a bright body with two dark lung fields, film noise, a
//! black frame and a few burned-in marker pixels. Positive cases carry
//! bilateral hazy opacities inside both lungs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{write_manifest, DatasetManifest, Label, ScanRecord, Sex, View};
use crate::error::{Error, Result};
use crate::imaging::{encode_png, write_atomic, Plane, RawImage};

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Squared normalized radius; `< 1` inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

/// Two dark ellipses on a noisy background, with the exact ellipse mask.
pub fn ellipse_pair(size: usize, rng: &mut ChaCha8Rng) -> (Plane, Plane) {
    let s = size as f64;
    let mut ellipses = Vec::with_capacity(2);
    for side in [0.0, 1.0] {
        let cx = s * (0.28 + 0.44 * side) + rng.random_range(-0.05..0.05) * s;
        ellipses.push(Ellipse {
            cx,
            cy: s * rng.random_range(0.4..0.6),
            rx: s * rng.random_range(0.10..0.18),
            ry: s * rng.random_range(0.18..0.32),
            angle: rng.random_range(-0.3..0.3),
        });
    }
    let bg: f64 = rng.random_range(0.45..0.85);
    let fg = bg - rng.random_range(0.2..0.4);
    let noise = Normal::new(0.0, rng.random_range(0.02..0.08)).unwrap();
    let mut img = vec![0f32; size * size];
    let mut mask = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ellipses.iter().any(|e| e.rho2(px, py) < 1.0);
            let base = if inside { fg } else { bg };
            img[y * size + x] = (base + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            mask[y * size + x] = inside as u8 as f32;
        }
    }
    (Plane::new(size, size, img), Plane::new(size, size, mask))
}

/// Shape knobs for [`chest_radiograph`].
#[derive(Debug, Clone)]
pub struct ChestParams {
    pub min_side: usize,
    pub max_side: usize,
    /// Peak opacity added inside the lungs of positive cases (8-bit units).
    pub opacity_strength: f64,
}

impl Default for ChestParams {
    fn default() -> Self {
        Self {
            min_side: 320,
            max_side: 440,
            opacity_strength: 70.0,
        }
    }
}

/// One 8-bit synthetic frontal chest radiograph.
pub fn chest_radiograph(positive: bool, params: &ChestParams, rng: &mut ChaCha8Rng) -> RawImage {
    let w = rng.random_range(params.min_side..=params.max_side);
    let h = rng.random_range(params.min_side..=params.max_side);
    let (bl, br) = (rng.random_range(6..20), rng.random_range(6..20));
    let (bt, bb) = (rng.random_range(6..20), rng.random_range(6..20));
    let (cw, ch) = ((w - bl - br) as f64, (h - bt - bb) as f64);

    let body = Ellipse {
        cx: bl as f64 + cw / 2.0,
        cy: bt as f64 + ch * 0.55,
        rx: cw * rng.random_range(0.44..0.5),
        ry: ch * rng.random_range(0.55..0.65),
        angle: 0.0,
    };
    let lungs: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            cx: body.cx + side * cw * rng.random_range(0.18..0.24),
            cy: bt as f64 + ch * rng.random_range(0.45..0.52),
            rx: cw * rng.random_range(0.12..0.16),
            ry: ch * rng.random_range(0.24..0.3),
            angle: side * rng.random_range(0.0..0.15),
        })
        .collect();
    // Opacities: 2-3 soft blobs per lung, placed inside the lung field.
    let mut blobs = Vec::new();
    if positive {
        for l in &lungs {
            for _ in 0..rng.random_range(2..=3) {
                let r = rng.random_range(0.0..0.7f64).sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                blobs.push((
                    l.cx + r * l.rx * t.cos(),
                    l.cy + r * l.ry * t.sin(),
                    l.rx * rng.random_range(0.45..0.8),
                ));
            }
        }
    }

    let gain = rng.random_range(0.75..1.1);
    let offset = rng.random_range(0.0..25.0);
    let noise = Normal::new(0.0, 7.0).unwrap();
    let mut px = vec![0u16; w * h];
    for y in bt..h - bb {
        for x in bl..w - br {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 25.0;
            let rb = body.rho2(fx, fy);
            if rb < 1.0 {
                v += 140.0 * (1.0 - rb).sqrt().min(1.0).max(0.6);
            }
            for l in &lungs {
                let rl = l.rho2(fx, fy);
                if rl < 1.0 {
                    v -= 95.0 * (1.0 - rl * rl).min(1.0);
                }
            }
            for &(bx, by, br) in &blobs {
                let d2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (br * br);
                v += params.opacity_strength * (-d2).exp();
            }
            let v = gain * v + offset + noise.sample(rng);
            px[y * w + x] = v.round().clamp(1.0, 255.0) as u16;
        }
    }
    // Burned-in marker in the top frame, too sparse to count as content.
    let mx = rng.random_range(bl..w - br - 4);
    for dx in 0..3 {
        px[(bt / 2) * w + mx + dx] = 255;
    }
    RawImage::new(w, h, 8, px).expect("synthetic image is valid")
}

/// Layout of a synthetic study.
#[derive(Debug, Clone)]
pub struct SynthDatasetSpec {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub seed: u64,
    /// Extra lateral views added to the first patients (excluded at ingest).
    pub lateral_extras: usize,
    pub params: ChestParams,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            n_patients: 130,
            images_per_patient: 2,
            seed: 7,
            lateral_extras: 0,
            params: ChestParams::default(),
        }
    }
}

/// Writes PNGs under `dir/images/` and `dir/manifest.csv`; patients alternate
/// between negative and positive. Image paths are relative to `dir`.
pub fn write_dataset(dir: &Path, spec: &SynthDatasetSpec) -> Result<DatasetManifest> {
    if spec.n_patients == 0 || spec.images_per_patient == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one image".into()));
    }
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for p in 0..spec.n_patients {
        let positive = p % 2 == 1;
        let age = rng.random_range(25..90);
        let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
        let n_lateral = usize::from(p < spec.lateral_extras);
        for i in 0..spec.images_per_patient + n_lateral {
            let lateral = i >= spec.images_per_patient;
            let scan_id = format!("P{p:04}-S{i}");
            let img = chest_radiograph(positive, &spec.params, &mut rng);
            let rel = Path::new("images").join(format!("{scan_id}.png"));
            write_atomic(&dir.join(&rel), &encode_png(&img))?;
            records.push(ScanRecord {
                scan_id,
                patient_id: format!("P{p:04}"),
                label: Label::from_bool(positive),
                image_path: rel,
                view: if lateral { View::Lateral } else { View::Frontal },
                artifact_flag: false,
                machine_id: format!("M{}", rng.random_range(1..=3)),
                age: Some(age),
                sex,
            });
        }
    }
    let manifest = DatasetManifest::new(records, format!("synthetic seed {}", spec.seed))?;
    write_manifest(&manifest, dir.join("manifest.csv"))?;
    Ok(manifest)
}
