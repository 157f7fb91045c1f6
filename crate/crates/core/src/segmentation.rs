//! Lung masks and the three-channel model input.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{CanonicalImage, Plane};
use crate::nn::{self, ops, BatchNorm2d, Conv2d, Ctx, DType, ParamStore, Tensor, Var, WeightFile};

/// Per-pixel lung probability, same size as the image it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct LungMask {
    plane: Plane,
}

impl LungMask {
    pub fn new(plane: Plane) -> Result<Self> {
        if plane.width != plane.height {
            return Err(Error::ShapeMismatch {
                expected: "square mask".into(),
                actual: format!("{}x{}", plane.width, plane.height),
            });
        }
        if !plane.data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { plane })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            plane: Plane::filled(size, size, 0.0),
        }
    }

    pub fn size(&self) -> usize {
        self.plane.width
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }
}

/// Channels `[image, mask, zeros]`, each `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    size: usize,
    image: Vec<f32>,
    mask: Vec<f32>,
}

impl ModelInput {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Channel `c` as a row-major plane. Channel 2 is all zeros.
    pub fn channel(&self, c: usize) -> std::borrow::Cow<'_, [f32]> {
        match c {
            0 => (&self.image[..]).into(),
            1 => (&self.mask[..]).into(),
            2 => vec![0.0; self.size * self.size].into(),
            _ => panic!("model input has 3 channels"),
        }
    }

    /// Stacks channels into `[3, s, s]` f64 values after `pool x pool` area
    /// averaging (`pool` must divide the size).
    pub fn to_chw(&self, pool: usize) -> Vec<f64> {
        let s = self.size / pool;
        let mut out = Vec::with_capacity(3 * s * s);
        for data in [&self.image, &self.mask] {
            let p = Plane::new(self.size, self.size, data.clone()).downsample_area(pool);
            out.extend(p.data.iter().map(|&v| v as f64));
        }
        out.extend(std::iter::repeat_n(0.0, s * s));
        out
    }
}

/// Stacks the canonical image with its mask and a zero plane.
pub fn compose_input(img: &CanonicalImage, mask: &LungMask) -> Result<ModelInput> {
    if img.size() != mask.size() {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{0}", img.size()),
            actual: format!("{0}x{0}", mask.size()),
        });
    }
    Ok(ModelInput {
        size: img.size(),
        image: img.pixels().to_vec(),
        mask: mask.plane.data.clone(),
    })
}

/// A lung segmenter running at a fixed square resolution.
pub trait MaskModel: Send + Sync {
    fn native_size(&self) -> usize;
    /// Probabilities for a `native_size` square input.
    fn infer(&self, input: &Plane) -> Result<Plane>;
}

/// Test double that returns a constant probability.
#[derive(Debug, Clone)]
pub struct ConstantMask {
    pub value: f32,
    pub size: usize,
}

impl MaskModel for ConstantMask {
    fn native_size(&self) -> usize {
        self.size
    }

    fn infer(&self, input: &Plane) -> Result<Plane> {
        Ok(Plane::filled(input.width, input.height, self.value))
    }
}

fn rescale(plane: &Plane, size: usize) -> Plane {
    if plane.width == size {
        plane.clone()
    } else if plane.width % size == 0 {
        plane.downsample_area(plane.width / size)
    } else {
        plane.resize_bilinear(size, size)
    }
}

/// Runs `model` at its native size and resamples the probabilities back to
/// the image size bilinearly.
pub fn segment_lungs(img: &CanonicalImage, model: &dyn MaskModel) -> Result<LungMask> {
    let n = model.native_size();
    let small = rescale(img.plane(), n);
    let probs = model.infer(&small)?;
    if (probs.width, probs.height) != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", probs.width, probs.height),
        });
    }
    let mut full = if n == img.size() {
        probs
    } else {
        probs.resize_bilinear(img.size(), img.size())
    };
    full.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    LungMask::new(full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub native_size: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            native_size: 256,
            base_channels: 8,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        ops::relu(&self.bn.forward(ctx, &self.conv.forward(ctx, x)))
    }
}

/// Two-level encoder-decoder with skip connections.
#[derive(Debug, Clone)]
pub struct UNetMaskModel {
    config: UNetConfig,
    store: ParamStore,
    enc1: ConvBn,
    enc2: ConvBn,
    mid: ConvBn,
    dec2: ConvBn,
    dec1: ConvBn,
    head: Conv2d,
}

impl UNetMaskModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.native_size % 4 != 0 || config.native_size == 0 || config.base_channels == 0 {
            return Err(Error::InvalidArgument(
                "mask model size must be a positive multiple of 4".into(),
            ));
        }
        let b = config.base_channels;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let enc1 = ConvBn::new(&mut store, rng, "enc1", 1, b);
        let enc2 = ConvBn::new(&mut store, rng, "enc2", b, 2 * b);
        let mid = ConvBn::new(&mut store, rng, "mid", 2 * b, 4 * b);
        let dec2 = ConvBn::new(&mut store, rng, "dec2", 4 * b + 2 * b, 2 * b);
        let dec1 = ConvBn::new(&mut store, rng, "dec1", 2 * b + b, b);
        let head = Conv2d::new(&mut store, rng, "head", b, 1, 1, 1, 0, true);
        Ok(Self {
            config,
            store,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            head,
        })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    fn logits(&self, ctx: &Ctx, x: &Var) -> Var {
        let s1 = self.enc1.forward(ctx, x);
        let s2 = self.enc2.forward(ctx, &ops::max_pool2d(&s1, 2, 2, 0));
        let m = self.mid.forward(ctx, &ops::max_pool2d(&s2, 2, 2, 0));
        let u2 = ops::concat_channels(&[ops::upsample_nearest2x(&m), s2]);
        let d2 = self.dec2.forward(ctx, &u2);
        let u1 = ops::concat_channels(&[ops::upsample_nearest2x(&d2), s1]);
        let d1 = self.dec1.forward(ctx, &u1);
        self.head.forward(ctx, &d1)
    }

    fn batch_tensor(&self, planes: &[&Plane]) -> Tensor {
        let n = self.config.native_size;
        let data = planes
            .iter()
            .flat_map(|p| p.data.iter().map(|&v| v as f64))
            .collect();
        Tensor::new(vec![planes.len(), 1, n, n], data)
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "unet_mask", "depth": 2, "config": self.config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        WeightFile::from_store(self.architecture(), serde_json::Value::Null, &self.store)
            .save(path, DType::F32)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let wf = WeightFile::load(path)?;
        if wf.architecture.get("kind").and_then(|k| k.as_str()) != Some("unet_mask") {
            return Err(Error::WeightMismatch("not a mask model weight file".into()));
        }
        let config: UNetConfig = serde_json::from_value(wf.architecture["config"].clone())
            .map_err(|e| Error::WeightMismatch(format!("mask model descriptor: {e}")))?;
        let mut model = Self::new(config, 0)?;
        wf.load_into(&mut model.store, false)?;
        Ok(model)
    }
}

impl MaskModel for UNetMaskModel {
    fn native_size(&self) -> usize {
        self.config.native_size
    }

    fn infer(&self, input: &Plane) -> Result<Plane> {
        let n = self.config.native_size;
        if (input.width, input.height) != (n, n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n}"),
                actual: format!("{}x{}", input.width, input.height),
            });
        }
        let ctx = Ctx::inference(&self.store);
        let x = Var::constant(self.batch_tensor(&[input]));
        let probs = ops::sigmoid_tensor(self.logits(&ctx, &x).value());
        Ok(Plane::new(n, n, probs.data().iter().map(|&v| v as f32).collect()))
    }
}

/// Synthetic-ellipse training recipe for [`UNetMaskModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskTrainConfig {
    pub model: UNetConfig,
    pub train_images: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig {
                native_size: 64,
                base_channels: 8,
            },
            train_images: 96,
            steps: 300,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 11,
        }
    }
}

/// Trains a mask model on generated ellipse pairs; returns the model and the
/// per-step loss.
pub fn train_mask_model(cfg: &MaskTrainConfig) -> Result<(UNetMaskModel, Vec<f64>)> {
    if cfg.train_images == 0 || cfg.batch_size == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut model = UNetMaskModel::new(cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n = cfg.model.native_size;
    let data: Vec<(Plane, Plane)> = (0..cfg.train_images)
        .map(|_| crate::synth::ellipse_pair(n, &mut rng))
        .collect();
    let mut opt = nn::Adam::new(model.store.len(), 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<&Plane> = batch.iter().map(|&i| &data[i].0).collect();
        let masks: Vec<&Plane> = batch.iter().map(|&i| &data[i].1).collect();
        let x = Var::constant(model.batch_tensor(&imgs));
        let y = model.batch_tensor(&masks);
        let (loss, grads, updates) = {
            let ctx = Ctx::new(&model.store, true, true);
            let loss = ops::bce_with_logits(&model.logits(&ctx, &x), &y);
            let grads = nn::backward(&loss, model.store.len());
            (loss.value().item(), grads, ctx.take_bn_updates())
        };
        nn::params::apply_bn_updates(&mut model.store, updates);
        opt.step(&mut model.store, &grads, cfg.learning_rate);
        losses.push(loss);
    }
    tracing::debug!(final_loss = losses.last().copied(), "mask model trained");
    Ok((model, losses))
}

/// Intersection over union of two masks thresholded at 0.5.
pub fn iou(pred: &Plane, truth: &Plane) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        inter += (p && t) as usize;
        uni += (p || t) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::PadBox;
    use proptest::prelude::*;

    fn canon(size: usize, v: f32) -> CanonicalImage {
        CanonicalImage::from_parts(Plane::filled(size, size, v), PadBox::full(size)).unwrap()
    }

    #[test]
    fn constant_mask_model_gives_uniform_mask() {
        let m = segment_lungs(&canon(1024, 0.2), &ConstantMask { value: 0.5, size: 256 }).unwrap();
        assert_eq!(m.size(), 1024);
        assert!(m.plane().data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn compose_stacks_image_mask_zeros() {
        let img = canon(64, 0.3);
        let mask = LungMask::new(Plane::filled(64, 64, 0.7)).unwrap();
        let inp = compose_input(&img, &mask).unwrap();
        assert_eq!(&inp.channel(0)[..], img.pixels());
        assert_eq!(inp.channel(2).iter().map(|&v| v as f64).sum::<f64>(), 0.0);
        let means: Vec<f64> = (0..3)
            .map(|c| inp.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 4096.0)
            .collect();
        assert!((means[0] - 0.3).abs() < 1e-6 && (means[1] - 0.7).abs() < 1e-6 && means[2] == 0.0);
        let chw = inp.to_chw(4);
        assert_eq!(chw.len(), 3 * 16 * 16);
    }

    #[test]
    fn compose_rejects_size_mismatch() {
        let err = compose_input(&canon(64, 0.3), &LungMask::zeros(32)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn unet_on_zero_image_is_a_probability_map() {
        let model = UNetMaskModel::new(UNetConfig { native_size: 32, base_channels: 4 }, 1).unwrap();
        let m = segment_lungs(&canon(128, 0.0), &model).unwrap();
        assert!(m.plane().data.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = segment_lungs(&canon(128, 0.0), &model).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn unet_weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = UNetMaskModel::new(UNetConfig { native_size: 16, base_channels: 2 }, 5).unwrap();
        let path = dir.path().join("mask.cxrw");
        model.save(&path).unwrap();
        let back = UNetMaskModel::load(&path).unwrap();
        let probe = Plane::new(16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect());
        let a = model.infer(&probe).unwrap();
        let b = back.infer(&probe).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5);
        }
        std::fs::write(&path, b"CXRW garbage").unwrap();
        assert!(UNetMaskModel::load(&path).is_err());
    }

    #[test]
    fn trained_unet_segments_ellipses() {
        let cfg = MaskTrainConfig {
            model: UNetConfig { native_size: 32, base_channels: 6 },
            train_images: 48,
            steps: 150,
            ..Default::default()
        };
        let (model, losses) = train_mask_model(&cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut total = 0.0;
        for _ in 0..10 {
            let (img, truth) = crate::synth::ellipse_pair(32, &mut rng);
            total += iou(&model.infer(&img).unwrap(), &truth);
        }
        assert!(total / 10.0 >= 0.8, "mean IoU {}", total / 10.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn masks_stay_in_unit_range(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = UNetMaskModel::new(UNetConfig { native_size: 16, base_channels: 2 }, seed).unwrap();
            let plane = Plane::new(48, 48, (0..48 * 48).map(|_| rng.random::<f32>()).collect());
            let img = CanonicalImage::from_parts(plane, PadBox::full(48)).unwrap();
            let m = segment_lungs(&img, &model).unwrap();
            prop_assert!(m.plane().data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
