//! Convolutional feature extractors. Parameter names follow the torchvision
//! layouts so converted pretrained weights load by name.

use rand_chacha::ChaCha8Rng;

use crate::nn::{ops, BatchNorm2d, Conv2d, Ctx, ParamStore, Var};

use super::BackboneKind;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
enum ResBlock {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

impl ResBlock {
    fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let (out, ds) = match self {
            ResBlock::Basic(b) => {
                let y = ops::relu(&b.bn1.forward(ctx, &b.conv1.forward(ctx, x)));
                (b.bn2.forward(ctx, &b.conv2.forward(ctx, &y)), &b.downsample)
            }
            ResBlock::Bottleneck(b) => {
                let y = ops::relu(&b.bn1.forward(ctx, &b.conv1.forward(ctx, x)));
                let y = ops::relu(&b.bn2.forward(ctx, &b.conv2.forward(ctx, &y)));
                (b.bn3.forward(ctx, &b.conv3.forward(ctx, &y)), &b.downsample)
            }
        };
        let identity = match ds {
            Some((c, bn)) => bn.forward(ctx, &c.forward(ctx, x)),
            None => x.clone(),
        };
        ops::relu(&ops::add(&out, &identity))
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
enum Arch {
    Tiny {
        blocks: Vec<(Conv2d, BatchNorm2d)>,
    },
    ResNet {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        blocks: Vec<ResBlock>,
    },
    Vgg {
        /// `None` marks a max-pool.
        layers: Vec<Option<Conv2d>>,
    },
    DenseNet {
        conv0: Conv2d,
        norm0: BatchNorm2d,
        blocks: Vec<(Vec<DenseLayer>, Option<Transition>)>,
        norm5: BatchNorm2d,
    },
}

/// A feature extractor ending in global average pooling.
#[derive(Debug, Clone)]
pub struct Backbone {
    arch: Arch,
    feature_dim: usize,
}

/// Channel widths of the three tiny blocks.
pub const TINY_CHANNELS: [usize; 3] = [16, 32, 64];

fn conv_bn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    conv_name: &str,
    bn_name: &str,
    (cin, cout, k, stride, pad): (usize, usize, usize, usize, usize),
) -> (Conv2d, BatchNorm2d) {
    (
        Conv2d::new(store, rng, conv_name, cin, cout, k, stride, pad, false),
        BatchNorm2d::new(store, bn_name, cout),
    )
}

fn resnet(store: &mut ParamStore, rng: &mut ChaCha8Rng, layers: [usize; 4], bottleneck: bool) -> Backbone {
    let (conv1, bn1) = conv_bn(store, rng, "conv1", "bn1", (3, 64, 7, 2, 3));
    let expansion = if bottleneck { 4 } else { 1 };
    let mut inplanes = 64;
    let mut blocks = Vec::new();
    for (li, &count) in layers.iter().enumerate() {
        let planes = 64 << li;
        for bi in 0..count {
            let stride = if li > 0 && bi == 0 { 2 } else { 1 };
            let p = format!("layer{}.{bi}", li + 1);
            let out = planes * expansion;
            let downsample = (bi == 0 && (stride != 1 || inplanes != out)).then(|| {
                conv_bn(
                    store,
                    rng,
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    (inplanes, out, 1, stride, 0),
                )
            });
            let block = if bottleneck {
                let (conv1, bn1) = conv_bn(store, rng, &format!("{p}.conv1"), &format!("{p}.bn1"), (inplanes, planes, 1, 1, 0));
                let (conv2, bn2) = conv_bn(store, rng, &format!("{p}.conv2"), &format!("{p}.bn2"), (planes, planes, 3, stride, 1));
                let (conv3, bn3) = conv_bn(store, rng, &format!("{p}.conv3"), &format!("{p}.bn3"), (planes, out, 1, 1, 0));
                ResBlock::Bottleneck(Bottleneck {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    conv3,
                    bn3,
                    downsample,
                })
            } else {
                let (conv1, bn1) = conv_bn(store, rng, &format!("{p}.conv1"), &format!("{p}.bn1"), (inplanes, planes, 3, stride, 1));
                let (conv2, bn2) = conv_bn(store, rng, &format!("{p}.conv2"), &format!("{p}.bn2"), (planes, planes, 3, 1, 1));
                ResBlock::Basic(BasicBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                })
            };
            blocks.push(block);
            inplanes = out;
        }
    }
    Backbone {
        arch: Arch::ResNet { conv1, bn1, blocks },
        feature_dim: inplanes,
    }
}

fn vgg16(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Backbone {
    const CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut layers = Vec::new();
    let mut cin = 3;
    // torchvision indexes ReLU and pooling modules too.
    let mut idx = 0;
    for &c in &CFG {
        if c == 0 {
            layers.push(None);
            idx += 1;
        } else {
            layers.push(Some(Conv2d::new(store, rng, &format!("features.{idx}"), cin, c, 3, 1, 1, true)));
            cin = c;
            idx += 2;
        }
    }
    Backbone {
        arch: Arch::Vgg { layers },
        feature_dim: 512,
    }
}

fn densenet121(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Backbone {
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;
    let conv0 = Conv2d::new(store, rng, "features.conv0", 3, 64, 7, 2, 3, false);
    let norm0 = BatchNorm2d::new(store, "features.norm0", 64);
    let mut c = 64;
    let mut blocks = Vec::new();
    let counts = [6, 12, 24, 16];
    for (bi, &n) in counts.iter().enumerate() {
        let mut layers = Vec::new();
        for li in 0..n {
            let p = format!("features.denseblock{}.denselayer{}", bi + 1, li + 1);
            layers.push(DenseLayer {
                norm1: BatchNorm2d::new(store, &format!("{p}.norm1"), c),
                conv1: Conv2d::new(store, rng, &format!("{p}.conv1"), c, BN_SIZE * GROWTH, 1, 1, 0, false),
                norm2: BatchNorm2d::new(store, &format!("{p}.norm2"), BN_SIZE * GROWTH),
                conv2: Conv2d::new(store, rng, &format!("{p}.conv2"), BN_SIZE * GROWTH, GROWTH, 3, 1, 1, false),
            });
            c += GROWTH;
        }
        let transition = (bi + 1 < counts.len()).then(|| {
            let p = format!("features.transition{}", bi + 1);
            let t = Transition {
                norm: BatchNorm2d::new(store, &format!("{p}.norm"), c),
                conv: Conv2d::new(store, rng, &format!("{p}.conv"), c, c / 2, 1, 1, 0, false),
            };
            c /= 2;
            t
        });
        blocks.push((layers, transition));
    }
    let norm5 = BatchNorm2d::new(store, "features.norm5", c);
    Backbone {
        arch: Arch::DenseNet {
            conv0,
            norm0,
            blocks,
            norm5,
        },
        feature_dim: c,
    }
}

impl Backbone {
    pub fn new(kind: BackboneKind, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            BackboneKind::TinyTestCnn => {
                let mut cin = 3;
                let blocks = TINY_CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let b = conv_bn(store, rng, &format!("features.{i}.conv"), &format!("features.{i}.bn"), (cin, c, 3, 1, 1));
                        cin = c;
                        b
                    })
                    .collect();
                Backbone {
                    arch: Arch::Tiny { blocks },
                    feature_dim: TINY_CHANNELS[2],
                }
            }
            BackboneKind::Resnet34 => resnet(store, rng, [3, 4, 6, 3], false),
            BackboneKind::Resnet50 => resnet(store, rng, [3, 4, 6, 3], true),
            BackboneKind::Resnet152 => resnet(store, rng, [3, 8, 36, 3], true),
            BackboneKind::Vgg16 => vgg16(store, rng),
            BackboneKind::ChexpertDensenet => densenet121(store, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `[n, 3, h, w] -> [n, feature_dim]`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let fmap = match &self.arch {
            Arch::Tiny { blocks } => {
                let mut y = x.clone();
                for (c, bn) in blocks {
                    y = ops::max_pool2d(&ops::relu(&bn.forward(ctx, &c.forward(ctx, &y))), 2, 2, 0);
                }
                y
            }
            Arch::ResNet { conv1, bn1, blocks } => {
                let mut y = ops::relu(&bn1.forward(ctx, &conv1.forward(ctx, x)));
                y = ops::max_pool2d(&y, 3, 2, 1);
                for b in blocks {
                    y = b.forward(ctx, &y);
                }
                y
            }
            Arch::Vgg { layers } => {
                let mut y = x.clone();
                for l in layers {
                    y = match l {
                        Some(c) => ops::relu(&c.forward(ctx, &y)),
                        None => ops::max_pool2d(&y, 2, 2, 0),
                    };
                }
                y
            }
            Arch::DenseNet {
                conv0,
                norm0,
                blocks,
                norm5,
            } => {
                let mut y = ops::relu(&norm0.forward(ctx, &conv0.forward(ctx, x)));
                y = ops::max_pool2d(&y, 3, 2, 1);
                for (layers, transition) in blocks {
                    let mut feats = vec![y.clone()];
                    for l in layers {
                        let cat = ops::concat_channels(&feats);
                        let h = ops::relu(&l.norm1.forward(ctx, &cat));
                        let h = l.conv1.forward(ctx, &h);
                        let h = ops::relu(&l.norm2.forward(ctx, &h));
                        feats.push(l.conv2.forward(ctx, &h));
                    }
                    y = ops::concat_channels(&feats);
                    if let Some(t) = transition {
                        let h = ops::relu(&t.norm.forward(ctx, &y));
                        y = ops::avg_pool2d(&t.conv.forward(ctx, &h), 2, 2);
                    }
                }
                ops::relu(&norm5.forward(ctx, &y))
            }
        };
        ops::global_avg_pool(&fmap)
    }
}
