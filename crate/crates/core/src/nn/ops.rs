//! Differentiable operations on NCHW tensors.

use super::autograd::Var;
use super::tensor::Tensor;

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims4(v: &Var) -> (usize, usize, usize, usize) {
    match v.shape() {
        &[n, c, h, w] => (n, c, h, w),
        s => panic!("expected an NCHW tensor, got shape {s:?}"),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, weight `[out, in, k, k]`, optional bias `[out]`.
pub fn conv2d(x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Var {
    let (n, c, h, wd) = dims4(x);
    let (o, wc, k, k2) = dims4(w);
    assert_eq!(wc, c, "conv2d input channels");
    assert_eq!(k, k2, "conv2d needs square kernels");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
    let g = ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let (rows, l) = (g.rows(), g.cols());
    let xv = x.value().clone();
    let wv = w.value().clone();
    let mut out = vec![0.0; n * o * l];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * l] };
    for s in 0..n {
        let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let os = &mut out[s * o * l..(s + 1) * o * l];
        if let Some(b) = b {
            for (oc, &bv) in b.value().data().iter().enumerate() {
                os[oc * l..(oc + 1) * l].fill(bv);
            }
        }
        gemm(o, rows, l, wv.data(), (rows, 1), src, (l, 1), 1.0, os);
    }
    let value = Tensor::new(vec![n, o, g.ho, g.wo], out);
    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
    Var::from_op(value, parents, move |gout| {
        let gd = gout.data();
        let mut dx = need_x.then(|| vec![0.0; n * c * h * wd]);
        let mut dw = need_w.then(|| vec![0.0; o * rows]);
        let mut cols = vec![0.0; rows * l];
        for s in 0..n {
            let gs = &gd[s * o * l..(s + 1) * o * l];
            let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
            if let Some(dw) = dw.as_mut() {
                let src: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                // dW += g_s * cols^T
                gemm(o, l, rows, gs, (l, 1), src, (1, l), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                if g.is_pointwise() {
                    gemm(rows, o, l, wv.data(), (1, rows), gs, (l, 1), 1.0, dxs);
                } else {
                    gemm(rows, o, l, wv.data(), (1, rows), gs, (l, 1), 0.0, &mut cols);
                    col2im(&cols, &g, dxs);
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(vec![n, c, h, wd], d)),
            dw.map(|d| Tensor::new(vec![o, c, k, k], d)),
        ];
        if has_bias {
            let mut db = vec![0.0; o];
            for s in 0..n {
                for (oc, v) in db.iter_mut().enumerate() {
                    *v += gd[(s * o + oc) * l..(s * o + oc + 1) * l].iter().sum::<f64>();
                }
            }
            grads.push(Some(Tensor::new(vec![o], db)));
        }
        grads
    })
}

/// Fully connected layer: `x [n, in]`, `w [out, in]`, `b [out]`.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    let (n, i) = match x.shape() {
        &[n, i] => (n, i),
        s => panic!("linear expects [n, in], got {s:?}"),
    };
    let o = w.shape()[0];
    assert_eq!(w.shape(), &[o, i], "linear weight shape");
    assert_eq!(b.shape(), &[o], "linear bias shape");
    let xv = x.value().clone();
    let wv = w.value().clone();
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.value().data().iter().copied()).collect();
    gemm(n, i, o, xv.data(), (i, 1), wv.data(), (1, i), 1.0, &mut out);
    let value = Tensor::new(vec![n, o], out);
    let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
    Var::from_op(value, vec![x.clone(), w.clone(), b.clone()], move |g| {
        let gd = g.data();
        let dx = need_x.then(|| {
            let mut d = vec![0.0; n * i];
            gemm(n, o, i, gd, (o, 1), wv.data(), (i, 1), 0.0, &mut d);
            Tensor::new(vec![n, i], d)
        });
        let dw = need_w.then(|| {
            let mut d = vec![0.0; o * i];
            gemm(o, n, i, gd, (1, o), xv.data(), (i, 1), 0.0, &mut d);
            Tensor::new(vec![o, i], d)
        });
        let mut db = vec![0.0; o];
        for row in gd.chunks(o) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        vec![dx, dw, Some(Tensor::new(vec![o], db))]
    })
}

pub fn relu(x: &Var) -> Var {
    let xv = x.value().clone();
    let value = xv.map(|v| v.max(0.0));
    Var::from_op(value, vec![x.clone()], move |g| {
        let d = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), d))]
    })
}

pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    let mut value = a.value().clone();
    value.add_assign(b.value());
    Var::from_op(value, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.clone()), Some(g.clone())]
    })
}

fn pool_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d(x: &Var, k: usize, stride: usize, pad: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (pool_out(h, k, stride, pad), pool_out(w, k, stride, pad));
    let xd = x.value().data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best || bi == usize::MAX {
                            best = plane[idx];
                            bi = idx;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = p * h * w + bi;
            }
        }
    }
    let value = Tensor::new(vec![n, c, ho, wo], out);
    Var::from_op(value, vec![x.clone()], move |g| {
        let mut dx = vec![0.0; n * c * h * w];
        for (&a, &gv) in arg.iter().zip(g.data()) {
            dx[a] += gv;
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx))]
    })
}

/// Average pooling without padding.
pub fn avg_pool2d(x: &Var, k: usize, stride: usize) -> Var {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (pool_out(h, k, stride, 0), pool_out(w, k, stride, 0));
    let inv = 1.0 / (k * k) as f64;
    let xd = x.value().data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ki in 0..k {
                    for kj in 0..k {
                        s += plane[(oy * stride + ki) * w + ox * stride + kj];
                    }
                }
                out[(p * ho + oy) * wo + ox] = s * inv;
            }
        }
    }
    let value = Tensor::new(vec![n, c, ho, wo], out);
    Var::from_op(value, vec![x.clone()], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gd[(p * ho + oy) * wo + ox] * inv;
                    for ki in 0..k {
                        for kj in 0..k {
                            dx[p * h * w + (oy * stride + ki) * w + ox * stride + kj] += gv;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx))]
    })
}

/// `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let out = x
        .value()
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    let value = Tensor::new(vec![n, c], out);
    Var::from_op(value, vec![x.clone()], move |g| {
        let dx = g
            .data()
            .iter()
            .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
            .collect();
        vec![Some(Tensor::new(vec![n, c, h, w], dx))]
    })
}

/// Concatenates along the channel axis.
pub fn concat_channels(xs: &[Var]) -> Var {
    assert!(!xs.is_empty(), "concat of nothing");
    let (n, _, h, w) = dims4(&xs[0]);
    let chans: Vec<usize> = xs
        .iter()
        .map(|x| {
            let (xn, xc, xh, xw) = dims4(x);
            assert_eq!((xn, xh, xw), (n, h, w), "concat shapes");
            xc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for (x, &c) in xs.iter().zip(&chans) {
            out.extend_from_slice(&x.value().data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    let value = Tensor::new(vec![n, total, h, w], out);
    Var::from_op(value, xs.to_vec(), move |g| {
        let gd = g.data();
        let mut offset = 0;
        chans
            .iter()
            .map(|&c| {
                let mut d = Vec::with_capacity(n * c * hw);
                for s in 0..n {
                    let start = (s * total + offset) * hw;
                    d.extend_from_slice(&gd[start..start + c * hw]);
                }
                offset += c;
                Some(Tensor::new(vec![n, c, h, w], d))
            })
            .collect()
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x);
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.value().data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for p in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = xd[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    let value = Tensor::new(vec![n, c, h2, w2], out);
    Var::from_op(value, vec![x.clone()], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dx[(p * h + y / 2) * w + xx / 2] += gd[(p * h2 + y) * w2 + xx];
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx))]
    })
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `[n, c, h, w]`. With `running = Some((mean, var))`
/// the stored statistics are used; otherwise batch statistics are computed and
/// returned for the caller to fold into its running estimates.
pub fn batch_norm2d(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running: Option<(&Tensor, &Tensor)>,
) -> (Var, Option<BatchStats>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.value().data();
    let (mean, var_b, stats) = match running {
        Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec(), None),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for sidx in 0..n {
                    s += xd[(sidx * c + ch) * hw..(sidx * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v = 0.0;
                for sidx in 0..n {
                    v += xd[(sidx * c + ch) * hw..(sidx * c + ch + 1) * hw]
                        .iter()
                        .map(|x| (x - mu) * (x - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
            let unbiased = var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let train = running.is_none();
    let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gv = gamma.value().data().to_vec();
    let bv = beta.value().data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for sidx in 0..n {
        for ch in 0..c {
            let base = (sidx * c + ch) * hw;
            for i in base..base + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
    }
    let value = Tensor::new(vec![n, c, h, w], out);
    let y = Var::from_op(value, vec![x.clone(), gamma.clone(), beta.clone()], move |g| {
        let gd = g.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for sidx in 0..n {
            for ch in 0..c {
                let base = (sidx * c + ch) * hw;
                for i in base..base + hw {
                    dgamma[ch] += gd[i] * xhat[i];
                    dbeta[ch] += gd[i];
                }
            }
        }
        let mut dx = vec![0.0; gd.len()];
        for sidx in 0..n {
            for ch in 0..c {
                let base = (sidx * c + ch) * hw;
                let scale = gv[ch] * inv_std[ch];
                for i in base..base + hw {
                    dx[i] = if train {
                        scale * (gd[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
        vec![
            Some(Tensor::new(vec![n, c, h, w], dx)),
            Some(Tensor::new(vec![c], dgamma)),
            Some(Tensor::new(vec![c], dbeta)),
        ]
    });
    (y, stats)
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().expect("softmax of a scalar");
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Mean cross-entropy of `[n, k]` logits against class indices.
pub fn softmax_cross_entropy(logits: &Var, targets: &[usize]) -> Var {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        s => panic!("cross entropy expects [n, k], got {s:?}"),
    };
    assert_eq!(targets.len(), n, "one target per row");
    let p = softmax_rows(logits.value());
    let mut loss = 0.0;
    for (row, &t) in logits.value().data().chunks(k).zip(targets) {
        assert!(t < k, "target class out of range");
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    let targets = targets.to_vec();
    Var::from_op(
        Tensor::scalar(loss / n as f64),
        vec![logits.clone()],
        move |g| {
            let scale = g.item() / n as f64;
            let mut d = p.data().to_vec();
            for (i, &t) in targets.iter().enumerate() {
                d[i * k + t] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(vec![n, k], d))]
        },
    )
}

/// Mean binary cross-entropy on logits against targets in `[0, 1]`.
pub fn bce_with_logits(logits: &Var, targets: &Tensor) -> Var {
    assert_eq!(logits.shape(), targets.shape(), "bce shapes");
    let xv = logits.value().clone();
    let t = targets.clone();
    let m = xv.len() as f64;
    let loss: f64 = xv
        .data()
        .iter()
        .zip(t.data())
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    Var::from_op(Tensor::scalar(loss / m), vec![logits.clone()], move |g| {
        let scale = g.item() / m;
        let d = xv
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| (1.0 / (1.0 + (-x).exp()) - y) * scale)
            .collect();
        vec![Some(Tensor::new(xv.shape().to_vec(), d))]
    })
}
