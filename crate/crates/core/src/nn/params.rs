use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::Var;
use super::ops;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trained by the optimizer.
    Param,
    /// Carried state, such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: EntryKind,
}

/// Named tensors of a network, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: EntryKind) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, tensor, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Sum of squares over trainable parameters.
    pub fn l2_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.tensor.sum_squares())
            .sum()
    }
}

/// One forward pass over a [`ParamStore`].
pub struct Ctx<'a> {
    store: &'a ParamStore,
    train: bool,
    grad: bool,
    cache: RefCell<HashMap<usize, Var>>,
    bn_updates: RefCell<Vec<(usize, usize, ops::BatchStats)>>,
}

impl<'a> Ctx<'a> {
    /// `train` selects batch statistics in batch norm; `grad` records a tape.
    pub fn new(store: &'a ParamStore, train: bool, grad: bool) -> Self {
        Self {
            store,
            train,
            grad,
            cache: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn var(&self, id: usize) -> Var {
        self.cache
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| {
                let e = &self.store.entries[id];
                Var::param(e.tensor.clone(), id, self.grad && e.kind == EntryKind::Param)
            })
            .clone()
    }

    /// Running-statistic updates collected in training mode:
    /// `(mean_id, var_id, batch stats)`.
    pub fn take_bn_updates(&self) -> Vec<(usize, usize, ops::BatchStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds batch statistics into running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<(usize, usize, ops::BatchStats)>) {
    for (mid, vid, stats) in updates {
        for (r, b) in store.get_mut(mid).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.get_mut(vid).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = he_uniform(rng, &[cout, cin, k, k], cin * k * k);
        let weight = store.add(format!("{name}.weight"), w, EntryKind::Param);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), EntryKind::Param));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let b = self.bias.map(|b| ctx.var(b));
        ops::conv2d(x, &ctx.var(self.weight), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: usize,
    pub bias: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::full(&[c], 1.0), EntryKind::Param),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c]), EntryKind::Param),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), EntryKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), EntryKind::Buffer),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let (g, b) = (ctx.var(self.weight), ctx.var(self.bias));
        if ctx.train {
            let (y, stats) = ops::batch_norm2d(x, &g, &b, None);
            if let Some(stats) = stats {
                ctx.bn_updates
                    .borrow_mut()
                    .push((self.running_mean, self.running_var, stats));
            }
            y
        } else {
            let rm = ctx.store.get(self.running_mean);
            let rv = ctx.store.get(self.running_var);
            ops::batch_norm2d(x, &g, &b, Some((rm, rv))).0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = he_uniform(rng, &[cout, cin], cin);
        Self {
            weight: store.add(format!("{name}.weight"), w, EntryKind::Param),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), EntryKind::Param),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        ops::linear(x, &ctx.var(self.weight), &ctx.var(self.bias))
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}
