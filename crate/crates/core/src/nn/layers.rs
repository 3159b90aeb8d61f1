use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{PmxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient and AdamW moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub(crate) m: Tensor2D,
    pub(crate) v: Tensor2D,
}

impl Param {
    pub fn new(value: Tensor2D) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Tensor2D::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_moments(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}

/// Fully connected map `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros(inputs, outputs),
            bias: Param::zeros(1, outputs),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self::uniform(inputs, outputs, limit, rng)
    }

    /// He-uniform weights for layers feeding a ReLU.
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        Self::uniform(inputs, outputs, limit, rng)
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, limit: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Param::new(Tensor2D::from_vec(inputs, outputs, data).expect("shape")),
            bias: Param::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn apply(&self, x: &Tensor2D) -> Tensor2D {
        let mut y = x.matmul(&self.weight.value);
        y.add_row_broadcast(self.bias.value.data());
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when requested.
    pub fn backprop(&mut self, x: &Tensor2D, dy: &Tensor2D, need_input: bool) -> Option<Tensor2D> {
        self.weight.grad.add_matmul_tn(x, dy);
        self.bias.grad.add_assign(&dy.sum_rows());
        need_input.then(|| dy.matmul_nt(&self.weight.value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-feature batch statistics in training, running statistics in eval.
    #[default]
    Batch,
    /// Per-sample normalisation across features; identical in both modes.
    Feature,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl Norm {
    pub fn new(kind: NormKind, features: usize) -> Self {
        Self {
            kind,
            gamma: Param::new(Tensor2D::filled(1, features, 1.0)),
            beta: Param::zeros(1, features),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.cols()
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Relu,
    Sigmoid,
    Dropout(f64),
    Norm(Norm),
    /// `y = x + f(x)` for the inner stack `f`.
    Residual(Vec<Layer>),
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Dense(d) => format!("Dense {}->{}", d.inputs(), d.outputs()),
            Layer::Relu => "ReLU".into(),
            Layer::Sigmoid => "Sigmoid".into(),
            Layer::Dropout(p) => format!("Dropout({p})"),
            Layer::Norm(n) => format!("Norm({})", n.features()),
            Layer::Residual(_) => "Residual".into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Dense(Tensor2D),
    Relu(Tensor2D),
    Sigmoid(Tensor2D),
    Dropout(Vec<f64>),
    Norm { xhat: Tensor2D, inv_std: Vec<f64> },
    Residual(Vec<Cache>),
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    caches: Vec<Cache>,
    recorded: bool,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    /// Smallest `|pre-activation|` over every ReLU on the tape: how far the
    /// recorded point is from a kink. `INFINITY` when there are no ReLUs.
    pub fn relu_margin(&self) -> f64 {
        fn walk(caches: &[Cache]) -> f64 {
            caches.iter().fold(f64::INFINITY, |m, c| match c {
                Cache::Relu(x) => x.data().iter().fold(m, |m, v| m.min(v.abs())),
                Cache::Residual(sub) => m.min(walk(sub)),
                _ => m,
            })
        }
        walk(&self.caches)
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn input_width(&self) -> Option<usize> {
        first_width(&self.layers)
    }

    /// Runs the stack. In [`Mode::Train`] dropout masks are drawn from `rng`,
    /// batch-norm running statistics are updated and a tape is recorded.
    pub fn forward<R: Rng>(&mut self, x: &Tensor2D, mode: Mode, rng: &mut R) -> Result<(Tensor2D, Tape)> {
        let mut caches = Vec::new();
        let out = forward_layers(&mut self.layers, x, mode, rng, &mut caches, "")?;
        let recorded = mode == Mode::Train;
        if !recorded {
            caches.clear();
        }
        Ok((out, Tape { caches, recorded }))
    }

    /// Eval-mode forward without touching any state.
    pub fn infer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        infer_layers(&self.layers, x, "")
    }

    /// Back-propagates `dy` through the tape, accumulating parameter
    /// gradients. Returns the input gradient when `need_input` is set.
    pub fn backward(&mut self, tape: &Tape, dy: &Tensor2D, need_input: bool) -> Result<Option<Tensor2D>> {
        if !tape.recorded {
            return Err(PmxError::Usage(
                "backward called without a training-mode forward tape".into(),
            ));
        }
        backward_layers(&mut self.layers, &tape.caches, dy.clone(), need_input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        collect_params(&mut self.layers, &mut out);
        out
    }

    /// Named tensors in a stable order (parameters and running statistics).
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor2D)> {
        let mut out = Vec::new();
        collect_named(&self.layers, prefix, &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, TensorSlot<'_>)> {
        let mut out = Vec::new();
        collect_named_mut(&mut self.layers, prefix, &mut out);
        out
    }
}

/// Mutable view of a stored tensor: either a parameter or a plain buffer.
pub enum TensorSlot<'a> {
    Param(&'a mut Tensor2D),
    Buffer(&'a mut Vec<f64>),
}

impl TensorSlot<'_> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorSlot::Param(t) => t.shape(),
            TensorSlot::Buffer(v) => (1, v.len()),
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            TensorSlot::Param(t) => t.data_mut(),
            TensorSlot::Buffer(v) => v.as_mut_slice(),
        }
    }
}

fn first_width(layers: &[Layer]) -> Option<usize> {
    for l in layers {
        match l {
            Layer::Dense(d) => return Some(d.inputs()),
            Layer::Norm(n) => return Some(n.features()),
            Layer::Residual(inner) => {
                if let Some(w) = first_width(inner) {
                    return Some(w);
                }
            }
            _ => {}
        }
    }
    None
}

fn check_width(layer: &Layer, idx: usize, path: &str, x: &Tensor2D) -> Result<()> {
    let expected = match layer {
        Layer::Dense(d) => Some(d.inputs()),
        Layer::Norm(n) => Some(n.features()),
        _ => None,
    };
    match expected {
        Some(w) if w != x.cols() => Err(PmxError::shape(
            format!("layer {path}{idx} ({})", layer.describe()),
            format!("{w} input columns"),
            x.cols(),
        )),
        _ => Ok(()),
    }
}

fn forward_layers<R: Rng>(
    layers: &mut [Layer],
    x: &Tensor2D,
    mode: Mode,
    rng: &mut R,
    caches: &mut Vec<Cache>,
    path: &str,
) -> Result<Tensor2D> {
    let mut cur = x.clone();
    for (idx, layer) in layers.iter_mut().enumerate() {
        check_width(layer, idx, path, &cur)?;
        cur = match layer {
            Layer::Dense(d) => {
                let y = d.apply(&cur);
                caches.push(Cache::Dense(cur));
                y
            }
            Layer::Relu => {
                let y = cur.map(|v| v.max(0.0));
                caches.push(Cache::Relu(cur));
                y
            }
            Layer::Sigmoid => {
                let y = cur.map(sigmoid);
                caches.push(Cache::Sigmoid(y.clone()));
                y
            }
            Layer::Dropout(p) => {
                let p = *p;
                if mode == Mode::Eval || p == 0.0 {
                    caches.push(Cache::Dropout(vec![1.0; cur.data().len()]));
                    cur
                } else {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..cur.data().len())
                        .map(|_| if rng.random::<f64>() >= p { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut y = cur;
                    y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    caches.push(Cache::Dropout(mask));
                    y
                }
            }
            Layer::Norm(n) => {
                let (y, xhat, inv_std) = norm_forward(n, &cur, mode);
                caches.push(Cache::Norm { xhat, inv_std });
                y
            }
            Layer::Residual(inner) => {
                let mut sub = Vec::new();
                let sub_path = format!("{path}{idx}.");
                let mut y = forward_layers(inner, &cur, mode, rng, &mut sub, &sub_path)?;
                if y.shape() != cur.shape() {
                    return Err(PmxError::shape(
                        format!("layer {path}{idx} (Residual)"),
                        format!("{:?}", cur.shape()),
                        format!("{:?}", y.shape()),
                    ));
                }
                y.add_assign(&cur);
                caches.push(Cache::Residual(sub));
                y
            }
        };
    }
    Ok(cur)
}

fn infer_layers(layers: &[Layer], x: &Tensor2D, path: &str) -> Result<Tensor2D> {
    let mut cur = x.clone();
    for (idx, layer) in layers.iter().enumerate() {
        check_width(layer, idx, path, &cur)?;
        cur = match layer {
            Layer::Dense(d) => d.apply(&cur),
            Layer::Relu => cur.map(|v| v.max(0.0)),
            Layer::Sigmoid => cur.map(sigmoid),
            Layer::Dropout(_) => cur,
            Layer::Norm(n) => norm_eval(n, &cur),
            Layer::Residual(inner) => {
                let mut y = infer_layers(inner, &cur, &format!("{path}{idx}."))?;
                y.add_assign(&cur);
                y
            }
        };
    }
    Ok(cur)
}

fn backward_layers(
    layers: &mut [Layer],
    caches: &[Cache],
    mut dy: Tensor2D,
    need_input: bool,
) -> Result<Option<Tensor2D>> {
    if layers.len() != caches.len() {
        return Err(PmxError::Usage("tape does not match layer stack".into()));
    }
    for (idx, (layer, cache)) in layers.iter_mut().zip(caches).enumerate().rev() {
        let need = need_input || idx > 0;
        dy = match (layer, cache) {
            (Layer::Dense(d), Cache::Dense(x)) => match d.backprop(x, &dy, need) {
                Some(dx) => dx,
                None => return Ok(None),
            },
            (Layer::Relu, Cache::Relu(x)) => {
                let mut g = dy;
                g.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(g, &x)| if x <= 0.0 { *g = 0.0 });
                g
            }
            (Layer::Sigmoid, Cache::Sigmoid(y)) => {
                let mut g = dy;
                g.data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &y)| *g *= y * (1.0 - y));
                g
            }
            (Layer::Dropout(_), Cache::Dropout(mask)) => {
                let mut g = dy;
                g.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                g
            }
            (Layer::Norm(n), Cache::Norm { xhat, inv_std }) => norm_backward(n, xhat, inv_std, &dy),
            (Layer::Residual(inner), Cache::Residual(sub)) => {
                let through = backward_layers(inner, sub, dy.clone(), true)?
                    .expect("inner input gradient requested");
                let mut g = dy;
                g.add_assign(&through);
                g
            }
            _ => return Err(PmxError::Usage("tape does not match layer stack".into())),
        };
    }
    Ok(need_input.then_some(dy))
}

fn norm_forward(n: &mut Norm, x: &Tensor2D, mode: Mode) -> (Tensor2D, Tensor2D, Vec<f64>) {
    match n.kind {
        NormKind::Batch if mode == Mode::Train => {
            let (rows, cols) = x.shape();
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + n.eps).sqrt()).collect();
            let mut xhat = Tensor2D::zeros(rows, cols);
            for r in 0..rows {
                for (c, out) in xhat.row_mut(r).iter_mut().enumerate() {
                    *out = (x.get(r, c) - mean[c]) * inv_std[c];
                }
            }
            let unbias = if rows > 1 {
                rows as f64 / (rows as f64 - 1.0)
            } else {
                1.0
            };
            for c in 0..cols {
                n.running_mean[c] = n.momentum * n.running_mean[c] + (1.0 - n.momentum) * mean[c];
                n.running_var[c] = n.momentum * n.running_var[c] + (1.0 - n.momentum) * var[c] * unbias;
            }
            let y = affine(n, &xhat);
            (y, xhat, inv_std)
        }
        NormKind::Batch => {
            let y = norm_eval(n, x);
            // Eval mode records nothing, so the cache is never read.
            (y, Tensor2D::zeros(0, 0), Vec::new())
        }
        NormKind::Feature => {
            let (xhat, inv_std) = feature_normalize(x, n.eps);
            let y = affine(n, &xhat);
            (y, xhat, inv_std)
        }
    }
}

fn norm_eval(n: &Norm, x: &Tensor2D) -> Tensor2D {
    match n.kind {
        NormKind::Batch => {
            let mut xhat = x.clone();
            for r in 0..x.rows() {
                for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - n.running_mean[c]) / (n.running_var[c] + n.eps).sqrt();
                }
            }
            affine(n, &xhat)
        }
        NormKind::Feature => affine(n, &feature_normalize(x, n.eps).0),
    }
}

fn feature_normalize(x: &Tensor2D, eps: f64) -> (Tensor2D, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

fn affine(n: &Norm, xhat: &Tensor2D) -> Tensor2D {
    let mut y = xhat.clone();
    let g = n.gamma.value.data();
    let b = n.beta.value.data();
    for r in 0..y.rows() {
        for ((v, g), b) in y.row_mut(r).iter_mut().zip(g).zip(b) {
            *v = *v * g + b;
        }
    }
    y
}

fn norm_backward(n: &mut Norm, xhat: &Tensor2D, inv_std: &[f64], dy: &Tensor2D) -> Tensor2D {
    let (rows, cols) = dy.shape();
    {
        let gg = n.gamma.grad.data_mut();
        for r in 0..rows {
            for c in 0..cols {
                gg[c] += dy.get(r, c) * xhat.get(r, c);
            }
        }
    }
    n.beta.grad.add_assign(&dy.sum_rows());
    let gamma = n.gamma.value.data().to_vec();
    let mut dxhat = dy.clone();
    for r in 0..rows {
        for (v, g) in dxhat.row_mut(r).iter_mut().zip(&gamma) {
            *v *= g;
        }
    }
    let mut dx = Tensor2D::zeros(rows, cols);
    match n.kind {
        NormKind::Batch => {
            let bn = rows as f64;
            for c in 0..cols {
                let mut s = 0.0;
                let mut sx = 0.0;
                for r in 0..rows {
                    s += dxhat.get(r, c);
                    sx += dxhat.get(r, c) * xhat.get(r, c);
                }
                for r in 0..rows {
                    let v = inv_std[c] / bn * (bn * dxhat.get(r, c) - s - xhat.get(r, c) * sx);
                    dx.set(r, c, v);
                }
            }
        }
        NormKind::Feature => {
            let bn = cols as f64;
            for r in 0..rows {
                let d = dxhat.row(r);
                let xh = xhat.row(r);
                let s: f64 = d.iter().sum();
                let sx: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
                for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = inv_std[r] / bn * (bn * d[c] - s - xh[c] * sx);
                }
            }
        }
    }
    dx
}

fn collect_params<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Param>) {
    for l in layers {
        match l {
            Layer::Dense(d) => {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
            Layer::Norm(n) => {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
            Layer::Residual(inner) => collect_params(inner, out),
            _ => {}
        }
    }
}

fn collect_named(layers: &[Layer], prefix: &str, out: &mut Vec<(String, Tensor2D)>) {
    for (i, l) in layers.iter().enumerate() {
        match l {
            Layer::Dense(d) => {
                out.push((format!("{prefix}.{i}.weight"), d.weight.value.clone()));
                out.push((format!("{prefix}.{i}.bias"), d.bias.value.clone()));
            }
            Layer::Norm(n) => {
                out.push((format!("{prefix}.{i}.gamma"), n.gamma.value.clone()));
                out.push((format!("{prefix}.{i}.beta"), n.beta.value.clone()));
                out.push((format!("{prefix}.{i}.running_mean"), Tensor2D::row_vector(&n.running_mean)));
                out.push((format!("{prefix}.{i}.running_var"), Tensor2D::row_vector(&n.running_var)));
            }
            Layer::Residual(inner) => collect_named(inner, &format!("{prefix}.{i}"), out),
            _ => {}
        }
    }
}

fn collect_named_mut<'a>(layers: &'a mut [Layer], prefix: &str, out: &mut Vec<(String, TensorSlot<'a>)>) {
    for (i, l) in layers.iter_mut().enumerate() {
        match l {
            Layer::Dense(d) => {
                out.push((format!("{prefix}.{i}.weight"), TensorSlot::Param(&mut d.weight.value)));
                out.push((format!("{prefix}.{i}.bias"), TensorSlot::Param(&mut d.bias.value)));
            }
            Layer::Norm(n) => {
                out.push((format!("{prefix}.{i}.gamma"), TensorSlot::Param(&mut n.gamma.value)));
                out.push((format!("{prefix}.{i}.beta"), TensorSlot::Param(&mut n.beta.value)));
                out.push((format!("{prefix}.{i}.running_mean"), TensorSlot::Buffer(&mut n.running_mean)));
                out.push((format!("{prefix}.{i}.running_var"), TensorSlot::Buffer(&mut n.running_var)));
            }
            Layer::Residual(inner) => collect_named_mut(inner, &format!("{prefix}.{i}"), out),
            _ => {}
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
