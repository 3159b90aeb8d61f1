//! Modality encoders, the cross-modal fusion block and the similarity gate.
//!
//! Shapes for a batch of `B` cases with the default widths:
//!
//! | block | input | output |
//! |-------|-------|--------|
//! | image encoder | `B x 1151` | `B x 256` |
//! | tabular encoder | `B x 11` | `B x 64` |
//! | fusion | `(B x 256, B x 64)` | `B x 256` |
//! | gate | `(B x 256, B x 64)` | `B` values in `(0, 1)` |
//!
//! Fusion treats the two modality vectors as a two-token sequence. The image
//! vector is the single query; keys and values come from both the image
//! vector and the tabular vector lifted to the image width. The attended
//! value goes through an output map and is added back onto the image vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmxError, Result};
use crate::nn::layers::{sigmoid, TensorSlot};
use crate::nn::{Dense, Layer, Mode, Norm, NormKind, Param, Sequential, Tape, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub embedding: usize,
    pub image_hidden: usize,
    pub image_out: usize,
    pub clinical: usize,
    pub tabular_out: usize,
    pub image_dropout: f64,
    pub tabular_dropout: f64,
    pub norm: NormKind,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            embedding: crate::dataset::EMBEDDING_DIM,
            image_hidden: 512,
            image_out: 256,
            clinical: crate::dataset::CLINICAL_DIM,
            tabular_out: 64,
            image_dropout: 0.3,
            tabular_dropout: 0.1,
            norm: NormKind::Batch,
        }
    }
}

/// `embedding -> Dense -> Norm -> ReLU -> Dropout -> Dense`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub stack: Sequential,
}

impl ImageEncoder {
    pub fn new<R: Rng>(dims: &EncoderDims, rng: &mut R) -> Self {
        Self {
            stack: Sequential::new(vec![
                Layer::Dense(Dense::he(dims.embedding, dims.image_hidden, rng)),
                Layer::Norm(Norm::new(dims.norm, dims.image_hidden)),
                Layer::Relu,
                Layer::Dropout(dims.image_dropout),
                Layer::Dense(Dense::glorot(dims.image_hidden, dims.image_out, rng)),
            ]),
        }
    }

    pub fn forward<R: Rng>(&mut self, x: &Tensor2D, mode: Mode, rng: &mut R) -> Result<(Tensor2D, Tape)> {
        self.stack.forward(x, mode, rng)
    }

    pub fn infer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.stack.infer(x)
    }

    /// Eval-mode encoding of a single standardized embedding.
    pub fn encode_image(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(self.infer(&Tensor2D::row_vector(embedding))?.into_data())
    }
}

/// `clinical -> Dense -> ReLU -> [Dense -> ReLU -> Dropout] + skip`.
#[derive(Debug, Clone)]
pub struct TabularEncoder {
    pub stack: Sequential,
}

impl TabularEncoder {
    pub fn new<R: Rng>(dims: &EncoderDims, rng: &mut R) -> Self {
        Self {
            stack: Sequential::new(vec![
                Layer::Dense(Dense::he(dims.clinical, dims.tabular_out, rng)),
                Layer::Relu,
                Layer::Residual(vec![
                    Layer::Dense(Dense::he(dims.tabular_out, dims.tabular_out, rng)),
                    Layer::Relu,
                    Layer::Dropout(dims.tabular_dropout),
                ]),
            ]),
        }
    }

    pub fn forward<R: Rng>(&mut self, x: &Tensor2D, mode: Mode, rng: &mut R) -> Result<(Tensor2D, Tape)> {
        self.stack.forward(x, mode, rng)
    }

    pub fn infer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.stack.infer(x)
    }

    pub fn encode_tabular(&self, clinical: &[f64]) -> Result<Vec<f64>> {
        Ok(self.infer(&Tensor2D::row_vector(clinical))?.into_data())
    }

    /// The residual block's dense layer.
    pub fn second_layer_mut(&mut self) -> &mut Dense {
        match &mut self.stack.layers[2] {
            Layer::Residual(inner) => match &mut inner[0] {
                Layer::Dense(d) => d,
                _ => unreachable!("tabular residual block starts with a dense layer"),
            },
            _ => unreachable!("tabular encoder layout"),
        }
    }
}

/// Single-head attention over the tokens `{h_i, up(h_t)}` with `h_i` as query.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub up: Dense,
    pub query: Param,
    pub key: Param,
    pub value: Param,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub enum FusionBlock {
    Attention(CrossAttention),
    /// Ablation: `Dense([h_i; h_t])`.
    Concat(Dense),
}

/// Intermediate values needed for the fusion backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    h_i: Tensor2D,
    h_t: Tensor2D,
    up: Tensor2D,
    q: Tensor2D,
    k: [Tensor2D; 2],
    v: [Tensor2D; 2],
    /// `B x 2` attention weights over (image, tabular) tokens.
    pub weights: Tensor2D,
    attended: Tensor2D,
}

fn glorot_param<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Param {
    Dense::glorot(rows, cols, rng).weight
}

fn check_cols(what: &str, t: &Tensor2D, expected: usize) -> Result<()> {
    if t.cols() != expected {
        return Err(PmxError::shape(what, format!("{expected} columns"), t.cols()));
    }
    Ok(())
}

fn rowwise_dot(a: &Tensor2D, b: &Tensor2D) -> Vec<f64> {
    (0..a.rows()).map(|r| crate::nn::tensor::dot(a.row(r), b.row(r))).collect()
}

fn scale_rows(t: &Tensor2D, s: &[f64]) -> Tensor2D {
    let mut out = t.clone();
    for (r, &k) in s.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v *= k);
    }
    out
}

impl FusionBlock {
    pub fn attention<R: Rng>(image_width: usize, tabular_width: usize, rng: &mut R) -> Self {
        FusionBlock::Attention(CrossAttention {
            up: Dense::glorot(tabular_width, image_width, rng),
            query: glorot_param(image_width, image_width, rng),
            key: glorot_param(image_width, image_width, rng),
            value: glorot_param(image_width, image_width, rng),
            out: Dense::glorot(image_width, image_width, rng),
        })
    }

    pub fn concat<R: Rng>(image_width: usize, tabular_width: usize, rng: &mut R) -> Self {
        FusionBlock::Concat(Dense::glorot(image_width + tabular_width, image_width, rng))
    }

    pub fn image_width(&self) -> usize {
        match self {
            FusionBlock::Attention(a) => a.out.outputs(),
            FusionBlock::Concat(d) => d.outputs(),
        }
    }

    pub fn tabular_width(&self) -> usize {
        match self {
            FusionBlock::Attention(a) => a.up.inputs(),
            FusionBlock::Concat(d) => d.inputs() - d.outputs(),
        }
    }

    pub fn forward(&self, h_i: &Tensor2D, h_t: &Tensor2D) -> Result<(Tensor2D, FusionCache)> {
        check_cols("fusion image input", h_i, self.image_width())?;
        check_cols("fusion tabular input", h_t, self.tabular_width())?;
        if h_i.rows() != h_t.rows() {
            return Err(PmxError::shape("fusion batch", h_i.rows(), h_t.rows()));
        }
        match self {
            FusionBlock::Attention(a) => {
                let width = h_i.cols() as f64;
                let scale = 1.0 / width.sqrt();
                let up = a.up.apply(h_t);
                let q = h_i.matmul(&a.query.value);
                let k = [h_i.matmul(&a.key.value), up.matmul(&a.key.value)];
                let v = [h_i.matmul(&a.value.value), up.matmul(&a.value.value)];
                let s0 = rowwise_dot(&q, &k[0]);
                let s1 = rowwise_dot(&q, &k[1]);
                let mut weights = Tensor2D::zeros(h_i.rows(), 2);
                for r in 0..h_i.rows() {
                    let (x0, x1) = (s0[r] * scale, s1[r] * scale);
                    let m = x0.max(x1);
                    let (e0, e1) = ((x0 - m).exp(), (x1 - m).exp());
                    weights.set(r, 0, e0 / (e0 + e1));
                    weights.set(r, 1, e1 / (e0 + e1));
                }
                let w0: Vec<f64> = (0..h_i.rows()).map(|r| weights.get(r, 0)).collect();
                let w1: Vec<f64> = (0..h_i.rows()).map(|r| weights.get(r, 1)).collect();
                let mut attended = scale_rows(&v[0], &w0);
                attended.add_assign(&scale_rows(&v[1], &w1));
                let mut out = a.out.apply(&attended);
                out.add_assign(h_i);
                Ok((
                    out,
                    FusionCache {
                        h_i: h_i.clone(),
                        h_t: h_t.clone(),
                        up,
                        q,
                        k,
                        v,
                        weights,
                        attended,
                    },
                ))
            }
            FusionBlock::Concat(d) => {
                let x = h_i.hcat(h_t)?;
                let out = d.apply(&x);
                let empty = Tensor2D::zeros(0, 0);
                Ok((
                    out,
                    FusionCache {
                        h_i: h_i.clone(),
                        h_t: h_t.clone(),
                        up: empty.clone(),
                        q: empty.clone(),
                        k: [empty.clone(), empty.clone()],
                        v: [empty.clone(), empty.clone()],
                        weights: empty.clone(),
                        attended: empty,
                    },
                ))
            }
        }
    }

    /// Single-case Eval-mode fusion.
    pub fn fuse(&self, h_i: &[f64], h_t: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward(&Tensor2D::row_vector(h_i), &Tensor2D::row_vector(h_t))?;
        Ok(out.into_data())
    }

    /// Accumulates parameter gradients; returns `(dL/dh_i, dL/dh_t)`.
    pub fn backward(&mut self, cache: &FusionCache, d_out: &Tensor2D) -> (Tensor2D, Tensor2D) {
        match self {
            FusionBlock::Attention(a) => {
                let rows = d_out.rows();
                let scale = 1.0 / (cache.h_i.cols() as f64).sqrt();
                let mut d_hi = d_out.clone();
                let d_att = a.out.backprop(&cache.attended, d_out, true).expect("input grad");
                let w0: Vec<f64> = (0..rows).map(|r| cache.weights.get(r, 0)).collect();
                let w1: Vec<f64> = (0..rows).map(|r| cache.weights.get(r, 1)).collect();
                let dw0 = rowwise_dot(&d_att, &cache.v[0]);
                let dw1 = rowwise_dot(&d_att, &cache.v[1]);
                let dv0 = scale_rows(&d_att, &w0);
                let dv1 = scale_rows(&d_att, &w1);
                // softmax: ds_j = w_j (dw_j - sum_k w_k dw_k), then the 1/sqrt(D) scale
                let mut ds0 = vec![0.0; rows];
                let mut ds1 = vec![0.0; rows];
                for r in 0..rows {
                    let mean = w0[r] * dw0[r] + w1[r] * dw1[r];
                    ds0[r] = w0[r] * (dw0[r] - mean) * scale;
                    ds1[r] = w1[r] * (dw1[r] - mean) * scale;
                }
                let mut dq = scale_rows(&cache.k[0], &ds0);
                dq.add_assign(&scale_rows(&cache.k[1], &ds1));
                let dk0 = scale_rows(&cache.q, &ds0);
                let dk1 = scale_rows(&cache.q, &ds1);

                a.query.grad.add_matmul_tn(&cache.h_i, &dq);
                d_hi.add_assign(&dq.matmul_nt(&a.query.value));

                a.key.grad.add_matmul_tn(&cache.h_i, &dk0);
                a.key.grad.add_matmul_tn(&cache.up, &dk1);
                d_hi.add_assign(&dk0.matmul_nt(&a.key.value));
                let mut d_up = dk1.matmul_nt(&a.key.value);

                a.value.grad.add_matmul_tn(&cache.h_i, &dv0);
                a.value.grad.add_matmul_tn(&cache.up, &dv1);
                d_hi.add_assign(&dv0.matmul_nt(&a.value.value));
                d_up.add_assign(&dv1.matmul_nt(&a.value.value));

                let d_ht = a.up.backprop(&cache.h_t, &d_up, true).expect("input grad");
                (d_hi, d_ht)
            }
            FusionBlock::Concat(d) => {
                let x = cache.h_i.hcat(&cache.h_t).expect("cached shapes agree");
                let dx = d.backprop(&x, d_out, true).expect("input grad");
                dx.hsplit(cache.h_i.cols())
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            FusionBlock::Attention(a) => vec![
                &mut a.up.weight,
                &mut a.up.bias,
                &mut a.query,
                &mut a.key,
                &mut a.value,
                &mut a.out.weight,
                &mut a.out.bias,
            ],
            FusionBlock::Concat(d) => vec![&mut d.weight, &mut d.bias],
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorSlot<'_>)> {
        let names: &[&str] = match self {
            FusionBlock::Attention(_) => &[
                "fusion.up.weight",
                "fusion.up.bias",
                "fusion.query",
                "fusion.key",
                "fusion.value",
                "fusion.out.weight",
                "fusion.out.bias",
            ],
            FusionBlock::Concat(_) => &["fusion.concat.weight", "fusion.concat.bias"],
        };
        names
            .iter()
            .zip(self.params_mut())
            .map(|(n, p)| (n.to_string(), TensorSlot::Param(&mut p.value)))
            .collect()
    }
}

/// `alpha = sigmoid(w . [h_i; h_t] + b)`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub dense: Dense,
}

impl Gate {
    pub fn new<R: Rng>(image_width: usize, tabular_width: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::glorot(image_width + tabular_width, 1, rng),
        }
    }

    pub fn zeros(image_width: usize, tabular_width: usize) -> Self {
        Self {
            dense: Dense::zeros(image_width + tabular_width, 1),
        }
    }

    pub fn forward(&self, h_i: &Tensor2D, h_t: &Tensor2D) -> Result<Vec<f64>> {
        let x = h_i.hcat(h_t)?;
        check_cols("gate input", &x, self.dense.inputs())?;
        Ok(self.dense.apply(&x).data().iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn gate_alpha(&self, h_i: &[f64], h_t: &[f64]) -> Result<f64> {
        Ok(self.forward(&Tensor2D::row_vector(h_i), &Tensor2D::row_vector(h_t))?[0])
    }

    /// Returns `(dL/dh_i, dL/dh_t)` given `dL/dalpha` per row.
    pub fn backward(&mut self, h_i: &Tensor2D, h_t: &Tensor2D, alpha: &[f64], d_alpha: &[f64]) -> (Tensor2D, Tensor2D) {
        let x = h_i.hcat(h_t).expect("cached shapes agree");
        let d_logit: Vec<f64> = alpha.iter().zip(d_alpha).map(|(a, d)| d * a * (1.0 - a)).collect();
        let d_logit = Tensor2D::from_vec(d_logit.len(), 1, d_logit).expect("column");
        let dx = self.dense.backprop(&x, &d_logit, true).expect("input grad");
        dx.hsplit(h_i.cols())
    }
}
