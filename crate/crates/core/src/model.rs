//! The assembled network: encoders, fusion, gate, task heads and the
//! prototype bank, with a batched training forward/backward pass and an
//! Eval-mode representation path shared by training, evaluation and
//! explanation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::encoders::{EncoderDims, FusionBlock, FusionCache, Gate, ImageEncoder, TabularEncoder};
use crate::error::{PmxError, Result};
use crate::nn::layers::TensorSlot;
use crate::nn::{Dense, Mode, Param, ParamGroup, Tape, Tensor2D};
use crate::prototypes::{BatchReprs, ProtoGrads, PrototypeBank};

/// Component switches used by the ablation study. Each flag removes one
/// component and leaves everything else as in the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Fix the modality weight at 0.5.
    pub no_gate: bool,
    /// Drop the regression term from the objective.
    pub no_multitask: bool,
    /// Fuse by a dense map over the concatenation instead of attention.
    pub no_cross_attention: bool,
    /// Drop the prototype loss and classify with the head.
    pub no_prototypes: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            no_gate: true,
            no_multitask: true,
            no_cross_attention: true,
            no_prototypes: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: EncoderDims,
    pub ablation: Ablation,
    pub image: ImageEncoder,
    pub tabular: TabularEncoder,
    pub fusion: FusionBlock,
    pub gate: Gate,
    pub classifier: Dense,
    pub regressor: Dense,
    pub bank: PrototypeBank,
}

/// Batch outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub logits: Tensor2D,
    /// Predicted T-score per row.
    pub t_pred: Vec<f64>,
    pub reprs: BatchReprs,
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    image_tape: Tape,
    tabular_tape: Tape,
    h_i: Tensor2D,
    h_t: Tensor2D,
    fusion: FusionCache,
    h_fused: Tensor2D,
    alpha: Vec<f64>,
}

impl ForwardCache {
    /// Smallest distance of any ReLU input from zero in this pass.
    pub fn relu_margin(&self) -> f64 {
        self.image_tape.relu_margin().min(self.tabular_tape.relu_margin())
    }
}

impl Model {
    pub fn new<R: Rng>(dims: EncoderDims, per_class: usize, ablation: Ablation, rng: &mut R) -> Self {
        let image = ImageEncoder::new(&dims, rng);
        let tabular = TabularEncoder::new(&dims, rng);
        let fusion = if ablation.no_cross_attention {
            FusionBlock::concat(dims.image_out, dims.tabular_out, rng)
        } else {
            FusionBlock::attention(dims.image_out, dims.tabular_out, rng)
        };
        let classifier = Dense::glorot(dims.image_out, NUM_CLASSES, rng);
        let regressor = Dense::glorot(dims.image_out, 1, rng);
        let bank = PrototypeBank::new(per_class, dims.image_out, dims.tabular_out, dims.image_out, rng);
        Self {
            dims,
            ablation,
            image,
            tabular,
            fusion,
            gate: Gate::zeros(dims.image_out, dims.tabular_out),
            classifier,
            regressor,
            bank,
        }
    }

    fn check_inputs(&self, embeddings: &Tensor2D, clinical: &Tensor2D) -> Result<()> {
        if embeddings.cols() != self.dims.embedding {
            return Err(PmxError::shape("embedding input", self.dims.embedding, embeddings.cols()));
        }
        if clinical.cols() != self.dims.clinical {
            return Err(PmxError::shape("clinical input", self.dims.clinical, clinical.cols()));
        }
        if embeddings.rows() != clinical.rows() {
            return Err(PmxError::shape("batch rows", embeddings.rows(), clinical.rows()));
        }
        Ok(())
    }

    fn alpha(&self, h_i: &Tensor2D, h_t: &Tensor2D) -> Result<Vec<f64>> {
        if self.ablation.no_gate {
            Ok(vec![0.5; h_i.rows()])
        } else {
            self.gate.forward(h_i, h_t)
        }
    }

    fn heads(&self, h_fused: &Tensor2D) -> (Tensor2D, Vec<f64>) {
        (self.classifier.apply(h_fused), self.regressor.apply(h_fused).into_data())
    }

    /// Training-mode pass: dropout masks come from `rng` and batch-norm
    /// running statistics are updated.
    pub fn forward_train<R: Rng>(
        &mut self,
        embeddings: &Tensor2D,
        clinical: &Tensor2D,
        rng: &mut R,
    ) -> Result<(Outputs, ForwardCache)> {
        self.check_inputs(embeddings, clinical)?;
        let (h_i, image_tape) = self.image.forward(embeddings, Mode::Train, rng)?;
        let (h_t, tabular_tape) = self.tabular.forward(clinical, Mode::Train, rng)?;
        let (h_fused, fusion) = self.fusion.forward(&h_i, &h_t)?;
        let alpha = self.alpha(&h_i, &h_t)?;
        let (logits, t_pred) = self.heads(&h_fused);
        let reprs = BatchReprs {
            z_img: self.bank.img_head.apply(&h_i),
            z_tab: h_t.clone(),
            fused: h_fused.clone(),
            alpha: alpha.clone(),
        };
        Ok((
            Outputs { logits, t_pred, reprs },
            ForwardCache {
                image_tape,
                tabular_tape,
                h_i,
                h_t,
                fusion,
                h_fused,
                alpha,
            },
        ))
    }

    /// Eval-mode pass; never mutates the model.
    pub fn forward_eval(&self, embeddings: &Tensor2D, clinical: &Tensor2D) -> Result<Outputs> {
        self.check_inputs(embeddings, clinical)?;
        let h_i = self.image.infer(embeddings)?;
        let h_t = self.tabular.infer(clinical)?;
        let (h_fused, _) = self.fusion.forward(&h_i, &h_t)?;
        let alpha = self.alpha(&h_i, &h_t)?;
        let (logits, t_pred) = self.heads(&h_fused);
        Ok(Outputs {
            logits,
            t_pred,
            reprs: BatchReprs {
                z_img: self.bank.img_head.apply(&h_i),
                z_tab: h_t,
                fused: h_fused,
                alpha,
            },
        })
    }

    /// Accumulates parameter gradients given the loss gradients wrt the
    /// logits, the predicted T-scores and (optionally) the prototype loss.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        d_logits: &Tensor2D,
        d_t_pred: &[f64],
        proto: Option<&ProtoGrads>,
    ) -> Result<()> {
        let rows = cache.h_fused.rows();
        let d_t = Tensor2D::from_vec(rows, 1, d_t_pred.to_vec())?;
        let mut d_fused = self.classifier.backprop(&cache.h_fused, d_logits, true).expect("input grad");
        d_fused.add_assign(&self.regressor.backprop(&cache.h_fused, &d_t, true).expect("input grad"));

        let mut d_hi = Tensor2D::zeros(rows, cache.h_i.cols());
        let mut d_ht = Tensor2D::zeros(rows, cache.h_t.cols());
        if let Some(g) = proto {
            d_fused.add_assign(&g.fused);
            d_hi.add_assign(&self.bank.img_head.backprop(&cache.h_i, &g.z_img, true).expect("input grad"));
            d_ht.add_assign(&g.z_tab);
            if !self.ablation.no_gate {
                let (gi, gt) = self.gate.backward(&cache.h_i, &cache.h_t, &cache.alpha, &g.alpha);
                d_hi.add_assign(&gi);
                d_ht.add_assign(&gt);
            }
            self.bank.accumulate(g);
        }
        let (fi, ft) = self.fusion.backward(&cache.fusion, &d_fused);
        d_hi.add_assign(&fi);
        d_ht.add_assign(&ft);
        self.image.stack.backward(&cache.image_tape, &d_hi, false)?;
        self.tabular.stack.backward(&cache.tabular_tape, &d_ht, false)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }

    /// Optimizer groups: the image projection stack, everything else that
    /// feeds the heads (tabular encoder, fusion, gate, heads), and the
    /// prototype vectors with the image prototype head. Disabled components
    /// are left out so weight decay does not touch them.
    pub fn param_groups(&mut self, lr_image: f64, lr_tabular: f64, lr_prototypes: f64) -> Vec<ParamGroup<'_>> {
        let ablation = self.ablation;
        let mut tabular = self.tabular.stack.params_mut();
        tabular.extend(self.fusion.params_mut());
        if !ablation.no_gate {
            tabular.push(&mut self.gate.dense.weight);
            tabular.push(&mut self.gate.dense.bias);
        }
        tabular.extend([
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.regressor.weight,
            &mut self.regressor.bias,
        ]);
        let mut groups = vec![
            ParamGroup {
                name: "image",
                learning_rate: lr_image,
                params: self.image.stack.params_mut(),
            },
            ParamGroup {
                name: "tabular",
                learning_rate: lr_tabular,
                params: tabular,
            },
        ];
        if !ablation.no_prototypes {
            groups.push(ParamGroup {
                name: "prototypes",
                learning_rate: lr_prototypes,
                params: self.bank.params_mut(),
            });
        }
        groups
    }

    /// Every stored tensor (parameters and normalisation statistics) in a
    /// fixed order, as written to checkpoints.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorSlot<'_>)> {
        let mut out = self.image.stack.named_tensors_mut("image");
        out.extend(self.tabular.stack.named_tensors_mut("tabular"));
        out.extend(self.fusion.named_tensors_mut());
        out.push(("gate.weight".into(), TensorSlot::Param(&mut self.gate.dense.weight.value)));
        out.push(("gate.bias".into(), TensorSlot::Param(&mut self.gate.dense.bias.value)));
        out.push(("classifier.weight".into(), TensorSlot::Param(&mut self.classifier.weight.value)));
        out.push(("classifier.bias".into(), TensorSlot::Param(&mut self.classifier.bias.value)));
        out.push(("regressor.weight".into(), TensorSlot::Param(&mut self.regressor.weight.value)));
        out.push(("regressor.bias".into(), TensorSlot::Param(&mut self.regressor.bias.value)));
        out.extend(self.bank.named_tensors_mut());
        out
    }

    /// Copies of every stored tensor, named and ordered like
    /// [`Model::named_tensors_mut`]; normalisation statistics are `1 x n`.
    pub fn tensors(&self) -> Vec<(String, Tensor2D)> {
        let mut out = self.image.stack.named_tensors("image");
        out.extend(self.tabular.stack.named_tensors("tabular"));
        let mut fusion = self.fusion.clone();
        out.extend(
            fusion
                .named_tensors_mut()
                .into_iter()
                .map(|(n, mut slot)| {
                    let (r, c) = slot.shape();
                    (n, Tensor2D::from_vec(r, c, slot.values_mut().to_vec()).expect("slot shape"))
                }),
        );
        for (name, t) in [
            ("gate.weight", &self.gate.dense.weight.value),
            ("gate.bias", &self.gate.dense.bias.value),
            ("classifier.weight", &self.classifier.weight.value),
            ("classifier.bias", &self.classifier.bias.value),
            ("regressor.weight", &self.regressor.weight.value),
            ("regressor.bias", &self.regressor.bias.value),
            ("prototypes.img_head.weight", &self.bank.img_head.weight.value),
            ("prototypes.img_head.bias", &self.bank.img_head.bias.value),
            ("prototypes.img", &self.bank.img.value),
            ("prototypes.tab", &self.bank.tab.value),
            ("prototypes.fused", &self.bank.fused.value),
        ] {
            out.push((name.to_string(), t.clone()));
        }
        out
    }

    /// Every trainable parameter regardless of ablation, in a fixed order.
    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.image.stack.params_mut();
        out.extend(self.tabular.stack.params_mut());
        out.extend(self.fusion.params_mut());
        out.extend([
            &mut self.gate.dense.weight,
            &mut self.gate.dense.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.regressor.weight,
            &mut self.regressor.bias,
        ]);
        out.extend(self.bank.params_mut());
        out
    }

    /// Rounds every stored value to the nearest 32-bit float, matching what
    /// a checkpoint round trip produces.
    pub fn round_to_f32(&mut self) {
        for (_, mut slot) in self.named_tensors_mut() {
            for v in slot.values_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Resets optimizer moment buffers (used when parameters are restored).
    pub fn reset_moments(&mut self) {
        for p in self.all_params_mut() {
            p.reset_moments();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormKind;
    use crate::rng::stream;

    pub(crate) fn tiny_dims() -> EncoderDims {
        EncoderDims {
            embedding: 10,
            image_hidden: 8,
            image_out: 6,
            clinical: 11,
            tabular_out: 5,
            image_dropout: 0.3,
            tabular_dropout: 0.1,
            norm: NormKind::Batch,
        }
    }

    #[test]
    fn shapes_and_alpha_range() {
        let mut rng = stream(1);
        let mut model = Model::new(tiny_dims(), 2, Ablation::default(), &mut rng);
        model.gate.dense.bias.value.data_mut()[0] = 0.7;
        let e = Tensor2D::filled(4, 10, 0.5);
        let c = Tensor2D::filled(4, 11, -0.2);
        let out = model.forward_eval(&e, &c).unwrap();
        assert_eq!(out.logits.shape(), (4, 3));
        assert_eq!(out.t_pred.len(), 4);
        assert_eq!(out.reprs.z_img.shape(), (4, 128));
        assert_eq!(out.reprs.fused.shape(), (4, 6));
        assert!(out.reprs.alpha.iter().all(|&a| a > 0.0 && a < 1.0 && a != 0.5));
        assert!(model.forward_eval(&Tensor2D::zeros(4, 9), &c).is_err());
    }

    #[test]
    fn no_gate_fixes_alpha_and_removes_gate_from_optimizer() {
        let mut rng = stream(2);
        let ablation = Ablation {
            no_gate: true,
            ..Default::default()
        };
        let mut model = Model::new(tiny_dims(), 2, ablation, &mut rng);
        model.gate.dense.bias.value.data_mut()[0] = 3.0;
        let out = model.forward_eval(&Tensor2D::filled(2, 10, 1.0), &Tensor2D::filled(2, 11, 1.0)).unwrap();
        assert_eq!(out.reprs.alpha, vec![0.5, 0.5]);
        let full = Model::new(tiny_dims(), 2, Ablation::default(), &mut stream(2))
            .param_groups(1.0, 1.0, 1.0)
            .iter()
            .map(|g| g.params.len())
            .sum::<usize>();
        let gated = model.param_groups(1.0, 1.0, 1.0).iter().map(|g| g.params.len()).sum::<usize>();
        assert_eq!(full - gated, 2);
    }

    #[test]
    fn no_prototypes_drops_the_prototype_group() {
        let ablation = Ablation {
            no_prototypes: true,
            ..Default::default()
        };
        let mut model = Model::new(tiny_dims(), 2, ablation, &mut stream(3));
        let names: Vec<_> = model.param_groups(1.0, 1.0, 1.0).iter().map(|g| g.name).collect();
        assert_eq!(names, vec!["image", "tabular"]);
    }

    #[test]
    fn rounding_is_idempotent_and_names_are_unique() {
        let mut model = Model::new(tiny_dims(), 2, Ablation::default(), &mut stream(4));
        model.round_to_f32();
        let a = model.tensors();
        model.round_to_f32();
        assert_eq!(a, model.tensors());
        let via_slots: Vec<(String, Vec<f64>)> = model
            .named_tensors_mut()
            .into_iter()
            .map(|(n, mut s)| (n, s.values_mut().to_vec()))
            .collect();
        let copies: Vec<(String, Vec<f64>)> = a.iter().map(|(n, t)| (n.clone(), t.data().to_vec())).collect();
        assert_eq!(via_slots, copies);
        let mut names: Vec<_> = a.iter().map(|(n, _)| n.clone()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(names.iter().any(|n| n.ends_with("running_mean")));
    }
}
