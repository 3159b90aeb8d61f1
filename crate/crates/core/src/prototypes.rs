//! Prototype banks in the image (128), tabular (64) and fused (256) spaces,
//! their cosine-similarity losses, k-means initialisation and projection onto
//! real training cases.
//!
//! Prototype `j` belongs to class `j / K` and occupies slot `j % K`, where
//! `K` is the number of prototypes per class.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClinicalFeatures, Label, NUM_CLASSES};
use crate::error::{PmxError, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::nn::layers::TensorSlot;
use crate::nn::tensor::{dot, normalized};
use crate::nn::{Dense, Param, Tensor2D};

pub const DEFAULT_PER_CLASS: usize = 6;
pub const IMAGE_PROTO_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoLossConfig {
    /// Temperature dividing cosine similarities before the softmax.
    pub tau_sim: f64,
    pub margin: f64,
    pub lambda_sep: f64,
    pub lambda_ctr: f64,
}

impl Default for ProtoLossConfig {
    fn default() -> Self {
        Self {
            tau_sim: 0.07,
            margin: 0.2,
            lambda_sep: 0.5,
            lambda_ctr: 0.1,
        }
    }
}

/// Where a prototype was last projected from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSource {
    pub patient_id: String,
    pub t_score: f64,
    pub clinical: ClinicalFeatures,
}

/// An owned snapshot of one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: Label,
    pub slot: usize,
    pub vec_img: Vec<f64>,
    pub vec_tab: Vec<f64>,
    pub vec_fused: Vec<f64>,
    pub source: Option<PrototypeSource>,
}

/// Representations of one training case, as used by initialisation and
/// projection.
#[derive(Debug, Clone)]
pub struct CaseRepr {
    pub patient_id: String,
    pub label: Label,
    pub t_score: f64,
    pub clinical: ClinicalFeatures,
    pub z_img: Vec<f64>,
    pub z_tab: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Batch representations entering the prototype loss.
#[derive(Debug, Clone)]
pub struct BatchReprs {
    pub z_img: Tensor2D,
    pub z_tab: Tensor2D,
    pub fused: Tensor2D,
    /// Gate output per row.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtoTerms {
    pub class: f64,
    pub sep: f64,
    pub center: f64,
    pub total: f64,
}

/// Gradients of the weighted prototype loss.
#[derive(Debug, Clone)]
pub struct ProtoGrads {
    pub z_img: Tensor2D,
    pub z_tab: Tensor2D,
    pub fused: Tensor2D,
    pub alpha: Vec<f64>,
    pub p_img: Tensor2D,
    pub p_tab: Tensor2D,
    pub p_fused: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub per_class: usize,
    /// Maps the 256-wide image code into the image prototype space.
    pub img_head: Dense,
    pub img: Param,
    pub tab: Param,
    pub fused: Param,
    pub sources: Vec<Option<PrototypeSource>>,
    /// Set once k-means initialisation has run.
    pub initialized: bool,
}

fn random_unit_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D {
    let mut t = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let v = normalized(&v).expect("gaussian draw is non-zero");
        t.row_mut(r).copy_from_slice(&v);
    }
    t
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    normalized(v).ok_or_else(|| PmxError::Validation(format!("degenerate representation: zero-norm {what}")))
}

/// Row-normalised copy plus the original row norms.
fn unit_rows(t: &Tensor2D, what: &str) -> Result<(Tensor2D, Vec<f64>)> {
    let mut out = t.clone();
    let mut norms = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let n = dot(t.row(r), t.row(r)).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(PmxError::Validation(format!(
                "degenerate representation: {what} row {r} has norm {n}"
            )));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `d/dx` of a function of `x / |x|` given its gradient wrt the unit vector.
fn through_normalisation(d_unit: &Tensor2D, unit: &Tensor2D, norms: &[f64]) -> Tensor2D {
    let mut out = d_unit.clone();
    for (r, &n) in norms.iter().enumerate() {
        let along = dot(d_unit.row(r), unit.row(r));
        let u = unit.row(r);
        out.row_mut(r)
            .iter_mut()
            .zip(u)
            .for_each(|(g, &u)| *g = (*g - along * u) / n);
    }
    out
}

/// Cosine similarity matrix between the rows of `a` and `p`, with what the
/// backward pass needs.
struct Cosines {
    sim: Tensor2D,
    a_unit: Tensor2D,
    a_norm: Vec<f64>,
    p_unit: Tensor2D,
    p_norm: Vec<f64>,
}

impl Cosines {
    fn new(a: &Tensor2D, p: &Tensor2D, what: &str) -> Result<Self> {
        if a.cols() != p.cols() {
            return Err(PmxError::shape(format!("{what} similarity"), p.cols(), a.cols()));
        }
        let (a_unit, a_norm) = unit_rows(a, what)?;
        let (p_unit, p_norm) = unit_rows(p, &format!("{what} prototype"))?;
        Ok(Self {
            sim: a_unit.matmul_nt(&p_unit),
            a_unit,
            a_norm,
            p_unit,
            p_norm,
        })
    }

    fn backward(&self, d_sim: &Tensor2D) -> (Tensor2D, Tensor2D) {
        let da_unit = d_sim.matmul(&self.p_unit);
        let dp_unit = d_sim.matmul_tn(&self.a_unit);
        (
            through_normalisation(&da_unit, &self.a_unit, &self.a_norm),
            through_normalisation(&dp_unit, &self.p_unit, &self.p_norm),
        )
    }
}

/// Highest-similarity slot of each class for one row: `(index, similarity)`.
fn best_per_class(row: &[f64], per_class: usize) -> [(usize, f64); NUM_CLASSES] {
    let mut best = [(0, f64::NEG_INFINITY); NUM_CLASSES];
    for (c, b) in best.iter_mut().enumerate() {
        for j in c * per_class..(c + 1) * per_class {
            if row[j] > b.1 {
                *b = (j, row[j]);
            }
        }
    }
    best
}

/// Cross-entropy over class scores `max_slot(sim) / tau`. Adds `weight *
/// dCE/dsim` into `d_sim` and returns the loss.
fn class_ce(row: &[f64], label: usize, per_class: usize, tau: f64, weight: f64, d_sim: &mut [f64]) -> f64 {
    let best = best_per_class(row, per_class);
    let logits: Vec<f64> = best.iter().map(|(_, s)| s / tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for (c, &(j, _)) in best.iter().enumerate() {
        let p = (logits[c] - m).exp() / z;
        let target = if c == label { 1.0 } else { 0.0 };
        d_sim[j] += weight * (p - target) / tau;
    }
    m + z.ln() - logits[label]
}

/// The prototype objective `L_class + lambda_sep L_sep + lambda_ctr L_center`
/// for a batch, with gradients wrt the representations, the gate output and
/// the three prototype matrices.
///
/// `L_class` is the sum of two cross-entropies whose class scores are the
/// best-slot similarity divided by `tau_sim`: one over fused cosines and one
/// over the gated mix `alpha cos_img + (1 - alpha) cos_tab` used at inference.
/// `L_sep` is the mean hinge `max(0, margin + s_other - s_same)` and
/// `L_center` the mean squared distance between unit fused vectors and the
/// nearest same-class unit prototype, both on fused similarities.
pub fn proto_loss(
    reprs: &BatchReprs,
    labels: &[Label],
    bank: &PrototypeBank,
    cfg: &ProtoLossConfig,
) -> Result<(ProtoTerms, ProtoGrads)> {
    proto_loss_weighted(reprs, labels, bank, cfg, 1.0)
}

/// [`proto_loss`] with the class term scaled by `class_weight` in `total`
/// and in the gradients (the reported `class` term stays unscaled).
pub(crate) fn proto_loss_weighted(
    reprs: &BatchReprs,
    labels: &[Label],
    bank: &PrototypeBank,
    cfg: &ProtoLossConfig,
    class_weight: f64,
) -> Result<(ProtoTerms, ProtoGrads)> {
    let b = labels.len();
    if reprs.fused.rows() != b || reprs.z_img.rows() != b || reprs.z_tab.rows() != b || reprs.alpha.len() != b {
        return Err(PmxError::shape("prototype loss batch", b, reprs.fused.rows()));
    }
    let k = bank.per_class;
    let m = bank.len();
    let fused = Cosines::new(&reprs.fused, &bank.fused.value, "fused")?;
    let img = Cosines::new(&reprs.z_img, &bank.img.value, "image")?;
    let tab = Cosines::new(&reprs.z_tab, &bank.tab.value, "tabular")?;

    let inv_b = 1.0 / b.max(1) as f64;
    let mut d_fused_sim = Tensor2D::zeros(b, m);
    let mut d_gated = Tensor2D::zeros(b, m);
    let mut terms = ProtoTerms::default();
    for (r, label) in labels.iter().enumerate() {
        let y = label.index();
        let f_row = fused.sim.row(r);
        terms.class += inv_b * class_ce(f_row, y, k, cfg.tau_sim, class_weight * inv_b, d_fused_sim.row_mut(r));

        let a = reprs.alpha[r];
        let gated: Vec<f64> = img
            .sim
            .row(r)
            .iter()
            .zip(tab.sim.row(r))
            .map(|(si, st)| a * si + (1.0 - a) * st)
            .collect();
        terms.class += inv_b * class_ce(&gated, y, k, cfg.tau_sim, class_weight * inv_b, d_gated.row_mut(r));

        let best = best_per_class(f_row, k);
        let (same_j, same) = best[y];
        let (other_j, other) = best
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != y)
            .map(|(_, b)| *b)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
            .expect("at least two classes");
        let hinge = cfg.margin + other - same;
        if hinge > 0.0 {
            terms.sep += inv_b * hinge;
            d_fused_sim.row_mut(r)[other_j] += cfg.lambda_sep * inv_b;
            d_fused_sim.row_mut(r)[same_j] -= cfg.lambda_sep * inv_b;
        }
        let gap: f64 = fused
            .a_unit
            .row(r)
            .iter()
            .zip(fused.p_unit.row(same_j))
            .map(|(x, p)| (x - p) * (x - p))
            .sum();
        terms.center += inv_b * gap;
        d_fused_sim.row_mut(r)[same_j] -= 2.0 * cfg.lambda_ctr * inv_b;
    }
    terms.total = class_weight * terms.class + cfg.lambda_sep * terms.sep + cfg.lambda_ctr * terms.center;

    let mut d_img_sim = d_gated.clone();
    let mut d_tab_sim = d_gated.clone();
    let mut d_alpha = vec![0.0; b];
    for r in 0..b {
        let a = reprs.alpha[r];
        d_img_sim.row_mut(r).iter_mut().for_each(|g| *g *= a);
        d_tab_sim.row_mut(r).iter_mut().for_each(|g| *g *= 1.0 - a);
        d_alpha[r] = d_gated
            .row(r)
            .iter()
            .zip(img.sim.row(r).iter().zip(tab.sim.row(r)))
            .map(|(g, (si, st))| g * (si - st))
            .sum();
    }
    let (d_f, d_pf) = fused.backward(&d_fused_sim);
    let (d_i, d_pi) = img.backward(&d_img_sim);
    let (d_t, d_pt) = tab.backward(&d_tab_sim);
    Ok((
        terms,
        ProtoGrads {
            z_img: d_i,
            z_tab: d_t,
            fused: d_f,
            alpha: d_alpha,
            p_img: d_pi,
            p_tab: d_pt,
            p_fused: d_pf,
        },
    ))
}

/// Distance of a batch from the prototype loss's non-differentiable points:
/// ties between slots of one class (fused and gated scores), ties between
/// the competing other classes, and the separation hinge at zero.
/// Finite-difference checks are only meaningful when this exceeds the step.
pub fn switching_margin(reprs: &BatchReprs, labels: &[Label], bank: &PrototypeBank, cfg: &ProtoLossConfig) -> Result<f64> {
    let fused = Cosines::new(&reprs.fused, &bank.fused.value, "fused")?;
    let img = Cosines::new(&reprs.z_img, &bank.img.value, "image")?;
    let tab = Cosines::new(&reprs.z_tab, &bank.tab.value, "tabular")?;
    let k = bank.per_class;
    let slot_gap = |row: &[f64]| {
        let mut g = f64::INFINITY;
        for c in 0..NUM_CLASSES {
            let mut s = row[c * k..(c + 1) * k].to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            if k > 1 {
                g = g.min(s[0] - s[1]);
            }
        }
        g
    };
    let mut margin = f64::INFINITY;
    for (r, label) in labels.iter().enumerate() {
        let f = fused.sim.row(r);
        let a = reprs.alpha[r];
        let gated: Vec<f64> = img.sim.row(r).iter().zip(tab.sim.row(r)).map(|(i, t)| a * i + (1.0 - a) * t).collect();
        margin = margin.min(slot_gap(f)).min(slot_gap(&gated));
        let best = best_per_class(f, k);
        let y = label.index();
        let mut others: Vec<f64> = (0..NUM_CLASSES).filter(|&c| c != y).map(|c| best[c].1).collect();
        others.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(others[0] - others[1]);
        margin = margin.min((cfg.margin + others[0] - best[y].1).abs());
    }
    Ok(margin)
}

/// `alpha cos(z_img, p_img) + (1 - alpha) cos(z_tab, p_tab)`.
pub fn modality_similarity(z_img: &[f64], z_tab: &[f64], alpha: f64, proto: &Prototype) -> Result<f64> {
    let zi = unit(z_img, "image representation")?;
    let zt = unit(z_tab, "tabular representation")?;
    let pi = unit(&proto.vec_img, "image prototype")?;
    let pt = unit(&proto.vec_tab, "tabular prototype")?;
    if zi.len() != pi.len() || zt.len() != pt.len() {
        return Err(PmxError::shape("modality similarity", pi.len(), zi.len()));
    }
    Ok(alpha * dot(&zi, &pi) + (1.0 - alpha) * dot(&zt, &pt))
}

impl ProtoGrads {
    pub fn scale(&mut self, s: f64) {
        for t in [
            &mut self.z_img,
            &mut self.z_tab,
            &mut self.fused,
            &mut self.p_img,
            &mut self.p_tab,
            &mut self.p_fused,
        ] {
            t.scale(s);
        }
        self.alpha.iter_mut().for_each(|a| *a *= s);
    }
}

impl PrototypeBank {
    pub fn new<R: Rng>(
        per_class: usize,
        image_width: usize,
        tabular_width: usize,
        fused_width: usize,
        rng: &mut R,
    ) -> Self {
        let m = NUM_CLASSES * per_class;
        Self {
            per_class,
            img_head: Dense::glorot(image_width, IMAGE_PROTO_DIM, rng),
            img: Param::new(random_unit_rows(m, IMAGE_PROTO_DIM, rng)),
            tab: Param::new(random_unit_rows(m, tabular_width, rng)),
            fused: Param::new(random_unit_rows(m, fused_width, rng)),
            sources: vec![None; m],
            initialized: false,
        }
    }

    pub fn len(&self) -> usize {
        NUM_CLASSES * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.per_class == 0
    }

    pub fn class_of(&self, j: usize) -> Label {
        Label::from_index(j / self.per_class).expect("prototype index in range")
    }

    pub fn slot_of(&self, j: usize) -> usize {
        j % self.per_class
    }

    pub fn prototype(&self, j: usize) -> Prototype {
        Prototype {
            class: self.class_of(j),
            slot: self.slot_of(j),
            vec_img: self.img.value.row(j).to_vec(),
            vec_tab: self.tab.value.row(j).to_vec(),
            vec_fused: self.fused.value.row(j).to_vec(),
            source: self.sources[j].clone(),
        }
    }

    pub fn prototypes(&self) -> Vec<Prototype> {
        (0..self.len()).map(|j| self.prototype(j)).collect()
    }

    /// Gated similarity of one case to every prototype, in index order.
    pub fn gated_similarities(&self, z_img: &[f64], z_tab: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let zi = unit(z_img, "image representation")?;
        let zt = unit(z_tab, "tabular representation")?;
        if zi.len() != self.img.value.cols() || zt.len() != self.tab.value.cols() {
            return Err(PmxError::shape(
                "prototype similarity",
                format!("{} + {}", self.img.value.cols(), self.tab.value.cols()),
                format!("{} + {}", zi.len(), zt.len()),
            ));
        }
        (0..self.len())
            .map(|j| {
                let pi = unit(self.img.value.row(j), "image prototype")?;
                let pt = unit(self.tab.value.row(j), "tabular prototype")?;
                Ok(alpha * dot(&zi, &pi) + (1.0 - alpha) * dot(&zt, &pt))
            })
            .collect()
    }

    /// Prototype vectors plus the image head, in optimizer order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.img_head.weight,
            &mut self.img_head.bias,
            &mut self.img,
            &mut self.tab,
            &mut self.fused,
        ]
    }

    pub fn accumulate(&mut self, grads: &ProtoGrads) {
        self.img.grad.add_assign(&grads.p_img);
        self.tab.grad.add_assign(&grads.p_tab);
        self.fused.grad.add_assign(&grads.p_fused);
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorSlot<'_>)> {
        vec![
            ("prototypes.img_head.weight".into(), TensorSlot::Param(&mut self.img_head.weight.value)),
            ("prototypes.img_head.bias".into(), TensorSlot::Param(&mut self.img_head.bias.value)),
            ("prototypes.img".into(), TensorSlot::Param(&mut self.img.value)),
            ("prototypes.tab".into(), TensorSlot::Param(&mut self.tab.value)),
            ("prototypes.fused".into(), TensorSlot::Param(&mut self.fused.value)),
        ]
    }

    /// Rescales every prototype vector to unit length.
    pub fn renormalize(&mut self) -> Result<()> {
        for (what, t) in [
            ("image", &mut self.img.value),
            ("tabular", &mut self.tab.value),
            ("fused", &mut self.fused.value),
        ] {
            for r in 0..t.rows() {
                let v = unit(t.row(r), &format!("{what} prototype {r}"))?;
                t.row_mut(r).copy_from_slice(&v);
            }
        }
        Ok(())
    }

    fn set(&mut self, j: usize, z_img: &[f64], z_tab: &[f64], fused: &[f64]) -> Result<()> {
        for (what, v, t) in [
            ("image", z_img, &self.img.value),
            ("tabular", z_tab, &self.tab.value),
            ("fused", fused, &self.fused.value),
        ] {
            if v.len() != t.cols() {
                return Err(PmxError::shape(format!("{what} prototype"), t.cols(), v.len()));
            }
        }
        self.img.value.row_mut(j).copy_from_slice(&unit(z_img, "image representation")?);
        self.tab.value.row_mut(j).copy_from_slice(&unit(z_tab, "tabular representation")?);
        self.fused.value.row_mut(j).copy_from_slice(&unit(fused, "fused representation")?);
        Ok(())
    }

    /// Per class, clusters the unit fused representations into `K` groups.
    /// Each prototype's fused vector is its unit centroid; its image and
    /// tabular vectors are the unit means of the same members' unit vectors.
    pub fn init_kmeans<R: Rng>(&mut self, train: &[CaseRepr], max_iter: usize, tol: f64, rng: &mut R) -> Result<()> {
        let k = self.per_class;
        for label in Label::ALL {
            let members: Vec<&CaseRepr> = train.iter().filter(|c| c.label == label).collect();
            if members.len() < k {
                return Err(PmxError::Validation(format!(
                    "class {label} has {} training cases but {k} prototypes per class were requested; \
                     lower prototypes_per_class in the config",
                    members.len()
                )));
            }
            let unit_of = |f: fn(&CaseRepr) -> &[f64], what: &str| -> Result<Vec<Vec<f64>>> {
                members.iter().map(|c| unit(f(c), what)).collect()
            };
            let fused = unit_of(|c| &c.fused, "fused representation")?;
            let img = unit_of(|c| &c.z_img, "image representation")?;
            let tab = unit_of(|c| &c.z_tab, "tabular representation")?;
            let cfg = KMeansConfig { k, max_iter, tol };
            let result = kmeans(&fused, &cfg, rng)?;
            for slot in 0..k {
                let j = label.index() * k + slot;
                let mut idx = result.members(slot);
                if idx.is_empty() {
                    // an empty cluster borrows the case nearest its centroid
                    let c = &result.centroids[slot];
                    let nearest = (0..fused.len())
                        .min_by(|&a, &b| {
                            let da: f64 = fused[a].iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                            let db: f64 = fused[b].iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                            da.partial_cmp(&db).unwrap_or(Ordering::Equal)
                        })
                        .expect("class is non-empty");
                    idx = vec![nearest];
                }
                let mean = |vs: &[Vec<f64>]| -> Vec<f64> {
                    let mut m = vec![0.0; vs[0].len()];
                    for &i in &idx {
                        m.iter_mut().zip(&vs[i]).for_each(|(s, v)| *s += v);
                    }
                    m
                };
                let (mi, mt) = (mean(&img), mean(&tab));
                self.set(j, &mi, &mt, &result.centroids[slot])?;
                self.sources[j] = None;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Replaces every prototype with the unit representations of the
    /// same-class training case closest to it, scored by the summed cosine
    /// similarity over the image, tabular and fused spaces (ties go to the
    /// lexicographically smallest patient id), and records the source.
    pub fn project(&mut self, train: &[CaseRepr]) -> Result<()> {
        let units: Vec<[Vec<f64>; 3]> = train
            .iter()
            .map(|c| {
                Ok([
                    unit(&c.z_img, "image representation")?,
                    unit(&c.z_tab, "tabular representation")?,
                    unit(&c.fused, "fused representation")?,
                ])
            })
            .collect::<Result<_>>()?;
        for j in 0..self.len() {
            let class = self.class_of(j);
            let p = [
                unit(self.img.value.row(j), "image prototype")?,
                unit(self.tab.value.row(j), "tabular prototype")?,
                unit(self.fused.value.row(j), "fused prototype")?,
            ];
            let mut best: Option<(usize, f64)> = None;
            for (i, case) in train.iter().enumerate() {
                if case.label != class {
                    continue;
                }
                let s: f64 = units[i].iter().zip(&p).map(|(u, v)| dot(u, v)).sum();
                best = match best {
                    Some((bi, bs)) if s < bs || (s == bs && train[bi].patient_id <= case.patient_id) => Some((bi, bs)),
                    _ => Some((i, s)),
                };
            }
            let (i, _) = best.ok_or_else(|| {
                PmxError::Validation(format!("no training case of class {class} to project prototype {j} onto"))
            })?;
            let case = &train[i];
            self.set(j, &case.z_img, &case.z_tab, &case.fused)?;
            self.sources[j] = Some(PrototypeSource {
                patient_id: case.patient_id.clone(),
                t_score: case.t_score,
                clinical: case.clinical,
            });
        }
        Ok(())
    }
}
