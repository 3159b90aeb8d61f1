//! k-nearest-prototype classification, vote confidence, clinical feature
//! deviations and explanation reports.
//!
//! A case is compared with every prototype through the gated similarity
//! `alpha cos_img + (1 - alpha) cos_tab`; distances are `1 - similarity`. The
//! `k` nearest prototypes vote with weights `exp(-d / tau)` normalised over
//! the `k`, and the class with the largest summed weight wins. Equal votes go
//! to the more severe class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClinicalFeatures, Label, PatientCase, CLINICAL_DIM, CLINICAL_FEATURES, NUM_CLASSES};
use crate::dataset::Standardizer;
use crate::error::{PmxError, Result};
use crate::model::Model;
use crate::nn::Tensor2D;
use crate::prototypes::{PrototypeBank, PrototypeSource};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_TAU_CONF: f64 = 0.1;
/// A feature is flagged as atypical above this relative deviation.
pub const DEVIATION_FLAG: f64 = 0.5;
/// Predictions below this confidence are reported as low confidence.
pub const LOW_CONFIDENCE: f64 = 0.6;
/// Mean confidence of correct and incorrect predictions observed on the
/// original clinical cohort, reported alongside audits for calibration.
pub const REFERENCE_CONFIDENCE_CORRECT: f64 = 0.853;
pub const REFERENCE_CONFIDENCE_INCORRECT: f64 = 0.489;
/// Votes closer than this count as tied.
const VOTE_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborVote {
    pub index: usize,
    pub class: Label,
    pub slot: usize,
    pub distance: f64,
    pub weight: f64,
    pub source: Option<PrototypeSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub prediction: Label,
    pub neighbors: Vec<NeighborVote>,
    /// Summed neighbor weight per class, in [`Label`] order.
    pub votes: [f64; NUM_CLASSES],
    /// Whether the winner was decided by the severity tie-break.
    pub tie_broken: bool,
}

impl KnnResult {
    pub fn confidence(&self) -> f64 {
        self.votes[self.prediction.index()]
    }
}

/// Argmax over class votes; ties go to the more severe class.
pub fn winning_class(votes: &[f64; NUM_CLASSES]) -> (Label, bool) {
    let best = votes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..NUM_CLASSES).filter(|&c| best - votes[c] <= VOTE_TIE).collect();
    let winner = *tied.last().expect("at least one class attains the max");
    (Label::from_index(winner).expect("class index"), tied.len() > 1)
}

/// Summed weight of the winning class over `(class, weight)` neighbors.
///
/// With normalised weights this is the prediction confidence. Weights are
/// summed as given, so a list such as `0.523, 0.281, 0.110` for one class and
/// `0.086` for another yields `0.914`.
pub fn confidence(neighbors: &[(Label, f64)]) -> f64 {
    let mut votes = [0.0; NUM_CLASSES];
    for (label, w) in neighbors {
        votes[label.index()] += w;
    }
    let (winner, _) = winning_class(&votes);
    votes[winner.index()]
}

/// Retrieves the `k` nearest prototypes given the gated similarity to each
/// prototype (index order) and lets them vote.
pub fn knn_from_similarities(similarities: &[f64], bank: &PrototypeBank, k: usize, tau_conf: f64) -> Result<KnnResult> {
    if similarities.len() != bank.len() {
        return Err(PmxError::shape("prototype similarities", bank.len(), similarities.len()));
    }
    if k == 0 || k > bank.len() {
        return Err(PmxError::Config(format!("k must be in 1..={}, got {k}", bank.len())));
    }
    if !(tau_conf > 0.0) {
        return Err(PmxError::Config(format!("tau_conf must be positive, got {tau_conf}")));
    }
    let mut order: Vec<(f64, usize)> = similarities.iter().enumerate().map(|(j, s)| (1.0 - s, j)).collect();
    // distance, then class and slot (index order encodes both)
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    let d_min = order[0].0;
    let raw: Vec<f64> = order.iter().map(|(d, _)| (-(d - d_min) / tau_conf).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut votes = [0.0; NUM_CLASSES];
    let neighbors: Vec<NeighborVote> = order
        .iter()
        .zip(&raw)
        .map(|(&(distance, j), r)| {
            let weight = r / total;
            let class = bank.class_of(j);
            votes[class.index()] += weight;
            NeighborVote {
                index: j,
                class,
                slot: bank.slot_of(j),
                distance,
                weight,
                source: bank.sources[j].clone(),
            }
        })
        .collect();
    let (prediction, tie_broken) = winning_class(&votes);
    Ok(KnnResult {
        prediction,
        neighbors,
        votes,
        tie_broken,
    })
}

/// Eval-mode quantities for one case.
#[derive(Debug, Clone)]
pub struct CaseInference {
    pub z_img: Vec<f64>,
    pub z_tab: Vec<f64>,
    pub fused: Vec<f64>,
    pub alpha: f64,
    pub logits: [f64; NUM_CLASSES],
    pub t_pred: f64,
}

impl CaseInference {
    pub fn head_prediction(&self) -> Label {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.logits[c] > self.logits[best] {
                best = c;
            }
        }
        Label::from_index(best).expect("class index")
    }
}

const INFERENCE_CHUNK: usize = 256;

/// Standardized `(embedding, clinical)` matrices for a list of cases.
pub fn standardize_cases(cases: &[PatientCase], standardizer: &Standardizer) -> Result<(Tensor2D, Tensor2D)> {
    let dim = standardizer.embedding_dim();
    let mut emb = Vec::with_capacity(cases.len() * dim);
    let mut clin = Vec::with_capacity(cases.len() * CLINICAL_DIM);
    for c in cases {
        emb.extend(
            standardizer
                .embedding(&c.embedding)
                .map_err(|e| PmxError::Validation(format!("patient {}: {e}", c.patient_id)))?,
        );
        clin.extend(standardizer.clinical(&c.clinical.to_array()));
    }
    Ok((
        Tensor2D::from_vec(cases.len(), dim, emb)?,
        Tensor2D::from_vec(cases.len(), CLINICAL_DIM, clin)?,
    ))
}

/// Runs the Eval-mode network over standardized inputs in fixed-size chunks.
pub fn infer_standardized(model: &Model, emb: &Tensor2D, clin: &Tensor2D) -> Result<Vec<CaseInference>> {
    let mut out = Vec::with_capacity(emb.rows());
    let mut start = 0;
    while start < emb.rows() {
        let end = (start + INFERENCE_CHUNK).min(emb.rows());
        let idx: Vec<usize> = (start..end).collect();
        let o = model.forward_eval(&emb.select_rows(&idx), &clin.select_rows(&idx))?;
        for r in 0..idx.len() {
            let mut logits = [0.0; NUM_CLASSES];
            logits.copy_from_slice(o.logits.row(r));
            out.push(CaseInference {
                z_img: o.reprs.z_img.row(r).to_vec(),
                z_tab: o.reprs.z_tab.row(r).to_vec(),
                fused: o.reprs.fused.row(r).to_vec(),
                alpha: o.reprs.alpha[r],
                logits,
                t_pred: o.t_pred[r],
            });
        }
        start = end;
    }
    Ok(out)
}

pub fn infer_cases(model: &Model, standardizer: &Standardizer, cases: &[PatientCase]) -> Result<Vec<CaseInference>> {
    let (emb, clin) = standardize_cases(cases, standardizer)?;
    infer_standardized(model, &emb, &clin)
}

pub fn require_prototypes(model: &Model) -> Result<()> {
    if model.ablation.no_prototypes || !model.bank.initialized {
        return Err(PmxError::Usage(
            "the model has no initialized prototypes; k-NN inference needs a checkpoint trained with prototypes".into(),
        ));
    }
    Ok(())
}

/// k-NN prototype classification of an already-encoded case.
pub fn knn_classify(model: &Model, inference: &CaseInference, k: usize, tau_conf: f64) -> Result<KnnResult> {
    require_prototypes(model)?;
    let sims = model
        .bank
        .gated_similarities(&inference.z_img, &inference.z_tab, inference.alpha)?;
    knn_from_similarities(&sims, &model.bank, k, tau_conf)
}

/// Which output produces the class decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePath {
    Knn,
    Head,
}

impl InferencePath {
    /// k-NN when the model has prototypes, the classifier head otherwise.
    pub fn for_model(model: &Model) -> Self {
        if model.ablation.no_prototypes {
            InferencePath::Head
        } else {
            InferencePath::Knn
        }
    }
}

/// Predicted labels (and k-NN confidences when on the k-NN path).
pub fn predict(
    model: &Model,
    inferences: &[CaseInference],
    path: InferencePath,
    k: usize,
    tau_conf: f64,
) -> Result<Vec<(Label, Option<f64>)>> {
    match path {
        InferencePath::Head => Ok(inferences.iter().map(|i| (i.head_prediction(), None)).collect()),
        InferencePath::Knn => inferences
            .iter()
            .map(|i| knn_classify(model, i, k, tau_conf).map(|r| (r.prediction, Some(r.confidence()))))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDeviation {
    pub feature: String,
    pub delta: f64,
    pub flagged: bool,
}

/// `delta_j = |x_j - mu_j| / max(mu_j, 1)` on raw clinical units.
pub fn feature_deviation(raw: &[f64; CLINICAL_DIM], class_norm: &[f64; CLINICAL_DIM]) -> Vec<FeatureDeviation> {
    raw.iter()
        .zip(class_norm)
        .zip(CLINICAL_FEATURES)
        .map(|((x, mu), name)| {
            let delta = (x - mu).abs() / mu.max(1.0);
            FeatureDeviation {
                feature: name.to_string(),
                delta,
                flagged: delta > DEVIATION_FLAG,
            }
        })
        .collect()
}

/// Per-class means of the raw clinical features.
pub fn class_norms(cases: &[PatientCase]) -> Result<[[f64; CLINICAL_DIM]; NUM_CLASSES]> {
    let mut sums = [[0.0; CLINICAL_DIM]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for c in cases {
        let i = c.label.index();
        counts[i] += 1;
        for (s, v) in sums[i].iter_mut().zip(c.clinical.to_array()) {
            *s += v;
        }
    }
    for (i, (s, &n)) in sums.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(PmxError::Validation(format!(
                "no training cases of class {} to compute clinical norms",
                Label::from_index(i).expect("class index")
            )));
        }
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Votes {
    pub normal: f64,
    pub osteopenia: f64,
    pub osteoporosis: f64,
}

impl From<[f64; NUM_CLASSES]> for Votes {
    fn from(v: [f64; NUM_CLASSES]) -> Self {
        Self {
            normal: v[0],
            osteopenia: v[1],
            osteoporosis: v[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub class: Label,
    pub slot: usize,
    pub source_patient_id: Option<String>,
    pub source_t_score: Option<f64>,
    pub distance: f64,
    pub weight: f64,
    pub clinical: Option<ClinicalFeatures>,
}

impl From<&NeighborVote> for NeighborReport {
    fn from(n: &NeighborVote) -> Self {
        Self {
            class: n.class,
            slot: n.slot,
            source_patient_id: n.source.as_ref().map(|s| s.patient_id.clone()),
            source_t_score: n.source.as_ref().map(|s| s.t_score),
            distance: n.distance,
            weight: n.weight,
            clinical: n.source.as_ref().map(|s| s.clinical),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceBand {
    High,
    Low,
}

impl ConfidenceBand {
    pub fn of(confidence: f64) -> Self {
        if confidence < LOW_CONFIDENCE {
            ConfidenceBand::Low
        } else {
            ConfidenceBand::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub true_label: Label,
    pub correct: bool,
    /// Nearest prototype of the true class.
    pub true_class_nearest_prototype: NeighborReport,
    pub confidence_band: ConfidenceBand,
    pub low_confidence_threshold: f64,
    pub reference_confidence_correct: f64,
    pub reference_confidence_incorrect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub patient_id: String,
    pub prediction: Label,
    pub confidence: f64,
    pub alpha: f64,
    pub votes: Votes,
    pub tie_break_applied: bool,
    pub k: usize,
    pub tau_conf: f64,
    pub neighbors: Vec<NeighborReport>,
    pub deviations: Vec<FeatureDeviation>,
    /// Raw clinical means of the predicted class the deviations refer to.
    pub class_norm: BTreeMap<String, f64>,
    pub predicted_t_score: f64,
    pub checkpoint_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audit: Option<AuditReport>,
}

/// Everything needed to explain predictions of one trained model.
pub struct Explainer<'a> {
    pub model: &'a Model,
    pub standardizer: &'a Standardizer,
    pub class_norms: &'a [[f64; CLINICAL_DIM]; NUM_CLASSES],
    pub checkpoint_id: &'a str,
    pub k: usize,
    pub tau_conf: f64,
}

impl Explainer<'_> {
    pub fn explain(&self, case: &PatientCase, true_label: Option<Label>) -> Result<ExplanationReport> {
        require_prototypes(self.model)?;
        let inference = infer_cases(self.model, self.standardizer, std::slice::from_ref(case))?.remove(0);
        let sims = self
            .model
            .bank
            .gated_similarities(&inference.z_img, &inference.z_tab, inference.alpha)?;
        let knn = knn_from_similarities(&sims, &self.model.bank, self.k, self.tau_conf)?;
        let norm = &self.class_norms[knn.prediction.index()];
        let audit = true_label.map(|t| {
            let nearest = (0..self.model.bank.len())
                .filter(|&j| self.model.bank.class_of(j) == t)
                .min_by(|&a, &b| (1.0 - sims[a]).total_cmp(&(1.0 - sims[b])).then(a.cmp(&b)))
                .expect("every class has prototypes");
            let vote = NeighborVote {
                index: nearest,
                class: t,
                slot: self.model.bank.slot_of(nearest),
                distance: 1.0 - sims[nearest],
                weight: 0.0,
                source: self.model.bank.sources[nearest].clone(),
            };
            AuditReport {
                true_label: t,
                correct: t == knn.prediction,
                true_class_nearest_prototype: NeighborReport::from(&vote),
                confidence_band: ConfidenceBand::of(knn.confidence()),
                low_confidence_threshold: LOW_CONFIDENCE,
                reference_confidence_correct: REFERENCE_CONFIDENCE_CORRECT,
                reference_confidence_incorrect: REFERENCE_CONFIDENCE_INCORRECT,
            }
        });
        Ok(ExplanationReport {
            patient_id: case.patient_id.clone(),
            prediction: knn.prediction,
            confidence: knn.confidence(),
            alpha: inference.alpha,
            votes: knn.votes.into(),
            tie_break_applied: knn.tie_broken,
            k: self.k,
            tau_conf: self.tau_conf,
            neighbors: knn.neighbors.iter().map(NeighborReport::from).collect(),
            deviations: feature_deviation(&case.clinical.to_array(), norm),
            class_norm: CLINICAL_FEATURES
                .iter()
                .zip(norm)
                .map(|(n, v)| (n.to_string(), *v))
                .collect(),
            predicted_t_score: inference.t_pred,
            checkpoint_id: self.checkpoint_id.to_string(),
            audit,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn bank(per_class: usize) -> PrototypeBank {
        PrototypeBank::new(per_class, 4, 3, 4, &mut stream(0))
    }

    #[test]
    fn unanimous_neighbors_give_full_confidence() {
        let b = bank(6);
        let mut sims = vec![0.0; 18];
        sims[12] = 0.9;
        sims[13] = 0.8;
        sims[14] = 0.85;
        let r = knn_from_similarities(&sims, &b, 3, 0.1).unwrap();
        assert_eq!(r.prediction, Label::Osteoporosis);
        assert_eq!(r.confidence(), 1.0);
        assert_eq!(r.neighbors.iter().map(|n| n.slot).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn equidistant_distinct_classes_split_votes_and_pick_most_severe() {
        let b = bank(6);
        let mut sims = vec![-0.5; 18];
        for j in [0, 6, 12] {
            sims[j] = 0.7;
        }
        let r = knn_from_similarities(&sims, &b, 3, 0.1).unwrap();
        for v in r.votes {
            assert!((v - 1.0 / 3.0).abs() < 1e-9);
        }
        assert_eq!(r.prediction, Label::Osteoporosis);
        assert!(r.tie_broken);
    }

    #[test]
    fn confidence_sums_winning_class_weights() {
        let o = Label::Osteoporosis;
        let c = confidence(&[(o, 0.523), (o, 0.281), (o, 0.110), (Label::Osteopenia, 0.086)]);
        assert!((c - 0.914).abs() < 1e-12);
        assert_eq!(confidence(&[(o, 0.5), (o, 0.3), (o, 0.2)]), 1.0);
    }

    #[test]
    fn weights_normalise_and_distances_sort() {
        let b = bank(6);
        let mut rng = stream(5);
        for _ in 0..100 {
            let sims: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=18);
            let r = knn_from_similarities(&sims, &b, k, 0.1).unwrap();
            let total: f64 = r.neighbors.iter().map(|n| n.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!((r.votes.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.neighbors.windows(2).all(|w| w[0].distance <= w[1].distance));
            assert_eq!(r.confidence(), r.votes.iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn sharper_temperature_never_lowers_nearest_weight() {
        let b = bank(6);
        let mut rng = stream(6);
        for _ in 0..100 {
            let sims: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut prev = 0.0;
            for tau in [1.0, 0.5, 0.2, 0.1, 0.05, 0.01] {
                let w = knn_from_similarities(&sims, &b, 3, tau).unwrap().neighbors[0].weight;
                assert!(w >= prev);
                prev = w;
            }
        }
    }

    #[test]
    fn full_k_vote_ignores_enumeration_order() {
        // reversing slots within each class must not change class votes
        let b = bank(6);
        let mut rng = stream(7);
        let sims: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut permuted = sims.clone();
        for c in 0..3 {
            permuted[c * 6..(c + 1) * 6].reverse();
        }
        let a = knn_from_similarities(&sims, &b, 18, 0.1).unwrap();
        let p = knn_from_similarities(&permuted, &b, 18, 0.1).unwrap();
        for c in 0..3 {
            assert!((a.votes[c] - p.votes[c]).abs() < 1e-12);
        }
        assert_eq!(a.prediction, p.prediction);
    }

    #[test]
    fn deviation_examples() {
        let mu = [60.0, 1.0, 70.0, 165.0, 0.2, 0.1, 0.3, 0.05, 0.0, 0.1, 0.1];
        assert!(feature_deviation(&mu, &mu).iter().all(|d| d.delta == 0.0 && !d.flagged));
        let mut x = mu;
        x[7] = 1.0;
        let d = feature_deviation(&x, &mu);
        assert_eq!(d[7].feature, "glucocorticoids");
        assert!((d[7].delta - 0.95).abs() < 1e-12);
        assert!(d[7].flagged);
        x[0] = 90.0;
        assert!((feature_deviation(&x, &mu)[0].delta - 0.5).abs() < 1e-12);
        assert!(!feature_deviation(&x, &mu)[0].flagged);
    }

    #[test]
    fn bad_k_and_tau_are_rejected() {
        let b = bank(6);
        let sims = vec![0.0; 18];
        assert!(knn_from_similarities(&sims, &b, 0, 0.1).is_err());
        assert!(knn_from_similarities(&sims, &b, 19, 0.1).is_err());
        assert!(knn_from_similarities(&sims, &b, 3, 0.0).is_err());
        assert!(knn_from_similarities(&sims[..17], &b, 3, 0.1).is_err());
    }
}
