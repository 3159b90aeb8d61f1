//! Classification metrics, checkpoint evaluation, the component ablation
//! study and the k-NN versus classifier-head comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{who_label, DatasetSplit, Label, PatientCase, NUM_CLASSES};
use crate::error::{PmxError, Result};
use crate::explain::{infer_cases, predict, require_prototypes, InferencePath};
use crate::model::Ablation;
use crate::training::{train, Checkpoint, TrainConfig};

/// Environment variable capping worker threads for parallel runs.
pub const THREADS_ENV: &str = "PMX_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means over the three classes.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Share of predictions matching the WHO class of the true T-score.
    /// Present when T-scores were supplied.
    pub clinical_agreement: Option<f64>,
    /// Recall of osteopenia and osteoporosis pooled as the positive class.
    pub normal_vs_abnormal_sensitivity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(predictions: &[Label], truths: &[Label]) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(PmxError::shape("metrics label vectors", truths.len(), predictions.len()));
    }
    let n = truths.len();
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, t) in predictions.iter().zip(truths) {
        confusion[t.index()][p.index()] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = Label::ALL
        .iter()
        .map(|&class| {
            let c = class.index();
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..NUM_CLASSES).map(|t| confusion[t][c]).sum();
            if support == 0 {
                log::warn!("class {class} has no support; precision and recall reported as 0");
            }
            let precision = ratio(confusion[c][c], predicted);
            let recall = ratio(confusion[c][c], support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let abnormal_true = truths.iter().filter(|t| t.is_abnormal()).count();
    let abnormal_hit = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| t.is_abnormal() && p.is_abnormal())
        .count();
    Ok(MetricsReport {
        n,
        accuracy: ratio(correct, n),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion,
        clinical_agreement: None,
        normal_vs_abnormal_sensitivity: ratio(abnormal_hit, abnormal_true),
    })
}

impl MetricsReport {
    /// Fills in agreement with the WHO class of each true T-score.
    pub fn with_clinical_agreement(mut self, predictions: &[Label], t_scores: &[f64]) -> Result<Self> {
        if predictions.len() != t_scores.len() {
            return Err(PmxError::shape("T-score vector", predictions.len(), t_scores.len()));
        }
        let mut agree = 0;
        for (p, &t) in predictions.iter().zip(t_scores) {
            if who_label(t)? == *p {
                agree += 1;
            }
        }
        self.clinical_agreement = Some(ratio(agree, predictions.len()));
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub patient_id: String,
    pub true_label: Label,
    pub prediction: Label,
    /// k-NN vote share of the predicted class (absent on the head path).
    pub confidence: Option<f64>,
    pub predicted_t_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub inference_path: InferencePath,
    pub metrics: MetricsReport,
    pub mean_confidence_correct: Option<f64>,
    pub mean_confidence_incorrect: Option<f64>,
    /// Mean confidence of correct minus incorrect predictions.
    pub confidence_separation: Option<f64>,
    pub predictions: Vec<CasePrediction>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Predictions of `ckpt` on `cases` through `path`.
pub fn predict_cases(ckpt: &Checkpoint, cases: &[PatientCase], path: InferencePath) -> Result<Vec<CasePrediction>> {
    if path == InferencePath::Knn {
        require_prototypes(&ckpt.model)?;
    }
    let inf = infer_cases(&ckpt.model, &ckpt.standardizer, cases)?;
    let preds = predict(&ckpt.model, &inf, path, ckpt.config.k, ckpt.config.tau_conf)?;
    Ok(cases
        .iter()
        .zip(inf.iter().zip(preds))
        .map(|(c, (i, (prediction, confidence)))| CasePrediction {
            patient_id: c.patient_id.clone(),
            true_label: c.label,
            prediction,
            confidence,
            predicted_t_score: i.t_pred,
        })
        .collect())
}

/// Evaluates a checkpoint on labelled cases through its own inference path.
pub fn evaluate(ckpt: &Checkpoint, cases: &[PatientCase]) -> Result<EvalReport> {
    evaluate_with(ckpt, cases, InferencePath::for_model(&ckpt.model))
}

pub fn evaluate_with(ckpt: &Checkpoint, cases: &[PatientCase], path: InferencePath) -> Result<EvalReport> {
    let predictions = predict_cases(ckpt, cases, path)?;
    let preds: Vec<Label> = predictions.iter().map(|p| p.prediction).collect();
    let truths: Vec<Label> = cases.iter().map(|c| c.label).collect();
    let t_scores: Vec<f64> = cases.iter().map(|c| c.t_score).collect();
    let metrics = compute_metrics(&preds, &truths)?.with_clinical_agreement(&preds, &t_scores)?;
    let (mut right, mut wrong) = (Vec::new(), Vec::new());
    for p in &predictions {
        if let Some(c) = p.confidence {
            if p.prediction == p.true_label {
                right.push(c);
            } else {
                wrong.push(c);
            }
        }
    }
    let (mc, mi) = (mean(&right), mean(&wrong));
    Ok(EvalReport {
        checkpoint_id: ckpt.checkpoint_id(),
        inference_path: path,
        metrics,
        mean_confidence_correct: mc,
        mean_confidence_incorrect: mi,
        confidence_separation: mc.zip(mi).map(|(a, b)| a - b),
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadComparison {
    pub acc_knn: f64,
    pub acc_head: f64,
}

impl HeadComparison {
    pub fn gap(&self) -> f64 {
        (self.acc_knn - self.acc_head).abs()
    }
}

/// Accuracy of one checkpoint through both inference paths.
pub fn compare_heads(ckpt: &Checkpoint, cases: &[PatientCase]) -> Result<HeadComparison> {
    Ok(HeadComparison {
        acc_knn: evaluate_with(ckpt, cases, InferencePath::Knn)?.metrics.accuracy,
        acc_head: evaluate_with(ckpt, cases, InferencePath::Head)?.metrics.accuracy,
    })
}

/// The six configurations of the ablation study, in table order.
pub fn ablation_configs() -> Vec<(&'static str, Ablation)> {
    let none = Ablation::default();
    vec![
        ("full", none),
        ("w/o gate", Ablation { no_gate: true, ..none }),
        ("w/o multi-task", Ablation { no_multitask: true, ..none }),
        ("w/o cross-attention", Ablation { no_cross_attention: true, ..none }),
        ("w/o prototypes", Ablation { no_prototypes: true, ..none }),
        ("baseline", Ablation::all()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub ablation: Ablation,
    /// Test accuracy through the configuration's own inference path.
    pub accuracy: f64,
    /// Full-model accuracy minus this row's.
    pub delta: f64,
    /// Both inference paths, for configurations with prototypes.
    pub heads: Option<HeadComparison>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.configuration == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| PmxError::Csv(e.to_string());
        w.write_record(["configuration", "accuracy", "delta", "acc_knn", "acc_head", "best_epoch"])
            .map_err(err)?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                r.configuration.clone(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.delta),
                opt(r.heads.map(|h| h.acc_knn)),
                opt(r.heads.map(|h| h.acc_head)),
                r.best_epoch.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| PmxError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| PmxError::Csv(e.to_string()))
    }
}

/// Worker pool sized by [`THREADS_ENV`] (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| PmxError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| PmxError::Config(e.to_string()))
}

/// Trains the full model and every ablation on `split` with the seed of
/// `base_cfg` and reports test accuracy. Runs are independent and may
/// execute in parallel; results do not depend on the thread count.
pub fn run_ablations(split: &DatasetSplit, base_cfg: &TrainConfig) -> Result<AblationTable> {
    let configs = ablation_configs();
    let pool = thread_pool()?;
    let rows: Vec<Result<(String, Ablation, f64, Option<HeadComparison>, usize)>> = pool.install(|| {
        configs
            .par_iter()
            .map(|(name, ablation)| {
                let cfg = TrainConfig {
                    ablation: *ablation,
                    ..base_cfg.clone()
                };
                let annotate = |e: PmxError| match e {
                    PmxError::Diverged { epoch, term } => PmxError::Diverged {
                        epoch,
                        term: format!("{term} ({name})"),
                    },
                    other => PmxError::Validation(format!("ablation {name}: {other}")),
                };
                let out = train(split, &cfg).map_err(annotate)?;
                let ckpt = out.checkpoint;
                let accuracy = evaluate(&ckpt, &split.test).map_err(annotate)?.metrics.accuracy;
                let heads = if ablation.no_prototypes {
                    None
                } else {
                    Some(compare_heads(&ckpt, &split.test).map_err(annotate)?)
                };
                Ok((name.to_string(), *ablation, accuracy, heads, ckpt.history.best_epoch))
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let full = rows[0].2;
    Ok(AblationTable {
        seed: base_cfg.seed,
        rows: rows
            .into_iter()
            .map(|(configuration, ablation, accuracy, heads, best_epoch)| AblationRow {
                configuration,
                ablation,
                accuracy,
                delta: full - accuracy,
                heads,
                best_epoch,
            })
            .collect(),
    })
}
