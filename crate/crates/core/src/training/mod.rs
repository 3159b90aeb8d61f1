//! Multi-task training: `L = L_cls + lambda1 L_reg + lambda2 L_proto`, three
//! learning-rate groups under AdamW with cosine annealing, early stopping on
//! validation accuracy, prototype initialisation and periodic projection.

pub mod checkpoint;
pub mod gradcheck;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, Label, PatientCase, Standardizer, NUM_CLASSES};
use crate::encoders::EncoderDims;
use crate::error::{PmxError, Result};
use crate::explain::{class_norms, infer_standardized, predict, standardize_cases, InferencePath};
use crate::model::{Ablation, Model, Outputs};
use crate::nn::{AdamW, CosineSchedule, NormKind, Tensor2D};
use crate::prototypes::{proto_loss_weighted, CaseRepr, ProtoGrads, ProtoLossConfig, ProtoTerms, PrototypeBank};
use crate::rng::{purpose, substream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Image projection stack.
    pub lr_image: f64,
    /// Tabular encoder, fusion, gate and task heads.
    pub lr_tabular: f64,
    /// Prototype vectors and the image prototype head.
    pub lr_prototypes: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the T-score regression term.
    pub lambda1: f64,
    /// Weight of the prototype loss.
    pub lambda2: f64,
    pub lambda_sep: f64,
    pub lambda_ctr: f64,
    pub margin: f64,
    pub tau_sim: f64,
    /// Temperature of the k-NN vote weights.
    pub tau_conf: f64,
    /// Neighbors retrieved by k-NN inference.
    pub k: usize,
    pub prototypes_per_class: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Epochs between prototype projections (another runs at the end).
    pub projection_interval: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub norm: NormKind,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let proto = ProtoLossConfig::default();
        let opt = AdamW::default();
        Self {
            lr_image: 5e-5,
            lr_tabular: 5e-4,
            lr_prototypes: 1e-3,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            lambda1: 0.3,
            lambda2: 1.0,
            lambda_sep: proto.lambda_sep,
            lambda_ctr: proto.lambda_ctr,
            margin: proto.margin,
            tau_sim: proto.tau_sim,
            tau_conf: crate::explain::DEFAULT_TAU_CONF,
            k: crate::explain::DEFAULT_K,
            prototypes_per_class: crate::prototypes::DEFAULT_PER_CLASS,
            batch_size: 64,
            max_epochs: 200,
            patience: 15,
            projection_interval: 10,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            norm: NormKind::Batch,
            seed: 7,
            ablation: Ablation::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PmxError::Config(msg()))
    }
}

impl TrainConfig {
    /// Parses a TOML config; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PmxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_image", self.lr_image),
            ("lr_tabular", self.lr_tabular),
            ("lr_prototypes", self.lr_prototypes),
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_sep", self.lambda_sep),
            ("lambda_ctr", self.lambda_ctr),
            ("margin", self.margin),
            ("kmeans_tol", self.kmeans_tol),
        ] {
            check(v.is_finite() && v >= 0.0, || format!("{name} must be finite and >= 0, got {v}"))?;
        }
        for (name, v) in [("tau_sim", self.tau_sim), ("tau_conf", self.tau_conf), ("eps", self.eps)] {
            check(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))?;
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            check((0.0..1.0).contains(&v), || format!("{name} must be in [0, 1), got {v}"))?;
        }
        for (name, v) in [
            ("prototypes_per_class", self.prototypes_per_class),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("projection_interval", self.projection_interval),
            ("kmeans_max_iter", self.kmeans_max_iter),
        ] {
            check(v >= 1, || format!("{name} must be at least 1, got {v}"))?;
        }
        let total = NUM_CLASSES * self.prototypes_per_class;
        check(self.k >= 1 && self.k <= total, || {
            format!("k must be between 1 and the number of prototypes ({total}), got {}", self.k)
        })
    }

    pub fn proto_loss(&self) -> ProtoLossConfig {
        ProtoLossConfig {
            tau_sim: self.tau_sim,
            margin: self.margin,
            lambda_sep: self.lambda_sep,
            lambda_ctr: self.lambda_ctr,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Regression weight after the multi-task switch.
    pub fn effective_lambda1(&self) -> f64 {
        if self.ablation.no_multitask {
            0.0
        } else {
            self.lambda1
        }
    }

    /// Prototype-loss weight after the prototype switch.
    pub fn effective_lambda2(&self) -> f64 {
        if self.ablation.no_prototypes {
            0.0
        } else {
            self.lambda2
        }
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            norm: self.norm,
            ..EncoderDims::default()
        }
    }
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub proto: ProtoTerms,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_cls", self.cls),
            ("L_reg", self.reg),
            ("L_proto.class", self.proto.class),
            ("L_proto.sep", self.proto.sep),
            ("L_proto.center", self.proto.center),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.cls += w * other.cls;
        self.reg += w * other.reg;
        self.proto.class += w * other.proto.class;
        self.proto.sep += w * other.proto.sep;
        self.proto.center += w * other.proto.center;
        self.proto.total += w * other.proto.total;
        self.total += w * other.total;
        self.lambda1 = other.lambda1;
        self.lambda2 = other.lambda2;
    }
}

/// Weights applied to each objective term when forming gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub cls: f64,
    pub reg: f64,
    pub proto_class: f64,
    pub proto_sep: f64,
    pub proto_center: f64,
}

impl TermWeights {
    /// The full objective under `cfg`, including ablation switches.
    pub fn objective(cfg: &TrainConfig) -> Self {
        let l2 = cfg.effective_lambda2();
        Self {
            cls: 1.0,
            reg: cfg.effective_lambda1(),
            proto_class: l2,
            proto_sep: l2 * cfg.lambda_sep,
            proto_center: l2 * cfg.lambda_ctr,
        }
    }

    fn uses_prototypes(&self) -> bool {
        self.proto_class != 0.0 || self.proto_sep != 0.0 || self.proto_center != 0.0
    }
}

/// Gradients of the objective wrt the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Tensor2D,
    pub t_pred: Vec<f64>,
    pub proto: Option<ProtoGrads>,
}

/// Evaluates the objective on a batch of outputs. `breakdown.total` is the
/// weighted sum under `weights`; gradients follow the same weights.
pub fn objective(
    outputs: &Outputs,
    labels: &[Label],
    t_scores: &[f64],
    bank: &PrototypeBank,
    proto_cfg: &ProtoLossConfig,
    weights: &TermWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    let b = labels.len();
    if outputs.logits.rows() != b || t_scores.len() != b {
        return Err(PmxError::shape("objective batch", b, outputs.logits.rows()));
    }
    let inv_b = 1.0 / b as f64;
    let mut d_logits = Tensor2D::zeros(b, NUM_CLASSES);
    let mut cls = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let row = outputs.logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
        cls += inv_b * (m + z.ln() - row[label.index()]);
        for c in 0..NUM_CLASSES {
            let p = (row[c] - m).exp() / z;
            let target = if c == label.index() { 1.0 } else { 0.0 };
            d_logits.set(r, c, weights.cls * inv_b * (p - target));
        }
    }
    let mut reg = 0.0;
    let mut d_t = vec![0.0; b];
    for r in 0..b {
        let e = outputs.t_pred[r] - t_scores[r];
        reg += inv_b * e * e;
        d_t[r] = weights.reg * 2.0 * inv_b * e;
    }
    let (proto, proto_grads) = if weights.uses_prototypes() {
        // split the sub-term weights into a prototype-loss config
        let scale = if weights.proto_class != 0.0 { weights.proto_class } else { 1.0 };
        let cfg = ProtoLossConfig {
            lambda_sep: weights.proto_sep / scale,
            lambda_ctr: weights.proto_center / scale,
            ..*proto_cfg
        };
        let class_weight = weights.proto_class / scale;
        let (terms, mut grads) = proto_loss_weighted(&outputs.reprs, labels, bank, &cfg, class_weight)?;
        grads.scale(scale);
        (terms, Some(grads))
    } else {
        (ProtoTerms::default(), None)
    };
    let total = weights.cls * cls
        + weights.reg * reg
        + weights.proto_class * proto.class
        + weights.proto_sep * proto.sep
        + weights.proto_center * proto.center;
    let breakdown = LossBreakdown {
        cls,
        reg,
        proto: ProtoTerms {
            total: proto.class + proto_cfg.lambda_sep * proto.sep + proto_cfg.lambda_ctr * proto.center,
            ..proto
        },
        lambda1: weights.reg,
        lambda2: weights.proto_class,
        total,
    };
    Ok((
        breakdown,
        OutputGrads {
            logits: d_logits,
            t_pred: d_t,
            proto: proto_grads,
        },
    ))
}

/// Standardized inputs and targets of one partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub emb: Tensor2D,
    pub clin: Tensor2D,
    pub labels: Vec<Label>,
    pub t_scores: Vec<f64>,
}

impl Prepared {
    pub fn new(cases: &[PatientCase], standardizer: &Standardizer) -> Result<Self> {
        let (emb, clin) = standardize_cases(cases, standardizer)?;
        Ok(Self {
            emb,
            clin,
            labels: cases.iter().map(|c| c.label).collect(),
            t_scores: cases.iter().map(|c| c.t_score).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor2D, Tensor2D, Vec<Label>, Vec<f64>) {
        (
            self.emb.select_rows(idx),
            self.clin.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.t_scores[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Batch-size-weighted mean of the training objective.
    pub loss: LossBreakdown,
    /// With prototypes, measured after projecting a copy of the bank.
    pub val_accuracy: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    pub inference_path: InferencePath,
    /// Validation accuracy of the returned model (best epoch, rounded to
    /// storage precision, final projection applied).
    pub final_val_accuracy: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// The prototype bank of the returned model before its final projection.
    pub pre_projection_bank: PrototypeBank,
}

fn case_reprs(model: &Model, cases: &[PatientCase], prepared: &Prepared) -> Result<Vec<CaseRepr>> {
    let inf = infer_standardized(model, &prepared.emb, &prepared.clin)?;
    Ok(cases
        .iter()
        .zip(inf)
        .map(|(c, i)| CaseRepr {
            patient_id: c.patient_id.clone(),
            label: c.label,
            t_score: c.t_score,
            clinical: c.clinical,
            z_img: i.z_img,
            z_tab: i.z_tab,
            fused: i.fused,
        })
        .collect())
}

/// Accuracy of `model` on a prepared partition through its inference path.
pub fn accuracy(model: &Model, prepared: &Prepared, cfg: &TrainConfig) -> Result<f64> {
    if prepared.is_empty() {
        return Ok(0.0);
    }
    let inf = infer_standardized(model, &prepared.emb, &prepared.clin)?;
    let preds = predict(model, &inf, InferencePath::for_model(model), cfg.k, cfg.tau_conf)?;
    let correct = preds.iter().zip(&prepared.labels).filter(|((p, _), t)| p == *t).count();
    Ok(correct as f64 / prepared.len() as f64)
}

/// The loss term that a non-finite forward output would poison.
fn non_finite_output(out: &Outputs) -> Option<&'static str> {
    if !out.logits.is_finite() {
        Some("L_cls")
    } else if out.t_pred.iter().any(|v| !v.is_finite()) {
        Some("L_reg")
    } else if !(out.reprs.fused.is_finite() && out.reprs.z_img.is_finite() && out.reprs.z_tab.is_finite())
        || out.reprs.alpha.iter().any(|v| !v.is_finite())
    {
        Some("L_proto")
    } else {
        None
    }
}

/// Shuffled mini-batches; a trailing batch of one joins the previous batch
/// so batch statistics are always defined.
fn batches(n: usize, size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn batch_count(n: usize, size: usize) -> usize {
    let full = n.div_ceil(size);
    if full > 1 && n % size == 1 {
        full - 1
    } else {
        full
    }
}

/// Trains a model on `split` and returns the checkpoint of the best epoch.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    // the checkpoint stores f32, so train against exactly what a load returns
    let mut standardizer = split.standardizer.clone();
    standardizer.round_to_f32();
    let train_set = Prepared::new(&split.train, &standardizer)?;
    let val_set = Prepared::new(&split.val, &standardizer)?;
    if train_set.len() < 2 {
        return Err(PmxError::Validation("training needs at least two cases".into()));
    }
    let dims = EncoderDims {
        embedding: standardizer.embedding_dim(),
        ..cfg.encoder_dims()
    };
    let mut init_rng = substream(cfg.seed, purpose::INIT);
    let mut shuffle_rng = substream(cfg.seed, purpose::SHUFFLE);
    let mut dropout_rng = substream(cfg.seed, purpose::DROPOUT);
    let mut model = Model::new(dims, cfg.prototypes_per_class, cfg.ablation, &mut init_rng);
    let use_prototypes = !cfg.ablation.no_prototypes;
    if use_prototypes {
        let reprs = case_reprs(&model, &split.train, &train_set)?;
        model.bank.init_kmeans(
            &reprs,
            cfg.kmeans_max_iter,
            cfg.kmeans_tol,
            &mut substream(cfg.seed, purpose::KMEANS),
        )?;
    }

    let weights = TermWeights::objective(cfg);
    let proto_cfg = cfg.proto_loss();
    let optimizer = cfg.optimizer();
    let per_epoch = batch_count(train_set.len(), cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.max_epochs * per_epoch);
    let mut step = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut mean = LossBreakdown::default();
        for idx in batches(train_set.len(), cfg.batch_size, &mut shuffle_rng) {
            let (emb, clin, labels, t) = train_set.batch(&idx);
            model.zero_grad();
            let (outputs, cache) = model.forward_train(&emb, &clin, &mut dropout_rng)?;
            if let Some(term) = non_finite_output(&outputs) {
                return Err(PmxError::Diverged {
                    epoch,
                    term: term.to_string(),
                });
            }
            let (loss, grads) = objective(&outputs, &labels, &t, &model.bank, &proto_cfg, &weights)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(PmxError::Diverged {
                    epoch,
                    term: term.to_string(),
                });
            }
            model.backward(&cache, &grads.logits, &grads.t_pred, grads.proto.as_ref())?;
            let mut groups = model.param_groups(cfg.lr_image, cfg.lr_tabular, cfg.lr_prototypes);
            optimizer.step(&mut groups, step, &schedule);
            step += 1;
            if use_prototypes {
                model.bank.renormalize()?;
            }
            mean.add_scaled(&loss, idx.len() as f64 / train_set.len() as f64);
        }
        let projected = use_prototypes && epoch % cfg.projection_interval == 0;
        if projected {
            let reprs = case_reprs(&model, &split.train, &train_set)?;
            model.bank.project(&reprs)?;
        }
        let val_accuracy = if use_prototypes && !projected {
            // score the model as it would be deployed: with projected prototypes
            let learned = model.bank.clone();
            let reprs = case_reprs(&model, &split.train, &train_set)?;
            model.bank.project(&reprs)?;
            let acc = accuracy(&model, &val_set, cfg);
            model.bank = learned;
            acc?
        } else {
            accuracy(&model, &val_set, cfg)?
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, reg {:.4}, proto {:.4}) val acc {:.4}",
            mean.total,
            mean.cls,
            mean.reg,
            mean.proto.total,
            val_accuracy
        );
        epochs.push(EpochRecord {
            epoch,
            loss: mean,
            val_accuracy,
            projected,
        });
        match &best {
            Some((_, acc, _)) if val_accuracy <= *acc => {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((epoch, val_accuracy, model.clone()));
                since_best = 0;
            }
        }
    }

    let (best_epoch, best_val_accuracy, mut model) = best.expect("at least one epoch ran");
    model.zero_grad();
    model.reset_moments();
    model.round_to_f32();
    let pre_projection_bank = model.bank.clone();
    if use_prototypes {
        let reprs = case_reprs(&model, &split.train, &train_set)?;
        model.bank.project(&reprs)?;
        model.round_to_f32();
    }
    let final_val_accuracy = accuracy(&model, &val_set, cfg)?;

    let history = TrainHistory {
        epochs,
        best_epoch,
        best_val_accuracy,
        stopped_early,
        inference_path: InferencePath::for_model(&model),
        final_val_accuracy,
    };
    let mut norms = class_norms(&split.train)?;
    norms.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            model,
            standardizer,
            class_norms: norms,
            history,
            split_seed: split.seed,
            rng_state: checkpoint::RngState::capture(cfg.seed, &shuffle_rng, &dropout_rng),
        },
        pre_projection_bank,
    })
}
