//! Finite-difference check of the full model's analytic gradients, term by
//! term and for the complete objective, on small randomly drawn networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{objective, TermWeights, TrainConfig};
use crate::dataset::{Label, NUM_CLASSES};
use crate::encoders::EncoderDims;
use crate::error::{PmxError, Result};
use crate::model::{Ablation, Model};
use crate::nn::gradcheck::{relative_error, GRADCHECK_STEP, GRADCHECK_TOL, KINK_MARGIN};
use crate::nn::Tensor2D;
use crate::prototypes::{switching_margin, ProtoLossConfig};
use crate::rng::{stream, StdStream};

pub const OBJECTIVES: [&str; 6] = ["cls", "reg", "proto_class", "proto_sep", "proto_center", "total"];

/// Coordinates sampled per parameter tensor.
const COORDS_PER_TENSOR: usize = 12;
const MAX_REDRAWS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub objective: String,
    pub batch: usize,
    pub per_class: usize,
    pub ablation: Ablation,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter tensor index and coordinate of the worst error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuite {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<GradcheckResult>,
}

impl GradcheckSuite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(GradcheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn weights_for(name: &str, cfg: &TrainConfig) -> TermWeights {
    let zero = TermWeights {
        cls: 0.0,
        reg: 0.0,
        proto_class: 0.0,
        proto_sep: 0.0,
        proto_center: 0.0,
    };
    match name {
        "cls" => TermWeights { cls: 1.0, ..zero },
        "reg" => TermWeights { reg: 1.0, ..zero },
        "proto_class" => TermWeights { proto_class: 1.0, ..zero },
        "proto_sep" => TermWeights { proto_sep: 1.0, ..zero },
        "proto_center" => TermWeights { proto_center: 1.0, ..zero },
        _ => TermWeights::objective(cfg),
    }
}

struct Problem {
    model: Model,
    emb: Tensor2D,
    clin: Tensor2D,
    labels: Vec<Label>,
    t_scores: Vec<f64>,
    mask_seed: u64,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized buffer")
}

/// Draws a small model and batch whose ReLU inputs and prototype-loss
/// switching points all stay at least [`KINK_MARGIN`] away.
/// Smallest representation norm accepted in a drawn batch. Cosine
/// similarity is singular at the origin and the stencil's truncation error
/// grows like `(h / |x|)^2`, so shorter rows are redrawn like kinks.
const NORM_MARGIN: f64 = 0.05;
const BATCHES_PER_MODEL: usize = 50;

fn draw_problem(seed: u64, proto_cfg: &ProtoLossConfig) -> Result<Problem> {
    let mut rng = stream(seed);
    let dims = EncoderDims {
        embedding: rng.random_range(6..12),
        image_hidden: rng.random_range(5..9),
        image_out: rng.random_range(4..8),
        clinical: crate::dataset::CLINICAL_DIM,
        tabular_out: rng.random_range(3..6),
        ..EncoderDims::default()
    };
    let per_class = rng.random_range(2..4);
    let batch = rng.random_range(5..9);
    let ablation = Ablation {
        no_gate: seed % 5 == 3,
        no_cross_attention: seed % 4 == 2,
        ..Ablation::default()
    };
    let fresh = |rng: &mut StdStream| {
        let mut model = Model::new(dims, per_class, ablation, rng);
        // move the gate off its zero initialisation
        for v in model.gate.dense.weight.value.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = 0.3 * z;
        }
        let mask_seed: u64 = rng.random();
        (model, mask_seed)
    };
    let (mut model, mut mask_seed) = fresh(&mut rng);
    for attempt in 0..MAX_REDRAWS {
        // a network whose rows sit near a singular point for every batch is
        // replaced after a few batch draws
        if attempt > 0 && attempt % BATCHES_PER_MODEL == 0 {
            (model, mask_seed) = fresh(&mut rng);
        }
        let emb = gaussian(batch, dims.embedding, &mut rng);
        let clin = gaussian(batch, dims.clinical, &mut rng);
        let labels: Vec<Label> = (0..batch)
            .map(|i| Label::from_index(if i < NUM_CLASSES { i } else { rng.random_range(0..NUM_CLASSES) }).expect("class"))
            .collect();
        let t_scores: Vec<f64> = (0..batch).map(|_| rng.random_range(-4.0..1.5)).collect();
        let (out, cache) = model.clone().forward_train(&emb, &clin, &mut stream(mask_seed))?;
        if cache.relu_margin() < KINK_MARGIN {
            continue;
        }
        if [&out.reprs.z_img, &out.reprs.z_tab, &out.reprs.fused]
            .iter()
            .any(|t| (0..t.rows()).any(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_MARGIN))
        {
            continue;
        }
        if switching_margin(&out.reprs, &labels, &model.bank, proto_cfg)? < KINK_MARGIN {
            continue;
        }
        return Ok(Problem {
            model,
            emb,
            clin,
            labels,
            t_scores,
            mask_seed,
        });
    }
    Err(PmxError::Validation(format!(
        "gradient check seed {seed}: no kink-free batch after {MAX_REDRAWS} draws"
    )))
}

fn flat_params(model: &mut Model) -> Vec<Vec<f64>> {
    model.all_params_mut().into_iter().map(|p| p.value.data().to_vec()).collect()
}

fn loss_at(p: &Problem, params: &[Vec<f64>], weights: &TermWeights, cfg: &ProtoLossConfig) -> Result<f64> {
    let mut model = p.model.clone();
    for (dst, src) in model.all_params_mut().into_iter().zip(params) {
        dst.value.data_mut().copy_from_slice(src);
    }
    let (out, _) = model.forward_train(&p.emb, &p.clin, &mut stream(p.mask_seed))?;
    Ok(objective(&out, &p.labels, &p.t_scores, &model.bank, cfg, weights)?.0.total)
}

/// Checks one objective on one drawn problem.
fn check_one(seed: u64, name: &str, p: &Problem, cfg: &TrainConfig) -> Result<GradcheckResult> {
    let weights = weights_for(name, cfg);
    let proto_cfg = cfg.proto_loss();
    let mut model = p.model.clone();
    model.zero_grad();
    let (out, cache) = model.forward_train(&p.emb, &p.clin, &mut stream(p.mask_seed))?;
    let (_, grads) = objective(&out, &p.labels, &p.t_scores, &model.bank, &proto_cfg, &weights)?;
    model.backward(&cache, &grads.logits, &grads.t_pred, grads.proto.as_ref())?;
    let analytic: Vec<Vec<f64>> = model.all_params_mut().into_iter().map(|p| p.grad.data().to_vec()).collect();

    let mut base = p.model.clone();
    let mut params = flat_params(&mut base);
    let mut rng = stream(seed ^ 0x9e37_79b9);
    let mut result = GradcheckResult {
        seed,
        objective: name.to_string(),
        batch: p.labels.len(),
        per_class: p.model.bank.per_class,
        ablation: p.model.ablation,
        checked: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for t in 0..params.len() {
        let len = params[t].len();
        let coords: Vec<usize> = if len <= COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, COORDS_PER_TENSOR).into_vec()
        };
        for i in coords {
            let orig = params[t][i];
            params[t][i] = orig + GRADCHECK_STEP;
            let plus = loss_at(p, &params, &weights, &proto_cfg)?;
            params[t][i] = orig - GRADCHECK_STEP;
            let minus = loss_at(p, &params, &weights, &proto_cfg)?;
            params[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let err = relative_error(analytic[t][i], numeric);
            let err = if err.is_finite() { err } else { f64::INFINITY };
            result.checked += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (t, i);
                result.analytic = analytic[t][i];
                result.numeric = numeric;
            }
        }
    }
    Ok(result)
}

/// Runs every objective in [`OBJECTIVES`] on `seeds` independently drawn
/// networks and batches.
pub fn run_gradcheck(seeds: u64, base_seed: u64) -> Result<GradcheckSuite> {
    let cfg = TrainConfig::default();
    let proto_cfg = cfg.proto_loss();
    let mut results = Vec::new();
    for s in 0..seeds {
        let seed = base_seed.wrapping_add(s);
        let problem = draw_problem(seed, &proto_cfg)?;
        for name in OBJECTIVES {
            results.push(check_one(seed, name, &problem, &cfg)?);
        }
    }
    Ok(GradcheckSuite {
        step: GRADCHECK_STEP,
        tolerance: GRADCHECK_TOL,
        results,
    })
}
