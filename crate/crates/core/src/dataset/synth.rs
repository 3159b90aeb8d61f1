//! Synthetic cohort generator.
//!
//! Each case picks a class from `class_fractions`, draws a T-score inside
//! that class's WHO interval, and derives both modalities from the T-score:
//! the embedding is a class-and-severity dependent mean plus isotropic
//! Gaussian noise; binary risk factors switch on more often for lower
//! T-scores, with `tabular_signal` scaling that dependence. With
//! `embedding_separation = 0` and `tabular_signal = 0` neither modality
//! carries any information about the label.
//!
//! `image_corruption_fraction` marks a share of cases as failed scans: their
//! embedding loses all class information and instead carries a fixed
//! artifact direction, so only the clinical record is informative for them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClinicalFeatures, PatientCase, EMBEDDING_DIM, NUM_CLASSES};
use crate::error::{PmxError, Result};
use crate::rng::{purpose, substream, StdStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub class_fractions: [f64; NUM_CLASSES],
    /// Distance between class-conditional embedding means, in noise units.
    pub embedding_separation: f64,
    /// Strength in `[0, 1]` of the T-score dependence of clinical features.
    pub tabular_signal: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub embedding_dim: usize,
    pub image_corruption_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 1000,
            class_fractions: [0.45, 0.38, 0.17],
            embedding_separation: 4.0,
            tabular_signal: 0.5,
            noise_sigma: 1.0,
            seed: 7,
            embedding_dim: EMBEDDING_DIM,
            image_corruption_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PmxError::Config(m));
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if self.class_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad(format!("class fractions must lie in [0, 1]: {:?}", self.class_fractions));
        }
        let sum: f64 = self.class_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class fractions sum to {sum}, expected 1"));
        }
        if !(self.embedding_separation >= 0.0 && self.embedding_separation.is_finite()) {
            return bad("embedding_separation must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.tabular_signal) {
            return bad("tabular_signal must lie in [0, 1]".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be > 0".into());
        }
        if self.embedding_dim < NUM_CLASSES + 2 {
            return bad(format!("embedding_dim must be at least {}", NUM_CLASSES + 2));
        }
        if !(0.0..=1.0).contains(&self.image_corruption_fraction) {
            return bad("image_corruption_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Baseline prevalence of the seven binary risk factors.
const RISK_BASE_RATES: [f64; 7] = [0.10, 0.08, 0.15, 0.05, 0.04, 0.05, 0.08];

/// Orthonormal directions: one per class, one for severity, one artifact.
fn basis(dim: usize, rng: &mut StdStream) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < NUM_CLASSES + 2 {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

fn sample_class(fractions: &[f64; NUM_CLASSES], rng: &mut StdStream) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, f) in fractions.iter().enumerate() {
        acc += f;
        if u < acc {
            return c;
        }
    }
    fractions.iter().rposition(|&f| f > 0.0).unwrap_or(0)
}

/// T-score inside the WHO interval of `class`.
fn sample_t_score(class: usize, rng: &mut StdStream) -> f64 {
    let open: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    match class {
        0 => -1.0 + 3.5 * open,
        1 => -2.5 + 1.5 * rng.random::<f64>(),
        _ => -2.5 - 2.0 * open,
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<PatientCase>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, purpose::SYNTH);
    let dirs = basis(cfg.embedding_dim, &mut rng);
    let (class_dirs, severity_dir, artifact_dir) = (&dirs[..NUM_CLASSES], &dirs[NUM_CLASSES], &dirs[NUM_CLASSES + 1]);
    let sep = cfg.embedding_separation;
    let ts = cfg.tabular_signal;
    let width = (cfg.n_cases.max(1) as f64).log10().floor() as usize + 1;

    let mut cases = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let class = sample_class(&cfg.class_fractions, &mut rng);
        let t = sample_t_score(class, &mut rng);
        // 0 for healthy bone, 1 for the most severe T-scores.
        let severity = ((0.5 - t) / 4.5).clamp(0.0, 1.0);
        let corrupted = rng.random::<f64>() < cfg.image_corruption_fraction;

        let mut embedding = Vec::with_capacity(cfg.embedding_dim);
        for j in 0..cfg.embedding_dim {
            let mean = if corrupted {
                sep * artifact_dir[j]
            } else {
                sep * (class_dirs[class][j] / std::f64::consts::SQRT_2 + 0.25 * t * severity_dir[j])
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            embedding.push((mean + cfg.noise_sigma * noise) as f32 as f64);
        }

        let u_age: f64 = rng.random();
        let u_weight: f64 = rng.random();
        let u_height: f64 = rng.random();
        let age = 20.0 + 80.0 * ((1.0 - ts) * u_age + ts * (0.6 * severity + 0.4 * u_age));
        let weight = 40.0 + 80.0 * ((1.0 - ts) * u_weight + ts * (0.6 * (1.0 - severity) + 0.4 * u_weight));
        let height = 145.0 + 50.0 * u_height;
        let p_female = 0.5 + 0.3 * ts * (2.0 * severity - 1.0);
        let sex = f64::from(u8::from(rng.random::<f64>() < p_female));
        let mut risks = [0.0; 7];
        for (r, base) in risks.iter_mut().zip(RISK_BASE_RATES) {
            let p = base + ts * severity * (0.85 - base);
            *r = f64::from(u8::from(rng.random::<f64>() < p));
        }
        let clinical = ClinicalFeatures {
            age: age.round().max(1.0),
            sex,
            weight: round_to(weight, 1),
            height: round_to(height, 1),
            previous_fracture: risks[0],
            parent_fractured_hip: risks[1],
            current_smoker: risks[2],
            glucocorticoids: risks[3],
            rheumatoid_arthritis: risks[4],
            secondary_osteoporosis: risks[5],
            alcohol_3plus_units: risks[6],
        };
        cases.push(PatientCase::new(format!("SYN{:0width$}", i + 1), embedding, clinical, t)?);
    }
    Ok(cases)
}
