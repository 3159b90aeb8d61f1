use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{class_counts, PatientCase, CLINICAL_DIM, CONTINUOUS_FEATURES, NUM_CLASSES};
use crate::error::{PmxError, Result};
use crate::rng::{purpose, substream};

pub const TEST_FRACTION: f64 = 0.2;
/// Validation share of the non-test remainder (72/8/20 overall).
pub const VAL_FRACTION: f64 = 0.1;

/// Z-scoring fitted on the training partition. Binary clinical features pass
/// through unchanged; dimensions with zero spread map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub embedding_mean: Vec<f64>,
    pub embedding_std: Vec<f64>,
    /// Indexed like the full clinical vector; binary slots hold (0, 1).
    pub clinical_mean: Vec<f64>,
    pub clinical_std: Vec<f64>,
}

fn mean_std(columns: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = columns.clone().sum::<f64>() / n as f64;
    let var = columns.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 0.0 })
}

impl Standardizer {
    pub fn fit(cases: &[PatientCase]) -> Result<Self> {
        let n = cases.len();
        if n == 0 {
            return Err(PmxError::Validation("cannot fit a standardizer on zero cases".into()));
        }
        let dim = cases[0].embedding.len();
        if let Some(c) = cases.iter().find(|c| c.embedding.len() != dim) {
            return Err(PmxError::shape(format!("embedding of {}", c.patient_id), dim, c.embedding.len()));
        }
        let mut embedding_mean = Vec::with_capacity(dim);
        let mut embedding_std = Vec::with_capacity(dim);
        for j in 0..dim {
            let (m, s) = mean_std(cases.iter().map(|c| c.embedding[j]), n);
            embedding_mean.push(m);
            embedding_std.push(s);
        }
        let mut clinical_mean = vec![0.0; CLINICAL_DIM];
        let mut clinical_std = vec![1.0; CLINICAL_DIM];
        let arrays: Vec<[f64; CLINICAL_DIM]> = cases.iter().map(|c| c.clinical.to_array()).collect();
        for &j in &CONTINUOUS_FEATURES {
            let (m, s) = mean_std(arrays.iter().map(|a| a[j]), n);
            clinical_mean[j] = m;
            clinical_std[j] = s;
        }
        Ok(Self {
            embedding_mean,
            embedding_std,
            clinical_mean,
            clinical_std,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_mean.len()
    }

    pub fn embedding(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.embedding_dim() {
            return Err(PmxError::shape("embedding", self.embedding_dim(), raw.len()));
        }
        Ok(raw
            .iter()
            .zip(self.embedding_mean.iter().zip(&self.embedding_std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect())
    }

    pub fn clinical(&self, raw: &[f64; CLINICAL_DIM]) -> [f64; CLINICAL_DIM] {
        let mut out = *raw;
        for (j, o) in out.iter_mut().enumerate() {
            let s = self.clinical_std[j];
            *o = if s > 0.0 { (raw[j] - self.clinical_mean[j]) / s } else { 0.0 };
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for v in [
            &mut self.embedding_mean,
            &mut self.embedding_std,
            &mut self.clinical_mean,
            &mut self.clinical_std,
        ] {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PatientCase>,
    pub val: Vec<PatientCase>,
    pub test: Vec<PatientCase>,
    pub standardizer: Standardizer,
    pub seed: u64,
}

/// Largest-remainder apportionment of `total` across `counts`; ties go to
/// the lower class index.
fn apportion(counts: &[usize; NUM_CLASSES], total: usize) -> [usize; NUM_CLASSES] {
    let n: usize = counts.iter().sum();
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * total as f64 / n as f64).collect();
    let mut out = [0usize; NUM_CLASSES];
    for (o, q) in out.iter_mut().zip(&quotas) {
        *o = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[c] < counts[c] {
            out[c] += 1;
            left -= 1;
        }
    }
    out
}

/// Stratified 72/8/20 train/val/test partition, deterministic under `seed`.
pub fn split_dataset(cases: &[PatientCase], seed: u64) -> Result<DatasetSplit> {
    if cases.len() < 10 {
        return Err(PmxError::Validation(format!(
            "need at least 10 cases to split, got {}",
            cases.len()
        )));
    }
    let counts = class_counts(cases);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(PmxError::Validation(format!(
            "class {} is absent from the input",
            super::Label::ALL[c]
        )));
    }
    let mut ids = HashSet::with_capacity(cases.len());
    if let Some(dup) = cases.iter().find(|c| !ids.insert(c.patient_id.as_str())) {
        return Err(PmxError::Validation(format!("duplicate patient_id {}", dup.patient_id)));
    }

    let n = cases.len();
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let test_per_class = apportion(&counts, n_test);
    let remaining: [usize; NUM_CLASSES] = std::array::from_fn(|c| counts[c] - test_per_class[c]);
    let n_val = ((n - n_test) as f64 * VAL_FRACTION).round() as usize;
    let val_per_class = apportion(&remaining, n_val);

    let mut rng = substream(seed, purpose::SPLIT);
    let mut part = vec![0u8; n]; // 0 train, 1 val, 2 test
    for class in super::Label::ALL {
        let mut members: Vec<usize> = (0..n).filter(|&i| cases[i].label == class).collect();
        members.shuffle(&mut rng);
        let c = class.index();
        for (rank, &i) in members.iter().enumerate() {
            part[i] = if rank < test_per_class[c] {
                2
            } else if rank < test_per_class[c] + val_per_class[c] {
                1
            } else {
                0
            };
        }
    }
    let pick = |which: u8| -> Vec<PatientCase> {
        (0..n).filter(|&i| part[i] == which).map(|i| cases[i].clone()).collect()
    };
    let train = pick(0);
    let standardizer = Standardizer::fit(&train)?;
    Ok(DatasetSplit {
        val: pick(1),
        test: pick(2),
        train,
        standardizer,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClinicalFeatures;
    use proptest::prelude::*;

    fn synthetic_cases(per_class: [usize; 3]) -> Vec<PatientCase> {
        let t_for = [0.5, -1.8, -3.2];
        let mut out = Vec::new();
        for (c, &k) in per_class.iter().enumerate() {
            for i in 0..k {
                let id = format!("c{c}-{i:03}");
                let x = (out.len() as f64).sin();
                let clinical = ClinicalFeatures::from_slice(&[
                    50.0 + 30.0 * x.abs(),
                    (i % 2) as f64,
                    60.0 + 5.0 * x,
                    165.0 + 3.0 * x,
                    0.0,
                    0.0,
                    1.0,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                ])
                .unwrap();
                let emb = vec![x, 2.0 * x + 1.0, 3.0, (i as f64).cos()];
                out.push(PatientCase::new(id, emb, clinical, t_for[c]).unwrap());
            }
        }
        out
    }

    #[test]
    fn hundred_balanced_cases_split_72_8_20() {
        let cases = synthetic_cases([34, 33, 33]);
        let s = split_dataset(&cases, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (72, 8, 20));
        // Hand apportionment: test quotas 6.8/6.6/6.6 -> 7/7/6, val quotas
        // over 27/26/27 -> 2.7/2.6/2.7 -> 3/2/3.
        assert_eq!(class_counts(&s.test), [7, 7, 6]);
        assert_eq!(class_counts(&s.val), [3, 2, 3]);
        assert_eq!(class_counts(&s.train), [24, 24, 24]);
    }

    #[test]
    fn split_is_deterministic() {
        let cases = synthetic_cases([20, 15, 12]);
        let a = split_dataset(&cases, 7).unwrap();
        let b = split_dataset(&cases, 7).unwrap();
        let ids = |v: &[PatientCase]| v.iter().map(|c| c.patient_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.val), ids(&b.val));
        assert_eq!(ids(&a.test), ids(&b.test));
        let c = split_dataset(&cases, 8).unwrap();
        assert_ne!(ids(&a.test), ids(&c.test));
    }

    #[test]
    fn missing_class_is_rejected() {
        let cases = synthetic_cases([20, 15, 0]);
        let err = split_dataset(&cases, 1).unwrap_err();
        assert!(err.to_string().contains("osteoporosis"), "{err}");
        assert!(split_dataset(&synthetic_cases([3, 3, 3]), 1).is_err());
    }

    #[test]
    fn standardized_train_is_zero_mean_unit_std() {
        let cases = synthetic_cases([30, 25, 20]);
        let s = split_dataset(&cases, 3).unwrap();
        let st = &s.standardizer;
        let rows: Vec<Vec<f64>> = s.train.iter().map(|c| st.embedding(&c.embedding).unwrap()).collect();
        let n = rows.len() as f64;
        for j in 0..4 {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6);
            if j == 2 {
                // constant column
                assert!(rows.iter().all(|r| r[j] == 0.0));
            } else {
                assert!((sd - 1.0).abs() < 1e-6, "dim {j} sd {sd}");
            }
        }
        let clin: Vec<[f64; 11]> = s.train.iter().map(|c| st.clinical(&c.clinical.to_array())).collect();
        for &j in &CONTINUOUS_FEATURES {
            let m = clin.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (clin.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
        // binary features untouched
        assert!(clin.iter().all(|r| r[6] == 1.0 && r[4] == 0.0));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(a in 1usize..40, b in 1usize..40, c in 1usize..40, seed in 0u64..1000) {
            prop_assume!(a + b + c >= 10);
            let cases = synthetic_cases([a, b, c]);
            let s = split_dataset(&cases, seed).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).map(|c| c.patient_id.clone()).collect();
            prop_assert_eq!(all.len(), cases.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), cases.len());
            prop_assert_eq!(s.test.len(), (cases.len() as f64 * 0.2).round() as usize);
        }
    }
}
