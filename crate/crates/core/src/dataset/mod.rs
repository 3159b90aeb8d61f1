//! Patient records, WHO labelling, file ingestion, splitting and
//! standardisation.

mod io;
mod split;
mod synth;

pub use io::{
    load_dataset, load_dataset_with, read_embeddings, write_clinical_csv, write_embeddings_binary,
    write_embeddings_csv, EmbeddingFormat, LoadOptions, CLINICAL_HEADER, EMBEDDING_MAGIC,
    EMBEDDING_VERSION,
};
pub use split::{split_dataset, DatasetSplit, Standardizer};
pub use synth::{generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{PmxError, Result};

/// Width of the backbone embedding vector.
pub const EMBEDDING_DIM: usize = 1151;
/// Number of clinical features.
pub const CLINICAL_DIM: usize = 11;
pub const NUM_CLASSES: usize = 3;

pub const CLINICAL_FEATURES: [&str; CLINICAL_DIM] = [
    "age",
    "sex",
    "weight",
    "height",
    "previous_fracture",
    "parent_fractured_hip",
    "current_smoker",
    "glucocorticoids",
    "rheumatoid_arthritis",
    "secondary_osteoporosis",
    "alcohol_3plus_units",
];

/// Indices of the continuous clinical features (age, weight, height).
pub const CONTINUOUS_FEATURES: [usize; 3] = [0, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal = 0,
    Osteopenia = 1,
    Osteoporosis = 2,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Normal, Label::Osteopenia, Label::Osteoporosis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Osteopenia => "osteopenia",
            Label::Osteoporosis => "osteoporosis",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != Label::Normal
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Label {
    type Err = PmxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "osteopenia" | "1" => Ok(Label::Osteopenia),
            "osteoporosis" | "2" => Ok(Label::Osteoporosis),
            other => Err(PmxError::Validation(format!("unknown class label '{other}'"))),
        }
    }
}

/// WHO diagnostic class for a T-score. Both thresholds belong to
/// Osteopenia: `t > -1` is Normal, `t < -2.5` is Osteoporosis.
pub fn who_label(t_score: f64) -> Result<Label> {
    if !t_score.is_finite() {
        return Err(PmxError::Validation(format!("non-finite T-score {t_score}")));
    }
    Ok(if t_score > -1.0 {
        Label::Normal
    } else if t_score < -2.5 {
        Label::Osteoporosis
    } else {
        Label::Osteopenia
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFeatures {
    pub age: f64,
    pub sex: f64,
    pub weight: f64,
    pub height: f64,
    pub previous_fracture: f64,
    pub parent_fractured_hip: f64,
    pub current_smoker: f64,
    pub glucocorticoids: f64,
    pub rheumatoid_arthritis: f64,
    pub secondary_osteoporosis: f64,
    pub alcohol_3plus_units: f64,
}

impl ClinicalFeatures {
    pub fn to_array(&self) -> [f64; CLINICAL_DIM] {
        [
            self.age,
            self.sex,
            self.weight,
            self.height,
            self.previous_fracture,
            self.parent_fractured_hip,
            self.current_smoker,
            self.glucocorticoids,
            self.rheumatoid_arthritis,
            self.secondary_osteoporosis,
            self.alcohol_3plus_units,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != CLINICAL_DIM {
            return Err(PmxError::Validation(format!(
                "clinical vector has {} values, expected {CLINICAL_DIM}",
                v.len()
            )));
        }
        let f = Self {
            age: v[0],
            sex: v[1],
            weight: v[2],
            height: v[3],
            previous_fracture: v[4],
            parent_fractured_hip: v[5],
            current_smoker: v[6],
            glucocorticoids: v[7],
            rheumatoid_arthritis: v[8],
            secondary_osteoporosis: v[9],
            alcohol_3plus_units: v[10],
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_array();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(PmxError::Validation(format!(
                "clinical feature {} is not finite",
                CLINICAL_FEATURES[i]
            )));
        }
        for (i, name) in [(0, "age"), (2, "weight"), (3, "height")] {
            if v[i] <= 0.0 {
                return Err(PmxError::Validation(format!("{name} must be positive, got {}", v[i])));
            }
        }
        for (i, x) in v.iter().enumerate() {
            if !CONTINUOUS_FEATURES.contains(&i) && *x != 0.0 && *x != 1.0 {
                return Err(PmxError::Validation(format!(
                    "binary feature {} must be 0 or 1, got {x}",
                    CLINICAL_FEATURES[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub patient_id: String,
    pub embedding: Vec<f64>,
    pub clinical: ClinicalFeatures,
    pub t_score: f64,
    pub label: Label,
}

impl PatientCase {
    /// Builds a case, deriving the label from the T-score.
    pub fn new(
        patient_id: impl Into<String>,
        embedding: Vec<f64>,
        clinical: ClinicalFeatures,
        t_score: f64,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        let label = who_label(t_score)
            .map_err(|e| PmxError::Validation(format!("patient {patient_id}: {e}")))?;
        clinical
            .validate()
            .map_err(|e| PmxError::Validation(format!("patient {patient_id}: {e}")))?;
        if let Some(i) = embedding.iter().position(|x| !x.is_finite()) {
            return Err(PmxError::Validation(format!(
                "patient {patient_id}: embedding value {i} is not finite"
            )));
        }
        Ok(Self {
            patient_id,
            embedding,
            clinical,
            t_score,
            label,
        })
    }
}

/// Per-class counts in [`Label`] order.
pub fn class_counts(cases: &[PatientCase]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for c in cases {
        counts[c.label.index()] += 1;
    }
    counts
}
