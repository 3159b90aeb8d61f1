//! Clinical CSV and embedding file formats.
//!
//! Embeddings come either as CSV (`patient_id,e0,...,e{d-1}`) or as a
//! binary container:
//!
//! ```text
//! "PMXE" | version u32 | count u32 | dim u32 |
//!   count x ( id_len u32 | id utf-8 bytes | dim x f32 )
//! ```
//!
//! All integers and floats are little-endian. Embedding values are 32-bit
//! quantities in both encodings.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClinicalFeatures, PatientCase, CLINICAL_FEATURES, EMBEDDING_DIM};
use crate::error::{PmxError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PMXE";
pub const EMBEDDING_VERSION: u32 = 1;

pub const CLINICAL_HEADER: &str = "patient_id,age,sex,weight,height,previous_fracture,parent_fractured_hip,current_smoker,glucocorticoids,rheumatoid_arthritis,secondary_osteoporosis,alcohol_3plus_units,t_score";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    #[default]
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Required embedding width; `None` accepts any consistent width.
    pub expected_dim: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            expected_dim: Some(EMBEDDING_DIM),
        }
    }
}

struct ClinicalRow {
    patient_id: String,
    clinical: ClinicalFeatures,
    t_score: f64,
    row: usize,
}

/// Loads and joins a clinical CSV with an embedding file, expecting
/// 1151-wide embeddings. Labels are always recomputed from the T-score.
pub fn load_dataset(clinical_path: &Path, embeddings_path: &Path) -> Result<Vec<PatientCase>> {
    load_dataset_with(clinical_path, embeddings_path, LoadOptions::default())
}

pub fn load_dataset_with(
    clinical_path: &Path,
    embeddings_path: &Path,
    opts: LoadOptions,
) -> Result<Vec<PatientCase>> {
    let clinical = read_clinical(clinical_path)?;
    let embeddings = read_embeddings(embeddings_path, opts.expected_dim)?;

    let mut by_id: HashMap<&str, &Vec<f64>> = HashMap::with_capacity(embeddings.len());
    for (id, e) in &embeddings {
        if by_id.insert(id.as_str(), e).is_some() {
            return Err(PmxError::Validation(format!(
                "patient {id} has more than one embedding row in {}",
                embeddings_path.display()
            )));
        }
    }
    let missing: Vec<&str> = clinical
        .iter()
        .filter(|r| !by_id.contains_key(r.patient_id.as_str()))
        .map(|r| r.patient_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(PmxError::Validation(format!(
            "clinical ids without an embedding row: {}",
            missing.join(", ")
        )));
    }

    clinical
        .into_iter()
        .map(|r| {
            let e = by_id[r.patient_id.as_str()].clone();
            PatientCase::new(r.patient_id, e, r.clinical, r.t_score).map_err(|err| {
                PmxError::Validation(format!(
                    "{} row {}: {err}",
                    clinical_path.display(),
                    r.row
                ))
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> PmxError {
    PmxError::Csv(format!("{}: {e}", path.display()))
}

fn parse_number(path: &Path, row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| {
        PmxError::Validation(format!(
            "{} row {row}: column {column} is not a number: '{raw}'",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(PmxError::Validation(format!(
            "{} row {row}: column {column} is not finite ({raw})",
            path.display()
        )));
    }
    Ok(v)
}

fn read_clinical(path: &Path) -> Result<Vec<ClinicalRow>> {
    let file = File::open(path).map_err(|e| PmxError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            PmxError::Validation(format!("{}: missing column '{name}'", path.display()))
        })
    };
    let id_col = find("patient_id")?;
    let t_col = find("t_score")?;
    let feature_cols: Vec<usize> = CLINICAL_FEATURES.iter().map(|f| find(f)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(PmxError::Validation(format!("{} row {row}: empty patient_id", path.display())));
        }
        if !seen.insert(id.clone()) {
            return Err(PmxError::Validation(format!(
                "{} row {row}: duplicate patient_id {id}",
                path.display()
            )));
        }
        let mut values = [0.0; 11];
        for (slot, (&col, name)) in values.iter_mut().zip(feature_cols.iter().zip(CLINICAL_FEATURES)) {
            *slot = parse_number(path, row, name, rec.get(col).unwrap_or(""))?;
        }
        let clinical = ClinicalFeatures::from_slice(&values).map_err(|e| {
            PmxError::Validation(format!("{} row {row}: {e}", path.display()))
        })?;
        let t_score = parse_number(path, row, "t_score", rec.get(t_col).unwrap_or(""))?;
        rows.push(ClinicalRow {
            patient_id: id,
            clinical,
            t_score,
            row,
        });
    }
    Ok(rows)
}

/// Reads an embedding file in either encoding (detected by magic bytes).
pub fn read_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<Vec<(String, Vec<f64>)>> {
    let mut file = File::open(path).map_err(|e| PmxError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| PmxError::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        read_embeddings_binary(path, &bytes, expected_dim)
    } else {
        read_embeddings_csv(path, &bytes, expected_dim)
    }
}

fn width_error(path: &Path, observed: usize, expected: usize) -> PmxError {
    PmxError::Validation(format!(
        "{}: embedding width {observed} does not match expected {expected}",
        path.display()
    ))
}

fn read_embeddings_csv(path: &Path, bytes: &[u8], expected_dim: Option<usize>) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("patient_id") {
        return Err(PmxError::Validation(format!(
            "{}: first embedding column must be patient_id",
            path.display()
        )));
    }
    let dim = headers.len() - 1;
    if let Some(exp) = expected_dim {
        if dim != exp {
            return Err(width_error(path, dim, exp));
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() - 1 != dim {
            return Err(PmxError::Validation(format!(
                "{} row {row}: embedding width {} does not match expected {dim}",
                path.display(),
                rec.len() - 1
            )));
        }
        let id = rec[0].to_string();
        let mut v = Vec::with_capacity(dim);
        for (j, raw) in rec.iter().skip(1).enumerate() {
            let x: f32 = raw.trim().parse().map_err(|_| {
                PmxError::Validation(format!("{} row {row}: e{j} is not a number: '{raw}'", path.display()))
            })?;
            if !x.is_finite() {
                return Err(PmxError::Validation(format!(
                    "{} row {row}: e{j} is not finite ({raw})",
                    path.display()
                )));
            }
            v.push(x as f64);
        }
        out.push((id, v));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, path: &Path) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PmxError::Validation(format!(
                "{}: embedding file truncated at byte {}",
                path.display(),
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, path: &Path) -> Result<u32> {
        let b = self.take(4, path)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_embeddings_binary(path: &Path, bytes: &[u8], expected_dim: Option<usize>) -> Result<Vec<(String, Vec<f64>)>> {
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32(path)?;
    if version != EMBEDDING_VERSION {
        return Err(PmxError::Validation(format!(
            "{}: unsupported embedding container version {version} (expected {EMBEDDING_VERSION})",
            path.display()
        )));
    }
    let count = cur.u32(path)? as usize;
    let dim = cur.u32(path)? as usize;
    if let Some(exp) = expected_dim {
        if dim != exp {
            return Err(width_error(path, dim, exp));
        }
    }
    let mut out = Vec::with_capacity(count);
    for row in 1..=count {
        let len = cur.u32(path)? as usize;
        let id = std::str::from_utf8(cur.take(len, path)?)
            .map_err(|_| PmxError::Validation(format!("{} record {row}: id is not UTF-8", path.display())))?
            .to_string();
        let raw = cur.take(dim * 4, path)?;
        let mut v = Vec::with_capacity(dim);
        for (j, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !x.is_finite() {
                return Err(PmxError::Validation(format!(
                    "{} record {row}: e{j} is not finite",
                    path.display()
                )));
            }
            v.push(x as f64);
        }
        out.push((id, v));
    }
    if cur.pos != bytes.len() {
        return Err(PmxError::Validation(format!(
            "{}: {} trailing bytes after {count} records",
            path.display(),
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| PmxError::io(path, e))?))
}

pub fn write_clinical_csv(path: &Path, cases: &[PatientCase]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| PmxError::io(path, e);
    writeln!(w, "{CLINICAL_HEADER}").map_err(io)?;
    for c in cases {
        let mut line = c.patient_id.clone();
        for v in c.clinical.to_array() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push(',');
        line.push_str(&c.t_score.to_string());
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_embeddings_csv(path: &Path, cases: &[PatientCase]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| PmxError::io(path, e);
    let dim = cases.first().map_or(0, |c| c.embedding.len());
    let mut header = String::from("patient_id");
    for j in 0..dim {
        header.push_str(&format!(",e{j}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for c in cases {
        let mut line = c.patient_id.clone();
        for &v in &c.embedding {
            line.push(',');
            line.push_str(&(v as f32).to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_embeddings_binary(path: &Path, cases: &[PatientCase]) -> Result<()> {
    let dim = cases.first().map_or(0, |c| c.embedding.len());
    if let Some(c) = cases.iter().find(|c| c.embedding.len() != dim) {
        return Err(PmxError::shape(format!("embedding of {}", c.patient_id), dim, c.embedding.len()));
    }
    let mut w = create(path)?;
    let io = |e| PmxError::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    for v in [EMBEDDING_VERSION, cases.len() as u32, dim as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for c in cases {
        w.write_all(&(c.patient_id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(c.patient_id.as_bytes()).map_err(io)?;
        for &v in &c.embedding {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn case(id: &str, dim: usize, t: f64) -> PatientCase {
        let clinical = ClinicalFeatures::from_slice(&[63.0, 1.0, 58.5, 161.2, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let emb = (0..dim).map(|j| ((j as f32) * 0.25 - 1.5) as f64).collect();
        PatientCase::new(id, emb, clinical, t).unwrap()
    }

    #[test]
    fn three_row_round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![case("p1", EMBEDDING_DIM, 0.3), case("p2", EMBEDDING_DIM, -1.7), case("p3", EMBEDDING_DIM, -3.1)];
        let clin = dir.path().join("clinical.csv");
        write_clinical_csv(&clin, &cases).unwrap();
        for fmt in [EmbeddingFormat::Binary, EmbeddingFormat::Csv] {
            let emb = dir.path().join("emb");
            match fmt {
                EmbeddingFormat::Binary => write_embeddings_binary(&emb, &cases).unwrap(),
                EmbeddingFormat::Csv => write_embeddings_csv(&emb, &cases).unwrap(),
            }
            let loaded = load_dataset(&clin, &emb).unwrap();
            assert_eq!(loaded, cases);
        }
    }

    #[test]
    fn label_column_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let clin = dir.path().join("c.csv");
        std::fs::write(
            &clin,
            format!("{CLINICAL_HEADER},label\np1,70,1,60,160,0,0,0,0,0,0,0,-3.0,normal\n"),
        )
        .unwrap();
        let emb = dir.path().join("e.bin");
        write_embeddings_binary(&emb, &[case("p1", 4, 0.0)]).unwrap();
        let loaded = load_dataset_with(&clin, &emb, LoadOptions { expected_dim: Some(4) }).unwrap();
        assert_eq!(loaded[0].label, Label::Osteoporosis);
    }

    #[test]
    fn missing_embedding_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let clin = dir.path().join("c.csv");
        write_clinical_csv(&clin, &[case("p1", 4, 0.0), case("p-lost", 4, 0.0)]).unwrap();
        let emb = dir.path().join("e.bin");
        write_embeddings_binary(&emb, &[case("p1", 4, 0.0)]).unwrap();
        let err = load_dataset_with(&clin, &emb, LoadOptions { expected_dim: Some(4) }).unwrap_err();
        assert!(err.to_string().contains("p-lost"), "{err}");
    }

    #[test]
    fn wrong_width_reports_observed_and_expected() {
        let dir = tempfile::tempdir().unwrap();
        let clin = dir.path().join("c.csv");
        write_clinical_csv(&clin, &[case("p1", 1150, 0.0)]).unwrap();
        for (name, csv) in [("e.bin", false), ("e.csv", true)] {
            let emb = dir.path().join(name);
            if csv {
                write_embeddings_csv(&emb, &[case("p1", 1150, 0.0)]).unwrap();
            } else {
                write_embeddings_binary(&emb, &[case("p1", 1150, 0.0)]).unwrap();
            }
            let msg = load_dataset(&clin, &emb).unwrap_err().to_string();
            assert!(msg.contains("1150") && msg.contains("1151"), "{msg}");
        }
    }

    #[test]
    fn nan_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let clin = dir.path().join("c.csv");
        std::fs::write(
            &clin,
            format!("{CLINICAL_HEADER}\np1,70,1,60,160,0,0,0,0,0,0,0,-1.2\np2,71,0,NaN,170,0,0,0,0,0,0,0,-0.2\n"),
        )
        .unwrap();
        let emb = dir.path().join("e.csv");
        std::fs::write(&emb, "patient_id,e0,e1\np1,0.5,1\np2,NaN,2\n").unwrap();
        let msg = load_dataset_with(&clin, &emb, LoadOptions { expected_dim: Some(2) })
            .unwrap_err()
            .to_string();
        assert!(msg.contains("row 2"), "{msg}");
        std::fs::write(&emb, "patient_id,e0,e1\np1,0.5,1\np2,3,2\n").unwrap();
        let msg = load_dataset_with(&clin, &emb, LoadOptions { expected_dim: Some(2) })
            .unwrap_err()
            .to_string();
        assert!(msg.contains("row 2") && msg.contains("weight"), "{msg}");
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("e.bin");
        write_embeddings_binary(&emb, &[case("p1", 8, 0.0)]).unwrap();
        let bytes = std::fs::read(&emb).unwrap();
        std::fs::write(&emb, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_embeddings(&emb, Some(8)).is_err());
    }
}
