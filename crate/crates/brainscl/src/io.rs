//! Cohort manifests, numeric CSV tables and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use brainscl_core::cohort::{validate_subject, Violation};
use brainscl_core::{Cohort, Label, Matrix, Subject};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// One manifest record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub series_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding_path: Option<PathBuf>,
}

pub fn read_to_string(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let s = read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| AppError::format(path, e))
}

pub fn read_manifest(path: &Path) -> AppResult<Vec<ManifestEntry>> {
    read_json(path)
}

fn table_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(bytes)
}

/// Numeric CSV table; a first row that does not parse as numbers is taken as
/// a header and skipped.
pub fn read_matrix_csv(path: &Path) -> AppResult<Matrix> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in table_reader(&bytes).records().enumerate() {
        let rec = rec.map_err(|e| AppError::format(path, e))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(AppError::format(path, format!("row {}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(AppError::format(path, "no numeric rows"));
    }
    Matrix::from_rows(&rows).map_err(|e| AppError::format(path, e))
}

/// A vector stored as one row or one column.
pub fn read_vector_csv(path: &Path) -> AppResult<Vec<f64>> {
    let m = read_matrix_csv(path)?;
    if m.rows() == 1 || m.cols() == 1 {
        Ok(m.into_vec())
    } else {
        Err(AppError::format(path, format!("expected a vector, found a {}x{} table", m.rows(), m.cols())))
    }
}

fn csv_bytes(header: Option<&[String]>, rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).expect("in-memory write");
    }
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> AppResult<()> {
    let rows = (0..m.rows()).map(|i| m.row(i).iter().map(|&x| fmt_f64(x)).collect());
    write_bytes(path, &csv_bytes(None, rows))
}

pub fn write_vector_csv(path: &Path, v: &[f64]) -> AppResult<()> {
    write_bytes(path, &csv_bytes(None, v.iter().map(|&x| vec![fmt_f64(x)])))
}

/// Generic table with a header row.
pub fn write_table<S: AsRef<str>>(path: &Path, header: &[S], rows: Vec<Vec<String>>) -> AppResult<()> {
    let h: Vec<String> = header.iter().map(|s| s.as_ref().to_string()).collect();
    write_bytes(path, &csv_bytes(Some(&h), rows.into_iter()))
}

/// A matrix with subject ids as the first column and as the header.
pub fn write_labeled_matrix_csv(path: &Path, ids: &[String], m: &Matrix) -> AppResult<()> {
    let mut h = vec![String::from("subject_id")];
    h.extend(ids.iter().cloned());
    let rows =
        (0..m.rows()).map(|i| std::iter::once(ids[i].clone()).chain(m.row(i).iter().map(|&x| fmt_f64(x))).collect());
    write_bytes(path, &csv_bytes(Some(&h), rows))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn ingest_err(id: &str, message: impl std::fmt::Display) -> AppError {
    AppError::Ingest { subject: id.to_string(), message: message.to_string() }
}

/// Reads a manifest and every file it references into unvalidated subjects.
pub fn read_subjects(manifest_path: &Path) -> AppResult<Vec<Subject>> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let sp = resolve(base, &e.series_path);
        if !sp.is_file() {
            return Err(ingest_err(&e.id, format!("series file {} not found", sp.display())));
        }
        let series = read_matrix_csv(&sp).map_err(|err| ingest_err(&e.id, err))?;
        let mut s = Subject {
            id: e.id.clone(),
            label: e.label,
            series,
            text: None,
            text_embedding: None,
        };
        if let Some(tp) = &e.text_path {
            let tp = resolve(base, tp);
            s.text = Some(fs::read_to_string(&tp).map_err(|err| ingest_err(&e.id, format!("{}: {err}", tp.display())))?);
        }
        if let Some(ep) = &e.text_embedding_path {
            let ep = resolve(base, ep);
            if !ep.is_file() {
                return Err(ingest_err(&e.id, format!("embedding file {} not found", ep.display())));
            }
            s.text_embedding = Some(read_vector_csv(&ep).map_err(|err| ingest_err(&e.id, err))?);
        }
        out.push(s);
    }
    Ok(out)
}

/// Per-subject violations, in manifest order; subjects without any are omitted.
pub fn validation_report(subjects: &[Subject], require_text: bool) -> Vec<(String, Vec<Violation>)> {
    subjects
        .iter()
        .map(|s| (s.id.clone(), validate_subject(s, require_text)))
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

/// Loads and validates a cohort. The name is the manifest's parent directory.
pub fn load_cohort(manifest_path: &Path, require_text: bool) -> AppResult<Cohort> {
    let subjects = read_subjects(manifest_path)?;
    if let Some((id, v)) = validation_report(&subjects, require_text).into_iter().next() {
        let codes: Vec<&str> = v.iter().map(|x| x.code.as_str()).collect();
        return Err(ingest_err(&id, format!("{} ({})", codes.join(", "), v[0].message)));
    }
    let name = manifest_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cohort".into());
    let cohort = if require_text { Cohort::with_text_view(name, subjects) } else { Cohort::new(name, subjects) };
    cohort.map_err(|e| match e {
        brainscl_core::Error::Cohort { message, ids } => AppError::Validation(format!("{message}: {}", ids.join(", "))),
        other => other.into(),
    })
}

/// Writes a cohort as a self-contained directory: `manifest.json` plus
/// `series/<id>.csv`, `text/<id>.txt` and `embeddings/<id>.csv`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> AppResult<PathBuf> {
    let mut entries = Vec::with_capacity(cohort.len());
    for s in cohort.subjects() {
        let series_path = PathBuf::from(format!("series/{}.csv", s.id));
        write_matrix_csv(&dir.join(&series_path), &s.series)?;
        let text_path = match &s.text {
            Some(t) => {
                let p = PathBuf::from(format!("text/{}.txt", s.id));
                write_bytes(&dir.join(&p), t.as_bytes())?;
                Some(p)
            }
            None => None,
        };
        let text_embedding_path = match &s.text_embedding {
            Some(v) => {
                let p = PathBuf::from(format!("embeddings/{}.csv", s.id));
                write_vector_csv(&dir.join(&p), v)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry { id: s.id.clone(), label: s.label, series_path, text_path, text_embedding_path });
    }
    let manifest = dir.join("manifest.json");
    write_json(&manifest, &entries)?;
    Ok(manifest)
}

/// `prefix` followed by `e0 … e{d-1}`.
pub fn vector_header(prefix: &[&str], d: usize) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((0..d).map(|i| format!("e{i}"))).collect()
}

pub fn label_str(l: Label) -> String {
    l.as_u8().to_string()
}
