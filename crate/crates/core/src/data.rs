//! Dataset ingestion: a JSON-lines file of VQA items with strict
//! validation at load time.
//!
//! Relative `image_features` paths are resolved against the dataset file's
//! directory, so a dataset folder can be moved as a unit.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path} line {line}: duplicate item id '{id}'")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path} line {line}: item '{id}' field '{field}' must not be empty")]
    EmptyField {
        path: String,
        line: usize,
        id: String,
        field: &'static str,
    },
    #[error("{path} line {line}: item '{id}' answer '{answer}' is not among its options")]
    AnswerNotInOptions {
        path: String,
        line: usize,
        id: String,
        answer: String,
    },
    #[error("{path} line {line}: item '{id}' references missing feature file {features}")]
    DanglingFeatures {
        path: String,
        line: usize,
        id: String,
        features: String,
    },
}

/// One question: text, answer options (empty for open-end questions), the
/// gold answer, a path to the image feature file, and a category tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQAItem {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub options: Vec<String>,
    pub answer: String,
    pub image_features: PathBuf,
    pub category: String,
}

impl VQAItem {
    /// Closed-end questions carry a fixed option list.
    pub fn is_closed(&self) -> bool {
        !self.options.is_empty()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Load and validate a dataset. Checks ids for uniqueness, closed-end
/// answers for option membership, and every feature path for existence;
/// returned items carry feature paths already resolved against the dataset
/// directory.
pub fn load_dataset(path: &Path) -> Result<Vec<VQAItem>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let path_str = path.display().to_string();

    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut item: VQAItem = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path_str.clone(),
            line: lineno,
            source,
        })?;
        for (field, value) in [
            ("id", &item.id),
            ("question", &item.question),
            ("answer", &item.answer),
            ("category", &item.category),
        ] {
            if value.trim().is_empty() {
                return Err(DataError::EmptyField {
                    path: path_str.clone(),
                    line: lineno,
                    id: item.id.clone(),
                    field,
                });
            }
        }
        if !seen.insert(item.id.clone()) {
            return Err(DataError::DuplicateId {
                path: path_str.clone(),
                line: lineno,
                id: item.id,
            });
        }
        if item.is_closed() && !item.options.contains(&item.answer) {
            return Err(DataError::AnswerNotInOptions {
                path: path_str.clone(),
                line: lineno,
                id: item.id,
                answer: item.answer,
            });
        }
        if item.image_features.is_relative() {
            item.image_features = base.join(&item.image_features);
        }
        if !item.image_features.is_file() {
            return Err(DataError::DanglingFeatures {
                path: path_str.clone(),
                line: lineno,
                id: item.id,
                features: item.image_features.display().to_string(),
            });
        }
        items.push(item);
    }
    Ok(items)
}
