//! Paired recall/reasoning prompts built from country-capital-continent triples.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TaskType;

const SHIPPED_TRIPLES: &str = include_str!("../data/world_triples.csv");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("triple has an empty {field}")]
    EmptyField { field: &'static str },
    #[error("duplicate (country, capital): ({country}, {capital})")]
    Duplicate { country: String, capital: String },
    #[error("insufficient triples: {available} available, {requested} pairs requested")]
    Insufficient { available: usize, requested: usize },
    #[error("dataset has no pairs")]
    EmptyDataset,
    #[error("invalid dataset record on line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub country: String,
    pub capital: String,
    pub continent: String,
}

impl FactTriple {
    pub fn new(
        country: impl Into<String>,
        capital: impl Into<String>,
        continent: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let t = Self {
            country: country.into().trim().to_string(),
            capital: capital.into().trim().to_string(),
            continent: continent.into().trim().to_string(),
        };
        for (field, value) in [
            ("country", &t.country),
            ("capital", &t.capital),
            ("continent", &t.continent),
        ] {
            if value.is_empty() {
                return Err(DatasetError::EmptyField { field });
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub pair_id: String,
    pub recall_prompt: String,
    pub recall_answer: String,
    pub reasoning_prompt: String,
    pub reasoning_answer: String,
    pub triple: FactTriple,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub pair_id: String,
    pub task_type: TaskType,
    pub prompt: String,
    pub answer: String,
}

pub fn render_recall(t: &FactTriple) -> String {
    format!("What is the capital of {}?", t.country)
}

pub fn render_reasoning(t: &FactTriple) -> String {
    format!(
        "If {cap} is the capital of {country} and {country} is in {cont}, what continent is {cap} in?",
        cap = t.capital,
        country = t.country,
        cont = t.continent,
    )
}

/// Parses `country,capital,continent` lines. A first line whose first field
/// is literally `country` is treated as a header.
pub fn parse_triples(text: &str) -> Result<Vec<FactTriple>, DatasetError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if idx == 0 && fields.first() == Some(&"country") {
            continue;
        }
        if fields.len() != 3 {
            return Err(DatasetError::Parse {
                line: idx + 1,
                message: format!("expected 3 comma-separated fields, found {}", fields.len()),
            });
        }
        let triple = FactTriple::new(fields[0], fields[1], fields[2]).map_err(|e| {
            DatasetError::Parse {
                line: idx + 1,
                message: e.to_string(),
            }
        })?;
        out.push(triple);
    }
    Ok(out)
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<FactTriple>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_triples(&text)
}

/// The bundled list of 50 world-geography triples.
pub fn shipped_triples() -> Vec<FactTriple> {
    parse_triples(SHIPPED_TRIPLES).expect("bundled triple list is well formed")
}

/// Rejects duplicate (country, capital) keys.
pub fn check_unique(triples: &[FactTriple]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for t in triples {
        if !seen.insert((t.country.as_str(), t.capital.as_str())) {
            return Err(DatasetError::Duplicate {
                country: t.country.clone(),
                capital: t.capital.clone(),
            });
        }
    }
    Ok(())
}

/// Builds `n_pairs` prompt pairs from the first `n_pairs` triples, in order.
pub fn make_pairs(triples: &[FactTriple], n_pairs: usize) -> Result<Vec<PromptPair>, DatasetError> {
    check_unique(triples)?;
    if triples.len() < n_pairs {
        return Err(DatasetError::Insufficient {
            available: triples.len(),
            requested: n_pairs,
        });
    }
    Ok(triples[..n_pairs]
        .iter()
        .enumerate()
        .map(|(i, t)| PromptPair {
            pair_id: format!("pair-{:03}", i + 1),
            recall_prompt: render_recall(t),
            recall_answer: t.capital.clone(),
            reasoning_prompt: render_reasoning(t),
            reasoning_answer: t.continent.clone(),
            triple: t.clone(),
        })
        .collect())
}

/// Flattens pairs into records, recall before reasoning within each pair.
pub fn dataset_records(pairs: &[PromptPair]) -> Vec<DatasetRecord> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                DatasetRecord {
                    id: format!("{}-recall", p.pair_id),
                    pair_id: p.pair_id.clone(),
                    task_type: TaskType::Recall,
                    prompt: p.recall_prompt.clone(),
                    answer: p.recall_answer.clone(),
                },
                DatasetRecord {
                    id: format!("{}-reasoning", p.pair_id),
                    pair_id: p.pair_id.clone(),
                    task_type: TaskType::Reasoning,
                    prompt: p.reasoning_prompt.clone(),
                    answer: p.reasoning_answer.clone(),
                },
            ]
        })
        .collect()
}

pub fn export_dataset(pairs: &[PromptPair], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    if pairs.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for record in dataset_records(pairs) {
        let line = serde_json::to_string(&record).expect("records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DatasetError::Record { line: i + 1, source })
        })
        .collect()
}
