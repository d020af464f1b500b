use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A possibly misspelled sentence and its correction, of equal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionExample {
    pub source: Vec<char>,
    pub target: Vec<char>,
}

impl CorrectionExample {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        let ex = CorrectionExample {
            source: source.chars().collect(),
            target: target.chars().collect(),
        };
        if ex.source.len() != ex.target.len() {
            return Err(Error::Encoding(format!(
                "source has {} characters but target has {}",
                ex.source.len(),
                ex.target.len()
            )));
        }
        Ok(ex)
    }

    /// A sentence with no errors.
    pub fn clean(text: &str) -> Self {
        let chars: Vec<char> = text.chars().collect();
        CorrectionExample {
            source: chars.clone(),
            target: chars,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Zero-based indices where source and target differ.
    pub fn error_positions(&self) -> Vec<usize> {
        self.source
            .iter()
            .zip(&self.target)
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn source_text(&self) -> String {
        self.source.iter().collect()
    }

    pub fn target_text(&self) -> String {
        self.target.iter().collect()
    }
}

/// Parses `source\ttarget` lines. Blank lines are skipped.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<Vec<CorrectionExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::load(origin, lineno, "expected <source>\\t<target>"))?;
        if tgt.contains('\t') {
            return Err(Error::load(origin, lineno, "more than two tab-separated fields"));
        }
        let ex = CorrectionExample::new(src, tgt).map_err(|e| Error::load(origin, lineno, e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(origin.display().to_string()));
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<CorrectionExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn format_dataset(examples: &[CorrectionExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(out, "{}\t{}", ex.source_text(), ex.target_text());
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[CorrectionExample]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_dataset(examples)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub errors: usize,
    pub average_length: f64,
}

pub fn dataset_stats(examples: &[CorrectionExample]) -> DatasetStats {
    let sentences = examples.len();
    let errors = examples.iter().map(|e| e.error_positions().len()).sum();
    let chars: usize = examples.iter().map(CorrectionExample::len).sum();
    DatasetStats {
        sentences,
        errors,
        average_length: if sentences == 0 {
            0.0
        } else {
            chars as f64 / sentences as f64
        },
    }
}
