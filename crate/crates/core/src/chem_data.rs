//! SMILES tokenization, vocabulary construction, fixed-length index encoding
//! and CSV dataset ingestion.
//!
//! Tokens are single characters, so `Cl` is the two tokens `C` and `l`. The
//! end marker is stored in encoded sequences; the start marker is injected by
//! the decoder at run time and never appears in an [`EncodedMolecule`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid SMILES {0:?}: {1}")]
    InvalidSmiles(String, String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token {token:?} in {smiles:?}")]
    UnknownToken { smiles: String, token: String },
    #[error("{smiles:?} needs {needed} positions but L_max is {max_len}")]
    Overlength {
        smiles: String,
        needed: usize,
        max_len: usize,
    },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("parse error at data row {row}, column {column:?}: {value:?}")]
    ParseError {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Splits a SMILES string into single-character tokens.
pub fn tokenize(smiles: &str) -> Result<Vec<String>, DataError> {
    if smiles.is_empty() {
        return Err(DataError::InvalidSmiles(smiles.into(), "empty string".into()));
    }
    smiles
        .chars()
        .map(|c| {
            if c.is_ascii_graphic() {
                Ok(c.to_string())
            } else {
                Err(DataError::InvalidSmiles(
                    smiles.into(),
                    format!("character {c:?} is not printable ASCII"),
                ))
            }
        })
        .collect()
}

/// Character alphabet with corpus counts and the three special markers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index_of: HashMap<String, usize>,
    pad_id: usize,
    start_id: usize,
    end_id: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl TokenVocab {
    /// Counts characters over `corpus`. Regular tokens are ordered by
    /// descending count, ties by codepoint; pad, start and end follow.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, DataError> {
        if corpus.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for smiles in corpus {
            for tok in tokenize(smiles.as_ref())? {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ordered: Vec<(String, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (mut tokens, mut counts): (Vec<String>, Vec<u64>) = ordered.into_iter().unzip();
        for special in [PAD_TOKEN, START_TOKEN, END_TOKEN] {
            tokens.push(special.to_string());
            counts.push(0);
        }
        Self::from_parts(tokens, counts)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self, DataError> {
        if tokens.len() != counts.len() {
            return Err(DataError::InvalidVocab("tokens and counts differ in length".into()));
        }
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index_of.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let find = |name: &str| {
            index_of
                .get(name)
                .copied()
                .ok_or_else(|| DataError::InvalidVocab(format!("missing {name}")))
        };
        let (pad_id, start_id, end_id) = (find(PAD_TOKEN)?, find(START_TOKEN)?, find(END_TOKEN)?);
        for (i, (t, &c)) in tokens.iter().zip(&counts).enumerate() {
            if c == 0 && ![pad_id, start_id, end_id].contains(&i) {
                return Err(DataError::InvalidVocab(format!("token {t:?} has zero count")));
            }
        }
        Ok(Self {
            tokens,
            counts,
            index_of,
            pad_id,
            start_id,
            end_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn start_id(&self) -> usize {
        self.start_id
    }

    pub fn end_id(&self) -> usize {
        self.end_id
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad_id || id == self.start_id || id == self.end_id
    }

    /// Returns a copy whose special-marker counts reflect how often pad and
    /// end occur once `corpus` is encoded to `max_len`. Used for the
    /// prevalence-weighted reconstruction loss.
    pub fn with_encoding_counts(&self, corpus: &[EncodedMolecule]) -> Self {
        let mut out = self.clone();
        out.counts[self.pad_id] = 0;
        out.counts[self.end_id] = 0;
        for m in corpus {
            out.counts[self.end_id] += 1;
            out.counts[self.pad_id] += (m.token_ids.len() - m.valid_len) as u64;
        }
        out
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
            counts: self.counts.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let f: VocabFile = serde_json::from_str(text)?;
        Self::from_parts(f.tokens, f.counts)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Self::from_json(&s)
    }
}

/// A SMILES string as a fixed-length id sequence `[chars.., end, pad..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMolecule {
    pub smiles: String,
    pub token_ids: Vec<usize>,
    /// Tokens before padding, including the end marker.
    pub valid_len: usize,
}

pub fn encode(smiles: &str, vocab: &TokenVocab, max_len: usize) -> Result<EncodedMolecule, DataError> {
    let toks = tokenize(smiles)?;
    let needed = toks.len() + 1;
    if needed > max_len {
        return Err(DataError::Overlength {
            smiles: smiles.into(),
            needed,
            max_len,
        });
    }
    let mut ids = Vec::with_capacity(max_len);
    for t in &toks {
        let id = vocab.id(t).ok_or_else(|| DataError::UnknownToken {
            smiles: smiles.into(),
            token: t.clone(),
        })?;
        ids.push(id);
    }
    ids.push(vocab.end_id());
    ids.resize(max_len, vocab.pad_id());
    Ok(EncodedMolecule {
        smiles: smiles.into(),
        token_ids: ids,
        valid_len: needed,
    })
}

/// Decodes ids up to (not including) the first end or pad marker.
pub fn decode(ids: &[usize], vocab: &TokenVocab) -> String {
    ids.iter()
        .take_while(|&&i| i != vocab.end_id() && i != vocab.pad_id())
        .filter(|&&i| i != vocab.start_id())
        .map(|&i| vocab.token(i))
        .collect()
}

/// Smallest L_max that fits every corpus string plus its end marker.
pub fn max_len_for<S: AsRef<str>>(corpus: &[S]) -> usize {
    corpus.iter().map(|s| s.as_ref().chars().count()).max().unwrap_or(0) + 1
}

/// Encodes a batch, skipping (and reporting) records that do not fit.
pub fn encode_all<S: AsRef<str>>(
    corpus: &[S],
    vocab: &TokenVocab,
    max_len: usize,
) -> (Vec<EncodedMolecule>, Vec<(usize, DataError)>) {
    let mut ok = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        match encode(s.as_ref(), vocab, max_len) {
            Ok(m) => ok.push(m),
            Err(e) => {
                log::warn!("skipping record {i}: {e}");
                skipped.push((i, e));
            }
        }
    }
    (ok, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub smiles: String,
    pub target: Option<f64>,
    pub descriptors: Vec<f64>,
}

/// Column layout of a CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub smiles_column: String,
    /// Real-valued target column; `None` for unlabeled corpora.
    pub target_column: Option<String>,
    pub task: TaskKind,
    /// Raw values `>= threshold` become label 1; others 0. Only meaningful
    /// for classification datasets given as real values (logBB ≥ −1).
    pub label_threshold: Option<f64>,
    /// Restrict descriptor columns to these names; `None` keeps every other
    /// column as a descriptor.
    pub descriptor_columns: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            smiles_column: "smiles".into(),
            target_column: None,
            task: TaskKind::Regression,
            label_threshold: None,
            descriptor_columns: None,
        }
    }
}

impl Schema {
    pub fn regression() -> Self {
        Self {
            target_column: Some("target".into()),
            ..Self::default()
        }
    }

    pub fn classification() -> Self {
        Self {
            target_column: Some("label".into()),
            task: TaskKind::Classification,
            ..Self::default()
        }
    }

    pub fn unlabeled() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub descriptor_names: Vec<String>,
    pub records: Vec<Record>,
    pub task: TaskKind,
}

/// Summary of rows removed while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub duplicates_dropped: usize,
    pub missing_dropped: usize,
    pub kept: usize,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na")
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>, DataError> {
    if is_missing(raw) {
        return Ok(None);
    }
    raw.trim()
        .parse::<f64>()
        .map(Some)
        .map_err(|_| DataError::ParseError {
            row,
            column: column.into(),
            value: raw.into(),
        })
}

impl Dataset {
    pub fn load(path: &Path, schema: &Schema) -> Result<(Self, LoadReport), DataError> {
        Self::from_reader(File::open(path)?, schema)
    }

    pub fn from_reader<R: Read>(reader: R, schema: &Schema) -> Result<(Self, LoadReport), DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::SchemaError(format!("missing column {name:?}")))
        };
        let smiles_idx = col(&schema.smiles_column)?;
        let target_idx = schema.target_column.as_deref().map(col).transpose()?;
        let descriptor_idx: Vec<usize> = match &schema.descriptor_columns {
            Some(names) => names.iter().map(|n| col(n)).collect::<Result<_, _>>()?,
            None => (0..headers.len())
                .filter(|&i| i != smiles_idx && Some(i) != target_idx && headers[i] != "label" && headers[i] != "target")
                .collect(),
        };
        let descriptor_names: Vec<String> = descriptor_idx.iter().map(|&i| headers[i].clone()).collect();

        let mut report = LoadReport::default();
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            report.rows_read += 1;
            let smiles = rec.get(smiles_idx).unwrap_or("").trim().to_string();
            if smiles.is_empty() {
                report.missing_dropped += 1;
                continue;
            }
            let target = match target_idx {
                Some(i) => {
                    let name = schema.target_column.as_deref().unwrap_or_default();
                    match parse_cell(rec.get(i).unwrap_or(""), row, name)? {
                        Some(v) => Some(v),
                        None => {
                            report.missing_dropped += 1;
                            continue;
                        }
                    }
                }
                None => None,
            };
            let target = match (target, schema.task, schema.label_threshold) {
                (Some(v), TaskKind::Classification, Some(thr)) => Some(if v >= thr { 1.0 } else { 0.0 }),
                (Some(v), TaskKind::Classification, None) if v != 0.0 && v != 1.0 => {
                    return Err(DataError::ParseError {
                        row,
                        column: schema.target_column.clone().unwrap_or_default(),
                        value: v.to_string(),
                    })
                }
                (t, _, _) => t,
            };
            let mut descriptors = Vec::with_capacity(descriptor_idx.len());
            let mut missing = false;
            for (&i, name) in descriptor_idx.iter().zip(&descriptor_names) {
                match parse_cell(rec.get(i).unwrap_or(""), row, name)? {
                    Some(v) if v.is_finite() => descriptors.push(v),
                    _ => {
                        missing = true;
                        break;
                    }
                }
            }
            if missing {
                report.missing_dropped += 1;
                continue;
            }
            if !seen.insert(smiles.clone()) {
                report.duplicates_dropped += 1;
                continue;
            }
            records.push(Record {
                smiles,
                target,
                descriptors,
            });
        }
        report.kept = records.len();
        log::info!(
            "loaded {} records ({} duplicates, {} incomplete dropped)",
            report.kept,
            report.duplicates_dropped,
            report.missing_dropped
        );
        Ok((
            Self {
                descriptor_names,
                records,
                task: schema.task,
            },
            report,
        ))
    }

    /// Writes the dataset back as CSV: `smiles`, the target column (if any),
    /// then descriptors.
    pub fn write_csv<W: Write>(&self, writer: W, target_column: Option<&str>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["smiles".to_string()];
        if let Some(t) = target_column {
            header.push(t.to_string());
        }
        header.extend(self.descriptor_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.smiles.clone()];
            if target_column.is_some() {
                row.push(r.target.map(|v| format!("{v:?}")).unwrap_or_default());
            }
            row.extend(r.descriptors.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn smiles(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.smiles.as_str()).collect()
    }

    pub fn targets(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.target).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.descriptor_names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.records.iter().map(|r| r.descriptors[i]).collect())
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            descriptor_names: self.descriptor_names.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            task: self.task,
        }
    }

    /// Replaces (or appends) a descriptor column.
    pub fn set_column(&mut self, name: &str, values: &[f64]) {
        assert_eq!(values.len(), self.records.len());
        match self.column_index(name) {
            Some(i) => {
                for (r, &v) in self.records.iter_mut().zip(values) {
                    r.descriptors[i] = v;
                }
            }
            None => {
                self.descriptor_names.push(name.to_string());
                for (r, &v) in self.records.iter_mut().zip(values) {
                    r.descriptors.push(v);
                }
            }
        }
    }
}
