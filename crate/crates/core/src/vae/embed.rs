use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::VaeModel;
use super::VaeError;
use crate::chem_data::{decode, encode, DataError, EncodedMolecule};
use crate::qsar::{kfold_cv, QsarSpec};
use crate::seeding::row_seed;
use crate::stats::population_std;

const ENCODE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Mean,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub smiles: Vec<String>,
    pub mu: Vec<Vec<f64>>,
    pub logvar: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub mode: EmbedMode,
    pub seed: u64,
    /// Input rows that could not be encoded, with the reason.
    pub excluded: Vec<(usize, String)>,
    /// Input row index of every embedded row.
    pub rows: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.smiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smiles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Rows `idx` (positions within this set) as a new set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |m: &Vec<Vec<f64>>| idx.iter().map(|&i| m[i].clone()).collect();
        Self {
            smiles: idx.iter().map(|&i| self.smiles[i].clone()).collect(),
            mu: pick(&self.mu),
            logvar: pick(&self.logvar),
            z: pick(&self.z),
            mode: self.mode,
            seed: self.seed,
            excluded: Vec::new(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    /// CSV with columns `smiles, mu_*, logvar_*, z_*`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let d = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["smiles".to_string()];
        for prefix in ["mu", "logvar", "z"] {
            header.extend((0..d).map(|j| format!("{prefix}_{j}")));
        }
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.smiles[i].clone()];
            for block in [&self.mu[i], &self.logvar[i], &self.z[i]] {
                rec.extend(block.iter().map(|v| format!("{v:?}")));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, mode: EmbedMode, seed: u64) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with("mu_")).count();
        if header.len() != 1 + 3 * d || header.get(0) != Some("smiles") {
            return Err(DataError::SchemaError("embedding CSV needs smiles, mu_*, logvar_*, z_*".into()));
        }
        let mut set = Self {
            smiles: Vec::new(),
            mu: Vec::new(),
            logvar: Vec::new(),
            z: Vec::new(),
            mode,
            seed,
            excluded: Vec::new(),
            rows: Vec::new(),
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut vals = Vec::with_capacity(3 * d);
            for (col, field) in rec.iter().enumerate().skip(1) {
                vals.push(field.parse::<f64>().map_err(|_| DataError::ParseError {
                    row,
                    column: header[col].to_string(),
                    value: field.to_string(),
                })?);
            }
            set.smiles.push(rec[0].to_string());
            set.mu.push(vals[..d].to_vec());
            set.logvar.push(vals[d..2 * d].to_vec());
            set.z.push(vals[2 * d..].to_vec());
            set.rows.push(row);
        }
        Ok(set)
    }
}

/// Encodes every SMILES that fits the model's vocabulary and length limit.
/// Sampled rows draw `z = mu + sigma * eps` with a per-row seed, so results
/// do not depend on batching.
pub fn embed<S: AsRef<str>>(model: &VaeModel, smiles: &[S], mode: EmbedMode, seed: u64) -> Result<EmbeddingSet, VaeError> {
    let mut mols = Vec::with_capacity(smiles.len());
    let mut rows = Vec::with_capacity(smiles.len());
    let mut excluded = Vec::new();
    for (i, s) in smiles.iter().enumerate() {
        match encode(s.as_ref(), &model.vocab, model.config.max_len) {
            Ok(m) => {
                mols.push(m);
                rows.push(i);
            }
            Err(e) => excluded.push((i, e.to_string())),
        }
    }
    if !excluded.is_empty() {
        log::warn!("embed: excluded {} of {} rows", excluded.len(), smiles.len());
    }
    let mut mu = Vec::with_capacity(mols.len());
    let mut logvar = Vec::with_capacity(mols.len());
    for chunk in mols.chunks(ENCODE_BATCH) {
        let refs: Vec<&EncodedMolecule> = chunk.iter().collect();
        let (m, l) = model.encode(&refs)?;
        mu.extend(m);
        logvar.extend(l);
    }
    let z = match mode {
        EmbedMode::Mean => mu.clone(),
        EmbedMode::Sampled => mu
            .iter()
            .zip(&logvar)
            .zip(&rows)
            .map(|((m, l), &row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, row));
                m.iter()
                    .zip(l)
                    .map(|(mv, lv)| {
                        let eps: f64 = rng.sample(StandardNormal);
                        mv + (0.5 * lv).exp() * eps
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(EmbeddingSet {
        smiles: mols.into_iter().map(|m| m.smiles).collect(),
        mu,
        logvar,
        z,
        mode,
        seed,
        excluded,
        rows,
    })
}

/// Fraction of molecules whose greedy decode from `z = mu` reproduces the
/// input string exactly.
pub fn reconstruction_accuracy(model: &VaeModel, heldout: &[EncodedMolecule]) -> Result<f64, VaeError> {
    if heldout.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for chunk in heldout.chunks(ENCODE_BATCH) {
        let refs: Vec<&EncodedMolecule> = chunk.iter().collect();
        let (mu, _) = model.encode(&refs)?;
        let decoded = model.greedy_decode(&mu)?;
        hits += chunk
            .iter()
            .zip(&decoded)
            .filter(|(m, ids)| decode(ids, &model.vocab) == m.smiles)
            .count();
    }
    Ok(hits as f64 / heldout.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r2_mean: f64,
}

/// 10-fold cross-validated ridge regression from embeddings to the
/// standardized descriptor column.
pub fn descriptor_probe(embeddings: &[Vec<f64>], column: &[f64], seed: u64) -> Result<ProbeResult, VaeError> {
    if embeddings.len() != column.len() {
        return Err(VaeError::Cv("embeddings and column differ in length".into()));
    }
    let sd = population_std(column);
    if !(sd > 0.0) {
        return Err(VaeError::DegenerateColumn);
    }
    let m = crate::stats::mean(column);
    let y: Vec<f64> = column.iter().map(|v| (v - m) / sd).collect();
    let spec = QsarSpec::linear(seed);
    let report = kfold_cv(embeddings, &y, &spec, 10, seed).map_err(|e| VaeError::Cv(e.to_string()))?;
    Ok(ProbeResult {
        rmse_mean: report.mean["rmse"],
        rmse_std: report.std["rmse"],
        r2_mean: report.mean["r2"],
    })
}
