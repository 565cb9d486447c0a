use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SelectionMode, TargetConfig};
use super::PipelineError;
use crate::chem_data::{encode_all, max_len_for, Dataset, EncodedMolecule, Schema, TokenVocab};
use crate::descriptors::{
    native_descriptor, outlier_free_rows, parse_graph, pearson, select_descriptors, variance_filter, DescriptorMatrix,
    SelectionEntry, SelectionReport,
};
use crate::seeding::{derive_seed, digest_hex, rng_for};
use crate::vae::{build_model, load_bundle, save_bundle, train, TrainLog, VaeConfig, VaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Loaded inputs shared by every command of one experiment.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub inputs: Vec<InputDigest>,
    /// Source rows available for training (validation rows removed).
    pub source: Dataset,
    pub validation: Dataset,
    pub target: Option<Dataset>,
    pub vocab: TokenVocab,
    pub max_len: usize,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn stage<E: std::fmt::Display>(name: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage: name.to_string(),
        message: e.to_string(),
    }
}

fn digest_file(role: &str, path: &Path) -> Result<InputDigest, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(InputDigest {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: digest_hex(&bytes),
    })
}

pub fn load_target(t: &TargetConfig) -> Result<Dataset, PipelineError> {
    let schema = Schema {
        smiles_column: "smiles".into(),
        target_column: Some(t.target_column.clone()),
        task: t.task,
        label_threshold: t.label_threshold,
        descriptor_columns: None,
    };
    let (ds, report) = Dataset::load(&t.path, &schema)?;
    log::info!("target {}: {report:?}", t.path.display());
    Ok(ds)
}

/// `n` rows drawn without replacement, kept in their original order.
pub(crate) fn sample_rows(len: usize, n: usize, seed: u64, purpose: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng_for(seed, purpose));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut inputs = vec![digest_file("source", &cfg.source.path)?];
        let (all_source, report) = Dataset::load(&cfg.source.path, &Schema::unlabeled())?;
        log::info!("source {}: {report:?}", cfg.source.path.display());
        if all_source.is_empty() {
            return Err(PipelineError::Config("source dataset is empty".into()));
        }
        let (source, validation) = match &cfg.source.validation_path {
            Some(p) => {
                inputs.push(digest_file("validation", p)?);
                let (v, _) = Dataset::load(p, &Schema::unlabeled())?;
                let keep: Vec<usize> = (0..v.len().min(cfg.source.validation_size)).collect();
                (all_source, v.select_rows(&keep))
            }
            None => {
                let n = all_source.len();
                let nv = cfg.source.validation_size.min(n / 5);
                let val = sample_rows(n, nv, cfg.seed, "source/validation");
                let train: Vec<usize> = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
                (all_source.select_rows(&train), all_source.select_rows(&val))
            }
        };
        let target = match &cfg.target {
            Some(t) => {
                inputs.push(digest_file("target", &t.path)?);
                Some(load_target(t)?)
            }
            None => None,
        };
        let smiles = source.smiles();
        let max_len = max_len_for(&smiles);
        let vocab = TokenVocab::build(&smiles)?;
        let (encoded, _) = encode_all(&smiles, &vocab, max_len);
        let vocab = vocab.with_encoding_counts(&encoded);
        let out = cfg.output_dir.join(&cfg.name);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self {
            cfg,
            out,
            inputs,
            source,
            validation,
            target,
            vocab,
            max_len,
        })
    }

    pub fn target(&self) -> Result<&Dataset, PipelineError> {
        self.target
            .as_ref()
            .ok_or_else(|| PipelineError::Config("this command needs a target dataset".into()))
    }

    pub fn target_values(&self) -> Result<Vec<f64>, PipelineError> {
        self.target()?
            .targets()
            .ok_or_else(|| PipelineError::Config("target dataset has no target column".into()))
    }

    pub fn task(&self) -> crate::chem_data::TaskKind {
        self.cfg.target.as_ref().map_or(crate::chem_data::TaskKind::Regression, |t| t.task)
    }

    /// Training rows for a subset fraction, in source order.
    pub fn subset_rows(&self, fraction: f64) -> Vec<usize> {
        let n = self.source.len();
        if fraction >= 1.0 {
            return (0..n).collect();
        }
        let k = ((n as f64 * fraction).round() as usize).max(1);
        sample_rows(n, k, self.cfg.seed, "source/subset")
    }

    /// Source values of a predictor descriptor: an ingested column when the
    /// source CSV has one, else computed natively from the graph.
    pub fn source_descriptor(&self, name: &str) -> Result<Vec<f64>, PipelineError> {
        if let Some(col) = self.source.column(name) {
            return Ok(col);
        }
        self.source
            .smiles()
            .iter()
            .map(|s| {
                let g = parse_graph(s)?;
                native_descriptor(name, &g)
            })
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| PipelineError::Config(format!("predictor descriptor {name} unavailable for the source: {e}")))
    }

    pub fn encode_rows(&self, ds: &Dataset, rows: &[usize]) -> (Vec<EncodedMolecule>, Vec<usize>) {
        let smiles: Vec<&str> = rows.iter().map(|&i| ds.records[i].smiles.as_str()).collect();
        let (mols, skipped) = encode_all(&smiles, &self.vocab, self.max_len);
        let skipped: Vec<usize> = skipped.into_iter().map(|(i, _)| i).collect();
        let kept = (0..rows.len()).filter(|i| !skipped.contains(i)).map(|i| rows[i]).collect();
        (mols, kept)
    }

    pub fn validation_set(&self) -> Vec<EncodedMolecule> {
        let rows: Vec<usize> = (0..self.validation.len()).collect();
        self.encode_rows(&self.validation, &rows).0
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<PathBuf, PipelineError> {
        write_json(&self.out.join(file), value)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Descriptor selection on the target set: outlier rows and low-variance
/// columns go first, then the |r| ranking with intercorrelation pruning.
pub fn run_selection(ctx: &Context) -> Result<SelectionReport, PipelineError> {
    selection(ctx, false)
}

/// Selection restricted to descriptors the source can supply, which is
/// what a joint model can actually be trained on.
pub fn run_predictor_selection(ctx: &Context) -> Result<SelectionReport, PipelineError> {
    selection(ctx, true)
}

fn source_has(ctx: &Context, name: &str) -> bool {
    if ctx.source.column_index(name).is_some() {
        return true;
    }
    match ctx.source.records.first().map(|r| parse_graph(&r.smiles)) {
        Some(Ok(g)) => native_descriptor(name, &g).is_ok(),
        _ => false,
    }
}

fn selection(ctx: &Context, source_only: bool) -> Result<SelectionReport, PipelineError> {
    let target = ctx.target()?;
    let y = ctx.target_values()?;
    let sel = &ctx.cfg.selection;
    match sel.mode {
        SelectionMode::Explicit => {
            if sel.names.is_empty() {
                return Err(PipelineError::Config("explicit selection needs names".into()));
            }
            let mut entries = Vec::new();
            let mut rs = Vec::new();
            for name in &sel.names {
                let col = target
                    .column(name)
                    .ok_or_else(|| PipelineError::Config(format!("target has no column {name}")))?;
                let r = pearson(&col, &y).map_err(stage("select-descriptors"))?;
                rs.push(r);
                entries.push(SelectionEntry {
                    name: name.clone(),
                    r,
                    kept: true,
                    reason: "explicit".into(),
                });
            }
            Ok(SelectionReport {
                entries,
                selected: sel.names.clone(),
                selected_r: rs,
                short: false,
            })
        }
        SelectionMode::Auto => {
            let mut m = DescriptorMatrix::from_dataset(target);
            if source_only {
                let keep: Vec<usize> = (0..m.n_cols()).filter(|&j| source_has(ctx, &m.names[j])).collect();
                m = DescriptorMatrix::new(
                    keep.iter().map(|&j| m.names[j].clone()).collect(),
                    keep.iter().map(|&j| m.columns[j].clone()).collect(),
                    keep.iter().map(|&j| m.sources[j]).collect(),
                )
                .map_err(stage("select-descriptors"))?;
            }
            let rows = outlier_free_rows(&m, sel.outlier_iqr);
            log::info!("selection: {} of {} rows free of outliers", rows.len(), m.n_rows());
            let m = m.select_rows(&rows);
            let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let m = variance_filter(&m, sel.variance_threshold).map_err(stage("select-descriptors"))?;
            select_descriptors(&m, &yr, sel.k, sel.intercorr_cut).map_err(stage("select-descriptors"))
        }
    }
}

/// What to train: a replicate seed, a subset fraction and an optional
/// predictor column (name plus per-source-row values).
#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub seed: u64,
    pub fraction: f64,
    pub predictor: Option<(String, Vec<f64>)>,
}

pub struct TrainedModel {
    pub model: VaeModel,
    pub log: TrainLog,
    pub key: String,
    pub config: VaeConfig,
}

#[derive(Serialize)]
struct ModelKey<'a> {
    vae: &'a VaeConfig,
    train: &'a crate::vae::TrainOptions,
    /// Role and content digest only, so moving files keeps the key.
    inputs: Vec<(&'a str, &'a str)>,
    fraction: f64,
    subset_seed: u64,
    predictor_digest: Option<String>,
    validation_size: usize,
}

fn digest_values(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    digest_hex(&bytes)
}

/// Trains the requested model, or loads it when an identical request has
/// already been trained under `<output_dir>/models`.
pub fn obtain_model(ctx: &Context, req: &ModelRequest) -> Result<TrainedModel, PipelineError> {
    let config = ctx
        .cfg
        .vae
        .resolve(ctx.max_len, req.seed, req.predictor.as_ref().map(|(n, _)| n.as_str()));
    let source_inputs: Vec<(&str, &str)> = ctx
        .inputs
        .iter()
        .filter(|d| d.role != "target")
        .map(|d| (d.role.as_str(), d.sha256.as_str()))
        .collect();
    let key_json = serde_json::to_string(&ModelKey {
        vae: &config,
        train: &ctx.cfg.train,
        inputs: source_inputs,
        fraction: req.fraction,
        subset_seed: ctx.cfg.seed,
        predictor_digest: req.predictor.as_ref().map(|(_, v)| digest_values(v)),
        validation_size: ctx.cfg.source.validation_size,
    })
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    let key = digest_hex(key_json.as_bytes())[..16].to_string();
    let dir = ctx.cfg.output_dir.join("models").join(&key);
    let done = dir.join("complete");
    let log_path = dir.join("train_log.json");
    if done.is_file() {
        log::info!("reusing trained model {key}");
        let model = load_bundle(&dir).map_err(stage("train-vae"))?;
        let log: TrainLog =
            serde_json::from_str(&fs::read_to_string(&log_path).map_err(io_err(&log_path))?).map_err(stage("train-vae"))?;
        return Ok(TrainedModel { model, log, key, config });
    }

    let rows = ctx.subset_rows(req.fraction);
    let (mols, kept) = ctx.encode_rows(&ctx.source, &rows);
    let desc: Option<Vec<Vec<f64>>> = req
        .predictor
        .as_ref()
        .map(|(_, v)| kept.iter().map(|&i| vec![v[i]]).collect());
    let val = ctx.validation_set();
    let mut model = build_model(&config, &ctx.vocab).map_err(stage("train-vae"))?;
    log::info!(
        "training model {key}: {:?}, {} molecules, predictor {:?}, seed {}",
        config.arch,
        mols.len(),
        config.predictor_names(),
        req.seed
    );
    let log = train(&mut model, &mols, desc.as_deref(), &val, &ctx.cfg.train).map_err(stage("train-vae"))?;
    save_bundle(&model, &dir).map_err(stage("train-vae"))?;
    write_json(&log_path, &log)?;
    write_json(&dir.join("key.json"), &serde_json::from_str::<serde_json::Value>(&key_json).expect("valid JSON"))?;
    fs::write(&done, b"").map_err(io_err(&done))?;
    Ok(TrainedModel { model, log, key, config })
}

/// Trains several requests on the current rayon pool, preserving order.
pub fn obtain_models(ctx: &Context, reqs: &[ModelRequest]) -> Result<Vec<TrainedModel>, PipelineError> {
    reqs.par_iter().map(|r| obtain_model(ctx, r)).collect()
}

/// Seeds recorded in every report.
pub fn seed_table(ctx: &Context) -> BTreeMap<String, u64> {
    let mut t = BTreeMap::new();
    t.insert("root".into(), ctx.cfg.seed);
    t.insert("cv".into(), derive_seed(ctx.cfg.seed, "cv"));
    t.insert("subset".into(), derive_seed(ctx.cfg.seed, "source/subset"));
    for s in &ctx.cfg.replicate_seeds {
        t.insert(format!("replicate_{s}"), *s);
    }
    t
}
