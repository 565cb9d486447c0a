use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::chem_data::TaskKind;
use crate::qsar::{ModelKind, QsarSpec};
use crate::vae::{Arch, EmbedMode, PredictorHead, TrainOptions, VaeConfig};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_fraction() -> f64 {
    1.0
}
fn default_validation_size() -> usize {
    500
}
fn default_target_column() -> String {
    "target".into()
}
fn default_task() -> TaskKind {
    TaskKind::Regression
}
fn default_folds() -> usize {
    10
}
fn default_replicates() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_embedding_replicates() -> usize {
    5
}
fn default_cluster_ks() -> Vec<usize> {
    vec![10]
}
fn default_embed_mode() -> EmbedMode {
    EmbedMode::Sampled
}
fn default_qsar() -> Vec<QsarEntry> {
    vec![QsarEntry::lr()]
}
fn default_subset_fractions() -> Vec<f64> {
    vec![0.02, 0.1, 0.5, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub path: PathBuf,
    /// Fraction of the training rows kept, drawn with the run seed.
    #[serde(default = "default_fraction")]
    pub subset_fraction: f64,
    /// Held-out molecules for validation; carved from the source when absent.
    #[serde(default)]
    pub validation_path: Option<PathBuf>,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub path: PathBuf,
    #[serde(default = "default_target_column")]
    pub target_column: String,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default)]
    pub label_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub arch: Arch,
    pub preset: Preset,
    pub latent_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub beta: Option<f64>,
    pub lambda_pred: Option<f64>,
    pub penalized: Option<bool>,
    pub predictor_head: Option<PredictorHead>,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            arch: Arch::Pvae,
            preset: Preset::Desk,
            latent_dim: None,
            hidden_dim: None,
            decoder_layers: None,
            beta: None,
            lambda_pred: None,
            penalized: None,
            predictor_head: None,
        }
    }
}

impl VaeSection {
    /// Full model config for one replicate; `predictor` names the
    /// descriptor head, if any.
    pub fn resolve(&self, max_len: usize, seed: u64, predictor: Option<&str>) -> VaeConfig {
        let mut c = match self.preset {
            Preset::Desk => VaeConfig::desk(self.arch, max_len),
            Preset::Full => VaeConfig::full(self.arch, max_len),
        };
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        if let Some(v) = self.hidden_dim {
            c.hidden_dim = v;
        }
        if let Some(v) = self.decoder_layers {
            c.decoder_layers = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.lambda_pred {
            c.lambda_pred = v;
        }
        if let Some(v) = self.penalized {
            c.penalized = v;
        }
        c.seed = seed;
        if let Some(name) = predictor {
            c = c.with_predictor(&[name]);
            if let (Some(head), Some(p)) = (&self.predictor_head, c.predictor.as_mut()) {
                p.head = head.clone();
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Rank the target's descriptor columns and keep the top k.
    Auto,
    /// Use `names` as given.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub k: usize,
    pub intercorr_cut: f64,
    pub variance_threshold: f64,
    pub outlier_iqr: f64,
    pub names: Vec<String>,
    /// Descriptor degraded by the noise sweep; defaults to the top selection.
    pub noise_base: Option<String>,
    pub r_targets: Vec<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Auto,
            k: 3,
            intercorr_cut: 0.9,
            variance_threshold: 0.5,
            outlier_iqr: 5.0,
            names: Vec::new(),
            noise_base: None,
            r_targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QsarEntry {
    pub kind: ModelKind,
    #[serde(default)]
    pub ridge_lambda: Option<f64>,
    #[serde(default)]
    pub mlp_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl QsarEntry {
    pub fn lr() -> Self {
        Self {
            kind: ModelKind::Lr,
            ridge_lambda: None,
            mlp_hidden: None,
            epochs: None,
            learning_rate: None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            ModelKind::Lr => "LR",
            ModelKind::Mlp => "MLP",
            ModelKind::ResNet1d => "ResNet1D",
        }
    }

    pub fn resolve(&self, task: TaskKind, seed: u64) -> QsarSpec {
        let mut s = QsarSpec::new(self.kind, task, seed);
        if let Some(v) = self.ridge_lambda {
            s.ridge_lambda = v;
        }
        if let Some(v) = &self.mlp_hidden {
            s.mlp_hidden = v.clone();
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            s.learning_rate = v;
        }
        s
    }
}

/// Which VAE a single-model study uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub source: SourceConfig,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub vae: VaeSection,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default = "default_qsar")]
    pub qsar: Vec<QsarEntry>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_replicates")]
    pub replicate_seeds: Vec<u64>,
    #[serde(default = "default_embed_mode")]
    pub embed_mode: EmbedMode,
    #[serde(default = "default_embedding_replicates")]
    pub embedding_replicates: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_subset_fractions")]
    pub subset_fractions: Vec<f64>,
    #[serde(default)]
    pub size_matched_n: Option<usize>,
    #[serde(default = "default_cluster_ks")]
    pub cluster_ks: Vec<usize>,
}

fn default_variant() -> Variant {
    Variant::Joint
}

impl ExperimentConfig {
    /// Parses JSON, applying `key.path=value` overrides first. Override
    /// values are parsed as JSON when possible and taken as strings otherwise.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        Self::parse(text, overrides, None)
    }

    /// Reads a config file. Relative input paths are taken relative to the
    /// file's directory; `output_dir` stays relative to the working directory.
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, overrides, path.parent())
    }

    fn parse(text: &str, overrides: &[(String, String)], base: Option<&Path>) -> Result<Self, PipelineError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("invalid JSON: {e}")))?;
        for (path, raw) in overrides {
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, path, val)?;
        }
        let mut cfg: Self = serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(base) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.source.path);
            if let Some(v) = cfg.source.validation_path.as_mut() {
                fix(v);
            }
            if let Some(t) = cfg.target.as_mut() {
                fix(&mut t.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("experiment name {:?} must be a plain directory name", self.name));
        }
        if !(self.source.subset_fraction > 0.0 && self.source.subset_fraction <= 1.0) {
            return bad("source.subset_fraction must lie in (0, 1]".into());
        }
        let mut seeds = self.replicate_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.replicate_seeds.len() || seeds.is_empty() {
            return bad("replicate_seeds must be non-empty and distinct".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.subset_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("subset_fractions must lie in (0, 1]".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        let mut files = vec![&self.source.path];
        files.extend(&self.source.validation_path);
        if let Some(t) = &self.target {
            files.push(&t.path);
        }
        for f in files {
            if !f.is_file() {
                return bad(format!("input file {} does not exist", f.display()));
            }
        }
        Ok(())
    }
}

fn set_path(v: &mut Value, path: &str, val: Value) -> Result<(), PipelineError> {
    let mut cur = v;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| PipelineError::Config(format!("cannot set {path}: {p} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), val);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(PipelineError::Config("empty override path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(dir: &std::path::Path) -> String {
        let src = dir.join("src.csv");
        std::fs::write(&src, "smiles\nCCO\n").unwrap();
        format!(r#"{{"name": "t", "source": {{"path": {:?}}}}}"#, src.to_str().unwrap())
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_json(&base(dir.path()), &[]).unwrap();
        assert_eq!(c.folds, 10);
        assert_eq!(c.replicate_seeds, vec![0, 1, 2]);
        assert_eq!(c.vae.arch, Arch::Pvae);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.selection.k, 3);
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let o = vec![
            ("train.epochs".to_string(), "3".to_string()),
            ("vae.arch".to_string(), "CVAE".to_string()),
            ("seed".to_string(), "42".to_string()),
        ];
        let c = ExperimentConfig::from_json(&base(dir.path()), &o).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.vae.arch, Arch::Cvae);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn missing_input_is_config_error() {
        let e = ExperimentConfig::from_json(r#"{"name": "t", "source": {"path": "/nonexistent.csv"}}"#, &[]);
        assert!(matches!(e, Err(PipelineError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let o = vec![("replicate_seeds".to_string(), "[1, 1]".to_string())];
        assert!(ExperimentConfig::from_json(&base(dir.path()), &o).is_err());
    }
}
