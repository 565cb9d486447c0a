use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, VaeConfig, VaeError, VaeModel};
use crate::chem_data::TokenVocab;
use crate::neural::ParamStore;
use crate::stats::{mean, population_std};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Fits on `values`; a zero spread falls back to 1 so the column
    /// is only centered.
    pub fn fit(values: &[f64]) -> Self {
        let sd = population_std(values);
        Self {
            mean: mean(values),
            std: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

const CONFIG: &str = "config.json";
const VOCAB: &str = "vocab.json";
const PARAMS: &str = "params.bin";
const MANIFEST: &str = "params.json";
const NORMALIZERS: &str = "normalizers.json";

pub fn save_bundle(model: &VaeModel, dir: &Path) -> Result<(), VaeError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&model.config)?)?;
    model.vocab.save(&dir.join(VOCAB))?;
    model.params.save(&dir.join(PARAMS), &dir.join(MANIFEST))?;
    fs::write(dir.join(NORMALIZERS), serde_json::to_string_pretty(&model.normalizers)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<VaeModel, VaeError> {
    let config: VaeConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG))?)?;
    let vocab = TokenVocab::load(&dir.join(VOCAB))?;
    let mut model = build_model(&config, &vocab)?;
    let stored = ParamStore::load(&dir.join(PARAMS), &dir.join(MANIFEST))?;
    model.load_params(&stored)?;
    model.normalizers = serde_json::from_str(&fs::read_to_string(dir.join(NORMALIZERS))?)?;
    if model.normalizers.is_some() != model.has_predictor() {
        return Err(VaeError::Config("normalizers must be present exactly when a predictor is".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::Arch;

    #[test]
    fn normalizer_round_trip() {
        let n = Normalizer::fit(&[1.0, 2.0, 3.0]);
        assert!((n.apply(2.0)).abs() < 1e-12);
        assert!((n.invert(n.apply(7.5)) - 7.5).abs() < 1e-12);
        assert_eq!(Normalizer::fit(&[4.0, 4.0]).std, 1.0);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = TokenVocab::build(&["CCO", "CN"]).unwrap();
        let mut c = VaeConfig::desk(Arch::Pvae, 8).with_predictor(&["p"]);
        c.hidden_dim = 5;
        c.latent_dim = 3;
        let mut m = build_model(&c, &vocab).unwrap();
        m.normalizers = Some(vec![Normalizer { mean: 1.0, std: 2.0 }]);
        save_bundle(&m, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.normalizers, m.normalizers);
        assert_eq!(back.config, m.config);
    }
}
