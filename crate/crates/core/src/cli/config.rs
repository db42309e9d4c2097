//! The JSON run configuration for `train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitMode, UNK_ID};
use crate::model::{Ablation, ModelConfig};
use crate::training::TrainConfig;

fn default_split() -> SplitMode {
    SplitMode::Holdout80_20
}

fn default_min_frequency() -> usize {
    1
}

fn default_model() -> ModelConfig {
    ModelConfig::new(0)
}

/// Paths are resolved against the directory of the configuration file.
/// Top-level `ablation` and `seed`, when present, override the ones in the
/// `model` and `train` sections; the seed also drives initialization and the
/// dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Canonical records (NDJSON).
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<PathBuf>,
    /// Warm start: parameters and vocabulary are taken from this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(default = "default_split")]
    pub split_mode: SplitMode,
    /// Which fold of `kfold5` to train on; must be 0 for other modes.
    #[serde(default)]
    pub fold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_min_frequency")]
    pub min_frequency: usize,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses with the path of the offending field in the error message.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.into_inner().to_string()
            } else {
                format!("at `{path}`: {}", e.into_inner())
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.corpus);
        join(&mut self.out_dir);
        self.regions.iter_mut().for_each(join);
        self.checkpoint.iter_mut().for_each(join);
    }

    /// Folds top-level overrides into the sections.
    pub fn apply_overrides(&mut self) {
        if let Some(a) = self.ablation {
            self.model.ablation = a;
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Value and file checks done before any work starts.
    pub fn validate(&self) -> Result<(), String> {
        let mut probe = self.model.clone();
        if probe.vocab_size == 0 {
            probe.vocab_size = UNK_ID + 1;
        }
        probe.validate().map_err(|e| format!("model: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        if self.min_frequency == 0 {
            return Err("min_frequency must be at least 1".into());
        }
        let fold_limit = if self.split_mode == SplitMode::Kfold5 { 5 } else { 1 };
        if self.fold >= fold_limit {
            return Err(format!("fold {} out of range for split_mode {}", self.fold, self.split_mode));
        }
        require_file("corpus", &self.corpus)?;
        if let Some(p) = &self.checkpoint {
            require_file("checkpoint", p)?;
        }
        match &self.regions {
            Some(p) => require_file("regions", p)?,
            None if self.model.ablation.uses_visual() => {
                return Err(format!("ablation {} needs a `regions` file", self.model.ablation));
            }
            None => {}
        }
        if self.out_dir.is_file() {
            return Err(format!("out_dir {} is a file", self.out_dir.display()));
        }
        Ok(())
    }
}

pub(crate) fn require_file(what: &str, path: &Path) -> Result<(), String> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("{what} file {} does not exist", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_report_their_path() {
        let e = RunConfig::from_json(r#"{"corpus":"c","out_dir":"o","model":{"d_modle":8}}"#).unwrap_err();
        assert!(e.contains("model"), "{e}");
        assert!(e.contains("d_modle"), "{e}");
        let e = RunConfig::from_json(r#"{"corpus":"c","out_dir":"o","train":{"lr":"x"}}"#).unwrap_err();
        assert!(e.starts_with("at `train.lr`"), "{e}");
        let e = RunConfig::from_json(r#"{"corpus":"c","out_dir":"o","extra":1}"#).unwrap_err();
        assert!(e.contains("extra"), "{e}");
    }

    #[test]
    fn defaults_and_overrides() {
        let mut c = RunConfig::from_json(r#"{"corpus":"c","out_dir":"o","ablation":"T","seed":9}"#).unwrap();
        assert_eq!(c.split_mode, SplitMode::Holdout80_20);
        assert_eq!(c.model.vocab_size, 0);
        c.apply_overrides();
        assert_eq!(c.model.ablation, Ablation::T);
        assert_eq!(c.train.seed, 9);
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.corpus, PathBuf::from("/base/c"));
    }

    #[test]
    fn validation_checks_files_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        std::fs::write(&corpus, "").unwrap();
        let mut c = RunConfig::from_json(r#"{"corpus":"c.jsonl","out_dir":"o","ablation":"T"}"#).unwrap();
        c.resolve_paths(dir.path());
        c.apply_overrides();
        assert!(c.validate().is_ok());
        c.model.ablation = Ablation::TV;
        assert!(c.validate().unwrap_err().contains("regions"));
        c.model.ablation = Ablation::T;
        c.model.n_heads = 3;
        assert!(c.validate().unwrap_err().starts_with("model:"));
        c.model.n_heads = 8;
        c.corpus = dir.path().join("missing");
        assert!(c.validate().unwrap_err().contains("corpus"));
    }
}
