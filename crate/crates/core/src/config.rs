//! Experiment files.
//!
//! An experiment is a TOML document with `[model]`, `[task]` and `[train]`
//! tables plus top-level `seeds` and `out_dir`. Optional `[ablation]` and
//! `[analysis]` tables configure the corresponding commands. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockOrdering, ModelConfig};
use crate::train::{SyntheticTask, TrainConfig, Variant};

/// Environment variable that replaces `out_dir`.
pub const OUT_DIR_ENV: &str = "MAN_OUT_DIR";
/// File name of the resolved configuration inside an output directory.
pub const SNAPSHOT_FILE: &str = "experiment.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    /// Preset names or `>`-separated chains.
    #[serde(default = "AblationSettings::default_orderings")]
    pub orderings: Vec<String>,
    /// Append the two static-mask presets.
    #[serde(default)]
    pub smans: bool,
}

impl AblationSettings {
    fn default_orderings() -> Vec<String> {
        ["C1", "C2", "C3", "C4", "C5"].map(String::from).to_vec()
    }

    /// Resolved variants, static-mask rows last.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut names = self.orderings.clone();
        if self.smans {
            for s in ["SMAN1", "SMAN2"] {
                if !names.iter().any(|n| n == s) {
                    names.push(s.to_string());
                }
            }
        }
        names
            .iter()
            .map(|n| {
                Ok(Variant {
                    label: n.clone(),
                    ordering: n.parse::<BlockOrdering>()?,
                })
            })
            .collect()
    }
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            orderings: Self::default_orderings(),
            smans: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    #[serde(default = "AnalysisSettings::default_windows")]
    pub windows: Vec<usize>,
    /// One-based layers; empty means all.
    #[serde(default)]
    pub layers: Vec<usize>,
}

impl AnalysisSettings {
    fn default_windows() -> Vec<usize> {
        vec![1, 2, 4]
    }
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            windows: Self::default_windows(),
            layers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "ExperimentConfig::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "ExperimentConfig::default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationSettings,
    #[serde(default)]
    pub analysis: AnalysisSettings,
}

impl ExperimentConfig {
    fn default_seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }

    fn default_out_dir() -> PathBuf {
        PathBuf::from("runs")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.train.seed != 0 {
            return Err(Error::Config("set run seeds with the top-level `seeds` list, not `train.seed`".into()));
        }
        if self.task.vocab() > self.model.vocab {
            return Err(Error::Config(format!(
                "task needs vocab {}, model.vocab is {}",
                self.task.vocab(),
                self.model.vocab
            )));
        }
        if self.task.max_len + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "task.max_len {} needs model.max_len of at least {}",
                self.task.max_len,
                self.task.max_len + 1
            )));
        }
        self.ablation.variants()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_note(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    /// `out_dir`, unless [`OUT_DIR_ENV`] is set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone())
    }

    /// Training settings for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Writes the snapshot into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SNAPSHOT_FILE), self.to_toml())?;
        Ok(())
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    span.map(|s| {
        let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
        format!(" (line {line})")
    })
    .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seeds = [4, 5, 6]
out_dir = "out/copy"

[model]
vocab = 10
d_model = 16
heads = 2
ordering = "C5"
max_len = 12

[task]
kind = "copy"
symbols = 8
min_len = 3
max_len = 10

[train]
steps = 50
batch = 8
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.seeds, vec![4, 5, 6]);
        assert_eq!(cfg.train.warmup, 100);
        assert_eq!(cfg.analysis.windows, vec![1, 2, 4]);
        assert_eq!(cfg.ablation.variants().unwrap().len(), 5);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = EXAMPLE.replace("batch = 8", "batch = 8\nbatchsize = 8");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("batchsize")), "{err}");
        let bad = EXAMPLE.replace("d_model = 16", "dmodel = 16");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_ordering_lists_presets() {
        let bad = EXAMPLE.replace("\"C5\"", "\"C9\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("C1") && err.contains("SMAN2"), "{err}");
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let bad = EXAMPLE.replace("vocab = 10", "vocab = 6");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = EXAMPLE.replace("max_len = 12", "max_len = 10");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = EXAMPLE.replace("batch = 8", "batch = 8\nseed = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn smans_append_static_rows() {
        let s = AblationSettings {
            orderings: vec!["C2".into(), "C5".into()],
            smans: true,
        };
        let labels: Vec<String> = s.variants().unwrap().into_iter().map(|v| v.label).collect();
        assert_eq!(labels, ["C2", "C5", "SMAN1", "SMAN2"]);
    }
}
