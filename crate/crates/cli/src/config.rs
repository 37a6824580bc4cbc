//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use imoe_core::bench::BenchConfig;
use imoe_core::model::ModelConfig;
use imoe_core::training::TrainConfig;
use imoe_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths are taken from the directory of the config file.
    pub corpus: PathBuf,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: PathBuf::from("data/corpus.txt"), train_fraction: 0.9 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Parses `path`, naming the offending key on any schema error, and
    /// anchors the corpus path at the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if cfg.data.corpus.is_relative() {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.data.corpus = base.join(&cfg.data.corpus);
        }
        if let Ok(abs) = std::path::absolute(&cfg.data.corpus) {
            cfg.data.corpus = abs;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            Error::Config(format!("at `{at}`: {}", e.into_inner()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.block_size)?;
        self.bench.validate()?;
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("data.train_fraction must lie in (0, 1), got {f}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}
