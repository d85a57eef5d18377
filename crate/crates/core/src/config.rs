//! `key = value` run configuration.
//!
//! Keys are namespaced by section: `synth.*`, `embed.*`, `model.*`,
//! `analysis.*`, plus a top-level `seed`. Blank lines and `#` comments are
//! ignored. Later lines override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;

use crate::analysis::ForestConfig;
use crate::embed::{EmbeddingProviderConfig, ProviderKind};
use crate::error::{Error, Result};
use crate::io::read_to_string;
use crate::model::ModelConfig;
use crate::retrieval::GpsSimilarity;
use crate::synth::SynthConfig;

/// Offsets added to the run seed for each stage.
pub const SYNTH_SEED_OFFSET: u64 = 0;
pub const MODEL_SEED_OFFSET: u64 = 100;
pub const IMPORTANCE_SEED_OFFSET: u64 = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub srs_k: usize,
    pub importance_l: usize,
    pub trials: usize,
    pub forest: ForestConfig,
    pub gps_similarity: GpsSimilarity,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            srs_k: 10,
            importance_l: 64,
            trials: 30,
            forest: ForestConfig::default(),
            gps_similarity: GpsSimilarity::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub embed: EmbeddingProviderConfig,
    pub model: ModelConfig,
    pub analysis: AnalysisConfig,
}

/// Learning rate of the desk-scale preset; 60 epochs over a few thousand
/// pairs underfit at the Adam default.
pub const DESK_LR: f64 = 0.005;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            embed: EmbeddingProviderConfig::default(),
            model: ModelConfig {
                lr: DESK_LR,
                ..ModelConfig::default()
            },
            analysis: AnalysisConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, i + 1, format!("expected `key = value`, got `{raw}`")))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::format(path, i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }

    /// Rebuilds a config from a manifest snapshot.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.seed = num(key, value)?;
            return Ok(());
        }
        let (section, rest) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        match section {
            "synth" => self.synth.set(rest, value),
            "model" => self.model.set(rest, value),
            "embed" => {
                match rest {
                    "kind" => {
                        self.embed.kind = match value {
                            "hash_tokens" => ProviderKind::HashTokens,
                            "precomputed_file" => ProviderKind::PrecomputedFile,
                            _ => return Err(Error::Config(format!("unknown embed.kind `{value}`"))),
                        }
                    }
                    "text_dim" => self.embed.text_dim = num(key, value)?,
                    "image_dim" => self.embed.image_dim = num(key, value)?,
                    "seed" => self.embed.seed = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
                Ok(())
            }
            "analysis" => {
                let a = &mut self.analysis;
                match rest {
                    "srs_k" => a.srs_k = num(key, value)?,
                    "importance_l" => a.importance_l = num(key, value)?,
                    "trials" => a.trials = num(key, value)?,
                    "trees" => a.forest.trees = num(key, value)?,
                    "max_depth" => a.forest.max_depth = num(key, value)?,
                    "min_samples_split" => a.forest.min_samples_split = num(key, value)?,
                    "gps_similarity" => a.gps_similarity = value.parse()?,
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown key {key}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        if self.embed.text_dim != self.model.text_dim || self.embed.image_dim != self.model.image_dim {
            return Err(Error::Config(format!(
                "embed dims ({}, {}) disagree with model dims ({}, {})",
                self.embed.image_dim, self.embed.text_dim, self.model.image_dim, self.model.text_dim
            )));
        }
        if self.synth.image_dim != self.embed.image_dim {
            return Err(Error::Config(format!(
                "synth.image_dim {} != embed.image_dim {}",
                self.synth.image_dim, self.embed.image_dim
            )));
        }
        if self.analysis.srs_k == 0 || self.analysis.importance_l == 0 || self.analysis.trials == 0 {
            return Err(Error::Config("analysis.srs_k, importance_l and trials must be > 0".into()));
        }
        if self.analysis.forest.trees == 0 {
            return Err(Error::Config("analysis.trees must be > 0".into()));
        }
        Ok(())
    }

    /// Applies the run seed to every stage.
    pub fn seeded(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.synth.seed = self.seed.wrapping_add(SYNTH_SEED_OFFSET);
        cfg.model.seed = self.seed.wrapping_add(MODEL_SEED_OFFSET);
        cfg
    }

    pub fn importance_seed(&self) -> u64 {
        self.seed.wrapping_add(IMPORTANCE_SEED_OFFSET)
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".to_string(), self.seed.to_string());
        m.extend(self.synth.to_pairs());
        m.extend(self.model.to_pairs());
        let kind = match self.embed.kind {
            ProviderKind::HashTokens => "hash_tokens",
            ProviderKind::PrecomputedFile => "precomputed_file",
        };
        m.insert("embed.kind".into(), kind.into());
        m.insert("embed.text_dim".into(), self.embed.text_dim.to_string());
        m.insert("embed.image_dim".into(), self.embed.image_dim.to_string());
        m.insert("embed.seed".into(), self.embed.seed.to_string());
        let a = &self.analysis;
        m.insert("analysis.srs_k".into(), a.srs_k.to_string());
        m.insert("analysis.importance_l".into(), a.importance_l.to_string());
        m.insert("analysis.trials".into(), a.trials.to_string());
        m.insert("analysis.trees".into(), a.forest.trees.to_string());
        m.insert("analysis.max_depth".into(), a.forest.max_depth.to_string());
        m.insert("analysis.min_samples_split".into(), a.forest.min_samples_split.to_string());
        m.insert("analysis.gps_similarity".into(), a.gps_similarity.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let text = "# demo\nseed = 7\nsynth.clusters = 40  # smaller\nmodel.gate = fixed\nanalysis.srs_k=5\n";
        let cfg = RunConfig::parse(text, Path::new("demo.cfg")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.synth.clusters, 40);
        assert_eq!(cfg.model.gate.to_string(), "fixed");
        assert_eq!(cfg.analysis.srs_k, 5);
        let seeded = cfg.seeded();
        assert_eq!(seeded.synth.seed, 7);
        assert_eq!(seeded.model.seed, 107);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("model.lr", "0.003").unwrap();
        cfg.set("synth.lat_range", "-40,-10").unwrap();
        cfg.set("analysis.gps_similarity", "neg_euclidean").unwrap();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        match RunConfig::parse("seed = 1\nbogus\n", Path::new("c.cfg")) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("model.nope = 1\n", Path::new("c.cfg")) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("embed.text_dim = 32\n", Path::new("c.cfg")).is_err());
    }
}
