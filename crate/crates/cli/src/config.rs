//! Pipeline configuration: one TOML file, overridable with `--set key=value`.
//!
//! Every section and key is optional; see `configs/toy.toml` for the full
//! schema with defaults. Relative paths resolve against the config file's
//! directory (or the working directory without a config file).

use std::path::{Path, PathBuf};

use cadenza::attribution::Level;
use cadenza::model::{ModelConfig, OutputFn, Precision, TrainHyper};
use cadenza::royalty::{PoolConfig, RoyaltyConfig, WeightPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every random choice in the pipeline derives from this.
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub model: ModelSection,
    pub train: TrainHyper,
    pub generate: GenerateConfig,
    pub attribution: AttributionConfig,
    pub evaluation: EvaluationConfig,
    pub royalty: RoyaltySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            ingest: IngestConfig::default(),
            model: ModelSection::default(),
            train: TrainHyper {
                epochs: 20,
                learning_rate: 3e-3,
                ..TrainHyper::default()
            },
            generate: GenerateConfig::default(),
            attribution: AttributionConfig::default(),
            evaluation: EvaluationConfig::default(),
            royalty: RoyaltySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub midi_dir: PathBuf,
    pub usage_log: PathBuf,
    pub revenue: PathBuf,
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub generated_dir: PathBuf,
    pub scores_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub statement_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            midi_dir: "data/toy_midi".into(),
            usage_log: "data/usage.jsonl".into(),
            revenue: "data/revenue.jsonl".into(),
            corpus_dir: "out/corpus".into(),
            checkpoint_dir: "out/checkpoints".into(),
            generated_dir: "out/generated".into(),
            scores_dir: "out/scores".into(),
            eval_dir: "out/eval".into(),
            statement_dir: "out/statements".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.midi_dir,
            &mut self.usage_log,
            &mut self.revenue,
            &mut self.corpus_dir,
            &mut self.checkpoint_dir,
            &mut self.generated_dir,
            &mut self.scores_dir,
            &mut self.eval_dir,
            &mut self.statement_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Places every output directory under `root`.
    pub fn rebase_outputs(&mut self, root: &Path) {
        self.corpus_dir = root.join("corpus");
        self.checkpoint_dir = root.join("checkpoints");
        self.generated_dir = root.join("generated");
        self.scores_dir = root.join("scores");
        self.eval_dir = root.join("eval");
        self.statement_dir = root.join("statements");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Tokens per training work; also the model context length.
    pub window_len: usize,
    /// Trailing windows of each file held out as generation prompts.
    pub holdout_per_file: usize,
    /// Cap on training windows taken from each file.
    pub max_train_windows_per_file: Option<usize>,
    /// Leading tokens of a held-out window used as the prompt.
    pub prompt_len: usize,
    pub velocity_on_change: bool,
    pub sustain_pedal: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            window_len: 64,
            holdout_per_file: 3,
            max_train_windows_per_file: Some(8),
            prompt_len: 32,
            velocity_on_change: true,
            sustain_pedal: false,
        }
    }
}

/// Architecture; the context length comes from `ingest.window_len` and the
/// seed from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(64);
        ModelSection {
            embed_dim: desk.embed_dim,
            num_layers: desk.num_layers,
            num_heads: desk.num_heads,
            hidden_dim: desk.hidden_dim,
            precision: desk.precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// New tokens generated after each prompt.
    pub length: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            length: 32,
            temperature: 1.0,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Ensemble size.
    pub members: usize,
    /// Fraction of the corpus each member trains on.
    pub member_fraction: f64,
    pub projection_dim: usize,
    pub lambda: Option<f64>,
    pub output_fn: OutputFn,
    pub features_on_member_subset: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            members: 10,
            member_fraction: 0.5,
            projection_dim: 512,
            lambda: None,
            output_fn: OutputFn::default(),
            features_on_member_subset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub subsets: usize,
    /// Fraction of works removed per evaluation subset.
    pub fraction: f64,
    /// Rank buckets for style similarity.
    pub buckets: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            subsets: 40,
            fraction: 0.5,
            buckets: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoyaltySection {
    /// Which score matrix weights are derived from.
    pub level: Level,
    pub platform_cut: f64,
    pub min_seconds: f64,
    pub pools: PoolConfig,
    pub weight_policy: WeightPolicy,
}

impl Default for RoyaltySection {
    fn default() -> Self {
        let r = RoyaltyConfig::default();
        RoyaltySection {
            level: Level::Segment,
            platform_cut: r.platform_cut,
            min_seconds: r.min_seconds,
            pools: r.pools,
            weight_policy: r.weight_policy,
        }
    }
}

impl RoyaltySection {
    pub fn to_config(&self) -> RoyaltyConfig {
        RoyaltyConfig {
            pools: self.pools.clone(),
            platform_cut: self.platform_cut,
            min_seconds: self.min_seconds,
            weight_policy: self.weight_policy.clone(),
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 388,
            context_length: self.ingest.window_len,
            embed_dim: self.model.embed_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            hidden_dim: self.model.hidden_dim,
            seed,
            precision: self.model.precision,
        }
    }

    /// Reads `path` (if any), applies `overrides` (`dotted.key=value`, value
    /// parsed as TOML with a bare-string fallback) and resolves paths.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut doc, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let doc: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (doc, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: PipelineConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.paths.resolve(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.ingest.prompt_len == 0 || self.ingest.prompt_len > self.ingest.window_len {
            return bad(format!(
                "ingest.prompt_len {} must be in 1..={}",
                self.ingest.prompt_len, self.ingest.window_len
            ));
        }
        if self.generate.length == 0 {
            return bad("generate.length must be positive".into());
        }
        if self.attribution.members == 0 {
            return bad("attribution.members must be positive".into());
        }
        if !(self.attribution.member_fraction > 0.0 && self.attribution.member_fraction <= 1.0) {
            return bad(format!("attribution.member_fraction {} outside (0, 1]", self.attribution.member_fraction));
        }
        self.model_config(0).validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win() {
        let c = PipelineConfig::load(
            None,
            &[
                "evaluation.fraction=0.25".into(),
                "seed=9".into(),
                "attribution.output_fn=log_prob".into(),
                "paths.midi_dir=somewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.evaluation.fraction, 0.25);
        assert_eq!(c.seed, 9);
        assert_eq!(c.attribution.output_fn, OutputFn::LogProb);
        assert_eq!(c.paths.midi_dir, PathBuf::from("somewhere"));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(PipelineConfig::load(None, &["evaluation.nope=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["model.num_heads=5".into()]).is_err());
        assert!(PipelineConfig::load(None, &["novalue".into()]).is_err());
    }
}
