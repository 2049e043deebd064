//! Declarative run configuration: JSON file, then flag overrides.

use std::path::{Path, PathBuf};

use gptrec::data::{InputFormat, ParseOptions};
use gptrec::generate::Strategy;
use gptrec::model::ModelConfig;
use gptrec::tokeniser::{CollisionPolicy, TokeniserConfig};
use gptrec::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DATA_ROOT_ENV: &str = "GPTREC_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub format: InputFormat,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub lenient: bool,
    pub validation_users: usize,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            input: None,
            format: InputFormat::DoubleColon,
            min_user_interactions: 3,
            min_item_interactions: 5,
            lenient: false,
            validation_users: 128,
            split_seed: 0,
        }
    }
}

impl DataSection {
    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            min_user_interactions: self.min_user_interactions,
            min_item_interactions: self.min_item_interactions,
            lenient: self.lenient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenModeSetting {
    OneToken,
    MultiToken,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokeniserSection {
    pub mode: TokenModeSetting,
    pub tokens_per_item: usize,
    pub values_per_token: usize,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub svd_seed: u64,
    pub svd_oversampling: usize,
    pub svd_power_iterations: usize,
    pub max_collision_retries: usize,
    pub collision_policy: CollisionPolicy,
}

impl Default for TokeniserSection {
    fn default() -> Self {
        TokeniserSection {
            mode: TokenModeSetting::OneToken,
            tokens_per_item: 4,
            values_per_token: 512,
            noise_std: 1e-5,
            noise_seed: 0,
            svd_seed: 0,
            svd_oversampling: 10,
            svd_power_iterations: 2,
            max_collision_retries: 8,
            collision_policy: CollisionPolicy::NearestFree,
        }
    }
}

impl TokeniserSection {
    pub fn tokeniser_config(&self) -> TokeniserConfig {
        TokeniserConfig {
            tokens_per_item: self.tokens_per_item,
            values_per_token: self.values_per_token,
            noise_std: self.noise_std,
            noise_seed: self.noise_seed,
            max_collision_retries: self.max_collision_retries,
            collision_policy: self.collision_policy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Defaults to 4·embed_dim.
    pub ffn_dim: Option<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 256,
            num_blocks: 3,
            num_heads: 4,
            ffn_dim: None,
            dropout_rate: 0.0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, max_positions: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_positions,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.embed_dim),
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub strategy: Strategy,
    /// List length for `recommend`.
    pub k: usize,
    /// Cutoffs reported by `evaluate`.
    pub ks: Vec<usize>,
    /// Largest cutoff of the Top-K / Next-K sweep.
    pub sweep_max_k: usize,
    pub num_candidates: usize,
    pub exclude_history: bool,
    pub mask_positions: bool,
    pub seed: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            strategy: Strategy::TopK,
            k: 10,
            ks: vec![1, 5, 10],
            sweep_max_k: 10,
            num_candidates: 50,
            exclude_history: true,
            mask_positions: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub tokeniser: TokeniserSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub generation: GenerationSection,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            tokeniser: TokeniserSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            generation: GenerationSection::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// One seed for every random component.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.split_seed = seed;
        self.tokeniser.noise_seed = seed;
        self.tokeniser.svd_seed = seed;
        self.train.seed = seed;
        self.generation.seed = seed;
    }

    /// Applies `section.field=value`; the value is read as JSON, falling
    /// back to a plain string.
    pub fn set_path(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("--set {assignment}: {e}")))?;
        Ok(())
    }

    /// Input path, resolved against the data-root variable when relative.
    pub fn input_path(&self) -> Result<PathBuf, CliError> {
        let input = self
            .data
            .input
            .clone()
            .ok_or_else(|| CliError::Usage("no input file: pass --input or set data.input".into()))?;
        Ok(match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) if input.is_relative() => PathBuf::from(root).join(input),
            _ => input,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.tokeniser.mode == TokenModeSetting::MultiToken {
            self.tokeniser
                .tokeniser_config()
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.model
            .model_config(1, 1)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let g = &self.generation;
        if g.k == 0 || g.ks.is_empty() || g.ks.contains(&0) || g.sweep_max_k == 0 {
            return bad("generation cutoffs must be >= 1".into());
        }
        if g.strategy == Strategy::TopKMultiToken && g.num_candidates < g.ks.iter().copied().max().unwrap_or(1).max(g.k) {
            return bad(format!("num_candidates {} is below the largest cutoff", g.num_candidates));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_value(&back).unwrap(), serde_json::to_value(&c).unwrap());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"max_epochs": 3}, "tokeniser": {"mode": "multi-token"}}"#).unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.tokeniser.mode, TokenModeSetting::MultiToken);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set_path("tokeniser.values_per_token=128").unwrap();
        c.set_path("generation.strategy=next_k").unwrap();
        c.set_path("train.adam_betas=[0.8,0.99]").unwrap();
        assert_eq!(c.tokeniser.values_per_token, 128);
        assert_eq!(c.generation.strategy, Strategy::NextK);
        assert_eq!(c.train.adam_betas, (0.8, 0.99));
        assert!(c.set_path("model.width=3").is_err());
        assert!(c.set_path("train.batch_size=many").is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        assert_eq!(
            [c.data.split_seed, c.tokeniser.noise_seed, c.tokeniser.svd_seed, c.train.seed, c.generation.seed],
            [42; 5]
        );
    }
}
