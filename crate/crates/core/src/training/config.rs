use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::encoding::EncodingConfig;
use crate::network::{MaskerConfig, ModelConfig, POLICY_SIZE};

/// Prefix of environment variables that override config keys
/// (`IIMAP_LAMBDA_MASK=0.01`).
pub const ENV_PREFIX: &str = "IIMAP_";

/// Every setting of a distillation run, as one flat key-value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub residual_blocks: usize,
    pub filters: usize,
    pub value_head: bool,
    /// Block whose output feeds an auxiliary in-check readout; unset for none.
    pub aux_in_check_layer: Option<usize>,
    pub history_length: usize,
    pub masker_hidden: usize,
    pub masker_init_bias: f32,
    pub lambda_mask: f32,
    pub lr_net: f32,
    pub lr_masker: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Micro-batches per step; their gradients are summed in a fixed order.
    pub grad_chunks: usize,
    pub value_weight: f32,
    pub aux_weight: f32,
    /// Share of positions (by hash) held out for evaluation, in percent.
    pub heldout_percent: u64,
    /// Parameter initialisation.
    pub seed: u64,
    /// Batch selection and mask noise.
    pub data_seed: u64,
    /// Mask noise during held-out evaluation.
    pub eval_seed: u64,
    pub teacher_temperature: f64,
    pub games: usize,
    pub max_plies: usize,
    pub corpus_seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            residual_blocks: 4,
            filters: 64,
            value_head: false,
            aux_in_check_layer: None,
            history_length: 1,
            masker_hidden: 32,
            masker_init_bias: 2.0,
            lambda_mask: 0.001,
            lr_net: 1e-3,
            lr_masker: 1e-3,
            batch_size: 32,
            steps: 2000,
            checkpoint_every: 500,
            grad_chunks: 1,
            value_weight: 1.0,
            aux_weight: 1.0,
            heldout_percent: 10,
            seed: 1,
            data_seed: 2,
            eval_seed: 3,
            teacher_temperature: 1.0,
            games: 400,
            max_plies: 120,
            corpus_seed: 7,
        }
    }
}

/// Config keys, in file order.
pub const KEYS: &[&str] = &[
    "residual_blocks",
    "filters",
    "value_head",
    "aux_in_check_layer",
    "history_length",
    "masker_hidden",
    "masker_init_bias",
    "lambda_mask",
    "lr_net",
    "lr_masker",
    "batch_size",
    "steps",
    "checkpoint_every",
    "grad_chunks",
    "value_weight",
    "aux_weight",
    "heldout_percent",
    "seed",
    "data_seed",
    "eval_seed",
    "teacher_temperature",
    "games",
    "max_plies",
    "corpus_seed",
];

const FLOAT_KEYS: &[&str] = &[
    "masker_init_bias",
    "lambda_mask",
    "lr_net",
    "lr_masker",
    "value_weight",
    "aux_weight",
    "teacher_temperature",
];
const BOOL_KEYS: &[&str] = &["value_head"];

/// Parses a textual override into the TOML type of `key`.
fn parse_value(key: &str, raw: &str) -> Result<toml::Value, TrainingError> {
    let bad = |what: &str| TrainingError::Config(format!("{key}: expected {what}, got {raw:?}"));
    if FLOAT_KEYS.contains(&key) {
        raw.trim().parse::<f64>().map(toml::Value::Float).map_err(|_| bad("a number"))
    } else if BOOL_KEYS.contains(&key) {
        raw.trim().parse::<bool>().map(toml::Value::Boolean).map_err(|_| bad("true or false"))
    } else {
        raw.trim().parse::<i64>().map(toml::Value::Integer).map_err(|_| bad("an integer"))
    }
}

impl TrainRunConfig {
    pub fn from_toml_str(text: &str) -> Result<TrainRunConfig, TrainingError> {
        let cfg: TrainRunConfig = toml::from_str(text).map_err(|e| TrainingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Layers defaults, then the file, then environment variables, then
    /// explicit overrides (highest precedence).
    pub fn resolve(
        file: Option<&Path>,
        env: &BTreeMap<String, String>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<TrainRunConfig, TrainingError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| TrainingError::Config(format!("{}: {e}", path.display())))?;
                let t: toml::Table = toml::from_str(&text)
                    .map_err(|e| TrainingError::Config(format!("{}: {e}", path.display())))?;
                for k in t.keys() {
                    if !KEYS.contains(&k.as_str()) {
                        return Err(TrainingError::Config(format!("{}: unknown key {k}", path.display())));
                    }
                }
                t
            }
            None => toml::Table::new(),
        };
        for key in KEYS {
            if let Some(raw) = env.get(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                table.insert(key.to_string(), parse_value(key, raw)?);
            }
        }
        for (key, raw) in overrides {
            if !KEYS.contains(&key.as_str()) {
                return Err(TrainingError::Config(format!("unknown key {key}")));
            }
            table.insert(key.clone(), parse_value(key, raw)?);
        }
        // Integers are accepted where floats are expected.
        for key in FLOAT_KEYS {
            if let Some(toml::Value::Integer(i)) = table.get(*key) {
                let f = *i as f64;
                table.insert(key.to_string(), toml::Value::Float(f));
            }
        }
        let cfg: TrainRunConfig = table.try_into().map_err(|e: toml::de::Error| TrainingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |m: String| Err(TrainingError::Config(m));
        if !(self.lambda_mask >= 0.0) {
            return fail(format!("lambda_mask must be >= 0, got {}", self.lambda_mask));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.grad_chunks == 0 || self.grad_chunks > self.batch_size {
            return fail("grad_chunks must be between 1 and batch_size".into());
        }
        if !(self.lr_net > 0.0 && self.lr_masker > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.heldout_percent == 0 || self.heldout_percent >= 100 {
            return fail("heldout_percent must be between 1 and 99".into());
        }
        if !(self.teacher_temperature > 0.0) {
            return fail("teacher_temperature must be positive".into());
        }
        self.model_config()
            .validate()
            .map_err(|e| TrainingError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            history_length: self.history_length,
            ..EncodingConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            residual_blocks: self.residual_blocks,
            filters: self.filters,
            policy_index_size: POLICY_SIZE,
            value_head: self.value_head,
            aux_in_check_layer: self.aux_in_check_layer,
            encoding: self.encoding(),
        }
    }

    pub fn masker_config(&self) -> MaskerConfig {
        MaskerConfig {
            hidden: self.masker_hidden,
            init_bias: self.masker_init_bias,
            encoding: self.encoding(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_cover_every_field() {
        let mut cfg = TrainRunConfig::default();
        cfg.aux_in_check_layer = Some(1);
        let table: toml::Table = toml::from_str(&cfg.to_toml_string()).unwrap();
        let mut names: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut keys = KEYS.to_vec();
        names.sort();
        keys.sort();
        assert_eq!(names, keys);
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lambda_mask = 0.01\nsteps = 10\nbatch_size = 8\nlr_net = 1\n").unwrap();
        let env: BTreeMap<String, String> = [
            ("IIMAP_STEPS".to_string(), "20".to_string()),
            ("IIMAP_BATCH_SIZE".to_string(), "16".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ]
        .into();
        let flags: BTreeMap<String, String> = [("steps".to_string(), "30".to_string())].into();
        let cfg = TrainRunConfig::resolve(Some(&path), &env, &flags).unwrap();
        assert_eq!(cfg.steps, 30);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lambda_mask, 0.01);
        assert_eq!(cfg.lr_net, 1.0);
        assert_eq!(cfg.filters, 64);

        let bad: BTreeMap<String, String> = [("bogus".to_string(), "1".to_string())].into();
        assert!(TrainRunConfig::resolve(None, &BTreeMap::new(), &bad).is_err());
        let neg: BTreeMap<String, String> = [("lambda_mask".to_string(), "-1".to_string())].into();
        assert!(TrainRunConfig::resolve(None, &BTreeMap::new(), &neg).is_err());
        let missing = TrainRunConfig::resolve(Some(Path::new("/nonexistent/x.toml")), &env, &flags);
        assert!(matches!(missing, Err(TrainingError::Config(m)) if m.contains("x.toml")));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainRunConfig::default();
        assert_eq!(TrainRunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
