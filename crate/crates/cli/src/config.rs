//! Experiment configuration: TOML file, `AFM_*` environment overrides and
//! command-line flags, layered over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use afm_core::controller::EmitMode;
use afm_core::rl::RlConfig;
use afm_core::supervised::{MaskSource, SupervisedConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "AFM";

/// Keys that are absent from the defaults because they default to "unset".
const OPTIONAL_KEYS: &[&str] = &[
    "supervised.controller_samples_per_task",
    "supervised.evo.mutation_rate",
    "rl.evo.mutation_rate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub supervised: SupervisedConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            supervised: SupervisedConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub mnist_dir: PathBuf,
    pub fashion_dir: PathBuf,
    /// Training rows kept per dataset, 0 for all.
    pub train_limit: usize,
    /// Test rows kept per dataset, 0 for all.
    pub test_limit: usize,
    /// Dataset used by the single-task commands: `mnist` or `fashion`.
    pub task: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            fashion_dir: PathBuf::from("data/fashion"),
            train_limit: 0,
            test_limit: 0,
            task: "mnist".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Checkpoint read by `eval`; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub mask_source: MaskSource,
    pub emit_mode: EmitMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            mask_source: MaskSource::Controller,
            emit_mode: EmitMode::PerSample,
        }
    }
}

/// Values given on the command line; they win over file and environment.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn defaults_table() -> Table {
    match Value::try_from(ExperimentConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// Dotted paths of every leaf key.
fn leaf_paths(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) if !t.is_empty() => leaf_paths(t, &path, out),
            _ => out.push(path),
        }
    }
}

fn known_keys() -> Vec<String> {
    let mut keys = Vec::new();
    leaf_paths(&defaults_table(), "", &mut keys);
    keys.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    keys.push("eval.checkpoint".into());
    keys.sort();
    keys.dedup();
    keys
}

/// `supervised.sparsify.epochs` → `AFM_SUPERVISED_SPARSIFY_EPOCHS`.
pub fn env_name(path: &str) -> String {
    format!("{ENV_PREFIX}_{}", path.replace('.', "_").to_uppercase())
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut node = root;
    for p in parts {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("intermediate keys are tables");
    }
    node.insert(last.to_string(), value);
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the text of a config file, rejecting unknown keys.
pub fn parse_file_text(text: &str, origin: &Path) -> Result<Table, CliError> {
    let table: Table = toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", origin.display())))?;
    let known = known_keys();
    let mut present = Vec::new();
    leaf_paths(&table, "", &mut present);
    if let Some(bad) = present.iter().find(|p| !known.contains(p)) {
        return Err(CliError::config(format!("{}: unknown key `{bad}`", origin.display())));
    }
    Ok(table)
}

/// Resolves the configuration: defaults, then the file, then `AFM_*`
/// environment variables, then flags. Environment variables that match no
/// key are ignored.
pub fn resolve(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    flags: &FlagOverrides,
) -> Result<ExperimentConfig, CliError> {
    let mut table = defaults_table();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        merge(&mut table, parse_file_text(&text, path)?);
    }
    for key in known_keys() {
        if let Some(raw) = env.get(&env_name(&key)) {
            set_path(&mut table, &key, parse_scalar(raw));
        }
    }
    let mut cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &flags.out_dir {
        cfg.out_dir = out.clone();
    }
    if let Some(ckpt) = &flags.checkpoint {
        cfg.eval.checkpoint = Some(ckpt.clone());
    }
    cfg.supervised.validate().map_err(|e| CliError::config(e.to_string()))?;
    cfg.rl.validate().map_err(|e| CliError::config(e.to_string()))?;
    if !matches!(cfg.data.task.as_str(), "mnist" | "fashion") {
        return Err(CliError::config(format!("data.task `{}` must be mnist or fashion", cfg.data.task)));
    }
    Ok(cfg)
}

/// Renders a config as TOML that [`resolve`] reads back unchanged.
pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_text(text: &str, env: &[(&str, &str)], flags: FlagOverrides) -> Result<ExperimentConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        resolve(Some(&path), &env, &flags)
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let back = resolve_text(&to_toml(&cfg), &[], FlagOverrides::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = r#"
seed = 17
out_dir = "x/y"

[data]
train_limit = 500

[supervised]
epochs = 3
controller_samples_per_task = 200

[supervised.sparsify]
init_log_sigma2 = -8.0

[supervised.evo]
mutation_rate = 0.02

[rl]
copy_max_steps = 10
alphabet = "ABC"

[rl.controller]
hidden = [16, 8]

[eval]
mask_source = "oracle"
emit_mode = "majority-vote"
"#;
        let cfg = resolve_text(text, &[], FlagOverrides::default()).unwrap();
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.data.train_limit, 500);
        assert_eq!(cfg.supervised.epochs, 3);
        assert_eq!(cfg.supervised.controller_samples_per_task, Some(200));
        assert_eq!(cfg.supervised.sparsify.init_log_sigma2, -8.0);
        assert_eq!(cfg.supervised.evo.mutation_rate, Some(0.02));
        assert_eq!(cfg.rl.copy_max_steps, 10);
        assert_eq!(cfg.rl.controller.hidden, vec![16, 8]);
        assert_eq!(cfg.eval.mask_source, MaskSource::Oracle);
        assert_eq!(cfg.eval.emit_mode, EmitMode::MajorityVote);
        assert_eq!(cfg.supervised.batch_size, 64);
        let again = resolve_text(&to_toml(&cfg), &[], FlagOverrides::default()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn precedence_is_flag_env_file_default() {
        let text = "seed = 1\n[rl]\ncopy_max_steps = 10\ndrop_max_steps = 20\n";
        let env = [("AFM_SEED", "2"), ("AFM_RL_COPY_MAX_STEPS", "30"), ("AFM_SUPERVISED_SPARSIFY_EPOCHS", "4")];
        let cfg = resolve_text(text, &env, FlagOverrides::default()).unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.rl.copy_max_steps, 30);
        assert_eq!(cfg.rl.drop_max_steps, 20);
        assert_eq!(cfg.supervised.sparsify.epochs, 4);
        assert_eq!(cfg.rl.retrain_max_steps, 90_000);
        let flags = FlagOverrides {
            seed: Some(3),
            ..FlagOverrides::default()
        };
        assert_eq!(resolve_text(text, &env, flags).unwrap().seed, 3);
    }

    #[test]
    fn env_can_set_optional_and_string_keys() {
        let env = [
            ("AFM_SUPERVISED_CONTROLLER_SAMPLES_PER_TASK", "50"),
            ("AFM_DATA_MNIST_DIR", "/tmp/m"),
            ("AFM_EVAL_EMIT_MODE", "majority-vote"),
        ];
        let cfg = resolve_text("", &env, FlagOverrides::default()).unwrap();
        assert_eq!(cfg.supervised.controller_samples_per_task, Some(50));
        assert_eq!(cfg.data.mnist_dir, PathBuf::from("/tmp/m"));
        assert_eq!(cfg.eval.emit_mode, EmitMode::MajorityVote);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = resolve_text("[supervised]\nepochz = 3\n", &[], FlagOverrides::default()).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("supervised.epochz"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert_eq!(resolve_text("[rl]\ngamma = 2.0\n", &[], FlagOverrides::default()).unwrap_err().code, 2);
        assert_eq!(resolve_text("seed = \"x\"\n", &[], FlagOverrides::default()).unwrap_err().code, 2);
        assert_eq!(resolve_text("[data]\ntask = \"cifar\"\n", &[], FlagOverrides::default()).unwrap_err().code, 2);
    }
}
