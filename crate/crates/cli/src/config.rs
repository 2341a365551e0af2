use crate::CliError;
use mmpd_core::bp::BpConfig;
use mmpd_core::harness::{CodewordMode, StopRule};
use mmpd_core::mmpd::ModelConfig;
use mmpd_core::train::{checkpoint_paths, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Everything a subcommand needs. Paths are relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Alist file of the code.
    pub code: Option<PathBuf>,
    /// Seed of the evaluation frames; training uses `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stop: StopRule,
    pub bp: BpConfig,
    pub ebn0_db: Vec<f64>,
    pub codeword_mode: CodewordMode,
    /// Checkpoint base path (without `.manifest.json` / `.bin`) read by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Base name of the artifacts written to the output directory.
    pub name: String,
    /// Training steps between progress lines; 0 is silent.
    pub log_every: u64,
    /// Frames per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            code: None,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stop: StopRule::default(),
            bp: BpConfig::default(),
            ebn0_db: vec![4.0, 5.0, 6.0],
            codeword_mode: CodewordMode::Zero,
            checkpoint: None,
            name: "mmpd".into(),
            log_every: 100,
            eval_batch: 128,
        }
    }
}

/// Sets `path` (dot separated) to `raw`, parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("--set expects path=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Input(format!("malformed --set path {path:?}")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Input(format!("--set {path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}

/// Reads the config document (or `{}`), applies overrides, and deserializes.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(CliError::Input("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Input(format!("config: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Code,
    Sweep,
    Train,
    Checkpoint,
}

impl RunConfig {
    pub fn code_path(&self) -> Result<&Path, CliError> {
        self.code
            .as_deref()
            .ok_or_else(|| CliError::Input("no code given (set `code` or pass --code)".into()))
    }

    /// Range and existence checks for what a subcommand uses, before any compute.
    pub fn validate(&self, needs: &[Needs]) -> Result<(), CliError> {
        let input = |e: String| CliError::Input(e);
        for need in needs {
            match need {
                Needs::Code => {
                    let p = self.code_path()?;
                    if !p.is_file() {
                        return Err(input(format!("code file {} does not exist", p.display())));
                    }
                }
                Needs::Sweep => {
                    if self.ebn0_db.is_empty() || self.ebn0_db.iter().any(|v| !v.is_finite()) {
                        return Err(input("ebn0_db must be a non-empty list of finite numbers".into()));
                    }
                    self.stop.validate().map_err(|e| input(e.to_string()))?;
                    self.bp.validate().map_err(|e| input(e.to_string()))?;
                    if self.eval_batch == 0 {
                        return Err(input("eval_batch must be positive".into()));
                    }
                }
                Needs::Train => {
                    self.model.validate().map_err(|e| input(e.to_string()))?;
                    self.train.validate().map_err(|e| input(e.to_string()))?;
                    if self.name.is_empty() || self.name.contains(['/', '\\']) {
                        return Err(input(format!("name {:?} is not a plain file name", self.name)));
                    }
                }
                Needs::Checkpoint => {
                    let base = self
                        .checkpoint
                        .as_deref()
                        .ok_or_else(|| input("no checkpoint given (set `checkpoint` or pass --checkpoint)".into()))?;
                    let (manifest, blob) = checkpoint_paths(base);
                    for p in [manifest, blob] {
                        if !p.is_file() {
                            return Err(input(format!("checkpoint file {} does not exist", p.display())));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace() {
        let mut doc = json!({"train": {"steps": 5}});
        apply_override(&mut doc, "train.steps=7").unwrap();
        apply_override(&mut doc, "model.d=16").unwrap();
        apply_override(&mut doc, "name=run_a").unwrap();
        apply_override(&mut doc, "ebn0_db=[1,2]").unwrap();
        assert_eq!(doc, json!({"train": {"steps": 7}, "model": {"d": 16}, "name": "run_a", "ebn0_db": [1, 2]}));
        assert!(apply_override(&mut doc, "name.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load(None, &["bogus=1".into()]).is_err());
        assert!(load(None, &["train.bogus=1".into()]).is_err());
        let cfg = load(None, &["train.steps=3".into()]).unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn validation_ranges() {
        let cfg = RunConfig::default();
        assert!(cfg.validate(&[Needs::Code]).is_err());
        let mut bad = cfg.clone();
        bad.ebn0_db.clear();
        assert!(bad.validate(&[Needs::Sweep]).is_err());
        let mut bad = cfg.clone();
        bad.stop.min_frame_errors = 0;
        assert!(bad.validate(&[Needs::Sweep]).is_err());
        let mut bad = cfg.clone();
        bad.train.batch_size = 0;
        assert!(bad.validate(&[Needs::Train]).is_err());
        assert!(cfg.validate(&[Needs::Sweep, Needs::Train]).is_ok());
        assert!(cfg.validate(&[Needs::Checkpoint]).is_err());
    }
}
