//! Training: stable BCE objective, Adam, on-the-fly batch generation,
//! the training loop, and checkpoint persistence.
//!
//! Every training sample is drawn from its own substream keyed by the run
//! seed and the sample's global index, so the parameter trajectory depends
//! only on the seed and the configuration.

use crate::channel::{ebn0_to_sigma, frame_from_noise, gaussian_noise, random_codeword, substream};
use crate::code::CodeSpec;
use crate::mmpd::{BatchGraph, Graph, MmpdError, ModelConfig, ModelParameters};
use crate::numerics::{NumericsError, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// Substream domains; disjoint so no two purposes share random numbers.
pub const DOMAIN_INIT: u64 = 1;
pub const DOMAIN_TRAIN: u64 = 2;
pub const DOMAIN_VALID: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `learning_rate` to `final_learning_rate`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub seed: u64,
    pub use_zero_codeword: bool,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Frames in the held-out validation set.
    pub validation_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 1000,
            learning_rate: 1e-4,
            final_learning_rate: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            snr_low_db: 2.0,
            snr_high_db: 7.0,
            seed: 0,
            use_zero_codeword: true,
            checkpoint_every: 0,
            validation_frames: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.validation_frames == 0 {
            return bad("validation_frames must be at least 1");
        }
        if !(self.snr_low_db <= self.snr_high_db) || !self.snr_low_db.is_finite() || !self.snr_high_db.is_finite() {
            return bad("snr_low_db must not exceed snr_high_db");
        }
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    /// Learning rate used at step `t` (0-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = if self.steps == 0 { 0.0 } else { t as f64 / self.steps as f64 };
                let (hi, lo) = (self.learning_rate, self.final_learning_rate);
                lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] MmpdError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Mean stable binary cross-entropy between logits and 0/1 targets.
pub fn bce_loss(nu_hat: &[f64], eps: &[u8]) -> f64 {
    assert_eq!(nu_hat.len(), eps.len(), "logit and target lengths differ");
    let total: f64 = nu_hat
        .iter()
        .zip(eps)
        .map(|(&v, &e)| v.max(0.0) - v * e as f64 + (-v.abs()).exp().ln_1p())
        .sum();
    total / nu_hat.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros(params: &[Tensor<f32>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter, naming the tensor.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    names: &[String],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<(), String> {
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(format!("non-finite gradient for {}", names[i]));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *w -= (h.lr * m_hat / (v_hat.sqrt() + h.eps)) as f32;
        }
    }
    Ok(())
}

/// Stacked decoder inputs and targets for a batch of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub frames: usize,
    pub m_y: Vec<f32>,
    pub s_y: Vec<f32>,
    pub eps: Vec<f32>,
}

/// One training sample: Eb/N0 uniform in the configured range, then the noise,
/// then (in random-codeword mode) the codeword.
pub fn make_sample(spec: &CodeSpec, cfg: &TrainConfig, domain: u64, index: u64) -> crate::channel::FrameSample {
    let mut rng = substream(cfg.seed, domain, index);
    let snr = if cfg.snr_low_db == cfg.snr_high_db {
        cfg.snr_low_db
    } else {
        rng.random_range(cfg.snr_low_db..cfg.snr_high_db)
    };
    let sigma = ebn0_to_sigma(snr, spec.rate()).expect("validated code rate");
    let z = gaussian_noise(spec.n, sigma, &mut rng);
    let c = if cfg.use_zero_codeword {
        vec![0; spec.n]
    } else {
        random_codeword(spec, &mut rng)
    };
    frame_from_noise(spec, &c, &z, sigma).expect("lengths match the code")
}

/// Samples `first .. first + count` of a domain, stacked.
pub fn make_batch(spec: &CodeSpec, cfg: &TrainConfig, domain: u64, first: u64, count: usize) -> Batch {
    let mut b = Batch {
        frames: count,
        m_y: Vec::with_capacity(count * spec.n),
        s_y: Vec::with_capacity(count * spec.checks()),
        eps: Vec::with_capacity(count * spec.n),
    };
    for i in 0..count as u64 {
        let f = make_sample(spec, cfg, domain, first + i);
        b.m_y.extend(f.m_y.iter().map(|&v| v as f32));
        b.s_y.extend(f.s_y.iter().map(|&v| v as f32));
        b.eps.extend(f.eps.iter().map(|&e| e as f32));
    }
    b
}

/// Mean loss and per-tensor gradients for one batch.
pub fn loss_and_grads(
    params: &ModelParameters<f32>,
    graph: &BatchGraph,
    batch: &Batch,
) -> Result<(f32, Vec<Vec<f32>>), MmpdError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let mut g = Graph {
        tape: &mut tape,
        vars: &vars,
        params,
        graph,
    };
    let nu = g.forward(&batch.m_y, &batch.s_y)?;
    let loss = tape
        .bce_with_logits_mean(nu, Rc::new(batch.eps.clone()))
        .map_err(MmpdError::Head)?;
    let grads = tape.backward(loss).map_err(MmpdError::Head)?;
    let out = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    Ok((tape.value(loss).data()[0], out))
}

/// Mean BCE over the fixed validation set, evaluated in chunks of at most
/// `batch_size` frames.
pub fn validation_loss(spec: &CodeSpec, params: &ModelParameters<f32>, cfg: &TrainConfig) -> Result<f64, MmpdError> {
    let mut total = 0.0f64;
    let mut first = 0;
    while first < cfg.validation_frames {
        let count = cfg.batch_size.min(cfg.validation_frames - first);
        let batch = make_batch(spec, cfg, DOMAIN_VALID, first as u64, count);
        let nu = crate::mmpd::forward(params, &BatchGraph::new(spec, count), &batch.m_y, &batch.s_y)?;
        let nu: Vec<f64> = nu.iter().map(|&v| v as f64).collect();
        let eps: Vec<u8> = batch.eps.iter().map(|&e| e as u8).collect();
        total += bce_loss(&nu, &eps) * count as f64;
        first += count;
    }
    Ok(total / cfg.validation_frames as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub log: Vec<LossRecord>,
    pub initial_validation: f64,
    pub final_validation: f64,
}

/// Digest identifying the position in the sample stream after `steps`.
pub fn rng_digest(cfg: &TrainConfig, steps: u64) -> String {
    let next = steps * cfg.batch_size as u64;
    let text = format!("chacha8;seed={};domain={DOMAIN_TRAIN};next_sample={next}", cfg.seed);
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Fresh parameters for a run.
pub fn initial_params(spec: &CodeSpec, model: &ModelConfig, cfg: &TrainConfig) -> Result<ModelParameters<f32>, MmpdError> {
    let mut rng = substream(cfg.seed, DOMAIN_INIT, 0);
    Ok(ModelParameters::init(spec, model, &mut rng)?.cast())
}

fn is_divergence(e: &MmpdError) -> Option<String> {
    match e {
        MmpdError::Block {
            source: NumericsError::NonFinite { .. },
            ..
        }
        | MmpdError::Head(NumericsError::NonFinite { .. })
        | MmpdError::Embed(NumericsError::NonFinite { .. }) => Some(e.to_string()),
        _ => None,
    }
}

/// Where periodic checkpoints go: `<dir>/<name>_step<k>`.
#[derive(Debug, Clone)]
pub struct CheckpointPlan<'a> {
    pub dir: &'a Path,
    pub name: &'a str,
}

/// Runs the training loop. `progress` is called after every step.
pub fn train(
    spec: &CodeSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
    plan: Option<CheckpointPlan<'_>>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut params = initial_params(spec, model, cfg)?;
    let initial_validation = validation_loss(spec, &params, cfg)?;
    let graph = BatchGraph::new(spec, cfg.batch_size);
    let mut adam = AdamState::zeros(params.tensors());
    let names = params.names().to_vec();
    let mut log = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let batch = make_batch(spec, cfg, DOMAIN_TRAIN, step * cfg.batch_size as u64, cfg.batch_size);
        let (loss, grads) = loss_and_grads(&params, &graph, &batch).map_err(|e| match is_divergence(&e) {
            Some(detail) => TrainError::Divergence { step, detail },
            None => TrainError::Model(e),
        })?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        let lr = cfg.lr_at(step);
        let hyper = AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        };
        adam_step(params.tensors_mut(), &names, &grads, &mut adam, hyper)
            .map_err(|detail| TrainError::Divergence { step, detail })?;
        let rec = LossRecord {
            step,
            lr,
            train_loss: loss,
        };
        progress(&rec);
        log.push(rec);
        if let Some(p) = &plan {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                let base = p.dir.join(format!("{}_step{done}", p.name));
                save_checkpoint(&base, &params, spec, done, &rng_digest(cfg, done))?;
            }
        }
    }
    let final_validation = validation_loss(spec, &params, cfg)?;
    Ok(TrainOutcome {
        params,
        log,
        initial_validation,
        final_validation,
    })
}

/// Writes the loss log as CSV with columns `step,lr,train_loss`.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(["step", "lr", "train_loss"]).map_err(|e| io(e.into()))?;
    for r in log {
        w.write_record([r.step.to_string(), r.lr.to_string(), r.train_loss.to_string()])
            .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

const CHECKPOINT_FORMAT: &str = "mmpd-checkpoint-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("blob truncated in tensor {tensor}: needs bytes up to {needed}, blob has {available}")]
    Truncated { tensor: String, needed: u64, available: u64 },
    #[error("shape mismatch for tensor {tensor}: {detail}")]
    Shape { tensor: String, detail: String },
    #[error("code mismatch: checkpoint was trained for {expected}, got {found}")]
    CodeMismatch { expected: String, found: String },
}

/// Manifest and blob paths for a checkpoint base path.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let name = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (
        base.with_file_name(format!("{name}.manifest.json")),
        base.with_file_name(format!("{name}.bin")),
    )
}

/// Writes `<base>.manifest.json` and `<base>.bin`.
pub fn save_checkpoint(
    base: &Path,
    params: &ModelParameters<f32>,
    spec: &CodeSpec,
    step: u64,
    rng_digest: &str,
) -> Result<(), CheckpointError> {
    let (manifest_path, blob_path) = checkpoint_paths(base);
    let mut blob = Vec::with_capacity(params.parameter_count() * 4);
    let mut tensors = Vec::with_capacity(params.tensors().len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(json!({
            "dtype": "f32",
            "length": blob.len() - offset,
            "name": name,
            "offset": offset,
            "shape": t.shape(),
        }));
    }
    let manifest = json!({
        "code": { "h_sha256": spec.h_hash(), "k": spec.k, "n": spec.n },
        "config": serde_json::to_value(params.config()).expect("config serializes"),
        "format": CHECKPOINT_FORMAT,
        "rng_digest": rng_digest,
        "step": step,
        "tensors": tensors,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CheckpointError::Io { path, source }
    };
    std::fs::File::create(&blob_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(io(&blob_path))?;
    std::fs::write(&manifest_path, text).map_err(io(&manifest_path))
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub params: ModelParameters<f32>,
    pub n: usize,
    pub k: usize,
    pub h_sha256: String,
    pub step: u64,
    pub rng_digest: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTensor {
    dtype: String,
    length: u64,
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCode {
    h_sha256: String,
    k: usize,
    n: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    code: ManifestCode,
    config: ModelConfig,
    format: String,
    rng_digest: String,
    step: u64,
    tensors: Vec<ManifestTensor>,
}

/// Reads a checkpoint; when `spec` is given, the code identity must match.
pub fn load_checkpoint(base: &Path, spec: Option<&CodeSpec>) -> Result<LoadedCheckpoint, CheckpointError> {
    let (manifest_path, blob_path) = checkpoint_paths(base);
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| CheckpointError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let m: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Manifest(format!("unknown format {:?}", m.format)));
    }
    if let Some(spec) = spec {
        let found = format!("({}, {}) code with H sha256 {}", spec.n, spec.k, spec.h_hash());
        let expected = format!("({}, {}) code with H sha256 {}", m.code.n, m.code.k, m.code.h_sha256);
        if found != expected {
            return Err(CheckpointError::CodeMismatch { expected, found });
        }
    }
    if m.code.k > m.code.n {
        return Err(CheckpointError::Manifest(format!("k = {} exceeds n = {}", m.code.k, m.code.n)));
    }
    let blob = std::fs::read(&blob_path).map_err(|source| CheckpointError::Io {
        path: blob_path.clone(),
        source,
    })?;
    let available = blob.len() as u64;
    let mut expected_offset = 0u64;
    let mut named = Vec::with_capacity(m.tensors.len());
    for t in m.tensors {
        if t.dtype != "f32" {
            return Err(CheckpointError::Manifest(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected_offset {
            return Err(CheckpointError::Manifest(format!(
                "tensor {} starts at byte {}, expected {expected_offset}",
                t.name, t.offset
            )));
        }
        let count: usize = t.shape.iter().product();
        if t.length != 4 * count as u64 {
            return Err(CheckpointError::Shape {
                tensor: t.name,
                detail: format!("shape {:?} needs {} bytes, manifest lists {}", t.shape, 4 * count, t.length),
            });
        }
        let end = t.offset + t.length;
        if end > available {
            return Err(CheckpointError::Truncated {
                tensor: t.name,
                needed: end,
                available,
            });
        }
        let data = blob[t.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(t.shape, data).expect("length checked");
        named.push((t.name, tensor));
        expected_offset = end;
    }
    if expected_offset != available {
        return Err(CheckpointError::Manifest(format!(
            "blob has {} bytes beyond the last tensor",
            available - expected_offset
        )));
    }
    let params = ModelParameters::from_tensors(m.code.n, m.code.n - m.code.k, &m.config, named).map_err(|e| match e {
        MmpdError::Parameter { name, detail } => CheckpointError::Shape { tensor: name, detail },
        other => CheckpointError::Manifest(other.to_string()),
    })?;
    Ok(LoadedCheckpoint {
        params,
        n: m.code.n,
        k: m.code.k,
        h_sha256: m.code.h_sha256,
        step: m.step,
        rng_digest: m.rng_digest,
    })
}
