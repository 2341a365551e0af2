//! Monte Carlo BER/FER evaluation.
//!
//! Frame `f` of SNR point `p` draws its noise (then, in random-codeword mode,
//! its codeword) from `substream(seed, EVAL_DOMAIN + p, f)`. Frames are
//! processed in batches of `StopRule::batch_frames`; the stop rule is checked
//! on merged counters only at batch boundaries, so the counts do not depend on
//! how many workers decode a batch.

use crate::bp::{bp_decode, channel_llr, BpConfig};
use crate::channel::{ebn0_to_sigma, gaussian_noise, hard_decision, random_codeword, substream, syndrome_inputs, tau};
use crate::code::CodeSpec;
use crate::mmpd::{decide, forward, BatchGraph, ModelParameters};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Base substream domain of evaluation frames; point `p` uses `EVAL_DOMAIN + p`.
pub const EVAL_DOMAIN: u64 = 1 << 32;

/// Frames handed to one worker task.
const CHUNK_FRAMES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("decoder {decoder} failed on the chunk starting at frame {frame}: {msg}")]
    Decoder { decoder: String, frame: u64, msg: String },
    #[error("invalid evaluation settings: {0}")]
    Config(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

/// Maps channel observations to codeword estimates.
pub trait Decoder: Sync {
    fn name(&self) -> String;

    /// Decodes frames `ys` received at noise level `sigma`.
    fn decode_chunk(&self, spec: &CodeSpec, ys: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<u8>>, String>;
}

/// `c_hat = y_b`.
pub struct HardDecision;

impl Decoder for HardDecision {
    fn name(&self) -> String {
        "hard".into()
    }

    fn decode_chunk(&self, _spec: &CodeSpec, ys: &[Vec<f64>], _sigma: f64) -> Result<Vec<Vec<u8>>, String> {
        Ok(ys.iter().map(|y| hard_decision(y)).collect())
    }
}

pub struct BpDecoder(pub BpConfig);

impl Decoder for BpDecoder {
    fn name(&self) -> String {
        format!("bp{}", self.0.max_iterations)
    }

    fn decode_chunk(&self, spec: &CodeSpec, ys: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<u8>>, String> {
        ys.iter()
            .map(|y| {
                let llr = channel_llr(y, sigma).map_err(|e| e.to_string())?;
                bp_decode(spec, &llr, &self.0).map(|o| o.c_hat).map_err(|e| e.to_string())
            })
            .collect()
    }
}

/// The learned decoder; frames are run through the model `sub_batch` at a time.
pub struct MmpdDecoder {
    pub params: ModelParameters<f32>,
    pub sub_batch: usize,
}

impl Decoder for MmpdDecoder {
    fn name(&self) -> String {
        "mmpd".into()
    }

    fn decode_chunk(&self, spec: &CodeSpec, ys: &[Vec<f64>], _sigma: f64) -> Result<Vec<Vec<u8>>, String> {
        let mut out = Vec::with_capacity(ys.len());
        for group in ys.chunks(self.sub_batch.max(1)) {
            let mut m_y = Vec::with_capacity(group.len() * spec.n);
            let mut s_y = Vec::with_capacity(group.len() * spec.checks());
            let mut y_b = Vec::with_capacity(group.len());
            for y in group {
                let (m, b, s) = syndrome_inputs(spec, y);
                m_y.extend(m.iter().map(|&v| v as f32));
                s_y.extend(s.iter().map(|&v| v as f32));
                y_b.push(b);
            }
            let graph = BatchGraph::new(spec, group.len());
            let nu = forward(&self.params, &graph, &m_y, &s_y).map_err(|e| e.to_string())?;
            for (f, b) in y_b.iter().enumerate() {
                out.push(decide(b, &nu[f * spec.n..(f + 1) * spec.n]));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopRule {
    pub min_frame_errors: u64,
    pub max_frames: u64,
    /// Frames between stop-rule checks.
    pub batch_frames: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            min_frame_errors: 1000,
            max_frames: 1_000_000,
            batch_frames: 1024,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.min_frame_errors == 0 || self.max_frames == 0 || self.batch_frames == 0 {
            return Err(HarnessError::Config(
                "min_frame_errors, max_frames and batch_frames must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodewordMode {
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoppedBy {
    MinFrameErrors,
    MaxFrames,
}

impl StoppedBy {
    pub fn as_str(self) -> &'static str {
        match self {
            StoppedBy::MinFrameErrors => "min_frame_errors",
            StoppedBy::MaxFrames => "max_frames",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub ebn0_db: f64,
    pub frames: u64,
    pub bit_errors: u64,
    pub frame_errors: u64,
    pub stopped_by: StoppedBy,
    n: usize,
}

impl EvalPoint {
    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / (self.frames as f64 * self.n as f64)
    }

    pub fn fer(&self) -> f64 {
        self.frame_errors as f64 / self.frames as f64
    }

    /// `-ln(ber)`, or `None` when no bit error was observed.
    pub fn neg_ln_ber(&self) -> Option<f64> {
        (self.bit_errors > 0).then(|| -self.ber().ln())
    }
}

/// Transmitted codeword and channel output of one evaluation frame.
pub fn eval_frame(spec: &CodeSpec, sigma: f64, seed: u64, point: u64, frame: u64, mode: CodewordMode) -> (Vec<u8>, Vec<f64>) {
    let mut rng = substream(seed, EVAL_DOMAIN + point, frame);
    let z = gaussian_noise(spec.n, sigma, &mut rng);
    let c = match mode {
        CodewordMode::Zero => vec![0; spec.n],
        CodewordMode::Random => random_codeword(spec, &mut rng),
    };
    let y = c.iter().zip(&z).map(|(&b, &v)| tau(b) + v).collect();
    (c, y)
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    bit_errors: u64,
    frame_errors: u64,
}

fn decode_range(
    decoder: &dyn Decoder,
    spec: &CodeSpec,
    sigma: f64,
    seed: u64,
    point: u64,
    mode: CodewordMode,
    frames: std::ops::Range<u64>,
) -> Result<Counts, HarnessError> {
    let start = frames.start;
    let (cs, ys): (Vec<_>, Vec<_>) = frames.map(|f| eval_frame(spec, sigma, seed, point, f, mode)).unzip();
    let decoded = decoder.decode_chunk(spec, &ys, sigma).map_err(|msg| HarnessError::Decoder {
        decoder: decoder.name(),
        frame: start,
        msg,
    })?;
    let mut counts = Counts::default();
    for (c, c_hat) in cs.iter().zip(&decoded) {
        let errs = c.iter().zip(c_hat).filter(|(a, b)| a != b).count() as u64;
        counts.bit_errors += errs;
        counts.frame_errors += (errs > 0) as u64;
    }
    Ok(counts)
}

/// Optional worker cap; `None` uses rayon's global pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct Workers(pub Option<usize>);

impl Workers {
    fn install<R: Send>(self, f: impl FnOnce() -> R + Send) -> Result<R, HarnessError> {
        match self.0 {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| HarnessError::Pool(e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }
}

/// Simulates one SNR point until the stop rule fires.
#[allow(clippy::too_many_arguments)]
pub fn run_point(
    decoder: &dyn Decoder,
    spec: &CodeSpec,
    ebn0_db: f64,
    stop: &StopRule,
    seed: u64,
    point: u64,
    mode: CodewordMode,
    workers: Workers,
) -> Result<EvalPoint, HarnessError> {
    stop.validate()?;
    let sigma = ebn0_to_sigma(ebn0_db, spec.rate()).map_err(|e| HarnessError::Config(e.to_string()))?;
    workers.install(|| {
        let mut frames = 0u64;
        let mut total = Counts::default();
        loop {
            let end = (frames + stop.batch_frames).min(stop.max_frames);
            let chunks: Vec<u64> = (frames..end).step_by(CHUNK_FRAMES).collect();
            let parts: Vec<Counts> = chunks
                .par_iter()
                .map(|&s| {
                    let e = (s + CHUNK_FRAMES as u64).min(end);
                    decode_range(decoder, spec, sigma, seed, point, mode, s..e)
                })
                .collect::<Result<_, _>>()?;
            for p in parts {
                total.bit_errors += p.bit_errors;
                total.frame_errors += p.frame_errors;
            }
            frames = end;
            let stopped_by = if total.frame_errors >= stop.min_frame_errors {
                Some(StoppedBy::MinFrameErrors)
            } else if frames >= stop.max_frames {
                Some(StoppedBy::MaxFrames)
            } else {
                None
            };
            if let Some(stopped_by) = stopped_by {
                return Ok(EvalPoint {
                    ebn0_db,
                    frames,
                    bit_errors: total.bit_errors,
                    frame_errors: total.frame_errors,
                    stopped_by,
                    n: spec.n,
                });
            }
        }
    })?
}

/// One independent point per SNR; point `p` uses substream domain `EVAL_DOMAIN + p`.
pub fn run_sweep(
    decoder: &dyn Decoder,
    spec: &CodeSpec,
    ebn0_list: &[f64],
    stop: &StopRule,
    seed: u64,
    mode: CodewordMode,
    workers: Workers,
) -> Result<Vec<EvalPoint>, HarnessError> {
    if ebn0_list.is_empty() {
        return Err(HarnessError::Config("empty Eb/N0 list".into()));
    }
    ebn0_list
        .iter()
        .enumerate()
        .map(|(p, &snr)| run_point(decoder, spec, snr, stop, seed, p as u64, mode, workers))
        .collect()
}

pub const CSV_COLUMNS: [&str; 13] = [
    "code_name",
    "n",
    "k",
    "decoder",
    "ebn0_db",
    "frames",
    "bit_errors",
    "frame_errors",
    "ber",
    "fer",
    "neg_ln_ber",
    "stopped_by",
    "seed",
];

/// Writes the report header and one row per point. `neg_ln_ber` is left empty
/// for points without bit errors.
pub fn write_report<W: Write>(
    out: W,
    spec: &CodeSpec,
    decoder: &str,
    seed: u64,
    points: &[EvalPoint],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for p in points {
        w.write_record([
            spec.name.clone(),
            spec.n.to_string(),
            spec.k.to_string(),
            decoder.to_string(),
            p.ebn0_db.to_string(),
            p.frames.to_string(),
            p.bit_errors.to_string(),
            p.frame_errors.to_string(),
            p.ber().to_string(),
            p.fer().to_string(),
            p.neg_ln_ber().map(|v| v.to_string()).unwrap_or_default(),
            p.stopped_by.as_str().to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
