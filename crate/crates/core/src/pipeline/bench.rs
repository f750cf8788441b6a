//! Wall-clock latency of representation extraction (generation excluded).
//!
//! A trial times every test utterance once per pipeline and records the
//! mean per-input time, so `trials` values back each mean and std. Pipelines
//! are interleaved within a trial to share any drift in machine load.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::generate::{mean_pool, Frontend};
use super::report::{fmt3, Report, Table};
use super::Pipeline;
use crate::bridge::BridgeKind;
use crate::cascade::{busy_work, text_condition, AsrConfig, ToyAsr};
use crate::corpus::{Split, SpeechUtterance};
use crate::error::{Error, Result};
use crate::probe::TextEncoder;
use crate::speech_encoder::EncoderKind;

pub const MIN_TRIALS: usize = 30;
pub const MIN_WARMUP: usize = 5;
/// Reference latencies (ms) of the published systems, reported only.
pub const REFERENCE_CASCADE_MS: f64 = 156.33;
pub const REFERENCE_E2E_MS: f64 = 35.93;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineLatency {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean per-input time of each retained trial.
    pub per_trial_ms: Vec<f64>,
}

impl PipelineLatency {
    fn of(per_trial_ms: Vec<f64>) -> Self {
        let n = per_trial_ms.len() as f64;
        let mean = per_trial_ms.iter().sum::<f64>() / n;
        let var = per_trial_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            per_trial_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub warmup: usize,
    pub inputs_per_trial: usize,
    /// `e2e`, `e2e_no_bridge`, `cascade`.
    pub pipelines: BTreeMap<String, PipelineLatency>,
    pub asr_overhead_ops: u64,
    /// Whether the overhead was calibrated against the end-to-end time.
    pub overhead_calibrated: bool,
    /// `1 - e2e / cascade`, in percent.
    pub reduction_pct: f64,
    pub reference_cascade_ms: f64,
    pub reference_e2e_ms: f64,
    pub reference_reduction_pct: f64,
}

impl LatencyStats {
    pub fn mean(&self, name: &str) -> f64 {
        self.pipelines.get(name).map_or(f64::NAN, |p| p.mean_ms)
    }
}

fn time_ms(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Busy-work units completed per millisecond on this machine.
fn ops_per_ms() -> f64 {
    let ops = 2_000_000u64;
    busy_work(ops / 10);
    let start = Instant::now();
    black_box(busy_work(ops));
    ops as f64 / (start.elapsed().as_secs_f64() * 1e3).max(1e-6)
}

/// Times the three representation-extraction paths on `utterances`.
/// With `asr.fixed_overhead_ops = None` the ASR overhead is set to
/// `overhead_factor` times the measured end-to-end time.
pub fn latency_bench(
    bridged: &Frontend,
    pooled: &Frontend,
    text: &TextEncoder,
    asr: &AsrConfig,
    speech: &crate::corpus::SpeechConfig,
    utterances: &[SpeechUtterance],
    trials: usize,
    warmup: usize,
    overhead_factor: f64,
) -> Result<LatencyStats> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("latency benchmark needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::Config(format!("latency benchmark needs at least {MIN_WARMUP} warmup trials")));
    }
    if utterances.is_empty() {
        return Err(Error::Invalid("no utterances to benchmark".into()));
    }
    let n = utterances.len() as f64;
    let e2e = |u: &SpeechUtterance| -> Result<()> {
        black_box(bridged.condition(u)?);
        Ok(())
    };
    let no_bridge = |u: &SpeechUtterance| -> Result<()> {
        black_box(mean_pool(&pooled.encoder().encode(u)?.frames));
        Ok(())
    };
    let per_input = |f: &dyn Fn(&SpeechUtterance) -> Result<()>| -> Result<f64> {
        Ok(time_ms(|| utterances.iter().try_for_each(f))? / n)
    };

    let mut calib = Vec::new();
    for _ in 0..warmup {
        calib.push(per_input(&e2e)?);
        per_input(&no_bridge)?;
    }
    let (ops, calibrated) = match asr.fixed_overhead_ops {
        Some(ops) => (ops, false),
        None => {
            let e2e_ms = super::stages::median(&calib);
            ((overhead_factor * e2e_ms * ops_per_ms()).round() as u64, true)
        }
    };
    let recognizer = ToyAsr::new(
        AsrConfig {
            fixed_overhead_ops: Some(ops),
            ..asr.clone()
        },
        speech.clone(),
    )?;
    let cascade = |u: &SpeechUtterance| -> Result<()> {
        let caption = recognizer.transcribe(u, 0)?;
        black_box(text_condition(&caption, text)?);
        Ok(())
    };
    for _ in 0..warmup {
        per_input(&cascade)?;
    }

    let mut raw: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for _ in 0..trials {
        raw.entry("e2e").or_default().push(per_input(&e2e)?);
        raw.entry("e2e_no_bridge").or_default().push(per_input(&no_bridge)?);
        raw.entry("cascade").or_default().push(per_input(&cascade)?);
    }
    let pipelines: BTreeMap<String, PipelineLatency> =
        raw.into_iter().map(|(k, v)| (k.to_string(), PipelineLatency::of(v))).collect();
    let reduction = 100.0 * (1.0 - pipelines["e2e"].mean_ms / pipelines["cascade"].mean_ms);
    Ok(LatencyStats {
        trials,
        warmup,
        inputs_per_trial: utterances.len(),
        pipelines,
        asr_overhead_ops: ops,
        overhead_calibrated: calibrated,
        reduction_pct: reduction,
        reference_cascade_ms: REFERENCE_CASCADE_MS,
        reference_e2e_ms: REFERENCE_E2E_MS,
        reference_reduction_pct: 100.0 * (1.0 - REFERENCE_E2E_MS / REFERENCE_CASCADE_MS),
    })
}

pub fn latency_table(s: &LatencyStats) -> Table {
    let mut t = Table::new("Representation-extraction latency per input", &["Pipeline", "mean ms", "std ms", "trials"]);
    for name in ["cascade", "e2e", "e2e_no_bridge"] {
        if let Some(p) = s.pipelines.get(name) {
            t.row(vec![name.to_string(), fmt3(p.mean_ms), fmt3(p.std_ms), p.per_trial_ms.len().to_string()]);
        }
    }
    t.note(format!(
        "e2e vs cascade: {:.1}% reduction (reference systems: {:.2} -> {:.2} ms, {:.1}%)",
        s.reduction_pct, s.reference_cascade_ms, s.reference_e2e_ms, s.reference_reduction_pct
    ));
    t.note(format!(
        "ASR overhead: {} busy-work units{}",
        s.asr_overhead_ops,
        if s.overhead_calibrated { " (calibrated)" } else { "" }
    ));
    t
}

impl Pipeline {
    pub(crate) fn benchmark(&self) -> Result<()> {
        let bridged = Frontend::load(&self.layout, super::Mode::Default)?;
        let pooled = Frontend::load(&self.layout, super::Mode::NoBridge)?;
        let text_path = super::require(&self.layout.text_encoder())?;
        let text = TextEncoder::load(&text_path)?;
        let corpus = self.corpus()?;
        let utts = corpus
            .split(Split::Test)
            .into_iter()
            .map(|r| corpus.load_speech(r))
            .collect::<Result<Vec<_>>>()?;
        let b = &self.config.bench;
        let stats = latency_bench(
            &bridged,
            &pooled,
            &text,
            &self.config.asr,
            &corpus.config.speech,
            &utts,
            b.trials,
            b.warmup,
            b.overhead_factor,
        )?;
        let prov = self.provenance(
            &(&self.config.bench, &self.config.asr),
            &[
                ("speech_encoder", self.layout.encoder(EncoderKind::Semantic)),
                ("bridge", self.layout.bridge(EncoderKind::Semantic, BridgeKind::Qformer)),
                ("text_encoder", text_path),
            ],
        )?;
        latency_table(&stats).write(&self.layout.table("latency"))?;
        Report {
            kind: "latency".into(),
            seed: self.config.run.seed,
            provenance: prov,
            body: stats,
        }
        .write(&self.layout.report("latency"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_raw_trials() {
        let p = PipelineLatency::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(p.mean_ms, 2.0);
        assert_eq!(p.std_ms, 1.0);
    }

    #[test]
    fn rejects_too_few_trials() {
        let asr = AsrConfig::default();
        let text = TextEncoder::init(8, 0, candle_core::DType::F32).unwrap();
        let enc = crate::speech_encoder::SpeechEncoder::init(
            crate::speech_encoder::EncoderConfig::semantic(),
            0,
            candle_core::DType::F32,
        )
        .unwrap();
        let f = Frontend::Pooled { encoder: enc };
        let err = latency_bench(&f, &f, &text, &asr, &Default::default(), &[], 29, 5, 4.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
