//! Target audio rendering and 16-bit PCM WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use super::{canonical_events, Renderer, EVENT_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub const SAMPLE_RATE: u32 = 16_000;
const PEAK: f64 = 0.9;
const FADE_S: f64 = 0.02;
const NOISE_PARTIALS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub events: Vec<usize>,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn render_event(renderer: Renderer, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let sr = SAMPLE_RATE as f64;
    let dur = n as f64 / sr;
    let gain = rng.random_range(0.6..=1.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = match renderer {
        Renderer::PureTone { freq } => (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr + phase).sin())
            .collect(),
        Renderer::Chirp { f0, f1 } => (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur)) + phase).sin()
            })
            .collect(),
        Renderer::NoiseBurst { lo, hi } => {
            let partials: Vec<(f64, f64)> = (0..NOISE_PARTIALS)
                .map(|_| (rng.random_range(lo..=hi), rng.random_range(0.0..2.0 * PI)))
                .collect();
            let norm = (NOISE_PARTIALS as f64).sqrt();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / norm
                })
                .collect()
        }
        Renderer::PulseTrain { rate, carrier } => {
            let offset = rng.random_range(0.0..1.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = (PI * (rate * t + offset)).sin().powi(2);
                    env * (2.0 * PI * carrier * t + phase).sin()
                })
                .collect()
        }
    };
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let w = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= w;
        out[n - 1 - i] *= w;
    }
    out.iter_mut().for_each(|v| *v *= gain);
    out
}

/// Sum of the per-event signals, peak-normalized to 0.9. An empty event set
/// renders silence of the requested length.
pub fn render_audio(events: &[usize], duration_s: f64, seed: u64) -> Result<AudioClip> {
    if !(duration_s > 0.0) {
        return Err(Error::Invalid(format!("duration must be positive, got {duration_s}")));
    }
    let events = canonical_events(events)?;
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut mix = vec![0.0f64; n];
    for &e in &events {
        let sig = render_event(EVENT_CLASSES[e].renderer, n, derive_seed(seed, e as u64));
        mix.iter_mut().zip(sig).for_each(|(m, s)| *m += s);
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Ok(AudioClip {
        samples: mix.into_iter().map(|v| (v * scale) as f32).collect(),
        sample_rate: SAMPLE_RATE,
        events,
    })
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit WAV; returns samples in `[-1, 1]` and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Invalid(format!("{} is not mono 16-bit PCM", path.display())));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::class_by_name;
    use rustfft::{num_complex::Complex, FftPlanner};

    /// Magnitude spectrum of the whole clip; bin width is `sr / n`.
    fn spectrum(x: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..buf.len() / 2].iter().map(|c| c.norm()).collect()
    }

    fn argmax(v: &[f64]) -> usize {
        (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
    }

    #[test]
    fn empty_event_set_is_silence() {
        let clip = render_audio(&[], 1.0, 0).unwrap();
        assert_eq!(clip.samples.len(), 16_000);
        assert!(clip.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_peaks_at_its_frequency() {
        let tone = class_by_name("tone_440").unwrap().id;
        let clip = render_audio(&[tone], 2.0, 3).unwrap();
        let spec = spectrum(&clip.samples);
        let bin_hz = SAMPLE_RATE as f64 / clip.samples.len() as f64;
        let peak_hz = argmax(&spec) as f64 * bin_hz;
        assert!((peak_hz - 440.0).abs() <= bin_hz, "peak at {peak_hz} Hz");
    }

    #[test]
    fn tone_stays_visible_over_noise() {
        let tone = class_by_name("tone_440").unwrap().id;
        let noise = class_by_name("noise_high").unwrap().id;
        let clip = render_audio(&[tone, noise], 2.0, 5).unwrap();
        let spec = spectrum(&clip.samples);
        let bin_hz = SAMPLE_RATE as f64 / clip.samples.len() as f64;
        let k = (440.0 / bin_hz).round() as usize;
        let local = spec[k - 1..=k + 1].iter().cloned().fold(0.0, f64::max);
        let mut sorted = spec.clone();
        sorted.sort_by(f64::total_cmp);
        let floor = sorted[sorted.len() / 2];
        assert!(local > 100.0 * floor, "440 Hz {local} vs median {floor}");
    }

    #[test]
    fn clips_are_normalized_and_exact_length() {
        for seed in 0..5 {
            let clip = render_audio(&[0, 3, 6], 2.0, seed).unwrap();
            assert_eq!(clip.samples.len(), 32_000);
            let peak = clip.samples.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            assert!((peak - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = render_audio(&[2], 0.5, 1).unwrap();
        write_wav(&path, &clip.samples, SAMPLE_RATE).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, SAMPLE_RATE);
        assert_eq!(back.len(), clip.samples.len());
        for (a, b) in back.iter().zip(&clip.samples) {
            assert!((a - b).abs() <= 1.0 / i16::MAX as f32);
        }
    }
}
