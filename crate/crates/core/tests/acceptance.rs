//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 8 read the reports of a full default-configuration run.
//! The run is performed here unless `STAR_ACCEPTANCE_RUN` names the output
//! directory of a completed `star all` run with the default configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use star_core::audio_vae::kl_divergence;
use star_core::bridge::{Bridge, BridgeConfig};
use star_core::checkpoint::file_checksum;
use star_core::flowmatch::{
    cfg_velocity, fm_loss, interpolate, sample_seeded, sway_schedule, SamplerConfig, VelocityField, VelocityNet,
    VelocityNetConfig,
};
use star_core::gradcheck::{check, max_relative_error};
use star_core::matrix::Matrix;
use star_core::nn::{ParamBuilder, ParamStore};
use star_core::pipeline::bench::LatencyStats;
use star_core::pipeline::evaluate::cascade_name;
use star_core::pipeline::metrics::{frechet_distance, FD_EPSILON};
use star_core::pipeline::stages::Stage1Report;
use star_core::pipeline::{EvalReport, Pipeline, Report, RunConfig};
use star_core::probe::average_precision;
use star_core::rng::{normal_vec, normal_vec_f64, seeded};
use star_core::Result;

mod common;
use common::tiny_config;

// Tolerances.
const EXACT_F64: f64 = 1e-12;
const CFG_AFFINE_TOL: f64 = 1e-6;
const EULER_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_ORACLE_TOL: f64 = 1e-8;
const KL_MC_REL_TOL: f64 = 0.02;
const STAGE1_MIN_GAP: f64 = 0.15;
const CAPTION_MAX_DIFF: f64 = 0.05;
const MIN_COND_ACC: f64 = 0.7;
const MAX_FD_NOISE_RATIO: f64 = 0.5;
const CASCADE_SUB_RATE: f64 = 0.3;
const PIPELINE_BUDGET_S: f64 = 30.0 * 60.0;
const STAGE1_BUDGET_S: f64 = 15.0 * 60.0;
const BENCH_BUDGET_S: f64 = 2.0 * 60.0;
const MIN_TRIALS: usize = 30;
const MIN_SEEDS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(normal_vec_f64(&mut seeded(seed), n), shape, &Device::Cpu).unwrap()
}

fn scramble(store: &ParamStore, seed: u64, scale: f64) {
    for (i, (_, var)) in store.named_vars().enumerate() {
        var.set(&(randn(var.dims(), seed + i as u64) * scale).unwrap()).unwrap();
    }
}

fn small_net() -> VelocityNet {
    let cfg = VelocityNetConfig {
        blocks: 2,
        hidden: 16,
        heads: 2,
        cond_width: 8,
        time_embed_width: 8,
        latent_dim: 4,
        patch: 2,
        ..VelocityNetConfig::default()
    };
    let net = VelocityNet::init(cfg, 1, DType::F64).unwrap();
    scramble(net.store(), 40, 0.3);
    net
}

/// `v = z1 - z0` for the sampler's own starting noise `z1`.
struct ConstantField(Tensor);

impl VelocityField for ConstantField {
    fn velocity(&self, _z: &Tensor, _t: &[f64], _cond: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

fn criterion_1() -> Result<Outcome> {
    let m = |rows: usize, cols: usize, v: &[f32]| Matrix::new(rows, cols, v.to_vec()).unwrap();
    let mut fails = Vec::new();
    let checks = [
        (interpolate(&m(1, 2, &[1.0, 2.0]), &m(1, 2, &[0.0, 0.0]), 0.0)?.z_t.data, vec![1.0, 2.0]),
        (interpolate(&m(1, 2, &[1.0, 2.0]), &m(1, 2, &[3.0, 4.0]), 1.0)?.z_t.data, vec![3.0, 4.0]),
        (interpolate(&m(1, 2, &[2.0, 0.0]), &m(1, 2, &[0.0, 2.0]), 0.5)?.z_t.data, vec![1.0, 1.0]),
    ];
    if checks.iter().any(|(got, want)| got != want) {
        fails.push("interpolate".to_string());
    }

    if fm_loss(&[1.0, -2.0], &[0.5, 1.0], &[1.5, -1.0])? != 0.0 || fm_loss(&[1.0], &[0.0], &[2.0])? != 1.0 {
        fails.push("fm_loss hand values".into());
    }
    let mut rng = seeded(5);
    for _ in 0..20 {
        let (v, a, b) = (normal_vec_f64(&mut rng, 32), normal_vec_f64(&mut rng, 32), normal_vec_f64(&mut rng, 32));
        let mut oracle = 0.0;
        for i in 0..32 {
            let d = v[i] - (b[i] - a[i]);
            oracle += d * d;
        }
        if (fm_loss(&v, &a, &b)? - oracle / 32.0).abs() > EXACT_F64 {
            fails.push("fm_loss 8x4 oracle".into());
            break;
        }
    }

    let net = small_net();
    let z = randn(&[1, 5, 4], 2);
    let cond = randn(&[1, 3, 8], 3);
    let v = |g: f64| flat(&cfg_velocity(&net, &z, &[0.7], &cond, g).unwrap());
    let (v0, v1) = (v(0.0), v(1.0));
    let mut worst = 0.0f64;
    for g in [0.5, 2.0, 5.0] {
        for ((a, b), c) in v(g).iter().zip(&v0).zip(&v1) {
            worst = worst.max((a - b - g * (c - b)).abs());
        }
    }
    if worst > CFG_AFFINE_TOL {
        fails.push(format!("cfg affine deviation {worst:e}"));
    }

    for nfe in [1, 2, 5, 20, 64] {
        for s in [-1.0, -0.5, 0.0] {
            let ts = sway_schedule(nfe, s)?.timesteps().to_vec();
            let monotone = ts.windows(2).all(|w| w[1] < w[0]);
            if ts.len() != nfe + 1 || ts[0] != 1.0 || ts[nfe] != 0.0 || !monotone {
                fails.push(format!("sway schedule nfe {nfe} s {s}"));
            }
            if s == 0.0 && ts.iter().enumerate().any(|(k, t)| (t - (1.0 - k as f64 / nfe as f64)).abs() > EXACT_F64) {
                fails.push(format!("s = 0 not uniform at nfe {nfe}"));
            }
        }
    }
    let ts = sway_schedule(2, -1.0)?.timesteps().to_vec();
    if (ts[1] - (1.0 - 0.29289321881345254)).abs() > 1e-12 {
        fails.push(format!("sway midpoint {}", ts[1]));
    }

    let (len, dim, seed) = (6, 4, 17u64);
    let z0 = randn(&[1, len, dim], 3);
    let z1 = Tensor::from_vec(normal_vec(&mut seeded(seed), len * dim), (1, len, dim), &Device::Cpu)?.to_dtype(DType::F64)?;
    let field = ConstantField((&z1 - &z0)?);
    for nfe in [1, 5, 20] {
        let sampler = SamplerConfig {
            nfe,
            guidance_scale: 5.0,
            ..SamplerConfig::default()
        };
        let out = sample_seeded(&field, &randn(&[1, 1, 8], 1), &[seed], &sampler, len, dim, DType::F64)?;
        let err = out[0]
            .data
            .iter()
            .zip(flat(&z0))
            .map(|(&a, b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        if err > EULER_TOL {
            fails.push(format!("Euler recovery error {err:e} at nfe {nfe}"));
        }
    }
    Ok(if fails.is_empty() {
        outcome(true, "interpolate, fm_loss, guidance affinity, sway schedule and Euler recovery all exact")
    } else {
        outcome(false, fails.join("; "))
    })
}

fn criterion_2() -> Result<Outcome> {
    let mut report = Vec::new();
    let mut worst = 0.0f64;

    let net = small_net();
    let z0 = randn(&[2, 5, 4], 10);
    let z1 = randn(&[2, 5, 4], 11);
    let cond = randn(&[2, 3, 8], 12);
    let t = [0.25, 0.8];
    let tt = Tensor::new(&t, &Device::Cpu)?.reshape((2, 1, 1))?;
    let zt = (z0.broadcast_mul(&(1.0 - &tt)?)? + z1.broadcast_mul(&tt)?)?;
    let target = (&z1 - &z0)?;
    let loss = || -> Result<Tensor> { Ok((net.forward(&zt, &t, &cond)? - &target)?.sqr()?.mean_all()?) };
    let e = max_relative_error(&check(net.store(), "", loss, 10, 1e-5, 99)?);
    worst = worst.max(e);
    report.push(format!("velocity net {e:.1e}"));

    for cfg in [
        BridgeConfig {
            width: 16,
            input_dim: 12,
            num_queries: 3,
            ..BridgeConfig::default()
        },
        BridgeConfig {
            width: 16,
            input_dim: 12,
            ..BridgeConfig::mlp()
        },
    ] {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded(21);
        let bridge = Bridge::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        scramble(&store, 50, 0.5);
        let x = randn(&[2, 7, 12], 3);
        let target = randn(&[2, cfg.slots(), 16], 4);
        let loss = || -> Result<Tensor> { Ok((bridge.forward(&x)? - &target)?.sqr()?.mean_all()?) };
        let e = max_relative_error(&check(&store, "", loss, 10, 1e-5, 8)?);
        worst = worst.max(e);
        report.push(format!("{} bridge {e:.1e}", cfg.kind.name()));
    }
    Ok(outcome(worst < GRAD_REL_TOL, format!("max relative error: {}", report.join(", "))))
}

/// Precision at every positive's rank, by enumerating cut-offs.
fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count();
    let mut total = 0.0;
    for k in 1..=order.len() {
        if labels[order[k - 1]] {
            let hits = order[..k].iter().filter(|&&i| labels[i]).count();
            total += hits as f64 / k as f64;
        }
    }
    total / positives as f64
}

fn criterion_3() -> Result<Outcome> {
    let mut fails = Vec::new();
    let mut rng = seeded(77);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..1000) as f64 / 1000.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        if !labels.contains(&true) {
            continue;
        }
        checked += 1;
        if average_precision(&scores, &labels)? != brute_ap(&scores, &labels) {
            fails.push("average precision differs from rank enumeration".to_string());
            break;
        }
    }

    let mut worst_fd = 0.0f64;
    for _ in 0..50 {
        let m: Vec<[f64; 2]> = (0..2).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let s: Vec<[f64; 2]> = (0..2).map(|_| [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)]).collect();
        // Four axis-aligned points per set give an exactly diagonal covariance.
        let set = |m: [f64; 2], s: [f64; 2]| -> Vec<Vec<f64>> {
            [-1.0, 1.0]
                .iter()
                .flat_map(|sign| [vec![m[0] + sign * s[0], m[1]], vec![m[0], m[1] + sign * s[1]]])
                .collect()
        };
        let var = |s: f64| 2.0 * s * s / 3.0 + FD_EPSILON;
        let oracle: f64 = (0..2)
            .map(|k| (m[0][k] - m[1][k]).powi(2) + (var(s[0][k]).sqrt() - var(s[1][k]).sqrt()).powi(2))
            .sum();
        let fd = frechet_distance(&set(m[0], s[0]), &set(m[1], s[1]))?;
        worst_fd = worst_fd.max((fd - oracle).abs());
    }
    if worst_fd >= FD_ORACLE_TOL {
        fails.push(format!("Fréchet distance off by {worst_fd:e}"));
    }

    let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let sigma: Vec<f64> = (0..8).map(|_| rng.random_range(0.3..2.0)).collect();
    let closed = kl_divergence(&mu, &sigma);
    let n = 200_000;
    let mut mc = 0.0;
    for _ in 0..n {
        let eps = normal_vec_f64(&mut rng, 8);
        for k in 0..8 {
            let z = mu[k] + sigma[k] * eps[k];
            // log q(z) - log p(z) for one coordinate.
            mc += -sigma[k].ln() - 0.5 * eps[k] * eps[k] + 0.5 * z * z;
        }
    }
    mc /= n as f64;
    let rel = (mc - closed).abs() / closed;
    if rel > KL_MC_REL_TOL {
        fails.push(format!("VAE KL Monte-Carlo relative error {rel:.4}"));
    }
    Ok(if fails.is_empty() {
        outcome(
            true,
            format!("200 AP cases exact; FD max error {worst_fd:.1e}; KL closed form {closed:.4} vs MC {mc:.4}"),
        )
    } else {
        outcome(false, fails.join("; "))
    })
}

struct Reference {
    pipeline: Pipeline,
    timings: BTreeMap<String, f64>,
}

impl Reference {
    fn report<T: serde::de::DeserializeOwned + serde::Serialize>(&self, name: &str) -> Result<T> {
        Ok(Report::<T>::read(&self.pipeline.layout.report(name))?.body)
    }

    fn total_seconds(&self) -> f64 {
        self.timings.values().sum()
    }
}

fn reference_run() -> Result<Reference> {
    let (dir, reuse) = match std::env::var_os("STAR_ACCEPTANCE_RUN") {
        Some(d) => (PathBuf::from(d), true),
        None => (Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-reference"), false),
    };
    let mut config = RunConfig::default();
    config.run.out_dir = dir.clone();
    let pipeline = Pipeline::new(config)?;
    if reuse {
        println!("reusing reference run in {}", dir.display());
    } else {
        println!("running the full reference pipeline in {}", dir.display());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| star_core::Error::Invalid(e.to_string()))?;
        }
        pipeline.run_all()?;
    }
    let timings = pipeline.timings()?;
    Ok(Reference { pipeline, timings })
}

fn criterion_4(r: &Reference) -> Result<Outcome> {
    let s: Stage1Report = r.report("stage1")?;
    let sem = s.map_of("semantic", star_core::bridge::BridgeKind::Qformer).unwrap_or(f64::NAN);
    let ac = s.map_of("acoustic", star_core::bridge::BridgeKind::Qformer).unwrap_or(f64::NAN);
    let secs = r.timings.get("stage1").copied().unwrap_or(f64::NAN);
    let gap_ok = sem - ac >= STAGE1_MIN_GAP;
    let caption_ok = (s.caption.map - sem).abs() <= CAPTION_MAX_DIFF;
    Ok(outcome(
        gap_ok && caption_ok && secs <= STAGE1_BUDGET_S,
        format!(
            "mAP semantic {sem:.3}, acoustic {ac:.3} (gap {:.3} >= {STAGE1_MIN_GAP}); caption {:.3} (|diff| {:.3} <= {CAPTION_MAX_DIFF}); stage time {secs:.0} s",
            sem - ac,
            s.caption.map,
            (s.caption.map - sem).abs()
        ),
    ))
}

fn median_of<'a>(e: &'a EvalReport, name: &str) -> Option<&'a star_core::pipeline::Metrics> {
    e.system(name).map(|s| &s.median)
}

fn criterion_5(r: &Reference) -> Result<Outcome> {
    let e: EvalReport = r.report("evaluate")?;
    let (Some(star), Some(noise)) = (median_of(&e, "default"), median_of(&e, "noise")) else {
        return Ok(outcome(false, "evaluation report lacks the default or noise rows"));
    };
    let ratio = star.frechet_distance / noise.frechet_distance;
    let total = r.total_seconds();
    Ok(outcome(
        star.conditioning_accuracy >= MIN_COND_ACC && ratio <= MAX_FD_NOISE_RATIO && total <= PIPELINE_BUDGET_S,
        format!(
            "conditioning accuracy {:.3} (>= {MIN_COND_ACC}); FD {:.3} vs noise {:.3} (ratio {ratio:.3} <= {MAX_FD_NOISE_RATIO}); full pipeline {:.1} min",
            star.conditioning_accuracy,
            star.frechet_distance,
            noise.frechet_distance,
            total / 60.0
        ),
    ))
}

fn criterion_6(r: &Reference) -> Result<Outcome> {
    let e: EvalReport = r.report("evaluate")?;
    let name = cascade_name(CASCADE_SUB_RATE);
    let (Some(star), Some(cascade)) = (median_of(&e, "default"), median_of(&e, &name)) else {
        return Ok(outcome(false, format!("evaluation report lacks default or {name}")));
    };
    let clean = median_of(&e, &cascade_name(0.0)).map_or(f64::NAN, |m| m.conditioning_accuracy);
    Ok(outcome(
        e.seeds.len() >= MIN_SEEDS && star.conditioning_accuracy >= cascade.conditioning_accuracy,
        format!(
            "median accuracy over {} seeds: default {:.3} vs {name} {:.3} (error-free cascade {clean:.3})",
            e.seeds.len(),
            star.conditioning_accuracy,
            cascade.conditioning_accuracy
        ),
    ))
}

fn criterion_7(r: &Reference) -> Result<Outcome> {
    let s: LatencyStats = r.report("latency")?;
    let (e2e, nb, cas) = (s.mean("e2e"), s.mean("e2e_no_bridge"), s.mean("cascade"));
    let secs = r.timings.get("benchmark").copied().unwrap_or(f64::NAN);
    Ok(outcome(
        s.trials >= MIN_TRIALS && e2e < cas && nb <= e2e && secs <= BENCH_BUDGET_S,
        format!(
            "{} trials: e2e {e2e:.3} ms < cascade {cas:.3} ms ({:.1}% reduction; reference 156.33 -> 35.93 ms, 76.9%); no_bridge {nb:.3} ms <= e2e; {secs:.0} s",
            s.trials, s.reduction_pct
        ),
    ))
}

fn criterion_8(r: &Reference) -> Result<Outcome> {
    let e: EvalReport = r.report("evaluate")?;
    let (Some(d), Some(nb), Some(ac)) = (
        median_of(&e, "default"),
        median_of(&e, "no_bridge"),
        median_of(&e, "acoustic_encoder"),
    ) else {
        return Ok(outcome(false, "evaluation report lacks an ablation row"));
    };
    let pass = e.seeds.len() >= MIN_SEEDS
        && d.conditioning_accuracy > nb.conditioning_accuracy
        && d.conditioning_accuracy > ac.conditioning_accuracy
        && d.frechet_distance < nb.frechet_distance
        && d.frechet_distance < ac.frechet_distance;
    Ok(outcome(
        pass,
        format!(
            "accuracy default {:.3} / no_bridge {:.3} / acoustic {:.3}; FD default {:.3} / no_bridge {:.3} / acoustic {:.3}",
            d.conditioning_accuracy,
            nb.conditioning_accuracy,
            ac.conditioning_accuracy,
            d.frechet_distance,
            nb.frechet_distance,
            ac.frechet_distance
        ),
    ))
}

/// Checksums of every reproducible artifact, keyed by relative path.
fn artifact_checksums(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| star_core::Error::Invalid(e.to_string()))? {
            let path = entry.map_err(|e| star_core::Error::Invalid(e.to_string()))?.path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if rel == "logs" || rel.starts_with("reports/latency.") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, file_checksum(&path)?);
            }
        }
    }
    Ok(out)
}

fn criterion_9() -> Result<Outcome> {
    let base = tempfile::tempdir().map_err(|e| star_core::Error::Invalid(e.to_string()))?;
    let mut sums = Vec::new();
    for run in ["a", "b"] {
        let p = Pipeline::new(tiny_config(&base.path().join(run))?)?;
        p.run_all()?;
        sums.push(artifact_checksums(&p.layout.root)?);
    }
    let differing: Vec<&String> = sums[0]
        .iter()
        .filter(|(k, v)| sums[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .chain(sums[1].keys().filter(|k| !sums[0].contains_key(*k)))
        .collect();
    let wavs = sums[0].keys().filter(|k| k.ends_with(".wav")).count();
    let ckpts = sums[0].keys().filter(|k| k.ends_with(".safetensors")).count();
    let reports = sums[0].keys().filter(|k| k.starts_with("reports/")).count();
    Ok(if differing.is_empty() {
        outcome(
            true,
            format!(
                "two runs identical over {} files ({ckpts} checkpoints, {wavs} WAVs, {reports} reports; wall-clock latency excluded)",
                sums[0].len()
            ),
        )
    } else {
        outcome(false, format!("differing artifacts: {differing:?}"))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Result<Outcome>, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &dyn Fn() -> Result<Outcome>| {
        let start = Instant::now();
        let r = f();
        results.push((n, name, r, start.elapsed().as_secs_f64()));
    };
    timed(1, "equation suite", &criterion_1);
    timed(2, "gradient checks", &criterion_2);
    timed(3, "oracle equivalence", &criterion_3);
    timed(9, "determinism", &criterion_9);
    match reference_run() {
        Ok(reference) => {
            timed(4, "stage-1 ordering", &|| criterion_4(&reference));
            timed(5, "end-to-end generation", &|| criterion_5(&reference));
            timed(6, "error propagation", &|| criterion_6(&reference));
            timed(7, "latency ordering", &|| criterion_7(&reference));
            timed(8, "ablation orderings", &|| criterion_8(&reference));
        }
        Err(e) => {
            for (n, name) in [
                (4, "stage-1 ordering"),
                (5, "end-to-end generation"),
                (6, "error propagation"),
                (7, "latency ordering"),
                (8, "ablation orderings"),
            ] {
                results.push((n, name, Err(star_core::Error::Invalid(format!("reference run failed: {e}"))), 0.0));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r, secs) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {n} {} {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
