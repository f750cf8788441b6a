//! `star`: run pipeline stages, generate audio from speech, print config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use star_core::pipeline::{generate_from_speech, GenerationBundle, Mode, Pipeline, RunConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Speech-to-audio generation pipeline")]
struct Cli {
    /// TOML run configuration (defaults apply to absent keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampler steps (sampler.nfe).
    #[arg(long, global = true)]
    nfe: Option<usize>,
    /// Classifier-free guidance scale (sampler.guidance_scale).
    #[arg(long, global = true)]
    guidance: Option<f64>,
    /// Sway coefficient in [-1, 0] (sampler.sway_s).
    #[arg(long = "sway-s", global = true, allow_hyphen_values = true)]
    sway_s: Option<f64>,
    /// Sampler noise seed (sampler.seed).
    #[arg(long = "sampler-seed", global = true)]
    sampler_seed: Option<u64>,
    /// ASR substitution rate (asr.substitution_rate).
    #[arg(long = "asr-sub-rate", global = true)]
    asr_sub_rate: Option<f64>,
    /// ASR deletion rate (asr.deletion_rate).
    #[arg(long = "asr-del-rate", global = true)]
    asr_del_rate: Option<f64>,
    /// ASR busy-work units per utterance (asr.fixed_overhead_ops).
    #[arg(long = "asr-overhead", global = true)]
    asr_overhead: Option<u64>,
    /// Arbitrary `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    BuildCorpus,
    PretrainEncoders,
    Stage1,
    TrainVae,
    PretrainTta,
    Stage2,
    /// One WAV per test utterance, or a single WAV for `--speech`
    Generate {
        #[arg(long, requires = "output")]
        speech: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        mode: String,
    },
    Benchmark,
    Evaluate,
    /// Every stage in order.
    All,
    /// Print the effective configuration.
    ShowConfig,
}

impl Cli {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut add = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        add("run.out_dir", self.out.as_ref().map(|p| format!("{:?}", p.display().to_string())));
        add("run.seed", self.seed.map(|v| v.to_string()));
        add("sampler.nfe", self.nfe.map(|v| v.to_string()));
        add("sampler.guidance_scale", self.guidance.map(|v| format!("{v:?}")));
        add("sampler.sway_s", self.sway_s.map(|v| format!("{v:?}")));
        add("sampler.seed", self.sampler_seed.map(|v| v.to_string()));
        add("asr.substitution_rate", self.asr_sub_rate.map(|v| format!("{v:?}")));
        add("asr.deletion_rate", self.asr_del_rate.map(|v| format!("{v:?}")));
        add("asr.fixed_overhead_ops", self.asr_overhead.map(|v| v.to_string()));
        o.extend(self.set.iter().cloned());
        o
    }

    fn run_config(&self) -> star_core::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides())
    }
}

fn run(cli: Cli) -> star_core::Result<()> {
    let config = cli.run_config()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let pipeline = Pipeline::new(config)?;
    let stage = match &cli.command {
        Command::BuildCorpus => Stage::BuildCorpus,
        Command::PretrainEncoders => Stage::PretrainEncoders,
        Command::Stage1 => Stage::Stage1,
        Command::TrainVae => Stage::TrainVae,
        Command::PretrainTta => Stage::PretrainTta,
        Command::Stage2 => Stage::Stage2,
        Command::Generate { speech: None, .. } => Stage::Generate,
        Command::Generate {
            speech: Some(speech),
            output,
            mode,
        } => {
            let mode: Mode = mode.parse()?;
            let bundle = GenerationBundle::load(&pipeline.layout, mode)?;
            let out = output.clone().expect("clap requires --output with --speech");
            let clip = generate_from_speech(
                speech,
                &bundle,
                &pipeline.config.sampler,
                pipeline.latent_len(),
                &out,
            )?;
            println!("wrote {} ({:.3} s)", out.display(), clip.duration_s());
            return Ok(());
        }
        Command::Benchmark => Stage::Benchmark,
        Command::Evaluate => Stage::Evaluate,
        Command::All => return pipeline.run_all(),
        Command::ShowConfig => unreachable!(),
    };
    pipeline.run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::parse_from(["star", "--nfe", "8", "--sway-s", "-0.5", "--asr-sub-rate", "0.3", "--out", "/tmp/r", "show-config"]);
        let cfg = cli.run_config().unwrap();
        assert_eq!(cfg.sampler.nfe, 8);
        assert_eq!(cfg.sampler.sway_s, -0.5);
        assert_eq!(cfg.asr.substitution_rate, 0.3);
        assert_eq!(cfg.run.out_dir, PathBuf::from("/tmp/r"));
    }

    #[test]
    fn set_overrides_nested_keys() {
        let cli = Cli::parse_from(["star", "--set", "stage2.epochs=3", "stage2"]);
        assert_eq!(cli.run_config().unwrap().stage2.epochs, 3);
    }
}
