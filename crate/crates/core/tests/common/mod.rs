//! Shared fixtures for the integration tests.

use std::path::Path;

use star_core::pipeline::RunConfig;
use star_core::Result;

/// A configuration small enough to run every stage twice in seconds.
pub fn tiny_config(out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default().with_overrides(
        &[
            "corpus.n_train=24",
            "corpus.n_val=6",
            "corpus.n_test=8",
            "corpus.duration_s=0.5",
            "semantic_encoder.epochs=2",
            "semantic_encoder.width=16",
            "acoustic_encoder.epochs=2",
            "acoustic_encoder.width=16",
            "acoustic_encoder.bottleneck=8",
            "bridge.width=16",
            "bridge.num_queries=4",
            "probe.max_epochs=3",
            "vae.epochs=2",
            "flow.blocks=1",
            "flow.hidden=16",
            "flow.cond_width=16",
            "flow.time_embed_width=16",
            "tta.epochs=2",
            "stage2.epochs=2",
            "sampler.nfe=3",
            "eval.seeds=[1, 2]",
            "oracle.epochs=5",
            "oracle.embed_dim=4",
            "oracle.min_f1=0.0",
        ]
        .map(String::from),
    )?;
    cfg.run.out_dir = out.to_path_buf();
    Ok(cfg)
}
