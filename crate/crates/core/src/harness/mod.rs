//! Configuration, synthetic data, checkpoints and training.

mod ablate;
mod checkpoint;
mod config;
mod data;
mod gradsuite;
mod train;

pub use ablate::{
    run_ablation, run_variant, select_variants, write_ablation_csv, AblationRow, Variant,
    ABLATION_HEADER, VARIANTS,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{fusion_name, injection_name, pooling_name, Config};
pub use data::{
    corpus_files, phoneme_inventory, read_manifest, render, samples_for_frames,
    synthesize_utterance, Corpus, CorpusSpec, Formants, ManifestRow, SyntheticSpeaker, Utterance,
    HELDOUT_MANIFEST, MANIFEST,
};
pub use gradsuite::{run_suite, suite_names, SuiteEntry, SUITE_STEP, SUITE_THRESHOLD};
pub use train::{
    batch_indices, build_model, center_crop, checkpoint_path, crop_audio, embed, load_model,
    mean_mcd_dtw, mean_mel_l1, run_training, speaker_similarity, synthesize, RunOptions,
    RunOutcome, SimilarityEval, StepLog, Trainer,
};

use crate::error::{Error, Result};

/// Environment variable capping worker threads for file-level and
/// per-sample parallelism.
pub const THREADS_ENV: &str = "CIF_TTS_THREADS";

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker threads: {e}")))
}

/// Sizes rayon's global pool from [`THREADS_ENV`]; a second call is a no-op.
pub fn install_global_pool() -> Result<()> {
    let n = thread_count()?;
    // build_global only fails when a global pool already exists
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
