//! One-factor ablations around a base configuration, all sharing the seed,
//! step budget and data order.

use std::path::Path;

use super::data::Corpus;
use super::train::{mean_mcd_dtw, mean_mel_l1, speaker_similarity, Trainer};
use super::{fusion_name, injection_name, Config};
use crate::backbone::InjectionSite;
use crate::error::{Error, Result};
use crate::speaker::StreamFusion;

#[derive(Clone, Copy)]
pub struct Variant {
    pub name: &'static str,
    apply: fn(&mut Config),
}

impl Variant {
    pub fn config(&self, base: &Config) -> Config {
        let mut c = base.clone();
        (self.apply)(&mut c);
        c
    }
}

pub const VARIANTS: &[Variant] = &[
    Variant {
        name: "baseline",
        apply: |_| {},
    },
    Variant {
        name: "no-negation",
        apply: |c| c.negation = false,
    },
    Variant {
        name: "single-stream",
        apply: |c| c.n_streams = 1,
    },
    Variant {
        name: "concat-fusion",
        apply: |c| c.stream_fusion = StreamFusion::Concat,
    },
    Variant {
        name: "encoder-only",
        apply: |c| c.injection = InjectionSite::Encoder,
    },
    Variant {
        name: "decoder-only",
        apply: |c| c.injection = InjectionSite::Decoder,
    },
];

/// Looks up variants by name; an empty list selects all of them.
pub fn select_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(VARIANTS.to_vec());
    }
    names
        .iter()
        .map(|n| {
            VARIANTS
                .iter()
                .copied()
                .find(|v| v.name == n)
                .ok_or_else(|| {
                    let known: Vec<_> = VARIANTS.iter().map(|v| v.name).collect();
                    Error::usage(format!(
                        "unknown ablation {n:?}; known: {}",
                        known.join(", ")
                    ))
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    pub negation: bool,
    pub n_streams: usize,
    pub stream_fusion: String,
    pub injection: String,
    pub steps: u64,
    pub final_loss: f64,
    /// Teacher-forced mel L1 on the training utterances.
    pub mel_l1: f64,
    pub heldout_mcd_dtw: f64,
    pub margin: f64,
    pub centered_margin: f64,
}

pub const ABLATION_HEADER: [&str; 12] = [
    "name",
    "config_hash",
    "negation",
    "n_streams",
    "stream_fusion",
    "injection",
    "steps",
    "final_loss",
    "mel_l1",
    "heldout_mcd_dtw",
    "margin",
    "centered_margin",
];

impl AblationRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.config_hash.clone(),
            self.negation.to_string(),
            self.n_streams.to_string(),
            self.stream_fusion.clone(),
            self.injection.clone(),
            self.steps.to_string(),
            format!("{:?}", self.final_loss),
            format!("{:?}", self.mel_l1),
            format!("{:?}", self.heldout_mcd_dtw),
            format!("{:?}", self.margin),
            format!("{:?}", self.centered_margin),
        ]
    }
}

/// Trains and evaluates one variant.
pub fn run_variant(
    variant: &Variant,
    base: &Config,
    corpus: &Corpus,
    steps: u64,
) -> Result<AblationRow> {
    let cfg = variant.config(base);
    let mut trainer = Trainer::new(&cfg)?;
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        final_loss = trainer.train_step(&corpus.train)?.loss.total;
    }
    let crop = cfg.ref_crop;
    let (m, s) = (&trainer.model, &trainer.store);
    let sim = speaker_similarity(m, s, &corpus.heldout, &corpus.train, crop)?;
    Ok(AblationRow {
        name: variant.name.to_string(),
        config_hash: trainer.hash.clone(),
        negation: cfg.negation,
        n_streams: cfg.n_streams,
        stream_fusion: fusion_name(cfg.stream_fusion).to_string(),
        injection: injection_name(cfg.injection).to_string(),
        steps,
        final_loss,
        mel_l1: mean_mel_l1(m, s, &corpus.train, crop)?,
        heldout_mcd_dtw: mean_mcd_dtw(m, s, &corpus.heldout, crop)?,
        margin: sim.raw.margin,
        centered_margin: sim.centered.margin,
    })
}

/// Runs every variant in order, calling `on_row` after each.
pub fn run_ablation(
    variants: &[Variant],
    base: &Config,
    corpus: &Corpus,
    steps: u64,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let row = run_variant(v, base, corpus, steps)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(ABLATION_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r.record())
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
