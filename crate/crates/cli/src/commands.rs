use std::io::Write;
use std::path::{Path, PathBuf};

use cif_tts::backbone::PhonemeSequence;
use cif_tts::dsp::{
    load_wav, mel_spectrogram, mfcc, read_mel0, write_mel0, write_mel_csv, MelSpectrogram,
    DEFAULT_MFCC_COEFFS,
};
use cif_tts::eval::{mcd_dtw, mcd_plain};
use cif_tts::harness::{
    center_crop, embed, load_model, read_manifest, run_ablation, run_suite, run_training,
    select_variants, synthesize, write_ablation_csv, Checkpoint, Config, Corpus, CorpusSpec,
    RunOptions, Trainer, HELDOUT_MANIFEST, SUITE_STEP,
};
use cif_tts::{Error, Result};

use crate::phonemes::{parse_phonemes, parse_vocab};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// CSV sink on a file, or on stdout when no path is given.
fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn out_name(path: Option<&Path>) -> PathBuf {
    path.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("<stdout>"))
}

pub fn gen_data(cfg: &Config, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
    let corpus = Corpus::generate(&CorpusSpec::from_config(cfg))?;
    corpus.write(&dir)?;
    println!(
        "wrote {} training and {} held-out utterances to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(
    mut cfg: Config,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<u64>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = steps {
        cfg.max_steps = s;
    }
    let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let corpus = Corpus::load(&data_dir, cfg.vocab_size)?;
    let mut trainer = match &checkpoint {
        Some(p) => Trainer::from_checkpoint(&cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(&cfg)?,
    };
    log::info!(
        "training {} utterances from step {} to {} (config {})",
        corpus.train.len(),
        trainer.step,
        cfg.max_steps,
        &trainer.hash[..12]
    );
    let opts = RunOptions {
        out_dir: &out_dir,
        until: cfg.max_steps,
        checkpoint_every: cfg.checkpoint_every,
    };
    let outcome = run_training(&mut trainer, &corpus.train, &opts, |row| {
        if row.step % 50 == 0 {
            log::info!(
                "step {} loss {:.4} mel {:.4}",
                row.step,
                row.loss.total,
                row.loss.mel
            );
        }
    })?;
    match outcome.log.last() {
        Some(last) => println!(
            "step {} loss {:.6}; checkpoint {}",
            last.step + 1,
            last.loss.total,
            outcome.final_checkpoint.display()
        ),
        None => println!(
            "nothing to do; checkpoint {}",
            outcome.final_checkpoint.display()
        ),
    }
    Ok(())
}

pub fn synth(
    cfg: &Config,
    checkpoint: &Path,
    phonemes: &Path,
    vocab: Option<&Path>,
    reference: &Path,
    out: &Path,
) -> Result<()> {
    let (store, model) = load_model(cfg, &Checkpoint::load(checkpoint)?)?;
    let vocab = vocab.map(|p| parse_vocab(&read_text(p)?)).transpose()?;
    let ids = parse_phonemes(&read_text(phonemes)?, vocab.as_ref())?;
    let seq = PhonemeSequence::new(ids, cfg.vocab_size)?;
    let (mel, durations) = synthesize(&model, &store, &seq, &load_wav(reference)?)?;
    let mel = MelSpectrogram::new(mel)?;
    let (bin, text) = (out.with_extension("mel0"), out.with_extension("csv"));
    write_mel0(&bin, &mel)?;
    write_mel_csv(&text, &mel)?;
    let d: Vec<String> = durations.iter().map(|d| d.to_string()).collect();
    println!(
        "{} frames (durations {}) -> {}",
        mel.num_frames(),
        d.join(" "),
        bin.display()
    );
    Ok(())
}

pub fn speaker_embed(
    cfg: &Config,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let (store, model) = load_model(cfg, &Checkpoint::load(checkpoint)?)?;
    let manifest = manifest.unwrap_or_else(|| cfg.data_dir.join(HELDOUT_MANIFEST));
    let root = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(&manifest)?;
    let name = out_name(out);
    let mut w = csv_writer(out)?;
    let mut header = vec!["utterance_id".to_string(), "speaker_id".to_string()];
    let mut wrote_header = false;
    for row in &rows {
        let audio = center_crop(&load_wav(root.join(&row.wav))?, cfg.ref_crop)?;
        let e = embed(&model, &store, &audio)?;
        if !wrote_header {
            header.extend((0..e.len()).map(|k| format!("e{k}")));
            w.write_record(&header).map_err(|e| Error::csv(&name, e))?;
            wrote_header = true;
        }
        let mut rec = vec![row.utterance_id.clone(), row.speaker_id.to_string()];
        rec.extend(e.iter().map(|x| format!("{x:?}")));
        w.write_record(&rec).map_err(|e| Error::csv(&name, e))?;
    }
    w.flush().map_err(|e| Error::io(&name, e))?;
    log::info!(
        "embedded {} utterances from {}",
        rows.len(),
        manifest.display()
    );
    Ok(())
}

/// A mel from `.mel0`, or computed from a `.wav`.
fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        mel_spectrogram(&load_wav(path)?)
    } else {
        read_mel0(path)
    }
}

pub fn eval_mcd(pairs: &Path, out: Option<&Path>) -> Result<()> {
    let root = pairs.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(pairs).map_err(|e| Error::csv(pairs, e))?;
    let headers = r.headers().map_err(|e| Error::csv(pairs, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::usage(format!("{} has no {name} column", pairs.display())))
    };
    let (ri, si) = (col("ref_path")?, col("syn_path")?);
    let name = out_name(out);
    let mut w = csv_writer(out)?;
    w.write_record([
        "ref_path",
        "syn_path",
        "mcd_dtw",
        "mcd_plain",
        "path_length",
    ])
    .map_err(|e| Error::csv(&name, e))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(pairs, e))?;
        let (rp, sp) = (
            rec.get(ri).unwrap_or("").trim(),
            rec.get(si).unwrap_or("").trim(),
        );
        let a = mfcc(&load_mel(&root.join(rp))?, DEFAULT_MFCC_COEFFS)?;
        let b = mfcc(&load_mel(&root.join(sp))?, DEFAULT_MFCC_COEFFS)?;
        let dtw = mcd_dtw(&a, &b)?;
        let plain = if a.num_frames() == b.num_frames() {
            format!("{:?}", mcd_plain(&a, &b)?.value)
        } else {
            String::new()
        };
        w.write_record([
            rp.to_string(),
            sp.to_string(),
            format!("{:?}", dtw.value),
            plain,
            dtw.path_length.to_string(),
        ])
        .map_err(|e| Error::csv(&name, e))?;
    }
    w.flush().map_err(|e| Error::io(&name, e))
}

pub fn grad_check(filter: &str, out: Option<&Path>) -> Result<()> {
    let t0 = std::time::Instant::now();
    let entries = run_suite(SUITE_STEP, filter, |e| {
        println!(
            "{:<6} {:<34} max_rel {:.3e}  coords {:>4}  kinks {:>3}  {:.2}s",
            if e.passed() { "PASS" } else { "FAIL" },
            e.name,
            e.report.max_rel_error,
            e.report.coords_checked,
            e.report.kinks_skipped,
            e.seconds
        );
    })?;
    if entries.is_empty() {
        return Err(Error::usage(format!(
            "no gradient check matches {filter:?}"
        )));
    }
    if let Some(p) = out {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
        w.write_record([
            "name",
            "max_rel_error",
            "coords_checked",
            "kinks_skipped",
            "seconds",
            "passed",
        ])
        .map_err(|e| Error::csv(p, e))?;
        for e in &entries {
            w.write_record([
                e.name.clone(),
                format!("{:?}", e.report.max_rel_error),
                e.report.coords_checked.to_string(),
                e.report.kinks_skipped.to_string(),
                format!("{:.3}", e.seconds),
                e.passed().to_string(),
            ])
            .map_err(|e| Error::csv(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.name.as_str())
        .collect();
    println!(
        "{} checks, {} failed, {:.1}s",
        entries.len(),
        failed.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}

pub fn ablate(
    cfg: &Config,
    data: Option<PathBuf>,
    out: &Path,
    steps: Option<u64>,
    only: &[String],
) -> Result<()> {
    let variants = select_variants(only)?;
    let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
    let corpus = Corpus::load(&data_dir, cfg.vocab_size)?;
    if corpus.heldout.is_empty() {
        return Err(Error::usage(format!(
            "{} has no held-out split",
            data_dir.display()
        )));
    }
    let steps = steps.unwrap_or(cfg.max_steps);
    let rows = run_ablation(&variants, cfg, &corpus, steps, |r| {
        println!(
            "{:<14} mel_l1 {:.4}  mcd_dtw {:.3}  margin {:.4}  centered {:.4}",
            r.name, r.mel_l1, r.heldout_mcd_dtw, r.margin, r.centered_margin
        );
    })?;
    write_ablation_csv(out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
