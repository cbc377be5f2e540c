mod commands;
mod phonemes;

use std::path::PathBuf;
use std::process::ExitCode;

use cif_tts::harness::Config;
use cif_tts::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cif-tts",
    version,
    about = "Zero-shot multi-speaker TTS acoustic model toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that builds a model or corpus.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic-speaker corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: the configured data_dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train on a generated corpus, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory (default: the configured data_dir).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Run directory for log.csv and checkpoints (default: out_dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Total step count to reach (default: max_steps).
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
        /// Checkpoint to resume from.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Zero-shot synthesis of a phoneme sequence in a reference voice.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Whitespace-separated phoneme ids, or symbols when --vocab is given.
        #[arg(long, value_name = "PATH")]
        phonemes: PathBuf,
        /// One symbol per line; the first line is id 0.
        #[arg(long, value_name = "PATH")]
        vocab: Option<PathBuf>,
        /// Reference recording (PCM-16 WAV).
        #[arg(long = "ref", value_name = "WAV")]
        reference: PathBuf,
        /// Output prefix; writes PREFIX.mel0 and PREFIX.csv.
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Export speaker embeddings for every utterance of a manifest as CSV.
    SpeakerEmbed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Manifest CSV (default: the held-out manifest of data_dir).
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Output CSV (default: stdout).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// MCD with and without DTW over (reference, synthesis) pairs.
    EvalMcd {
        /// CSV with columns ref_path,syn_path (MEL0 or WAV files).
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        /// Output CSV (default: stdout).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suite over ops, layers and the full model.
    GradCheck {
        /// Only entries whose name contains this text.
        #[arg(long, default_value = "")]
        filter: String,
        /// Also write the results as CSV.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one-factor variants around the configuration.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long, value_name = "PATH", default_value = "ablation.csv")]
        out: PathBuf,
        /// Steps per variant (default: max_steps).
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
        /// Comma-separated variant names (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    cif_tts::harness::install_global_pool()?;
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.load()?, out),
        Command::Train {
            cfg,
            data,
            out,
            steps,
            checkpoint,
        } => commands::train(cfg.load()?, data, out, steps, checkpoint),
        Command::Synth {
            cfg,
            checkpoint,
            phonemes,
            vocab,
            reference,
            out,
        } => commands::synth(
            &cfg.load()?,
            &checkpoint,
            &phonemes,
            vocab.as_deref(),
            &reference,
            &out,
        ),
        Command::SpeakerEmbed {
            cfg,
            checkpoint,
            manifest,
            out,
        } => commands::speaker_embed(&cfg.load()?, &checkpoint, manifest, out.as_deref()),
        Command::EvalMcd { pairs, out } => commands::eval_mcd(&pairs, out.as_deref()),
        Command::GradCheck { filter, out } => commands::grad_check(&filter, out.as_deref()),
        Command::Ablate {
            cfg,
            data,
            out,
            steps,
            only,
        } => commands::ablate(&cfg.load()?, data, &out, steps, &only),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
