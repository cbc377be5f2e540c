//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, InjectionSite, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::speaker::{SpeakerConfig, StreamFusion, TemporalPooling};

/// Every setting of a run. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub negation: bool,
    pub n_streams: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub stream_fusion: StreamFusion,
    pub temporal_pooling: TemporalPooling,
    pub injection: InjectionSite,
    pub speaker_dropout: f64,

    pub vocab_size: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub backbone_heads: usize,
    pub ff_filter: usize,
    pub ff_kernel: usize,
    pub dropout: f64,
    pub variance_dropout: f64,

    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Reference crop length in samples; 0 uses whole utterances.
    pub ref_crop: usize,
    pub seed: u64,

    pub n_speakers: usize,
    pub n_utterances: usize,
    pub heldout_utterances: usize,

    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let s = SpeakerConfig::default();
        let b = BackboneConfig::default();
        let a = AdamConfig::default();
        Config {
            negation: s.negation,
            n_streams: s.n_streams,
            n_heads: s.n_heads,
            depth: s.depth,
            stream_fusion: s.fusion,
            temporal_pooling: s.temporal,
            injection: b.injection,
            speaker_dropout: s.dropout,
            vocab_size: b.vocab_size,
            text_layers: b.text_layers,
            fusion_layers: b.fusion_layers,
            decoder_layers: b.decoder_layers,
            backbone_heads: b.heads,
            ff_filter: b.ff_filter,
            ff_kernel: b.ff_kernel,
            dropout: b.dropout,
            variance_dropout: b.variance_dropout,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            lr_scale: 1.0,
            warmup_steps: 400,
            clip_norm: 1.0,
            batch_size: 4,
            ref_crop: 3200,
            seed: 0,
            n_speakers: 4,
            n_utterances: 8,
            heldout_utterances: 4,
            max_steps: 2000,
            checkpoint_every: 500,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

pub fn fusion_name(f: StreamFusion) -> &'static str {
    match f {
        StreamFusion::Attention => "attention",
        StreamFusion::Concat => "concat",
    }
}

pub fn pooling_name(p: TemporalPooling) -> &'static str {
    match p {
        TemporalPooling::Attention => "attention",
        TemporalPooling::Mean => "mean",
    }
}

pub fn injection_name(i: InjectionSite) -> &'static str {
    match i {
        InjectionSite::Encoder => "encoder",
        InjectionSite::Decoder => "decoder",
        InjectionSite::Both => "both",
    }
}

/// Keys that change what a training step computes, in hash order.
const HASHED: &[&str] = &[
    "negation",
    "n_streams",
    "n_heads",
    "depth",
    "stream_fusion",
    "temporal_pooling",
    "injection",
    "speaker_dropout",
    "vocab_size",
    "text_layers",
    "fusion_layers",
    "decoder_layers",
    "backbone_heads",
    "ff_filter",
    "ff_kernel",
    "dropout",
    "variance_dropout",
    "beta1",
    "beta2",
    "adam_eps",
    "lr_scale",
    "warmup_steps",
    "clip_norm",
    "batch_size",
    "ref_crop",
    "seed",
    "n_speakers",
    "n_utterances",
    "heldout_utterances",
];

/// Run-length and file-location keys; excluded from the hash so a run can be
/// extended or moved without invalidating its checkpoints.
const UNHASHED: &[&str] = &["max_steps", "checkpoint_every", "data_dir", "out_dir"];

impl Config {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            speaker: SpeakerConfig {
                negation: self.negation,
                n_streams: self.n_streams,
                n_heads: self.n_heads,
                depth: self.depth,
                fusion: self.stream_fusion,
                temporal: self.temporal_pooling,
                dropout: self.speaker_dropout,
            },
            backbone: BackboneConfig {
                vocab_size: self.vocab_size,
                text_layers: self.text_layers,
                fusion_layers: self.fusion_layers,
                decoder_layers: self.decoder_layers,
                heads: self.backbone_heads,
                ff_filter: self.ff_filter,
                ff_kernel: self.ff_kernel,
                dropout: self.dropout,
                variance_dropout: self.variance_dropout,
                injection: self.injection,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn get(&self, key: &str) -> String {
        match key {
            "negation" => self.negation.to_string(),
            "n_streams" => self.n_streams.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "depth" => self.depth.to_string(),
            "stream_fusion" => fusion_name(self.stream_fusion).into(),
            "temporal_pooling" => pooling_name(self.temporal_pooling).into(),
            "injection" => injection_name(self.injection).into(),
            "speaker_dropout" => format!("{:?}", self.speaker_dropout),
            "vocab_size" => self.vocab_size.to_string(),
            "text_layers" => self.text_layers.to_string(),
            "fusion_layers" => self.fusion_layers.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "backbone_heads" => self.backbone_heads.to_string(),
            "ff_filter" => self.ff_filter.to_string(),
            "ff_kernel" => self.ff_kernel.to_string(),
            "dropout" => format!("{:?}", self.dropout),
            "variance_dropout" => format!("{:?}", self.variance_dropout),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "lr_scale" => format!("{:?}", self.lr_scale),
            "warmup_steps" => self.warmup_steps.to_string(),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "batch_size" => self.batch_size.to_string(),
            "ref_crop" => self.ref_crop.to_string(),
            "seed" => self.seed.to_string(),
            "n_speakers" => self.n_speakers.to_string(),
            "n_utterances" => self.n_utterances.to_string(),
            "heldout_utterances" => self.heldout_utterances.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("unknown config key {key}"),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::usage(format!("{key}: cannot parse {v:?}")))
        }
        let bad = || Error::usage(format!("{key}: invalid value {value:?}"));
        match key {
            "negation" => self.negation = parse_bool(value).ok_or_else(bad)?,
            "n_streams" => self.n_streams = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "stream_fusion" => {
                self.stream_fusion = match value {
                    "attention" => StreamFusion::Attention,
                    "concat" => StreamFusion::Concat,
                    _ => return Err(bad()),
                }
            }
            "temporal_pooling" => {
                self.temporal_pooling = match value {
                    "attention" => TemporalPooling::Attention,
                    "mean" => TemporalPooling::Mean,
                    _ => return Err(bad()),
                }
            }
            "injection" => {
                self.injection = match value {
                    "encoder" | "enc" => InjectionSite::Encoder,
                    "decoder" | "dec" => InjectionSite::Decoder,
                    "both" => InjectionSite::Both,
                    _ => return Err(bad()),
                }
            }
            "speaker_dropout" => self.speaker_dropout = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "text_layers" => self.text_layers = num(key, value)?,
            "fusion_layers" => self.fusion_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "backbone_heads" => self.backbone_heads = num(key, value)?,
            "ff_filter" => self.ff_filter = num(key, value)?,
            "ff_kernel" => self.ff_kernel = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "variance_dropout" => self.variance_dropout = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "lr_scale" => self.lr_scale = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "ref_crop" => self.ref_crop = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_speakers" => self.n_speakers = num(key, value)?,
            "n_utterances" => self.n_utterances = num(key, value)?,
            "heldout_utterances" => self.heldout_utterances = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected key = value", n + 1))
            })?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::usage(format!("config line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_streams", self.n_streams),
            ("n_heads", self.n_heads),
            ("depth", self.depth),
            ("vocab_size", self.vocab_size),
            ("backbone_heads", self.backbone_heads),
            ("ff_filter", self.ff_filter),
            ("ff_kernel", self.ff_kernel),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|x| x.1 == 0) {
            return Err(Error::usage(format!("{k} must be positive")));
        }
        if self.n_speakers < 2 || self.n_utterances < 2 {
            return Err(Error::usage(
                "a corpus needs at least 2 speakers and 2 utterances each",
            ));
        }
        for (k, p) in [
            ("dropout", self.dropout),
            ("variance_dropout", self.variance_dropout),
            ("speaker_dropout", self.speaker_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::usage(format!("{k} must lie in [0, 1)")));
            }
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::usage(format!("{k} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0 && self.lr_scale > 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::usage(
                "adam_eps and lr_scale must be positive, clip_norm non-negative",
            ));
        }
        if self.ref_crop != 0 && self.ref_crop < crate::audio_encoder::DOWNSAMPLE {
            return Err(Error::usage(format!(
                "ref_crop must be 0 or at least {} samples",
                crate::audio_encoder::DOWNSAMPLE
            )));
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in HASHED.iter().chain(UNHASHED) {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// SHA-256 over the computation-affecting keys, as lowercase hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in HASHED {
            h.update(format!("{k}={}\n", self.get(k)).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
