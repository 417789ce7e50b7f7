//! Run configuration and the flat `key = value` config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cls::{PsSource, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::seg::DEFAULT_TAU;
use crate::text::TextConfig;
use crate::tuner::TrainConfig;
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoTransform,
    GenericPrompts,
    LastLayerOnly,
    PsOnly,
    PcOnly,
}

impl Ablation {
    pub const ALL: [Self; 5] = [
        Self::NoTransform,
        Self::GenericPrompts,
        Self::LastLayerOnly,
        Self::PsOnly,
        Self::PcOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoTransform => "no_transform",
            Self::GenericPrompts => "generic_prompts",
            Self::LastLayerOnly => "last_layer_only",
            Self::PsOnly => "ps_only",
            Self::PcOnly => "pc_only",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_transform: bool,
    pub generic_prompts: bool,
    pub last_layer_only: bool,
    pub ps_only: bool,
    pub pc_only: bool,
}

impl Ablations {
    pub fn set(&mut self, a: Ablation) {
        match a {
            Ablation::NoTransform => self.no_transform = true,
            Ablation::GenericPrompts => self.generic_prompts = true,
            Ablation::LastLayerOnly => self.last_layer_only = true,
            Ablation::PsOnly => self.ps_only = true,
            Ablation::PcOnly => self.pc_only = true,
        }
    }

    pub fn is_set(&self, a: Ablation) -> bool {
        match a {
            Ablation::NoTransform => self.no_transform,
            Ablation::GenericPrompts => self.generic_prompts,
            Ablation::LastLayerOnly => self.last_layer_only,
            Ablation::PsOnly => self.ps_only,
            Ablation::PcOnly => self.pc_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ps_only && self.pc_only {
            return Err(Error::Config(
                "ps_only and pc_only are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Comma-separated names of the active flags.
    pub fn to_list(&self) -> String {
        Ablation::ALL
            .into_iter()
            .filter(|a| self.is_set(*a))
            .map(Ablation::name)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        let mut out = Self::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            out.set(name.parse()?);
        }
        Ok(out)
    }
}

/// Everything a pipeline command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub prompts: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub vit: VitConfig,
    pub text: TextConfig,
    pub tau: f32,
    pub alpha: f32,
    pub train: TrainConfig,
    pub ablations: Ablations,
    pub ps_source: PsSource,
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub threads: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub text_banner: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("semclip.ckpt"),
            prompts: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            vit: VitConfig::default(),
            text: TextConfig::default(),
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            train: TrainConfig::default(),
            ablations: Ablations::default(),
            ps_source: PsSource::Patches,
            seed: 42,
            threads: 0,
            n_way: 7,
            k_shot: 10,
            m_query: 200,
            text_banner: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Effective fusion weight after `ps_only` / `pc_only`.
    pub fn effective_alpha(&self) -> f32 {
        if self.ablations.ps_only {
            0.0
        } else if self.ablations.pc_only {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate()?;
        self.train.validate()?;
        self.ablations.validate()?;
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = value.into(),
            "prompts" => self.prompts = Some(value.into()),
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "image_size" => self.vit.image_size = parse(key, value)?,
            "patch_size" => self.vit.patch_size = parse(key, value)?,
            "width" => self.vit.width = parse(key, value)?,
            "heads" => self.vit.heads = parse(key, value)?,
            "blocks" => self.vit.blocks = parse(key, value)?,
            "layers_per_block" => self.vit.layers_per_block = parse(key, value)?,
            "mlp_ratio" => self.vit.mlp_ratio = parse(key, value)?,
            "text_vocab" => self.text.vocab = parse(key, value)?,
            "text_width" => self.text.width = parse(key, value)?,
            "text_depth" => self.text.depth = parse(key, value)?,
            "text_heads" => self.text.heads = parse(key, value)?,
            "embed_dim" => self.text.embed_dim = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "adam_eps" => self.train.eps = parse(key, value)?,
            "seg_loss_weight" => self.train.seg_loss_weight = parse(key, value)?,
            "ablate" => self.ablations = Ablations::parse_list(value)?,
            "ps_source" => self.ps_source = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "n_way" => self.n_way = parse(key, value)?,
            "k_shot" => self.k_shot = parse(key, value)?,
            "m_query" => self.m_query = parse(key, value)?,
            "text_banner" => self.text_banner = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// anything after `#` are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Renders the config in the file format; `parse_str` reads it back.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("checkpoint", self.checkpoint.display().to_string());
        if let Some(p) = &self.prompts {
            kv("prompts", p.display().to_string());
        }
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("image_size", self.vit.image_size.to_string());
        kv("patch_size", self.vit.patch_size.to_string());
        kv("width", self.vit.width.to_string());
        kv("heads", self.vit.heads.to_string());
        kv("blocks", self.vit.blocks.to_string());
        kv("layers_per_block", self.vit.layers_per_block.to_string());
        kv("mlp_ratio", self.vit.mlp_ratio.to_string());
        kv("text_vocab", self.text.vocab.to_string());
        kv("text_width", self.text.width.to_string());
        kv("text_depth", self.text.depth.to_string());
        kv("text_heads", self.text.heads.to_string());
        kv("embed_dim", self.text.embed_dim.to_string());
        kv("tau", self.tau.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lr", self.train.lr.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("beta1", self.train.beta1.to_string());
        kv("beta2", self.train.beta2.to_string());
        kv("adam_eps", self.train.eps.to_string());
        kv("seg_loss_weight", self.train.seg_loss_weight.to_string());
        kv("ablate", self.ablations.to_list());
        kv("ps_source", self.ps_source.name().to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("n_way", self.n_way.to_string());
        kv("k_shot", self.k_shot.to_string());
        kv("m_query", self.m_query.to_string());
        kv("text_banner", self.text_banner.to_string());
        s
    }
}
