//! Plain-text `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aux_targets::AuxConfig;
use crate::cacr::ModalityOrder;
use crate::error::{Error, Result};
use crate::losses::{LossToggles, LovaszClasses};
use crate::metrics::{MetricOptions, ZeroClass};
use crate::model::{ModelConfig, Modules, Preset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rgb,
    Thermal,
    Gcm,
    Full,
    /// `rgb → thermal → gcm → full` in one run.
    All,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Rgb => "rgb",
            Stage::Thermal => "thermal",
            Stage::Gcm => "gcm",
            Stage::Full => "full",
            Stage::All => "all",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Stage::Rgb),
            "thermal" => Ok(Stage::Thermal),
            "gcm" => Ok(Stage::Gcm),
            "full" => Ok(Stage::Full),
            "all" => Ok(Stage::All),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    Enet,
    Uniform,
}

impl FromStr for ClassWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enet" => Ok(ClassWeighting::Enet),
            "uniform" => Ok(ClassWeighting::Uniform),
            _ => Err(Error::Config(format!("unknown class weighting `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    pub stage: Stage,
    pub steps_rgb: usize,
    pub steps_thermal: usize,
    pub steps_gcm: usize,
    pub steps_full: usize,
    /// Cap on the summed steps of every stage in this run.
    pub max_steps: usize,
    /// Validation cadence in steps; 0 means once per epoch.
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub modules: Modules,
    pub losses: LossToggles,
    pub lovasz_classes: LovaszClasses,
    pub class_weights: ClassWeighting,
    pub modality_order: ModalityOrder,
    pub metrics: MetricOptions,
    pub aux: AuxConfig,
    pub augment_flip: bool,
    pub width_multiplier: f64,
    pub gcm_channels: Option<usize>,
    pub da_reduction: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub arlm_width: Option<usize>,
    pub imagenet_pretrained: bool,
    /// Per-channel `(x − mean) / std` after scaling to `[0, 1]`; RGB then thermal.
    pub norm_mean: [f32; 4],
    pub norm_std: [f32; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Toy,
            lr: 5e-4,
            batch_size: 8,
            stage: Stage::All,
            steps_rgb: 300,
            steps_thermal: 300,
            steps_gcm: 300,
            steps_full: 1100,
            max_steps: 2000,
            eval_every: 0,
            patience: 10,
            min_delta: 1e-4,
            seed: 0,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            modules: Modules::default(),
            losses: LossToggles::default(),
            lovasz_classes: LovaszClasses::Present,
            class_weights: ClassWeighting::Enet,
            modality_order: ModalityOrder::RgbFirst,
            metrics: MetricOptions::default(),
            aux: AuxConfig::default(),
            augment_flip: true,
            width_multiplier: 1.0,
            gcm_channels: None,
            da_reduction: None,
            decoder_hidden: None,
            arlm_width: None,
            imagenet_pretrained: false,
            norm_mean: [0.0; 4],
            norm_std: [1.0; 4],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse4(key: &str, value: &str) -> Result<[f32; 4]> {
    let v = value
        .split(',')
        .map(|x| parse::<f32>(key, x.trim()))
        .collect::<Result<Vec<_>>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs four comma-separated values")))
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.preset = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "stage" => self.stage = v.parse()?,
            "steps_rgb" => self.steps_rgb = parse(key, v)?,
            "steps_thermal" => self.steps_thermal = parse(key, v)?,
            "steps_gcm" => self.steps_gcm = parse(key, v)?,
            "steps_full" => self.steps_full = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "min_delta" => self.min_delta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_root" => self.data_root = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "enable_cacr" => self.modules.cacr = parse_bool(key, v)?,
            "enable_gcm" => self.modules.gcm = parse_bool(key, v)?,
            "enable_da" => self.modules.da = parse_bool(key, v)?,
            "enable_arlm" => self.modules.arlm = parse_bool(key, v)?,
            "enable_thermal" => self.modules.thermal = parse_bool(key, v)?,
            "loss_target" => self.losses.target = parse_bool(key, v)?,
            "loss_att" => self.losses.attention = parse_bool(key, v)?,
            "loss_binary" => self.losses.binary = parse_bool(key, v)?,
            "loss_boundary" => self.losses.boundary = parse_bool(key, v)?,
            "loss_decoder" => self.losses.decoder = parse_bool(key, v)?,
            "lovasz_classes" => self.lovasz_classes = v.parse()?,
            "class_weights" => self.class_weights = v.parse()?,
            "modality_order" => self.modality_order = v.parse()?,
            "zero_class" => self.metrics.zero_class = v.parse::<ZeroClass>()?,
            "include_unlabeled" => self.metrics.include_unlabeled = parse_bool(key, v)?,
            "aux_dilation" => self.aux.dilation = parse(key, v)?,
            "aux_sigma" => self.aux.sigma = parse(key, v)?,
            "augment_flip" => self.augment_flip = parse_bool(key, v)?,
            "width_multiplier" => self.width_multiplier = parse(key, v)?,
            "gcm_channels" => self.gcm_channels = parse_opt(key, v)?,
            "da_reduction" => self.da_reduction = parse_opt(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse_opt(key, v)?,
            "arlm_width" => self.arlm_width = parse_opt(key, v)?,
            "imagenet_pretrained" => self.imagenet_pretrained = parse_bool(key, v)?,
            "norm_mean" => self.norm_mean = parse4(key, v)?,
            "norm_std" => self.norm_std = parse4(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `--key=value` (or `key=value`) overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let kv = a.strip_prefix("--").unwrap_or(a);
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not --key=value")))?;
            self.set(&k.replace('-', "_"), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("norm_std entries must be positive".into()));
        }
        if self.aux.dilation % 2 == 0 {
            return Err(Error::Config("aux_dilation must be odd".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::preset(self.preset, num_classes);
        m.backbone.width_multiplier = self.width_multiplier;
        m.gcm_channels = self.gcm_channels.unwrap_or(m.gcm_channels);
        m.da_reduction = self.da_reduction.unwrap_or(m.da_reduction);
        m.decoder_hidden = self.decoder_hidden.unwrap_or(m.decoder_hidden);
        m.arlm_width = self.arlm_width.unwrap_or(m.arlm_width);
        m.modules = self.modules;
        m.modality_order = self.modality_order;
        m.imagenet_pretrained = self.imagenet_pretrained;
        m
    }

    pub fn stage_steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Rgb => self.steps_rgb,
            Stage::Thermal => self.steps_thermal,
            Stage::Gcm => self.steps_gcm,
            Stage::Full => self.steps_full,
            Stage::All => self.steps_rgb + self.steps_thermal + self.steps_gcm + self.steps_full,
        }
    }

    /// Every key in a stable order, parseable by [`TrainConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let o = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let l4 = |v: [f32; 4]| v.map(|x| x.to_string()).join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv(
            "preset",
            match self.preset {
                Preset::Toy => "toy".into(),
                Preset::Paper => "paper".into(),
            },
        );
        kv("lr", format!("{:e}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("stage", self.stage.as_str().into());
        kv("steps_rgb", self.steps_rgb.to_string());
        kv("steps_thermal", self.steps_thermal.to_string());
        kv("steps_gcm", self.steps_gcm.to_string());
        kv("steps_full", self.steps_full.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("patience", self.patience.to_string());
        kv("min_delta", format!("{:e}", self.min_delta));
        kv("seed", self.seed.to_string());
        kv("data_root", self.data_root.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("enable_cacr", b(self.modules.cacr).into());
        kv("enable_gcm", b(self.modules.gcm).into());
        kv("enable_da", b(self.modules.da).into());
        kv("enable_arlm", b(self.modules.arlm).into());
        kv("enable_thermal", b(self.modules.thermal).into());
        kv("loss_target", b(self.losses.target).into());
        kv("loss_att", b(self.losses.attention).into());
        kv("loss_binary", b(self.losses.binary).into());
        kv("loss_boundary", b(self.losses.boundary).into());
        kv("loss_decoder", b(self.losses.decoder).into());
        kv(
            "lovasz_classes",
            match self.lovasz_classes {
                LovaszClasses::Present => "present".into(),
                LovaszClasses::All => "all".into(),
            },
        );
        kv(
            "class_weights",
            match self.class_weights {
                ClassWeighting::Enet => "enet".into(),
                ClassWeighting::Uniform => "uniform".into(),
            },
        );
        kv(
            "modality_order",
            match self.modality_order {
                ModalityOrder::RgbFirst => "rgb_first".into(),
                ModalityOrder::ThermalFirst => "thermal_first".into(),
            },
        );
        kv(
            "zero_class",
            match self.metrics.zero_class {
                ZeroClass::Skip => "skip".into(),
                ZeroClass::Zero => "zero".into(),
            },
        );
        kv("include_unlabeled", b(self.metrics.include_unlabeled).into());
        kv("aux_dilation", self.aux.dilation.to_string());
        kv("aux_sigma", self.aux.sigma.to_string());
        kv("augment_flip", b(self.augment_flip).into());
        kv("width_multiplier", self.width_multiplier.to_string());
        kv("gcm_channels", o(self.gcm_channels));
        kv("da_reduction", o(self.da_reduction));
        kv("decoder_hidden", o(self.decoder_hidden));
        kv("arlm_width", o(self.arlm_width));
        kv("imagenet_pretrained", b(self.imagenet_pretrained).into());
        kv("norm_mean", l4(self.norm_mean));
        kv("norm_std", l4(self.norm_std));
        s
    }
}
