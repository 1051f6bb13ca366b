//! Run configuration as a plain-text `key = value` file.
//!
//! A file may name a base `profile` (`paper` or `desk`, default `desk`);
//! every other key overrides a field of that profile. [`Config::render`]
//! writes every field, so a rendered file reproduces the run on its own.
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | root seed for initialization and pair sampling |
//! | `bands` | input band count; `0` takes it from the data |
//! | `endmembers` | unmixing endmember count r |
//! | `encoder` | `mlp` or `conv` |
//! | `unmix_hidden` | encoder hidden widths, comma-separated |
//! | `dim`, `heads`, `blocks`, `mlp_ratio` | backbone shape |
//! | `template_size`, `search_size`, `patch` | crop and patch sides in pixels |
//! | `head_channels`, `head_layers` | prediction head shape |
//! | `prompts`, `mrdm` | module toggles |
//! | `amd` | `adaptor_haar`, `haar`, `adaptor_split`, `split` |
//! | `operators` | `default`, `swapped`, `all_attention`, `all_conv`, `identity` |
//! | `fusion` | `fpfm`, `addition`, `conv`, `attention` |
//! | `injection_layers` | 1-based blocks that receive prompts |
//! | `backbone_input` | `false_color` or `branches` (6-channel M_L‖M_H) |
//! | `hf_width`, `hf_groups`, `fpfm_latent` | prompt module widths |
//! | `rho` | keep ratio of the relevance mask |
//! | `epochs`, `pairs_per_epoch`, `batch_size` | schedule |
//! | `lr`, `weight_decay`, `decay_after` | AdamW; lr ×0.1 once this fraction of steps is done |
//! | `mode` | `joint` or `frozen` (backbone fixed) |
//! | `lambda_u`, `lambda_ce`, `lambda_iou`, `lambda_l1` | loss weights |
//! | `warmup_steps` | steps that take the mask from the ground-truth box |
//! | `template_factor`, `search_factor` | crop side over √(w·h) |
//! | `center_jitter`, `scale_jitter` | search crop jitter |

use std::fmt;

use crate::backbone::BackboneConfig;
use crate::kv::{join, render, KvMap};
use crate::objectives::{HeadConfig, LossWeights};
use crate::prompts::{FusionStrategy, OperatorAssignment, PromptConfig};
use crate::unmixing::{AmdVariant, EncoderKind, UnmixConfig, BRANCH_CHANNELS};

use super::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Profile::Paper),
            "desk" => Some(Profile::Desk),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    /// Backbone parameters receive no updates.
    Frozen,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(TrainMode::Joint),
            "frozen" => Some(TrainMode::Frozen),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneInput {
    FalseColor,
    Branches,
}

impl BackboneInput {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "false_color" => Some(BackboneInput::FalseColor),
            "branches" => Some(BackboneInput::Branches),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneInput::FalseColor => "false_color",
            BackboneInput::Branches => "branches",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            BackboneInput::FalseColor => 3,
            BackboneInput::Branches => 2 * BRANCH_CHANNELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub endmembers: usize,
    pub encoder: EncoderKind,
    pub unmix_hidden: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub patch: usize,
    pub head_channels: usize,
    pub head_layers: usize,
    pub prompts: bool,
    pub mrdm: bool,
    pub amd: AmdVariant,
    pub operators: OperatorAssignment,
    pub fusion: FusionStrategy,
    pub injection_layers: Vec<usize>,
    pub backbone_input: BackboneInput,
    pub hf_width: usize,
    pub hf_groups: usize,
    pub fpfm_latent: usize,
    pub rho: f64,
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            template_size: self.template_size,
            search_size: self.search_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            in_channels: self.backbone_input.channels(),
        }
    }

    pub fn unmix(&self) -> UnmixConfig {
        UnmixConfig {
            bands: self.bands,
            endmembers: self.endmembers,
            hidden: self.unmix_hidden.clone(),
            encoder: self.encoder,
        }
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            dim: self.dim,
            branch_channels: BRANCH_CHANNELS,
            patch: self.patch,
            hf_width: self.hf_width,
            hf_groups: self.hf_groups,
            fpfm_latent: self.fpfm_latent,
            operators: self.operators,
            fusion: self.fusion,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            in_dim: self.dim,
            channels: self.head_channels,
            layers: self.head_layers,
            grid: self.search_size / self.patch,
            search_size: self.search_size,
        }
    }

    /// Whether the abundance decomposition is needed at all.
    pub fn needs_branches(&self) -> bool {
        self.prompts || self.backbone_input == BackboneInput::Branches
    }

    /// Channels entering the AMD adaptor.
    pub fn amd_inputs(&self) -> usize {
        if self.mrdm {
            self.endmembers
        } else {
            self.bands
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.bands < 3 {
            return bad(format!("bands must be ≥ 3, got {}", self.bands));
        }
        if self.endmembers < 2 {
            return bad(format!("r must be ≥ 2, got {}", self.endmembers));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        self.backbone().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(&l) = self.injection_layers.iter().find(|&&l| l == 0 || l > self.blocks) {
            return bad(format!("injection layer {l} outside 1..={}", self.blocks));
        }
        let mut sorted = self.injection_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.injection_layers {
            return bad("injection layers must be strictly increasing".into());
        }
        if self.head_layers == 0 || self.head_channels == 0 {
            return bad("head needs at least one layer and channel".into());
        }
        if self.hf_width == 0 || self.hf_width % self.hf_groups != 0 {
            return bad(format!("hf_width {} not divisible by {} groups", self.hf_width, self.hf_groups));
        }
        if self.needs_branches()
            && matches!(self.amd, AmdVariant::Haar | AmdVariant::Split)
            && self.amd_inputs() != 2 * BRANCH_CHANNELS
        {
            return bad(format!(
                "amd {} needs {} input channels, got {}",
                self.amd.as_str(),
                2 * BRANCH_CHANNELS,
                self.amd_inputs()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_after: f64,
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub warmup_steps: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// First step (0-based) run at the decayed rate.
    pub fn decay_step(&self) -> usize {
        (self.decay_after * self.total_steps() as f64).floor() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.decay_step() {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.weights.validate().map_err(|_| {
            HarnessError::Config(format!(
                "loss weights out of range: λ_u {} must lie in [0, 1], λ_ce {} in (0, 1)",
                self.weights.unmix, self.weights.ce
            ))
        })?;
        if self.batch_size == 0 || self.pairs_per_epoch == 0 || self.epochs == 0 {
            return bad("epochs, pairs_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {} invalid", self.lr, self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.decay_after) {
            return bad(format!("decay_after {} outside [0, 1]", self.decay_after));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return bad("jitter must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Full-size settings: 12 blocks of width 64, batch 16, lr 4e-5.
    pub fn paper() -> Self {
        Config {
            profile: Profile::Paper,
            seed: 0,
            model: ModelConfig {
                bands: 16,
                endmembers: 6,
                encoder: EncoderKind::Mlp,
                unmix_hidden: vec![32, 16],
                dim: 64,
                heads: 4,
                blocks: 12,
                mlp_ratio: 2,
                template_size: 32,
                search_size: 64,
                patch: 8,
                head_channels: 64,
                head_layers: 5,
                prompts: true,
                mrdm: true,
                amd: AmdVariant::AdaptorHaar,
                operators: OperatorAssignment::DEFAULT,
                fusion: FusionStrategy::Fpfm,
                injection_layers: vec![1, 2, 4, 6, 8, 10, 12],
                backbone_input: BackboneInput::FalseColor,
                hf_width: 32,
                hf_groups: 4,
                fpfm_latent: 32,
                rho: 0.25,
            },
            train: TrainConfig {
                epochs: 50,
                pairs_per_epoch: 5600,
                batch_size: 16,
                lr: 4e-5,
                weight_decay: 1e-4,
                decay_after: 0.94,
                mode: TrainMode::Joint,
                weights: LossWeights::default(),
                warmup_steps: 100,
                template_factor: 2.0,
                search_factor: 4.0,
                center_jitter: 1.5,
                scale_jitter: 0.15,
            },
        }
    }

    /// CPU-sized settings: 4 blocks of width 32, batch 8, 3 epochs of 67
    /// steps, lr 1e-3.
    pub fn desk() -> Self {
        let mut c = Config::paper();
        c.profile = Profile::Desk;
        let m = &mut c.model;
        m.dim = 32;
        m.blocks = 4;
        m.head_channels = 32;
        m.head_layers = 3;
        m.injection_layers = vec![1, 2, 4];
        m.hf_width = 16;
        m.fpfm_latent = 16;
        let t = &mut c.train;
        t.epochs = 3;
        t.pairs_per_epoch = 536;
        t.batch_size = 8;
        t.lr = 1e-3;
        c
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Config::paper(),
            Profile::Desk => Config::desk(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let profile = kv.take_with("profile", Profile::parse)?.unwrap_or(Profile::Desk);
        let mut c = Config::profile(profile);
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.take($key)? {
                    $field = v;
                }
            };
            ($field:expr, $key:literal, $parse:expr) => {
                if let Some(v) = kv.take_with($key, $parse)? {
                    $field = v;
                }
            };
        }
        set!(c.seed, "seed");
        let m = &mut c.model;
        set!(m.bands, "bands");
        set!(m.endmembers, "endmembers");
        set!(m.encoder, "encoder", EncoderKind::parse);
        if let Some(v) = kv.take_list("unmix_hidden")? {
            m.unmix_hidden = v;
        }
        set!(m.dim, "dim");
        set!(m.heads, "heads");
        set!(m.blocks, "blocks");
        set!(m.mlp_ratio, "mlp_ratio");
        set!(m.template_size, "template_size");
        set!(m.search_size, "search_size");
        set!(m.patch, "patch");
        set!(m.head_channels, "head_channels");
        set!(m.head_layers, "head_layers");
        set!(m.prompts, "prompts");
        set!(m.mrdm, "mrdm");
        set!(m.amd, "amd", AmdVariant::parse);
        set!(m.operators, "operators", OperatorAssignment::parse);
        set!(m.fusion, "fusion", FusionStrategy::parse);
        if let Some(v) = kv.take_list("injection_layers")? {
            m.injection_layers = v;
        }
        set!(m.backbone_input, "backbone_input", BackboneInput::parse);
        set!(m.hf_width, "hf_width");
        set!(m.hf_groups, "hf_groups");
        set!(m.fpfm_latent, "fpfm_latent");
        set!(m.rho, "rho");
        let t = &mut c.train;
        set!(t.epochs, "epochs");
        set!(t.pairs_per_epoch, "pairs_per_epoch");
        set!(t.batch_size, "batch_size");
        set!(t.lr, "lr");
        set!(t.weight_decay, "weight_decay");
        set!(t.decay_after, "decay_after");
        set!(t.mode, "mode", TrainMode::parse);
        set!(t.weights.unmix, "lambda_u");
        set!(t.weights.ce, "lambda_ce");
        set!(t.weights.iou, "lambda_iou");
        set!(t.weights.l1, "lambda_l1");
        set!(t.warmup_steps, "warmup_steps");
        set!(t.template_factor, "template_factor");
        set!(t.search_factor, "search_factor");
        set!(t.center_jitter, "center_jitter");
        set!(t.scale_jitter, "scale_jitter");
        kv.finish()?;
        Ok(c)
    }

    /// Validates with `bands = 0` treated as "not yet known".
    pub fn validate(&self) -> Result<()> {
        if self.model.bands != 0 {
            self.model.validate()?;
        } else {
            let mut m = self.model.clone();
            m.bands = 16;
            m.validate()?;
        }
        self.train.validate()
    }

    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        render(&[
            ("profile", self.profile.as_str().into()),
            ("seed", self.seed.to_string()),
            ("bands", m.bands.to_string()),
            ("endmembers", m.endmembers.to_string()),
            ("encoder", m.encoder.as_str().into()),
            ("unmix_hidden", join(&m.unmix_hidden)),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("blocks", m.blocks.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("template_size", m.template_size.to_string()),
            ("search_size", m.search_size.to_string()),
            ("patch", m.patch.to_string()),
            ("head_channels", m.head_channels.to_string()),
            ("head_layers", m.head_layers.to_string()),
            ("prompts", m.prompts.to_string()),
            ("mrdm", m.mrdm.to_string()),
            ("amd", m.amd.as_str().into()),
            ("operators", m.operators.as_str().into()),
            ("fusion", m.fusion.as_str().into()),
            ("injection_layers", join(&m.injection_layers)),
            ("backbone_input", m.backbone_input.as_str().into()),
            ("hf_width", m.hf_width.to_string()),
            ("hf_groups", m.hf_groups.to_string()),
            ("fpfm_latent", m.fpfm_latent.to_string()),
            ("rho", m.rho.to_string()),
            ("epochs", t.epochs.to_string()),
            ("pairs_per_epoch", t.pairs_per_epoch.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decay_after", t.decay_after.to_string()),
            ("mode", t.mode.as_str().into()),
            ("lambda_u", t.weights.unmix.to_string()),
            ("lambda_ce", t.weights.ce.to_string()),
            ("lambda_iou", t.weights.iou.to_string()),
            ("lambda_l1", t.weights.l1.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("template_factor", t.template_factor.to_string()),
            ("search_factor", t.search_factor.to_string()),
            ("center_jitter", t.center_jitter.to_string()),
            ("scale_jitter", t.scale_jitter.to_string()),
        ])
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        for base in [Config::paper(), Config::desk()] {
            let mut c = base;
            c.seed = 42;
            c.model.operators = OperatorAssignment::SWAPPED;
            c.train.weights.unmix = 0.25;
            assert_eq!(Config::parse(&c.render()).unwrap(), c);
        }
    }

    #[test]
    fn profile_base_and_overrides() {
        let c = Config::parse("profile = paper\nblocks = 6\ninjection_layers = 1,3\n").unwrap();
        assert_eq!(c.model.blocks, 6);
        assert_eq!(c.model.dim, 64);
        assert_eq!(c.model.injection_layers, vec![1, 3]);
        c.validate().unwrap();
        assert_eq!(Config::parse("").unwrap(), Config::desk());
        assert!(Config::parse("unknown_key = 1").is_err());
        assert!(Config::parse("mode = sideways").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        for text in [
            "lambda_u = 1.5",
            "lambda_ce = 1",
            "lambda_ce = 0",
            "endmembers = 1",
            "injection_layers = 5",
            "injection_layers = 2,1",
            "rho = 0",
            "amd = haar\nendmembers = 4",
            "batch_size = 0",
        ] {
            assert!(Config::parse(text).unwrap().validate().is_err(), "{text}");
        }
        Config::parse("lambda_u = 0\namd = split\nendmembers = 6").unwrap().validate().unwrap();
        Config::parse("lambda_u = 1").unwrap().validate().unwrap();
    }

    #[test]
    fn schedule_arithmetic() {
        let t = Config::desk().train;
        assert_eq!(t.steps_per_epoch(), 67);
        assert_eq!(t.total_steps(), 201);
        assert_eq!(t.decay_step(), 188);
        assert_eq!(t.lr_at(187), t.lr);
        assert_eq!(t.lr_at(188), t.lr * 0.1);
    }
}
