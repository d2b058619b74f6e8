//! Run configuration: one JSON file fully determines a run.
//!
//! `schema_version` is mandatory and must be 1; unknown keys are rejected
//! so a typo'd hyperparameter name fails loudly instead of silently using
//! a default. Every other field has a default, so `{"schema_version": 1}`
//! is a complete config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, ConfVariant};
use crate::benchdata::{BenchSpec, DomainSpec};
use crate::error::{Error, Result};
use crate::segmentor::Arch;
use crate::stylemix::MixingRule;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,

    // benchmark geometry
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_n_source")]
    pub n_source: usize,
    #[serde(default = "d_n_target_eval")]
    pub n_target_eval: usize,
    #[serde(default = "d_n_target_pool")]
    pub n_target_pool: usize,
    #[serde(default = "DomainSpec::identity")]
    pub source_domain: DomainSpec,
    #[serde(default = "d_target_domain")]
    pub target_domain: DomainSpec,

    // protocol
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_protocol_n")]
    pub n_picks: usize,
    #[serde(default = "d_protocol_n")]
    pub n_seeds: usize,

    // architecture
    #[serde(default = "d_widths")]
    pub widths: [usize; 4],
    #[serde(default = "d_strides")]
    pub strides: [usize; 4],

    #[serde(default)]
    pub train: TrainSection,

    /// Patch sizes swept by the ablation grid.
    #[serde(default = "d_patch_grid")]
    pub ablation_patch_sizes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_poly_power")]
    pub poly_power: f64,
    #[serde(default)]
    pub mixing: MixingRule,
    #[serde(default = "d_conf_variant")]
    pub conf_variant: ConfVariant,
    #[serde(default)]
    pub clamp_conf_nonneg: bool,
    #[serde(default)]
    pub source_subset: Option<usize>,
    #[serde(default = "d_pretrain_iters")]
    pub pretrain_iters: usize,
    #[serde(default = "d_pretrain_lr")]
    pub pretrain_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all train fields have defaults")
    }
}

fn d_classes() -> usize {
    5
}
fn d_side() -> usize {
    64
}
fn d_n_source() -> usize {
    200
}
fn d_n_target_eval() -> usize {
    40
}
fn d_n_target_pool() -> usize {
    5
}
fn d_target_domain() -> DomainSpec {
    BenchSpec::default_desk().target_domain
}
fn d_protocol_n() -> usize {
    5
}
fn d_widths() -> [usize; 4] {
    [8, 16, 16, 16]
}
fn d_strides() -> [usize; 4] {
    [2, 1, 2, 1]
}
fn d_patch_grid() -> Vec<usize> {
    vec![2, 4, 8, 16]
}
fn d_base_lr() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-4
}
fn d_alpha() -> f64 {
    0.5
}
fn d_patch_size() -> usize {
    4
}
fn d_max_iters() -> usize {
    500
}
fn d_poly_power() -> f64 {
    0.9
}
fn d_conf_variant() -> ConfVariant {
    ConfVariant::Full
}
fn d_pretrain_iters() -> usize {
    4000
}
fn d_pretrain_lr() -> f64 {
    1e-2
}

impl RunConfig {
    pub fn default_desk() -> Self {
        serde_json::from_str(r#"{"schema_version": 1}"#).expect("defaults are complete")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            widths: self.widths,
            strides: self.strides,
            classes: self.classes,
        }
    }

    pub fn bench_spec(&self) -> BenchSpec {
        BenchSpec {
            classes: self.classes,
            h: self.height,
            w: self.width,
            n_source: self.n_source,
            n_target_eval: self.n_target_eval,
            n_target_pool: self.n_target_pool,
            source_domain: self.source_domain.clone(),
            target_domain: self.target_domain.clone(),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let t = &self.train;
        AdaptConfig {
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            alpha: t.alpha,
            patch_size: t.patch_size,
            max_iters: t.max_iters,
            poly_power: t.poly_power,
            seed: self.seed,
            mixing: t.mixing.clone(),
            conf_variant: t.conf_variant,
            clamp_conf_nonneg: t.clamp_conf_nonneg,
            source_subset: t.source_subset,
            pretrain_iters: t.pretrain_iters,
            pretrain_lr: t.pretrain_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        let arch = self.arch();
        arch.validate()?;
        if self.classes >= 255 {
            return Err(Error::Config(
                "class count collides with the ignore sentinel".into(),
            ));
        }
        if self.n_source == 0 || self.n_target_eval == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.n_picks == 0 || self.n_seeds == 0 {
            return Err(Error::Config("protocol needs >= 1 pick and >= 1 seed".into()));
        }
        if self.n_picks > self.n_target_pool {
            return Err(Error::Config(format!(
                "{} picks exceed the target pool of {}",
                self.n_picks, self.n_target_pool
            )));
        }
        self.source_domain.validate()?;
        self.target_domain.validate()?;
        self.adapt_config().validate(&arch, self.height, self.width)?;
        let (h4, w4) = arch.f4_dims(self.height, self.width)?;
        for &p in &self.ablation_patch_sizes {
            if p == 0 || h4 % p != 0 || w4 % p != 0 {
                return Err(Error::Config(format!(
                    "ablation patch size {p} does not tile the {h4}x{w4} feature grid"
                )));
            }
        }
        Ok(())
    }
}
