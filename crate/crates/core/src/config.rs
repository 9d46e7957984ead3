//! Flat `key=value` run configuration covering every tunable of the pipeline.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::adapter::AdaptConfig;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::baselines::{parse_methods, BaselineConfig, Method};
use crate::distillery::DistillConfig;
use crate::error::{Error, Result};
use crate::taskforge::WorldSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub data_seed: u64,
    pub source_datasets_per_type: usize,
    pub source_records: usize,
    pub target_datasets_per_type: usize,
    pub target_records: usize,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub adapt: AdaptConfig,
    pub baselines: BaselineConfig,
    pub fewshot_methods: Vec<Method>,
    pub report_methods: Vec<Method>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSpec::default(),
            data_seed: 11,
            source_datasets_per_type: 1,
            source_records: 512,
            target_datasets_per_type: 1,
            target_records: 200,
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            adapt: AdaptConfig {
                max_new: 24,
                ..AdaptConfig::default()
            },
            baselines: BaselineConfig::default(),
            fewshot_methods: vec![Method::Mpt, Method::Pt, Method::Lora],
            report_methods: Method::ALL.to_vec(),
        }
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::contract(format!("{key}: bad list element {p:?}")))
        })
        .collect()
}

fn parse_scalar<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::contract(format!("{key}: cannot parse {s:?}")))
}

const SCALAR_KEYS: &[&str] = &[
    "world.seed",
    "world.base_vocab",
    "world.entities_per_family",
    "world.target_only_per_family",
    "world.pretrain_lines",
    "data.seed",
    "data.source_datasets_per_type",
    "data.source_records",
    "data.target_datasets_per_type",
    "data.target_records",
    "backbone.d_model",
    "backbone.n_layers",
    "backbone.n_heads",
    "backbone.d_ff",
    "backbone.max_seq_len",
    "backbone.tie_output",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch_size",
    "pretrain.seed",
    "prompt.length",
    "prompt.rank",
    "distill.lambda1",
    "distill.lambda2",
    "stage1.epochs",
    "stage1.lr",
    "stage1.batch",
    "stage2.epochs",
    "stage2.lr",
    "stage2.batch",
    "stage2.init_noise",
    "distill.subsample_cap",
    "distill.seed",
    "adapt.max_epochs",
    "adapt.lr",
    "adapt.patience",
    "adapt.batch",
    "adapt.max_new",
    "adapt.seed",
    "fewshot.steps",
    "fewshot.batch_cap",
    "fewshot.n_draws",
    "lora.rank",
    "lora.init_std",
    "lora.lr",
    "fullft.lr",
];

impl RunConfig {
    /// Every key with its current value, sorted by key.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut c = self.clone();
        let mut m = BTreeMap::new();
        for k in SCALAR_KEYS {
            let v = c.slot(k).map(|s| s.render()).unwrap_or_default();
            m.insert(k.to_string(), v);
        }
        m.insert("stage2.k_choices".into(), list(&c.distill.k_choices));
        m.insert("fewshot.k_set".into(), list(&c.adapt.k_set));
        m.insert("fewshot.methods".into(), list(&c.fewshot_methods));
        m.insert("report.methods".into(), list(&c.report_methods));
        m
    }

    /// Sorted `key=value` lines; parsing this text yields an equal config.
    pub fn canonical(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment;
    /// unknown or repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let known = cfg.to_map();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !known.contains_key(k) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown config key {k:?}"),
                });
            }
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("repeated config key {k:?}"),
                });
            }
        }
        for (k, v) in &seen {
            cfg.set(k, v)?;
        }
        cfg.baselines.prompt_len = cfg.distill.prompt_len;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::contract(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn slot(&mut self, k: &str) -> Option<&mut dyn Slot> {
        Some(match k {
            "world.seed" => &mut self.world.seed,
            "world.base_vocab" => &mut self.world.base_vocab,
            "world.entities_per_family" => &mut self.world.entities_per_family,
            "world.target_only_per_family" => &mut self.world.target_only_per_family,
            "world.pretrain_lines" => &mut self.world.pretrain_lines,
            "data.seed" => &mut self.data_seed,
            "data.source_datasets_per_type" => &mut self.source_datasets_per_type,
            "data.source_records" => &mut self.source_records,
            "data.target_datasets_per_type" => &mut self.target_datasets_per_type,
            "data.target_records" => &mut self.target_records,
            "backbone.d_model" => &mut self.backbone.d_model,
            "backbone.n_layers" => &mut self.backbone.n_layers,
            "backbone.n_heads" => &mut self.backbone.n_heads,
            "backbone.d_ff" => &mut self.backbone.d_ff,
            "backbone.max_seq_len" => &mut self.backbone.max_seq_len,
            "backbone.tie_output" => &mut self.backbone.tie_output,
            "pretrain.epochs" => &mut self.pretrain.epochs,
            "pretrain.lr" => &mut self.pretrain.lr,
            "pretrain.batch_size" => &mut self.pretrain.batch_size,
            "pretrain.seed" => &mut self.pretrain.seed,
            "prompt.length" => &mut self.distill.prompt_len,
            "prompt.rank" => &mut self.distill.rank,
            "distill.lambda1" => &mut self.distill.lambda1,
            "distill.lambda2" => &mut self.distill.lambda2,
            "stage1.epochs" => &mut self.distill.epochs_stage1,
            "stage1.lr" => &mut self.distill.lr_stage1,
            "stage1.batch" => &mut self.distill.batch_stage1,
            "stage2.epochs" => &mut self.distill.epochs_stage2,
            "stage2.lr" => &mut self.distill.lr_stage2,
            "stage2.batch" => &mut self.distill.batch_stage2,
            "stage2.init_noise" => &mut self.distill.init_noise,
            "distill.subsample_cap" => &mut self.distill.subsample_cap,
            "distill.seed" => &mut self.distill.seed,
            "adapt.max_epochs" => &mut self.adapt.max_epochs,
            "adapt.lr" => &mut self.adapt.lr,
            "adapt.patience" => &mut self.adapt.patience,
            "adapt.batch" => &mut self.adapt.batch,
            "adapt.max_new" => &mut self.adapt.max_new,
            "adapt.seed" => &mut self.adapt.seed,
            "fewshot.steps" => &mut self.adapt.fewshot_steps,
            "fewshot.batch_cap" => &mut self.adapt.fewshot_batch_cap,
            "fewshot.n_draws" => &mut self.adapt.n_draws,
            "lora.rank" => &mut self.baselines.lora_rank,
            "lora.init_std" => &mut self.baselines.lora_init_std,
            "lora.lr" => &mut self.baselines.lora_lr,
            "fullft.lr" => &mut self.baselines.fullft_lr,
            _ => return None,
        })
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        if let Some(slot) = self.slot(k) {
            return slot.set_from(k, v);
        }
        match k {
            "stage2.k_choices" => self.distill.k_choices = parse_list(k, v)?,
            "fewshot.k_set" => self.adapt.k_set = parse_list(k, v)?,
            "fewshot.methods" => self.fewshot_methods = parse_methods(v)?,
            "report.methods" => self.report_methods = parse_methods(v)?,
            _ => return Err(Error::contract(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.adapt.validate()?;
        if self.source_datasets_per_type == 0 || self.target_datasets_per_type == 0 {
            return Err(Error::contract(
                "need at least one source and one target dataset per type",
            ));
        }
        if self.source_records < 10 || self.target_records < 10 {
            return Err(Error::contract("corpora need at least 10 records"));
        }
        Ok(())
    }

    /// Backbone architecture for a tokenizer with `vocab_size` entries.
    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            ..self.backbone.clone()
        }
    }
}

trait Slot {
    fn set_from(&mut self, key: &str, v: &str) -> Result<()>;
    fn render(&self) -> String;
}

macro_rules! set_from {
    ($($t:ty),*) => {
        $(impl Slot for $t {
            fn set_from(&mut self, key: &str, v: &str) -> Result<()> {
                *self = parse_scalar(key, v)?;
                Ok(())
            }

            fn render(&self) -> String {
                self.to_string()
            }
        })*
    };
}

set_from!(u64, usize, f64, bool);
