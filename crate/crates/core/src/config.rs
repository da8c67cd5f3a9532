//! Run configuration: a flat `key = value` text format with bundled presets.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::losses::{LossFlags, Temperature};
use crate::model::{ArchSpec, Layout};

pub const DESK_MNIST: &str = include_str!("../../../configs/desk-mnist.cfg");
pub const DESK_CIFAR10: &str = include_str!("../../../configs/desk-cifar10.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainFlags {
    pub no_distill: bool,
    pub no_sharing: bool,
    pub no_gating: bool,
    pub kl_backprop_teacher: bool,
}

impl TrainFlags {
    pub fn loss(&self) -> LossFlags {
        LossFlags { no_distill: self.no_distill, kl_backprop_teacher: self.kl_backprop_teacher }
    }

    /// Parses a comma-separated list such as `no_distill,no_gating`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut f = TrainFlags::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            *f.get_mut(name)? = true;
        }
        Ok(f)
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "no_distill" => &mut self.no_distill,
            "no_sharing" => &mut self.no_sharing,
            "no_gating" => &mut self.no_gating,
            "kl_backprop_teacher" => &mut self.kl_backprop_teacher,
            other => return Err(Error::config(format!("unknown flag {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Auxiliary branch count; the model has `m + 1` branches.
    pub m: usize,
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: TrainFlags,
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    /// Stratified training subset size; 0 keeps the whole split.
    pub train_subset: usize,
    pub test_subset: usize,
    pub augment: AugmentSpec,
    pub trunk_channels: Vec<usize>,
    pub branch_channels: usize,
    pub teacher_trunk_channels: Vec<usize>,
    pub teacher_branch_channels: usize,
    pub ensemble_size: usize,
    /// Write a resumable checkpoint every this many epochs; 0 only at the end.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            m: 2,
            temperature: 3.0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
            flags: TrainFlags::default(),
            dataset: DatasetKind::Mnist,
            data_root: None,
            train_subset: 0,
            test_subset: 0,
            augment: AugmentSpec::none(),
            trunk_channels: vec![8, 16],
            branch_channels: 16,
            teacher_trunk_channels: vec![16, 32],
            teacher_branch_channels: 32,
            ensemble_size: 3,
            checkpoint_every: 0,
            eval_batch_size: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let l = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<Vec<usize>>>()?;
    if l.is_empty() || l.contains(&0) {
        return Err(Error::config(format!("{key}: need positive channel counts")));
    }
    Ok(l)
}

fn join(l: &[usize]) -> String {
    l.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub const KEYS: &[&str] = &[
    "epochs",
    "m",
    "temperature",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "seed",
    "no_distill",
    "no_sharing",
    "no_gating",
    "kl_backprop_teacher",
    "dataset",
    "data_root",
    "train_subset",
    "test_subset",
    "augment",
    "trunk_channels",
    "branch_channels",
    "teacher_trunk_channels",
    "teacher_branch_channels",
    "ensemble_size",
    "checkpoint_every",
    "eval_batch_size",
];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "desk-mnist" => DESK_MNIST,
            "desk-cifar10" => DESK_CIFAR10,
            other => return Err(Error::config(format!("unknown preset {other:?} (desk-mnist, desk-cifar10)"))),
        };
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "no_distill" | "no_sharing" | "no_gating" | "kl_backprop_teacher" => {
                *self.flags.get_mut(key)? = parse_bool(key, v)?
            }
            "dataset" => {
                self.dataset = match v {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => return Err(Error::config(format!("dataset: expected mnist or cifar10, got {v:?}"))),
                }
            }
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_subset" => self.train_subset = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "augment" => {
                self.augment = match v {
                    "none" => AugmentSpec::none(),
                    "standard" => AugmentSpec::standard(),
                    _ => return Err(Error::config(format!("augment: expected none or standard, got {v:?}"))),
                }
            }
            "trunk_channels" => self.trunk_channels = parse_list(key, v)?,
            "branch_channels" => self.branch_channels = parse(key, v)?,
            "teacher_trunk_channels" => self.teacher_trunk_channels = parse_list(key, v)?,
            "teacher_branch_channels" => self.teacher_branch_channels = parse(key, v)?,
            "ensemble_size" => self.ensemble_size = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = &self.flags;
        let aug = if self.augment.is_off() { "none" } else { "standard" };
        let ds = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        };
        let root = self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("m", self.m.to_string()),
            ("temperature", self.temperature.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("no_distill", f.no_distill.to_string()),
            ("no_sharing", f.no_sharing.to_string()),
            ("no_gating", f.no_gating.to_string()),
            ("kl_backprop_teacher", f.kl_backprop_teacher.to_string()),
            ("dataset", ds.to_string()),
            ("data_root", root),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("augment", aug.to_string()),
            ("trunk_channels", join(&self.trunk_channels)),
            ("branch_channels", self.branch_channels.to_string()),
            ("teacher_trunk_channels", join(&self.teacher_trunk_channels)),
            ("teacher_branch_channels", self.teacher_branch_channels.to_string()),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batch norm)"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be positive"));
        }
        Temperature::new(self.temperature).map_err(|e| Error::config(e.to_string()))?;
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("lr, momentum and weight_decay must be non-negative"));
        }
        if !self.flags.no_gating && self.m == 0 {
            return Err(Error::config("m = 0 leaves nothing to gate; set no_gating or m >= 1"));
        }
        Ok(())
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::new(self.temperature).unwrap_or_default()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::desk(self.dataset.input(), self.dataset.num_classes(), &self.trunk_channels, self.branch_channels)
    }

    pub fn teacher_arch(&self) -> ArchSpec {
        ArchSpec::desk(
            self.dataset.input(),
            self.dataset.num_classes(),
            &self.teacher_trunk_channels,
            self.teacher_branch_channels,
        )
    }

    pub fn layout(&self) -> Layout {
        Layout { branches: self.m + 1, shared_trunk: !self.flags.no_sharing, gated: !self.flags.no_gating }
    }
}
