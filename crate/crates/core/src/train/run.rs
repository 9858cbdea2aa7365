use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{parse_kv, read_text, KvSection};
use crate::data::GenSpec;
use crate::error::{Result, WwtError};
use crate::kv_section;
use crate::model::WwtConfig;

/// Target of the auxiliary reconstruction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeMode {
    Pixels,
    Distill,
}

impl FromStr for AeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pixels" => Ok(AeMode::Pixels),
            "distill" => Ok(AeMode::Distill),
            _ => Err(format!("unknown ae mode '{s}'")),
        }
    }
}

impl fmt::Display for AeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AeMode::Pixels => "pixels",
            AeMode::Distill => "distill",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub label_smoothing: f64,
    pub ae_weight: f64,
    pub ae_mode: AeMode,
    pub teacher_seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop once validation accuracy reaches this value; 0 disables.
    pub target_accuracy: f64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Validation images scored after each epoch; 0 uses the whole split.
    pub eval_size: usize,
    /// Slots kept by the object-centric reconstruction loss; 0 keeps all.
    pub ocl_keep: usize,
    /// Backbone parameters receive no gradient; only heads train.
    pub freeze_backbone: bool,
}

kv_section!(TrainSettings {
    seed,
    epochs,
    batch_size,
    lr,
    min_lr,
    warmup_epochs,
    weight_decay,
    beta1,
    beta2,
    label_smoothing,
    ae_weight,
    ae_mode,
    teacher_seed,
    grad_clip,
    target_accuracy,
    checkpoint_every,
    eval_size,
    ocl_keep,
    freeze_backbone,
});

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 2,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            label_smoothing: 0.1,
            ae_weight: 0.1,
            ae_mode: AeMode::Pixels,
            teacher_seed: 1234,
            grad_clip: 1.0,
            target_accuracy: 0.0,
            checkpoint_every: 0,
            eval_size: 0,
            ocl_keep: 0,
            freeze_backbone: false,
        }
    }
}

/// Everything needed to reproduce a run: model, data and optimization.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: WwtConfig,
    pub data: GenSpec,
    pub train: TrainSettings,
}

impl RunConfig {
    /// Parse `section.key = value` lines with sections `model`, `data` and
    /// `train`. Missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            let (section, key) = k
                .split_once('.')
                .ok_or_else(|| WwtError::Config(format!("key '{k}' needs a section prefix")))?;
            let target: &mut dyn KvSection = match section {
                "model" => &mut rc.model,
                "data" => &mut rc.data,
                "train" => &mut rc.train,
                _ => return Err(WwtError::Config(format!("unknown section '{section}'"))),
            };
            if !target.set(key, &v)? {
                return Err(WwtError::Config(format!("unknown key '{k}'")));
            }
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sections: [(&str, &dyn KvSection); 3] = [
            ("model", &self.model),
            ("data", &self.data),
            ("train", &self.train),
        ];
        for (name, sec) in sections {
            for (k, v) in sec.pairs() {
                s.push_str(&format!("{name}.{k} = {v}\n"));
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.image_size != self.data.image_size
            || self.model.num_classes != self.data.num_classes
        {
            return Err(WwtError::Config(
                "model and data disagree on image_size or num_classes".into(),
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(WwtError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(t.lr > 0.0)
            || t.min_lr < 0.0
            || !(0.0..1.0).contains(&t.label_smoothing)
            || t.ae_weight < 0.0
        {
            return Err(WwtError::Config("bad optimizer or loss settings".into()));
        }
        if t.ocl_keep > self.model.slots {
            return Err(WwtError::Config("ocl_keep exceeds the slot count".into()));
        }
        Ok(())
    }
}
