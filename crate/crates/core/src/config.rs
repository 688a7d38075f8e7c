//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, DatasetId, DatasetSpec, SyntheticSpec};
use crate::embeddings::ModalityKind;
use crate::encoder::QueryMode;
use crate::error::{config_err, Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::numerics::AdamWConfig;
use crate::scheduler::TrainOptions;

pub const DEFAULT_SEED: u64 = 605;
pub const TOY_CONFIG: &str = include_str!("../../../configs/toy.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub modality: ModalityKind,
    #[serde(default = "one")]
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Attribute names; `attributes` may give a count instead.
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub attributes: Option<usize>,
    pub train: usize,
    pub val: usize,
    /// Label Bernoulli rates for generation; 0.5 each when absent.
    #[serde(default)]
    pub target_rates: Option<Vec<f64>>,
    #[serde(default)]
    pub query: QueryMode,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl DatasetEntry {
    pub fn names(&self) -> Vec<String> {
        if !self.attribute_names.is_empty() {
            return self.attribute_names.clone();
        }
        (0..self.attributes.unwrap_or(0))
            .map(|j| format!("attr{j:02}"))
            .collect()
    }

    pub fn spec(&self) -> DatasetSpec {
        let mut s = DatasetSpec::new(
            &self.id,
            self.modality,
            self.names(),
            self.frames,
            (self.height, self.width, self.channels),
        );
        s.train_size = self.train;
        s.val_size = self.val;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// One per dataset, in registration order; all 1.0 when absent.
    #[serde(default)]
    pub loss_rates: Option<Vec<f64>>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Producer thread for loading and collation.
    #[serde(default = "yes")]
    pub threaded: bool,
    /// Full-size settings are valid but too large to train on a desk.
    #[serde(default = "yes")]
    pub desk_runnable: bool,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    pub datasets: Vec<DatasetEntry>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_wd() -> f64 {
    AdamWConfig::default().weight_decay
}

fn default_betas() -> (f64, f64) {
    let c = AdamWConfig::default();
    (c.beta1, c.beta2)
}

fn default_adam_eps() -> f64 {
    AdamWConfig::default().eps
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.checkpoint = base.join(&cfg.checkpoint);
        cfg.log = cfg.log.map(|l| base.join(l));
        for d in &mut cfg.datasets {
            if let QueryMode::ExternalFile(p) = &mut d.query {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn toy() -> Self {
        Self::parse(TOY_CONFIG).expect("bundled toy config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(config_err!("no datasets registered"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2"));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(config_err!(
                "need epochs >= 1 and warmup_epochs <= epochs (got {} and {})",
                self.epochs,
                self.warmup_epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be positive"));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(config_err!("threshold must lie in (0,1)"));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.datasets {
            if !seen.insert(&d.id) {
                return Err(config_err!("dataset {} registered twice", d.id));
            }
            if d.names().is_empty() {
                return Err(config_err!("dataset {} has no attributes", d.id));
            }
            if let Some(n) = d.attributes {
                if !d.attribute_names.is_empty() && n != d.attribute_names.len() {
                    return Err(config_err!(
                        "dataset {}: attributes = {n} but {} names given",
                        d.id,
                        d.attribute_names.len()
                    ));
                }
            }
            self.synthetic_spec(d)?.validate()?;
            self.augmentation.validate(d.height, d.width)?;
        }
        self.loss_rate_values()?;
        Ok(())
    }

    pub fn dataset_ids(&self) -> Vec<DatasetId> {
        self.datasets.iter().map(|d| DatasetId::new(&d.id)).collect()
    }

    pub fn synthetic_spec(&self, d: &DatasetEntry) -> Result<SyntheticSpec> {
        let spec = d.spec();
        let c = spec.attribute_count();
        let target_rates = d.target_rates.clone().unwrap_or_else(|| vec![0.5; c]);
        Ok(SyntheticSpec {
            spec,
            patch: self.model.patch,
            target_rates,
        })
    }

    pub fn loss_rate_values(&self) -> Result<Vec<f64>> {
        match &self.loss_rates {
            None => Ok(vec![1.0; self.datasets.len()]),
            Some(r) if r.len() == self.datasets.len() => Ok(r.clone()),
            Some(r) => Err(config_err!(
                "{} loss rates for {} datasets",
                r.len(),
                self.datasets.len()
            )),
        }
    }

    /// Keeps only the listed datasets (with their loss rates), in
    /// registration order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        for id in ids {
            if !self.datasets.iter().any(|d| &d.id == id) {
                return Err(Error::Routing(format!(
                    "unknown dataset {id}; known: {}",
                    self.datasets.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let rates = self.loss_rate_values()?;
        let keep: Vec<usize> = (0..self.datasets.len())
            .filter(|&i| ids.contains(&self.datasets[i].id))
            .collect();
        let mut out = self.clone();
        out.datasets = keep.iter().map(|&i| self.datasets[i].clone()).collect();
        out.loss_rates = Some(keep.iter().map(|&i| rates[i]).collect());
        out.validate()?;
        Ok(out)
    }

    pub fn query_modes(&self) -> Vec<QueryMode> {
        self.datasets.iter().map(|d| d.query.clone()).collect()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.base_lr,
            adamw: self.adamw(),
            loss_rates: self.loss_rate_values()?,
            seed: self.seed,
            augmentation: self.augmentation.clone(),
            threaded: self.threaded,
        })
    }

    pub fn dataset_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join(id)
    }
}
