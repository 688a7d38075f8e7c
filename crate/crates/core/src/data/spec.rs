use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embeddings::ModalityKind;
use crate::error::{config_err, data_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetId(String);

impl DatasetId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(data_err!("unknown split tag {other:?}")),
        }
    }
}

/// Registry entry for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub dataset_id: DatasetId,
    pub name: String,
    pub modality: ModalityKind,
    pub attribute_names: Vec<String>,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Positive rate per attribute over the training split.
    pub positive_rates: Vec<f64>,
}

impl DatasetSpec {
    pub fn new(
        id: &str,
        modality: ModalityKind,
        attribute_names: Vec<String>,
        frame_count: usize,
        (height, width, channels): (usize, usize, usize),
    ) -> Self {
        let c = attribute_names.len();
        Self {
            dataset_id: DatasetId::new(id),
            name: id.to_string(),
            modality,
            attribute_names,
            frame_count,
            height,
            width,
            channels,
            train_size: 0,
            val_size: 0,
            positive_rates: vec![0.0; c],
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_count * self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        self.modality.check_frames(self.frame_count)?;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(config_err!("dataset {}: zero image dimension", self.dataset_id));
        }
        if self.positive_rates.len() != self.attribute_count() {
            return Err(data_err!(
                "dataset {}: {} positive rates for {} attributes",
                self.dataset_id,
                self.positive_rates.len(),
                self.attribute_count()
            ));
        }
        if let Some(r) = self.positive_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(data_err!("dataset {}: positive rate {r} outside [0,1]", self.dataset_id));
        }
        Ok(())
    }
}

/// Location of one sample's payload inside the dataset blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_uid: u64,
    pub split: Split,
    pub labels: Vec<u8>,
    pub offset: u64,
    pub length: u64,
    /// First 8 bytes of the payload's SHA-256, hex encoded.
    pub checksum: String,
}
