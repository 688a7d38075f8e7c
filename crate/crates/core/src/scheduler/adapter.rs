//! Collation: pads labels to the widest attribute set and tags each sample
//! with its source.

use indexmap::IndexMap;

use super::cache::Tagged;
use crate::data::{DatasetId, DatasetSpec};
use crate::error::{data_err, Result};
use crate::numerics::Tensor;

/// A sample as produced by a dataset reader.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub source_id: DatasetId,
    /// `[T, ch, H, W]`
    pub frames: Tensor,
    pub labels: Vec<u8>,
    /// Identifier inside the source dataset.
    pub origin_uid: u64,
}

#[derive(Debug, Clone)]
pub struct AdaptedSample {
    pub frames: Tensor,
    /// Length `C_max`, zero past the source's attribute count.
    pub labels_padded: Vec<u8>,
    /// `C` leading ones then zeros.
    pub mask: Vec<u8>,
    pub source_id: DatasetId,
    /// Fresh, strictly increasing across everything this adapter emits.
    pub sample_uid: u64,
    pub origin_uid: u64,
}

impl AdaptedSample {
    /// Attribute count of the source, read from the mask.
    pub fn attribute_count(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }
}

impl Tagged for AdaptedSample {
    fn source_id(&self) -> &DatasetId {
        &self.source_id
    }

    fn sample_uid(&self) -> u64 {
        self.sample_uid
    }
}

#[derive(Debug, Clone)]
pub struct CollationAdapter {
    counts: IndexMap<DatasetId, usize>,
    c_max: usize,
    next_uid: u64,
}

impl CollationAdapter {
    pub fn new(specs: &[DatasetSpec]) -> Self {
        let counts: IndexMap<DatasetId, usize> = specs
            .iter()
            .map(|s| (s.dataset_id.clone(), s.attribute_count()))
            .collect();
        let c_max = counts.values().copied().max().unwrap_or(0);
        Self {
            counts,
            c_max,
            next_uid: 0,
        }
    }

    pub fn c_max(&self) -> usize {
        self.c_max
    }

    pub fn adapt(&mut self, raw: Vec<RawSample>) -> Result<Vec<AdaptedSample>> {
        // validate the whole batch before consuming any uids
        for r in &raw {
            let c = *self
                .counts
                .get(&r.source_id)
                .ok_or_else(|| data_err!("sample from unregistered dataset {}", r.source_id))?;
            if r.labels.len() != c {
                return Err(data_err!(
                    "sample {} of {} has {} labels, expected {c}",
                    r.origin_uid,
                    r.source_id,
                    r.labels.len()
                ));
            }
        }
        Ok(raw
            .into_iter()
            .map(|r| {
                let c = r.labels.len();
                let mut labels_padded = r.labels;
                labels_padded.resize(self.c_max, 0);
                let mut mask = vec![1u8; c];
                mask.resize(self.c_max, 0);
                let uid = self.next_uid;
                self.next_uid += 1;
                AdaptedSample {
                    frames: r.frames,
                    labels_padded,
                    mask,
                    source_id: r.source_id,
                    sample_uid: uid,
                    origin_uid: r.origin_uid,
                }
            })
            .collect())
    }
}
