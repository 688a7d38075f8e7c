//! Per-dataset FIFO caches and the readiness poll.

use std::collections::{HashMap, VecDeque};

use crate::data::DatasetId;
use crate::error::{Error, Result};

/// Anything that carries a source dataset and a unique id.
pub trait Tagged {
    fn source_id(&self) -> &DatasetId;
    fn sample_uid(&self) -> u64;
}

#[derive(Debug, Clone)]
pub struct FifoCache<S> {
    pub dataset_id: DatasetId,
    queue: VecDeque<S>,
    pub capacity_hint: usize,
}

impl<S> FifoCache<S> {
    pub fn new(dataset_id: DatasetId, capacity_hint: usize) -> Self {
        Self {
            dataset_id,
            queue: VecDeque::with_capacity(capacity_hint),
            capacity_hint,
        }
    }

    pub fn push(&mut self, s: S) {
        self.queue.push_back(s);
    }

    /// Removes the `n` oldest entries.
    pub fn pop_front(&mut self, n: usize) -> Vec<S> {
        self.queue.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.queue.iter()
    }
}

/// `B` samples from one source.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub source_id: DatasetId,
    pub samples: Vec<S>,
}

impl<S: Tagged> Batch<S> {
    /// Contract check: every sample comes from `source_id`.
    pub fn check_pure(&self) -> Result<()> {
        match self.samples.iter().find(|s| s.source_id() != &self.source_id) {
            Some(s) => Err(Error::Contract(format!(
                "mixed-source batch: sample {} from {} in a {} batch",
                s.sample_uid(),
                s.source_id(),
                self.source_id
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineState<S> {
    caches: Vec<FifoCache<S>>,
    index: HashMap<DatasetId, usize>,
    pub batch_size: usize,
    pub step_counter: u64,
    /// Index of the last dataset served, if any.
    pub cursor: Option<usize>,
    /// Times each sample uid was trained in the current epoch.
    pub epoch_ledger: HashMap<u64, u32>,
    pushed: Vec<u64>,
}

impl<S: Tagged> EngineState<S> {
    /// Caches in registration order.
    pub fn new(ids: &[DatasetId], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            caches: ids
                .iter()
                .map(|id| FifoCache::new(id.clone(), 2 * batch_size))
                .collect(),
            index: ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect(),
            batch_size,
            step_counter: 0,
            cursor: None,
            epoch_ledger: HashMap::new(),
            pushed: vec![0; ids.len()],
        })
    }

    /// Appends each sample to its source's cache, keeping input order.
    pub fn divert(&mut self, samples: impl IntoIterator<Item = S>) -> Result<()> {
        for s in samples {
            let i = *self
                .index
                .get(s.source_id())
                .ok_or_else(|| Error::Routing(format!("no cache for dataset {}", s.source_id())))?;
            self.pushed[i] += 1;
            self.caches[i].push(s);
        }
        Ok(())
    }

    /// First cache with at least `B` samples, scanning round-robin from the
    /// one after the last served, surrenders its `B` oldest samples.
    pub fn poll_ready(&mut self) -> Option<Batch<S>> {
        let k = self.caches.len();
        let start = self.cursor.map_or(0, |c| (c + 1) % k);
        for off in 0..k {
            let i = (start + off) % k;
            if self.caches[i].len() >= self.batch_size {
                self.cursor = Some(i);
                let samples = self.caches[i].pop_front(self.batch_size);
                return Some(Batch {
                    source_id: self.caches[i].dataset_id.clone(),
                    samples,
                });
            }
        }
        None
    }

    /// Bookkeeping after a batch has been trained.
    pub fn record_trained(&mut self, batch: &Batch<S>) {
        self.step_counter += 1;
        for s in &batch.samples {
            *self.epoch_ledger.entry(s.sample_uid()).or_insert(0) += 1;
        }
    }

    pub fn begin_epoch(&mut self) {
        self.epoch_ledger.clear();
    }

    pub fn caches(&self) -> &[FifoCache<S>] {
        &self.caches
    }

    /// Samples waiting per cache.
    pub fn residual(&self) -> Vec<usize> {
        self.caches.iter().map(FifoCache::len).collect()
    }

    /// Samples ever pushed per cache.
    pub fn pushed(&self) -> &[u64] {
        &self.pushed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Item(DatasetId, u64);

    impl Tagged for Item {
        fn source_id(&self) -> &DatasetId {
            &self.0
        }
        fn sample_uid(&self) -> u64 {
            self.1
        }
    }

    fn items(tags: &str) -> Vec<Item> {
        tags.chars()
            .enumerate()
            .map(|(i, c)| Item(DatasetId::new(c.to_string()), i as u64))
            .collect()
    }

    fn engine(b: usize) -> EngineState<Item> {
        EngineState::new(&["A".into(), "B".into(), "C".into()], b).unwrap()
    }

    #[test]
    fn divert_preserves_per_source_order() {
        let mut e = engine(2);
        e.divert(items("ABA")).unwrap();
        let a: Vec<u64> = e.caches()[0].iter().map(|i| i.1).collect();
        assert_eq!(a, vec![0, 2]);
        assert_eq!(e.residual(), vec![2, 1, 0]);
        e.divert(Vec::new()).unwrap();
        assert_eq!(e.residual(), vec![2, 1, 0]);
    }

    #[test]
    fn hand_trace() {
        let mut e = engine(2);
        e.divert(items("AABAB")).unwrap();
        let b1 = e.poll_ready().unwrap();
        assert_eq!(b1.source_id.as_str(), "A");
        assert_eq!(b1.samples.iter().map(|i| i.1).collect::<Vec<_>>(), vec![0, 1]);
        let b2 = e.poll_ready().unwrap();
        assert_eq!(b2.source_id.as_str(), "B");
        assert_eq!(b2.samples.iter().map(|i| i.1).collect::<Vec<_>>(), vec![2, 4]);
        assert!(e.poll_ready().is_none());
        assert_eq!(e.residual(), vec![1, 0, 0]);
    }

    #[test]
    fn ready_caches_alternate() {
        let mut e = engine(1);
        e.divert(items("AAABBB")).unwrap();
        let order: String = std::iter::from_fn(|| e.poll_ready())
            .map(|b| b.source_id.to_string())
            .collect();
        assert_eq!(order, "ABABAB");
    }

    #[test]
    fn unknown_source_and_impure_batch() {
        let mut e = engine(2);
        assert!(e.divert(items("Z")).is_err());
        let b = Batch {
            source_id: "A".into(),
            samples: items("AB"),
        };
        assert!(matches!(b.check_pure(), Err(Error::Contract(_))));
    }
}
