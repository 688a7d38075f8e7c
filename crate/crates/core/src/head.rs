//! Per-dataset classification heads: linear map, batch normalization over the
//! batch, sigmoid.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, DatasetSpec};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{BatchStats, Graph, NodeId, ParamId, ParamStore, RngState, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct DatasetHead {
    pub dataset_id: DatasetId,
    /// `[C, d]`; row `j` scores attribute `j`.
    pub weight: ParamId,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    /// Frozen `[C]` tensors updated outside the optimizer.
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub count: usize,
}

impl DatasetHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        spec: &DatasetSpec,
        dim: usize,
        init_std: f64,
    ) -> Result<Self> {
        let c = spec.attribute_count();
        let p = format!("head.{}", spec.dataset_id);
        let w = rng.fork_str(&format!("{p}.w")).gaussian_vec(c * dim, init_std);
        Ok(Self {
            dataset_id: spec.dataset_id.clone(),
            weight: store.add_trainable(&format!("{p}.w"), Tensor::new(&[c, dim], w)?)?,
            bn_gain: store.add_trainable(&format!("{p}.bn.gain"), Tensor::filled(&[c], 1.0))?,
            bn_bias: store.add_trainable(&format!("{p}.bn.bias"), Tensor::zeros(&[c]))?,
            running_mean: store.add_frozen(&format!("{p}.bn.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store.add_frozen(&format!("{p}.bn.running_var"), Tensor::filled(&[c], 1.0))?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            count: c,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [
            self.weight,
            self.bn_gain,
            self.bn_bias,
            self.running_mean,
            self.running_var,
        ]
    }

    /// Blends batch statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn commit_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.count {
            return Err(shape_err!(
                "head {} has {} attributes, statistics have {}",
                self.dataset_id,
                self.count,
                stats.mean.len()
            ));
        }
        let m = self.momentum as Scalar;
        let unbias = stats.batch as Scalar / (stats.batch as Scalar - 1.0);
        let rm = store.get_mut(self.running_mean).data_mut();
        for (r, b) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = store.get_mut(self.running_var).data_mut();
        for (r, b) in rv.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[B, C]` pre-normalization scores.
    pub logits: NodeId,
    /// `[B, C]` probabilities.
    pub probs: NodeId,
    /// Batch statistics (training mode only).
    pub stats: Option<BatchStats>,
}

/// `σ(BN(W_j · f_j))` for each sample. `features` holds one `[C, d]` node
/// per sample.
pub fn predict(
    g: &mut Graph,
    store: &ParamStore,
    head: &DatasetHead,
    features: &[NodeId],
    mode: Mode,
) -> Result<Prediction> {
    if features.is_empty() {
        return Err(shape_err!("predict needs at least one sample"));
    }
    let w = g.param(store, head.weight);
    let mut rows = Vec::with_capacity(features.len());
    for &f in features {
        if g.shape(f) != g.shape(w) {
            return Err(shape_err!(
                "head {} expects features {:?}, got {:?}",
                head.dataset_id,
                g.shape(w),
                g.shape(f)
            ));
        }
        let s = g.row_dot(w, f)?;
        rows.push(g.reshape(s, &[1, head.count])?);
    }
    let logits = g.concat_rows(&rows)?;
    let gain = g.param(store, head.bn_gain);
    let bias = g.param(store, head.bn_bias);
    let eps = head.eps as Scalar;
    let (normed, stats) = match mode {
        Mode::Train => {
            let (n, s) = g.batch_norm_train(logits, gain, bias, eps)?;
            (n, Some(s))
        }
        Mode::Eval => {
            let mean = store.get(head.running_mean).data().to_vec();
            let var = store.get(head.running_var).data().to_vec();
            (g.batch_norm_eval(logits, gain, bias, &mean, &var, eps)?, None)
        }
    };
    let probs = g.sigmoid(normed);
    Ok(Prediction {
        logits,
        probs,
        stats,
    })
}

/// Heads keyed by dataset, with an attribute-count index for routing.
#[derive(Debug, Default)]
pub struct HeadRegistry {
    heads: IndexMap<DatasetId, DatasetHead>,
    count_index: BTreeMap<usize, Vec<DatasetId>>,
    collision_reported: AtomicBool,
}

impl Clone for HeadRegistry {
    fn clone(&self) -> Self {
        Self {
            heads: self.heads.clone(),
            count_index: self.count_index.clone(),
            collision_reported: AtomicBool::new(self.collision_reported.load(Ordering::Relaxed)),
        }
    }
}

impl HeadRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, head: DatasetHead) -> Result<()> {
        if self.heads.contains_key(&head.dataset_id) {
            return Err(Error::Config(format!("head for {} registered twice", head.dataset_id)));
        }
        self.count_index
            .entry(head.count)
            .or_default()
            .push(head.dataset_id.clone());
        self.heads.insert(head.dataset_id.clone(), head);
        Ok(())
    }

    pub fn get(&self, id: &DatasetId) -> Option<&DatasetHead> {
        self.heads.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetHead> {
        self.heads.values()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Selects the head by query count; the dataset id breaks ties when
    /// several datasets share that count.
    pub fn route(&self, query_count: usize, dataset_id: &DatasetId) -> Result<&DatasetHead> {
        let own = self.heads.get(dataset_id).ok_or_else(|| {
            Error::Routing(format!(
                "unknown dataset {dataset_id}; known: {}",
                self.known_ids()
            ))
        })?;
        let candidates = self.count_index.get(&query_count).ok_or_else(|| {
            Error::Routing(format!("no head has {query_count} attributes"))
        })?;
        if candidates.len() == 1 {
            let head = &self.heads[&candidates[0]];
            if head.dataset_id != *dataset_id {
                return Err(Error::Routing(format!(
                    "{query_count} queries route to {}, but the batch is from {dataset_id}",
                    head.dataset_id
                )));
            }
            return Ok(head);
        }
        if !self.collision_reported.swap(true, Ordering::Relaxed) {
            log::warn!(
                "attribute count {query_count} is shared by {:?}; routing by dataset id",
                candidates.iter().map(DatasetId::as_str).collect::<Vec<_>>()
            );
        }
        if own.count != query_count {
            return Err(Error::Routing(format!(
                "dataset {dataset_id} has {} attributes, batch carries {query_count}",
                own.count
            )));
        }
        Ok(own)
    }

    fn known_ids(&self) -> String {
        self.heads
            .keys()
            .map(DatasetId::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::ModalityKind;

    fn spec(id: &str, c: usize) -> DatasetSpec {
        DatasetSpec::new(
            id,
            ModalityKind::Rgb,
            (0..c).map(|i| format!("a{i}")).collect(),
            1,
            (16, 16, 3),
        )
    }

    fn registry(counts: &[(&str, usize)]) -> (ParamStore, HeadRegistry) {
        let mut store = ParamStore::new();
        let mut reg = HeadRegistry::new();
        let rng = RngState::new(605);
        for (id, c) in counts {
            reg.register(DatasetHead::new(&mut store, &rng, &spec(id, *c), 3, 0.02).unwrap())
                .unwrap();
        }
        (store, reg)
    }

    #[test]
    fn routing_by_count_and_fallback() {
        let (_, reg) = registry(&[("rgb_a", 57), ("video_b", 36), ("event", 50)]);
        assert_eq!(reg.route(57, &"rgb_a".into()).unwrap().dataset_id.as_str(), "rgb_a");
        assert!(matches!(reg.route(99, &"x".into()), Err(Error::Routing(_))));
        assert!(matches!(reg.route(99, &"rgb_a".into()), Err(Error::Routing(_))));

        let (_, reg) = registry(&[("a", 40), ("b", 40)]);
        assert_eq!(reg.route(40, &"b".into()).unwrap().dataset_id.as_str(), "b");
        assert_eq!(reg.route(40, &"a".into()).unwrap().dataset_id.as_str(), "a");
    }

    fn set(store: &mut ParamStore, id: ParamId, v: &[Scalar]) {
        store.get_mut(id).data_mut().copy_from_slice(v);
    }

    #[test]
    fn train_mode_matches_hand_computation() {
        // B=4, C=2, d=3
        let (mut store, reg) = registry(&[("a", 2)]);
        let head = reg.get(&"a".into()).unwrap().clone();
        set(&mut store, head.weight, &[1.0, 0.5, -1.0, 0.0, 2.0, 1.0]);
        set(&mut store, head.bn_gain, &[1.5, 0.5]);
        set(&mut store, head.bn_bias, &[0.1, -0.2]);
        let feats: Vec<Vec<Scalar>> = vec![
            vec![1.0, 2.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0, 2.0, 0.0, -1.0],
            vec![2.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            vec![-1.0, 1.0, 2.0, 1.0, -1.0, 3.0],
        ];
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = feats
            .iter()
            .map(|f| g.input(Tensor::new(&[2, 3], f.clone()).unwrap()))
            .collect();
        let pred = predict(&mut g, &store, &head, &nodes, Mode::Train).unwrap();
        let probs = g.value(pred.probs).data().to_vec();

        // logits by hand: attr0 = x0 + 0.5 x1 - x2, attr1 = 2 y1 + y2
        let l0 = [2.0, -0.5, 1.0, -2.5];
        let l1 = [3.0, -1.0, 2.0, 1.0];
        let (gain, bias) = ([1.5, 0.5], [0.1, -0.2]);
        for (j, l) in [l0, l1].iter().enumerate() {
            let mean = l.iter().sum::<f64>() / 4.0;
            let var = l.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for i in 0..4 {
                let z = (l[i] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j];
                let p = 1.0 / (1.0 + (-z).exp());
                assert!((probs[i * 2 + j] as f64 - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_sample_train_is_contract_error_eval_is_fine() {
        let (store, reg) = registry(&[("a", 2)]);
        let head = reg.get(&"a".into()).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::filled(&[2, 3], 0.3));
        assert!(matches!(
            predict(&mut g, &store, head, &[f], Mode::Train),
            Err(Error::Contract(_))
        ));
        let p = predict(&mut g, &store, head, &[f], Mode::Eval).unwrap();
        assert_eq!(g.shape(p.probs), &[1, 2]);
    }

    #[test]
    fn zero_logits_give_half_and_eval_is_pure() {
        let (store, reg) = registry(&[("a", 2)]);
        let head = reg.get(&"a".into()).unwrap();
        let run = || {
            let mut g = Graph::new();
            let f = g.input(Tensor::zeros(&[2, 3]));
            let p = predict(&mut g, &store, head, &[f, f], Mode::Eval).unwrap();
            g.value(p.probs).data().to_vec()
        };
        let a = run();
        assert!(a.iter().all(|&p| p == 0.5));
        assert_eq!(a, run());
    }

    #[test]
    fn running_stats_converge_geometrically() {
        let (mut store, reg) = registry(&[("a", 1)]);
        let head = reg.get(&"a".into()).unwrap().clone();
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![0.75],
            batch: 4,
        };
        for k in 1..=20 {
            head.commit_running_stats(&mut store, &stats).unwrap();
            let gap = 2.0 - store.get(head.running_mean).data()[0];
            assert!((gap as f64 - 2.0 * 0.9f64.powi(k)).abs() < 1e-12);
        }
        let rv = store.get(head.running_var).data()[0];
        let target = 1.0;
        assert!((rv - target).abs() < 1e-12, "{rv}");
    }
}
