//! Full model: embedder, phased encoder, per-dataset query sets and heads.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, DatasetSpec};
use crate::embeddings::{Embedder, ModalityKind, ModalityStem, PatchGrid, PositionalTables, TimeAdapter};
use crate::encoder::{build_attribute_queries, encode_visual, fuse, AttributeQuerySet, PhasedEncoder, QueryMode};
use crate::error::{config_err, Error, Result};
use crate::exec;
use crate::head::{predict, DatasetHead, HeadRegistry, Mode, Prediction};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RngState, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub init_std: f64,
    /// Time adapter hidden width; `2 * dim` when absent.
    pub adapter_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 3,
            heads: 2,
            patch: 16,
            init_std: 0.02,
            adapter_hidden: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub encoder: PhasedEncoder,
    pub queries: IndexMap<DatasetId, AttributeQuerySet>,
    pub heads: HeadRegistry,
    /// Registration order.
    pub datasets: Vec<DatasetSpec>,
}

impl ModelState {
    /// Builds and initializes every parameter. All datasets must share one
    /// image geometry, and all multi-frame datasets one frame count.
    pub fn new(
        config: &ModelConfig,
        datasets: &[DatasetSpec],
        query_modes: &[QueryMode],
        seed: u64,
    ) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| config_err!("no datasets registered"))?;
        if query_modes.len() != datasets.len() {
            return Err(config_err!(
                "{} query modes for {} datasets",
                query_modes.len(),
                datasets.len()
            ));
        }
        for s in datasets {
            s.validate()?;
            if (s.height, s.width, s.channels) != (first.height, first.width, first.channels) {
                return Err(config_err!(
                    "dataset {} is {}x{}x{}, expected {}x{}x{} like {}",
                    s.dataset_id,
                    s.height,
                    s.width,
                    s.channels,
                    first.height,
                    first.width,
                    first.channels,
                    first.dataset_id
                ));
            }
        }
        let mut multi: Vec<usize> = datasets
            .iter()
            .map(|s| s.frame_count)
            .filter(|&t| t > 1)
            .collect();
        multi.sort_unstable();
        multi.dedup();
        if multi.len() > 1 {
            return Err(config_err!("multi-frame datasets must share one frame count, got {multi:?}"));
        }
        let frames = multi.first().copied().unwrap_or(1);

        let mut modalities: Vec<ModalityKind> = Vec::new();
        for s in datasets {
            if !modalities.contains(&s.modality) {
                modalities.push(s.modality);
            }
        }
        modalities.sort_by_key(|m| ModalityKind::ALL.iter().position(|k| k == m));

        let d = config.dim;
        let rng = RngState::new(seed).fork_str("model");
        let grid = PatchGrid::new(first.height, first.width, first.channels, config.patch)?;
        let mut store = ParamStore::new();
        let stems = modalities
            .iter()
            .map(|&m| ModalityStem::new(&mut store, &rng, m, grid, d, config.init_std))
            .collect::<Result<Vec<_>>>()?;
        let tables = PositionalTables::new(
            &mut store,
            &rng,
            grid.n_patches(),
            frames,
            d,
            &modalities,
            config.init_std,
        )?;
        let hidden = config.adapter_hidden.unwrap_or(2 * d);
        let adapter = TimeAdapter::new(&mut store, &rng, frames, d, hidden, config.init_std)?;
        let encoder = PhasedEncoder::new(&mut store, &rng, config.depth, d, config.heads, config.init_std)?;

        let mut queries = IndexMap::new();
        let mut heads = HeadRegistry::new();
        for (s, mode) in datasets.iter().zip(query_modes) {
            if queries.contains_key(&s.dataset_id) {
                return Err(config_err!("dataset {} registered twice", s.dataset_id));
            }
            let q = build_attribute_queries(&mut store, &rng, s, mode, d)?;
            queries.insert(s.dataset_id.clone(), q);
            heads.register(DatasetHead::new(&mut store, &rng, s, d, config.init_std)?)?;
        }
        Ok(Self {
            config: config.clone(),
            store,
            embedder: Embedder {
                stems,
                tables,
                adapter,
                grid,
                dim: d,
            },
            encoder,
            queries,
            heads,
            datasets: datasets.to_vec(),
        })
    }

    pub fn dataset_ids(&self) -> Vec<DatasetId> {
        self.datasets.iter().map(|s| s.dataset_id.clone()).collect()
    }

    pub fn spec(&self, id: &DatasetId) -> Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|s| &s.dataset_id == id)
            .ok_or_else(|| {
                Error::Routing(format!(
                    "unknown dataset {id}; known: {}",
                    self.dataset_ids()
                        .iter()
                        .map(DatasetId::as_str)
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    pub fn query_set(&self, id: &DatasetId) -> Result<&AttributeQuerySet> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::Routing(format!("no query set for dataset {id}")))
    }

    /// Visual tokens after the visual-only layers, `[n, d]`.
    pub fn visual_features(&self, g: &mut Graph, frames: &Tensor, modality: ModalityKind) -> Result<NodeId> {
        let f0 = self.embedder.embed(g, &self.store, frames, modality)?;
        encode_visual(g, &self.store, f0, &self.encoder.visual)
    }

    /// Attribute outputs of the fusion layer for one sample, `[C, d]`.
    pub fn attribute_features(&self, g: &mut Graph, f_vis: NodeId, id: &DatasetId) -> Result<NodeId> {
        let q = self.query_set(id)?.tokens(g, &self.store)?;
        let (_, attr) = fuse(g, &self.store, f_vis, q, &self.encoder.fusion)?;
        Ok(attr)
    }

    /// Forward pass for a single-source batch up to the head output.
    pub fn forward(&self, g: &mut Graph, frames: &[&Tensor], id: &DatasetId, mode: Mode) -> Result<Prediction> {
        let spec = self.spec(id)?;
        let qs = self.query_set(id)?;
        let head = self.heads.route(qs.count, id)?;
        let mut feats = Vec::with_capacity(frames.len());
        for f in frames {
            let v = self.visual_features(g, f, spec.modality)?;
            feats.push(self.attribute_features(g, v, id)?);
        }
        predict(g, &self.store, head, &feats, mode)
    }

    /// Evaluation-mode probabilities, one row per sample. Samples are
    /// independent in this mode, so they are processed in parallel.
    pub fn predict_eval(&self, frames: &[Tensor], id: &DatasetId) -> Result<Vec<Vec<Scalar>>> {
        self.spec(id)?;
        exec::map_range(frames.len(), |i| {
            let mut g = Graph::new();
            let p = self.forward(&mut g, &[&frames[i]], id, Mode::Eval)?;
            Ok(g.value(p.probs).data().to_vec())
        })
        .into_iter()
        .collect()
    }

    /// Parameters owned by one dataset: its query set and its head.
    pub fn dataset_params(&self, id: &DatasetId) -> Result<Vec<ParamId>> {
        let mut ids = self.query_set(id)?.param_ids();
        let head = self
            .heads
            .get(id)
            .ok_or_else(|| Error::Routing(format!("no head for dataset {id}")))?;
        ids.extend(head.param_ids());
        Ok(ids)
    }
}
