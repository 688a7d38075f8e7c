#![allow(dead_code)]

use attrfuse::config::RunConfig;
use attrfuse::data::{DatasetId, DatasetSpec};
use attrfuse::model::{ModelConfig, ModelState};
use attrfuse::numerics::{RngState, Scalar, Tensor};
use attrfuse::scheduler::{AdaptedSample, Batch, CollationAdapter, RawSample};

/// Toy registry from the bundled config with fixed positive rates.
pub fn toy_specs(cfg: &RunConfig) -> Vec<DatasetSpec> {
    cfg.datasets
        .iter()
        .map(|d| {
            let mut s = d.spec();
            let c = s.attribute_count();
            s.positive_rates = (0..c).map(|j| 0.2 + 0.6 * j as f64 / c as f64).collect();
            s
        })
        .collect()
}

pub fn toy_model() -> (RunConfig, ModelState) {
    let cfg = RunConfig::toy();
    let specs = toy_specs(&cfg);
    let model = ModelState::new(&cfg.model, &specs, &cfg.query_modes(), cfg.seed).unwrap();
    (cfg, model)
}

/// d=8, 8x8 images, patch 4: fast enough for many repetitions.
pub fn tiny_model() -> ModelState {
    let mut cfg = RunConfig::toy();
    for d in &mut cfg.datasets {
        d.height = 8;
        d.width = 8;
        d.attribute_names.clear();
        d.attributes = Some(3);
        d.target_rates = None;
    }
    cfg.datasets[1].attributes = Some(2);
    cfg.datasets[1].frames = 2;
    cfg.datasets[2].frames = 2;
    let specs = toy_specs(&cfg);
    let mc = ModelConfig {
        dim: 8,
        depth: 3,
        heads: 2,
        patch: 4,
        init_std: 0.3,
        adapter_hidden: None,
    };
    ModelState::new(&mc, &specs, &cfg.query_modes(), 605).unwrap()
}

pub fn random_frames(spec: &DatasetSpec, rng: &mut RngState) -> Tensor {
    Tensor::new(
        &[spec.frame_count, spec.channels, spec.height, spec.width],
        rng.gaussian_vec(spec.frame_len(), 1.0),
    )
    .unwrap()
}

/// Adapted single-source batch of random frames and labels.
pub fn random_batch(model: &ModelState, id: &DatasetId, b: usize, seed: u64) -> Batch<AdaptedSample> {
    let mut rng = RngState::new(seed);
    let spec = model.spec(id).unwrap().clone();
    let raws: Vec<RawSample> = (0..b)
        .map(|i| RawSample {
            source_id: id.clone(),
            frames: random_frames(&spec, &mut rng),
            labels: (0..spec.attribute_count()).map(|_| rng.bernoulli(0.5) as u8).collect(),
            origin_uid: i as u64,
        })
        .collect();
    let samples = CollationAdapter::new(&model.datasets).adapt(raws).unwrap();
    Batch {
        source_id: id.clone(),
        samples,
    }
}

#[allow(clippy::unnecessary_cast)]
pub fn bits(v: &[Scalar]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits() as u64).collect()
}
