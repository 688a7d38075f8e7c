//! Joint-training behavior over small generated datasets.
#![allow(clippy::unnecessary_cast)]

use std::collections::HashMap;

use attrfuse::config::RunConfig;
use attrfuse::data::{generate_synthetic, Dataset, Split};
use attrfuse::error::Error;
use attrfuse::model::ModelState;
use attrfuse::scheduler::{evaluate_split, rotate_eval, EpochSummary, Trainer};

/// Uneven training sizes so every dataset leaves a remainder.
fn small_setup(dir: &std::path::Path) -> (RunConfig, Vec<Dataset>) {
    let mut cfg = RunConfig::toy();
    cfg.epochs = 3;
    cfg.model.dim = 16;
    for (d, n) in cfg.datasets.iter_mut().zip([10usize, 7, 13]) {
        d.train = n;
        d.val = 6;
    }
    let datasets = cfg
        .datasets
        .iter()
        .map(|d| generate_synthetic(&cfg.synthetic_spec(d).unwrap(), cfg.seed, &dir.join(&d.id)).unwrap())
        .collect();
    (cfg, datasets)
}

fn trainer(cfg: &RunConfig, datasets: Vec<Dataset>, threaded: bool) -> Trainer {
    let specs: Vec<_> = datasets.iter().map(|d| d.spec.clone()).collect();
    let model = ModelState::new(&cfg.model, &specs, &cfg.query_modes(), cfg.seed).unwrap();
    let mut opts = cfg.train_options().unwrap();
    opts.threaded = threaded;
    Trainer::new(model, datasets, opts).unwrap()
}

fn step_trace(summaries: &[EpochSummary]) -> Vec<(u64, String, Vec<u64>, u64)> {
    summaries
        .iter()
        .flat_map(|s| &s.steps)
        .map(|r| (r.step, r.source_id.to_string(), r.origin_uids.clone(), (r.loss as f64).to_bits()))
        .collect()
}

#[test]
fn threaded_loading_matches_interleaved() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, datasets) = small_setup(dir.path());
    let mut a = trainer(&cfg, datasets.clone(), true);
    let mut b = trainer(&cfg, datasets, false);
    let sa: Vec<_> = (0..cfg.epochs).map(|_| a.run_epoch().unwrap()).collect();
    let sb: Vec<_> = (0..cfg.epochs).map(|_| b.run_epoch().unwrap()).collect();
    assert_eq!(step_trace(&sa), step_trace(&sb));
    for ((_, name, ta), (_, _, tb)) in a.model.store.iter().zip(b.model.store.iter()) {
        let same = ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "parameter {name} differs");
    }
}

#[test]
fn samples_are_conserved_and_trained_at_most_once() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, datasets) = small_setup(dir.path());
    let sizes: Vec<usize> = datasets.iter().map(|d| d.split(Split::Train).count()).collect();
    let ids: Vec<_> = datasets.iter().map(|d| d.spec.dataset_id.clone()).collect();
    let train_uids: Vec<Vec<u64>> = datasets
        .iter()
        .map(|d| d.split(Split::Train).map(|r| r.sample_uid).collect())
        .collect();
    let mut t = trainer(&cfg, datasets, true);
    let mut residual = vec![0usize; ids.len()];
    for epoch in 0..cfg.epochs {
        let summary = t.run_epoch().unwrap();
        assert!(t.engine.epoch_ledger.values().all(|&n| n == 1), "epoch {epoch}: a sample trained twice");
        let mut trained = vec![0usize; ids.len()];
        for step in &summary.steps {
            let d = ids.iter().position(|id| *id == step.source_id).unwrap();
            assert_eq!(step.origin_uids.len(), cfg.batch_size);
            assert!(step.origin_uids.iter().all(|u| train_uids[d].contains(u)));
            trained[d] += step.origin_uids.len();
        }
        let now = t.engine.residual();
        for d in 0..ids.len() {
            assert_eq!(residual[d] + sizes[d], trained[d] + now[d], "epoch {epoch}, dataset {}", ids[d]);
            assert!(now[d] < cfg.batch_size);
        }
        residual = now;
    }
    let pushed: Vec<u64> = sizes.iter().map(|&n| (n * cfg.epochs) as u64).collect();
    assert_eq!(t.engine.pushed(), &pushed[..]);
}

#[test]
fn every_batch_has_a_single_source() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, datasets) = small_setup(dir.path());
    let owner: HashMap<u64, String> = datasets
        .iter()
        .flat_map(|d| d.records.iter().map(|r| (r.sample_uid, d.spec.dataset_id.to_string())))
        .collect();
    let mut t = trainer(&cfg, datasets, false);
    let summary = t.run_epoch().unwrap();
    assert!(!summary.steps.is_empty());
    for step in &summary.steps {
        assert!(step.origin_uids.iter().all(|u| owner[u] == step.source_id.to_string()));
    }
}

#[test]
fn non_finite_parameter_stops_training() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, datasets) = small_setup(dir.path());
    let mut t = trainer(&cfg, datasets, true);
    let id = t.model.store.trainable_ids()[0];
    t.model.store.get_mut(id).data_mut()[0] = f64::NAN as _;
    match t.run_epoch() {
        Err(Error::Numerical(msg)) => assert!(!msg.is_empty()),
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

#[test]
fn rotating_evaluation_matches_isolated_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, datasets) = small_setup(dir.path());
    let mut t = trainer(&cfg, datasets, true);
    t.run_epoch().unwrap();
    let refs: Vec<&Dataset> = t.datasets.iter().collect();
    let rotated = rotate_eval(&t.model, &refs, cfg.threshold).unwrap();
    let reversed: Vec<&Dataset> = refs.iter().rev().copied().collect();
    let rotated_back = rotate_eval(&t.model, &reversed, cfg.threshold).unwrap();
    for d in &t.datasets {
        let alone = evaluate_split(&t.model, d, Split::Val, cfg.threshold).unwrap();
        assert_eq!(rotated[&d.spec.dataset_id], alone);
        assert_eq!(rotated_back[&d.spec.dataset_id], alone);
        assert_eq!(alone.samples, 6);
    }
}
