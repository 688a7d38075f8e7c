//! Rotational evaluation: one dataset at a time, each on its own split only.

use indexmap::IndexMap;

use crate::data::{Dataset, DatasetId, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ModelState;
use crate::numerics::Tensor;

/// Checks that the model can score this dataset.
pub fn check_compatible(model: &ModelState, dataset: &Dataset) -> Result<()> {
    let id = &dataset.spec.dataset_id;
    let spec = model.spec(id)?;
    if spec.attribute_count() != dataset.spec.attribute_count() {
        return Err(Error::Incompatible(format!(
            "head {id} has {} attributes, dataset has {}",
            spec.attribute_count(),
            dataset.spec.attribute_count()
        )));
    }
    if spec.modality != dataset.spec.modality || spec.frame_count != dataset.spec.frame_count {
        return Err(Error::Incompatible(format!(
            "dataset {id} is {} with {} frames, model expects {} with {}",
            dataset.spec.modality, dataset.spec.frame_count, spec.modality, spec.frame_count
        )));
    }
    Ok(())
}

/// Evaluation-mode report for one split of one dataset.
pub fn evaluate_split(model: &ModelState, dataset: &Dataset, split: Split, threshold: f64) -> Result<MetricsReport> {
    check_compatible(model, dataset)?;
    let records: Vec<_> = dataset.split(split).collect();
    let frames = records
        .iter()
        .map(|r| dataset.frames(r))
        .collect::<Result<Vec<Tensor>>>()?;
    let id = &dataset.spec.dataset_id;
    let probs: Vec<_> = model.predict_eval(&frames, id)?.into_iter().flatten().collect();
    let labels: Vec<u8> = records.iter().flat_map(|r| r.labels.iter().copied()).collect();
    MetricsReport::compute(id, &probs, &labels, dataset.spec.attribute_count(), threshold)
}

/// Validation reports in the given order, computed strictly one dataset
/// after another.
pub fn rotate_eval(
    model: &ModelState,
    datasets: &[&Dataset],
    threshold: f64,
) -> Result<IndexMap<DatasetId, MetricsReport>> {
    let mut out = IndexMap::new();
    for d in datasets {
        let report = evaluate_split(model, d, Split::Val, threshold)?;
        out.insert(d.spec.dataset_id.clone(), report);
    }
    Ok(out)
}
