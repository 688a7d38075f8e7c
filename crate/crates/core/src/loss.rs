//! Imbalance-weighted binary cross-entropy and per-dataset loss rates.

use indexmap::IndexMap;

use crate::data::DatasetId;
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::numerics::{Graph, NodeId, Scalar};

/// Positive rates below this are raised to it before weighting.
pub const RATE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeWeights {
    pub dataset_id: DatasetId,
    pub w: Vec<Scalar>,
    /// Clamped positive rates the weights were computed from.
    pub r: Vec<f64>,
}

/// `w_j = ln(1/r_j + 1)` with `r_j` clamped to `[RATE_FLOOR, 1]`.
pub fn compute_weights(dataset_id: &DatasetId, positive_rates: &[f64]) -> Result<AttributeWeights> {
    if let Some(r) = positive_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(data_err!("dataset {dataset_id}: positive rate {r} outside [0,1]"));
    }
    let r: Vec<f64> = positive_rates.iter().map(|&r| r.max(RATE_FLOOR)).collect();
    let w = r.iter().map(|&r| (1.0 / r + 1.0).ln() as Scalar).collect();
    Ok(AttributeWeights {
        dataset_id: dataset_id.clone(),
        w,
        r,
    })
}

/// Graph node for the weighted loss. Labels and mask must be 0/1.
pub fn weighted_bce(
    g: &mut Graph,
    probs: NodeId,
    labels: &[Scalar],
    mask: &[Scalar],
    weights: &AttributeWeights,
) -> Result<NodeId> {
    if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(data_err!("label value {v} is not 0 or 1"));
    }
    if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(data_err!("mask value {v} is not 0 or 1"));
    }
    g.weighted_bce(probs, labels, mask, &weights.w)
}

/// Per-dataset loss multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRates {
    rates: IndexMap<DatasetId, f64>,
}

impl LossRates {
    /// Every dataset at 1.0.
    pub fn uniform(ids: &[DatasetId]) -> Self {
        Self {
            rates: ids.iter().map(|id| (id.clone(), 1.0)).collect(),
        }
    }

    /// Maps `rates[i]` to `ids[i]` (registration order).
    pub fn positional(ids: &[DatasetId], rates: &[f64]) -> Result<Self> {
        if ids.len() != rates.len() {
            return Err(config_err!(
                "{} loss rates for {} datasets",
                rates.len(),
                ids.len()
            ));
        }
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(config_err!("loss rate {r} must be positive"));
        }
        Ok(Self {
            rates: ids.iter().cloned().zip(rates.iter().copied()).collect(),
        })
    }

    pub fn get(&self, id: &DatasetId) -> Result<f64> {
        self.rates
            .get(id)
            .copied()
            .ok_or_else(|| Error::Routing(format!("no loss rate for dataset {id}")))
    }

    pub fn values(&self) -> Vec<f64> {
        self.rates.values().copied().collect()
    }

    /// `rate(id) * loss` on plain values.
    pub fn apply(&self, id: &DatasetId, loss: Scalar) -> Result<Scalar> {
        Ok(self.get(id)? as Scalar * loss)
    }
}

/// Scales a loss node, and therefore every upstream gradient, by the
/// dataset's rate.
pub fn apply_lossrate(g: &mut Graph, loss: NodeId, id: &DatasetId, rates: &LossRates) -> Result<NodeId> {
    if !g.shape(loss).is_empty() && g.value(loss).len() != 1 {
        return Err(shape_err!("loss rate applies to a scalar, got {:?}", g.shape(loss)));
    }
    Ok(g.scale(loss, rates.get(id)? as Scalar))
}
