//! Finite-difference gradient checks for every differentiable component.
//!
//! Each case is a scalar function of some parameters and (optionally) some
//! differentiable inputs. Analytic gradients from the tape are compared with
//! central differences, one coordinate at a time; coordinates are independent
//! and run through [`exec::map_range`].

use crate::data::{DatasetId, DatasetSpec};
use crate::embeddings::{
    add_positional, apply_time_adapter, patch_embed, ModalityKind, ModalityStem, PatchGrid, PositionalTables,
    TimeAdapter,
};
use crate::encoder::{build_attribute_queries, encode_visual, fuse, EncoderLayer, QueryMode};
use crate::error::{config_err, Result};
use crate::exec;
use crate::head::{predict, DatasetHead, Mode};
use crate::loss::{apply_lossrate, compute_weights, weighted_bce, LossRates};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{Graph, NodeId, ParamStore, RngState, Scalar, Tensor};

pub const COMPONENTS: [&str; 8] = [
    "patch_embed",
    "positional",
    "time_adapter",
    "encoder_layer",
    "fusion",
    "head",
    "weighted_bce",
    "end_to_end",
];

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-5;

const DIM: usize = 8;
const HEADS: usize = 2;
const FRAMES: usize = 2;
const BATCH: usize = 4;
const INIT: f64 = 0.3;

type Build = Box<dyn Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId> + Send + Sync>;

pub struct GradCase {
    pub component: &'static str,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl GradCase {
    pub fn new(component: &'static str, store: ParamStore, inputs: Vec<Tensor>, build: Build) -> Self {
        Self {
            component,
            store,
            inputs,
            build,
        }
    }

    pub fn loss(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<Scalar> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect();
        let l = (self.build)(&mut g, store, &nodes)?;
        Ok(g.value(l).data()[0])
    }

    /// Analytic gradients, flattened: trainable parameters in store order,
    /// then inputs. Labels name each block.
    pub fn analytic(&self) -> Result<Vec<(String, Vec<Scalar>)>> {
        let mut store = self.store.clone();
        store.zero_grads();
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = self.inputs.iter().map(|t| g.input(t.clone().with_grad())).collect();
        let l = (self.build)(&mut g, &store, &nodes)?;
        let grads = g.backward(l, &mut store)?;
        let mut out = Vec::new();
        for id in store.trainable_ids() {
            let n = store.get(id).len();
            let gv = store.grad(id).map(<[Scalar]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            out.push((store.name(id).to_string(), gv));
        }
        for (i, node) in nodes.iter().enumerate() {
            let n = self.inputs[i].len();
            let gv = grads.get(*node).map(<[Scalar]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            out.push((format!("input{i}"), gv));
        }
        Ok(out)
    }

    /// Central differences in the same layout as [`GradCase::analytic`].
    pub fn numeric(&self, h: f64) -> Result<Vec<(String, Vec<Scalar>)>> {
        let params = self.store.trainable_ids();
        let mut coords: Vec<(usize, usize)> = Vec::new();
        let mut blocks = Vec::new();
        for (b, &id) in params.iter().enumerate() {
            let n = self.store.get(id).len();
            coords.extend((0..n).map(|k| (b, k)));
            blocks.push((self.store.name(id).to_string(), n));
        }
        for (i, t) in self.inputs.iter().enumerate() {
            coords.extend((0..t.len()).map(|k| (params.len() + i, k)));
            blocks.push((format!("input{i}"), t.len()));
        }
        let h = h as Scalar;
        let values = exec::map_range(coords.len(), |c| -> Result<Scalar> {
            let (b, k) = coords[c];
            let eval = |delta: Scalar| -> Result<Scalar> {
                if b < params.len() {
                    let mut s = self.store.clone();
                    s.get_mut(params[b]).data_mut()[k] += delta;
                    self.loss(&s, &self.inputs)
                } else {
                    let mut inputs = self.inputs.clone();
                    inputs[b - params.len()].data_mut()[k] += delta;
                    self.loss(&self.store, &inputs)
                }
            };
            Ok((eval(h)? - eval(-h)?) / (2.0 * h))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        let mut pos = 0;
        for (name, n) in blocks {
            out.push((name, values[pos..pos + n].to_vec()));
            pos += n;
        }
        Ok(out)
    }
}

/// Deliberately corrupts one analytic gradient so tests can confirm that a
/// wrong backward pass is caught.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub component: String,
    /// Relative change applied to the largest analytic coordinate.
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: STEP,
            tolerance: TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub component: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn check_case(case: &GradCase, opts: &GradcheckOptions) -> Result<CaseReport> {
    let mut analytic = case.analytic()?;
    if let Some(f) = opts.fault.as_ref().filter(|f| f.component == case.component) {
        let mut best = (0, 0, -1.0);
        for (b, (_, v)) in analytic.iter().enumerate() {
            for (k, x) in v.iter().enumerate() {
                if x.abs() > best.2 {
                    best = (b, k, x.abs());
                }
            }
        }
        analytic[best.0].1[best.1] *= (1.0 + f.relative) as Scalar;
    }
    let numeric = case.numeric(opts.step)?;
    let mut worst = (0.0, String::new());
    let mut coordinates = 0;
    for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
        for (k, (&x, &y)) in a.iter().zip(n).enumerate() {
            coordinates += 1;
            let e = relative_error(x as f64, y as f64);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("{name}[{k}]"));
            }
        }
    }
    Ok(CaseReport {
        component: case.component.to_string(),
        coordinates,
        max_rel_error: worst.0,
        worst: worst.1,
        passed: worst.0 <= opts.tolerance,
    })
}

/// Runs every case whose name matches `component` (all when `None`).
pub fn run_gradcheck(component: Option<&str>, opts: &GradcheckOptions) -> Result<Vec<CaseReport>> {
    if cfg!(feature = "f32") {
        return Err(config_err!("gradient checks need the 64-bit build"));
    }
    let names: Vec<&'static str> = match component {
        None => COMPONENTS.to_vec(),
        Some(c) => match COMPONENTS.iter().find(|k| **k == c) {
            Some(k) => vec![*k],
            None => {
                return Err(config_err!(
                    "unknown component {c}; known: {}",
                    COMPONENTS.join(", ")
                ))
            }
        },
    };
    names
        .into_iter()
        .map(|n| check_case(&build_case(n)?, opts))
        .collect()
}

pub fn format_table(reports: &[CaseReport]) -> String {
    let mut s = format!(
        "{:<14} {:>7} {:>12}  {:<6} {}\n",
        "component", "coords", "max_rel_err", "status", "worst"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<14} {:>7} {:>12.3e}  {:<6} {}\n",
            r.component,
            r.coordinates,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        ));
    }
    s
}

fn spec(id: &str, modality: ModalityKind, c: usize, frames: usize) -> DatasetSpec {
    let mut s = DatasetSpec::new(id, modality, (0..c).map(|j| format!("a{j}")).collect(), frames, (8, 8, 3));
    s.positive_rates = (0..c).map(|j| 0.2 + 0.2 * j as f64).collect();
    s
}

fn grid() -> PatchGrid {
    PatchGrid::new(8, 8, 3, 4).expect("valid toy grid")
}

fn gaussian(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.gaussian_vec(n, std)).expect("shape matches")
}

/// Moves every trainable value off its structured initialization (unit
/// gains, zero biases) so that no coordinate sits on a symmetric point.
fn jitter(store: &mut ParamStore, rng: &RngState) {
    for id in store.trainable_ids() {
        let mut r = rng.fork_str(store.name(id));
        for v in store.get_mut(id).data_mut() {
            *v += (r.normal() * 0.1) as Scalar;
        }
    }
}

/// `sum(out * R)` for a fixed random `R`.
fn readout(g: &mut Graph, out: NodeId, tag: u64) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let r = gaussian(&mut RngState::new(tag).fork_str("readout"), &shape, 1.0);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

pub fn build_case(component: &str) -> Result<GradCase> {
    let rng = RngState::new(605).fork_str("gradcheck").fork_str(component);
    let mut data = rng.fork_str("data");
    let mut store = ParamStore::new();
    let case = match component {
        "patch_embed" => {
            let stem = ModalityStem::new(&mut store, &rng, ModalityKind::Rgb, grid(), DIM, INIT)?;
            let frames = gaussian(&mut data, &[FRAMES, 3, 8, 8], 1.0);
            jitter(&mut store, &rng);
            GradCase::new(
                "patch_embed",
                store,
                vec![],
                Box::new(move |g, s, _| {
                    let out = patch_embed(g, s, &frames, &stem)?;
                    readout(g, out, 1)
                }),
            )
        }
        "positional" => {
            let tables = PositionalTables::new(
                &mut store,
                &rng,
                grid().n_patches(),
                FRAMES,
                DIM,
                &[ModalityKind::Rgb, ModalityKind::Event],
                INIT,
            )?;
            let tokens = gaussian(&mut data, &[FRAMES, grid().n_patches(), DIM], 1.0);
            GradCase::new(
                "positional",
                store,
                vec![tokens],
                Box::new(move |g, s, x| {
                    let out = add_positional(g, s, x[0], &tables, ModalityKind::Event)?;
                    readout(g, out, 2)
                }),
            )
        }
        "time_adapter" => {
            let adapter = TimeAdapter::new(&mut store, &rng, FRAMES, DIM, 2 * DIM, INIT)?;
            let tokens = gaussian(&mut data, &[FRAMES, grid().n_patches(), DIM], 1.0);
            jitter(&mut store, &rng);
            GradCase::new(
                "time_adapter",
                store,
                vec![tokens],
                Box::new(move |g, s, x| {
                    let out = apply_time_adapter(g, s, x[0], &adapter)?;
                    readout(g, out, 3)
                }),
            )
        }
        "encoder_layer" => {
            let layer = EncoderLayer::new(&mut store, &rng, "enc.0", DIM, HEADS, INIT)?;
            let x = gaussian(&mut data, &[6, DIM], 1.0);
            jitter(&mut store, &rng);
            GradCase::new(
                "encoder_layer",
                store,
                vec![x],
                Box::new(move |g, s, x| {
                    let out = layer.forward(g, s, x[0])?;
                    readout(g, out, 4)
                }),
            )
        }
        "fusion" => {
            let layer = EncoderLayer::new(&mut store, &rng, "enc.fusion", DIM, HEADS, INIT)?;
            let sp = spec("fuse", ModalityKind::Rgb, 3, 1);
            let queries = build_attribute_queries(&mut store, &rng, &sp, &QueryMode::Learnable, DIM)?;
            let f_vis = gaussian(&mut data, &[grid().n_patches(), DIM], 1.0);
            jitter(&mut store, &rng);
            GradCase::new(
                "fusion",
                store,
                vec![f_vis],
                Box::new(move |g, s, x| {
                    let q = queries.tokens(g, s)?;
                    let (vis, attr) = fuse(g, s, x[0], q, &layer)?;
                    let a = readout(g, vis, 5)?;
                    let b = readout(g, attr, 6)?;
                    g.add(a, b)
                }),
            )
        }
        "head" => {
            let sp = spec("head", ModalityKind::Rgb, 3, 1);
            let head = DatasetHead::new(&mut store, &rng, &sp, DIM, INIT)?;
            jitter(&mut store, &rng);
            let feats: Vec<Tensor> = (0..BATCH).map(|_| gaussian(&mut data, &[3, DIM], 1.0)).collect();
            GradCase::new(
                "head",
                store,
                feats,
                Box::new(move |g, s, x| {
                    let p = predict(g, s, &head, x, Mode::Train)?;
                    readout(g, p.probs, 7)
                }),
            )
        }
        "weighted_bce" => {
            let id = DatasetId::new("bce");
            let weights = compute_weights(&id, &[0.1, 0.5, 0.8])?;
            let rates = LossRates::positional(std::slice::from_ref(&id), &[0.7])?;
            let probs = Tensor::new(
                &[BATCH, 3],
                (0..BATCH * 3).map(|_| data.uniform_range(0.1, 0.9) as Scalar).collect(),
            )?;
            let labels: Vec<Scalar> = (0..BATCH * 3).map(|_| data.bernoulli(0.5) as u8 as Scalar).collect();
            let mut mask = vec![1.0; BATCH * 3];
            mask[4] = 0.0;
            GradCase::new(
                "weighted_bce",
                store,
                vec![probs],
                Box::new(move |g, _, x| {
                    let l = weighted_bce(g, x[0], &labels, &mask, &weights)?;
                    apply_lossrate(g, l, &id, &rates)
                }),
            )
        }
        "end_to_end" => return end_to_end(&rng),
        other => {
            return Err(config_err!(
                "unknown component {other}; known: {}",
                COMPONENTS.join(", ")
            ))
        }
    };
    Ok(case)
}

/// Three datasets (one per modality) through the whole model: loss-rate
/// scaled weighted BCE of one batch each, summed.
fn end_to_end(rng: &RngState) -> Result<GradCase> {
    let specs = vec![
        spec("rgb", ModalityKind::Rgb, 3, 1),
        spec("video", ModalityKind::Video, 2, FRAMES),
        spec("event", ModalityKind::Event, 3, FRAMES),
    ];
    let cfg = ModelConfig {
        dim: DIM,
        depth: 3,
        heads: HEADS,
        patch: 4,
        init_std: INIT,
        adapter_hidden: None,
    };
    let modes = vec![QueryMode::Learnable; specs.len()];
    let mut model = ModelState::new(&cfg, &specs, &modes, 605)?;
    jitter(&mut model.store, rng);
    let ids = model.dataset_ids();
    let rates = LossRates::positional(&ids, &[0.8, 1.0, 0.6])?;
    let mut data = rng.fork_str("data");
    let mut batches = Vec::new();
    for s in &specs {
        let c = s.attribute_count();
        let frames: Vec<Tensor> = (0..BATCH)
            .map(|_| gaussian(&mut data, &[s.frame_count, 3, 8, 8], 1.0))
            .collect();
        let labels: Vec<Scalar> = (0..BATCH * c).map(|_| data.bernoulli(0.5) as u8 as Scalar).collect();
        let weights = compute_weights(&s.dataset_id, &s.positive_rates)?;
        batches.push((s.dataset_id.clone(), frames, labels, weights));
    }
    let store = model.store.clone();
    Ok(GradCase::new(
        "end_to_end",
        store,
        vec![],
        Box::new(move |g, s, _| {
            let mut total: Option<NodeId> = None;
            for (id, frames, labels, weights) in &batches {
                let spec = model.spec(id)?;
                let head = model.heads.route(model.query_set(id)?.count, id)?;
                let mut feats = Vec::new();
                for f in frames {
                    let f0 = model.embedder.embed(g, s, f, spec.modality)?;
                    let v = encode_visual(g, s, f0, &model.encoder.visual)?;
                    let q = model.query_set(id)?.tokens(g, s)?;
                    let (_, attr) = fuse(g, s, v, q, &model.encoder.fusion)?;
                    feats.push(attr);
                }
                let p = predict(g, s, head, &feats, Mode::Train)?;
                let mask = vec![1.0; labels.len()];
                let l = weighted_bce(g, p.probs, labels, &mask, weights)?;
                let l = apply_lossrate(g, l, id, &rates)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("three batches"))
        }),
    ))
}
