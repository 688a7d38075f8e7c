//! Property tests over the graph ops, metrics, head and data paths.
#![allow(clippy::unnecessary_cast)]

mod common;

use proptest::prelude::*;

use attrfuse::config::RunConfig;
use attrfuse::data::{augment, AugmentationConfig, DatasetId};
use attrfuse::data::synthetic::render_all;
use attrfuse::head::Mode;
use attrfuse::loss::compute_weights;
use attrfuse::metrics::MetricsReport;
use attrfuse::numerics::{Graph, NodeId, RngState, Scalar, Tensor};

use common::{random_frames, tiny_model};

const STEP: Scalar = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn gaussian(shape: &[usize], std: f64, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.gaussian_vec(n, std)).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.uniform_range(lo, hi) as Scalar).collect();
    Tensor::new(shape, v).unwrap()
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// `sum(f(inputs) ⊙ R)` for a fixed random readout `R`.
fn readout_loss(inputs: &[Tensor], readout_seed: u64, build: &Build, grads: bool) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let t = if grads { t.clone().with_grad() } else { t.clone() };
            g.input(t)
        })
        .collect();
    let out = build(&mut g, &ids);
    let shape = g.shape(out).to_vec();
    let r = g.constant(gaussian(&shape, 1.0, &mut RngState::new(readout_seed)));
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    (g, ids, loss)
}

/// Largest analytic/central-difference mismatch, scaled by the gradient norm.
fn fd_error(inputs: Vec<Tensor>, seed: u64, build: &Build) -> f64 {
    let (g, ids, loss) = readout_loss(&inputs, seed, build, true);
    let grads = g.backward_grads(loss).unwrap();
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: Scalar| {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[i] += delta;
                let (g, _, l) = readout_loss(&shifted, seed, build, false);
                g.value(l).data()[0]
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max((a - numeric).abs() as f64);
            scale = scale.max(a.abs() as f64);
        }
    }
    worst / scale
}

fn shape_and_seed() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=6, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradient((r, c, seed) in shape_and_seed(), k in 1usize..=6) {
        let mut rng = RngState::new(seed);
        let inputs = vec![gaussian(&[r, k], 1.0, &mut rng), gaussian(&[k, c], 1.0, &mut rng)];
        let e = fd_error(inputs, seed, &|g, x| g.matmul(x[0], x[1]).unwrap());
        prop_assert!(e < FD_TOLERANCE, "error {e}");
    }

    #[test]
    fn elementwise_gradients((r, c, seed) in shape_and_seed()) {
        let mut rng = RngState::new(seed);
        let a = gaussian(&[r, c], 1.0, &mut rng);
        let b = gaussian(&[r, c], 1.0, &mut rng);
        let row = gaussian(&[c], 1.0, &mut rng);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("add", vec![a.clone(), b.clone()], Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
            ("add_row", vec![a.clone(), row], Box::new(|g, x| g.add_row(x[0], x[1]).unwrap())),
            ("mul", vec![a.clone(), b.clone()], Box::new(|g, x| g.mul(x[0], x[1]).unwrap())),
            ("scale", vec![a.clone()], Box::new(|g, x| g.scale(x[0], -1.7))),
            ("gelu", vec![a.clone()], Box::new(|g, x| g.gelu(x[0]))),
            ("sigmoid", vec![a.clone()], Box::new(|g, x| g.sigmoid(x[0]))),
            ("softmax_rows", vec![a.clone()], Box::new(|g, x| g.softmax_rows(x[0]))),
            ("row_dot", vec![a.clone(), b], Box::new(|g, x| g.row_dot(x[0], x[1]).unwrap())),
            ("sum", vec![a], Box::new(|g, x| g.sum(x[0]))),
        ];
        for (name, inputs, build) in cases {
            let e = fd_error(inputs, seed, build.as_ref());
            prop_assert!(e < FD_TOLERANCE, "{name}: error {e}");
        }
    }

    #[test]
    fn structural_gradients((r, c, seed) in shape_and_seed(), cut in 0usize..6) {
        let mut rng = RngState::new(seed);
        let a = gaussian(&[r, c], 1.0, &mut rng);
        let b = gaussian(&[r, c], 1.0, &mut rng);
        let index: Vec<usize> = (0..r + 2).map(|_| rng.below(r)).collect();
        let (cs, cl) = (cut % c, c - cut % c);
        let (rs, rl) = (cut % r, r - cut % r);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("transpose", vec![a.clone()], Box::new(|g, x| g.transpose(x[0]).unwrap())),
            ("reshape", vec![a.clone()], Box::new(move |g, x| g.reshape(x[0], &[c, r]).unwrap())),
            ("slice_cols", vec![a.clone()], Box::new(move |g, x| g.slice_cols(x[0], cs, cl).unwrap())),
            ("slice_rows", vec![a.clone()], Box::new(move |g, x| g.slice_rows(x[0], rs, rl).unwrap())),
            ("concat_cols", vec![a.clone(), b.clone()], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]).unwrap())),
            ("concat_rows", vec![a.clone(), b], Box::new(|g, x| g.concat_rows(&[x[0], x[1], x[0]]).unwrap())),
            ("gather_rows", vec![a], Box::new(move |g, x| g.gather_rows(x[0], &index).unwrap())),
        ];
        for (name, inputs, build) in cases {
            let e = fd_error(inputs, seed, build.as_ref());
            prop_assert!(e < FD_TOLERANCE, "{name}: error {e}");
        }
    }

    #[test]
    fn normalization_gradients(r in 3usize..=6, c in 2usize..=6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = gaussian(&[r, c], 2.0, &mut rng);
        let gain = uniform(&[c], 0.5, 1.5, &mut rng);
        let bias = gaussian(&[c], 1.0, &mut rng);
        let mean: Vec<Scalar> = rng.gaussian_vec(c, 1.0);
        let var: Vec<Scalar> = (0..c).map(|_| rng.uniform_range(0.5, 2.0) as Scalar).collect();
        let inputs = vec![x, gain, bias];
        let cases: Vec<(&str, Box<Build>)> = vec![
            ("layer_norm", Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap())),
            ("batch_norm_train", Box::new(|g, x| g.batch_norm_train(x[0], x[1], x[2], 1e-5).unwrap().0)),
            ("batch_norm_eval", Box::new(move |g, x| g.batch_norm_eval(x[0], x[1], x[2], &mean, &var, 1e-5).unwrap())),
        ];
        for (name, build) in cases {
            let e = fd_error(inputs.clone(), seed, build.as_ref());
            prop_assert!(e < FD_TOLERANCE, "{name}: error {e}");
        }
    }

    #[test]
    fn weighted_bce_gradient((r, c, seed) in shape_and_seed()) {
        let mut rng = RngState::new(seed);
        let probs = uniform(&[r, c], 0.05, 0.95, &mut rng);
        let labels: Vec<Scalar> = (0..r * c).map(|_| rng.bernoulli(0.5) as u8 as Scalar).collect();
        let mask: Vec<Scalar> = (0..r * c).map(|_| rng.bernoulli(0.8) as u8 as Scalar).collect();
        let weights: Vec<Scalar> = (0..c).map(|_| rng.uniform_range(0.2, 3.0) as Scalar).collect();
        let e = fd_error(vec![probs], seed, &move |g, x| g.weighted_bce(x[0], &labels, &mask, &weights).unwrap());
        prop_assert!(e < FD_TOLERANCE, "error {e}");
    }

    #[test]
    fn softmax_rows_are_distributions((r, c, seed) in shape_and_seed(), std in 0.1f64..30.0) {
        let mut g = Graph::new();
        let x = g.input(gaussian(&[r, c], std, &mut RngState::new(seed)));
        let s = g.softmax_rows(x);
        for row in g.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let total: Scalar = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "row sum {total}");
        }
    }

    #[test]
    fn bce_decreases_as_positive_probability_rises(p in 0.001f64..0.998, dp in 0.0005f64..0.001, w in 0.1f64..5.0) {
        let loss = |p: f64| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(&[1, 1], vec![p as Scalar]).unwrap());
            let l = g.weighted_bce(x, &[1.0], &[1.0], &[w as Scalar]).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!(loss(p + dp) < loss(p));
    }

    #[test]
    fn metrics_ignore_sample_order(n in 1usize..24, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let probs: Vec<Scalar> = (0..n * c).map(|_| rng.uniform() as Scalar).collect();
        let labels: Vec<u8> = (0..n * c).map(|_| rng.bernoulli(0.4) as u8).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pick = |v: &[Scalar]| -> Vec<Scalar> { order.iter().flat_map(|&i| v[i * c..(i + 1) * c].to_vec()).collect() };
        let pick_u8 = |v: &[u8]| -> Vec<u8> { order.iter().flat_map(|&i| v[i * c..(i + 1) * c].to_vec()).collect() };
        let id = DatasetId::new("p");
        let a = MetricsReport::compute(&id, &probs, &labels, c, 0.5).unwrap();
        let b = MetricsReport::compute(&id, &pick(&probs), &pick_u8(&labels), c, 0.5).unwrap();
        prop_assert_eq!(a.ma, b.ma);
        prop_assert_eq!(&a.counts, &b.counts);
        let (ia, ib) = (a.instance.unwrap(), b.instance.unwrap());
        for (x, y) in [(ia.accuracy, ib.accuracy), (ia.precision, ib.precision), (ia.recall, ib.recall), (ia.f1, ib.f1)] {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        for (_, v) in a.values() {
            if let Some(v) = v {
                prop_assert!((0.0..=100.0).contains(&v), "value {v}");
            }
        }
    }

    #[test]
    fn mean_accuracy_ignores_attribute_order(n in 1usize..24, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let probs: Vec<Scalar> = (0..n * c).map(|_| rng.uniform() as Scalar).collect();
        let labels: Vec<u8> = (0..n * c).map(|_| rng.bernoulli(0.4) as u8).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut perm);
        let permute = |i: usize| perm[i % c] + (i / c) * c;
        let pp: Vec<Scalar> = (0..n * c).map(|i| probs[permute(i)]).collect();
        let pl: Vec<u8> = (0..n * c).map(|i| labels[permute(i)]).collect();
        let id = DatasetId::new("p");
        let a = MetricsReport::compute(&id, &probs, &labels, c, 0.5).unwrap();
        let b = MetricsReport::compute(&id, &pp, &pl, c, 0.5).unwrap();
        match (a.ma, b.ma) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() <= 1e-9);
                prop_assert!((0.0..=100.0).contains(&x));
            }
            (x, y) => prop_assert_eq!(x, y),
        }
        prop_assert_eq!(a.excluded_attributes.len(), b.excluded_attributes.len());
    }

    #[test]
    fn batch_norm_train_standardizes(b in 4usize..=16, c in 1usize..=8, seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = RngState::new(seed);
        let mut x = gaussian(&[b, c], 10.0, &mut rng);
        for v in x.data_mut() {
            *v += shift as Scalar;
        }
        let mut g = Graph::new();
        let xn = g.input(x);
        let gain = g.constant(Tensor::filled(&[c], 1.0));
        let bias = g.constant(Tensor::zeros(&[c]));
        let (out, stats) = g.batch_norm_train(xn, gain, bias, attrfuse::head::BN_EPS as Scalar).unwrap();
        prop_assume!(stats.var.iter().all(|&v| v >= 0.1));
        let y = g.value(out);
        for j in 0..c {
            let col: Vec<f64> = (0..b).map(|i| y.data()[i * c + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(mean.abs() <= 1e-8, "column {j} mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-4, "column {j} variance {var}");
        }
    }

    #[test]
    fn augmentation_keeps_shape(
        t in 1usize..=3,
        ch in 1usize..=3,
        h in 4usize..=12,
        w in 4usize..=12,
        pad in 0usize..=3,
        flip in 0.0f64..=1.0,
        erase in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let frames = gaussian(&[t, ch, h, w], 1.0, &mut rng);
        let cfg = AugmentationConfig {
            flip_prob: flip,
            pad,
            crop: None,
            erase_prob: erase,
            erase_area: (0.02, 0.3),
        };
        let out = augment(&frames, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), frames.shape());
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn head_probabilities_are_open_unit(seed in any::<u64>(), b in 2usize..6, which in 0usize..3) {
        let model = tiny_model();
        let id = model.dataset_ids()[which].clone();
        let spec = model.spec(&id).unwrap().clone();
        let mut rng = RngState::new(seed);
        let frames: Vec<Tensor> = (0..b).map(|_| random_frames(&spec, &mut rng)).collect();
        let refs: Vec<&Tensor> = frames.iter().collect();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let pred = model.forward(&mut g, &refs, &id, mode).unwrap();
            let p = g.value(pred.probs);
            prop_assert_eq!(p.shape(), &[b, spec.attribute_count()][..]);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0), "{mode:?}");
        }
    }
}

/// A single-feature threshold on the mean intensity of each attribute's
/// cell separates present from absent attributes.
#[test]
fn synthetic_attributes_are_linearly_detectable() {
    let cfg = RunConfig::toy();
    for entry in &cfg.datasets {
        let syn = cfg.synthetic_spec(entry).unwrap();
        let samples = render_all(&syn, cfg.seed).unwrap();
        let s = &syn.spec;
        let (t, ch, h, w, p) = (s.frame_count, s.channels, s.height, s.width, syn.patch);
        for j in 0..s.attribute_count() {
            let (row, col) = syn.cell_of(j);
            let mut scored: Vec<(f64, u8)> = samples
                .iter()
                .map(|smp| {
                    let mut total = 0.0f64;
                    for f in 0..t {
                        for c in 0..ch {
                            for y in row * p..(row + 1) * p {
                                for x in col * p..(col + 1) * p {
                                    total += smp.frames[((f * ch + c) * h + y) * w + x] as f64;
                                }
                            }
                        }
                    }
                    (total / (t * ch * p * p) as f64, smp.labels[j])
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = scored.len();
            let positives = scored.iter().filter(|s| s.1 == 1).count();
            // predict present above the cut: correct = negatives below + positives above
            let mut best = positives.max(n - positives);
            let (mut neg_below, mut pos_below) = (0usize, 0usize);
            for &(_, y) in &scored {
                if y == 1 {
                    pos_below += 1;
                } else {
                    neg_below += 1;
                }
                best = best.max(neg_below + positives - pos_below);
            }
            let acc = best as f64 / n as f64;
            assert!(acc >= 0.95, "{} attribute {j}: probe accuracy {acc}", s.dataset_id);
        }
    }
}

#[test]
fn weights_fall_as_positive_rate_rises() {
    let id = DatasetId::new("w");
    let rates: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    let w = compute_weights(&id, &rates).unwrap().w;
    assert!(w.windows(2).all(|p| p[1] < p[0]));
}
