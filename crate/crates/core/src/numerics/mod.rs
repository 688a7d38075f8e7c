//! Dense tensors, reverse-mode autodiff, seeded streams and AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, NodeId, PROB_CLAMP};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};

use crate::error::Result;

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(x, y)?;
    Ok(g.value(out).clone())
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let n = g.constant(x.clone());
    let out = g.softmax_rows(n);
    g.value(out).clone()
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: Scalar) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b, c) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let out = g.layer_norm(a, b, c, eps)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let out = matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(out.data(), &[17., 39.]);
        let err = matmul(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[5, 2])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[3, 3], &[0., 0., 0., 1000., 0., -5., 1., 2., 0.]));
        for j in 0..3 {
            assert!((s.at(&[0, j]) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.at(&[1, 0]) - 1.0).abs() < 1e-12 && s.data().iter().all(|v| v.is_finite()));
        let s2 = softmax_rows(&t(&[1, 2], &[1., 2.]));
        // 1/(1+e) and e/(1+e)
        assert!((s2.at(&[0, 0]) - 0.268_941_421_369_995_1).abs() < 1e-5);
        assert!((s2.at(&[0, 1]) - 0.731_058_578_630_004_9).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let c = layer_norm(&Tensor::filled(&[2, 4], 3.0), &ones, &zeros, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        let y = layer_norm(
            &t(&[1, 2], &[1., 3.]),
            &Tensor::filled(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.at(&[0, 0]) + 1.0).abs() < 1e-9 && (y.at(&[0, 1]) - 1.0).abs() < 1e-9);
        assert!(layer_norm(&Tensor::zeros(&[2, 3]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn backward_linear_and_bce_closed_forms() {
        // loss = sum(W x): grad W[i, j] = x[j] for every row i.
        let mut store = ParamStore::new();
        let w = store
            .add_trainable("w", t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]))
            .unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let x = g.constant(t(&[3, 1], &[1.0, -2.0, 0.5]));
        let y = g.matmul(wn, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).unwrap(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);

        // One-logit sigmoid BCE: d/dw = (p - y) x.
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", t(&[1, 2], &[0.3, -0.7])).unwrap();
        let xv = [0.8, 1.9];
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let x = g.constant(t(&[2, 1], &xv));
        let z = g.matmul(wn, x).unwrap();
        let p = g.sigmoid(z);
        let loss = g.weighted_bce(p, &[1.0], &[1.0], &[1.0]).unwrap();
        g.backward(loss, &mut store).unwrap();
        let pv = kernels::sigmoid(0.3 * 0.8 - 0.7 * 1.9);
        let gw = store.grad(w).unwrap();
        for j in 0..2 {
            assert!((gw[j] - (pv - 1.0) * xv[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        assert!(matches!(
            g.backward(wn, &mut store),
            Err(Error::Contract(_))
        ));
        let s = g.sum(wn);
        g.backward(s, &mut store).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(w).unwrap(), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        let used = store.add_trainable("a", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.add_trainable("b", t(&[2], &[3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, used);
        let _b = g.param(&store, unused);
        let s = g.sum(a);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(unused).unwrap(), &[0.0, 0.0]);
    }
}
