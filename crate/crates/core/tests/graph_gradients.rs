//! Every differentiable tape operation against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentiment_core::{Graph, NodeId, Tensor};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Builds `op` on fresh leaves, reduces its output with fixed random
/// weights, and compares every input coordinate against central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, op: F)
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
{
    let eval = |inputs: &[Tensor<f64>],
                weights: Option<&Tensor<f64>>|
     -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &ids);
        let shape = g.value(out).shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            random(&shape, &mut r)
        });
        let wid = g.input(w.clone());
        let prod = g.mul(out, wid).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grads = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();
        (g.value(loss).item(), grads, w)
    };
    let (_, analytic, weights) = eval(&inputs, None);

    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[which].data_mut()[k] -= STEP;
            let fd =
                (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * STEP);
            let a = analytic[which].data()[k];
            let scale = a.abs().max(fd.abs());
            if scale < 1e-7 {
                assert!(
                    (a - fd).abs() < 1e-9,
                    "input {which}[{k}]: analytic {a} fd {fd}"
                );
                continue;
            }
            let rel = (a - fd).abs() / scale;
            assert!(
                rel <= REL_TOL,
                "input {which}[{k}]: analytic {a} fd {fd} rel {rel:e}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn matmul_variants() {
    let mut r = rng();
    check(
        vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)],
        |g, x| g.matmul(x[0], x[1]).unwrap(),
    );
    check(
        vec![random(&[3, 4], &mut r), random(&[4], &mut r)],
        |g, x| g.matmul(x[0], x[1]).unwrap(),
    );
    check(
        vec![random(&[3, 4], &mut r), random(&[5, 4], &mut r)],
        |g, x| g.matmul_nt(x[0], x[1]).unwrap(),
    );
    check(
        vec![random(&[3, 4], &mut r), random(&[3, 2], &mut r)],
        |g, x| g.matmul_tn(x[0], x[1]).unwrap(),
    );
    check(
        vec![random(&[3, 4], &mut r), random(&[3], &mut r)],
        |g, x| g.matmul_tn(x[0], x[1]).unwrap(),
    );
}

#[test]
fn elementwise() {
    let mut r = rng();
    let (a, b) = (random(&[2, 3], &mut r), random(&[2, 3], &mut r));
    check(vec![a.clone(), b.clone()], |g, x| {
        g.add(x[0], x[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], |g, x| {
        g.sub(x[0], x[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], |g, x| {
        g.mul(x[0], x[1]).unwrap()
    });
    check(vec![a.clone()], |g, x| g.scale(x[0], -2.5));
    check(vec![a.clone()], |g, x| g.tanh(x[0]));
    check(vec![a.clone()], |g, x| g.sigmoid(x[0]));
    check(vec![a.clone(), random(&[3], &mut r)], |g, x| {
        g.add_row_bias(x[0], x[1]).unwrap()
    });
}

#[test]
fn reductions() {
    let mut r = rng();
    check(vec![random(&[5], &mut r)], |g, x| g.softmax(x[0]).unwrap());
    check(vec![random(&[2, 3], &mut r)], |g, x| g.sum(x[0]));
    check(vec![random(&[4], &mut r)], |g, x| g.l2_norm_sq(x[0]));
    check(vec![random(&[4, 3], &mut r)], |g, x| {
        g.max_rows(x[0]).unwrap()
    });
    check(vec![random(&[4], &mut r)], |g, x| g.normalize(x[0], 1e-12));
}

#[test]
fn cross_entropy_through_softmax() {
    let mut r = rng();
    check(vec![random(&[3], &mut r)], |g, x| {
        let p = g.softmax(x[0]).unwrap();
        g.cross_entropy(p, 2).unwrap()
    });
}

#[test]
fn structural() {
    let mut r = rng();
    let (a, b) = (random(&[3], &mut r), random(&[2], &mut r));
    check(vec![a.clone(), b.clone()], |g, x| {
        g.concat(&[x[0], x[1]]).unwrap()
    });
    check(vec![random(&[6], &mut r)], |g, x| {
        g.slice(x[0], 2, 3).unwrap()
    });
    check(vec![random(&[3, 4], &mut r)], |g, x| {
        g.row(x[0], 1).unwrap()
    });
    check(vec![a.clone(), random(&[3], &mut r)], |g, x| {
        g.stack_rows(&[x[0], x[1]]).unwrap()
    });
    check(
        vec![random(&[3, 2], &mut r), random(&[3, 4], &mut r)],
        |g, x| g.hcat(x[0], x[1]).unwrap(),
    );
    check(vec![random(&[4, 2], &mut r)], |g, x| {
        g.reverse_rows(x[0]).unwrap()
    });
    check(vec![random(&[5, 3], &mut r)], |g, x| {
        g.unfold(x[0], 2, 0).unwrap()
    });
    // Fewer rows than the window: zero padded.
    check(vec![random(&[2, 3], &mut r)], |g, x| {
        g.unfold(x[0], 4, 0).unwrap()
    });
    check(vec![random(&[2, 3], &mut r)], |g, x| {
        g.unfold(x[0], 2, 5).unwrap()
    });
}

#[test]
fn sru_scan() {
    let mut r = rng();
    let xt = random(&[4, 3], &mut r);
    let f = random(&[4, 3], &mut r).sigmoid();
    let rr = random(&[4, 3], &mut r).sigmoid();
    check(vec![xt, f, rr], |g, x| {
        g.sru_scan(x[0], x[1], x[2]).unwrap()
    });
}

#[test]
fn lstm_scan() {
    let mut r = rng();
    let d = 2;
    check(
        vec![random(&[4, 4 * d], &mut r), random(&[4 * d, d], &mut r)],
        |g, x| g.lstm_scan(x[0], x[1]).unwrap(),
    );
}

#[test]
fn backward_examples() {
    let x = Tensor::scalar(3.0f64);
    let mut g = Graph::new();
    let id = g.param(&x);
    g.backward(id).unwrap();
    assert_eq!(g.grad(id).unwrap().item(), 1.0);

    let x = Tensor::vector(vec![3.0f64, 4.0]);
    let y = Tensor::vector(vec![1.0f64, -1.0]);
    let mut g = Graph::new();
    let xi = g.param(&x);
    let yi = g.param(&y);
    let loss = g.l2_norm_sq(xi);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(xi).unwrap().data(), &[6.0, 8.0]);
    assert_eq!(g.grad(yi).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::vector(vec![1.0f64, 2.0]);
    let mut g = Graph::new();
    let id = g.param(&x);
    let t = g.tanh(id);
    assert!(g.backward(t).is_err());
}

#[test]
fn backward_is_deterministic_and_resets() {
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    let b = random(&[4], &mut r);
    let mut g = Graph::new();
    let ai = g.param(&a);
    let bi = g.param(&b);
    let h = g.matmul(ai, bi).unwrap();
    let t = g.tanh(h);
    let p = g.softmax(t).unwrap();
    let loss = g.cross_entropy(p, 1).unwrap();
    g.backward(loss).unwrap();
    let first = (g.grad(ai).unwrap().clone(), g.grad(bi).unwrap().clone());
    g.backward(loss).unwrap();
    let second = (g.grad(ai).unwrap().clone(), g.grad(bi).unwrap().clone());
    assert_eq!(first, second);
}

#[test]
fn normalize_guard_passes_tiny_vectors_through() {
    let x = Tensor::vector(vec![1e-14f64, 0.0]);
    let mut g = Graph::new();
    let id = g.param(&x);
    let n = g.normalize(id, 1e-12);
    assert_eq!(g.value(n), &x);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        rot in 0usize..12,
    ) {
        let s = Tensor::vector(xs.clone()).softmax().unwrap();
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));

        let k = rot % xs.len();
        let mut rotated = xs.clone();
        rotated.rotate_left(k);
        let sr = Tensor::vector(rotated).softmax().unwrap();
        let mut expected = s.data().to_vec();
        expected.rotate_left(k);
        for (a, b) in sr.data().iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}
