//! Central-difference verification for every tape primitive, plus the
//! 100-seed composite gradient check on a small MLP.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retgen_numeric::{
    finite_difference_grad, max_relative_error, ParamStore, Tape, Tensor, VarId,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Run one op graph through both autodiff and finite differences.
fn check<F>(params: &ParamStore, build: F, tol: f64)
where
    F: Fn(&ParamStore, &mut Tape) -> VarId,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape);
    let auto = tape.backward(loss).unwrap();
    let auto_map: BTreeMap<String, Tensor> =
        auto.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let numeric = finite_difference_grad(
        |p| {
            let mut t = Tape::new();
            let l = build(p, &mut t);
            t.value(l).scalar_value()
        },
        params,
        EPS,
    )
    .unwrap();

    let err = max_relative_error(&auto_map, &numeric);
    assert!(err < tol, "gradient mismatch: rel err {err}");
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t.clone()).unwrap();
    }
    s
}

fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn matmul_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = store(&[("a", randt(&[3, 4], &mut rng)), ("b", randt(&[4, 2], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c).unwrap();
            // square so the gradient depends on the values, not just ones
            t.mul(s, s).unwrap()
        },
        TOL,
    );
}

#[test]
fn transpose_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = store(&[("a", randt(&[3, 5], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let at = t.transpose(a).unwrap();
            let sq = t.mul(at, at).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn add_mul_scale_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = store(&[("a", randt(&[6], &mut rng)), ("b", randt(&[6], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let s = t.add(a, b).unwrap();
            let m = t.mul(s, a).unwrap();
            let sc = t.scale(m, -1.7).unwrap();
            t.sum(sc).unwrap()
        },
        TOL,
    );
}

#[test]
fn add_row_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = store(&[("a", randt(&[4, 3], &mut rng)), ("b", randt(&[3], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let s = t.add_row(a, b).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn concat_slice_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = store(&[("a", randt(&[2, 4], &mut rng)), ("b", randt(&[3, 4], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let c = t.concat_rows(&[a, b]).unwrap();
            let rows = t.slice_rows(c, 1, 3).unwrap();
            let cols = t.slice_cols(rows, 1, 2).unwrap();
            let sq = t.mul(cols, cols).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn concat_1d_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = store(&[("a", randt(&[3], &mut rng)), ("b", Tensor::scalar(0.4))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let c = t.concat_1d(&[a, b]).unwrap();
            let sm = t.softmax(c).unwrap();
            let sq = t.mul(sm, sm).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn embedding_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = store(&[("table", randt(&[5, 3], &mut rng))]);
    check(
        &params,
        |p, t| {
            let table = t.param("table", p.get("table").unwrap().tensor.clone()).unwrap();
            // repeated id exercises scatter-add accumulation
            let e = t.embedding(table, &[0, 2, 2, 4]).unwrap();
            let sq = t.mul(e, e).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn softmax_log_softmax_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = store(&[("a", randt(&[3, 4], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let sm = t.softmax(a).unwrap();
            let ls = t.log_softmax(a).unwrap();
            let m = t.mul(sm, ls).unwrap();
            t.sum(m).unwrap()
        },
        TOL,
    );
}

#[test]
fn layer_norm_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = store(&[
        ("x", randt(&[4, 6], &mut rng)),
        ("g", randt(&[6], &mut rng)),
        ("b", randt(&[6], &mut rng)),
    ]);
    check(
        &params,
        |p, t| {
            let x = t.param("x", p.get("x").unwrap().tensor.clone()).unwrap();
            let g = t.param("g", p.get("g").unwrap().tensor.clone()).unwrap();
            let b = t.param("b", p.get("b").unwrap().tensor.clone()).unwrap();
            let ln = t.layer_norm(x, g, b, 1e-5).unwrap();
            let sq = t.mul(ln, ln).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn pointwise_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = store(&[("a", randt(&[7], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let g = t.gelu(a).unwrap();
            let th = t.tanh(g).unwrap();
            let e = t.exp(th).unwrap();
            let l = t.log(e).unwrap();
            let sq = t.mul(l, l).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

#[test]
fn mean_rows_logsumexp_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = store(&[("a", randt(&[5, 4], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let m = t.mean_rows(a).unwrap();
            t.logsumexp(m).unwrap()
        },
        TOL,
    );
}

#[test]
fn cross_entropy_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = store(&[("logits", randt(&[4, 6], &mut rng))]);
    check(
        &params,
        |p, t| {
            let l = t.param("logits", p.get("logits").unwrap().tensor.clone()).unwrap();
            t.cross_entropy_sum(l, &[1, 0, 5, 3]).unwrap()
        },
        TOL,
    );
}

#[test]
fn reshape_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = store(&[("a", randt(&[2, 6], &mut rng))]);
    check(
        &params,
        |p, t| {
            let a = t.param("a", p.get("a").unwrap().tensor.clone()).unwrap();
            let r = t.reshape(a, &[3, 4]).unwrap();
            let rt = t.transpose(r).unwrap();
            let sq = t.mul(rt, rt).unwrap();
            t.sum(sq).unwrap()
        },
        TOL,
    );
}

/// Random two-layer MLP: gradients match central differences across 100
/// seeds on tiny shapes.
#[test]
fn mlp_composite_100_seeds() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = rng.random_range(2..5);
        let dh = rng.random_range(2..5);
        let params = store(&[
            ("x", randt(&[2, din], &mut rng)),
            ("w1", randt(&[din, dh], &mut rng)),
            ("b1", randt(&[dh], &mut rng)),
            ("w2", randt(&[dh, 3], &mut rng)),
            ("b2", randt(&[3], &mut rng)),
        ]);
        check(
            &params,
            |p, t| {
                let x = t.param("x", p.get("x").unwrap().tensor.clone()).unwrap();
                let w1 = t.param("w1", p.get("w1").unwrap().tensor.clone()).unwrap();
                let b1 = t.param("b1", p.get("b1").unwrap().tensor.clone()).unwrap();
                let w2 = t.param("w2", p.get("w2").unwrap().tensor.clone()).unwrap();
                let b2 = t.param("b2", p.get("b2").unwrap().tensor.clone()).unwrap();
                let h = t.matmul(x, w1).unwrap();
                let h = t.add_row(h, b1).unwrap();
                let h = t.gelu(h).unwrap();
                let o = t.matmul(h, w2).unwrap();
                let o = t.add_row(o, b2).unwrap();
                t.cross_entropy_sum(o, &[2, 0]).unwrap()
            },
            TOL,
        );
    }
}

#[test]
fn forward_determinism_same_seed_bit_identical() {
    let run = |seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let b = tape.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c).unwrap();
        tape.value(s).data().to_vec()
    };
    assert_eq!(run(42), run(42));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_simplex(values in proptest::collection::vec(-30.0..30.0f64, 1..20)) {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::vector(values));
            let s = tape.softmax(v).unwrap();
            let data = tape.value(s).data();
            prop_assert!(data.iter().all(|&p| p >= 0.0));
            let sum: f64 = data.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_softmax_sum_exps_to_one(values in proptest::collection::vec(-30.0..30.0f64, 1..20)) {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::vector(values));
            let ls = tape.log_softmax(v).unwrap();
            let total: f64 = tape.value(ls).data().iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
