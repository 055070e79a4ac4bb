use diffcore::{Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn exp_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[0.0, 0.0])).unwrap();
    let e = g.exp(x).unwrap();
    let s = g.sum(e).unwrap();
    g.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn l1_gradient_is_sign_of_difference() {
    for (x0, y0, expected) in [(3.0, 1.0, 1.0), (1.0, 3.0, -1.0)] {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[x0])).unwrap();
        let y = g.constant(t(&[1], &[y0])).unwrap();
        let d = g.sub(x, y).unwrap();
        let l = g.l1_norm(d).unwrap();
        g.backward(l, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[expected]);
    }
}

#[test]
fn quadratic_param_gradient_and_accumulation() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
    let build = |store: &ParamStore| {
        let mut g = Graph::new();
        let wv = g.param(store, w).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq).unwrap();
        (g, loss)
    };
    let (mut g, loss) = build(&store);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[2.0, 4.0]);
    // No zeroing: a second pass adds on top.
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[4.0, 8.0]);
    // zero_grad then backward equals a fresh graph's backward.
    store.zero_grad();
    let (mut g2, loss2) = build(&store);
    g2.backward(loss2, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn independent_loss_gives_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let c = g.constant(t(&[2], &[5.0, 6.0])).unwrap();
    let sq = g.square(c).unwrap();
    let loss = g.sum(sq).unwrap();
    // `wv` participates in the graph but not in the loss.
    let _unused = g.sin(wv).unwrap();
    g.backward(loss, &mut store).unwrap();
    let grad = store.grad(w).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 3]);
    assert_eq!(grad, vec![0.0; 3]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0])).unwrap();
    let y = g.square(x).unwrap();
    assert!(matches!(g.backward(y, &mut ParamStore::new()), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
    let b = g.constant(t(&[2, 2], &[0.0; 4])).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    let s = g.scalar(1.0).unwrap();
    assert!(matches!(g.concat(&[a, s]), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1], &[-1.0])).unwrap();
    assert_eq!(g.log(x).unwrap_err(), Error::NonFinite { op: "log" });
    let z = g.constant(t(&[1], &[0.0])).unwrap();
    let one = g.scalar(1.0).unwrap();
    assert_eq!(g.div(one, z).unwrap_err(), Error::NonFinite { op: "div" });
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, -1.0])).unwrap();
    let d = g.detach(x).unwrap();
    let p = g.mul(x, d).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s, &mut ParamStore::new()).unwrap();
    // d(x·stop(x))/dx = stop(x)
    assert_eq!(g.grad(x).unwrap(), &[1.0, -1.0]);
}

#[test]
fn clear_frees_nodes_but_keeps_params() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[1], &[2.0])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let _ = g.square(wv).unwrap();
    assert_eq!(g.len(), 2);
    g.clear();
    assert!(g.is_empty());
    assert_eq!(store.value(w).data(), &[2.0]);
}

#[test]
fn cumprod_exclusive_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[0.5, 0.5, 0.5, 2.0, 0.0, 3.0])).unwrap();
    let c = g.cumprod_exclusive(x).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 0.5, 0.25, 1.0, 2.0, 0.0]);
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
    assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
}

proptest! {
    #[test]
    fn rotation_coefficients_are_continuous_at_the_series_cutoff(x in 0.5e-4f64..2e-4) {
        let mut g = Graph::new();
        let v = g.constant(t(&[1], &[x])).unwrap();
        let a = g.rot_coeff_a(v).unwrap();
        let b = g.rot_coeff_b(v).unwrap();
        let th = x.sqrt();
        prop_assert!((g.value(a).data()[0] - th.sin() / th).abs() < 1e-14);
        prop_assert!((g.value(b).data()[0] - (1.0 - th.cos()) / x).abs() < 1e-10);
    }

    #[test]
    fn broadcast_add_matches_manual_rows(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let a: Vec<f64> = (0..rows * cols).map(|i| (i as f64 + seed as f64).sin()).collect();
        let b: Vec<f64> = (0..cols).map(|i| (i as f64 * 0.7 + seed as f64).cos()).collect();
        let mut g = Graph::new();
        let va = g.constant(t(&[rows, cols], &a)).unwrap();
        let vb = g.constant(t(&[cols], &b)).unwrap();
        let s = g.add(va, vb).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(g.value(s).data()[r * cols + c], a[r * cols + c] + b[c]);
            }
        }
    }
}
