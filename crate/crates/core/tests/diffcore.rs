use quantnet::diffcore::gradcheck::{catalog_cases, check_case, check_gradients};
use quantnet::diffcore::{Graph, Tensor};
use quantnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
    let grads = g.backward(y);
    assert!((grads[&x].item() - 0.25).abs() < 1e-15);
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x);
    assert_eq!(g.backward(y)[&x].item(), 6.0);
}

#[test]
fn uniform_softmax() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul() {
    let a = Tensor::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let an = g.constant(a.clone());
    let y = g.matmul(i, an);
    assert_eq!(g.value(y), &a);
}

#[test]
fn max_median_concat_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 5.0, 3.0]));
    let mx = g.max_axis(x, 0);
    let md = g.median_axis(x, 0);
    assert_eq!(g.value(mx).item(), 5.0);
    assert_eq!(g.value(md).item(), 3.0);
    let a = g.constant(Tensor::vector(vec![7.0]));
    let b = g.constant(Tensor::vector(vec![8.0]));
    let c = g.concat(&[a, b], 0);
    assert_eq!(g.value(c).data(), &[7.0, 8.0]);
}

#[test]
fn mean_matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = Tensor::new([3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
    let x = Tensor::new([4, 5], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect());
    let mut g = Graph::new();
    let wn = g.param(w);
    let xn = g.constant(x);
    let p = g.matmul(wn, xn);
    let root = g.mean(p);
    let report = check_gradients(&mut g, root, 1e-5);
    assert!(report.max_rel_error < 1e-4, "{:?}", report);
}

#[test]
fn every_catalog_op_passes_gradient_check_over_20_seeds() {
    for (name, case) in catalog_cases() {
        for seed in 0..20 {
            let r = check_case(case, seed, 1e-5);
            assert!(r.max_rel_error < 1e-4, "{} seed {}: rel error {}", name, seed, r.max_rel_error);
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let t = Tensor::new([4, 6], (0..24).map(|_| rng.random_range(-30.0..30.0)).collect());
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(6) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_eval_is_identity_and_train_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.0, -1.0]));
    let y = g.dropout(x, 0.4, &mut rng);
    assert_eq!(g.value(y), g.value(x));

    let mut g = Graph::training();
    let n = 100_000;
    let x = g.constant(Tensor::full([n], 3.0));
    let y = g.dropout(x, 0.4, &mut rng);
    let mean = g.value(y).sum() / n as f64;
    assert!((mean - 3.0).abs() / 3.0 < 0.01, "mean {}", mean);
}

#[test]
fn max_and_median_route_gradient_to_one_element() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, 9.0], [4.0, 2.0], [4.0, 3.0], [0.0, 7.0]]));
    let mx = g.max_axis(x, 0);
    let s = g.sum(mx);
    let gx = g.backward(s)[&x].clone();
    // ties go to the lowest index: column 0 max 4.0 at rows 1 and 2
    assert_eq!(gx.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, 9.0], [4.0, 2.0], [4.0, 3.0], [0.0, 7.0]]));
    let md = g.median_axis(x, 0);
    let w = g.constant(Tensor::vector(vec![2.0, 5.0]));
    let wm = g.mul(md, w);
    let s = g.sum(wm);
    assert_eq!(g.value(md).data(), &[1.0, 3.0]);
    let gx = g.backward(s)[&x].clone();
    assert_eq!(gx.sum(), 7.0);
    assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
}

#[test]
fn even_median_takes_lower_middle() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![4.0, 1.0, 3.0, 2.0]));
    let m = g.median_axis(x, 0);
    assert_eq!(g.value(m).item(), 2.0);
}

#[test]
fn non_finite_value_is_reported_with_node() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 0.0]));
    let y = g.log(x);
    let _ = g.sum(y);
    match g.check_finite() {
        Err(Error::NumericOverflow { node, op }) => {
            assert_eq!(node, y.index());
            assert_eq!(op, "log");
        }
        other => panic!("expected numeric overflow, got {:?}", other),
    }
    g.set_value(x, Tensor::vector(vec![1.0, 2.0]));
    assert!(g.forward().is_ok());
    g.set_value(x, Tensor::vector(vec![-1.0, 2.0]));
    assert!(matches!(g.forward(), Err(Error::NumericOverflow { .. })));
}

#[test]
#[should_panic(expected = "[2, 3] and [4, 2]")]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    g.matmul(a, b);
}

#[test]
#[should_panic(expected = "root must be scalar")]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros([2]));
    let b = g.exp(a);
    g.backward(b);
}

#[test]
fn tri_solve_inverts_lower_triangular() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[[2.0, 0.0], [1.0, 4.0]]));
    let b = g.constant(Tensor::from_rows(&[[2.0, 9.0]]));
    let x = g.tri_solve(l, b);
    assert_eq!(g.value(x).data(), &[1.0, 2.0]);
}

#[test]
fn quad_form_matches_direct_sum() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::from_rows(&[[1.0, 2.0]]));
    let m = g.constant(Tensor::from_rows(&[[2.0, 1.0], [0.0, 3.0]]));
    let q = g.quad_form(u, m);
    // 1*2*1 + 1*1*2 + 2*0*1 + 2*3*2
    assert_eq!(g.value(q).data(), &[16.0]);
}
