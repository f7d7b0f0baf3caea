use mdw_numeric::{Error, Graph, OpKind, Tensor};

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec()).unwrap()
}

#[test]
fn relu_clamps_negatives() {
    let g = Graph::new();
    let x = g.constant(row(&[-1.0, 0.0, 2.0]));
    let y = g.apply(&OpKind::Relu, &[x]).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let g = Graph::new();
    let x = g.constant(row(&[3.0; 4]));
    let y = g.apply(&OpKind::RowSoftmax, &[x]).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn matmul_ones() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones([2, 3]).unwrap());
    let b = g.constant(Tensor::ones([3, 2]).unwrap());
    let c = g.apply(&OpKind::MatMul, &[a, b]).unwrap();
    assert_eq!(g.shape(c), [2, 2]);
    assert!(g.value(c).data().iter().all(|&x| x == 3.0));
}

#[test]
fn forward_values_match_direct_evaluation() {
    let g = Graph::new();
    let a = Tensor::from_rows(&[vec![0.5, -1.5, 2.0], vec![1.25, 0.75, -0.25]]).unwrap();
    let x = g.constant(a.clone());
    let n = g.l2_normalize_rows(x).unwrap();
    for i in 0..2 {
        let norm = a.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((g.value(n).get(i, j) - a.get(i, j) / norm).abs() < 1e-12);
        }
    }
    let s = g.apply(&OpKind::Mean, &[x]).unwrap();
    assert!((g.item(s).unwrap() - a.sum() / 6.0).abs() < 1e-12);
    let sl = g
        .apply(&OpKind::Slice { rows: 1..2, cols: 0..2 }, &[x])
        .unwrap();
    assert_eq!(g.value(sl).data(), &[1.25, 0.75]);
    let cat = g.apply(&OpKind::Concat { axis: 1 }, &[x, x]).unwrap();
    assert_eq!(g.shape(cat), [2, 6]);
    assert_eq!(g.value(cat).get(1, 4), 0.75);
    let cat0 = g.apply(&OpKind::Concat { axis: 0 }, &[x, x]).unwrap();
    assert_eq!(g.shape(cat0), [4, 3]);
    let e = g.apply(&OpKind::Exp, &[x]).unwrap();
    assert!((g.value(e).get(0, 2) - 2f64.exp()).abs() < 1e-12);
}

#[test]
fn shape_mismatch_is_reported() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones([2, 3]).unwrap());
    let b = g.constant(Tensor::ones([2, 3]).unwrap());
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    let c = g.constant(Tensor::ones([3, 2]).unwrap());
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let g = Graph::new();
    let x = g.constant(row(&[1.0, 0.0]));
    assert_eq!(g.log(x).unwrap_err(), Error::NonFinite { op: "log" });
    let big = g.constant(row(&[1000.0]));
    assert_eq!(g.exp(big).unwrap_err(), Error::NonFinite { op: "exp" });
}

#[test]
fn quadratic_gradient() {
    let g = Graph::new();
    let x = g.param(row(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq).unwrap();
    let grads = g.grads(y, &[x]).unwrap();
    assert_eq!(grads[0].data(), &[2.0, 4.0]);
}

#[test]
fn softmax_cross_entropy_is_stationary_at_uniform_point() {
    let g = Graph::new();
    let x = g.param(row(&[0.7; 5]));
    let p = g.row_softmax(x).unwrap();
    let lp = g.log(p).unwrap();
    let s = g.sum(lp).unwrap();
    let loss = g.scale(s, -1.0 / 5.0).unwrap();
    let grads = g.grads(loss, &[x]).unwrap();
    assert!(grads[0].data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn second_derivative_of_cube() {
    // d²/dx² Σx³ = 6x; at x = 2 that is 12.
    let g = Graph::new();
    let x = g.param(row(&[2.0]));
    let x2 = g.mul(x, x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let y = g.sum(x3).unwrap();
    let dx = g.backward(y, &[x], true).unwrap()[0];
    assert!((g.item(dx).unwrap() - 12.0).abs() < 1e-12);
    let dx_sum = g.sum(dx).unwrap();
    let d2 = g.grads(dx_sum, &[x]).unwrap();
    assert!((d2[0].item().unwrap() - 12.0).abs() < 1e-12);

    // Frozen against a finite-difference oracle of the first derivative.
    let first = |v: f64| 3.0 * v * v;
    let h = 1e-5;
    let fd = (first(2.0 + h) - first(2.0 - h)) / (2.0 * h);
    assert!((d2[0].item().unwrap() - fd).abs() < 1e-6);
}

#[test]
fn backward_requires_scalar_root_and_zeroes_unreachable() {
    let g = Graph::new();
    let x = g.param(row(&[1.0, 2.0]));
    let z = g.param(row(&[5.0]));
    assert!(matches!(g.backward(x, &[x], false), Err(Error::Contract(_))));
    let y = g.sum(x).unwrap();
    let grads = g.grads(y, &[x, z]).unwrap();
    assert_eq!(grads[1].data(), &[0.0]);
}

#[test]
fn gradients_without_create_graph_are_constants() {
    let g = Graph::new();
    let x = g.param(row(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq).unwrap();
    let first = g.backward(y, &[x], false).unwrap()[0];
    assert!(!g.requires_grad(first));
    let second = g.backward(y, &[x], true).unwrap()[0];
    assert!(g.requires_grad(second));
}

#[test]
fn sgd_step_arithmetic() {
    let g = Graph::new();
    let theta = g.param(row(&[1.0]));
    let grad = g.constant(row(&[2.0]));
    let lr = g.param(Tensor::scalar(0.5));
    let next = g.sgd_step(&[theta], &[grad], lr).unwrap();
    assert_eq!(g.value(next[0]).data(), &[0.0]);

    let zero = g.param(Tensor::scalar(0.0));
    let same = g.sgd_step(&[theta], &[grad], zero).unwrap();
    assert_eq!(g.value(same[0]).data(), &[1.0]);
    let s = g.sum(same[0]).unwrap();
    let d = g.grads(s, &[theta]).unwrap();
    assert_eq!(d[0].data(), &[1.0]);
}

#[test]
fn sgd_step_shape_mismatch() {
    let g = Graph::new();
    let theta = g.param(row(&[1.0, 2.0]));
    let grad = g.constant(row(&[2.0]));
    let lr = g.param(Tensor::scalar(0.5));
    assert!(g.sgd_step(&[theta], &[grad], lr).is_err());
    assert!(g.sgd_step(&[theta], &[], lr).is_err());
}

#[test]
fn lr_derivative_of_one_step_quadratic_matches_finite_differences() {
    // loss(θ) = Σ(θ − c)²; one step θ' = θ − lr·∇; final = Σ(θ' − c)².
    let theta0 = [0.3, -1.2, 2.0];
    let c = [1.0, 0.5, -0.5];
    let final_loss = |lr: f64| {
        theta0
            .iter()
            .zip(&c)
            .map(|(t, c)| {
                let next = t - lr * 2.0 * (t - c);
                (next - c) * (next - c)
            })
            .sum::<f64>()
    };

    let g = Graph::new();
    let theta = g.param(row(&theta0));
    let target = g.constant(row(&c));
    let lr = g.param(Tensor::scalar(0.1));
    let diff = g.sub(theta, target).unwrap();
    let sq = g.mul(diff, diff).unwrap();
    let loss = g.sum(sq).unwrap();
    let grad = g.backward(loss, &[theta], true).unwrap();
    let next = g.sgd_step(&[theta], &grad, lr).unwrap();
    let d2 = g.sub(next[0], target).unwrap();
    let sq2 = g.mul(d2, d2).unwrap();
    let outer = g.sum(sq2).unwrap();
    assert!((g.item(outer).unwrap() - final_loss(0.1)).abs() < 1e-12);

    let d = g.grads(outer, &[lr]).unwrap()[0].item().unwrap();
    let h = 1e-5;
    let fd = (final_loss(0.1 + h) - final_loss(0.1 - h)) / (2.0 * h);
    assert!((d - fd).abs() / fd.abs().max(1e-8) < 1e-4, "{d} vs {fd}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let g = Graph::new();
        let a = g.param(Tensor::from_fn([4, 3], |i, j| ((i * 3 + j) as f64 * 0.37).sin()).unwrap());
        let b = g.param(Tensor::from_fn([3, 4], |i, j| ((i + 2 * j) as f64 * 0.11).cos()).unwrap());
        let h = g.matmul(a, b).unwrap();
        let p = g.row_softmax(h).unwrap();
        let l = g.log(p).unwrap();
        let s = g.sum(l).unwrap();
        let grads = g.grads(s, &[a, b]).unwrap();
        (g.value(s), grads)
    };
    let (s1, g1) = run();
    let (s2, g2) = run();
    assert!(s1.bit_eq(&s2));
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.bit_eq(y)));
}
