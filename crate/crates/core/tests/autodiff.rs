mod common;

use common::{central_difference, max_relative_error, tensor};
use emlab::tensor::{Tape, Tensor, Var};
use emlab::Error;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds the op under test on `inputs` and reduces its output to a scalar
/// with fixed pseudo-random weights, so every output element matters.
fn reduce(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).numel();
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, common::noise(n, 999, 1.0)).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Compare autodiff against central differences for every input of `build`.
fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = reduce(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).unwrap().data().to_vec();
        let numeric = central_difference(input.data(), STEP, |probe| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == which {
                        tape.constant(Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = build(&mut tape, &vars);
            let loss = reduce(&mut tape, out);
            tape.value(loss).item().unwrap()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
    let b = tape.constant(Tensor::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap());
    let c = tape.matmul(eye, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

    let row = tape.constant(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
    let col = tape.constant(Tensor::new(vec![2, 1], vec![3., 4.]).unwrap());
    let c = tape.matmul(row, col).unwrap();
    assert_eq!(tape.value(c).data(), &[11.]);
    assert_eq!(tape.shape(c), &[1, 1]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    assert!(matches!(tape.bmm(a, b, false), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences_tightly() {
    let inputs = [tensor(&[4, 5], 1, 1.0), tensor(&[5, 3], 2, 1.0)];
    let err = check_op(&inputs, |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![0.0, 0.0]).unwrap());
    let p = tape.softmax(a).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let a = tape.constant(Tensor::from_vec(vec![1000.0; 3]).unwrap());
    let p = tape.softmax(a).unwrap();
    for &v in tape.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // e^{ln k} / Σ e^{ln j} = k / 6
    let a = tape.constant(Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let p = tape.softmax(a).unwrap();
    for (v, want) in tape.value(p).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - want).abs() < 1e-15, "{v} vs {want}");
    }

    let a = tape.constant(Tensor::from_vec(vec![0.0, f64::NAN]).unwrap());
    assert!(matches!(tape.softmax(a), Err(Error::Numeric(_))));
    let a = tape.constant(Tensor::from_vec(vec![f64::INFINITY, 0.0]).unwrap());
    assert!(matches!(tape.softmax(a), Err(Error::Numeric(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.3, -2.0, 7.0]).unwrap());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.mean(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn unreachable_parameters_get_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let unused = tape.param(Tensor::from_vec(vec![5.0]).unwrap());
    let loss = tape.sum(x);
    let late = tape.param(Tensor::from_vec(vec![5.0, 6.0]).unwrap());
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    assert_eq!(g.get(late).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn shared_subexpressions_accumulate() {
    // f(x) = sum(x·x + exp(x)) with x used three times, against the same
    // graph built from three distinct copies of x.
    let x0 = tensor(&[5], 3, 1.0);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let e = tape.exp(x);
    let s = tape.add(sq, e).unwrap();
    let loss = tape.sum(s);
    let shared = tape.backward(loss).unwrap().get(x).unwrap().clone();

    let mut tape = Tape::new();
    let a = tape.param(x0.clone());
    let b = tape.param(x0.clone());
    let c = tape.param(x0);
    let sq = tape.mul(a, b).unwrap();
    let e = tape.exp(c);
    let s = tape.add(sq, e).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    for i in 0..5 {
        let split = g.get(a).unwrap().data()[i] + g.get(b).unwrap().data()[i] + g.get(c).unwrap().data()[i];
        assert!((shared.data()[i] - split).abs() < 1e-14);
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let a = tensor(&[3, 4], 10, 1.0);
    let b = tensor(&[3, 4], 11, 1.0);
    let bias = tensor(&[4], 12, 1.0);
    let positive = Tensor::new(vec![3, 4], common::noise(12, 13, 1.0).iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("add_bias", vec![a.clone(), bias.clone()], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("log", vec![positive], Box::new(|t, v| t.log(v[0]).unwrap())),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]).unwrap())),
    ];
    for (name, inputs, build) in cases {
        let err = check_op(&inputs, build);
        assert!(err < TOL, "{name}: max relative error {err}");
    }
}

#[test]
fn normalising_ops_match_finite_differences() {
    let z = tensor(&[3, 5], 20, 2.0);
    let gain = tensor(&[5], 21, 1.0);
    let bias = tensor(&[5], 22, 1.0);
    let scores = tensor(&[2, 4, 4], 23, 2.0);
    let err = check_op(&[z.clone()], |t, v| t.softmax(v[0]).unwrap());
    assert!(err < TOL, "softmax {err}");
    let err = check_op(&[z.clone()], |t, v| t.log_softmax(v[0]).unwrap());
    assert!(err < TOL, "log_softmax {err}");
    let err = check_op(&[z.clone()], |t, v| t.row_entropy(v[0]).unwrap());
    assert!(err < TOL, "row_entropy {err}");
    let err = check_op(&[scores], |t, v| t.causal_softmax(v[0]).unwrap());
    assert!(err < TOL, "causal_softmax {err}");
    let err = check_op(&[z, gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(err < TOL, "layer_norm {err}");
}

#[test]
fn indexing_ops_match_finite_differences() {
    let table = tensor(&[6, 3], 30, 1.0);
    let err = check_op(&[table.clone()], |t, v| t.embedding(v[0], &[2, 5, 2, 0], &[2, 2]).unwrap());
    assert!(err < TOL, "embedding {err}");
    let err = check_op(&[table.clone()], |t, v| t.gather_rows(v[0], &[4, 4, 1]).unwrap());
    assert!(err < TOL, "gather_rows {err}");
    let err = check_op(&[table], |t, v| t.pick(v[0], &[0, 2, 1, 1, 0, 2]).unwrap());
    assert!(err < TOL, "pick {err}");
}

#[test]
fn batched_ops_match_finite_differences() {
    let a = tensor(&[2, 3, 4], 40, 1.0);
    let b = tensor(&[2, 4, 5], 41, 1.0);
    let bt = tensor(&[2, 5, 4], 42, 1.0);
    let err = check_op(&[a.clone(), b], |t, v| t.bmm(v[0], v[1], false).unwrap());
    assert!(err < TOL, "bmm {err}");
    let err = check_op(&[a, bt], |t, v| t.bmm(v[0], v[1], true).unwrap());
    assert!(err < TOL, "bmm transposed {err}");
    let x = tensor(&[2, 3, 2, 4], 43, 1.0);
    let err = check_op(&[x], |t, v| t.swap_axes12(v[0]).unwrap());
    assert!(err < TOL, "swap_axes12 {err}");
    let lhs = tensor(&[2, 3, 4], 44, 1.0);
    let w = tensor(&[4, 2], 45, 1.0);
    let err = check_op(&[lhs, w], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < TOL, "batched matmul {err}");
}

#[test]
fn causal_softmax_masks_future_exactly() {
    let mut tape = Tape::new();
    let s = tape.constant(tensor(&[1, 3, 3], 50, 3.0));
    let p = tape.causal_softmax(s).unwrap();
    let v = tape.value(p).data().to_vec();
    assert_eq!(v[0], 1.0);
    assert_eq!(&v[1..3], &[0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let z = tape.constant(tensor(&[rows, cols], seed, scale));
        let p = tape.softmax(z).unwrap();
        for row in tape.value(p).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
