use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::relative_error;
use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

fn eval_weighted(inputs: &[Tensor<f64>], weight: &Tensor<f64>, f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(weight.clone());
    let prod = tape.mul(out, w).unwrap();
    let s = tape.sum_all(prod).unwrap();
    tape.value(s).data()[0]
}

/// Max relative error of a single kernel's gradient against central differences,
/// using loss = Σ out ⊙ R for a fixed random R.
fn kernel_grad_error(seed: u64, inputs: Vec<Tensor<f64>>, f: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let weight = randn(&mut rng, tape.value(out).shape());
    let w = tape.constant(weight.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();
    drop(tape);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = inputs;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let up = eval_weighted(&params, &weight, f);
            params[p].data_mut()[i] = orig - h;
            let down = eval_weighted(&params, &weight, f);
            params[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
        }
    }
    worst
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(randn(&mut rng, &[4, 7]).cast());
    let y = tape.softmax(x).unwrap();
    for r in 0..4 {
        let s: f32 = tape.value(y).row_slice(r).iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn masked_softmax_zeroes_masked_keys() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[5.0, 1.0, 1.0]));
    let y = tape.masked_softmax(x, Some(&[false, true, true])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.5, 0.5]);
    assert!(tape.masked_softmax(x, Some(&[false, false, false])).is_err());
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let y = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn matmul_shape_error_names_kernel_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn layer_norm_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[2.0, 4.0]));
    let g = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let b = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-10 && (out[1] - 1.0).abs() < 1e-10);
}

#[test]
fn masked_mean_excludes_masked_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 9.0, 9.0]));
    let y = tape.masked_mean(x, &[true, false], Axis::Rows).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    assert!(tape.masked_mean(x, &[false, false], Axis::Rows).is_err());
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1], &[f64::MAX]));
    let err = tape.add(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { kernel: "add" }));
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.cross_entropy(a, 0).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let b = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
    let l = tape.cross_entropy(b, 0).unwrap();
    let v = tape.value(l).data()[0];
    assert!(v >= 0.0 && v < 1e-300);

    // −log(e^0.5 / (e^0.2 + e^−0.1 + e^0.5)), evaluated at 30 digits.
    let c = tape.constant(t(&[1, 3], &[0.2, -0.1, 0.5]));
    let l = tape.cross_entropy(c, 2).unwrap();
    assert!((tape.value(l).data()[0] - 0.828_390_169_906_124_4).abs() < 1e-15);

    assert!(tape.cross_entropy(c, 3).is_err());
}

#[test]
fn backward_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 1], &[3.0]), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_softmax_pick() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]), true);
    let y = tape.softmax(x).unwrap();
    let p0 = tape.slice(y, Axis::Cols, 0, 1).unwrap();
    tape.backward(p0).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.25, -0.25]);
}

#[test]
fn backward_twice_requires_reset() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 1], &[2.0]), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
    tape.reset_grads();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
    let unused = tape.leaf(t(&[1, 2], &[5.0, 6.0]), true);
    let s = tape.sum_all(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn every_kernel_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |s: &[usize]| randn(&mut rng, s);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![r(&[3, 4]), r(&[1, 4])], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("scale", vec![r(&[2, 3])], Box::new(|t, v| t.scale(v[0], 0.37))),
        ("gelu", vec![r(&[3, 3])], Box::new(|t, v| t.gelu(v[0]))),
        ("relu", vec![r(&[3, 3])], Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![r(&[3, 3])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("tanh", vec![r(&[3, 3])], Box::new(|t, v| t.tanh(v[0]))),
        ("softmax", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0]))),
        (
            "masked_softmax",
            vec![r(&[3, 4])],
            Box::new(|t, v| t.masked_softmax(v[0], Some(&[true, false, true, true]))),
        ),
        (
            "layer_norm",
            vec![r(&[3, 5]), r(&[1, 5]), r(&[1, 5])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        ("embedding", vec![r(&[5, 3])], Box::new(|t, v| t.embedding(v[0], &[4, 1, 4, 0]))),
        (
            "conv1d",
            vec![r(&[4, 3]), r(&[3, 3, 2]), r(&[1, 2])],
            Box::new(|t, v| t.conv1d(v[0], v[1], v[2])),
        ),
        (
            "masked_mean_rows",
            vec![r(&[3, 4])],
            Box::new(|t, v| t.masked_mean(v[0], &[true, false, true], Axis::Rows)),
        ),
        (
            "masked_mean_cols",
            vec![r(&[3, 4])],
            Box::new(|t, v| t.masked_mean(v[0], &[true, true, false, true], Axis::Cols)),
        ),
        (
            "masked_max_rows",
            vec![r(&[3, 4])],
            Box::new(|t, v| t.masked_max(v[0], &[true, true, false], Axis::Rows)),
        ),
        (
            "masked_max_cols",
            vec![r(&[3, 4])],
            Box::new(|t, v| t.masked_max(v[0], &[false, true, true, true], Axis::Cols)),
        ),
        (
            "concat_rows",
            vec![r(&[2, 3]), r(&[1, 3])],
            Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], Axis::Rows)),
        ),
        (
            "concat_cols",
            vec![r(&[2, 3]), r(&[2, 1])],
            Box::new(|t, v| t.concat(&[v[1], v[0]], Axis::Cols)),
        ),
        ("slice_rows", vec![r(&[4, 3])], Box::new(|t, v| t.slice(v[0], Axis::Rows, 1, 3))),
        ("slice_cols", vec![r(&[3, 5])], Box::new(|t, v| t.slice(v[0], Axis::Cols, 2, 5))),
        ("transpose", vec![r(&[2, 5])], Box::new(|t, v| t.transpose(v[0]))),
        ("sum_all", vec![r(&[2, 3])], Box::new(|t, v| t.sum_all(v[0]))),
        ("cross_entropy", vec![r(&[1, 4])], Box::new(|t, v| t.cross_entropy(v[0], 2))),
    ];
    for (i, (name, inputs, f)) in cases.into_iter().enumerate() {
        let err = kernel_grad_error(100 + i as u64, inputs, f.as_ref());
        assert!(err <= 1e-7, "{name}: relative error {err:e}");
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [4, 6, 5, 3];
    let mut names = Vec::new();
    let mut params = Vec::new();
    for l in 0..3 {
        names.push(format!("w{l}"));
        params.push(randn(&mut rng, &[dims[l], dims[l + 1]]));
        names.push(format!("b{l}"));
        params.push(randn(&mut rng, &[1, dims[l + 1]]));
    }
    let input = randn(&mut rng, &[2, 4]);

    let forward = |tape: &mut Tape<'_, f64>, vars: &[Var]| -> Result<Var> {
        let mut h = tape.constant(input.clone());
        for l in 0..3 {
            let z = tape.matmul(h, vars[2 * l])?;
            let z = tape.add_bias(z, vars[2 * l + 1])?;
            h = if l < 2 { tape.tanh(z)? } else { z };
        }
        let row0 = tape.slice(h, Axis::Rows, 0, 1)?;
        let row1 = tape.slice(h, Axis::Rows, 1, 2)?;
        let l0 = tape.cross_entropy(row0, 1)?;
        let l1 = tape.cross_entropy(row1, 2)?;
        tape.add(l0, l1)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = forward(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();
    drop(tape);

    let report = grad_check(&names, &mut params, &analytic, 1e-5, 1e-6, |ps| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = forward(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    })
    .unwrap();
    assert_eq!(report.checked, 4 * 6 + 6 + 6 * 5 + 5 + 5 * 3 + 3);
    assert!(report.passed(), "{:?}", report.worst.first());
}

#[test]
fn grad_check_scalar_cases() {
    let names = vec!["x".to_string()];
    let mut params = vec![t(&[1, 1], &[3.0])];
    let analytic = vec![t(&[1, 1], &[6.0])];
    let report = grad_check(&names, &mut params, &analytic, 1e-5, 1e-9, |p| {
        let x = p[0].data()[0];
        Ok(x * x)
    })
    .unwrap();
    assert!((report.worst[0].numeric - 6.0).abs() < 1e-9);
    assert_eq!(params[0].data(), &[3.0]);

    let zero = vec![t(&[1, 1], &[0.0])];
    let report = grad_check(&names, &mut params, &zero, 1e-5, 1e-9, |_| Ok(4.2)).unwrap();
    assert_eq!(report.worst[0].numeric, 0.0);
    assert_eq!(report.max_rel_err, 0.0);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(randn(&mut rng, &[5, 6]).cast());
        let b = tape.constant(randn(&mut rng, &[6, 4]).cast());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c).unwrap();
        tape.value(s).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        row in prop::collection::vec(-20.0f64..20.0, 1..8),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, n], &row));
        let b = tape.constant(t(&[1, n], &shifted));
        let ya = tape.softmax(a).unwrap();
        let yb = tape.softmax(b).unwrap();
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) <= 1e-12);
    }
}
