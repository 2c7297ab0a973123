use super::*;
use crate::gradcheck::{central_difference, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks every input's analytic gradient against central differences.
/// `build` maps recorded inputs to a scalar loss.
fn check(
    shapes: &[Vec<usize>],
    inputs: Vec<Vec<f64>>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| tape.constant(s.clone(), v.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| tape.param(&Tensor::new(s.clone(), v.clone()).unwrap()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].len());
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.clone();
                vals[i] = x.to_vec();
                eval(&vals)
            },
            &inputs[i],
            H,
        );
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = tape.constant(shape, random(&mut rng, n))?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let eye = tape
        .constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
        .unwrap();
    let x = tape.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(vec![1, 1], vec![2.0]).unwrap();
    let b = tape.constant(vec![1, 1], vec![3.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[6.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(
        tape.matmul(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_sum_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&mut rng, 12), random(&mut rng, 8)];
    let err = check(&[vec![3, 4], vec![4, 2]], inputs, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn clamp_and_sigmoid_values() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![-0.3, 1.7]).unwrap();
    let y = tape.clamp01(x).unwrap();
    assert_eq!(tape.value(y), &[0.0, 1.0]);
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s), &[0.5]);
}

#[test]
fn clamp01_derivative_inside_and_outside() {
    for (x0, expected) in [(0.5, 1.0), (1.5, 0.0), (-0.5, 0.0)] {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(x0)).unwrap();
        let y = tape.clamp01(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[expected]);
        let fd = central_difference(|v| clamp01(v[0]), &[x0], H)[0];
        assert!((fd - expected).abs() < 1e-9);
    }
}

#[test]
fn clamp01_boundary_subgradient_is_zero() {
    for x0 in [0.0, 1.0] {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(x0)).unwrap();
        let y = tape.clamp01(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0]);
    }
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(tape.log(x), Err(TensorError::LogDomain(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1], vec![1000.0]).unwrap();
    assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_uniform_row() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 4], vec![0.7; 4]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y), &[0.25; 4]);
    let empty = tape.constant(vec![3, 0], vec![]).unwrap();
    assert!(matches!(
        tape.softmax_rows(empty),
        Err(TensorError::EmptyRows { .. })
    ));
}

#[test]
fn cross_entropy_perfect_logits_limit() {
    let mut tape = Tape::new();
    let mut logits = vec![0.0; 10];
    logits[3] = 200.0;
    logits[5 + 1] = 200.0;
    let l = tape.constant(vec![2, 5], logits).unwrap();
    let loss = tape.cross_entropy(l, &[Some(3), Some(1)]).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-80);
}

#[test]
fn cross_entropy_errors() {
    let mut tape = Tape::new();
    let l = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(
        tape.cross_entropy(l, &[None, None]),
        Err(TensorError::NoTargets)
    ));
    assert!(matches!(
        tape.cross_entropy(l, &[Some(3), None]),
        Err(TensorError::TokenOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![random(&mut rng, 10)];
    let err = check(&[vec![2, 5]], inputs, |t, v| t.cross_entropy(v[0], &[Some(4), Some(0)]));
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn embedding_out_of_range() {
    let mut tape = Tape::new();
    let t = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(
        tape.embedding(t, &[0, 3]),
        Err(TensorError::TokenOutOfRange { id: 3, rows: 3 })
    ));
}

#[test]
fn backward_sum_and_square() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unreachable() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let unused = tape.param(&Tensor::new(vec![2], vec![5.0, 6.0]).unwrap()).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(unused, 2), vec![0.0, 0.0]);
    let mut t = Tensor::zeros(vec![2]);
    g.write_into(unused, &mut t).unwrap();
    assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(vec![6, 4], random(&mut rng, 24)).unwrap()).unwrap();
        let b = tape.param(&Tensor::new(vec![6, 4], random(&mut rng, 24)).unwrap()).unwrap();
        let c = tape.param(&Tensor::new(vec![6, 4], random(&mut rng, 24)).unwrap()).unwrap();
        let o = tape.causal_attention(a, b, c, 2, 3).unwrap();
        let l = weighted_sum(&mut tape, o, 1).unwrap();
        let g = tape.backward(l).unwrap();
        [a, b, c].map(|v| g.get(v).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

/// Every differentiable op, checked on 100 random seeds.
#[test]
fn all_ops_match_finite_differences_over_seeds() {
    type Builder = Box<dyn Fn(&mut Tape, &[Var], u64) -> Result<Var>>;
    struct Case {
        name: &'static str,
        shapes: Vec<Vec<usize>>,
        sample: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
        build: Builder,
    }
    fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()
    }
    fn away_from_kinks(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let x: f64 = rng.gen_range(-0.5..1.5);
                if x.abs() > 1e-3 && (x - 1.0).abs() > 1e-3 {
                    break x;
                }
            })
            .collect()
    }
    let cases = vec![
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "add_broadcast",
            shapes: vec![vec![3, 4], vec![4]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "sub_scalar",
            shapes: vec![vec![3, 4], vec![1]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "mul_broadcast",
            shapes: vec![vec![2, 3, 4], vec![3, 4]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "scale_add_const",
            shapes: vec![vec![5]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.scale(v[0], -1.7)?;
                let y = t.add_const(y, 0.3)?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "sigmoid",
            shapes: vec![vec![6]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "exp",
            shapes: vec![vec![6]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.exp(v[0])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "log",
            shapes: vec![vec![6]],
            sample: positive,
            build: Box::new(|t, v, s| {
                let y = t.log(v[0])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "clamp01",
            shapes: vec![vec![8]],
            sample: away_from_kinks,
            build: Box::new(|t, v, s| {
                let y = t.clamp01(v[0])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "select_row_repeat",
            shapes: vec![vec![3, 2]],
            sample: random,
            build: Box::new(|t, v, s| {
                let r = t.select_row(v[0], 1)?;
                let y = t.repeat_each(r, 3)?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "softmax_rows",
            shapes: vec![vec![3, 5]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.softmax_rows(v[0])?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "rms_norm",
            shapes: vec![vec![3, 4], vec![4]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.rms_norm(v[0], v[1], 1e-6, 4)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "rms_norm_partial_denominator",
            shapes: vec![vec![3, 4], vec![4]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.rms_norm(v[0], v[1], 1e-6, 3)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "embedding",
            shapes: vec![vec![4, 3]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.embedding(v[0], &[2, 0, 2, 3])?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, s)
            }),
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![3, 5]],
            sample: random,
            build: Box::new(|t, v, _| t.cross_entropy(v[0], &[Some(1), None, Some(4)])),
        },
        Case {
            name: "causal_attention",
            shapes: vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            sample: random,
            build: Box::new(|t, v, s| {
                let y = t.causal_attention(v[0], v[1], v[2], 2, 3)?;
                weighted_sum(t, y, s)
            }),
        },
    ];
    for case in &cases {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Vec<f64>> = case
                .shapes
                .iter()
                .map(|s| (case.sample)(&mut rng, numel(s)))
                .collect();
            let err = check(&case.shapes, inputs, |t, v| (case.build)(t, v, seed));
            worst = worst.max(err);
        }
        assert!(worst <= 1e-5, "{}: worst rel err {worst}", case.name);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_ce_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..28).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = tape.constant(vec![4, 7], data).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let ce = tape
            .cross_entropy(x, &[Some(0), Some(6), None, Some(3)])
            .unwrap();
        assert!(tape.scalar(ce) >= 0.0);
    }
}

#[test]
fn rms_norm_unit_rms_before_gain() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 4], vec![1., 2., 3., 4., -5., 0.5, 2., 1.]).unwrap();
    let g = tape.constant(vec![4], vec![1.0; 4]).unwrap();
    let y = tape.rms_norm(x, g, 0.0, 4).unwrap();
    for row in tape.value(y).chunks(4) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random(&mut rng, 16);
    let k = random(&mut rng, 16);
    let v = random(&mut rng, 16);
    let run = |k: &[f64], v: &[f64]| {
        let mut tape = Tape::new();
        let qv = tape.constant(vec![4, 4], q.clone()).unwrap();
        let kv = tape.constant(vec![4, 4], k.to_vec()).unwrap();
        let vv = tape.constant(vec![4, 4], v.to_vec()).unwrap();
        let o = tape.causal_attention(qv, kv, vv, 2, 4).unwrap();
        tape.value(o).to_vec()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 12..16 {
        k2[j] += 3.0;
        v2[j] -= 2.0;
    }
    let pert = run(&k2, &v2);
    assert_eq!(&base[..12], &pert[..12]);
    assert_ne!(&base[12..], &pert[12..]);
}
