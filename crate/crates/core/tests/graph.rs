use cmdrnn::gradcheck::GradCheck;
use cmdrnn::graph::{BinaryKind, ReduceKind, UnaryKind};
use cmdrnn::{Error, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep clear of relu / leaky_relu kinks so central differences stay valid
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| v.abs() + 0.1)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let r = g.matmul(i2, col).unwrap();
    assert_eq!(g.value(r).data(), &[3.0, 4.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

    let z = g.constant(Tensor::zeros(&[3, 2]));
    let zc = g.matmul(z, b).unwrap();
    assert!(g.value(zc).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match &err {
        Error::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let zero = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(zero).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 0.5);

    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let m2 = g.constant(Tensor::scalar(-2.0));
    let l = g.leaky_relu(m2, 0.01).unwrap();
    assert!((g.value(l).item().unwrap() + 0.02).abs() < 1e-15);
}

#[test]
fn log_and_sqrt_reject_non_positive_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    let y = g.constant(Tensor::vector(vec![-1.0]).unwrap());
    assert!(matches!(g.sqrt(y), Err(Error::Domain { op: "sqrt", .. })));
}

#[test]
fn binary_requires_equal_shapes_or_scalar() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    let s = g.constant(Tensor::scalar(3.0));
    let r = g.mul(a, s).unwrap();
    assert_eq!(g.shape(r), &[2, 2]);
}

#[test]
fn overflow_surfaces_as_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 6.0);
    let y = g.constant(Tensor::vector(vec![2.0, 4.0]).unwrap());
    let m = g.mean(y).unwrap();
    assert_eq!(g.value(m).item().unwrap(), 3.0);

    let m2 = g.constant(t(&[2, 3], &[1.0, 9.0, 3.0, 4.0, 5.0, 6.0]));
    let rows = g.reduce(ReduceKind::Max, m2, Some(1)).unwrap();
    assert_eq!(g.value(rows).data(), &[9.0, 6.0]);
    let cols = g.reduce(ReduceKind::Sum, m2, Some(0)).unwrap();
    assert_eq!(g.value(cols).data(), &[5.0, 14.0, 9.0]);
    assert!(g.reduce(ReduceKind::Sum, m2, Some(2)).is_err());
}

#[test]
fn max_routes_gradient_to_lowest_index_on_ties() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 5.0, 5.0]).unwrap());
    let m = g.reduce(ReduceKind::Max, x, None).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let sq = g.square(x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_layer_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&mut rng, &[3, 3]);
    let x = random(&mut rng, &[3, 1]);
    let report = GradCheck::default()
        .run(
            |g, v| {
                let x = g.constant(x.clone());
                let wx = g.matmul(v[0], x)?;
                let s = g.sigmoid(wx)?;
                g.sum(s)
            },
            &[w],
            &mut rng,
        )
        .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn constant_nodes_get_zero_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let p = g.param(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let prod = g.mul(c, p).unwrap();
    let l = g.sum(prod).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(c).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(p).data(), &[1.0, 2.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let s = g.square(p).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BadShape { op: "backward", .. })));
}

#[test]
fn non_finite_gradient_names_the_op() {
    // d/dx ln x = 1/x overflows for subnormal x
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1e-320]).unwrap());
    let r = g.log(p).unwrap();
    let l = g.sum(r).unwrap();
    match g.backward(l) {
        Err(Error::NonFiniteGradient { op }) => assert_eq!(op, "log"),
        other => panic!("expected gradient error, got {:?}", other.map(|_| ())),
    }
}

fn sum_of(g: &mut Graph, v: Var) -> Result<Var> {
    // weight the output so each element gets a distinct upstream gradient
    let n = g.value(v).len();
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect())?);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Every differentiable op: 20 random instances, central differences, rel. err < 1e-4.
#[test]
fn every_op_passes_randomized_gradient_check() {
    let unary = |k: UnaryKind| -> Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>> {
        Box::new(move |g, v| {
            let y = g.unary(k, v[0])?;
            sum_of(g, y)
        })
    };
    let binary = |k: BinaryKind| -> Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>> {
        Box::new(move |g, v| {
            let y = g.binary(k, v[0], v[1])?;
            sum_of(g, y)
        })
    };
    struct Case {
        name: &'static str,
        f: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
        shapes: Vec<Vec<usize>>,
        positive: bool,
    }
    let case = |name, f, shapes: &[&[usize]], positive| Case {
        name,
        f,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
    };
    let cases = vec![
        case("matmul", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            sum_of(g, y)
        }) as Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, &[&[3, 4], &[4, 2]], false),
        case("linear", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            sum_of(g, y)
        }), &[&[3, 4], &[5, 4], &[5]], false),
        case("add", binary(BinaryKind::Add), &[&[2, 3], &[2, 3]], false),
        case("sub", binary(BinaryKind::Sub), &[&[2, 3], &[2, 3]], false),
        case("mul", binary(BinaryKind::Mul), &[&[2, 3], &[2, 3]], false),
        case("mul_scalar", binary(BinaryKind::Mul), &[&[5], &[]], false),
        case("sub_scalar_lhs", binary(BinaryKind::Sub), &[&[], &[4]], false),
        case("exp", unary(UnaryKind::Exp), &[&[6]], false),
        case("log", unary(UnaryKind::Log), &[&[6]], true),
        case("tanh", unary(UnaryKind::Tanh), &[&[6]], false),
        case("sigmoid", unary(UnaryKind::Sigmoid), &[&[6]], false),
        case("relu", unary(UnaryKind::Relu), &[&[6]], false),
        case("leaky_relu", unary(UnaryKind::LeakyRelu(0.01)), &[&[6]], false),
        case("square", unary(UnaryKind::Square), &[&[6]], false),
        case("sqrt", unary(UnaryKind::Sqrt), &[&[6]], true),
        case("neg", unary(UnaryKind::Neg), &[&[6]], false),
        case("sum_axis", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.reduce(ReduceKind::Sum, v[0], Some(1))?;
            sum_of(g, y)
        }), &[&[3, 4, 2]], false),
        case("mean_axis", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.reduce(ReduceKind::Mean, v[0], Some(0))?;
            sum_of(g, y)
        }), &[&[3, 4]], false),
        case("max_axis", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.reduce(ReduceKind::Max, v[0], Some(1))?;
            sum_of(g, y)
        }), &[&[3, 5]], false),
        case("logsumexp", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.logsumexp(v[0], 1)?;
            sum_of(g, y)
        }), &[&[3, 5]], false),
        case("log_softmax", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.log_softmax(v[0], 1)?;
            sum_of(g, y)
        }), &[&[3, 5]], false),
        case("conv1d", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.conv1d(v[0], v[1], v[2], 2)?;
            sum_of(g, y)
        }), &[&[2, 2, 9], &[3, 2, 3], &[3]], false),
        case("maxpool1d", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.maxpool1d(v[0], 3, 2)?;
            sum_of(g, y)
        }), &[&[2, 2, 9]], false),
        case("reshape", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.reshape(v[0], &[6, 2])?;
            sum_of(g, y)
        }), &[&[3, 4]], false),
        case("narrow", Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.narrow(v[0], 1, 1, 2)?;
            sum_of(g, y)
        }), &[&[3, 4]], false),
    ];

    let check = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for c in &cases {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let inputs: Vec<Tensor> = c
                .shapes
                .iter()
                .map(|s| if c.positive { positive(&mut rng, s) } else { random(&mut rng, s) })
                .collect();
            let report = check.run(&c.f, &inputs, &mut rng).unwrap();
            worst = worst.max(report.max_rel_err);
        }
        assert!(worst < 1e-4, "{}: max relative error {worst:e}", c.name);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[4, 6]);
    let b = random(&mut rng, &[6, 3]);
    let run = || {
        let mut g = Graph::new();
        let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
        let m = g.matmul(va, vb).unwrap();
        let s = g.tanh(m).unwrap();
        let l = g.logsumexp(s, 0).unwrap();
        let total = g.sum(l).unwrap();
        let grads = g.backward(total).unwrap();
        (g.value(total).clone(), grads.get(va), grads.get(vb))
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_is_linear_over_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[5]);
    let loss1 = |g: &mut Graph, v: Var| -> Var {
        let s = g.sigmoid(v).unwrap();
        g.sum(s).unwrap()
    };
    let loss2 = |g: &mut Graph, v: Var| -> Var {
        let s = g.square(v).unwrap();
        let e = g.tanh(s).unwrap();
        g.mean(e).unwrap()
    };
    let grad_of = |which: u8| -> Tensor {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let l = match which {
            1 => loss1(&mut g, v),
            2 => loss2(&mut g, v),
            _ => {
                let a = loss1(&mut g, v);
                let b = loss2(&mut g, v);
                g.add(a, b).unwrap()
            }
        };
        g.backward(l).unwrap().get(v)
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..5 {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-14);
    }
}
