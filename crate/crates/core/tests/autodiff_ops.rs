use barprune::autodiff::{BnStats, Graph, StretchParams};
use barprune::gradcheck::check_gradients;
use barprune::{Error, Rng, Tensor};

const TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn assert_ok(name: &str, r: barprune::gradcheck::GradReport) {
    assert!(r.max_rel_err < TOL, "{name}: {r:?}");
}

#[test]
fn conv_all_ones_center_is_nine() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(g.value(y).data()[4], 9.0);
    assert_eq!(g.value(y).data()[0], 4.0);
}

#[test]
fn conv_zero_weight_gives_zero() {
    let mut rng = Rng::new(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&[2, 3, 5, 5], &mut rng));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_shape_errors_name_the_operand() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, w, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Dimension(ref m) if m.contains("weight")), "{err}");
    let w = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, w, 1, 0).is_err());
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, w, 3, 1).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)] {
        let x = randn(&[2, 3, 8, 8], &mut rng);
        let w = randn(&[2, 3, k, k], &mut rng);
        let r = check_gradients(&[x, w], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_ok("conv2d", r);
    }
}

#[test]
fn batchnorm_constant_input_gives_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 2, 3, 3], 4.0));
    let gamma = g.constant(Tensor::from_vec(vec![2.0, -1.0]));
    let beta = g.constant(Tensor::from_vec(vec![0.5, 3.0]));
    let mut stats = BnStats::new(2);
    let y = g.batchnorm2d(x, gamma, beta, &mut stats, true).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let c = (i / 9) % 2;
        assert_eq!(v, [0.5, 3.0][c]);
    }
}

#[test]
fn batchnorm_standardized_batch_is_identity() {
    // channel values {-1, 1} repeated: mean 0, biased variance 1
    let data: Vec<f64> = (0..2 * 2 * 4).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data).unwrap());
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let mut stats = BnStats::new(2);
    let y = g.batchnorm2d(x, gamma, beta, &mut stats, true).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);
    // running stats moved by momentum 0.1 toward (0, 8/7)
    assert!((stats.mean[0]).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 8.0 / 7.0)).abs() < 1e-12);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = Rng::new(12);
    for training in [true, false] {
        let x = randn(&[2, 2, 4, 4], &mut rng);
        let gamma = randn(&[2], &mut rng);
        let beta = randn(&[2], &mut rng);
        let weights = randn(&[2, 2, 4, 4], &mut rng);
        let mut frozen = BnStats::new(2);
        frozen.mean = vec![0.3, -0.2];
        frozen.var = vec![1.7, 0.6];
        let r = check_gradients(&[x, gamma, beta], |g, v| {
            let mut stats = frozen.clone();
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, training)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            let sq = g.mul(p, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_ok("batchnorm2d", r);
    }
}

#[test]
fn batchnorm_rejects_wrong_channels() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let gamma = g.constant(Tensor::zeros(&[3]));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(g.batchnorm2d(x, gamma, beta, &mut BnStats::new(2), true).is_err());
}

#[test]
fn relu_values() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn concat_channels_shape() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[2, 2, 3, 3], 1.0));
    let b = g.constant(Tensor::full(&[2, 3, 3, 3], 2.0));
    let y = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 5, 3, 3]);
    assert_eq!(g.value(y).data()[2 * 9], 2.0);
    assert_eq!(g.value(y).data()[5 * 9], 1.0);
    let c = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
    assert!(g.concat_channels(&[a, c]).is_err());
}

#[test]
fn cross_entropy_uniform_is_ln_classes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap());
    let l = g.cross_entropy_logits(x, &[0, 3, 1]).unwrap();
    assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    assert!(matches!(g.cross_entropy_logits(x, &[0, 4, 1]), Err(Error::Argument(_))));
    assert!(matches!(g.cross_entropy_logits(x, &[0, 1]), Err(Error::Dimension(_))));
}

#[test]
fn elementwise_and_pooling_gradients() {
    let mut rng = Rng::new(13);
    for _ in 0..4 {
        let a = randn(&[2, 3, 3, 3], &mut rng);
        let b = randn(&[2, 3, 3, 3], &mut rng);
        let z = randn(&[3], &mut rng);
        let r = check_gradients(&[a, b, z], |g, v| {
            let s = g.add(v[0], v[1])?;
            let r = g.relu(s);
            let m = g.mul(r, v[1])?;
            let c = g.channel_mul(m, v[2])?;
            let sg = g.sigmoid(c);
            let sc = g.scale(sg, 1.7);
            let sh = g.add_scalar(sc, -0.3);
            let cat = g.concat_channels(&[sh, v[0]])?;
            let p = g.global_avg_pool(cat)?;
            let sq = g.mul(p, p)?;
            Ok(g.mean(sq))
        })
        .unwrap();
        assert_ok("elementwise", r);
    }
}

#[test]
fn linear_and_losses_gradients() {
    let mut rng = Rng::new(14);
    for _ in 0..4 {
        let x = randn(&[3, 5], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let b = randn(&[4], &mut rng);
        let mut t = vec![0.0; 12];
        for row in t.chunks_mut(4) {
            let e: Vec<f64> = (0..4).map(|_| rng.normal().exp()).collect();
            let s: f64 = e.iter().sum();
            for (dst, v) in row.iter_mut().zip(e) {
                *dst = v / s;
            }
        }
        let r = check_gradients(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let ce = g.cross_entropy_logits(y, &[1, 3, 0])?;
            let soft = g.soft_cross_entropy(y, &t, 4.0)?;
            let soft = g.scale(soft, 0.6);
            g.add(ce, soft)
        })
        .unwrap();
        assert_ok("linear+losses", r);
    }
}

#[test]
fn hard_concrete_gradient_at_fixed_noise() {
    let mut rng = Rng::new(15);
    let hc = StretchParams { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 };
    for _ in 0..4 {
        let la = randn(&[6], &mut rng);
        let noise: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let h = randn(&[2, 6, 2, 2], &mut rng);
        let r = check_gradients(&[la, h], |g, v| {
            let z = g.hard_concrete(v[0], &noise, hc)?;
            let y = g.channel_mul(v[1], z)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_ok("hard_concrete", r);
    }
}

#[test]
fn backward_of_sum_is_ones_and_of_dot_is_two_x() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -4.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let p = g.mul(v, v).unwrap();
    let d = g.sum(p);
    g.backward(d).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|&a| 2.0 * a).collect();
    assert_eq!(g.grad(v).unwrap().data(), &expect[..]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f32>::new();
    let v = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let r = g.relu(v);
    assert!(matches!(g.backward(r), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_is_identical() {
    let mut rng = Rng::new(16);
    let mut g = Graph::<f64>::new();
    let x = g.param(randn(&[1, 2, 4, 4], &mut rng));
    let w = g.param(randn(&[3, 2, 3, 3], &mut rng));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let sq = g.mul(y, y).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    let first = g.grad(w).unwrap().clone();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &first);
}

#[test]
fn shared_subexpression_accumulates() {
    let mut rng = Rng::new(17);
    let x0 = randn(&[5], &mut rng);
    let single = {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let s = g.sigmoid(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        g.grad(x).unwrap().clone()
    };
    let mut g = Graph::<f64>::new();
    let x = g.param(x0);
    let s = g.sigmoid(x);
    let two = g.add(s, s).unwrap();
    let l = g.sum(two);
    g.backward(l).unwrap();
    for (a, b) in g.grad(x).unwrap().data().iter().zip(single.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = Rng::new(18);
        let mut g = Graph::<f32>::new();
        let x = g.constant(randn(&[2, 3, 8, 8], &mut rng).cast());
        let w = g.constant(randn(&[4, 3, 3, 3], &mut rng).cast());
        let y = g.conv2d(x, w, 2, 1).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
