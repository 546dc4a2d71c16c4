use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Central-difference check of `build` (param -> scalar) at `x`.
/// Components whose ±h evaluations land on a different smooth piece are skipped.
fn check_gradient(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let h = 1e-5;
    let mut g = Graph::new();
    let p = g.param(x.clone()).unwrap();
    let root = build(&mut g, p);
    let analytic = g.backward(root).unwrap().get(p);
    let base_pattern = g.kink_pattern();

    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let p = g.param(t).unwrap();
        let r = build(&mut g, p);
        (g.value(r).item(), g.kink_pattern())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, kp) = eval(plus);
        let (fm, km) = eval(minus);
        if kp != base_pattern || km != base_pattern {
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn affine_identity_returns_input() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
        .unwrap();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = g.constant(eye).unwrap();
    let b = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn l1_self_distance_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g
        .param(random_tensor(&mut rng, &[5, 4], -1.0, 1.0))
        .unwrap();
    let d = g.sub(x, x).unwrap();
    let a = g.abs(d);
    let m = g.mean(a);
    assert_eq!(g.value(m).item(), 0.0);
}

#[test]
fn softmax_xent_confident_class_near_zero() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(vec![20.0, -20.0])).unwrap();
    let ce = g.softmax_xent(l, &[0]).unwrap();
    let expected = (1.0 + (-40.0f64).exp()).ln();
    assert!((g.value(ce).item() - expected).abs() < 1e-15);
    assert!(g.value(ce).item() < 1e-12);
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    let err = g.sub(a, b).unwrap_err();
    assert_eq!(
        err,
        DiffError::ShapeMismatch {
            op: "sub",
            left: vec![3],
            right: vec![4]
        }
    );
    let w = g.constant(Tensor::zeros(&[5, 2])).unwrap();
    let bias = g.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(
        g.affine(a, w, bias),
        Err(DiffError::ShapeMismatch { op: "affine", .. })
    ));
}

#[test]
fn non_finite_leaves_rejected() {
    let mut g = Graph::new();
    assert!(matches!(
        g.param(Tensor::vector(vec![1.0, f64::NAN])),
        Err(DiffError::NonFinite { .. })
    ));
}

#[test]
fn l1_loss_values() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[4])).unwrap();
    let b = g.constant(Tensor::ones(&[4])).unwrap();
    let l = g.l1_loss(a, b).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let same = g.l1_loss(b, b).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
}

#[test]
fn l1_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ta = random_tensor(&mut rng, &[32, 32], 0.0, 1.0);
    let tb = random_tensor(&mut rng, &[32, 32], 0.0, 1.0);
    let mut naive = 0.0;
    for i in 0..1024 {
        naive += (ta.data()[i] - tb.data()[i]).abs();
    }
    naive /= 1024.0;
    let mut g = Graph::new();
    let a = g.constant(ta).unwrap();
    let b = g.constant(tb).unwrap();
    let l = g.l1_loss(a, b).unwrap();
    assert!((g.value(l).item() - naive).abs() < 1e-12);
}

#[test]
fn backward_of_mean_is_uniform() {
    let n = 7;
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[n], 3.0)).unwrap();
    let m = g.mean(x);
    let grads = g.backward(m).unwrap();
    assert!(grads
        .get(x)
        .data()
        .iter()
        .all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
}

#[test]
fn backward_of_l1_is_sign_over_n() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -2.0, 3.0, 1.0])).unwrap();
    let c = g
        .constant(Tensor::vector(vec![0.0, 0.0, 4.0, 1.0]))
        .unwrap();
    let l = g.l1_loss(x, c).unwrap();
    let grad = g.backward(l).unwrap().get(x);
    // The last component sits exactly on the kink: subgradient 0.
    assert_eq!(grad.data(), &[0.25, -0.25, -0.25, 0.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3])).unwrap();
    let y = g.tanh(x);
    assert_eq!(
        g.backward(y).unwrap_err(),
        DiffError::NonScalarRoot { shape: vec![3] }
    );
}

#[test]
fn untouched_leaves_get_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2])).unwrap();
    let unused = g.param(Tensor::ones(&[3, 2])).unwrap();
    let m = g.sum(x);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(unused), Tensor::zeros(&[3, 2]));
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g
            .param(random_tensor(&mut rng, &[6, 5], -1.0, 1.0))
            .unwrap();
        let w = g
            .param(random_tensor(&mut rng, &[5, 3], -1.0, 1.0))
            .unwrap();
        let b = g.param(random_tensor(&mut rng, &[3], -1.0, 1.0)).unwrap();
        let y = g.affine(x, w, b).unwrap();
        let y = g.tanh(y);
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        grads
            .get(w)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[3, 4], -1.5, 1.5);
    let other = random_tensor(&mut rng, &[3, 4], 0.5, 1.5);
    let w = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[2], -1.0, 1.0);
    let tol = 1e-4;

    type Build = Box<dyn Fn(&mut Graph, Var) -> Var>;
    let o = other.clone();
    let cases: Vec<(&str, Build)> = vec![
        (
            "tanh",
            Box::new(|g, p| {
                let y = g.tanh(p);
                g.sum(y)
            }),
        ),
        (
            "relu",
            Box::new(|g, p| {
                let y = g.relu(p);
                let y = g.square(y);
                g.mean(y)
            }),
        ),
        (
            "leaky_relu",
            Box::new(|g, p| {
                let y = g.leaky_relu(p, 0.2);
                let y = g.square(y);
                g.mean(y)
            }),
        ),
        (
            "sigmoid",
            Box::new(|g, p| {
                let y = g.sigmoid(p);
                let y = g.square(y);
                g.sum(y)
            }),
        ),
        (
            "exp",
            Box::new(|g, p| {
                let y = g.exp(p);
                g.mean(y)
            }),
        ),
        (
            "abs",
            Box::new(|g, p| {
                let y = g.abs(p);
                g.mean(y)
            }),
        ),
        (
            "mul_div",
            Box::new(move |g, p| {
                let c = g.constant(o.clone()).unwrap();
                let m = g.mul(p, c).unwrap();
                let d = g.div(m, c).unwrap();
                let d = g.mul(d, p).unwrap();
                let q = g.div(c, d).unwrap();
                let q = g.tanh(q);
                g.mean(q)
            }),
        ),
        (
            "affine",
            Box::new(move |g, p| {
                let wv = g.constant(w.clone()).unwrap();
                let bv = g.constant(b.clone()).unwrap();
                let y = g.affine(p, wv, bv).unwrap();
                let y = g.tanh(y);
                g.sum(y)
            }),
        ),
        (
            "row_mean_pow",
            Box::new(|g, p| {
                let s = g.square(p);
                let s = g.add_scalar(s, 0.1);
                let s = g.pow_scalar(s, 0.7);
                let r = g.row_mean(s).unwrap();
                let r = g.square(r);
                g.sum(r)
            }),
        ),
        (
            "softmax_xent",
            Box::new(|g, p| g.softmax_xent(p, &[0, 3, 1]).unwrap()),
        ),
        (
            "bce_with_logits",
            Box::new(|g, p| {
                let t = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3) as f64 / 2.0).collect())
                    .unwrap();
                g.bce_with_logits(p, &t).unwrap()
            }),
        ),
    ];
    for (name, build) in cases {
        let err = check_gradient(&x, build);
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn affine_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let err = check_gradient(&w, |g, p| {
        let xv = g.constant(x.clone()).unwrap();
        let b = g.constant(Tensor::full(&[4], 0.1)).unwrap();
        let y = g.affine(xv, p, b).unwrap();
        let y = g.sigmoid(y);
        let y = g.square(y);
        g.mean(y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_and_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[2, 8, 8], 0.0, 1.0);
    let k = gaussian_window(3, 1.0);
    let err = check_gradient(&x, move |g, p| {
        let c = g.fixed_conv2d(p, &k).unwrap();
        let c = g.square(c);
        let q = g.avgpool2(p).unwrap();
        let q = g.square(q);
        let a = g.mean(c);
        let b = g.mean(q);
        g.add(a, b).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn ms_ssim_self_similarity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ta = random_tensor(&mut rng, &[32, 32], 0.0, 1.0);
    let tb = random_tensor(&mut rng, &[32, 32], 0.0, 1.0);
    let cfg = MsSsimConfig::default();
    let mut g = Graph::new();
    let a = g.constant(ta).unwrap();
    let b = g.constant(tb).unwrap();
    let aa = ms_ssim(&mut g, a, a, &cfg).unwrap();
    assert!((g.value(aa).item() - 1.0).abs() < 1e-9);
    let ab = ms_ssim(&mut g, a, b, &cfg).unwrap();
    let ba = ms_ssim(&mut g, b, a, &cfg).unwrap();
    let (vab, vba) = (g.value(ab).item(), g.value(ba).item());
    assert!((vab - vba).abs() < 1e-12);
    assert!(vab > 0.0 && vab < 1.0);
}

#[test]
fn ms_ssim_rejects_bad_inputs() {
    let cfg = MsSsimConfig::default();
    let mut g = Graph::new();
    let odd = g.constant(Tensor::zeros(&[30, 30])).unwrap();
    assert!(matches!(
        ms_ssim(&mut g, odd, odd, &cfg),
        Err(DiffError::InvalidShape { .. })
    ));
    let rect = g.constant(Tensor::zeros(&[32, 28])).unwrap();
    assert!(ms_ssim(&mut g, rect, rect, &cfg).is_err());
    let ok = g.constant(Tensor::zeros(&[32, 32])).unwrap();
    let hot = g.constant(Tensor::full(&[32, 32], 1.2)).unwrap();
    assert!(matches!(
        ms_ssim(&mut g, ok, hot, &cfg),
        Err(DiffError::OutOfRange { .. })
    ));
    let small = g.constant(Tensor::zeros(&[24, 24])).unwrap();
    assert!(ms_ssim(&mut g, small, small, &cfg).is_err());
}

#[test]
fn ms_ssim_gradient_through_affine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 1024], -0.5, 0.5);
    let bias = random_tensor(&mut rng, &[1024], -0.5, 0.5);
    let target = random_tensor(&mut rng, &[2, 32, 32], 0.0, 1.0);
    let err = check_gradient(&z, move |g, p| {
        let wv = g.constant(w.clone()).unwrap();
        let bv = g.constant(bias.clone()).unwrap();
        let img = g.affine(p, wv, bv).unwrap();
        let img = g.sigmoid(img);
        let img = g.reshape(img, &[2, 32, 32]).unwrap();
        let t = g.constant(target.clone()).unwrap();
        let s = ms_ssim_batch(g, img, t, &MsSsimConfig::default()).unwrap();
        let s = g.one_minus(s);
        g.mean(s)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn adam_zero_gradient_leaves_params() {
    struct One(Tensor);
    impl Parameterized for One {
        fn param_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn params(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }
    let mut m = One(Tensor::vector(vec![1.0, -2.0]));
    let mut opt = AdamState::new(AdamConfig::with_lr(0.1), &m).unwrap();
    opt.step(&mut m, &[Tensor::zeros(&[2])]).unwrap();
    assert_eq!(m.0.data(), &[1.0, -2.0]);
    assert_eq!(opt.step_count(), 1);

    // Hand-computed first step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
    let mut s = One(Tensor::scalar(0.0));
    let mut opt = AdamState::new(AdamConfig::with_lr(0.1), &s).unwrap();
    opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
    assert!((s.0.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

    // Constant gradient keeps pushing against its sign.
    for _ in 0..50 {
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
    }
    assert!(s.0.item() < -4.0);
    assert_eq!(opt.step_count(), 51);

    let err = opt.step(&mut s, &[Tensor::scalar(f64::NAN)]).unwrap_err();
    assert_eq!(
        err,
        DiffError::NonFiniteGradient {
            param: "w".into(),
            step: 52
        }
    );
    assert!(AdamState::new(AdamConfig::with_lr(0.0), &s).is_err());
}
