use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.get2(i, l) * b.get2(l, j);
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let a = rand_tensor(&mut rng, &[3, 3]);
    let out = tape.constant(Tensor::identity(3)).matmul(tape.constant(a.clone()));
    assert_eq!(out.tensor(), a);

    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).data();
    for (g, w) in got.iter().zip(naive_matmul(&a, &b)) {
        assert!((g - w).abs() < 1e-12);
    }

    let bt = Tensor::new(vec![3, 5], (0..15).map(|i| b.get2(i % 5, i / 5)).collect()).unwrap();
    let got = tape.constant(a.clone()).matmul_t(tape.constant(bt)).data();
    for (g, w) in got.iter().zip(naive_matmul(&a, &b)) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.zeros(&[2, 3]);
    let b = tape.zeros(&[2, 3]);
    let err = a.try_matmul(b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    let err = a.try_add(tape.zeros(&[4, 3])).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
    assert!(try_concat_last(&[a, tape.zeros(&[3, 1])]).is_err());
}

#[test]
fn add_gradient_is_one() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let b = tape.leaf(Tensor::from_vec(vec![0.5, 0.5, 0.5]));
    let g = tape.backward((a + b).sum());
    assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get(b).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn broadcasting_reduces_gradients() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let bias = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let col = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let out = (a + bias) * col;
    assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let g = tape.backward(out.sum());
    assert_eq!(g.get(bias).unwrap(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.get(col).unwrap(), &[6.0, 6.0]);
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.vector(vec![0.0, 0.0, 0.0]).softmax().data();
    for p in s {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(tape.vector(vec![42.0]).softmax().data(), vec![1.0]);

    let s = tape.vector(vec![1.0, 2.0, 3.0]).softmax().data();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, p) in s.iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_rows() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let filled = x.mask_fill(&[false, true, false, true, true, true]);
    assert_eq!(filled.data()[1], MASK_VALUE);
    let p = filled.softmax().data();
    assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
    assert_eq!(p[1], 0.0);
    assert_eq!(&p[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn masked_softmax_gradient_is_finite_and_zero_on_mask() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = (x.mask_fill(&[false, true, true, true]).softmax() * w).sum();
    let g = tape.backward(y);
    let gx = g.get(x).unwrap();
    assert!(gx.iter().all(|v| v.is_finite()));
    assert_eq!(&gx[1..], &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let gain = tape.constant(Tensor::full(&[4], 1.0));
    let bias = tape.zeros(&[4]);
    let out = tape.vector(vec![3.0; 4]).reshape(&[1, 4]).layer_norm(gain, bias);
    assert!(out.data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[5, 16]);
    let gain = tape.constant(Tensor::full(&[16], 1.0));
    let bias = tape.zeros(&[16]);
    let out = tape.constant(x).layer_norm(gain, bias).tensor();
    for row in out.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // ε = 1e-5 inside the root shrinks the variance slightly.
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
    let w = rand_tensor(&mut rng, &[3, 6]);
    let report = grad_check_inputs(&inputs, |tape, v| v[0].layer_norm(v[1], v[2]) * tape.constant(w.clone()));
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

fn smooth_l1_scalar(d: f64, delta: f64) -> f64 {
    if d.abs() < delta {
        0.5 * d * d / delta
    } else {
        d.abs() - 0.5 * delta
    }
}

#[test]
fn smooth_l1_examples() {
    let tape = Tape::new();
    let a = tape.vector(vec![1.0, -2.0]);
    assert_eq!(a.smooth_l1(a, 1.0).sum().item(), 0.0);
    let d = tape.vector(vec![2.0]).smooth_l1(tape.vector(vec![0.0]), 1.0).item();
    assert_eq!(d, 1.5);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = rand_tensor(&mut rng, &[40]);
    let t = rand_tensor(&mut rng, &[40]);
    let got = tape.constant(p.clone()).smooth_l1(tape.constant(t.clone()), 0.4).data();
    for i in 0..40 {
        assert!((got[i] - smooth_l1_scalar(p.data()[i] - t.data()[i], 0.4)).abs() < 1e-15);
    }
}

#[test]
fn kl_examples() {
    let tape = Tape::new();
    let std = DiagGaussian::standard(&tape, 3, 4);
    let kl = kl_diag_gaussian(&std, &std).unwrap();
    assert!(kl.data().iter().all(|v| *v == 0.0));

    let post = DiagGaussian::new(tape.vector(vec![2.0]).reshape(&[1, 1]), tape.zeros(&[1, 1])).unwrap();
    let prior = DiagGaussian::standard(&tape, 1, 1);
    assert!((kl_diag_gaussian(&post, &prior).unwrap().item() - 2.0).abs() < 1e-15);

    let bad = DiagGaussian::standard(&tape, 1, 2);
    assert!(kl_diag_gaussian(&post, &bad).is_err());
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mu1, ls1) = (vec![0.4, -0.7, 1.1], vec![-0.3, 0.2, 0.1]);
    let (mu2, ls2) = (vec![0.1, 0.3, -0.5], vec![0.25, -0.1, 0.3]);
    let tape = Tape::new();
    let mk = |m: &Vec<f64>, s: &Vec<f64>| {
        DiagGaussian::new(tape.vector(m.clone()).reshape(&[1, 3]), tape.vector(s.clone()).reshape(&[1, 3])).unwrap()
    };
    let exact = kl_diag_gaussian(&mk(&mu1, &ls1), &mk(&mu2, &ls2)).unwrap().item();

    let logpdf = |x: f64, m: f64, ls: f64| -0.5 * ((x - m) / ls.exp()).powi(2) - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for d in 0..3 {
            let e: f64 = rng.sample(StandardNormal);
            let x = mu1[d] + ls1[d].exp() * e;
            acc += logpdf(x, mu1[d], ls1[d]) - logpdf(x, mu2[d], ls2[d]);
        }
    }
    let mc = acc / n as f64;
    assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
}

#[test]
fn reparameterize_examples() {
    let tape = Tape::new();
    let mean = tape.vector(vec![0.5, -1.5]).reshape(&[1, 2]);
    let degenerate = DiagGaussian::new(mean, tape.constant(Tensor::full(&[1, 2], MASK_VALUE))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert_eq!(reparameterize(&degenerate, &mut rng).data(), vec![0.5, -1.5]);

    let dist = DiagGaussian::new(mean, tape.vector(vec![0.2, -0.4]).reshape(&[1, 2])).unwrap();
    let a = reparameterize(&dist, &mut ChaCha8Rng::seed_from_u64(9)).data();
    let b = reparameterize(&dist, &mut ChaCha8Rng::seed_from_u64(9)).data();
    assert_eq!(a, b);

    let n = 100_000;
    let big = DiagGaussian::new(
        tape.constant(Tensor::full(&[n, 1], 0.7)),
        tape.constant(Tensor::full(&[n, 1], 0.3)),
    )
    .unwrap();
    let s = reparameterize(&big, &mut rng).data();
    let m = s.iter().sum::<f64>() / n as f64;
    let sigma = 0.3f64.exp();
    assert!((m - 0.7).abs() < 3.0 * sigma / (n as f64).sqrt());
}

#[test]
fn reparameterize_passes_gradient() {
    let tape = Tape::new();
    let mean = tape.leaf(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
    let log_std = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let z = reparameterize(&DiagGaussian::new(mean, log_std).unwrap(), &mut ChaCha8Rng::seed_from_u64(2));
    let g = tape.backward(z.square().sum());
    assert!(g.get(mean).unwrap().iter().all(|v| *v != 0.0));
    assert!(g.get(log_std).unwrap().iter().all(|v| *v != 0.0));
}

#[test]
fn categorical_examples() {
    let tape = Tape::new();
    let logits = tape.vector(vec![0.3, 1.0, -2.0, 0.0]).reshape(&[1, 4]).mask_fill(&[true, false, true, true]);
    let cat = Categorical::new(logits);
    assert_eq!(cat.probs().data(), vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(cat.sample(&mut ChaCha8Rng::seed_from_u64(1)), vec![1]);
    assert_eq!(cat.nll(&[1]).item(), 0.0);

    let uniform = Categorical::new(tape.zeros(&[1, 4]));
    assert!((uniform.nll(&[2]).item() - 4f64.ln()).abs() < 1e-12);
    let p: f64 = uniform.probs().data().iter().sum();
    assert!((p - 1.0).abs() < 1e-9);
}

#[test]
fn sum_of_squares_grad_check() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = store.add("w", rand_tensor(&mut rng, &[3, 4]));
    let err = grad_check(&mut store, |tape, p| tape.param(p, w).square().sum());
    assert!(err < 1e-8, "{err}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let c = rand_tensor(&mut rng, &[3, 4]);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let w34 = rand_tensor(&mut rng, &[3, 4]);

    type F = Box<dyn for<'t> Fn(&'t Tape, &[Value<'t>]) -> Value<'t>>;
    let cases: Vec<(&str, Vec<Tensor>, F)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].matmul(v[1]))),
        ("matmul_t", vec![a.clone(), c.clone()], Box::new(|_, v| v[0].matmul_t(v[1]).square())),
        ("mul_div_sub", vec![a.clone(), pos.clone(), c.clone()], Box::new(|_, v| (v[0] * v[2] - v[2]) / v[1])),
        ("tanh_exp_sin_cos", vec![a.clone()], Box::new(|_, v| v[0].tanh() + v[0].exp() + v[0].sin() * v[0].cos())),
        ("log_sqrt", vec![pos.clone()], Box::new(|_, v| v[0].ln() + v[0].sqrt())),
        ("relu_clamp_wrap", vec![a.clone()], Box::new(|_, v| v[0].relu() + v[0].clamp(-0.5, 0.5).scale(3.0) + v[0].wrap_angle().square())),
        ("clamp_each", vec![a.clone()], Box::new(|_, v| {
            let lo: Vec<f64> = (0..12).map(|i| -0.6 + 0.05 * i as f64).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + 0.5).collect();
            v[0].clamp_each(&lo, &hi).square()
        })),
        ("softmax", vec![a.clone()], {
            let w = w34.clone();
            Box::new(move |t, v| v[0].mask_fill(&[false, false, true, false, false, false, false, false, true, true, true, false]).softmax() * t.constant(w.clone()))
        }),
        ("sum_last_concat_slice", vec![a.clone(), c.clone()], Box::new(|_, v| concat_last(&[v[0], v[1].slice_last(1, 2)]).sum_last().square())),
        ("gather_scatter_rows", vec![a.clone(), c.clone()], Box::new(|_, v| v[0].scatter_rows(&[2, 0], v[1].gather_rows(&[1, 1])).square() + concat_rows(&[v[0], v[1]]).gather_rows(&[5, 0, 0]).sum())),
        ("sinusoid", vec![a.clone()], Box::new(|_, v| v[0].sinusoid(&[1.0, 0.3, 2.5]).square().sum_last() + v[0].sinusoid(&[0.7]).sum_last())),
        ("smooth_l1", vec![a.clone().clone(), c.clone()], Box::new(|_, v| v[0].scale(2.0).smooth_l1(v[1], 0.5))),
        ("nll", vec![a.clone()], Box::new(|_, v| v[0].mask_fill(&[false, true, false, false, false, false, false, false, false, false, true, false]).nll(&[0, 3, 1]))),
        ("max_pool", vec![rand_tensor(&mut rng, &[2, 3, 4])], Box::new(|_, v| v[0].masked_max_pool(&[true, false, true, true, true, false]).square())),
        ("head_dot_mix", vec![rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[6, 4])], Box::new(|_, v| v[0].head_dot(v[1], 2, 0.7).softmax().head_mix(v[2]).square())),
    ];
    for (name, inputs, f) in cases {
        let report = grad_check_inputs(&inputs, |t, v| f(t, v));
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[5, 5]);
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = x.matmul(x).tanh().softmax().sum();
        tape.backward(y).tensor(x)
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_descends_on_quadratic() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(vec![3.0, -2.0]));
    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
        &store,
    );
    for _ in 0..200 {
        let tape = Tape::new();
        let loss = tape.param(&store, w).square().sum();
        let grads = tape.backward(loss);
        let g = tape.param_grads(&grads, &store);
        opt.step(&mut store, &g);
    }
    assert!(store.get(w).l2_norm() < 0.1);
}

#[test]
fn checkpoint_rejects_corruption() {
    let recs = vec![("a".to_string(), Tensor::from_vec(vec![1.0, 2.0]))];
    let mut buf = Vec::new();
    checkpoint::write_records(&mut buf, &recs).unwrap();
    assert!(checkpoint::read_records(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_records(&bad[..]).is_err());
}

#[test]
fn load_named_reports_mismatches() {
    let mut store = ParamStore::new();
    store.zeros("enc.w", &[2, 2]);
    let err = store.load_named(vec![("enc.w".into(), Tensor::zeros(&[3, 2]))]).unwrap_err().to_string();
    assert!(err.contains("enc.w"), "{err}");
    let err = store.load_named(vec![("other".into(), Tensor::zeros(&[1]))]).unwrap_err().to_string();
    assert!(err.contains("other"), "{err}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()), 0..5)
        ) {
            let recs: Vec<(String, Tensor)> = tensors.iter().enumerate().map(|(i, (shape, seed))| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f64::from_bits(seed.wrapping_mul(k as u64 + 1) >> 2)).collect();
                (format!("t{i}.μ"), Tensor::new(shape.clone(), data).unwrap())
            }).collect();
            let mut buf = Vec::new();
            checkpoint::write_records(&mut buf, &recs).unwrap();
            let back = checkpoint::read_records(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), recs.len());
            for ((n0, t0), (n1, t1)) in recs.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.shape(), t1.shape());
                let bits0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
                let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits0, bits1);
            }
        }

        #[test]
        fn softmax_rows_are_distributions(xs in proptest::collection::vec(-50.0..50.0f64, 1..12)) {
            let tape = Tape::new();
            let p = tape.vector(xs).softmax().data();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
