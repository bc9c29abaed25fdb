mod support;

use anomem::autodiff::gradcheck::{numeric_gradient, relative_error};
use anomem::encoder::StageSpec;
use anomem::optim::{cosine_lr, Schedule, SgdNesterov};
use anomem::{AugmentPolicy, EncoderSpec, EncoderState, Tape, Tensor};
use proptest::prelude::*;
use support::*;

fn toy_spec() -> EncoderSpec {
    EncoderSpec {
        height: 8,
        width: 8,
        channels: 2,
        stages: vec![StageSpec { widths: vec![3], stride: 2 }, StageSpec { widths: vec![4], stride: 2 }],
        input_mean: 0.5,
        input_std: 0.25,
    }
}

#[test]
fn encoder_init_is_deterministic_with_default_widths() {
    let spec = EncoderSpec::default();
    let a = EncoderState::init(&spec, &mut rng(1)).unwrap();
    let b = EncoderState::init(&spec, &mut rng(1)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, EncoderState::init(&spec, &mut rng(2)).unwrap());
    let outs: Vec<usize> = a.kernels.iter().map(|k| k.shape()[3]).collect();
    assert_eq!(outs, vec![16, 64, 96, 128]);
    assert_eq!(spec.scale_shapes(), vec![(8, 8, 64), (1, 1, 128)]);
}

#[test]
fn kernel_variance_follows_fan_in() {
    let spec = EncoderSpec {
        stages: vec![StageSpec { widths: vec![400], stride: 2 }],
        ..toy_spec()
    };
    let st = EncoderState::init(&spec, &mut rng(3)).unwrap();
    let k = &st.kernels[0];
    assert!(k.len() >= 7_000);
    let n = k.len() as f64;
    let mean = k.data().iter().sum::<f64>() / n;
    let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 2.0 / (9.0 * 2.0);
    assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
}

#[test]
fn encoder_forward_shapes_and_independence() {
    let spec = EncoderSpec::default();
    let st = EncoderState::init(&spec, &mut rng(4)).unwrap();
    let imgs = uniform(&mut rng(5), &[2, 32, 32, 3], 0.0, 1.0);
    let z = st.forward(&imgs).unwrap();
    assert_eq!(z[0].shape(), &[2, 8, 8, 64]);
    assert_eq!(z[1].shape(), &[2, 128]);

    let first = Tensor::new([1, 32, 32, 3], imgs.data()[..32 * 32 * 3].to_vec()).unwrap();
    let z1 = st.forward(&first).unwrap();
    assert_eq!(z1[0].data(), &z[0].data()[..8 * 8 * 64]);
    assert_eq!(z1[1].data(), &z[1].data()[..128]);

    assert!(st.forward(&Tensor::zeros([1, 16, 16, 3])).is_err());
}

#[test]
fn grey_input_gives_zero_features() {
    let spec = EncoderSpec::default();
    let st = EncoderState::init(&spec, &mut rng(6)).unwrap();
    let z = st.forward(&Tensor::full([1, 32, 32, 3], spec.input_mean)).unwrap();
    assert!(z.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let spec = toy_spec();
    let st = EncoderState::init(&spec, &mut rng(7)).unwrap();
    let imgs = uniform(&mut rng(8), &[2, 8, 8, 2], 0.0, 1.0);
    let w1 = uniform(&mut rng(9), &[2, 4, 4, 3], -1.0, 1.0);
    let w2 = uniform(&mut rng(10), &[2, 4], -1.0, 1.0);
    let loss = |enc: &EncoderState| -> f64 {
        let z = enc.forward(&imgs).unwrap();
        let a: f64 = z[0].data().iter().zip(w1.data()).map(|(x, y)| x * y).sum();
        let b: f64 = z[1].data().iter().zip(w2.data()).map(|(x, y)| x * y).sum();
        a + b
    };
    let tape = Tape::new();
    let enc = st.bind(&tape, true);
    let z = enc.forward(&tape.constant(imgs.clone())).unwrap();
    let out = z[0]
        .mul(&tape.constant(w1.clone()))
        .unwrap()
        .sum()
        .unwrap()
        .add(&z[1].mul(&tape.constant(w2.clone())).unwrap().sum().unwrap())
        .unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic = grads.wrt(&enc.kernels[0]);
    let numeric = numeric_gradient(
        |k| {
            let mut e = st.clone();
            e.kernels[0] = k.clone();
            loss(&e)
        },
        &st.kernels[0],
        1e-5,
    );
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

fn image(seed: u64) -> Tensor {
    uniform(&mut rng(seed), &[12, 12, 3], 0.0, 1.0)
}

#[test]
fn identity_policy_is_a_no_op() {
    let img = image(1);
    let p = AugmentPolicy::identity();
    for i in 0..5 {
        assert_eq!(p.sample_view(&img, i).unwrap(), img);
    }
}

#[test]
fn views_are_deterministic_and_independent() {
    let img = image(2);
    let p = AugmentPolicy { seed: 9, ..AugmentPolicy::default() };
    assert_eq!(p.sample_view(&img, 4).unwrap(), p.sample_view(&img, 4).unwrap());
    let distinct = (0..100u64)
        .filter(|&i| p.sample_view(&img, 2 * i).unwrap() != p.sample_view(&img, 2 * i + 1).unwrap())
        .count();
    assert!(distinct >= 99, "{distinct} of 100 view pairs differ");
}

#[test]
fn noise_has_the_requested_spread() {
    let img = Tensor::full([100, 100, 1], 0.5);
    let p = AugmentPolicy { noise_std: 0.1, noise_p: 1.0, ..AugmentPolicy::identity() };
    let out = p.sample_view(&img, 0).unwrap();
    let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / 0.1 - 1.0).abs() < 0.1, "std {std}");
}

#[test]
fn invalid_policies_are_rejected() {
    let img = image(3);
    let bad = [
        AugmentPolicy { crop_scale: [0.5, 1.5], ..AugmentPolicy::default() },
        AugmentPolicy { crop_scale: [0.8, 0.5], ..AugmentPolicy::default() },
        AugmentPolicy { flip_p: 1.5, ..AugmentPolicy::default() },
        AugmentPolicy { noise_std: -0.1, ..AugmentPolicy::default() },
    ];
    for p in bad {
        assert!(p.sample_view(&img, 0).is_err());
    }
}

#[test]
fn cosine_schedule_examples() {
    let s = Schedule::new(0.1, 0.02, 40).unwrap();
    assert_eq!(cosine_lr(&s, 0).unwrap(), 0.1);
    assert!((cosine_lr(&s, 40).unwrap() - 0.02).abs() < 1e-15);
    assert!((cosine_lr(&s, 20).unwrap() - 0.06).abs() < 1e-15);
    assert!(cosine_lr(&s, 41).is_err());
    assert!(Schedule::new(0.01, 0.1, 10).is_err());
    assert!(Schedule::new(0.1, 0.0, 0).is_err());
}

#[test]
fn nesterov_examples() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0]);
    let mut plain = SgdNesterov::new(0.0, 0.0, &[&p]);
    plain.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5, 1.0])], 0.1).unwrap();
    assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);

    let mut q = Tensor::from_vec(vec![1.0]);
    let mut opt = SgdNesterov::new(0.9, 0.0, &[&q]);
    let (mut pe, mut ve) = (1.0f64, 0.0f64);
    for _ in 0..2 {
        let g = Tensor::from_vec(vec![q.data()[0]]);
        opt.step(&mut [&mut q], &[g], 0.1).unwrap();
        let ge = pe;
        ve = 0.9 * ve - 0.1 * ge;
        pe += 0.9 * ve - 0.1 * ge;
    }
    assert!((q.data()[0] - pe).abs() < 1e-12);

    let mut r = Tensor::from_vec(vec![0.3, 0.4]);
    let mut opt = SgdNesterov::new(0.9, 5e-4, &[&r]);
    opt.step(&mut [&mut r], &[Tensor::zeros([2])], 0.1).unwrap();
    assert_eq!(r.data(), &[0.3, 0.4]);

    assert!(opt.step(&mut [&mut r], &[Tensor::zeros([3])], 0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn views_keep_shape_and_range(seed in any::<u64>(), draw in any::<u64>(), h in 3usize..10, w in 3usize..10) {
        let img = uniform(&mut rng(seed), &[h, w, 3], 0.0, 1.0);
        let p = AugmentPolicy { seed, noise_std: 0.3, noise_p: 1.0, ..AugmentPolicy::default() };
        let out = p.sample_view(&img, draw).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encoder_is_batch_order_equivariant(seed in 0u64..1000) {
        let st = EncoderState::init(&toy_spec(), &mut rng(seed)).unwrap();
        let imgs = uniform(&mut rng(seed + 1), &[3, 8, 8, 2], 0.0, 1.0);
        let per = 8 * 8 * 2;
        let order = [2usize, 0, 1];
        let permuted: Vec<f64> = order.iter().flat_map(|&i| imgs.data()[i * per..(i + 1) * per].to_vec()).collect();
        let a = st.forward(&imgs).unwrap();
        let b = st.forward(&Tensor::new([3, 8, 8, 2], permuted).unwrap()).unwrap();
        for (za, zb) in a.iter().zip(&b) {
            let n = za.len() / 3;
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(&zb.data()[k * n..(k + 1) * n], &za.data()[i * n..(i + 1) * n]);
            }
        }
    }

    #[test]
    fn optimizer_only_moves_parameters_with_gradient(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut a = uniform(&mut r, &[3], -1.0, 1.0);
        let mut b = uniform(&mut r, &[2], -1.0, 1.0);
        let (a0, b0) = (a.clone(), b.clone());
        let mut opt = SgdNesterov::new(0.9, 5e-4, &[&a, &b]);
        let g = uniform(&mut r, &[3], 0.1, 1.0);
        opt.step(&mut [&mut a, &mut b], &[g, Tensor::zeros([2])], 0.05).unwrap();
        prop_assert!(a != a0);
        prop_assert_eq!(b, b0);
    }
}
