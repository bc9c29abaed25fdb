mod support;

use anomem::config::MemoryConfig;
use anomem::memory::HopfieldMemory;
use anomem::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use support::*;

fn mem_from_columns(cols: &[Vec<f64>], beta: f64) -> HopfieldMemory {
    let (d, n) = (cols[0].len(), cols.len());
    let mut w = vec![0.0; d * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            w[i * n + j] = c[i];
        }
    }
    HopfieldMemory::new(Tensor::new([d, n], w).unwrap(), beta, 1e-4, 16).unwrap()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new([1, v.len()], v.to_vec()).unwrap()
}

#[test]
fn tiny_beta_returns_the_prototype_mean() {
    let mut r = rng(1);
    let x = uniform(&mut r, &[4, 6], -2.0, 2.0);
    let m = HopfieldMemory::new(x.clone(), 1e-9, 1e-4, 16).unwrap();
    let q = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let out = m.retrieve(&q).unwrap();
    let cols = columns(&x);
    for k in 0..3 {
        for i in 0..4 {
            let mean = cols.iter().map(|c| c[i]).sum::<f64>() / 6.0;
            assert!((out.data()[k * 4 + i] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn separated_pattern_is_a_fixed_point() {
    let m = mem_from_columns(&[vec![10.0, 0.0], vec![0.0, 10.0]], 2.0);
    let out = m.retrieve(&row(&[10.0, 0.0])).unwrap();
    let want = retrieve_bf(&columns(m.weights()), 2.0, 1e-4, 16, &[10.0, 0.0]);
    assert!((out.data()[0] - 10.0).abs() < 1e-4 && out.data()[1].abs() < 1e-4);
    assert!((out.data()[0] - want[0]).abs() < 1e-12 && (out.data()[1] - want[1]).abs() < 1e-12);
}

#[test]
fn first_iterate_matches_hand_arithmetic() {
    let m = mem_from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2.0);
    let out = m.update(&row(&[1.0, 0.0])).unwrap();
    let e2 = 2f64.exp();
    assert!((out.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
    assert!((out.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
}

#[test]
fn retrieval_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(10 + seed);
        let x = uniform(&mut r, &[3, 5], -2.0, 2.0);
        let m = HopfieldMemory::new(x.clone(), 2.0, 1e-4, 16).unwrap();
        let q = uniform(&mut r, &[4, 3], -2.0, 2.0);
        let out = m.retrieve(&q).unwrap();
        for (k, qr) in rows(&q).iter().enumerate() {
            let want = retrieve_bf(&columns(&x), 2.0, 1e-4, 16, qr);
            for i in 0..3 {
                assert!((out.data()[k * 3 + i] - want[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gate_examples() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let z = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let tape = Tape::new();
    let m = HopfieldMemory::new(x, 2.0, 1e-4, 16).unwrap();
    let bm = m.bind(&tape, false).unwrap();
    let zv = tape.constant(z.clone());
    let full = m.retrieve(&z).unwrap();

    assert_eq!(*bm.gate(&zv, &[0, 0]).unwrap().value(), z);
    assert_eq!(*bm.gate(&zv, &[1, 1]).unwrap().value(), full);
    let mixed = bm.gate(&zv, &[1, 0]).unwrap().value();
    let first = m.retrieve(&row(&z.data()[..3])).unwrap();
    assert_eq!(&mixed.data()[..3], first.data());
    assert_eq!(&mixed.data()[3..], &z.data()[3..]);

    assert!(bm.gate(&zv, &[1, 2]).is_err());
    assert!(bm.gate(&zv, &[1]).is_err());
}

#[test]
fn spatial_examples() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let m = HopfieldMemory::new(x, 2.0, 1e-4, 16).unwrap();
    let tape = Tape::new();
    let bm = m.bind(&tape, false).unwrap();

    let v = uniform(&mut r, &[1, 3], -1.0, 1.0);
    let single = bm.spatial(&tape.constant(v.clone().reshape([1, 1, 3]).unwrap())).unwrap();
    assert_eq!(single.shape(), vec![1, 1, 3]);
    assert_eq!(single.value().data(), m.retrieve(&v).unwrap().data());

    let constant: Vec<f64> = (0..4).flat_map(|_| v.data().to_vec()).collect();
    let out = bm.spatial(&tape.constant(Tensor::new([2, 2, 3], constant).unwrap())).unwrap().value();
    let rv = m.retrieve(&v).unwrap();
    for p in 0..4 {
        assert_eq!(&out.data()[p * 3..p * 3 + 3], rv.data());
    }

    let map = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
    let out = bm.spatial(&tape.constant(map.clone())).unwrap().value();
    for p in 0..4 {
        let want = retrieve_bf(&columns(m.weights()), 2.0, 1e-4, 16, &map.data()[p * 3..p * 3 + 3]);
        for i in 0..3 {
            assert!((out.data()[p * 3 + i] - want[i]).abs() < 1e-12);
        }
    }

    let wrong = tape.constant(Tensor::zeros([2, 2, 4]));
    assert!(bm.spatial(&wrong).is_err());
}

#[test]
fn outputs_lie_in_the_prototype_hull() {
    for seed in 0..50 {
        let mut r = rng(100 + seed);
        let d = r.random_range(2..6);
        let n = r.random_range(2..7);
        let x = uniform(&mut r, &[d, n], -2.0, 2.0);
        let m = HopfieldMemory::new(x.clone(), r.random_range(0.5..4.0), 1e-4, 16).unwrap();
        let q = uniform(&mut r, &[3, d], -3.0, 3.0);
        let out = m.retrieve(&q).unwrap();
        for o in rows(&out) {
            let res = hull_residual(&columns(&x), &o);
            assert!(res < 1e-8, "seed {seed}: residual {res}");
        }
    }
}

#[test]
fn nnls_detects_points_outside_the_hull() {
    let protos = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(hull_residual(&protos, &[0.2, 0.3]) < 1e-12);
    assert!(hull_residual(&protos, &[1.0, 1.0]) > 0.1);
}

#[test]
fn converged_rows_are_fixed_points() {
    let mut checked = 0;
    for seed in 0..50 {
        let mut r = rng(200 + seed);
        let x = uniform(&mut r, &[4, 5], -1.5, 1.5);
        let m = HopfieldMemory::new(x, 2.0, 1e-4, 16).unwrap();
        let q = uniform(&mut r, &[4, 4], -2.0, 2.0);
        let tape = Tape::new();
        let bm = m.bind(&tape, false).unwrap();
        let (out, trace) = bm.retrieve_traced(&tape.constant(q)).unwrap();
        let out = out.value();
        let again = m.update(&out).unwrap();
        for k in 0..4 {
            if trace.converged[k] {
                checked += 1;
                let res = (0..4).map(|i| (out.data()[k * 4 + i] - again.data()[k * 4 + i]).abs()).fold(0.0, f64::max);
                assert!(res < 1e-4, "seed {seed} row {k}: residual {res}");
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn noisy_queries_recover_stored_patterns() {
    for seed in 0..50 {
        let mut r = rng(300 + seed);
        let (d, n) = (32, 8);
        let protos: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                unit(&v).into_iter().map(|x| x * 4.0).collect()
            })
            .collect();
        let m = mem_from_columns(&protos, 2.0);
        let target = r.random_range(0..n);
        let noise: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let noise = unit(&noise);
        let q: Vec<f64> = protos[target].iter().zip(&noise).map(|(p, e)| p + 0.4 * e).collect();
        let out = m.retrieve(&row(&q)).unwrap();
        let c = cosine(out.data(), &protos[target]);
        assert!(c > 0.99, "seed {seed}: cosine {c}");
    }
}

#[test]
fn retrieval_gradient_matches_finite_differences() {
    for seed in 0..20 {
        assert!(loss_gradient_case("hopfield_retrieve", seed) < 1e-5);
        assert!(loss_gradient_case("mem_gate", seed) < 1e-5);
    }
}

#[test]
fn init_and_diagnostics() {
    let cfg = MemoryConfig::default();
    let m = HopfieldMemory::init(5, 4, &cfg, &mut rng(4)).unwrap();
    assert_eq!((m.dim(), m.size()), (5, 4));
    for n in m.prototype_norms() {
        assert!((n - cfg.init_scale).abs() < 1e-12);
    }
    assert!(m.min_pairwise_distance().unwrap() <= m.max_pairwise_distance().unwrap());
    let one = HopfieldMemory::init(5, 1, &cfg, &mut rng(4)).unwrap();
    assert!(one.min_pairwise_distance().is_none());
    assert!(HopfieldMemory::new(Tensor::zeros([2, 2]), 0.0, 1e-4, 16).is_err());
    assert!(HopfieldMemory::new(Tensor::zeros([2, 2]), 1.0, 1e-4, 0).is_err());
    assert!(HopfieldMemory::new(Tensor::full([2, 2], f64::NAN), 1.0, 1e-4, 4).is_err());
    assert!(m.retrieve(&Tensor::zeros([1, 4])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_commutes_with_position_permutation(seed in 0u64..10_000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut r = rng(seed);
        let m = HopfieldMemory::new(uniform(&mut r, &[3, 4], -1.0, 1.0), 2.0, 1e-4, 16).unwrap();
        let map = uniform(&mut r, &[2, 3, 3], -1.0, 1.0);
        let permute = |t: &Tensor| -> Tensor {
            let data: Vec<f64> = perm.iter().flat_map(|&p| t.data()[p * 3..p * 3 + 3].to_vec()).collect();
            Tensor::new([2, 3, 3], data).unwrap()
        };
        let tape = Tape::new();
        let bm = m.bind(&tape, false).unwrap();
        let a = bm.spatial(&tape.constant(permute(&map))).unwrap().value();
        let b = permute(&bm.spatial(&tape.constant(map)).unwrap().value());
        prop_assert_eq!(&*a, &b);
    }

    #[test]
    fn outputs_are_convex_combinations(seed in 0u64..10_000, beta in 0.1f64..5.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let m = HopfieldMemory::new(x.clone(), beta, 1e-4, 16).unwrap();
        let out = m.retrieve(&uniform(&mut r, &[2, 3], -2.0, 2.0)).unwrap();
        let cols = columns(&x);
        for i in 0..3 {
            let lo = cols.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
            let hi = cols.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
            for k in 0..2 {
                let v = out.data()[k * 3 + i];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
