mod support;

use anomem::config::Mode;
use anomem::eval::{apply_axis, run_protocol};
use anomem::{auroc, gen_synthetic, linear_probe, sweep, EvalReport, SweepAxis, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use support::*;

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 5], &[0, 1, 1, 0, 1]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auroc(&[0.1, 0.2], &[0, 2]).is_err());
    assert!(auroc(&[0.1], &[0, 1]).is_err());
}

#[test]
fn auroc_matches_pair_counting_exhaustively() {
    let mut r = rng(1);
    for pattern in 0u32..64 {
        let labels: Vec<u8> = (0..6).map(|b| ((pattern >> b) & 1) as u8).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        for _ in 0..20 {
            // Coarse grid values so ties occur regularly.
            let scores: Vec<f64> = (0..6).map(|_| f64::from(r.random_range(0..5)) / 4.0).collect();
            match auroc(&scores, &labels) {
                Ok(v) => assert!((v - auroc_pairs(&scores, &labels)).abs() <= 1e-12),
                Err(_) => assert!(!both),
            }
        }
    }
}

#[test]
fn probe_examples() {
    let mut r = rng(2);
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for k in 0..120 {
        let c = (k % 2) as u32;
        let centre = if c == 0 { -3.0 } else { 3.0 };
        rows.push(vec![centre + 0.5 * r.sample::<f64, _>(StandardNormal), r.sample(StandardNormal)]);
        classes.push(c);
    }
    let feats = Tensor::from_rows(&rows).unwrap();
    assert_eq!(linear_probe(&feats, &classes, 0).unwrap(), 1.0);

    let k = 3;
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let mut r = rng(100 + seed);
            let feats = uniform(&mut r, &[300, 5], -1.0, 1.0);
            let mut labels: Vec<u32> = (0..300).map(|i| (i % k) as u32).collect();
            labels.shuffle(&mut r);
            linear_probe(&feats, &labels, seed).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((mean - 1.0 / k as f64).abs() <= 0.1, "{accs:?}");

    assert!(linear_probe(&feats, &vec![0; 120], 0).is_err());
    assert!(linear_probe(&feats, &classes[..10], 0).is_err());
}

#[test]
fn reports_follow_the_schema() {
    let r = EvalReport::from_aurocs(Some(SweepAxis::Gamma), Some(0.05), vec![0, 1, 2], vec![0.6, 0.8, 0.7]);
    assert!((r.mean - 0.7).abs() < 1e-12);
    assert_eq!(r.median, 0.7);
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["axis", "value", "seeds", "aurocs", "mean", "std"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["axis"], "gamma");
    assert_eq!("memory_size".parse::<SweepAxis>().unwrap(), SweepAxis::MemorySize);
    assert!("depth".parse::<SweepAxis>().is_err());
}

#[test]
fn axis_application() {
    let cfg = tiny_config(0);
    assert_eq!(apply_axis(&cfg, SweepAxis::MemorySize, 5.0).unwrap().memory.sizes, vec![5, 5]);
    assert_eq!(apply_axis(&cfg, SweepAxis::SamplingRatio, 0.25).unwrap().loss.ratios, vec![0.25, 1.0]);
    let g = apply_axis(&cfg, SweepAxis::Gamma, 0.05).unwrap();
    assert_eq!((g.mode, g.protocol.gamma), (Mode::Ssad, 0.05));
    assert!(apply_axis(&cfg, SweepAxis::MemorySize, 2.5).is_err());
    assert!(apply_axis(&cfg, SweepAxis::SamplingRatio, 0.0).is_err());
}

#[test]
fn single_point_sweep_equals_direct_runs() {
    let cfg = tiny_config(0);
    let data = gen_synthetic(&cfg.data, 0).unwrap();
    let reports = sweep(&cfg, &data, SweepAxis::MemorySize, &[8.0]).unwrap();
    assert_eq!(reports.len(), 1);
    let direct: Vec<f64> = cfg.protocol.seeds.iter().map(|&s| run_protocol(&cfg, &data, s).unwrap().auroc).collect();
    assert_eq!(reports[0].aurocs, direct);
    assert_eq!(reports[0].seeds, cfg.protocol.seeds);
    assert_eq!(reports, sweep(&cfg, &data, SweepAxis::MemorySize, &[8.0]).unwrap());
    assert!(sweep(&cfg, &data, SweepAxis::Gamma, &[]).is_err());

    let out = run_protocol(&cfg, &data, 1).unwrap();
    assert_eq!(out.scores.len(), 2 * cfg.protocol.test_per_class);
    assert!((0.0..=1.0).contains(&out.auroc));
    assert_eq!(out.scale_aurocs.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_is_rank_invariant(
        scores in prop::collection::vec(-5.0f64..5.0, 4..20),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let n = scores.len();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = auroc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
        prop_assert!((a - auroc(&transformed, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));

        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() == n {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
