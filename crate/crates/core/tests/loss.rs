mod common;

use bbs_core::loss::{unified_loss, unified_loss_grad, Classifier, LossConfig, Method};
use bbs_core::NetworkId;
use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn cosface_five_unit_classes_matches_direct_sum() {
    let cfg = LossConfig::new(Method::CosFace, 16.0, 0.1, false).unwrap();
    let mut r = rng(5);
    let cols: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut r, 6)).collect();
    let clf = Classifier::from_columns(&cols).unwrap();
    let x = unit(&mut r, 6);
    let got = unified_loss(&cfg, &clf, &x, NetworkId(3)).unwrap();
    let want = loss_ref(&cfg, &clf, &x, 2, &[true; 5]);
    assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
}

#[test]
fn every_method_matches_direct_sum() {
    for method in Method::ALL {
        let cfg = LossConfig::standard(method);
        for seed in 0..40 {
            let inst = instance(seed, &cfg, 1, 9, 5);
            let target = inst.owner.1.index();
            let y = NetworkId(inst.owner.1 .0);
            let got = unified_loss(&cfg, &inst.clf, &inst.x, y).unwrap();
            let want = loss_ref(&cfg, &inst.clf, &inst.x, target, &vec![true; inst.clf.num_classes()]);
            assert!(
                (got - want).abs() <= 1e-10 * want.abs().max(1.0),
                "{method} seed {seed}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for method in Method::ALL {
        let cfg = moderate(method);
        for seed in 0..10 {
            let inst = instance(100 + seed, &cfg, 1, 6, 4);
            let y = NetworkId(inst.owner.1 .0);
            let g = unified_loss_grad(&cfg, &inst.clf, &inst.x, y).unwrap();

            let fx = fd_grad(&inst.x, |x| unified_loss(&cfg, &inst.clf, x, y).unwrap());
            let fw = fd_grad(inst.clf.weights(), |w| {
                let c = Classifier::new(inst.clf.dim(), w.to_vec(), inst.clf.biases().to_vec()).unwrap();
                unified_loss(&cfg, &c, &inst.x, y).unwrap()
            });
            let worst = g
                .x
                .iter()
                .zip(&fx)
                .chain(g.weights.iter().zip(&fw))
                .map(|(&a, &n)| rel_err(a, n))
                .fold(0.0, f64::max);
            assert!(worst < 1e-5, "{method} seed {seed}: {worst:e}");

            if cfg.use_bias {
                let fb = fd_grad(inst.clf.biases(), |b| {
                    let c = Classifier::new(inst.clf.dim(), inst.clf.weights().to_vec(), b.to_vec()).unwrap();
                    unified_loss(&cfg, &c, &inst.x, y).unwrap()
                });
                for (a, n) in g.biases.iter().zip(&fb) {
                    assert!(rel_err(*a, *n) < 1e-5);
                }
            } else {
                assert!(g.biases.iter().all(|&b| b == 0.0));
            }
        }
    }
}

#[test]
fn cosine_methods_ignore_rescaling() {
    for method in [Method::NormFace, Method::CosFace, Method::ArcFace] {
        let cfg = LossConfig::standard(method);
        for seed in 0..20 {
            let inst = instance(300 + seed, &cfg, 1, 8, 6);
            let y = NetworkId(inst.owner.1 .0);
            let base = unified_loss(&cfg, &inst.clf, &inst.x, y).unwrap();
            let x2: Vec<f64> = inst.x.iter().map(|v| v * 3.7).collect();
            let w2: Vec<f64> = inst.clf.weights().iter().map(|v| v * 0.2).collect();
            let c2 = Classifier::new(inst.clf.dim(), w2, inst.clf.biases().to_vec()).unwrap();
            let scaled = unified_loss(&cfg, &c2, &x2, y).unwrap();
            assert!((base - scaled).abs() < 1e-9 * base.max(1.0), "{method}: {base} vs {scaled}");
        }
    }
}

#[test]
fn additive_margins_only_raise_the_loss() {
    for method in [Method::CosFace, Method::ArcFace] {
        for seed in 0..20 {
            let inst = instance(500 + seed, &LossConfig::standard(method), 1, 8, 6);
            let y = NetworkId(inst.owner.1 .0);
            let mut prev = f64::NEG_INFINITY;
            for m in [0.0, 0.1, 0.2, 0.35, 0.5] {
                let cfg = LossConfig::new(method, 16.0, m, false).unwrap();
                let v = unified_loss(&cfg, &inst.clf, &inst.x, y).unwrap();
                // the arc margin is monotone only while θ + m stays below π
                let cos = dot(inst.clf.column(y.index()), &inst.x) / (norm(inst.clf.column(y.index())) * norm(&inst.x));
                if method == Method::ArcFace && cos.acos() + m > std::f64::consts::PI {
                    break;
                }
                assert!(v >= prev - 1e-12, "{method} m={m}: {v} < {prev}");
                prev = v;
            }
        }
    }
}

fn permuted(clf: &Classifier, perm: &[usize]) -> Classifier {
    let cols: Vec<Vec<f64>> = perm.iter().map(|&j| clf.column(j).to_vec()).collect();
    let biases: Vec<f64> = perm.iter().map(|&j| clf.biases()[j]).collect();
    let mut c = Classifier::from_columns(&cols).unwrap();
    c.biases_mut().copy_from_slice(&biases);
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_order_does_not_matter(seed in 0u64..10_000, mi in 0usize..7) {
        let method = Method::ALL[mi];
        let cfg = LossConfig::standard(method);
        let inst = instance(seed, &cfg, 1, 10, 5);
        let n = inst.clf.num_classes();
        let target = inst.owner.1.index();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = rng(seed ^ 0xabc);
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let new_target = perm.iter().position(|&j| j == target).unwrap();
        let a = unified_loss(&cfg, &inst.clf, &inst.x, NetworkId::from_index(target)).unwrap();
        let b = unified_loss(&cfg, &permuted(&inst.clf, &perm), &inst.x, NetworkId::from_index(new_target)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn margin_losses_are_non_negative(seed in 0u64..10_000, mi in 0usize..7) {
        let cfg = LossConfig::standard(Method::ALL[mi]);
        let inst = instance(seed, &cfg, 1, 10, 5);
        let v = unified_loss(&cfg, &inst.clf, &inst.x, NetworkId(inst.owner.1 .0)).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }
}
