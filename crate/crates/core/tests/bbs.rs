mod common;

use bbs_core::bbs::{
    bbs_loss, bbs_loss_grad, ignored_count, mining_mask, LabelSpace, MiningSchedule, NegativeMask,
};
use bbs_core::loss::{similarity_g, unified_loss, Classifier, LossConfig, Method};
use bbs_core::{BasketId, LocalId, NetworkId};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn random_mask(space: &LabelSpace, owner: (BasketId, LocalId), seed: u64) -> NegativeMask {
    let mut m = NegativeMask::all_ones(space, owner).unwrap();
    let mut r = rng(seed);
    let own = space.range(owner.0);
    for j in 0..space.total() {
        if !own.contains(&j) {
            m.bits[j] = r.gen_bool(0.5);
        }
    }
    m
}

#[test]
fn arbitrary_mask_matches_direct_sum() {
    for method in Method::ALL {
        let cfg = LossConfig::standard(method);
        for seed in 0..30 {
            let inst = instance(seed, &cfg, 4, 6, 5);
            let mask = random_mask(&inst.space, inst.owner, seed + 1);
            let target = inst.space.network_id(inst.owner.0, inst.owner.1).unwrap().index();
            let got = bbs_loss(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &mask).unwrap();
            let mut include = mask.bits.clone();
            include[target] = false;
            let want = loss_ref(&cfg, &inst.clf, &inst.x, target, &include);
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "{method}: {got} vs {want}");
        }
    }
}

#[test]
fn masked_gradients_match_finite_differences() {
    for method in Method::ALL {
        let cfg = moderate(method);
        for seed in 0..5 {
            let inst = instance(40 + seed, &cfg, 3, 4, 4);
            let mask = random_mask(&inst.space, inst.owner, seed);
            let g = bbs_loss_grad(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &mask).unwrap();
            let loss_w = |w: &[f64]| {
                let c = Classifier::new(inst.clf.dim(), w.to_vec(), inst.clf.biases().to_vec()).unwrap();
                bbs_loss(&inst.space, &cfg, &c, &inst.x, inst.owner, &mask).unwrap()
            };
            let fw = fd_grad(inst.clf.weights(), loss_w);
            let fx = fd_grad(&inst.x, |x| bbs_loss(&inst.space, &cfg, &inst.clf, x, inst.owner, &mask).unwrap());
            for (a, n) in g.weights.iter().zip(&fw).chain(g.x.iter().zip(&fx)) {
                assert!(rel_err(*a, *n) < 1e-5, "{method}: {a} vs {n}");
            }
            let target = inst.space.network_id(inst.owner.0, inst.owner.1).unwrap().index();
            for j in (0..inst.space.total()).filter(|&j| !mask.bits[j] && j != target) {
                assert!(g.weight_column(j).iter().all(|&v| v == 0.0));
                assert_eq!(g.biases[j], 0.0);
            }
        }
    }
}

#[test]
fn all_ones_is_concatenation_all_zeros_is_own_basket() {
    for seed in 0..100 {
        let method = Method::ALL[seed as usize % 7];
        let cfg = LossConfig::standard(method);
        let inst = instance(seed, &cfg, 4, 7, 6);
        let y = inst.space.network_id(inst.owner.0, inst.owner.1).unwrap();

        let ones = NegativeMask::all_ones(&inst.space, inst.owner).unwrap();
        let a = bbs_loss(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &ones).unwrap();
        let b = unified_loss(&cfg, &inst.clf, &inst.x, y).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.max(1.0));

        let zeros = NegativeMask::all_zeros(&inst.space, inst.owner).unwrap();
        let a = bbs_loss(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &zeros).unwrap();
        let own = inst.clf.subset(inst.space.range(inst.owner.0));
        let b = unified_loss(&cfg, &own, &inst.x, NetworkId(inst.owner.1 .0)).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }
}

#[test]
fn crafted_centers_keep_the_least_similar() {
    // basket 1 owns the sample; basket 2 keeps class 2, basket 3 keeps 1 and 3
    let space = LabelSpace::new(&[5, 3, 4]).unwrap();
    let sims = [0.9, 0.1, 0.8, 0.2, 0.3, 0.7, -0.5, 0.6, -0.9, 0.5, -0.1, 0.4];
    let cols: Vec<Vec<f64>> = sims.iter().map(|&c: &f64| vec![c, (1.0 - c * c).sqrt()]).collect();
    let clf = Classifier::from_columns(&cols).unwrap();
    let cfg = LossConfig::standard(Method::NormFace);
    let mask = mining_mask(&space, &cfg, &clf, &[1.0, 0.0], (BasketId(1), LocalId(1)), &[0, 2, 2]).unwrap();
    let kept: Vec<usize> = (5..12).filter(|&j| mask.bits[j]).map(|j| j + 1).collect();
    assert_eq!(kept, vec![7, 9, 11]);
}

#[test]
fn mining_matches_full_sort() {
    for case in 0..1000u64 {
        let method = Method::ALL[case as usize % 7];
        let cfg = LossConfig::standard(method);
        let inst = instance(case, &cfg, 4, 9, 3);
        let mut r = rng(case ^ 77);
        let d: Vec<usize> = inst.space.sizes().iter().map(|&n| r.gen_range(0..=n as usize)).collect();
        let mask = mining_mask(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &d).unwrap();
        for k in inst.space.baskets() {
            let range = inst.space.range(k);
            let bits = &mask.bits[range.clone()];
            if k == inst.owner.0 {
                let t = inst.owner.1.index();
                assert!(bits.iter().enumerate().all(|(i, &b)| b == (i != t)));
                continue;
            }
            let vals: Vec<f64> = range
                .clone()
                .map(|j| similarity_g(&cfg, inst.clf.column(j), 0.0, &inst.x).unwrap())
                .collect();
            let top = sorted_top(&vals, d[k.index()]);
            let zeros: Vec<usize> = (0..bits.len()).filter(|&i| !bits[i]).collect();
            assert_eq!(zeros, top, "case {case}");
        }
    }
}

#[test]
fn staircase_schedule() {
    let s = MiningSchedule::uniform(2, 3, 2, 20).unwrap();
    let r: Vec<f64> = (1..=20).map(|t| s.ratio(t).unwrap()).collect();
    assert_eq!(r[0], 1.0);
    assert_eq!(r[9], 0.5);
    assert_eq!(r[19], 0.0);
    assert!(r.windows(2).all(|w| w[1] <= w[0]));
    assert!(s.ratio(0).is_err() && s.ratio(21).is_err());
}

proptest! {
    #[test]
    fn ignored_count_bounds(n in 1usize..500, tau in 1usize..20, r in 0.0f64..=1.0) {
        let d = ignored_count(n, tau, r);
        prop_assert!(d <= n);
        prop_assert!(d >= tau.min(n));
        prop_assert!(d as f64 >= (n as f64 * r - 1e-6).min(n as f64));
    }

    #[test]
    fn network_ids_are_a_bijection(sizes in proptest::collection::vec(1u32..30, 1..6)) {
        let space = LabelSpace::new(&sizes).unwrap();
        let mut seen = vec![false; space.total()];
        for k in space.baskets() {
            for l in 1..=space.size(k) as u32 {
                let id = space.network_id(k, LocalId(l)).unwrap();
                prop_assert!(!seen[id.index()]);
                seen[id.index()] = true;
                prop_assert_eq!(space.locate(id).unwrap(), (k, LocalId(l)));
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn mask_zero_count_is_sum_of_ignored(seed in 0u64..5000, r in 0.0f64..=1.0) {
        let cfg = LossConfig::standard(Method::CosFace);
        let inst = instance(seed, &cfg, 5, 12, 4);
        let d: Vec<usize> = inst.space.sizes().iter().map(|&n| ignored_count(n as usize, 2, r)).collect();
        let mask = mining_mask(&inst.space, &cfg, &inst.clf, &inst.x, inst.owner, &d).unwrap();
        let expect: usize = inst.space.baskets().filter(|&k| k != inst.owner.0).map(|k| d[k.index()]).sum();
        prop_assert_eq!(mask.cross_basket_zeros(&inst.space), expect);
    }
}
