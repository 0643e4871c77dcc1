use bbs_core::datasim::{gen_synthetic, split_dataset, SplitSpec};
use bbs_core::loss::{LossConfig, Method};
use bbs_core::trainer::{grad_check, Mode, TrainConfig};

fn small(method: Method, mode: Mode, seed: u64) -> TrainConfig {
    let mut loss = LossConfig::standard(method);
    if method == Method::ArcFace {
        loss.scale = 16.0;
        loss.margin = 0.1;
    }
    TrainConfig {
        loss,
        mode,
        tau: 1,
        drop_every: 2,
        batch_size: 3,
        epochs: 4,
        seed,
        hidden: vec![5],
        embed_dim: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn grad_check_every_method_and_mode() {
    let data = gen_synthetic(6, 3, 4, 0.3, 9).unwrap();
    let set = split_dataset(&data, &SplitSpec::new(2, vec![0.5, 0.5], 1).unwrap()).unwrap();
    for method in Method::ALL {
        for mode in [Mode::Baseline1, Mode::Baseline2, Mode::Bbs, Mode::ParallelBbs] {
            let mut cfg = small(method, mode, 3);
            cfg.shards = 2;
            let r = grad_check(&cfg, &set, 1e-5).unwrap();
            println!("{method} {mode} {:.2e} params={}", r.max_rel_error, r.params);
            assert!(r.passed, "{method} {mode}: {}", r.max_rel_error);
        }
    }
}
