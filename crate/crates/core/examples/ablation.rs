//! Teacher mAP for the source model and each self-training arm.
//!
//! `cargo run --release -p rpl-core --example ablation -- configs/benchmark.toml`

use rpl_core::config::ExperimentConfig;
use rpl_core::training::evaluate_teacher;
use rpl_core::{generate_dataset, pretrain_source, self_train, TrainConfig};

fn main() -> rpl_core::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let data = generate_dataset(&cfg.scene)?;
    let source = pretrain_source(data.source_labeled(), &cfg.pretrain)?;
    let unlabeled = data.target_unlabeled();
    let base = evaluate_teacher(&source, data.target_eval(), &cfg.train, 0)?;
    println!("{:<10} {:.4}", "source", base.map);

    let arms = [
        ("full", cfg.train.clone()),
        ("no-lpla", TrainConfig { lpla: false, ..cfg.train.clone() }),
        ("fixed-0.7", TrainConfig { cate: false, fixed_delta: 0.7, ..cfg.train.clone() }),
        ("fixed-0.9", TrainConfig { cate: false, fixed_delta: 0.9, ..cfg.train.clone() }),
    ];
    for (name, tc) in arms {
        let out = self_train(&tc, &unlabeled, None, &source)?;
        let e = evaluate_teacher(&out.teacher, data.target_eval(), &tc, tc.iterations)?;
        println!("{name:<10} {:.4}", e.map);
    }
    Ok(())
}
