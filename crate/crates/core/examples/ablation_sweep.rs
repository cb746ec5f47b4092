//! Trains each network variant under the same budget on a smaller world and
//! prints Recall@1 for each.
//!
//! ```bash
//! cargo run --release --example ablation_sweep
//! ```

use soenet::datagen::WorldConfig;
use soenet::experiment::{run_experiment, ExperimentConfig};
use soenet::losses::LossKind;
use soenet::training::TrainConfig;

fn main() -> soenet::Result<()> {
    let base = ExperimentConfig {
        world: WorldConfig { n_places: 24, extent: 1200.0, ..WorldConfig::default() },
        train: TrainConfig { epochs: 2, ..TrainConfig::desk() },
        ..ExperimentConfig::default()
    };
    let variants = [
        ("full, hphn", true, true, LossKind::Hphn),
        ("full, lazy", true, true, LossKind::Lazy),
        ("no OE", false, true, LossKind::Hphn),
        ("no attention", true, false, LossKind::Hphn),
    ];
    println!("{:<14} {:>9} {:>9} {:>8}", "variant", "recall@1", "recall@1%", "seconds");
    for (name, oe, att, kind) in variants {
        let mut cfg = base.clone();
        cfg.model.use_oe = oe;
        cfg.model.use_attention = att;
        cfg.loss.kind = kind;
        let r = run_experiment::<f32>(&cfg)?;
        println!("{name:<14} {:>9.3} {:>9.3} {:>8.1}", r.recall_at_1, r.recall_at_1pct, r.train_seconds);
    }
    Ok(())
}
