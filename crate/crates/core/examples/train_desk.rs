//! Trains the desk model on three traversals of the synthetic world and
//! writes the checkpoint and the metrics log.
//!
//! ```bash
//! cargo run --release --example train_desk -- 2 /tmp/run
//! ```

use std::path::PathBuf;

use soenet::datagen::{generate_world, select_traversals, WorldConfig};
use soenet::losses::LossConfig;
use soenet::model::ModelConfig;
use soenet::training::{metrics_csv, train, MiningRule, TrainConfig};

fn main() -> soenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(1, |e| e.parse().expect("epochs"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/train_desk".into()));
    std::fs::create_dir_all(&out)?;

    let world = generate_world(&WorldConfig::default())?;
    let train_set = select_traversals(&world.submaps, &[0, 1, 2])?;
    let config = TrainConfig { epochs, ..TrainConfig::desk() };
    let outcome = train::<f32>(
        &train_set,
        &ModelConfig::desk(),
        &config,
        &LossConfig::default(),
        &MiningRule::default(),
        None,
        |row| {
            if row.step % 50 == 0 {
                println!("step {:>5}  loss {:.4}  lr {:.6}", row.step, row.loss, row.lr);
            }
        },
    )?;

    outcome.params.save(&out.join("model.sck"))?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    println!("{} steps; checkpoint in {}", outcome.metrics.len(), out.display());
    Ok(())
}
