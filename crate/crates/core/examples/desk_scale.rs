//! Train on a synthetic desk-scale dataset and compare with the baselines.
//!
//! cargo run --release --example desk_scale -- [seed] [config.json]

use std::time::Instant;

use csai_core::trainer::{run_split, TrainConfig};
use csai_core::tsdata::{generate_synthetic, split_dataset, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut config: TrainConfig = match args.next() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    config.seed = seed;
    let data = generate_synthetic(&SyntheticConfig::desk_scale(200, 24, 8), seed)?;
    let split = split_dataset(data.len(), data.batch.labels(), (0.7, 0.15, 0.15), seed)?;
    let start = Instant::now();
    let r = run_split(&config, &data, &split, "train")?;
    for h in r.history.iter().step_by(5) {
        println!("epoch {:3} loss {:?} val mae {:.4}", h.epoch, h.train_loss, h.val_mae);
    }
    println!(
        "test mae {:.4} auc {:?} | mean {:.4} locf {:.4} linear {:.4} | best epoch {} | {:.1}s",
        r.test.mae,
        r.test.auc,
        r.baselines.mean.mae,
        r.baselines.locf.mae,
        r.baselines.linear.mae,
        r.best_epoch,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
