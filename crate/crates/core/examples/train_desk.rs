//! Trains the estimator on procedural textures and saves it.
//!
//! ```bash
//! cargo run --release --example train_desk -- [epochs] [train_count] [model_path]
//! ```

use gainfield_kit::corpus::Corpus;
use gainfield_kit::getnet::build_getnet;
use gainfield_kit::train::{train, TrainConfig};
use std::path::PathBuf;

fn main() -> gainfield_kit::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(3, |a| a.parse().expect("epochs"));
    let count: usize = args.next().map_or(500, |a| a.parse().expect("train_count"));
    let path = PathBuf::from(args.next().unwrap_or_else(|| "desk.gnet".into()));

    let corpus = Corpus::procedural(64, count, count / 10 + 1, 7);
    let mut model = build_getnet(64, 16, 7)?;
    let cfg = TrainConfig {
        epochs,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &corpus, &cfg)?;
    for row in &report.metrics {
        println!(
            "epoch {} step {:5}  train {:.5}  val {:.5}",
            row.epoch, row.step, row.train_loss, row.val_loss
        );
    }
    println!(
        "val loss {:.5} -> {:.5} (constant predictor {:.5})",
        report.initial_val_loss, report.final_val_loss, report.constant_val_loss
    );
    model.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
