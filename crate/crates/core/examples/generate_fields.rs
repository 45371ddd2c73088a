//! Draws a few gain fields, prints their statistics and writes them as PFM.
//!
//! ```bash
//! cargo run --release --example generate_fields -- out_dir
//! ```

use gainfield_kit::fieldgen::{generate_gain_field, item_rng, FieldGenConfig};
use gainfield_kit::image::upsample_bilinear;
use gainfield_kit::io::save_image;
use gainfield_kit::spectrum::high_frequency_fraction;
use std::path::PathBuf;

fn main() -> gainfield_kit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fields".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = FieldGenConfig::default();
    for seed in 0..5 {
        let g = generate_gain_field(&cfg, 16, 16, 16, &mut item_rng(seed, 0))?;
        let full = upsample_bilinear(&g, 256, 256)?;
        println!(
            "seed {seed}: mean {:.6}  min {:.3}  max {:.3}  HF {:.4}%",
            g.mean(),
            full.min(),
            full.max(),
            100.0 * high_frequency_fraction(&full, cfg.control_grid as f64 / 2.0)
        );
        save_image(&full, &out.join(format!("field_{seed}.pfm")))?;
    }
    Ok(())
}
