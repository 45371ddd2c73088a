//! Loads a run configuration (or the defaults), applies a couple of edits and
//! prints the resolved TOML and the per-purpose seeds.
//!
//! ```bash
//! cargo run --example run_config -- [config.toml]
//! ```

use gainfield_kit::config::{derive_seed, RunConfig, SeedPurpose};

fn main() -> gainfield_kit::Result<()> {
    let path = std::env::args().nth(1);
    let mut cfg = RunConfig::load(path.as_deref().map(std::path::Path::new))?;
    cfg.image_size = 256;
    cfg.validate()?;
    print!("{}", cfg.to_toml());
    println!("\n# base channels {}, coarse grid {}", cfg.base_channels(), cfg.coarse_size());
    for p in [
        SeedPurpose::Corpus,
        SeedPurpose::Phantoms,
        SeedPurpose::ModelInit,
        SeedPurpose::Training,
        SeedPurpose::Evaluation,
    ] {
        println!("# {p:?} seed {:#018x}", derive_seed(cfg.seed, p));
    }
    Ok(())
}
