//! Per-image correction time of a network forward pass against the IRLS
//! polynomial fit.
//!
//! ```bash
//! cargo run --release --example bench -- [size]
//! ```

use gainfield_kit::baseline::BaselineConfig;
use gainfield_kit::corpus::phantom_set;
use gainfield_kit::eval::{corrupt_sample, time_each, BaselineCorrector, Corrector, GetNetCorrector};
use gainfield_kit::fieldgen::FieldGenConfig;
use gainfield_kit::getnet::build_getnet;

fn main() -> gainfield_kit::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(256, |a| a.parse().expect("size"));
    let channels = if size >= 256 { 32 } else { 16 };
    let images = phantom_set(size, 10, 1)?
        .iter()
        .enumerate()
        .map(|(i, p)| corrupt_sample(&p.image, &FieldGenConfig::default(), 2, i))
        .collect::<gainfield_kit::Result<Vec<_>>>()?;

    let getnet = GetNetCorrector {
        model: build_getnet(size, channels, 0)?,
    };
    let baseline = BaselineCorrector {
        config: BaselineConfig::default(),
    };
    println!("{size}x{size}, {} worker threads", rayon::current_num_threads());
    for c in [&getnet as &dyn Corrector, &baseline] {
        let t = time_each(c, &images, 2)?;
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let min = t.iter().copied().fold(f64::INFINITY, f64::min);
        println!("{:<8} mean {:8.2} ms   min {:8.2} ms", c.name(), mean * 1e3, min * 1e3);
    }
    Ok(())
}
