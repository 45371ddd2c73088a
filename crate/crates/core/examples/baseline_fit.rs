//! Fits the log-domain Legendre polynomial to a corrupted phantom and prints
//! the robust objective per reweighting pass next to the true coarse field.

use gainfield_kit::baseline::{fit_log_polynomial_trace, BaselineConfig};
use gainfield_kit::corpus::{generate_phantom, PhantomSpec};
use gainfield_kit::fieldgen::{apply_forward_model, generate_gain_field, item_rng, FieldGenConfig, NoiseSpec};

fn main() -> gainfield_kit::Result<()> {
    let (u, _) = generate_phantom(&PhantomSpec::centered(64), 0)?;
    let mut rng = item_rng(3, 0);
    let g = generate_gain_field(&FieldGenConfig::default(), 4, 4, 16, &mut rng)?;
    let v = apply_forward_model(&u, &g, NoiseSpec::new(0.01)?, &mut rng)?;

    let cfg = BaselineConfig::default();
    let trace = fit_log_polynomial_trace(&v, &cfg)?;
    println!("{} masked pixels, {} terms", trace.masked_pixels, cfg.term_count());
    for (i, obj) in trace.objective.iter().enumerate() {
        println!("pass {i}: Huber objective {obj:.4}");
    }
    let est = trace.surface.coarse_field(16)?;
    println!("true      {:?}", g.values());
    println!("estimated {:?}", est.values());
    Ok(())
}
