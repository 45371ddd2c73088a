//! Scores the uncorrected images, the polynomial baseline and (when a model
//! path is given) the learned estimator on generated phantoms.
//!
//! ```bash
//! cargo run --release --example evaluate_table -- [model.gnet] [count]
//! ```

use gainfield_kit::baseline::BaselineConfig;
use gainfield_kit::corpus::phantom_set;
use gainfield_kit::eval::{evaluate_dataset, BaselineCorrector, Corrector, GetNetCorrector};
use gainfield_kit::fieldgen::FieldGenConfig;
use gainfield_kit::getnet::GetNetModel;

fn main() -> gainfield_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args.next().map(|p| GetNetModel::load(p.as_ref())).transpose()?;
    let count: usize = args.next().map_or(20, |a| a.parse().expect("count"));

    let size = model.as_ref().map_or(64, |m| m.input_size());
    let phantoms = phantom_set(size, count, 12)?;
    let baseline = BaselineCorrector {
        config: BaselineConfig::default(),
    };
    let getnet = model.map(|model| GetNetCorrector { model });
    let mut methods: Vec<&dyn Corrector> = Vec::new();
    if let Some(g) = &getnet {
        methods.push(g);
    }
    methods.push(&baseline);
    let report = evaluate_dataset(&phantoms, &methods, &FieldGenConfig::default(), 99)?;
    print!("{}", report.to_table());
    Ok(())
}
