//! Corrects a corrupted phantom with a saved model and with the polynomial
//! baseline, reporting per-tissue relative MAE and writing the images.
//!
//! ```bash
//! cargo run --release --example train_desk -- 3 500 desk.gnet
//! cargo run --release --example correct_phantom -- desk.gnet
//! ```

use gainfield_kit::baseline::{baseline_correct, BaselineConfig};
use gainfield_kit::corpus::phantom_set;
use gainfield_kit::eval::{corrupt_sample, relative_mae};
use gainfield_kit::fieldgen::FieldGenConfig;
use gainfield_kit::getnet::{correct_image, GetNetModel};
use gainfield_kit::image::{Image2D, Tissue};
use gainfield_kit::io::save_image;
use std::path::PathBuf;

fn main() -> gainfield_kit::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk.gnet".into()));
    let model = GetNetModel::load(&path)?;
    let phantom = phantom_set(model.input_size(), 1, 5)?.remove(0);
    let v = corrupt_sample(&phantom.image, &FieldGenConfig::default(), 11, 0)?;
    let learned = correct_image(&model, &v)?;
    let poly = baseline_correct(&v, &BaselineConfig::default())?;

    let score = |img: &Image2D, t: Option<Tissue>| {
        relative_mae(&phantom.image, img, t.map(|t| phantom.labels.mask(t)).as_deref()).unwrap()
    };
    println!("{:<10}{:>10}{:>10}{:>10}{:>10}", "", "entire", "CSF", "GM", "WM");
    for (name, img) in [("corrupted", &v), ("GetNet", &learned), ("LogPoly", &poly)] {
        print!("{name:<10}{:>10.4}", score(img, None));
        for t in Tissue::FOREGROUND {
            print!("{:>10.4}", score(img, Some(t)));
        }
        println!();
        save_image(img, &PathBuf::from(format!("{}.pfm", name.to_lowercase())))?;
    }
    save_image(&phantom.image, &PathBuf::from("original.pfm"))
}
