//! The two-branch training construction: `k_hat = G(v * k) / G(v)` with shared
//! weights, compared against the injected field `k`.

use crate::autodiff::{Graph, Real, Tensor4, Var};
use crate::error::{Error, Result};
use crate::fieldgen::{apply_forward_model, generate_gain_field, FieldGenConfig, NoiseSpec};
use crate::getnet::{forward, GetNetModel, DOWNSCALE};
use crate::image::{upsample_bilinear, GainField, Image2D};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Corrupted image `u * g + n`.
    pub v: Image2D,
    /// Field used to corrupt `v`; kept for diagnostics only.
    pub g: GainField,
    /// Injected target field, drawn independently of `g`.
    pub k: GainField,
    /// `v * upsample(k)`.
    pub v_k: Image2D,
}

/// Corrupts `u` with a random field and noise, then draws an independent
/// target field `k` and applies it on top.
pub fn make_training_pair(u: &Image2D, cfg: &FieldGenConfig, rng: &mut impl Rng) -> Result<TrainingPair> {
    let (w, h) = u.dims();
    if w % DOWNSCALE != 0 || h % DOWNSCALE != 0 {
        return Err(Error::Indivisible {
            size: if w % DOWNSCALE != 0 { w } else { h },
            factor: DOWNSCALE,
        });
    }
    let (cw, ch) = (w / DOWNSCALE, h / DOWNSCALE);
    let g = generate_gain_field(cfg, cw, ch, DOWNSCALE, rng)?;
    let noise = NoiseSpec::sample(cfg, rng);
    let v = apply_forward_model(u, &g, noise, rng)?;
    let k = generate_gain_field(cfg, cw, ch, DOWNSCALE, rng)?;
    let v_k = v.zip_with(&upsample_bilinear(&k, w, h)?, |a, b| a * b)?;
    Ok(TrainingPair { v, g, k, v_k })
}

/// Both branches of a batch recorded in one graph.
pub struct NeedNetGraph<T> {
    pub graph: Graph<T>,
    /// Parameter leaves shared by both branches, in model storage order.
    pub params: Vec<Var>,
    /// `(n, 1, c, c)` ratio prediction.
    pub k_hat: Var,
}

/// Runs the shared-weight network on `v_k` and `v` for every pair and forms
/// the guarded ratio `exp(h(v_k)) / exp(h(v))`.
pub fn neednet_forward<T: Real>(
    model: &GetNetModel,
    pairs: &[&TrainingPair],
    requires_grad: bool,
) -> Result<NeedNetGraph<T>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut graph = Graph::new();
    let params = model.param_leaves::<T>(&mut graph, requires_grad);
    let vk: Vec<&Image2D> = pairs.iter().map(|p| &p.v_k).collect();
    let v: Vec<&Image2D> = pairs.iter().map(|p| &p.v).collect();
    let x_k = graph.leaf(model.batch_tensor(&vk)?, false);
    let x = graph.leaf(model.batch_tensor(&v)?, false);
    let h_k = forward(&mut graph, model.layers(), &params, x_k)?;
    let h = forward(&mut graph, model.layers(), &params, x)?;
    let num = graph.exp(h_k)?;
    let den = graph.exp(h)?;
    let k_hat = graph.div(num, den)?;
    Ok(NeedNetGraph { graph, params, k_hat })
}

/// Stacks the pairs' `k` fields as a `(n, 1, c, c)` tensor.
pub fn target_tensor<T: Real>(pairs: &[&TrainingPair]) -> Result<Tensor4<T>> {
    let k0 = &pairs
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?
        .k;
    let (w, h) = (k0.width(), k0.height());
    let mut data = Vec::with_capacity(pairs.len() * w * h);
    for p in pairs {
        if (p.k.width(), p.k.height()) != (w, h) {
            return Err(Error::Dimensions {
                what: "target field",
                expected_w: w,
                expected_h: h,
                found_w: p.k.width(),
                found_h: p.k.height(),
            });
        }
        data.extend(p.k.values().iter().map(|&x| T::from_f64(x as f64)));
    }
    Tensor4::new([pairs.len(), 1, h, w], data)
}

/// Adds the batch MAE `mean |k_hat - k|` to the graph and returns it.
pub fn record_loss<T: Real>(nn: &mut NeedNetGraph<T>, pairs: &[&TrainingPair]) -> Result<Var> {
    let target = nn.graph.leaf(target_tensor(pairs)?, false);
    let diff = nn.graph.sub(nn.k_hat, target)?;
    let abs = nn.graph.abs(diff)?;
    nn.graph.mean(abs)
}

/// Ratio prediction for one pair, outside any training graph.
pub fn predict_ratio(model: &GetNetModel, pair: &TrainingPair) -> Result<GainField> {
    let nn = neednet_forward::<f32>(model, &[pair], false)?;
    let c = model.coarse_size();
    GainField::new(c, c, nn.graph.value(nn.k_hat)?.data().to_vec(), DOWNSCALE)
}

/// `(1/n) sum |k - k_hat|` over the coarse grid.
pub fn loss_mae(k: &GainField, k_hat: &GainField) -> Result<f64> {
    if (k.width(), k.height()) != (k_hat.width(), k_hat.height()) {
        return Err(Error::Dimensions {
            what: "loss operands",
            expected_w: k.width(),
            expected_h: k.height(),
            found_w: k_hat.width(),
            found_h: k_hat.height(),
        });
    }
    let sum: f64 = k
        .values()
        .iter()
        .zip(k_hat.values())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / k.values().len() as f64)
}
