//! wasm-bindgen exports for the static demo page in `www/`. Each export is a
//! thin wrapper over a plain function so the logic is testable on the host.

use serde_json::json;
use wasm_bindgen::prelude::*;

use seqkit::analysis::{center_bands, count_flops, count_params, erf_compute, random_images};
use seqkit::bilstm2d::{center_gradient_support, BiLstm2d, MixerOptions};
use seqkit::model::{Model, ModelConfig, OptionOverrides};
use seqkit::Init;

/// Mixer choices as the page sends them; empty strings keep the preset value.
#[derive(Clone, Debug, Default)]
pub struct Choices {
    pub merge: String,
    pub direction: String,
    pub active: String,
    pub cell: String,
}

impl Choices {
    fn overrides(&self) -> Result<OptionOverrides, String> {
        fn pick<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String>
        where
            T::Err: std::fmt::Display,
        {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e: T::Err| e.to_string())
            }
        }
        Ok(OptionOverrides {
            merge: pick(&self.merge)?,
            direction: pick(&self.direction)?,
            active: pick(&self.active)?,
            cell_kind: pick(&self.cell)?,
            ..Default::default()
        })
    }

    fn mixer(&self) -> Result<MixerOptions, String> {
        let mut o = seqkit::model::ModelOptions::default();
        self.overrides()?.apply(&mut o);
        Ok(o.mixer())
    }
}

fn config(preset: &str, choices: &Choices) -> Result<ModelConfig, String> {
    let mut cfg = ModelConfig::preset(preset).map_err(|e| e.to_string())?;
    choices.overrides()?.apply(&mut cfg.options);
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Parameter and FLOP totals with the per-module breakdown, as JSON.
pub fn cost_json(preset: &str, choices: &Choices, height: usize, width: usize) -> Result<String, String> {
    let model = Model::new(&config(preset, choices)?, 0).map_err(|e| e.to_string())?;
    let params = count_params(&model);
    let flops = count_flops(&model, height, width).map_err(|e| e.to_string())?;
    let v = json!({
        "model": model.config().name,
        "depth": model.depth(),
        "params": params.params,
        "flops": flops.flops,
        "resolution": [height, width],
        "breakdown": flops.breakdown,
    });
    Ok(v.to_string())
}

/// ERF scores in `[0, 1]`, row-major `[height, width]`, followed by the
/// center row band and column band as `[r0, r1, c0, c1]`.
pub fn erf_scores(
    preset: &str,
    choices: &Choices,
    block: usize,
    size: usize,
    images: usize,
    seed: u64,
) -> Result<(Vec<f64>, [usize; 4]), String> {
    let cfg = config(preset, choices)?;
    let model = Model::new(&cfg, seed).map_err(|e| e.to_string())?;
    let x = random_images(images.max(1), size, size, cfg.in_channels, seed);
    let map = erf_compute(&model, &x, block).map_err(|e| e.to_string())?;
    let (r, c) = center_bands(&model, block, size, size).map_err(|e| e.to_string())?;
    Ok((map.scores.to_vec(), [r.start, r.end, c.start, c.end]))
}

/// 1 where the center output of a single layer depends on the input pixel.
pub fn cross_support(
    choices: &Choices,
    height: usize,
    width: usize,
    channels: usize,
    hidden: usize,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let layer = BiLstm2d::new(&mut Init::new(seed), channels, hidden, choices.mixer()?).map_err(|e| e.to_string())?;
    let x = random_images(1, height, width, channels, seed);
    let support = center_gradient_support(&x, |tape, v| layer.forward(tape, v)).map_err(|e| e.to_string())?;
    Ok(support.data().iter().map(|&v| u8::from(v != 0.0)).collect())
}

fn choices(merge: String, direction: String, active: String, cell: String) -> Choices {
    Choices {
        merge,
        direction,
        active,
        cell,
    }
}

#[wasm_bindgen(js_name = cost)]
pub fn cost_js(
    preset: &str,
    merge: String,
    direction: String,
    active: String,
    cell: String,
    height: usize,
    width: usize,
) -> Result<String, JsValue> {
    cost_json(preset, &choices(merge, direction, active, cell), height, width).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct ErfResult {
    scores: Vec<f64>,
    bands: Vec<u32>,
}

#[wasm_bindgen]
impl ErfResult {
    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }

    /// `[row_start, row_end, col_start, col_end]`, end exclusive.
    #[wasm_bindgen(getter)]
    pub fn bands(&self) -> Vec<u32> {
        self.bands.clone()
    }
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = erf)]
pub fn erf_js(
    preset: &str,
    merge: String,
    direction: String,
    active: String,
    cell: String,
    block: usize,
    size: usize,
    images: usize,
    seed: u32,
) -> Result<ErfResult, JsValue> {
    let (scores, b) = erf_scores(
        preset,
        &choices(merge, direction, active, cell),
        block,
        size,
        images,
        seed as u64,
    )
    .map_err(|e| JsValue::from_str(&e))?;
    Ok(ErfResult {
        scores,
        bands: b.iter().map(|&v| v as u32).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = crossSupport)]
pub fn cross_support_js(
    merge: String,
    direction: String,
    active: String,
    cell: String,
    height: usize,
    width: usize,
    channels: usize,
    hidden: usize,
    seed: u32,
) -> Result<Vec<u8>, JsValue> {
    cross_support(
        &choices(merge, direction, active, cell),
        height,
        width,
        channels,
        hidden,
        seed as u64,
    )
    .map_err(|e| JsValue::from_str(&e))
}
