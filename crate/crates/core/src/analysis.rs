//! Parameter and FLOP accounting, and effective receptive fields.
//!
//! FLOPs follow the usual vision convention: one multiply-accumulate counts
//! as one FLOP. Matmuls count `in·out` MACs plus `out` bias adds; recurrent
//! gates additionally count one op per activation, product and sum scalar.
//! LayerNorm, GELU, residual adds and pooling are not counted.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::bilstm2d::Merge;
use crate::error::{Error, Result};
use crate::model::{Mixer, Model};
use crate::params::{Linear, Module};
use crate::recurrent::{BiRnn, CellKind};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub model: String,
    pub resolution: Option<[usize; 2]>,
    pub params: u64,
    pub flops: Option<u64>,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Coarse module a parameter path belongs to, e.g. `stage2.mixer`.
fn module_key(path: &str) -> String {
    let parts: Vec<&str> = path.split('.').collect();
    match parts.as_slice() {
        [stage, "downsample", ..] if stage.starts_with("stage") => format!("{stage}.downsample"),
        [stage, _block, part, ..] if stage.starts_with("stage") => {
            let part = if part.starts_with("bilstm") { "mixer" } else { part };
            format!("{stage}.{part}")
        }
        ["pos_embed"] => "pos_embed".into(),
        _ => "classifier".into(),
    }
}

fn param_breakdown(m: &Model) -> BTreeMap<String, CostEntry> {
    let mut out: BTreeMap<String, CostEntry> = BTreeMap::new();
    m.visit("", &mut |name, p| {
        let key = module_key(name);
        let e = out.entry(key.clone()).or_insert_with(|| CostEntry {
            module: key,
            ..Default::default()
        });
        e.params += p.numel() as u64;
    });
    out
}

/// Exact count of trainable scalars, broken down by stage and sub-module.
pub fn count_params(m: &Model) -> CostReport {
    let breakdown: Vec<CostEntry> = param_breakdown(m).into_values().collect();
    CostReport {
        model: m.config().name.clone(),
        resolution: None,
        params: breakdown.iter().map(|e| e.params).sum(),
        flops: None,
        breakdown,
    }
}

fn linear_flops(l: &Linear) -> u64 {
    let (i, o) = (l.fan_in() as u64, l.fan_out() as u64);
    i * o + if l.bias.is_some() { o } else { 0 }
}

/// Ops for one time step of one recurrent direction.
pub fn cell_step_flops(kind: CellKind, input: usize, hidden: usize) -> u64 {
    let (c, d) = (input as u64, hidden as u64);
    let g = kind.gates() as u64;
    let matmul = g * d * c + g * d * d;
    let bias = 2 * g * d;
    let elementwise = match kind {
        // 4 gate activations, tanh(c), 3 products, 1 sum
        CellKind::Lstm => 9 * d,
        // 3 gate activations, r·(…), (1−z), (1−z)·n, z·h, sum
        CellKind::Gru => 8 * d,
        CellKind::Rnn => d,
    };
    matmul + bias + elementwise
}

fn birnn_sequence_flops(rnn: &BiRnn, steps: usize) -> u64 {
    let per = cell_step_flops(rnn.kind(), rnn.input_size(), rnn.hidden_size());
    per * steps as u64 * rnn.directions() as u64
}

/// MAC-convention FLOPs of one forward pass on a `height×width` input.
pub fn count_flops(m: &Model, height: usize, width: usize) -> Result<CostReport> {
    let stride = m.config().total_stride();
    if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) || height == 0 || width == 0 {
        return Err(Error::Resolution {
            height,
            width,
            divisor: stride,
        });
    }
    let mut entries = param_breakdown(m);
    let mut add = |key: String, flops: u64| {
        entries
            .entry(key.clone())
            .or_insert_with(|| CostEntry {
                module: key,
                ..Default::default()
            })
            .flops += flops;
    };
    let (mut h, mut w) = (height, width);
    for (si, stage) in m.stages.iter().enumerate() {
        let s = si + 1;
        let k = stage.downsample.kernel();
        h /= k;
        w /= k;
        let tokens = (h * w) as u64;
        add(
            format!("stage{s}.downsample"),
            tokens * linear_flops(&stage.downsample.proj),
        );
        for blk in &stage.blocks {
            let mixer = match &blk.mixer {
                Mixer::TwoD(l) => {
                    let mut f = 0;
                    if let Some(r) = &l.rnn_v {
                        f += w as u64 * birnn_sequence_flops(r, h);
                    }
                    if let Some(r) = &l.rnn_h {
                        f += h as u64 * birnn_sequence_flops(r, w);
                    }
                    if l.options().merge == Merge::Add && l.rnn_v.is_some() && l.rnn_h.is_some() {
                        f += tokens * l.fc_input_width() as u64;
                    }
                    if let Some(fc) = &l.fc {
                        f += tokens * linear_flops(fc);
                    }
                    f
                }
                Mixer::Vanilla(r) => birnn_sequence_flops(r, h * w),
            };
            add(format!("stage{s}.mixer"), mixer);
            add(
                format!("stage{s}.mlp"),
                tokens * (linear_flops(&blk.mlp.fc1) + linear_flops(&blk.mlp.fc2)),
            );
        }
    }
    add("classifier".into(), linear_flops(&m.head));
    let breakdown: Vec<CostEntry> = entries.into_values().collect();
    Ok(CostReport {
        model: m.config().name.clone(),
        resolution: Some([height, width]),
        params: breakdown.iter().map(|e| e.params).sum(),
        flops: Some(breakdown.iter().map(|e| e.flops).sum()),
        breakdown,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ErfMap {
    /// `[H, W]` scores in `[0, 1]` after rescaling.
    #[serde(skip)]
    pub scores: Tensor,
    pub model: String,
    pub block: usize,
    pub resolution: [usize; 2],
    pub n_images: usize,
    /// Largest `log10(ΣP + 1)` before rescaling.
    pub raw_max: f64,
}

/// Standard-normal images `[n, h, w, c]` from `seed`.
pub fn random_images(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, h, w, c], &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `ReLU(∂ Σ_c O[0, h'/2, w'/2, c] / ∂I)` summed over channels for a single
/// image `[1, H, W, C]`, where `O` is the output of block `block` (1-based).
fn positive_contribution(m: &Model, image: Tensor, block: usize) -> Result<Vec<f64>> {
    let (h, w, c) = (image.shape()[1], image.shape()[2], image.shape()[3]);
    let mut tape = Tape::new();
    let x = tape.input(image);
    let out = m.forward_features(&mut tape, &x, Some(block), None)?;
    let s = out.shape().to_vec();
    let (oh, ow, oc) = (s[1], s[2], s[3]);
    let center = (oh / 2) * ow + ow / 2;
    let mask = Tensor::from_fn(&s, |i| if i / oc == center { 1.0 } else { 0.0 });
    let loss = tape.weighted_sum(&out, &mask)?;
    let grads = tape.backward(&loss)?;
    drop(tape);
    let g = grads.wrt(&x).expect("input leaf");
    let mut p = vec![0.0; h * w];
    for (pos, chunk) in g.data().chunks_exact(c).enumerate() {
        p[pos] = chunk.iter().map(|v| v.max(0.0)).sum();
    }
    Ok(p)
}

fn per_image(m: &Model, images: &Tensor, block: usize) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let one = |i: usize| -> Result<Vec<f64>> {
        let img = crate::tensor::select(images, 0, i)?;
        let mut s = vec![1];
        s.extend_from_slice(img.shape());
        positive_contribution(m, img.reshape(&s)?, block)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(one).collect()
    }
}

/// `log10(Σ_images Σ_channels P + 1)` as `[H, W]`, before rescaling. Per-image
/// maps are reduced pairwise in image order, so the result does not depend on
/// the thread count.
pub fn erf_raw(m: &Model, images: &Tensor, block: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::InvalidShape {
            op: "erf",
            detail: format!("expected [n, H, W, C] images, got {s:?}"),
        });
    }
    if !images.is_finite() {
        return Err(Error::InvalidShape {
            op: "erf",
            detail: "images contain non-finite values".into(),
        });
    }
    if block == 0 || block > m.depth() {
        return Err(Error::BlockIndex {
            index: block,
            depth: m.depth(),
        });
    }
    let maps = per_image(m, images, block)?;
    let (h, w) = (s[1], s[2]);
    let mut column = vec![0.0; maps.len()];
    let data = (0..h * w)
        .map(|pos| {
            for (slot, map) in column.iter_mut().zip(&maps) {
                *slot = map[pos];
            }
            (pairwise_sum(&column) + 1.0).log10()
        })
        .collect();
    Tensor::new(&[h, w], data)
}

/// Min-max rescale to `[0, 1]`. With `shared_max`, maps from several models
/// share one upper bound (the minimum is still per map). A constant map
/// becomes all zeros.
pub fn rescale(raw: &Tensor, shared_max: Option<f64>) -> Tensor {
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shared_max.unwrap_or_else(|| raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if hi <= lo {
        return Tensor::zeros(raw.shape());
    }
    raw.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

pub fn erf_compute(m: &Model, images: &Tensor, block: usize) -> Result<ErfMap> {
    let raw = erf_raw(m, images, block)?;
    let raw_max = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = images.shape();
    Ok(ErfMap {
        scores: rescale(&raw, None),
        model: m.config().name.clone(),
        block,
        resolution: [s[1], s[2]],
        n_images: s[0],
        raw_max,
    })
}

/// Pixel rows and columns covered by the center token of block `block`.
pub fn center_bands(m: &Model, block: usize, height: usize, width: usize) -> Result<(Range<usize>, Range<usize>)> {
    let s = m.block_stride(block)?;
    let (ch, cw) = ((height / s) / 2, (width / s) / 2);
    Ok((ch * s..(ch + 1) * s, cw * s..(cw + 1) * s))
}

/// Mean score inside the center cross over the mean score outside it.
pub fn cross_mass_ratio(scores: &Tensor, rows: &Range<usize>, cols: &Range<usize>) -> f64 {
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for i in 0..h {
        for j in 0..w {
            let v = scores.at(&[i, j]);
            if rows.contains(&i) || cols.contains(&j) {
                on.push(v);
            } else {
                off.push(v);
            }
        }
    }
    let mean = |v: &[f64]| pairwise_sum(v) / v.len().max(1) as f64;
    mean(&on) / mean(&off)
}

/// True when every score outside the given row and column bands is exactly 0.
pub fn confined_to_cross(scores: &Tensor, rows: &Range<usize>, cols: &Range<usize>) -> bool {
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    (0..h).all(|i| (0..w).all(|j| rows.contains(&i) || cols.contains(&j) || scores.at(&[i, j]) == 0.0))
}

/// Binary PGM (P5), one byte per pixel, `round(255·S)`.
pub fn pgm_bytes(scores: &Tensor) -> Result<Vec<u8>> {
    if scores.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "pgm",
            detail: format!("expected [H, W], got {:?}", scores.shape()),
        });
    }
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(scores.data().iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

pub fn erf_render(map: &ErfMap, path: &Path) -> Result<()> {
    let bytes = pgm_bytes(&map.scores)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
