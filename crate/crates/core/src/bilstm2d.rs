//! The BiLSTM2D token mixer.
//!
//! Every column of an `H×W×C` map is scanned by one shared vertical BiLSTM,
//! every row by one shared horizontal BiLSTM. The two results are merged
//! (concatenated or summed) and projected point-wise back to `C` channels.
//! The ablation switches drop an axis, a direction, the projection, or swap
//! the cell type. Dropping an axis or a direction doubles the hidden width so
//! the merged width is unchanged.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, Init, Linear, Module, Param};
use crate::recurrent::{BiRnn, CellKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Bi,
    Uni,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Active {
    #[default]
    Both,
    #[serde(alias = "vertical_only")]
    Vertical,
    #[serde(alias = "horizontal_only")]
    Horizontal,
}

impl FromStr for Merge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "concatenate" => Ok(Merge::Concat),
            "add" => Ok(Merge::Add),
            _ => Err(Error::Config(format!("unknown merge '{s}'"))),
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(Direction::Bi),
            "uni" => Ok(Direction::Uni),
            _ => Err(Error::Config(format!("unknown direction '{s}'"))),
        }
    }
}

impl FromStr for Active {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Active::Both),
            "vertical" | "vertical_only" => Ok(Active::Vertical),
            "horizontal" | "horizontal_only" => Ok(Active::Horizontal),
            _ => Err(Error::Config(format!("unknown active axes '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerOptions {
    pub merge: Merge,
    pub direction: Direction,
    pub active: Active,
    pub use_fusion: bool,
    pub cell: CellKind,
}

impl Default for MixerOptions {
    fn default() -> Self {
        MixerOptions {
            merge: Merge::Concat,
            direction: Direction::Bi,
            active: Active::Both,
            use_fusion: true,
            cell: CellKind::Lstm,
        }
    }
}

impl MixerOptions {
    pub fn axes(&self) -> usize {
        if self.active == Active::Both {
            2
        } else {
            1
        }
    }

    pub fn directions(&self) -> usize {
        match self.direction {
            Direction::Bi => 2,
            Direction::Uni => 1,
        }
    }

    /// Hidden width actually used by each recurrent direction.
    pub fn effective_hidden(&self, base: usize) -> usize {
        base * (3 - self.axes()) * (3 - self.directions())
    }

    /// Width of the merged recurrent features entering the projection.
    pub fn merged_width(&self, base: usize) -> usize {
        let per_axis = self.directions() * self.effective_hidden(base);
        match self.merge {
            Merge::Concat => self.axes() * per_axis,
            Merge::Add => per_axis,
        }
    }

    /// Every combination of merge, direction, active axes and cell.
    pub fn all() -> Vec<MixerOptions> {
        let mut out = Vec::new();
        for merge in [Merge::Concat, Merge::Add] {
            for direction in [Direction::Bi, Direction::Uni] {
                for active in [Active::Both, Active::Vertical, Active::Horizontal] {
                    for cell in [CellKind::Lstm, CellKind::Gru, CellKind::Rnn] {
                        for use_fusion in [true, false] {
                            out.push(MixerOptions {
                                merge,
                                direction,
                                active,
                                use_fusion,
                                cell,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm2d {
    channels: usize,
    hidden: usize,
    options: MixerOptions,
    pub rnn_v: Option<BiRnn>,
    pub rnn_h: Option<BiRnn>,
    pub fc: Option<Linear>,
}

pub type BiLstm2dLayer = BiLstm2d;

impl BiLstm2d {
    /// `hidden` is the base width `D`; variants that drop an axis or a
    /// direction double it internally.
    pub fn new(init: &mut Init, channels: usize, hidden: usize, options: MixerOptions) -> Result<Self> {
        validate(channels, hidden, &options)?;
        let eff = options.effective_hidden(hidden);
        let bi = options.direction == Direction::Bi;
        let rnn_v = (options.active != Active::Horizontal).then(|| BiRnn::new(init, options.cell, channels, eff, bi));
        let rnn_h = (options.active != Active::Vertical).then(|| BiRnn::new(init, options.cell, channels, eff, bi));
        let merged = options.merged_width(hidden);
        let fc = options.use_fusion.then(|| Linear::new(init, merged, channels, true));
        let layer = BiLstm2d {
            channels,
            hidden,
            options,
            rnn_v,
            rnn_h,
            fc,
        };
        layer.check_widths()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn options(&self) -> &MixerOptions {
        &self.options
    }

    /// Input width of the projection as implied by the options.
    pub fn fc_input_width(&self) -> usize {
        self.options.merged_width(self.hidden)
    }

    /// Checks the option arithmetic against the widths of the built parts.
    fn check_widths(&self) -> Result<()> {
        let widths: Vec<usize> = [&self.rnn_v, &self.rnn_h]
            .into_iter()
            .flatten()
            .map(BiRnn::output_width)
            .collect();
        let merged = match self.options.merge {
            Merge::Concat => widths.iter().sum(),
            Merge::Add => {
                if widths.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::Config("merge=add needs equal axis widths".into()));
                }
                widths[0]
            }
        };
        if merged != self.fc_input_width() {
            return Err(Error::Config(format!(
                "merged width {merged} disagrees with fusion input width {}",
                self.fc_input_width()
            )));
        }
        let out = match &self.fc {
            Some(fc) if fc.fan_in() != merged => {
                return Err(Error::Config(format!(
                    "fusion layer expects width {}, merged features are {merged}",
                    fc.fan_in()
                )))
            }
            Some(fc) => fc.fan_out(),
            None => merged,
        };
        if out != self.channels {
            return Err(Error::Config(format!(
                "mixer output width {out} differs from channels {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `x: [B, H, W, C]` to `[B, H, W, C]`.
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "bilstm2d",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);

        let vertical = match &self.rnn_v {
            Some(rnn) => {
                let cols = tape.permute(x, &[0, 2, 1, 3])?;
                let cols = tape.reshape(&cols, &[b * w, h, c])?;
                let out = rnn.forward(tape, &cols)?;
                let width = out.shape()[2];
                let out = tape.reshape(&out, &[b, w, h, width])?;
                Some(tape.permute(&out, &[0, 2, 1, 3])?)
            }
            None => None,
        };
        let horizontal = match &self.rnn_h {
            Some(rnn) => {
                let rows = tape.reshape(x, &[b * h, w, c])?;
                let out = rnn.forward(tape, &rows)?;
                let width = out.shape()[2];
                Some(tape.reshape(&out, &[b, h, w, width])?)
            }
            None => None,
        };

        let merged = match (vertical, horizontal) {
            (Some(v), Some(hz)) => match self.options.merge {
                Merge::Concat => tape.concat_last(&v, &hz)?,
                Merge::Add => tape.add(&v, &hz)?,
            },
            (Some(one), None) | (None, Some(one)) => one,
            (None, None) => unreachable!("validated: at least one axis"),
        };
        match &self.fc {
            Some(fc) => fc.forward(tape, &merged),
            None => Ok(merged),
        }
    }
}

/// Rejects option sets that cannot build a layer of this size.
pub fn validate(channels: usize, hidden: usize, options: &MixerOptions) -> Result<()> {
    if channels == 0 || hidden == 0 {
        return Err(Error::Config("channels and hidden width must be positive".into()));
    }
    if options.merge == Merge::Add && options.active != Active::Both {
        return Err(Error::Config("merge=add needs both axes active".into()));
    }
    if !options.use_fusion && options.merged_width(hidden) != channels {
        return Err(Error::Config(format!(
            "without fusion the merged width {} must equal channels {channels}",
            options.merged_width(hidden)
        )));
    }
    Ok(())
}

impl Module for BiLstm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(r) = &self.rnn_v {
            r.visit(&join(prefix, "rnn_v"), f);
        }
        if let Some(r) = &self.rnn_h {
            r.visit(&join(prefix, "rnn_h"), f);
        }
        if let Some(fc) = &self.fc {
            fc.visit(&join(prefix, "fc"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(r) = &mut self.rnn_v {
            r.visit_mut(&join(prefix, "rnn_v"), f);
        }
        if let Some(r) = &mut self.rnn_h {
            r.visit_mut(&join(prefix, "rnn_h"), f);
        }
        if let Some(fc) = &mut self.fc {
            fc.visit_mut(&join(prefix, "fc"), f);
        }
    }
}

/// Plain-tensor forward for a single map `x: [H, W, C]` or a batch
/// `[B, H, W, C]`.
pub fn bilstm2d_forward(x: &Tensor, layer: &BiLstm2d) -> Result<Tensor> {
    let single = x.rank() == 3;
    let batched = if single {
        let s = x.shape();
        x.reshape(&[1, s[0], s[1], s[2]])?
    } else {
        x.clone()
    };
    let mut tape = Tape::no_grad();
    let out = layer.forward(&mut tape, &Var::constant(batched))?.into_value();
    if single {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out)
    }
}

/// `|∂(Σ_c out[0, h/2, w/2, c]) / ∂x[0, i, j, :]|` summed over channels, for
/// a map `f` from `[1, H, W, C]` to `[1, H', W', C']`. Returns `[H, W]`.
pub fn center_gradient_support<F>(input: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let out = f(&mut tape, &x)?;
    let s = out.shape().to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidShape {
            op: "center_gradient_support",
            detail: format!("expected [1, H, W, C] output, got {s:?}"),
        });
    }
    let (oh, ow, oc) = (s[1], s[2], s[3]);
    let center = (oh / 2, ow / 2);
    let mask = Tensor::from_fn(&s, |i| {
        let (r, col) = ((i / oc) / ow, (i / oc) % ow);
        if (r, col) == center {
            1.0
        } else {
            0.0
        }
    });
    let loss = tape.weighted_sum(&out, &mask)?;
    let grad = tape.backward(&loss)?.wrt(&x).expect("input leaf");
    let (h, w, c) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let mut support = vec![0.0; h * w];
    for (pos, chunk) in grad.data().chunks_exact(c).enumerate() {
        support[pos] = chunk.iter().map(|v| v.abs()).sum();
    }
    Tensor::new(&[h, w], support)
}

/// True when the gradient of the center output of one layer vanishes exactly
/// at every position off the center row and column.
pub fn cross_support_check(layer: &BiLstm2d, h: usize, w: usize, c: usize) -> Result<bool> {
    if c != layer.channels() {
        return Err(Error::ShapeMismatch {
            op: "cross_support_check",
            lhs: vec![h, w, c],
            rhs: vec![layer.channels()],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let x = Tensor::randn(&[1, h, w, c], &mut rng);
    let support = center_gradient_support(&x, |tape, v| layer.forward(tape, v))?;
    Ok(off_cross_is_zero(&support))
}

pub(crate) fn off_cross_is_zero(support: &Tensor) -> bool {
    let (h, w) = (support.shape()[0], support.shape()[1]);
    let (ch, cw) = (h / 2, w / 2);
    (0..h).all(|i| (0..w).all(|j| i == ch || j == cw || support.at(&[i, j]) == 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use crate::tensor;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shape_is_preserved_with_quarter_hidden() {
        let layer = BiLstm2d::new(&mut Init::new(1), 16, 4, MixerOptions::default()).unwrap();
        assert_eq!(layer.fc_input_width(), 16);
        let y = bilstm2d_forward(&rand_input(&[3, 5, 16], 2), &layer).unwrap();
        assert_eq!(y.shape(), &[3, 5, 16]);
    }

    #[test]
    fn zero_recurrence_and_fc_give_bias() {
        let mut init = Init::new(0);
        let mut layer = BiLstm2d::new(&mut init, 8, 2, MixerOptions::default()).unwrap();
        layer.visit_mut("", &mut |_, p| p.value = Tensor::zeros(p.value.shape()));
        let beta = Tensor::from_fn(&[8], |i| i as f64 - 3.5);
        layer.fc.as_mut().unwrap().bias.as_mut().unwrap().value = beta.clone();
        let y = bilstm2d_forward(&rand_input(&[3, 4, 8], 3), &layer).unwrap();
        for row in y.data().chunks(8) {
            assert_eq!(row, beta.data());
        }
    }

    #[test]
    fn every_option_combination_has_consistent_widths() {
        let x = rand_input(&[1, 2, 3, 8], 4);
        for opts in MixerOptions::all() {
            match BiLstm2d::new(&mut Init::new(5), 8, 2, opts) {
                Ok(layer) => {
                    let y = bilstm2d_forward(&x, &layer).unwrap();
                    assert_eq!(y.shape(), x.shape(), "{opts:?}");
                    if opts.merge == Merge::Concat && opts.active == Active::Both && opts.direction == Direction::Bi {
                        assert_eq!(layer.fc_input_width(), 4 * 2);
                    }
                    let widths: usize = [&layer.rnn_v, &layer.rnn_h]
                        .into_iter()
                        .flatten()
                        .map(|r| r.output_width())
                        .sum();
                    let expect = if opts.merge == Merge::Add { widths / 2 } else { widths };
                    assert_eq!(layer.fc_input_width(), expect);
                }
                Err(_) => {
                    let add_single = opts.merge == Merge::Add && opts.active != Active::Both;
                    let bad_nofusion = !opts.use_fusion && opts.merged_width(2) != 8;
                    assert!(add_single || bad_nofusion, "{opts:?} rejected unexpectedly");
                }
            }
        }
    }

    #[test]
    fn single_axis_and_unidirectional_double_hidden() {
        let mut init = Init::new(6);
        let v = MixerOptions {
            active: Active::Vertical,
            ..Default::default()
        };
        let layer = BiLstm2d::new(&mut init, 16, 4, v).unwrap();
        assert_eq!(layer.rnn_v.as_ref().unwrap().hidden_size(), 8);
        assert!(layer.rnn_h.is_none());
        let uni = MixerOptions {
            direction: Direction::Uni,
            ..Default::default()
        };
        let layer = BiLstm2d::new(&mut init, 16, 4, uni).unwrap();
        assert_eq!(layer.rnn_h.as_ref().unwrap().hidden_size(), 8);
        assert!(layer.rnn_h.as_ref().unwrap().backward.is_none());
        assert_eq!(layer.fc_input_width(), 16);
    }

    #[test]
    fn vertical_only_is_column_local() {
        let opts = MixerOptions {
            active: Active::Vertical,
            ..Default::default()
        };
        let layer = BiLstm2d::new(&mut Init::new(7), 8, 2, opts).unwrap();
        let x = rand_input(&[4, 5, 8], 8);
        let y = bilstm2d_forward(&x, &layer).unwrap();
        let mut x2 = x.clone();
        // perturb column 3 only
        for i in 0..4 {
            for c in 0..8 {
                x2.data_mut()[(i * 5 + 3) * 8 + c] += 1.0;
            }
        }
        let y2 = bilstm2d_forward(&x2, &layer).unwrap();
        for j in 0..5 {
            let same = (0..4).all(|i| (0..8).all(|c| y.at(&[i, j, c]) == y2.at(&[i, j, c])));
            assert_eq!(same, j != 3, "column {j}");
        }
    }

    #[test]
    fn add_merge_equals_concat_with_duplicated_fc() {
        let mut init = Init::new(9);
        let add = BiLstm2d::new(
            &mut init,
            8,
            2,
            MixerOptions {
                merge: Merge::Add,
                ..Default::default()
            },
        )
        .unwrap();
        let mut concat = BiLstm2d::new(&mut init, 8, 2, MixerOptions::default()).unwrap();
        concat.rnn_v = add.rnn_v.clone();
        concat.rnn_h = add.rnn_h.clone();
        let fa = add.fc.as_ref().unwrap();
        let fc = concat.fc.as_mut().unwrap();
        fc.weight.value = tensor::concat_last(&fa.weight.value, &fa.weight.value).unwrap();
        fc.bias = fa.bias.clone();
        let x = rand_input(&[3, 3, 8], 10);
        let a = bilstm2d_forward(&x, &add).unwrap();
        let b = bilstm2d_forward(&x, &concat).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let layer = BiLstm2d::new(&mut Init::new(0), 8, 2, MixerOptions::default()).unwrap();
        assert!(bilstm2d_forward(&Tensor::zeros(&[2, 2, 4]), &layer).is_err());
        assert!(cross_support_check(&layer, 5, 5, 4).is_err());
    }

    #[test]
    fn single_layer_support_is_the_center_cross() {
        let layer = BiLstm2d::new(&mut Init::new(11), 8, 2, MixerOptions::default()).unwrap();
        assert!(cross_support_check(&layer, 5, 5, 8).unwrap());

        let vert = BiLstm2d::new(
            &mut Init::new(12),
            8,
            2,
            MixerOptions {
                active: Active::Vertical,
                ..Default::default()
            },
        )
        .unwrap();
        let x = rand_input(&[1, 5, 5, 8], 13);
        let s = center_gradient_support(&x, |t, v| vert.forward(t, v)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(s.at(&[i, j]) > 0.0, j == 2, "({i},{j})");
            }
        }
    }

    #[test]
    fn two_stacked_layers_widen_the_cross() {
        let mut init = Init::new(14);
        let a = BiLstm2d::new(&mut init, 8, 2, MixerOptions::default()).unwrap();
        let b = BiLstm2d::new(&mut init, 8, 2, MixerOptions::default()).unwrap();
        let x = rand_input(&[1, 5, 5, 8], 15);
        let s = center_gradient_support(&x, |t, v| {
            let y = a.forward(t, v)?;
            b.forward(t, &y)
        })
        .unwrap();
        assert!(!off_cross_is_zero(&s));
        assert!(s.at(&[0, 0]) > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for opts in [
            MixerOptions::default(),
            MixerOptions {
                merge: Merge::Add,
                cell: CellKind::Gru,
                ..Default::default()
            },
        ] {
            let mut layer = BiLstm2d::new(&mut Init::new(16), 8, 2, opts).unwrap();
            let x = rand_input(&[1, 3, 3, 8], 17);
            let weights = rand_input(&[1, 3, 3, 8], 18);
            let report = check_module(
                &mut layer,
                &x,
                |m, tape, v| {
                    let y = m.forward(tape, v)?;
                    tape.weighted_sum(&y, &weights)
                },
                1e-5,
                None,
                0,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }
}
