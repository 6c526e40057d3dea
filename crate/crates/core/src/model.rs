//! Patch embedding, Sequencer blocks, staged model builders and presets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::bilstm2d::{Active, BiLstm2d, Direction, Merge, MixerOptions};
use crate::error::{Error, Result};
use crate::params::{join, Init, LayerNorm, Linear, Module, Param};
use crate::recurrent::{BiRnn, CellKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Downsample {
    PatchEmbed { kernel: usize },
    PointwiseLinear,
}

impl Downsample {
    pub fn kernel(&self) -> usize {
        match self {
            Downsample::PatchEmbed { kernel } => *kernel,
            Downsample::PointwiseLinear => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Sequencer2d,
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub downsample: Downsample,
    pub dim: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    #[serde(default)]
    pub block: BlockKind,
}

impl StageConfig {
    fn new(downsample: Downsample, dim: usize, hidden: usize, depth: usize, block: BlockKind) -> Self {
        StageConfig {
            downsample,
            dim,
            hidden,
            mlp_ratio: 3,
            depth,
            block,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub merge: Merge,
    pub direction: Direction,
    pub active: Active,
    pub cell_kind: CellKind,
    pub use_fusion: bool,
    pub use_pe: bool,
    pub drop_path: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            merge: Merge::Concat,
            direction: Direction::Bi,
            active: Active::Both,
            cell_kind: CellKind::Lstm,
            use_fusion: true,
            use_pe: false,
            drop_path: 0.0,
        }
    }
}

impl ModelOptions {
    pub fn mixer(&self) -> MixerOptions {
        MixerOptions {
            merge: self.merge,
            direction: self.direction,
            active: self.active,
            use_fusion: self.use_fusion,
            cell: self.cell_kind,
        }
    }
}

/// Partial option set layered over a preset (config files and CLI flags).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionOverrides {
    pub merge: Option<Merge>,
    pub direction: Option<Direction>,
    pub active: Option<Active>,
    pub cell_kind: Option<CellKind>,
    pub use_fusion: Option<bool>,
    pub use_pe: Option<bool>,
    pub drop_path: Option<f64>,
}

impl OptionOverrides {
    pub fn apply(&self, o: &mut ModelOptions) {
        if let Some(v) = self.merge {
            o.merge = v;
        }
        if let Some(v) = self.direction {
            o.direction = v;
        }
        if let Some(v) = self.active {
            o.active = v;
        }
        if let Some(v) = self.cell_kind {
            o.cell_kind = v;
        }
        if let Some(v) = self.use_fusion {
            o.use_fusion = v;
        }
        if let Some(v) = self.use_pe {
            o.use_pe = v;
        }
        if let Some(v) = self.drop_path {
            o.drop_path = v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    /// Training resolution; only the positional table depends on it.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub options: ModelOptions,
}

pub const PRESETS: &[&str] = &[
    "sequencer2d_s",
    "sequencer2d_m",
    "sequencer2d_l",
    "sequencer2d_l_x1.3",
    "vsequencer_s",
    "vsequencer_s_h",
    "vsequencer_s_pe",
    "mini",
];

fn normalize_preset(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('-', "_")
}

fn sequencer2d(name: &str, depths: [usize; 4], widths: [usize; 2], drop_path: f64) -> ModelConfig {
    use Downsample::*;
    let (lo, hi) = (widths[0], widths[1]);
    let b = BlockKind::Sequencer2d;
    ModelConfig {
        name: name.into(),
        in_channels: 3,
        image_size: [224, 224],
        num_classes: 1000,
        stages: vec![
            StageConfig::new(PatchEmbed { kernel: 7 }, lo, lo / 4, depths[0], b),
            StageConfig::new(PatchEmbed { kernel: 2 }, hi, hi / 4, depths[1], b),
            StageConfig::new(PointwiseLinear, hi, hi / 4, depths[2], b),
            StageConfig::new(PointwiseLinear, hi, hi / 4, depths[3], b),
        ],
        options: ModelOptions {
            drop_path,
            ..Default::default()
        },
    }
}

fn vsequencer(name: &str, hierarchical: bool, use_pe: bool) -> ModelConfig {
    use Downsample::*;
    let v = BlockKind::Vanilla;
    let (first, second) = if hierarchical {
        (
            StageConfig::new(PatchEmbed { kernel: 7 }, 192, 96, 4, v),
            StageConfig::new(PatchEmbed { kernel: 2 }, 384, 192, 3, v),
        )
    } else {
        (
            StageConfig::new(PatchEmbed { kernel: 14 }, 384, 192, 4, v),
            StageConfig::new(PointwiseLinear, 384, 192, 3, v),
        )
    };
    ModelConfig {
        name: name.into(),
        in_channels: 3,
        image_size: [224, 224],
        num_classes: 1000,
        stages: vec![
            first,
            second,
            StageConfig::new(PointwiseLinear, 384, 192, 8, v),
            StageConfig::new(PointwiseLinear, 384, 192, 3, v),
        ],
        options: ModelOptions {
            drop_path: 0.1,
            use_pe,
            ..Default::default()
        },
    }
}

impl ModelConfig {
    /// Named configurations; `-` and `_` are interchangeable.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let key = normalize_preset(name);
        let cfg = match key.as_str() {
            "sequencer2d_s" => sequencer2d(&key, [4, 3, 8, 3], [192, 384], 0.1),
            "sequencer2d_m" => sequencer2d(&key, [4, 3, 14, 3], [192, 384], 0.2),
            "sequencer2d_l" => sequencer2d(&key, [8, 8, 16, 4], [192, 384], 0.4),
            "sequencer2d_l_x1.3" | "sequencer2d_lx1.3" => {
                sequencer2d("sequencer2d_l_x1.3", [8, 8, 16, 4], [256, 512], 0.4)
            }
            "vsequencer_s" => vsequencer(&key, false, false),
            "vsequencer_s_h" => vsequencer(&key, true, false),
            "vsequencer_s_pe" => vsequencer(&key, false, true),
            "mini" => ModelConfig {
                name: key.clone(),
                in_channels: 3,
                image_size: [28, 28],
                num_classes: 2,
                stages: vec![
                    StageConfig::new(Downsample::PatchEmbed { kernel: 7 }, 16, 4, 1, BlockKind::Sequencer2d),
                    StageConfig::new(Downsample::PatchEmbed { kernel: 2 }, 16, 4, 1, BlockKind::Sequencer2d),
                ],
                options: ModelOptions::default(),
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{name}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses `{preset | stages, num_classes?, image_size?, in_channels?, options?}`.
    pub fn from_json(text: &str) -> Result<ModelConfig> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            preset: Option<String>,
            name: Option<String>,
            stages: Option<Vec<StageConfig>>,
            num_classes: Option<usize>,
            in_channels: Option<usize>,
            image_size: Option<[usize; 2]>,
            #[serde(default)]
            options: OptionOverrides,
        }
        let f: File = serde_json::from_str(text)?;
        let mut cfg = match (f.preset, f.stages) {
            (Some(p), None) => ModelConfig::preset(&p)?,
            (None, Some(stages)) => ModelConfig {
                name: "custom".into(),
                in_channels: 3,
                image_size: [224, 224],
                num_classes: 1000,
                stages,
                options: ModelOptions::default(),
            },
            (Some(_), Some(_)) => return Err(Error::Config("config sets both 'preset' and 'stages'".into())),
            (None, None) => return Err(Error::Config("config needs 'preset' or 'stages'".into())),
        };
        if let Some(n) = f.name {
            cfg.name = n;
        }
        if let Some(k) = f.num_classes {
            cfg.num_classes = k;
        }
        if let Some(c) = f.in_channels {
            cfg.in_channels = c;
        }
        if let Some(s) = f.image_size {
            cfg.image_size = s;
        }
        f.options.apply(&mut cfg.options);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Product of all downsampling strides; input sides must be multiples.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.downsample.kernel()).product()
    }

    /// Token grid after stage 1 at the training resolution.
    pub fn pe_grid(&self) -> (usize, usize) {
        let k = self.stages[0].downsample.kernel();
        (self.image_size[0] / k, self.image_size[1] / k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return bad("num_classes and in_channels must be positive".into());
        }
        let p = self.options.drop_path;
        if !(0.0..1.0).contains(&p) {
            return bad(format!("drop_path must lie in [0, 1), got {p}"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.mlp_ratio == 0 || s.downsample.kernel() == 0 {
                return bad(format!("stage {}: dim, mlp_ratio and kernel must be positive", i + 1));
            }
            if s.depth > 0 && s.hidden == 0 {
                return bad(format!("stage {}: hidden width must be positive", i + 1));
            }
            if s.depth > 0 && s.block == BlockKind::Vanilla && 2 * s.hidden != s.dim {
                return bad(format!(
                    "stage {}: vanilla blocks need 2·hidden == dim ({} vs {})",
                    i + 1,
                    2 * s.hidden,
                    s.dim
                ));
            }
            if s.depth > 0 && s.block == BlockKind::Sequencer2d {
                crate::bilstm2d::validate(s.dim, s.hidden, &self.options.mixer()).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("stage {}: {m}", i + 1)),
                    e => e,
                })?;
            }
        }
        if self.options.use_pe {
            let k = self.stages[0].downsample.kernel();
            if !self.image_size[0].is_multiple_of(k) || !self.image_size[1].is_multiple_of(k) {
                return bad("image_size must be divisible by the stage-1 stride".into());
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> Description {
        let mut stride = 1;
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                stride *= s.downsample.kernel();
                StageSummary {
                    stage: i + 1,
                    downsample: match s.downsample {
                        Downsample::PatchEmbed { kernel } => format!("patch_embed/{kernel}"),
                        Downsample::PointwiseLinear => "pointwise_linear".into(),
                    },
                    stride,
                    dim: s.dim,
                    hidden: s.hidden,
                    mlp_ratio: s.mlp_ratio,
                    depth: s.depth,
                    block: s.block,
                }
            })
            .collect();
        Description {
            name: self.name.clone(),
            depth: self.depth(),
            total_stride: self.total_stride(),
            num_classes: self.num_classes,
            image_size: self.image_size,
            options: self.options,
            stages,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub downsample: String,
    /// Cumulative stride after this stage's downsampling.
    pub stride: usize,
    pub dim: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub block: BlockKind,
}

#[derive(Clone, Debug, Serialize)]
pub struct Description {
    pub name: String,
    pub depth: usize,
    pub total_stride: usize,
    pub num_classes: usize,
    pub image_size: [usize; 2],
    pub options: ModelOptions,
    pub stages: Vec<StageSummary>,
}

/// Non-overlapping `k×k` patches flattened in `(row, col, channel)` order and
/// projected to `dim`. With `k = 1` this is a point-wise linear layer.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    kernel: usize,
    in_channels: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(init: &mut Init, kernel: usize, in_channels: usize, dim: usize) -> Self {
        let proj = Linear::new(init, kernel * kernel * in_channels, dim, true);
        PatchEmbed {
            kernel,
            in_channels,
            proj,
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn dim(&self) -> usize {
        self.proj.fan_out()
    }

    /// `x: [B, H, W, C]` to `[B, H/k, W/k, dim]`.
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: s,
                rhs: vec![self.in_channels],
            });
        }
        let (b, h, w, c, k) = (s[0], s[1], s[2], s[3], self.kernel);
        if h % k != 0 || w % k != 0 {
            return Err(Error::Resolution {
                height: h,
                width: w,
                divisor: k,
            });
        }
        let patches = if k == 1 {
            x.clone()
        } else {
            let t = tape.reshape(x, &[b, h / k, k, w / k, k, c])?;
            let t = tape.permute(&t, &[0, 1, 3, 2, 4, 5])?;
            tape.reshape(&t, &[b, h / k, w / k, k * k * c])?
        };
        self.proj.forward(tape, &patches)
    }
}

impl Module for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Plain-tensor patch embedding of one image `[H, W, C]` or a batch.
pub fn patch_embed_forward(img: &Tensor, pe: &PatchEmbed) -> Result<Tensor> {
    run_unbatched(img, |tape, x| pe.forward(tape, x))
}

fn run_unbatched(x: &Tensor, f: impl FnOnce(&mut Tape, &Var) -> Result<Var>) -> Result<Tensor> {
    let single = x.rank() == 3;
    let input = if single {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        x.reshape(&s)?
    } else {
        x.clone()
    };
    let mut tape = Tape::no_grad();
    let out = f(&mut tape, &Var::constant(input))?.into_value();
    if single {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, dim: usize, ratio: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, dim, dim * ratio, true),
            fc2: Linear::new(init, dim * ratio, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(&h);
        self.fc2.forward(tape, &h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Mixer {
    TwoD(BiLstm2d),
    /// BiLSTM over the row-major flattened token grid.
    Vanilla(BiRnn),
}

impl Mixer {
    fn name(&self) -> &'static str {
        match self {
            Mixer::TwoD(_) => "bilstm2d",
            Mixer::Vanilla(_) => "bilstm",
        }
    }
}

impl Module for Mixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Mixer::TwoD(m) => m.visit(prefix, f),
            Mixer::Vanilla(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Mixer::TwoD(m) => m.visit_mut(prefix, f),
            Mixer::Vanilla(m) => m.visit_mut(prefix, f),
        }
    }
}

/// Training-mode randomness for stochastic depth; `None` is eval mode.
pub type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Clone, Debug)]
pub struct SequencerBlock {
    dim: usize,
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

impl SequencerBlock {
    pub fn new_2d(
        init: &mut Init,
        dim: usize,
        hidden: usize,
        mlp_ratio: usize,
        options: MixerOptions,
        drop_path: f64,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(init, dim);
        let mixer = Mixer::TwoD(BiLstm2d::new(init, dim, hidden, options)?);
        Ok(Self::finish(init, dim, mlp_ratio, norm1, mixer, drop_path))
    }

    pub fn new_vanilla(
        init: &mut Init,
        dim: usize,
        hidden: usize,
        mlp_ratio: usize,
        cell: CellKind,
        drop_path: f64,
    ) -> Result<Self> {
        if 2 * hidden != dim {
            return Err(Error::Config(format!(
                "vanilla block output width {} differs from dim {dim}",
                2 * hidden
            )));
        }
        let norm1 = LayerNorm::new(init, dim);
        let mixer = Mixer::Vanilla(BiRnn::new(init, cell, dim, hidden, true));
        Ok(Self::finish(init, dim, mlp_ratio, norm1, mixer, drop_path))
    }

    fn finish(init: &mut Init, dim: usize, ratio: usize, norm1: LayerNorm, mixer: Mixer, drop_path: f64) -> Self {
        let norm2 = LayerNorm::new(init, dim);
        let mlp = Mlp::new(init, dim, ratio);
        SequencerBlock {
            dim,
            norm1,
            mixer,
            norm2,
            mlp,
            drop_path,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `x: [B, H, W, d]`; pre-norm, two residual branches.
    pub fn forward(&self, tape: &mut Tape, x: &Var, mut rng: DropRng) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[3] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "sequencer_block",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        let n = self.norm1.forward(tape, x)?;
        let mixed = match &self.mixer {
            Mixer::TwoD(m) => m.forward(tape, &n)?,
            Mixer::Vanilla(rnn) => {
                let seq = tape.reshape(&n, &[s[0], s[1] * s[2], s[3]])?;
                let out = rnn.forward(tape, &seq)?;
                tape.reshape(&out, &s)?
            }
        };
        let mixed = drop_path(tape, &mixed, self.drop_path, rng.as_deref_mut())?;
        let y = tape.add(x, &mixed)?;
        let n = self.norm2.forward(tape, &y)?;
        let m = self.mlp.forward(tape, &n)?;
        let m = drop_path(tape, &m, self.drop_path, rng)?;
        tape.add(&y, &m)
    }

    /// Zeroes the last projection of both residual branches (the recurrent
    /// weights themselves when the mixer has no fusion layer), turning the
    /// block into the identity.
    pub fn zero_residual_branches(&mut self) {
        match &mut self.mixer {
            Mixer::TwoD(m) => match &mut m.fc {
                Some(fc) => fc.visit_mut("", &mut zero_param),
                None => m.visit_mut("", &mut zero_param),
            },
            Mixer::Vanilla(rnn) => rnn.visit_mut("", &mut zero_param),
        }
        self.mlp.fc2.visit_mut("", &mut zero_param);
    }
}

impl Module for SequencerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.mixer.visit(&join(prefix, self.mixer.name()), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        let name = self.mixer.name();
        self.mixer.visit_mut(&join(prefix, name), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

fn zero_param(_: &str, p: &mut Param) {
    p.value = Tensor::zeros(p.value.shape());
}

/// Per-sample stochastic depth: each batch row of the branch is dropped with
/// probability `p` and survivors are scaled by `1/(1-p)`.
fn drop_path(tape: &mut Tape, branch: &Var, p: f64, rng: DropRng) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let factors: Vec<f64> = (0..branch.shape()[0])
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
                .collect();
            tape.scale_rows(branch, &factors)
        }
        _ => Ok(branch.clone()),
    }
}

/// Plain-tensor forward of one block in eval mode, `[H, W, d]` or batched.
pub fn sequencer2d_block_forward(x: &Tensor, blk: &SequencerBlock) -> Result<Tensor> {
    run_unbatched(x, |tape, v| blk.forward(tape, v, None))
}

/// Vanilla block over a token sequence `[N, d]`, treated as an `N×1` grid.
pub fn vanilla_block_forward(x: &Tensor, blk: &SequencerBlock) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "vanilla_block",
            detail: format!("expected [N, d], got {:?}", x.shape()),
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let out = sequencer2d_block_forward(&x.reshape(&[n, 1, d])?, blk)?;
    out.reshape(&[n, d])
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: PatchEmbed,
    pub blocks: Vec<SequencerBlock>,
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.downsample.visit(&join(prefix, "downsample"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.downsample.visit_mut(&join(prefix, "downsample"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub stages: Vec<Stage>,
    pub pos_embed: Option<Param>,
    pub norm: LayerNorm,
    pub head: Linear,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg, seed)
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut in_ch = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut pos_embed = None;
        for (si, s) in cfg.stages.iter().enumerate() {
            let downsample = PatchEmbed::new(&mut init, s.downsample.kernel(), in_ch, s.dim);
            if si == 0 && cfg.options.use_pe {
                let (gh, gw) = cfg.pe_grid();
                // small random table; zero would make its gradient the only signal
                pos_embed = Some(init.uniform(&[gh, gw, s.dim], 0.02));
            }
            let mut blocks = Vec::with_capacity(s.depth);
            for _ in 0..s.depth {
                let p = cfg.options.drop_path;
                let blk = match s.block {
                    BlockKind::Sequencer2d => {
                        SequencerBlock::new_2d(&mut init, s.dim, s.hidden, s.mlp_ratio, cfg.options.mixer(), p)
                    }
                    BlockKind::Vanilla => {
                        SequencerBlock::new_vanilla(&mut init, s.dim, s.hidden, s.mlp_ratio, cfg.options.cell_kind, p)
                    }
                }
                .map_err(|e| Error::Config(format!("stage {}: {e}", si + 1)))?;
                blocks.push(blk);
            }
            stages.push(Stage { downsample, blocks });
            in_ch = s.dim;
        }
        let norm = LayerNorm::new(&mut init, in_ch);
        let head = Linear::zeros(&mut init, in_ch, cfg.num_classes);
        Ok(Model {
            config: cfg.clone(),
            stages,
            pos_embed,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SequencerBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut SequencerBlock> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    /// Cumulative stride in pixels of the grid that block `index` (1-based)
    /// operates on.
    pub fn block_stride(&self, index: usize) -> Result<usize> {
        self.check_block(index)?;
        let mut seen = 0;
        let mut stride = 1;
        for s in &self.stages {
            stride *= s.downsample.kernel();
            seen += s.blocks.len();
            if index <= seen {
                break;
            }
        }
        Ok(stride)
    }

    fn check_block(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.depth() {
            return Err(Error::BlockIndex {
                index,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    pub fn set_drop_path(&mut self, p: f64) {
        self.config.options.drop_path = p;
        self.blocks_mut().for_each(|b| b.drop_path = p);
    }

    /// Re-draws the zero-initialized classifier so gradients reach the trunk.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.head.fan_in() as f64).sqrt();
        self.head.visit_mut("", &mut |_, p| {
            p.value = Tensor::uniform(p.value.shape(), bound, &mut rng)
        });
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.in_channels],
            });
        }
        let d = self.config.total_stride();
        if !s[1].is_multiple_of(d) || !s[2].is_multiple_of(d) {
            return Err(Error::Resolution {
                height: s[1],
                width: s[2],
                divisor: d,
            });
        }
        Ok(())
    }

    /// Runs the trunk and stops after block `until` (1-based across stages);
    /// `None` runs every stage.
    pub fn forward_features(&self, tape: &mut Tape, x: &Var, until: Option<usize>, mut rng: DropRng) -> Result<Var> {
        self.check_input(x)?;
        if let Some(i) = until {
            self.check_block(i)?;
        }
        let mut h = x.clone();
        let mut index = 0;
        for (si, stage) in self.stages.iter().enumerate() {
            h = stage.downsample.forward(tape, &h)?;
            if si == 0 {
                if let Some(pe) = &self.pos_embed {
                    let (gh, gw) = (pe.value.shape()[0], pe.value.shape()[1]);
                    if h.shape()[1] != gh || h.shape()[2] != gw {
                        return Err(Error::UnsupportedResolution {
                            expected_h: gh,
                            expected_w: gw,
                            got_h: h.shape()[1],
                            got_w: h.shape()[2],
                        });
                    }
                    let p = tape.param(pe);
                    h = tape.add(&h, &p)?;
                }
            }
            for blk in &stage.blocks {
                h = blk.forward(tape, &h, rng.as_deref_mut())?;
                index += 1;
                if until == Some(index) {
                    return Ok(h);
                }
            }
        }
        Ok(h)
    }

    /// LayerNorm, mean over the grid, linear head: `[B, h, w, d]` to `[B, K]`.
    pub fn classify(&self, tape: &mut Tape, features: &Var) -> Result<Var> {
        let n = self.norm.forward(tape, features)?;
        let pooled = tape.mean_axis(&n, 1)?;
        let pooled = tape.mean_axis(&pooled, 1)?;
        self.head.forward(tape, &pooled)
    }

    /// `x: [B, H, W, 3]` to logits `[B, num_classes]`.
    pub fn forward(&self, tape: &mut Tape, x: &Var, rng: DropRng) -> Result<Var> {
        let f = self.forward_features(tape, x, None, rng)?;
        self.classify(tape, &f)
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        Ok(self
            .forward(&mut tape, &Var::constant(batch.clone()), None)?
            .into_value())
    }
}

pub fn model_forward(m: &Model, batch: &Tensor) -> Result<Tensor> {
    m.logits(batch)
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        if let Some(pe) = &self.pos_embed {
            f(&join(prefix, "pos_embed"), pe);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        if let Some(pe) = &mut self.pos_embed {
            f(&join(prefix, "pos_embed"), pe);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
