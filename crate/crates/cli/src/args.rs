use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use seqkit::bilstm2d::{Active, Direction, Merge};
use seqkit::recurrent::CellKind;

#[derive(Parser, Debug)]
#[command(
    name = "seqkit",
    version,
    about = "Build, inspect, verify, train and analyze Sequencer2D models"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true, env = "SEQKIT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the stage table of a model as JSON
    Describe(ModelArgs),
    /// Count parameters, with a per-module breakdown
    CountParams(ModelArgs),
    /// Count FLOPs (1 MAC = 1 FLOP) at a resolution
    CountFlops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        resolution: Option<Resolution>,
    },
    /// Run a forward pass and write the logits
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        /// SQTN file for the `[N, K]` logits; printed as JSON when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences
    GradCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Coordinates sampled per tensor; 0 checks every coordinate
        #[arg(long, default_value_t = 0)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Effective receptive field of one block
    Erf {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        /// 1-based block index
        #[arg(long)]
        block: usize,
        /// `.pgm` renders an 8-bit image; anything else gets an SQTN score map
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset directory or the synthetic bar task
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Dataset directory or `synthetic:n`
        #[arg(long, default_value = "synthetic:200")]
        data: DataSource,
        #[arg(long)]
        eval_data: Option<DataSource>,
        /// Metrics history CSV
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory to save the trained weights into
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Top-1 accuracy on a dataset
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: DataSource,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Named preset, e.g. sequencer2d-s (default when nothing else is given)
    #[arg(long, conflicts_with_all = ["config", "checkpoint"])]
    pub preset: Option<String>,
    /// JSON model config file
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    /// Checkpoint directory to load weights from
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, conflicts_with = "checkpoint")]
    pub merge: Option<Merge>,
    #[arg(long, conflicts_with = "checkpoint")]
    pub direction: Option<Direction>,
    #[arg(long, conflicts_with = "checkpoint")]
    pub active: Option<Active>,
    #[arg(long, conflicts_with = "checkpoint")]
    pub cell: Option<CellKind>,
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// `HxW`; defaults to the model's image size
    #[arg(long)]
    pub resolution: Option<Resolution>,
    /// Dataset directory or `random:n` (standard-normal images from --seed)
    #[arg(long)]
    pub images: Option<ImageSource>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, conflicts_with = "scaled_lr")]
    pub base_lr: Option<f64>,
    /// Use batch_size / 512 × 5e-4 as the base learning rate
    #[arg(long)]
    pub scaled_lr: bool,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub drop_path: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad resolution '{s}', expected HxW"))
        };
        let (h, w) = match s.split_once(['x', 'X']) {
            Some((h, w)) => (parse(h)?, parse(w)?),
            None => (parse(s)?, parse(s)?),
        };
        if h == 0 || w == 0 {
            return Err("resolution must be positive".into());
        }
        Ok(Resolution { height: h, width: w })
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Random(usize),
    Dir(PathBuf),
}

impl FromStr for ImageSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("random:") {
            Some(n) => match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(ImageSource::Random(n)),
                _ => Err(format!("bad image count in '{s}'")),
            },
            None => Ok(ImageSource::Dir(PathBuf::from(s))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic(usize),
    Dir(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("synthetic:") {
            Some(n) => match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(DataSource::Synthetic(n)),
                _ => Err(format!("bad sample count in '{s}'")),
            },
            None => Ok(DataSource::Dir(PathBuf::from(s))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_forms() {
        assert_eq!(
            "448x448".parse::<Resolution>().unwrap(),
            Resolution {
                height: 448,
                width: 448
            }
        );
        assert_eq!(
            "224".parse::<Resolution>().unwrap(),
            Resolution {
                height: 224,
                width: 224
            }
        );
        assert!("0x4".parse::<Resolution>().is_err());
        assert!("axb".parse::<Resolution>().is_err());
    }

    #[test]
    fn image_sources() {
        assert!(matches!(
            "random:3".parse::<ImageSource>().unwrap(),
            ImageSource::Random(3)
        ));
        assert!("random:0".parse::<ImageSource>().is_err());
        assert!(matches!("imgs".parse::<ImageSource>().unwrap(), ImageSource::Dir(_)));
    }

    #[test]
    fn parser_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
