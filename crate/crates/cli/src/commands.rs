use std::fs;
use std::path::Path;

use seqkit::analysis::{
    center_bands, confined_to_cross, count_flops, count_params, cross_mass_ratio, erf_compute, erf_render,
    random_images,
};
use seqkit::gradcheck::check_module;
use seqkit::io::{load_checkpoint, load_dataset, save_checkpoint, save_tensor, Dtype};
use seqkit::model::{Model, ModelConfig, OptionOverrides};
use seqkit::tensor::stack;
use seqkit::training::{argmax, evaluate, scaled_base_lr, synthetic_bars, train, Dataset, TrainConfig};
use seqkit::Tensor;
use serde_json::{json, Value};

use crate::args::{Command, DataSource, ImageSource, InputArgs, ModelArgs, Resolution, TrainArgs};
use crate::Failure;

type Res<T> = Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Res<T> {
    Err(Failure::Invalid(msg.into()))
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

pub fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::Describe(m) => {
            let cfg = resolve_config(&m)?;
            print(&serde_json::to_value(cfg.describe()).expect("description"));
        }
        Command::CountParams(m) => {
            let model = build(&m)?;
            println!("{}", count_params(&model).to_json());
        }
        Command::CountFlops { model, resolution } => {
            let cfg = resolve_config(&model)?;
            let r = resolution.unwrap_or(default_resolution(&cfg));
            check_resolution(&cfg, r)?;
            let model = build(&model)?;
            println!("{}", count_flops(&model, r.height, r.width)?.to_json());
        }
        Command::Forward { model, input, out } => forward(&model, &input, out.as_deref())?,
        Command::GradCheck {
            model,
            input,
            per_tensor,
            step,
            tolerance,
        } => grad_check(&model, &input, per_tensor, step, tolerance)?,
        Command::Erf {
            model,
            input,
            block,
            out,
        } => erf(&model, &input, block, out.as_deref())?,
        Command::Train {
            model,
            train,
            data,
            eval_data,
            out,
            save,
        } => run_train(
            &model,
            &train,
            &data,
            eval_data.as_ref(),
            out.as_deref(),
            save.as_deref(),
        )?,
        Command::Eval { model, data } => {
            let m = build(&model)?;
            let data = load_data(&data, &m, model.seed)?;
            let acc = evaluate(&m, &data)?;
            print(&json!({ "model": m.config().name, "samples": data.len(), "accuracy": acc }));
        }
    }
    Ok(())
}

fn overrides(m: &ModelArgs) -> OptionOverrides {
    OptionOverrides {
        merge: m.merge,
        direction: m.direction,
        active: m.active,
        cell_kind: m.cell,
        ..Default::default()
    }
}

/// The config a command will run, validated before any weights exist.
fn resolve_config(m: &ModelArgs) -> Res<ModelConfig> {
    let mut cfg = if let Some(dir) = &m.checkpoint {
        seqkit::io::load_manifest(dir)?.config
    } else if let Some(path) = &m.config {
        ModelConfig::from_json(&fs::read_to_string(path)?)?
    } else {
        ModelConfig::preset(m.preset.as_deref().unwrap_or("sequencer2d_s"))?
    };
    overrides(m).apply(&mut cfg.options);
    cfg.validate()?;
    Ok(cfg)
}

fn build(m: &ModelArgs) -> Res<Model> {
    let cfg = resolve_config(m)?;
    match &m.checkpoint {
        Some(dir) => Ok(load_checkpoint(dir)?),
        None => Ok(Model::new(&cfg, m.seed)?),
    }
}

fn default_resolution(cfg: &ModelConfig) -> Resolution {
    Resolution {
        height: cfg.image_size[0],
        width: cfg.image_size[1],
    }
}

fn check_resolution(cfg: &ModelConfig, r: Resolution) -> Res<()> {
    let s = cfg.total_stride();
    if !r.height.is_multiple_of(s) || !r.width.is_multiple_of(s) {
        return Err(seqkit::Error::Resolution {
            height: r.height,
            width: r.width,
            divisor: s,
        }
        .into());
    }
    Ok(())
}

/// Resolves `--images` into an `[N, H, W, C]` batch.
fn images(input: &InputArgs, cfg: &ModelConfig, seed: u64, default_n: usize) -> Res<Tensor> {
    match input.images.clone().unwrap_or(ImageSource::Random(default_n)) {
        ImageSource::Random(n) => {
            let r = input.resolution.unwrap_or(default_resolution(cfg));
            check_resolution(cfg, r)?;
            Ok(random_images(n, r.height, r.width, cfg.in_channels, seed))
        }
        ImageSource::Dir(dir) => {
            let data = load_dataset(&dir, None)?;
            let s = data.image_shape();
            if let Some(r) = input.resolution {
                if [r.height, r.width] != s[..2] {
                    return invalid(format!(
                        "--resolution {}x{} disagrees with {}x{} images",
                        r.height, r.width, s[0], s[1]
                    ));
                }
            }
            check_resolution(
                cfg,
                Resolution {
                    height: s[0],
                    width: s[1],
                },
            )?;
            let refs: Vec<&Tensor> = data.images.iter().collect();
            Ok(stack(&refs, 0)?)
        }
    }
}

fn forward(m: &ModelArgs, input: &InputArgs, out: Option<&Path>) -> Res<()> {
    let cfg = resolve_config(m)?;
    let x = images(input, &cfg, m.seed, 1)?;
    let model = build(m)?;
    let logits = model.logits(&x)?;
    let k = logits.shape()[1];
    let top1: Vec<usize> = logits.data().chunks(k).map(argmax).collect();
    let mut report = json!({
        "model": cfg.name,
        "resolution": [x.shape()[1], x.shape()[2]],
        "logits_shape": logits.shape(),
        "top1": top1,
    });
    match out {
        Some(p) => {
            save_tensor(p, &logits, Dtype::F64)?;
            report["out"] = json!(p.display().to_string());
        }
        None => report["logits"] = json!(logits.data()),
    }
    print(&report);
    Ok(())
}

fn grad_check(m: &ModelArgs, input: &InputArgs, per_tensor: usize, step: f64, tolerance: f64) -> Res<()> {
    if !(step.is_finite() && step > 0.0 && tolerance > 0.0) {
        return invalid("--step and --tolerance must be positive");
    }
    let cfg = resolve_config(m)?;
    let x = images(input, &cfg, m.seed, 2)?;
    let mut model = build(m)?;
    // a zero head would hide every trunk gradient
    model.randomize_head(m.seed.wrapping_add(1));
    let labels: Vec<usize> = (0..x.shape()[0]).map(|i| i % cfg.num_classes).collect();
    let sample = (per_tensor > 0).then_some(per_tensor);
    let report = check_module(
        &mut model,
        &x,
        |md, tape, v| {
            let logits = md.forward(tape, v, None)?;
            tape.cross_entropy(&logits, &labels, 0.0)
        },
        step,
        sample,
        m.seed,
    )?;
    let passed = report.passes(tolerance);
    let entries: Vec<Value> = report
        .entries
        .iter()
        .map(|e| json!({ "name": e.name, "checked": e.checked, "max_rel_error": e.max_rel_error }))
        .collect();
    print(&json!({
        "model": cfg.name,
        "max_rel_error": report.max_rel_error,
        "tolerance": tolerance,
        "passed": passed,
        "entries": entries,
    }));
    if !passed {
        return invalid(format!(
            "max relative error {:.3e} ≥ {tolerance:e}",
            report.max_rel_error
        ));
    }
    Ok(())
}

fn erf(m: &ModelArgs, input: &InputArgs, block: usize, out: Option<&Path>) -> Res<()> {
    let cfg = resolve_config(m)?;
    if block == 0 || block > cfg.depth() {
        return Err(seqkit::Error::BlockIndex {
            index: block,
            depth: cfg.depth(),
        }
        .into());
    }
    let x = images(input, &cfg, m.seed, 8)?;
    let model = build(m)?;
    let map = erf_compute(&model, &x, block)?;
    let (h, w) = (map.resolution[0], map.resolution[1]);
    let (rows, cols) = center_bands(&model, block, h, w)?;
    let mut report = serde_json::to_value(&map).expect("erf map");
    report["center_rows"] = json!([rows.start, rows.end]);
    report["center_cols"] = json!([cols.start, cols.end]);
    report["confined_to_cross"] = json!(confined_to_cross(&map.scores, &rows, &cols));
    report["cross_mass_ratio"] = json!(cross_mass_ratio(&map.scores, &rows, &cols));
    if let Some(p) = out {
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            erf_render(&map, p)?;
        } else {
            save_tensor(p, &map.scores, Dtype::F64)?;
        }
        report["out"] = json!(p.display().to_string());
    }
    print(&report);
    Ok(())
}

fn load_data(src: &DataSource, model: &Model, seed: u64) -> Res<Dataset> {
    let cfg = model.config();
    let data = match src {
        DataSource::Synthetic(n) => {
            if cfg.image_size[0] != cfg.image_size[1] {
                return invalid("synthetic data needs a square image size");
            }
            synthetic_bars(*n, cfg.image_size[0], seed)?
        }
        DataSource::Dir(dir) => load_dataset(dir, Some(cfg.num_classes))?,
    };
    if data.num_classes != cfg.num_classes {
        return invalid(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.num_classes
        ));
    }
    let s = data.image_shape();
    if s[2] != cfg.in_channels {
        return invalid(format!(
            "images have {} channels, model expects {}",
            s[2], cfg.in_channels
        ));
    }
    check_resolution(
        cfg,
        Resolution {
            height: s[0],
            width: s[1],
        },
    )?;
    Ok(data)
}

fn train_config(t: &TrainArgs, seed: u64) -> Res<TrainConfig> {
    let mut c = TrainConfig {
        seed,
        ..Default::default()
    };
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {$(if let Some(v) = t.$arg { c.$field = v; })*};
    }
    set!(epochs <- epochs, batch_size <- batch_size, base_lr <- base_lr, weight_decay <- weight_decay,
         beta1 <- beta1, beta2 <- beta2, eps <- adam_eps, warmup_epochs <- warmup_epochs,
         warmup_lr <- warmup_lr, min_lr <- min_lr, label_smoothing <- label_smoothing, drop_path <- drop_path);
    if t.scaled_lr {
        c.base_lr = scaled_base_lr(c.batch_size);
    }
    c.validate()?;
    Ok(c)
}

fn run_train(
    m: &ModelArgs,
    t: &TrainArgs,
    data: &DataSource,
    eval: Option<&DataSource>,
    out: Option<&Path>,
    save: Option<&Path>,
) -> Res<()> {
    let mut m = m.clone();
    if m.preset.is_none() && m.config.is_none() && m.checkpoint.is_none() {
        m.preset = Some("mini".into());
    }
    let cfg = train_config(t, m.seed)?;
    let mut model = build(&m)?;
    let data = load_data(data, &model, m.seed)?;
    let eval = eval.map(|e| load_data(e, &model, m.seed.wrapping_add(1))).transpose()?;
    let history = train(&mut model, &data, &cfg, eval.as_ref())?;
    if let Some(p) = out {
        history.write_csv(fs::File::create(p)?)?;
    }
    if let Some(dir) = save {
        save_checkpoint(dir, &model, Dtype::F64)?;
    }
    print(&json!({
        "model": model.config().name,
        "samples": data.len(),
        "config": cfg,
        "epochs": history.epochs,
    }));
    Ok(())
}
