use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fplnet::analysis::{
    count_network, count_params, gridding_diagnostic, receptive_field, stage_module_block, summarize,
    symbolic_param_count, Convention, GridBlock, ModuleFormula,
};
use fplnet::blocks::{fpl::power_of_two_dilations, BranchFusion, EspConfig, FplConfig};
use fplnet::data::{load_cityscapes_dir, read_pnm, synth_dataset, write_pgm, write_ppm, Sample, SynthSpec};
use fplnet::network::{load_checkpoint, save_checkpoint, Ablation, Network};
use fplnet::tensor::{Scalar, Shape, Tensor};
use fplnet::train::{evaluate, train_two_stage, StageConfig, TwoStageConfig};
use serde_json::json;

use crate::config::{Dataset, Preset, RunConfig};
use crate::{AblateArgs, Cli, CliError, Command, CountArgs, DType, GridArgs, InferArgs, ShapeArgs};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let preset = g.preset.unwrap_or(match cli.command {
        Command::TrainToy => Preset::Tiny,
        _ => Preset::Default,
    });
    let mut cfg = RunConfig::new(preset.network());
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&g.out_dir).map_err(|e| CliError::io(&g.out_dir, e))?;
    let resolved = cfg.to_text();
    eprintln!("# resolved config");
    for line in resolved.lines() {
        eprintln!("#   {line}");
    }
    write(&g.out_dir.join("resolved_config.txt"), resolved.as_bytes())?;
    let out = &g.out_dir;
    match &cli.command {
        Command::Summarize(a) => summarize_cmd(&cfg, a, out),
        Command::Count(a) => count_cmd(a, out),
        Command::TrainToy => match g.dtype {
            DType::F32 => train_cmd::<f32>(&cfg, out),
            DType::F64 => train_cmd::<f64>(&cfg, out),
        },
        Command::Infer(a) => match g.dtype {
            DType::F32 => infer_cmd::<f32>(a, out),
            DType::F64 => infer_cmd::<f64>(a, out),
        },
        Command::Ablate(a) => ablate_cmd(&cfg, a, out),
        Command::Rf(a) => rf_cmd(&cfg, a, out),
        Command::GridCheck(a) => grid_cmd(a, out),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write(path, text.as_bytes())
}

fn probe(cfg: &RunConfig, a: &ShapeArgs) -> Shape {
    Shape::new(1, cfg.network.image_channels, a.height, a.width)
}

fn summarize_cmd(cfg: &RunConfig, a: &ShapeArgs, out: &Path) -> Result<(), CliError> {
    let net = Network::<f32>::new(cfg.network.clone())?;
    let shape = probe(cfg, a);
    let summary = summarize(&net, shape)?;
    let params = count_network(&net, shape, Convention::Trainable)?;
    let weights = count_network(&net, shape, Convention::WeightsOnly)?;
    let mut text = summary.to_text();
    for s in &params.stages {
        let _ = writeln!(text, "{} trainable parameters: {}", s.name, s.count);
    }
    let _ = writeln!(text, "convolution weights only: {}", weights.total);
    print!("{text}");
    write_json(
        &out.join("summary.json"),
        &json!({ "summary": summary, "trainable": params, "weights_only": weights }),
    )
}

fn count_cmd(a: &CountArgs, out: &Path) -> Result<(), CliError> {
    let kind: ModuleFormula = a.module.parse().map_err(|e: fplnet::Error| CliError::Config(e.to_string()))?;
    let n = symbolic_param_count(kind, a.ci, a.co, a.k, a.b)?;
    println!("{n}");
    write_json(
        &out.join("count.json"),
        &json!({ "module": kind.to_string(), "ci": a.ci, "co": a.co, "k": a.k, "b": a.b, "count": n }),
    )
}

fn load_split(cfg: &RunConfig, split: &str, count: usize, seed_offset: u64) -> Result<Vec<Sample>, CliError> {
    match &cfg.dataset {
        Dataset::Synthetic => {
            let spec = SynthSpec {
                seed: cfg.network.seed.wrapping_add(seed_offset),
                ..cfg.synth.clone()
            };
            Ok(synth_dataset(&spec, count)?)
        }
        Dataset::Directory { image_root, label_root } => {
            let pairs = load_cityscapes_dir(image_root, label_root, split)?;
            if pairs.is_empty() {
                return Err(CliError::Runtime(fplnet::Error::Data(format!(
                    "no image/label pairs in split {split:?} under {}",
                    image_root.display()
                ))));
            }
            Ok(pairs
                .iter()
                .take(count)
                .map(|p| p.load(cfg.downscale))
                .collect::<fplnet::Result<_>>()?)
        }
    }
}

/// Seed offset separating the held-out synthetic split from the training one.
const VAL_SEED_OFFSET: u64 = 1000;

fn train_cmd<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let train = load_split(cfg, &cfg.train_split, cfg.train_images, 0)?;
    let val = load_split(cfg, &cfg.val_split, cfg.val_images, VAL_SEED_OFFSET)?;
    eprintln!("# {} training and {} held-out images", train.len(), val.len());
    let stage = |iters| StageConfig {
        optim: cfg.stage_optim(iters),
        augment: cfg.augment_config(),
    };
    let plan = TwoStageConfig {
        network: cfg.network.clone(),
        encoder: stage(cfg.encoder_iters),
        full: stage(cfg.full_iters),
        seed: cfg.network.seed,
    };
    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log_err = None;
    let outcome = train_two_stage::<T>(&plan, &train, &mut |l| {
        eprintln!("{} iter {} lr {:.6} loss {:.6}", l.stage, l.iter, l.lr, l.loss);
        let line = serde_json::to_string(l).expect("log entries serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path, e));
    }
    let ck = out.join("model.ck");
    save_checkpoint(&outcome.network, &ck)?;
    let report = evaluate(&outcome.network, &val, 10)?;
    let last = outcome.log.last().map(|l| l.loss);
    println!("held-out mIoU {:.4}", report.miou);
    println!("final loss {:.6}", last.unwrap_or(f64::NAN));
    println!("checkpoint {}", ck.display());
    write_json(
        &out.join("metrics.json"),
        &json!({
            "miou": report.miou,
            "per_class_iou": report.per_class,
            "final_loss": last,
            "class_weights": outcome.weighting.w_class,
            "class_frequencies": outcome.weighting.p_class,
            "transferred_parameters": outcome.transfer.copied,
        }),
    )
}

/// Distinct colours spread around the hue circle.
fn palette(class: usize, num_classes: usize) -> [u8; 3] {
    let h = class as f64 / num_classes.max(1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn infer_cmd<T: Scalar>(a: &InferArgs, out: &Path) -> Result<(), CliError> {
    let net = load_checkpoint::<T>(&a.checkpoint)?;
    let classes = net.config().num_classes;
    for path in &a.images {
        let img = read_pnm(path)?;
        if img.channels != 3 {
            return Err(CliError::Runtime(fplnet::Error::Data(format!(
                "{}: expected an RGB (P6) image",
                path.display()
            ))));
        }
        let (h, w) = (img.height, img.width);
        let tensor = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            T::cst(img.data[(y * w + x) * 3 + c] as f64 / 255.0)
        });
        let labels = net
            .predict(&tensor)
            .map_err(|e| CliError::Runtime(fplnet::Error::Data(format!("{}: {e}", path.display()))))?
            .remove(0);
        let label_bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        let pixels = &img.data;
        let overlay: Vec<u8> = labels
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| {
                let colour = palette(l, classes);
                (0..3).map(move |c| ((pixels[i * 3 + c] as u16 + colour[c] as u16) / 2) as u8)
            })
            .collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let label_path: PathBuf = out.join(format!("{stem}_label.pgm"));
        let overlay_path = out.join(format!("{stem}_overlay.ppm"));
        write_pgm(&label_path, w, h, &label_bytes)?;
        write_ppm(&overlay_path, w, h, &overlay)?;
        println!("{} -> {} {}", path.display(), label_path.display(), overlay_path.display());
    }
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, a: &AblateArgs, out: &Path) -> Result<(), CliError> {
    let ablations: Vec<Ablation> = if a.names.is_empty() {
        Ablation::catalogue()
    } else {
        a.names
            .iter()
            .map(|n| n.parse().map_err(|e: fplnet::Error| CliError::Config(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let shape = probe(cfg, &a.shape);
    let mut rows = Vec::new();
    let mut text = format!("{:<28} {:>10} {:>12} {:>9}\n", "variant", "params", "rf", "gridding");
    for ab in ablations {
        let vcfg = ab.apply(&cfg.network);
        let net = Network::<f32>::new(vcfg.clone())?;
        let params = count_params(net.store(), Convention::Trainable).total;
        let rf = receptive_field(&net, shape)?;
        let last = rf.last().expect("networks have layers");
        let grid = gridding_diagnostic(&stage_module_block(&vcfg, a.grid_channels))?;
        let _ = writeln!(
            text,
            "{:<28} {:>10} {:>12} {:>9.4}",
            ab.to_string(),
            params,
            format!("{}x{}", last.rf_h, last.rf_w),
            grid.score
        );
        rows.push(json!({
            "variant": ab.to_string(),
            "params": params,
            "rf_h": last.rf_h,
            "rf_w": last.rf_w,
            "gridding": grid.score,
        }));
    }
    print!("{text}");
    write_json(&out.join("ablate.json"), &json!(rows))
}

fn rf_cmd(cfg: &RunConfig, a: &ShapeArgs, out: &Path) -> Result<(), CliError> {
    let net = Network::<f32>::new(cfg.network.clone())?;
    let report = receptive_field(&net, probe(cfg, a))?;
    let mut text = format!("{:>3}  {:<24} {:>13} {:>8}\n", "#", "Operation", "RF", "Jump");
    for (i, r) in report.rows.iter().enumerate() {
        let _ = writeln!(
            text,
            "{:>3}  {:<24} {:>13} {:>8}",
            i + 1,
            r.name,
            format!("{}x{}", r.rf_h, r.rf_w),
            r.jump_h
        );
    }
    print!("{text}");
    write_json(&out.join("rf.json"), &json!(report))
}

fn grid_cmd(a: &GridArgs, out: &Path) -> Result<(), CliError> {
    let config = |e: fplnet::Error| CliError::Config(e.to_string());
    let block = match a.module.as_str() {
        "conv" => GridBlock::Conv {
            kernel: a.kernel,
            dilation: a.dilation,
        },
        "fpl" => {
            let fusion: BranchFusion = a.fusion.parse().map_err(config)?;
            let cfg = FplConfig::new(a.channels, a.channels).with_branches(a.branches).with_fusion(fusion);
            cfg.validate().map_err(config)?;
            GridBlock::Fpl(cfg)
        }
        "esp" => {
            let cfg = EspConfig {
                branches: a.branches,
                dilations: power_of_two_dilations(a.branches),
                ..EspConfig::new(a.channels, a.channels)
            };
            cfg.validate().map_err(config)?;
            GridBlock::Esp(cfg)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown block {other:?}; expected conv, fpl or esp"
            )))
        }
    };
    let report = gridding_diagnostic(&block)?;
    println!("{:.6}", report.score);
    write_json(&out.join("grid_check.json"), &json!({ "block": format!("{block:?}"), "report": report }))
}
