//! Command-line surface for the alignment-captioning pipeline: region
//! proposal inspection, finite-difference gradient audits, desk-scale
//! training, evaluation, and a qualitative caption demo.
//!
//! Exit codes: 0 success, 1 check or validation failure (invalid geometry,
//! incompatible checkpoint, gradient tolerance exceeded, non-finite loss),
//! 2 usage error (bad flags, missing or malformed input files, empty data).
//! Stdout carries exactly one JSON object per invocation; logs go to stderr
//! under `ALIGNCAP_LOG` (error | info | debug).

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use aligncap::checkpoint::load_checkpoint;
use aligncap::config::TrainingConfig;
use aligncap::data::load_dataset;
use aligncap::error::{Error, Result};
use aligncap::frozen::{FrozenVisionEncoder, SceneInput};
use aligncap::god::{
    build_candidates, rank_classes, select_inference_view, BBox, Detection, DiscrepancyMode,
    GodConfig,
};
use aligncap::model::AlignCapModel;
use aligncap::synth::make_synthetic_dataset;
use aligncap::tensor::{check::FD_ATOL_MODEL, finite_diff_check_params, Rng, Tape};
use aligncap::trainer::{evaluate, train};

/// Relative-error bound a parameter group must meet under central finite
/// differences.
const GRAD_TOLERANCE: f64 = 1e-4;

/// Caption demo limits: greedy decode length and reported tag count.
const DEMO_MAX_TOKENS: usize = 20;
const DEMO_TOP_TAGS: usize = 5;

/// Grid/channels/width of the scene the `god` command synthesizes when
/// feature-based view selection is requested without an image.
const GOD_GRID: usize = 8;
const GOD_CHANNELS: usize = 3;
const GOD_DV: usize = 16;

#[derive(Parser)]
#[command(name = "aligncap", version, about = "Region captioning pipeline tools")]
struct Cli {
    /// Seed for every stochastic choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectMode {
    /// Emit all j candidate views, as drawn during training.
    Sample,
    /// Emit the single highest-discrepancy view, as picked at inference.
    Inference,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rank detection classes and propose candidate context views for a
    /// target box.
    God {
        /// JSON file: [{"class": str, "bbox": [x0,y0,x1,y1], "score": f}].
        #[arg(long)]
        detections: PathBuf,
        /// Target region "x0,y0,x1,y1" in normalized coordinates.
        #[arg(long)]
        target: String,
        /// Top detection classes considered.
        #[arg(long)]
        k: usize,
        /// Views per proposal set, including the target; j >= 2.
        #[arg(long)]
        j: usize,
        #[arg(long, value_enum, default_value_t = SelectMode::Sample)]
        select: SelectMode,
        /// Discrepancy measure for inference selection:
        /// feature-cosine | one-minus-iou.
        #[arg(long, default_value = "feature-cosine")]
        mode: String,
    },
    /// Audit analytic gradients of every trainable parameter group against
    /// central finite differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one module: spatial-awareness | latent-refinement |
        /// semantic-alignment | losses-training.
        #[arg(long)]
        module: Option<String>,
    },
    /// Train on a generated dataset, writing metrics, data, and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report mean loss components of a checkpoint over a dataset file.
    Eval {
        /// Path to a checkpoint manifest (checkpoint.json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy-decode a caption and top tags for one region of a scene file.
    DemoCaption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file: {"shape": [g,g,c], "data": [...]}.
        #[arg(long)]
        scene: PathBuf,
        /// Target region "x0,y0,x1,y1" in normalized coordinates.
        #[arg(long)]
        target: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALIGNCAP_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Input that never parsed (or was empty) is a usage problem; input that
/// parsed but failed a semantic check is a validation failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::Config(_)
        | Error::Precondition(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::God { detections, target, k, j, select, mode } => {
            cmd_god(cli.seed, &detections, &target, k, j, select, &mode)
        }
        Cmd::GradCheck { config, module } => cmd_grad_check(&config, module.as_deref()),
        Cmd::Train { config, out } => cmd_train(&config, &out),
        Cmd::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Cmd::DemoCaption { checkpoint, scene, target } => {
            cmd_demo_caption(cli.seed, &checkpoint, &scene, &target)
        }
    }
}

fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)?;
    let detections: Vec<Detection> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    for d in &detections {
        d.validate()?;
    }
    log::info!("loaded {} detections from {}", detections.len(), path.display());
    Ok(detections)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stand-in image for box-only invocations: each detection paints a
/// class-keyed signature into its box, weighted by score, so feature-space
/// discrepancy between views reflects which detections they cover.
fn scene_from_detections(detections: &[Detection]) -> Result<SceneInput> {
    let (g, c) = (GOD_GRID, GOD_CHANNELS);
    let mut data = vec![0.0; g * g * c];
    for d in detections {
        let mut sig_rng = Rng::new(0x73636e65).derive(fnv1a(d.class_name.as_bytes()));
        let sig: Vec<f64> = (0..c).map(|_| sig_rng.range(-1.0, 1.0)).collect();
        for gy in 0..g {
            for gx in 0..g {
                let cx = (gx as f64 + 0.5) / g as f64;
                let cy = (gy as f64 + 0.5) / g as f64;
                let inside = d.bbox.x0 <= cx && cx <= d.bbox.x1 && d.bbox.y0 <= cy && cy <= d.bbox.y1;
                if inside {
                    for (ch, s) in sig.iter().enumerate() {
                        data[(gy * g + gx) * c + ch] += d.score * s;
                    }
                }
            }
        }
    }
    SceneInput::new(g, c, data)
}

fn cmd_god(
    seed: u64,
    detections_path: &Path,
    target: &str,
    k: usize,
    j: usize,
    select: SelectMode,
    mode: &str,
) -> Result<ExitCode> {
    let target = BBox::from_str(target)?;
    let detections = load_detections(detections_path)?;
    let config = GodConfig { k, j, discrepancy_mode: DiscrepancyMode::from_str(mode)? };
    config.validate()?;

    let mut rng = Rng::new(seed);
    let views = build_candidates(&target, &detections, &config, &mut rng)?;
    let classes = rank_classes(&detections, k);

    let report = match select {
        SelectMode::Sample => json!({ "classes": classes, "views": views }),
        SelectMode::Inference => {
            let scene = scene_from_detections(&detections)?;
            let encoder = FrozenVisionEncoder::new(
                Rng::new(seed).derive(1).next_u64(),
                GOD_GRID,
                GOD_CHANNELS,
                GOD_DV,
            );
            let picked =
                select_inference_view(&views, &target, &scene, &encoder, config.discrepancy_mode)?;
            json!({ "classes": classes, "selected": picked })
        }
    };
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

/// `--module` names to parameter-name prefixes.
fn module_prefix(module: &str) -> Result<&'static str> {
    match module {
        "spatial-awareness" => Ok("spatial."),
        "latent-refinement" => Ok("refine."),
        "semantic-alignment" => Ok("semantic."),
        "losses-training" => Ok("tag_head."),
        other => Err(Error::Config(format!(
            "unknown module `{other}` (spatial-awareness | latent-refinement | \
             semantic-alignment | losses-training)"
        ))),
    }
}

fn module_of(param: &str) -> &'static str {
    for (prefix, module) in [
        ("spatial.", "spatial-awareness"),
        ("refine.", "latent-refinement"),
        ("semantic.", "semantic-alignment"),
        ("tag_head.", "losses-training"),
    ] {
        if param.starts_with(prefix) {
            return module;
        }
    }
    "other"
}

fn cmd_grad_check(config_path: &Path, module: Option<&str>) -> Result<ExitCode> {
    let config = TrainingConfig::from_file(config_path)?;
    let prefix = module.map(module_prefix).transpose()?;

    // Generic residual init so every path carries gradient; a two-example
    // probe batch keeps the element-by-element sweep affordable.
    let mut model = AlignCapModel::with_residual_init(&config, false)?;
    if let Some(prefix) = prefix {
        model.for_each_mut(&mut |p| {
            if p.trainable && !p.name.starts_with(prefix) {
                p.trainable = false;
            }
        });
    }
    let batch = make_synthetic_dataset(config.seed, 2, &config.dims)?;
    let rng = Rng::new(config.seed).derive(20);
    let corrupt = std::env::var_os("ALIGNCAP_TEST_CORRUPT_GRAD").is_some();
    if corrupt {
        log::info!("corrupt-gradient hook active: the audit must fail");
    }

    let model = RefCell::new(model);
    let mut build = |t: &mut Tape| {
        let out = model.borrow().forward(t, &batch, &rng, false)?;
        if !corrupt {
            return Ok(out.total);
        }
        // Detector self-test: route one parameter's bytes around the tape as
        // a constant, so finite differences see a dependence the analytic
        // gradient misses.
        let mut snapshot = None;
        model.borrow().for_each(&mut |p| {
            if p.trainable && snapshot.is_none() {
                snapshot = Some(p.tensor.clone());
            }
        });
        let snapshot = snapshot
            .ok_or_else(|| Error::Precondition("no trainable parameters to audit".into()))?;
        let leak = t.constant(&snapshot);
        let bias = t.sum(leak);
        let bias = t.scale(bias, 0.5);
        t.add(out.total, bias)
    };
    let mut nudge = |name: &str, idx: usize, delta: f64| {
        model.borrow_mut().for_each_mut(&mut |p| {
            if p.name == name {
                p.tensor.data[idx] += delta;
            }
        });
    };
    let report = finite_diff_check_params(&mut build, &mut nudge, 1e-5, FD_ATOL_MODEL)?;

    let groups: Vec<serde_json::Value> = report
        .iter()
        .map(|(name, err)| {
            json!({
                "param": name,
                "module": module_of(name),
                "rel_err": err,
                "pass": *err <= GRAD_TOLERANCE,
            })
        })
        .collect();
    let worst = report
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("rel errors are finite"))
        .cloned();
    let failures: Vec<&String> =
        report.iter().filter(|(_, e)| *e > GRAD_TOLERANCE).map(|(n, _)| n).collect();
    println!(
        "{}",
        json!({
            "tolerance": GRAD_TOLERANCE,
            "groups": groups,
            "worst": worst.map(|(name, err)| json!({ "param": name, "rel_err": err })),
            "pass": failures.is_empty(),
        })
    );
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "error: {} parameter group(s) exceed relative error {GRAD_TOLERANCE}: {}",
            failures.len(),
            failures.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        );
        Ok(ExitCode::from(1))
    }
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<ExitCode> {
    let config = TrainingConfig::from_file(config_path)?;
    let outcome = train(&config, out)?;
    let first = outcome.records.first().expect("train always logs step 0");
    let last = outcome.records.last().expect("train always logs a final eval");
    println!(
        "{}",
        json!({
            "steps": config.steps,
            "initial_total": first.losses.total,
            "final_total": last.losses.total,
            "metrics": outcome.metrics,
            "checkpoint": outcome.manifest,
            "data": outcome.dataset,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<ExitCode> {
    let model = load_checkpoint(checkpoint)?;
    let examples = load_dataset(data, model.tag_vocab.len())?;
    let v = evaluate(&model, &examples)?;
    println!(
        "{}",
        json!({
            "examples": examples.len(),
            "l_tag": v.l_tag,
            "l_cap": v.l_cap,
            "l_cond": v.l_cond,
            "l_multi": v.l_multi,
            "total": v.total,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_demo_caption(
    seed: u64,
    checkpoint: &Path,
    scene_path: &Path,
    target: &str,
) -> Result<ExitCode> {
    let model = load_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(scene_path)?;
    let scene: SceneInput = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: scene_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    scene.validate()?;
    let target = BBox::from_str(target)?;

    let out = model.infer(&scene, &target, &[], &Rng::new(seed), DEMO_TOP_TAGS, DEMO_MAX_TOKENS)?;
    let tags: Vec<serde_json::Value> =
        out.tags.iter().map(|(tag, p)| json!({ "tag": tag, "p": p })).collect();
    println!("{}", json!({ "caption": out.caption, "tags": tags }));
    Ok(ExitCode::SUCCESS)
}
