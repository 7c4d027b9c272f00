//! `trtr` command-line front end: synthetic data, toy training, tracking,
//! evaluation, gradient checks and diagnostic dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use trtr::localize::BoundingBox;
use trtr::pipeline::dump::{attention_row_map, write_csv, write_pgm};
use trtr::pipeline::io::{format_boxes, load_sequence, read_boxes, save_sequence, write_boxes, GROUNDTRUTH_FILE};
use trtr::pipeline::synth::BrightnessDrift;
use trtr::pipeline::tracker::{track_sequence, Diagnostics};
use trtr::init::{seeded, uniform};
use trtr::localize::{heads_forward, init_heads};
use trtr::loss::{focal_loss, joint_loss, offset_loss, size_loss, FocalParams, GroundTruth};
use trtr::pipeline::*;
use trtr::tensor::gradcheck::{check_inputs, check_params};
use trtr::transformer::{init_transformer, run_transformer, DecoderInput, EncoderInput, PadMask, TransformerConfig};
use trtr::{Graph, Tensor, TransformerWeights, Var};

#[derive(Parser)]
#[command(name = "trtr", version, about = "Transformer tracker with an online classification branch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of the transformer, heads, losses and backbone.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        enc_layers: usize,
        #[arg(long, default_value_t = 1)]
        dec_layers: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        pe_mask: Switch,
    },
    /// Train on a synthetic (or loaded) sequence and write a checkpoint.
    TrainToy {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 64)]
        template_size: usize,
        #[arg(long, default_value_t = 128)]
        search_size: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        pe_mask: Switch,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a sequence and print or write the boxes (`x,y,w,h` per line).
    Track {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean IoU, success curve and AUC of predicted boxes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth box file, or a sequence directory containing one.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Write a synthetic sequence as PPM frames plus a ground-truth file.
    Synth {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump one attention row of a tracked frame as CSV or PGM.
    DumpAttn {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        /// Frame to inspect (0 is the initialization frame, so at least 1).
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = AttnKind::Cross)]
        kind: AttnKind,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Search-grid cell index of the query row; defaults to the peak.
        #[arg(long)]
        query: Option<usize>,
        /// `.csv` or `.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a response map of a tracked frame as CSV or PGM.
    DumpHeatmap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = MapKind::Raw)]
        which: MapKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Sequence directory (frames plus optional ground truth); synthetic when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the synthetic sequence and of fresh model weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Darken the synthetic target from this frame on.
    #[arg(long)]
    drift_start: Option<usize>,
    /// Initial box `x,y,w,h` when the sequence has no ground truth.
    #[arg(long)]
    init: Option<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint to load; fresh weights from `--seed` when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    dec_layers: usize,
}

#[derive(Args)]
struct TrackerArgs {
    #[arg(long, default_value_t = 64)]
    template_size: usize,
    #[arg(long, default_value_t = 128)]
    search_size: usize,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    online: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pe_mask: Switch,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttnKind {
    Cross,
    #[value(name = "self")]
    SelfAttn,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapKind {
    Raw,
    Online,
    Blend,
    Window,
}

struct Loaded {
    frames: Vec<Frame>,
    truth: Option<Vec<BoundingBox>>,
    init: BoundingBox,
}

fn parse_box(s: &str) -> Result<BoundingBox> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().context("parsing --init")?;
    ensure!(v.len() == 4, "--init expects x,y,w,h");
    Ok(BoundingBox::from_corner(v[0], v[1], v[2], v[3]))
}

fn synth_spec(data: &DataArgs) -> SynthSpec {
    let drift = data.drift_start.map(|start| BrightnessDrift { start, rate: 0.03, floor: 0.35 });
    SynthSpec { drift, ..SynthSpec::default() }
}

fn synthetic(data: &DataArgs) -> Result<SyntheticSequence> {
    Ok(generate_synthetic_sequence(data.seed, data.frames, &synth_spec(data))?)
}

fn load(data: &DataArgs) -> Result<Loaded> {
    let (frames, truth) = match &data.data {
        Some(dir) => load_sequence(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => {
            let s = synthetic(data)?;
            (s.frames, Some(s.truth))
        }
    };
    ensure!(!frames.is_empty(), "sequence has no frames");
    let init = match (&data.init, &truth) {
        (Some(s), _) => parse_box(s)?,
        (None, Some(t)) => t[0],
        (None, None) => bail!("no ground truth found; pass --init x,y,w,h"),
    };
    Ok(Loaded { frames, truth, init })
}

fn model(args: &ModelArgs, seed: u64) -> Result<TrTrModel> {
    match &args.ckpt {
        Some(p) => TrTrModel::load(p).with_context(|| format!("loading checkpoint {}", p.display())),
        None => Ok(TrTrModel::init(ModelConfig::desk().with_layers(args.enc_layers, args.dec_layers), seed)?),
    }
}

fn tracker_config(t: &TrackerArgs, seed: u64) -> TrackerConfig {
    TrackerConfig {
        template_size: t.template_size,
        search_size: t.search_size,
        online: t.online.on(),
        pe_mask: t.pe_mask.on(),
        seed,
        ..TrackerConfig::default()
    }
}

/// Tracks up to `frame` and returns that frame's diagnostics.
fn diagnostics_at(data: &DataArgs, margs: &ModelArgs, targs: &TrackerArgs, frame: usize) -> Result<Diagnostics> {
    let seq = load(data)?;
    ensure!(frame >= 1 && frame < seq.frames.len(), "--frame must lie in 1..{}", seq.frames.len());
    let m = model(margs, data.seed)?;
    let mut state = TrackerState::init(&m, &seq.frames[0], seq.init, tracker_config(targs, data.seed))?;
    let mut last = None;
    for f in &seq.frames[1..=frame] {
        last = Some(state.track_frame(&m, f)?.diagnostics);
    }
    Ok(last.expect("at least one tracked frame"))
}

fn write_map(path: &Path, map: &Tensor, per_row: bool) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(path, map)?,
        Some("pgm") => write_pgm(path, map, per_row)?,
        _ => bail!("output must end in .csv or .pgm: {}", path.display()),
    }
    Ok(())
}

fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    ensure!(s * s == n, "attention over {n} keys is not a square grid");
    Ok(s)
}

/// Gradient checks on small smooth instances: the transformer, heads and
/// joint loss on random features, then the backbone on a random patch.
fn gradcheck(seed: u64, n_enc: usize, n_dec: usize, pe_mask: bool) -> Result<bool> {
    let cfg = TransformerConfig { ffn_hidden: 16, ..TransformerConfig::new(8, 2).with_layers(n_enc, n_dec) };
    let mut rng = seeded(seed);
    let mut w = TransformerWeights::new();
    init_transformer(&mut rng, &mut w, &cfg)?;
    init_heads(&mut rng, &mut w, cfg.d)?;
    let z0 = uniform(&mut rng, &[8, 2, 2], 1.0);
    let x0 = uniform(&mut rng, &[8, 4, 4], 1.0);
    let masks = if pe_mask {
        let mut cells = vec![false; 16];
        cells[0] = true;
        (PadMask::new(2, 2, vec![true, false, false, false])?, PadMask::new(4, 4, cells)?)
    } else {
        (PadMask::none(2, 2), PadMask::none(4, 4))
    };
    let truth = GroundTruth::new((13.0, 18.5), (10.0, 7.0), 32, 32, 4, 4, 8)?;
    fn stack_loss<'g>(
        g: &'g Graph,
        w: &TransformerWeights,
        cfg: &TransformerConfig,
        z0: Var<'g>,
        x0: Var<'g>,
        masks: &(PadMask, PadMask),
        truth: &GroundTruth,
    ) -> trtr::Result<Var<'g>> {
        let dec = run_transformer(
            g,
            w,
            cfg,
            &EncoderInput { z0, pad_mask: masks.0.clone() },
            &DecoderInput { x0, pad_mask: masks.1.clone() },
        )?;
        let h = heads_forward(g, w, &dec.sequence, 4, 4, 8)?;
        let ly = focal_loss(&h.y, &truth.label, FocalParams::default())?;
        let lo = offset_loss(&h.offset, truth.center, 8)?;
        let ls = size_loss(&h.size, truth.normalized_size, truth.cell)?;
        joint_loss(&ly, &lo, &ls, 1.0, 1.0)
    }
    let mut reports = vec![
        check_params("transformer + heads (params)", &w, |g, w| {
            stack_loss(g, w, &cfg, g.constant(z0.clone()), g.constant(x0.clone()), &masks, &truth)
        })?,
        check_inputs("transformer + heads (features)", &[z0.clone(), x0.clone()], |g, v| {
            stack_loss(g, &w, &cfg, v[0], v[1], &masks, &truth)
        })?,
    ];
    let mut bw = TransformerWeights::new();
    init_backbone(&mut rng, &mut bw, 4, 4)?;
    let patch = uniform(&mut rng, &[3, 16, 16], 1.0);
    let probe = uniform(&mut rng, &[4, 2, 2], 1.0);
    reports.push(check_params("backbone (params)", &bw, |g, w| {
        let o = backbone_forward(g, w, &g.constant(patch.clone()))?;
        Ok(o.out.mul(&g.constant(probe.clone()))?.sum())
    })?);
    let mut passed = true;
    for r in &reports {
        passed &= r.passed();
        println!(
            "{}",
            json!({
                "name": r.name,
                "components": r.components,
                "max_rel_error": r.max_rel_error,
                "max_abs_error": r.max_abs_error,
                "failures": r.failures,
                "passed": r.passed(),
            })
        );
    }
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { seed, enc_layers, dec_layers, pe_mask } => return gradcheck(seed, enc_layers, dec_layers, pe_mask.on()),
        Command::TrainToy { data, model: margs, steps, lr, template_size, search_size, pe_mask, out } => {
            let seq = match &data.data {
                Some(_) => {
                    let l = load(&data)?;
                    let truth = l.truth.context("training needs ground truth")?;
                    SyntheticSequence { distractors: vec![], frames: l.frames, truth }
                }
                None => synthetic(&data)?,
            };
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                steps,
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                seed: data.seed,
                template_size,
                search_size,
                pe_mask: pe_mask.on(),
                ..defaults
            };
            let report = train_toy(model(&margs, data.seed)?, &cfg, &seq)?;
            report.model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            let first = report.losses.first().map(|l| l.total);
            let tail = &report.losses[report.losses.len().saturating_sub(25)..];
            let tail_mean = tail.iter().map(|l| l.total).sum::<f64>() / tail.len().max(1) as f64;
            println!("{}", json!({ "steps": report.losses.len(), "first_loss": first, "final_loss_mean": tail_mean, "checkpoint": out }));
        }
        Command::Track { data, model: margs, tracker, out } => {
            let seq = load(&data)?;
            let m = model(&margs, data.seed)?;
            let boxes = track_sequence(&m, &seq.frames, seq.init, tracker_config(&tracker, data.seed))?;
            match out {
                Some(path) => {
                    write_boxes(&path, &boxes)?;
                    let iou = match &seq.truth {
                        Some(t) => Some(evaluate(&boxes, &t[..boxes.len()])?.mean_iou),
                        None => None,
                    };
                    println!("{}", json!({ "frames": boxes.len(), "mean_iou": iou, "boxes": path }));
                }
                None => print!("{}", format_boxes(&boxes)),
            }
        }
        Command::Eval { pred, truth } => {
            let truth = if truth.is_dir() { truth.join(GROUNDTRUTH_FILE) } else { truth };
            let p = read_boxes(&pred)?;
            let t = read_boxes(&truth)?;
            ensure!(t.len() >= p.len(), "{} predictions but only {} ground-truth boxes", p.len(), t.len());
            let m = evaluate(&p, &t[..p.len()])?;
            println!("{}", json!({ "frames": m.frames, "mean_iou": m.mean_iou, "auc": m.auc, "success_curve": m.success_curve }));
        }
        Command::Synth { data, out } => {
            let seq = synthetic(&data)?;
            save_sequence(&out, &seq.frames, &seq.truth)?;
            println!("{}", json!({ "frames": seq.frames.len(), "dir": out }));
        }
        Command::DumpAttn { data, model: margs, tracker, frame, kind, layer, head, query, out } => {
            let d = diagnostics_at(&data, &margs, &tracker, frame)?;
            let maps = match kind {
                AttnKind::Cross => &d.cross_attention,
                AttnKind::SelfAttn => &d.self_attention,
            };
            let a = maps.get(layer).and_then(|l| l.get(head)).with_context(|| format!("no layer {layer} head {head}"))?;
            let (rows, cols) = a.dims2()?;
            let grid = square_side(rows)?;
            let q = match (query, d.peak) {
                (Some(q), _) => q,
                (None, Some(p)) => p.y * grid + p.x,
                (None, None) => bail!("target lost on frame {frame}; pass --query"),
            };
            ensure!(q < rows, "--query {q} outside 0..{rows}");
            let side = square_side(cols)?;
            write_map(&out, &attention_row_map(a, q, side, side)?, false)?;
            println!("{}", json!({ "frame": frame, "layer": layer, "head": head, "query": q, "keys": [side, side], "out": out }));
        }
        Command::DumpHeatmap { data, model: margs, tracker, frame, which, out } => {
            let d = diagnostics_at(&data, &margs, &tracker, frame)?;
            let map = match which {
                MapKind::Raw => &d.y,
                MapKind::Online => d.y_online.as_ref().context("online branch is off; pass --online on")?,
                MapKind::Blend => &d.y_blend,
                MapKind::Window => &d.y_window,
            };
            write_map(&out, map, false)?;
            let peak = d.peak.map(|p| [p.x, p.y]);
            println!("{}", json!({ "frame": frame, "peak": peak, "score": d.score, "out": out }));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
