//! Command-line surface. Exit codes: 0 success, 1 usage or I/O error, 2 the
//! critic (or validator) rejected the result.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use clap::{Args, Parser, Subcommand};
use gazekit_core::control::validate_sequence;
use gazekit_core::critic::{check, check_physiology, CriticReport, Verdict};
use gazekit_core::demo::demo_library;
use gazekit_core::guidance::{guidance_schedule, EyeGeometry, GuidanceParams};
use gazekit_core::library::{build_library, invert_controls, PrototypeLibrary, Record};
use gazekit_core::mapper::{map_sequence, DeformationModel, KeypointSequence, NeutralBaseline};
use gazekit_core::metrics::{au_f1, au_temp, eye_lmd, AuTrace, MetricConfig};
use gazekit_core::planner::{InitialPose, Plan};
use gazekit_core::ControlSequence;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::formats::{
    load_controls, load_keypoints, load_library, load_meta, read_json, save_keypoints,
    save_library, write_json, write_ogf, EvalReport, Keypoints, PlanEnvelope,
};
use crate::pipeline::{compile, frames_for_seconds, write_outputs, CompileRequest};
use crate::preview::write_preview;

#[derive(Debug, Parser)]
#[command(
    name = "gazekit",
    version,
    about = "Eye-region behavior compiler: plan, compose, critique and map control trajectories"
)]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config frame rate.
    #[arg(long, global = true)]
    pub fps: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a prototype library from a directory of traces.
    BuildLib {
        /// Directory holding `<name>.csv` (+ `<name>.meta.json`) and/or `<name>.keypoints.json` traces.
        trace_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compile a label and duration into controls, keypoints and an audit.
    Compile(CompileArgs),
    /// Check a control CSV against the hard invariants and the critic.
    Validate {
        controls: PathBuf,
        /// Plan or request envelope enabling the semantic checks.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Map a control CSV to keypoints.
    Map {
        controls: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Keep depth in the output.
        #[arg(long)]
        depth: bool,
    },
    /// Export the guidance weight schedule for one keypoint frame as OGF1.
    Guidance(GuidanceArgs),
    /// Compare predicted and ground-truth traces.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metric config (JSON); defaults derived from the templates.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Category for the temporal score.
        #[arg(long)]
        label: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Render per-frame SVGs and a contact sheet.
    Preview {
        keypoints: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub label: String,
    #[arg(long, group = "duration")]
    pub frames: Option<usize>,
    #[arg(long, group = "duration")]
    pub seconds: Option<f64>,
    /// Driving audio length in seconds.
    #[arg(long, group = "duration")]
    pub audio_duration: Option<f64>,
    #[arg(long)]
    pub instructions: Option<String>,
    /// `yaw,pitch,roll` in degrees.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_pose)]
    pub pose: Option<InitialPose>,
    /// Library file; the built-in demo library when absent.
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    pub keypoints: PathBuf,
    /// OGF1 output; a JSON summary is written next to it.
    #[arg(short, long)]
    pub out: PathBuf,
    /// 1-based frame supplying the eye geometry.
    #[arg(long, default_value_t = 1)]
    pub frame: usize,
    /// Image size in pixels, `WIDTHxHEIGHT`.
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    pub image: [usize; 2],
    /// Pixels per latent cell.
    #[arg(long, default_value_t = 8)]
    pub compression: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub omega_hi: Option<f64>,
    #[arg(long)]
    pub omega_lo: Option<f64>,
    #[arg(long)]
    pub omega_bg: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
}

fn parse_pose(s: &str) -> Result<InitialPose, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad angle `{p}`"))
        })
        .collect::<Result<_, _>>()?;
    match v[..] {
        [yaw, pitch, roll] => Ok(InitialPose::new(yaw, pitch, roll)),
        _ => Err("expected yaw,pitch,roll".into()),
    }
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    Ok([w, h])
}

/// Successful run, or one whose result was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Rejected,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::Rejected => 2,
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.fps {
        cfg.fps = f;
    }
    cfg.validate()?;
    match cli.command {
        Command::BuildLib { trace_dir, out } => cmd_build_lib(&trace_dir, &out, &cfg),
        Command::Compile(args) => cmd_compile(&args, &cfg),
        Command::Validate {
            controls,
            plan,
            out,
        } => cmd_validate(&controls, plan.as_deref(), out.as_deref(), &cfg),
        Command::Map {
            controls,
            out,
            depth,
        } => cmd_map(&controls, &out, depth, &cfg),
        Command::Guidance(args) => cmd_guidance(&args, &cfg),
        Command::Eval {
            pred,
            gt,
            metrics,
            label,
            out,
        } => cmd_eval(
            &pred,
            &gt,
            metrics.as_deref(),
            label.as_deref(),
            out.as_deref(),
            &cfg,
        ),
        Command::Preview { keypoints, out_dir } => cmd_preview(&keypoints, &out_dir, &cfg),
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Default)]
struct TracePair {
    controls: Option<PathBuf>,
    keypoints: Option<PathBuf>,
}

/// Groups `<stem>.csv` and `<stem>.keypoints.json` files by stem.
fn trace_pairs(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, TracePair>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut pairs: BTreeMap<PathBuf, TracePair> = BTreeMap::new();
    for f in files {
        let name = f
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(stem) = name.strip_suffix(".keypoints.json") {
            let key = f.with_file_name(stem);
            pairs.entry(key).or_default().keypoints = Some(f);
        } else if let Some(stem) = name.strip_suffix(".csv") {
            let key = f.with_file_name(stem);
            pairs.entry(key).or_default().controls = Some(f);
        }
    }
    Ok(pairs)
}

fn label_for(stem: &Path, meta_label: Option<String>) -> anyhow::Result<String> {
    if let Some(l) = meta_label {
        return Ok(l);
    }
    stem.parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| {
            anyhow!(
                "no label for {}: add one to the metadata or use a label directory",
                stem.display()
            )
        })
}

/// Reads one trace. Controls without keypoints are mapped; 3-D keypoints
/// without controls are inverted.
fn load_trace(stem: &Path, pair: &TracePair, cfg: &PipelineConfig) -> anyhow::Result<Record> {
    let model = DeformationModel::canonical();
    let keypoints = match &pair.keypoints {
        Some(p) => match load_keypoints(p)? {
            Keypoints::Depth(k) => Some(k),
            Keypoints::Flat(_) => bail!("{}: library traces need 3-D keypoints", p.display()),
        },
        None => None,
    };
    let (controls, meta_label) = match &pair.controls {
        Some(p) => (
            load_controls(p, cfg.fps)?,
            load_meta(p)?.and_then(|m| m.label),
        ),
        None => {
            let k = keypoints.as_ref().expect("pair has at least one file");
            (
                invert_controls(k, &NeutralBaseline::canonical(), &model)?,
                None,
            )
        }
    };
    let keypoints = match keypoints {
        Some(k) => k,
        None => map_sequence(&controls, &model)?.1,
    };
    Ok(Record {
        label: label_for(stem, meta_label)?,
        controls,
        keypoints,
    })
}

fn cmd_build_lib(dir: &Path, out: &Path, cfg: &PipelineConfig) -> anyhow::Result<Outcome> {
    let mut records = Vec::new();
    for (stem, pair) in trace_pairs(dir)? {
        records.push(
            load_trace(&stem, &pair, cfg).with_context(|| format!("trace {}", stem.display()))?,
        );
    }
    ensure!(
        !records.is_empty(),
        "no traces found under {}",
        dir.display()
    );
    let lib = build_library(records)?;
    save_library(&lib, out)?;
    eprintln!(
        "wrote {} prototypes over {} labels to {}",
        lib.len(),
        lib.index.len(),
        out.display()
    );
    Ok(Outcome::Ok)
}

fn load_library_or_demo(path: Option<&Path>) -> anyhow::Result<PrototypeLibrary> {
    match path {
        Some(p) => Ok(load_library(p)?),
        None => Ok(demo_library()?),
    }
}

fn cmd_compile(args: &CompileArgs, cfg: &PipelineConfig) -> anyhow::Result<Outcome> {
    let templates = cfg.load_templates()?;
    templates.require(&args.label)?;
    let total_frames = match (args.frames, args.seconds.or(args.audio_duration)) {
        (Some(f), _) => {
            ensure!(f > 0, "--frames must be at least 1");
            f
        }
        (None, Some(s)) => frames_for_seconds(s, cfg.fps)?,
        (None, None) => bail!("give a duration with --frames, --seconds or --audio-duration"),
    };
    let lib = load_library_or_demo(args.library.as_deref())?;
    let req = CompileRequest {
        label: args.label.clone(),
        total_frames,
        instructions: args.instructions.clone(),
        initial_pose: args.pose.unwrap_or_default(),
    };
    let out = compile(cfg, &templates, &lib, &req)?;
    write_outputs(&args.out_dir, cfg, &req, &out)?;
    eprintln!(
        "{}: {} frames, verdict {} after {} edit rounds and {} re-plans",
        req.label,
        total_frames,
        out.audit.verdict.as_str(),
        out.audit.composition_revisions,
        out.audit.replans
    );
    Ok(if out.passed() {
        Outcome::Ok
    } else {
        Outcome::Rejected
    })
}

#[derive(Serialize)]
struct ViolationOut<'a> {
    frame: usize,
    channel: &'a str,
    rule: &'a str,
    message: &'a str,
}

#[derive(Serialize)]
struct ValidateOut<'a> {
    ok: bool,
    frames: usize,
    violations: Vec<ViolationOut<'a>>,
    critic: CriticReport,
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            let written = serde_json::to_writer_pretty(&mut stdout, value)
                .map_err(std::io::Error::from)
                .and_then(|_| writeln!(stdout));
            match written {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other.context("cannot write to stdout")?,
            }
        }
    }
    Ok(())
}

fn cmd_validate(
    controls: &Path,
    plan: Option<&Path>,
    out: Option<&Path>,
    cfg: &PipelineConfig,
) -> anyhow::Result<Outcome> {
    let seq = load_controls(controls, cfg.fps)?;
    let report = validate_sequence(&seq, &cfg.head_limits);
    let critic = match plan {
        Some(p) => {
            let env: PlanEnvelope = read_json(p)?;
            ensure!(
                env.plan.total_frames == seq.len(),
                "plan covers {} frames but the controls have {}",
                env.plan.total_frames,
                seq.len()
            );
            let templates = cfg.load_templates()?;
            templates.require(&env.plan.label)?;
            check(
                &seq,
                &env.plan,
                &env.plan.label,
                env.instructions.as_deref(),
                &templates,
                &cfg.rules,
            )
        }
        None => {
            let empty = Plan {
                label: String::new(),
                fps: seq.fps(),
                total_frames: seq.len(),
                events: Vec::new(),
            };
            check_physiology(&seq, &empty, &cfg.rules)
        }
    };
    let ok = report.ok() && critic.verdict == Verdict::Pass;
    let doc = ValidateOut {
        ok,
        frames: seq.len(),
        violations: report
            .violations
            .iter()
            .map(|v| ViolationOut {
                frame: v.frame,
                channel: &v.channel,
                rule: v.rule,
                message: &v.message,
            })
            .collect(),
        critic,
    };
    emit_json(&doc, out)?;
    Ok(if ok { Outcome::Ok } else { Outcome::Rejected })
}

fn cmd_map(
    controls: &Path,
    out: &Path,
    depth: bool,
    cfg: &PipelineConfig,
) -> anyhow::Result<Outcome> {
    let seq = load_controls(controls, cfg.fps)?;
    let (flat, deep) = map_sequence(&seq, &DeformationModel::canonical())?;
    save_keypoints(
        &if depth {
            Keypoints::Depth(deep)
        } else {
            Keypoints::Flat(flat)
        },
        out,
    )?;
    Ok(Outcome::Ok)
}

fn flat_keypoints(path: &Path) -> anyhow::Result<KeypointSequence> {
    Ok(match load_keypoints(path)? {
        Keypoints::Flat(k) => k,
        Keypoints::Depth(k) => k.project(&DeformationModel::canonical()),
    })
}

#[derive(Serialize)]
struct GuidanceSummary {
    height: usize,
    width: usize,
    frame: usize,
    eye_center: [f64; 2],
    eye_distance: f64,
    params: GuidanceParams,
    rho: Vec<f64>,
    max_weight: Vec<f64>,
    min_weight: Vec<f64>,
}

fn cmd_guidance(args: &GuidanceArgs, cfg: &PipelineConfig) -> anyhow::Result<Outcome> {
    let mut p = cfg.guidance;
    for (slot, v) in [
        (&mut p.omega_hi, args.omega_hi),
        (&mut p.omega_lo, args.omega_lo),
        (&mut p.omega_bg, args.omega_bg),
        (&mut p.alpha, args.alpha),
        (&mut p.gamma, args.gamma),
        (&mut p.kappa, args.kappa),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(s) = args.steps {
        p.steps = s;
    }
    p.validate()?;
    ensure!(args.compression > 0, "--compression must be positive");
    let dims = (
        args.image[1] / args.compression,
        args.image[0] / args.compression,
    );
    ensure!(
        dims.0 > 0 && dims.1 > 0,
        "image smaller than one latent cell"
    );
    let k = flat_keypoints(&args.keypoints)?;
    ensure!(
        (1..=k.frames.len()).contains(&args.frame),
        "frame {} outside 1..={}",
        args.frame,
        k.frames.len()
    );
    let geom = EyeGeometry::from_frame(
        &k.frames[args.frame - 1],
        [args.image[0] as f64, args.image[1] as f64],
        args.compression as f64,
    )?;
    let fields = guidance_schedule(dims, &geom, &p)?;
    let file =
        File::create(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    write_ogf(&fields, BufWriter::new(file))
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    let fold = |f: &gazekit_core::guidance::GuidanceField, init: f64, op: fn(f64, f64) -> f64| {
        f.grid.values.iter().copied().fold(init, op)
    };
    let summary = GuidanceSummary {
        height: dims.0,
        width: dims.1,
        frame: args.frame,
        eye_center: geom.center,
        eye_distance: geom.distance,
        params: p,
        rho: fields.iter().map(|f| f.rho).collect(),
        max_weight: fields
            .iter()
            .map(|f| fold(f, f64::NEG_INFINITY, f64::max))
            .collect(),
        min_weight: fields
            .iter()
            .map(|f| fold(f, f64::INFINITY, f64::min))
            .collect(),
    };
    write_json(&args.out.with_extension("json"), &summary)?;
    Ok(Outcome::Ok)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    metrics: Option<&Path>,
    label: Option<&str>,
    out: Option<&Path>,
    cfg: &PipelineConfig,
) -> anyhow::Result<Outcome> {
    let mcfg = match metrics {
        Some(p) => read_json(p)?,
        None => MetricConfig::from_templates(&cfg.load_templates()?),
    };
    mcfg.validate()?;
    ensure!(
        is_csv(pred) == is_csv(gt),
        "prediction and ground truth must both be control CSVs or both keypoint files"
    );
    let report = if is_csv(pred) {
        let (p, g): (ControlSequence, ControlSequence) =
            (load_controls(pred, cfg.fps)?, load_controls(gt, cfg.fps)?);
        let (pa, ga) = (AuTrace::from_controls(&p), AuTrace::from_controls(&g));
        let model = DeformationModel::canonical();
        let (pk, gk) = (map_sequence(&p, &model)?.0, map_sequence(&g, &model)?.0);
        EvalReport {
            au_f1: Some(au_f1(&pa, &ga, &mcfg)?),
            au_temp: label.map(|l| au_temp(&pa, &ga, l, &mcfg)).transpose()?,
            eye_lmd: Some(eye_lmd(&pk, &gk)?),
        }
    } else {
        ensure!(label.is_none(), "--label needs control CSVs");
        EvalReport {
            au_f1: None,
            au_temp: None,
            eye_lmd: Some(eye_lmd(&flat_keypoints(pred)?, &flat_keypoints(gt)?)?),
        }
    };
    emit_json(&report, out)?;
    Ok(Outcome::Ok)
}

fn cmd_preview(keypoints: &Path, out_dir: &Path, _cfg: &PipelineConfig) -> anyhow::Result<Outcome> {
    let k = flat_keypoints(keypoints)?;
    let written = write_preview(&k, out_dir)?;
    eprintln!("wrote {} files to {}", written.len(), out_dir.display());
    Ok(Outcome::Ok)
}
