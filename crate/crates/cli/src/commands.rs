use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use wip_core::dataio::{
    attach_anchors, generate_synthetic, load_sequence, preprocess, read_matrix_stream, read_pose_stream,
    save_sequence, write_matrix_stream, write_pose_stream, LowerBodyMode, MotionKind, MotionSequence,
};
use wip_core::edm::{corrupt as corrupt_stream, eigen_report, pwd, DistanceMatrix, NoiseConfig};
use wip_core::inference::{baseline_for_spec, run_stream, FeedbackSource, InferenceConfig};
use wip_core::metrics::{drift_curves, MetricReport};
use wip_core::model::{CrossAttention, ModelConfig, Variant, WipModel};
use wip_core::training::{train_stage1, train_stage2, CheckpointSink, TrainConfig, TrainingSet};
use wip_core::{DType, SkeletonSpec, Stage, WipError};

use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::{AnalyzeArgs, CorruptArgs, EvalArgs, FeedbackArg, InferArgs, LowerBody, SynthArgs, TrainArgs};

pub const SEQUENCE_FILE: &str = "sequence.wipseq";
pub const DISTANCES_FILE: &str = "distances.txt";
pub const MODEL_FILE: &str = "model.safetensors";
pub const LOSS_FILE: &str = "loss.csv";
pub const POSES_FILE: &str = "poses.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DRIFT_FILE: &str = "drift.csv";
pub const ANALYSIS_FILE: &str = "analysis.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

fn spec_for(lb: LowerBody) -> SkeletonSpec {
    SkeletonSpec::human(match lb {
        LowerBody::Feet => LowerBodyMode::Feet,
        LowerBody::Knees => LowerBodyMode::Knees,
    })
}

fn out_dir(p: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(p)?;
    Ok(p.to_path_buf())
}

fn writer(p: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(p)?))
}

/// Loads a sequence and brings it into the normalized, anchored frame.
fn load_anchored(path: &Path, spec: &SkeletonSpec) -> Result<MotionSequence, CliError> {
    let seq = load_sequence(path)?;
    if seq.num_joints() != spec.num_joints() {
        return Err(WipError::InvalidInput(format!(
            "{}: {} joints, skeleton has {}",
            path.display(),
            seq.num_joints(),
            spec.num_joints()
        ))
        .into());
    }
    if seq.has_anchors {
        return Ok(seq);
    }
    Ok(attach_anchors(&preprocess(&seq, spec)?, spec)?)
}

fn sensor_stream(seq: &MotionSequence, spec: &SkeletonSpec) -> Result<Vec<DistanceMatrix>, CliError> {
    let idx = spec.sparse_with_anchors();
    Ok(seq
        .frames
        .iter()
        .map(|f| pwd(&f.select(&idx)))
        .collect::<wip_core::Result<Vec<_>>>()?)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let kind: MotionKind = a.kind.parse()?;
    let spec = spec_for(a.lower_body);
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::new(
        "synth",
        json!({"kind": kind.name(), "duration": a.duration, "fps": a.fps, "raw": a.raw}),
    );
    m.seed(a.seed);
    let mut seq = generate_synthetic(kind, a.duration, a.fps, a.seed)?;
    if !a.raw {
        seq = attach_anchors(&preprocess(&seq, &spec)?, &spec)?;
    }
    let path = dir.join(SEQUENCE_FILE);
    save_sequence(&seq, &path)?;
    m.output(&path);
    println!("wrote {} frames to {}", seq.len(), path.display());
    m.finish(&dir)
}

pub fn corrupt(a: &CorruptArgs) -> Result<(), CliError> {
    let spec = spec_for(a.lower_body);
    let noise = NoiseConfig::new(a.sigma, a.window, a.seed)?;
    let seq = load_anchored(&a.input, &spec)?;
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::new("corrupt", json!({"sigma": a.sigma, "window": a.window}));
    m.seed(a.seed).input(&a.input);
    let clean = sensor_stream(&seq, &spec)?;
    let noisy = corrupt_stream(&clean, &noise)?;
    let path = dir.join(DISTANCES_FILE);
    let mut w = writer(&path)?;
    write_matrix_stream(&noisy, None, &mut w)?;
    w.flush()?;
    m.output(&path);
    m.finish(&dir)
}

/// Model fields a config file may override.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub num_blocks: Option<usize>,
    pub channels: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub window: Option<usize>,
    pub ff_mult: Option<usize>,
    pub cross_attention: Option<CrossAttention>,
    pub gating: Option<bool>,
    pub pwd_head: Option<bool>,
    /// Offset the pose head from the classical sensor placement (default on).
    pub pose_skip: Option<bool>,
}

impl ModelOverrides {
    fn apply(&self, mut c: ModelConfig, spec: &SkeletonSpec) -> ModelConfig {
        if self.pose_skip.unwrap_or(true) {
            c = c.with_pose_skip(spec);
        }
        c.num_blocks = self.num_blocks.unwrap_or(c.num_blocks);
        c.channels = self.channels.unwrap_or(c.channels);
        c.heads = self.heads.unwrap_or(c.heads);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.window = self.window.unwrap_or(c.window);
        c.ff_mult = self.ff_mult.unwrap_or(c.ff_mult);
        c.cross_attention = self.cross_attention.unwrap_or(c.cross_attention);
        c.gating = self.gating.unwrap_or(c.gating);
        c.pwd_head = self.pwd_head.unwrap_or(c.pwd_head);
        c
    }

    /// Fields set here that disagree with an existing model.
    fn conflicts(&self, c: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut chk = |set: bool, same: bool, name: &'static str| {
            if set && !same {
                out.push(name);
            }
        };
        chk(self.num_blocks.is_some(), self.num_blocks == Some(c.num_blocks), "num_blocks");
        chk(self.channels.is_some(), self.channels == Some(c.channels), "channels");
        chk(self.heads.is_some(), self.heads == Some(c.heads), "heads");
        chk(self.window.is_some(), self.window == Some(c.window), "window");
        chk(self.ff_mult.is_some(), self.ff_mult == Some(c.ff_mult), "ff_mult");
        chk(self.cross_attention.is_some(), self.cross_attention == Some(c.cross_attention), "cross_attention");
        chk(self.gating.is_some(), self.gating == Some(c.gating), "gating");
        chk(self.pwd_head.is_some(), self.pwd_head == Some(c.pwd_head), "pwd_head");
        chk(self.pose_skip.is_some(), self.pose_skip == Some(c.pose_skip.is_some()), "pose_skip");
        out
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<String>,
    pub model: ModelOverrides,
    pub train: TrainConfig,
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(p)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| WipError::InvalidInput(format!("{}: {e}", p.display())))?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut rc = read_run_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        rc.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    let stage = if a.stage == 1 { Stage::One } else { Stage::Two };
    match (stage, &a.init) {
        (Stage::Two, None) => return Err(CliError::Usage("stage 2 needs --init with a stage-1 checkpoint".into())),
        (Stage::One, Some(_)) => return Err(CliError::Usage("--init is only used by stage 2".into())),
        _ => {}
    }
    let spec = spec_for(a.lower_body);
    let seqs = a
        .data
        .iter()
        .map(|p| load_anchored(p, &spec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = match (&a.init, stage) {
        (Some(init), Stage::Two) => {
            let (model, tag) = WipModel::load(init)?;
            if tag != Stage::One {
                return Err(WipError::Checkpoint(format!("{} is not a stage-1 checkpoint", init.display())).into());
            }
            let bad = rc.model.conflicts(&model.config);
            if !bad.is_empty() {
                return Err(WipError::Checkpoint(format!("config disagrees with checkpoint on {}", bad.join(", "))).into());
            }
            if let Some(v) = &rc.variant {
                if v.parse::<Variant>()? != model.config.variant {
                    return Err(WipError::Checkpoint("config variant disagrees with checkpoint".into()).into());
                }
            }
            model
        }
        _ => {
            let variant: Variant = rc.variant.as_deref().unwrap_or("wip-h").parse()?;
            let cfg = rc.model.apply(ModelConfig::human(variant), &spec);
            WipModel::new(cfg, rc.train.seed, DType::F32)?
        }
    };
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::new(
        "train",
        json!({"stage": a.stage, "model": &model.config, "train": &rc.train}),
    );
    m.seed(rc.train.seed);
    for p in &a.data {
        m.input(p);
    }
    if let Some(p) = &a.init {
        m.input(p);
    }
    let set = TrainingSet::new(&seqs, &spec, model.config.variant, model.config.window)?;
    let sink = CheckpointSink { dir: dir.join("checkpoints") };
    let log = match stage {
        Stage::One => train_stage1(&mut model, &set, &rc.train, Some(&sink))?,
        Stage::Two => {
            let (log, audit) = train_stage2(&mut model, &set, &rc.train, Some(&sink))?;
            println!("{}", audit.summary());
            m.notes(json!({
                "frozen_elements": audit.frozen_elements,
                "total_elements": audit.total_elements,
                "trainable_fraction": audit.trainable_fraction(),
            }));
            log
        }
    };
    let ckpt = dir.join(MODEL_FILE);
    model.save(&ckpt, stage)?;
    let loss = dir.join(LOSS_FILE);
    log.write_csv(&loss)?;
    if let Some((step, last)) = log.rows.last() {
        println!("step {step}: total loss {:.6}", last.total);
    }
    m.output(&ckpt).output(&loss);
    m.finish(&dir)
}

fn read_stream(p: &Path) -> Result<Vec<DistanceMatrix>, CliError> {
    if p == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(read_matrix_stream(&buf[..])?)
    } else {
        Ok(read_matrix_stream(BufReader::new(File::open(p)?))?)
    }
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let spec = spec_for(a.lower_body);
    let stream = read_stream(&a.stream)?;
    if stream.is_empty() {
        return Err(WipError::InvalidInput("empty distance stream".into()).into());
    }
    let dir = out_dir(&a.out)?;
    let started = Instant::now();
    let (poses, cfg_echo) = if a.baseline {
        let out = baseline_for_spec(&stream, &spec)?;
        if !out.degenerate.is_empty() {
            log::warn!("{} degenerate frames held", out.degenerate.len());
        }
        (out.poses, json!({"method": "mds-procrustes"}))
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("--checkpoint is required unless --baseline is given".into()))?;
        let (model, stage) = WipModel::load(ckpt)?;
        let ic = InferenceConfig {
            feedback: match a.feedback {
                FeedbackArg::Pose => FeedbackSource::PosePwd,
                FeedbackArg::Head => FeedbackSource::HeadPwd,
            },
            smooth: !a.no_smooth,
            ..Default::default()
        };
        let poses = run_stream(&model, &spec, &stream, &ic)?;
        (poses, json!({"method": "model", "stage": stage.tag(), "inference": ic}))
    };
    let secs = started.elapsed().as_secs_f64();
    let fps = stream.len() as f64 / secs.max(1e-9);
    eprintln!("{} frames in {:.2} s ({:.1} frames/s)", stream.len(), secs, fps);
    let path = dir.join(POSES_FILE);
    let mut w = writer(&path)?;
    write_pose_stream(&poses, &mut w)?;
    w.flush()?;
    let mut m = ManifestBuilder::new("infer", cfg_echo);
    m.input(&a.stream).output(&path).notes(json!({"frames_per_second": fps}));
    if let Some(c) = &a.checkpoint {
        m.input(c);
    }
    m.finish(&dir)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let spec = spec_for(a.lower_body);
    let pred = read_pose_stream(BufReader::new(File::open(&a.pred)?))?;
    let gt = load_anchored(&a.gt, &spec)?;
    if pred.len() != gt.len() {
        return Err(WipError::InvalidInput(format!("{} predicted frames, {} ground-truth frames", pred.len(), gt.len())).into());
    }
    if pred.first().map(|p| p.len()).unwrap_or(0) < spec.num_joints() {
        return Err(WipError::InvalidInput(format!(
            "predictions need at least {} nodes for dense metrics",
            spec.num_joints()
        ))
        .into());
    }
    let pred_pwd = match &a.pred_pwd {
        Some(p) => Some(read_stream(p)?),
        None => None,
    };
    let report = MetricReport::compute(&pred, &gt.frames, &spec, gt.fps, gt.scale, pred_pwd.as_deref())?;
    let dir = out_dir(&a.out)?;
    let path = dir.join(METRICS_FILE);
    let mut w = writer(&path)?;
    writeln!(w, "{}", MetricReport::CSV_HEADER)?;
    writeln!(w, "{}", report.csv_row())?;
    w.flush()?;
    let curves = drift_curves(&pred, &gt.frames, spec.pelvis(), gt.fps)?.scaled(gt.scale * 100.0);
    let drift = dir.join(DRIFT_FILE);
    let mut w = writer(&drift)?;
    curves.write_csv(&mut w)?;
    w.flush()?;
    println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
    let mut m = ManifestBuilder::new("eval", json!({}));
    m.input(&a.pred).input(&a.gt).output(&path).output(&drift);
    m.finish(&dir)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be positive".into()));
    }
    let stream = read_stream(&a.stream)?;
    if stream.is_empty() {
        return Err(WipError::InvalidInput("empty distance stream".into()).into());
    }
    let dir = out_dir(&a.out)?;
    let path = dir.join(ANALYSIS_FILE);
    let mut w = writer(&path)?;
    writeln!(w, "frame,cev1,cev2,cev3,cev4,cev5,tis")?;
    let mut cev3 = Vec::with_capacity(stream.len());
    let mut tis = Vec::with_capacity(stream.len());
    for (t, d) in stream.iter().enumerate() {
        let r = eigen_report(d)?;
        writeln!(
            w,
            "{t},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.cev[0], r.cev[1], r.cev[2], r.cev[3], r.cev[4], r.tis
        )?;
        cev3.push(r.cev(3));
        tis.push(r.tis);
    }
    w.flush()?;
    let hist = dir.join(HISTOGRAM_FILE);
    let mut w = writer(&hist)?;
    writeln!(w, "bin_lo,bin_hi,cev3_count,tis_count")?;
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * a.bins as f64) as usize).min(a.bins - 1);
    let mut hc = vec![0usize; a.bins];
    let mut ht = vec![0usize; a.bins];
    for (&c, &t) in cev3.iter().zip(&tis) {
        hc[bin(c)] += 1;
        ht[bin(t)] += 1;
    }
    for b in 0..a.bins {
        let lo = b as f64 / a.bins as f64;
        let hi = (b + 1) as f64 / a.bins as f64;
        writeln!(w, "{lo:.4},{hi:.4},{},{}", hc[b], ht[b])?;
    }
    w.flush()?;
    let n = stream.len() as f64;
    println!(
        "frames {} CEV(3)={:.3} TIS={:.3}",
        stream.len(),
        cev3.iter().sum::<f64>() / n,
        tis.iter().sum::<f64>() / n
    );
    let mut m = ManifestBuilder::new("analyze", json!({"bins": a.bins}));
    m.input(&a.stream).output(&path).output(&hist);
    m.finish(&dir)
}
