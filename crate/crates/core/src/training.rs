//! Two-stage teacher-forced optimization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{MotionSequence, SkeletonSpec};
use crate::edm::{corrupt, pwd, DistanceMatrix, NoiseConfig, Permutation, PoseFrame};
use crate::error::{Result, WipError};
use crate::losses::{tensor as lt, LossReport, LossWeights, Stage};
use crate::model::{Mode, Variant, WipModel};
use crate::optim::{AdamW, AdamWParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    /// Schedule after warmup.
    pub decay: LrDecay,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Measurement corruption; stage one ignores it and trains on clean input.
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    /// Redraw the measurement noise at every epoch.
    pub resample_noise: bool,
    /// Shuffle sensor nodes jointly in inputs and targets (shape-invariant variant).
    pub permute_nodes: bool,
    /// Overrides the model's dropout rate while training.
    pub dropout: Option<f64>,
    /// Save a checkpoint every this many steps when an output directory is given.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            decay: LrDecay::Constant,
            total_steps: 5000,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 32,
            seed: 0,
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            resample_noise: true,
            permute_nodes: false,
            dropout: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(WipError::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(WipError::invalid("learning rate must be positive and weight decay nonnegative"));
        }
        self.noise.validate()
    }

    /// Reads a JSON object; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| WipError::invalid(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Learning rate for the 1-based update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            match self.decay {
                LrDecay::Constant => self.learning_rate,
                LrDecay::Cosine => {
                    let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                    let x = ((step - self.warmup_steps) as f64 / span).min(1.0);
                    0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * x).cos())
                }
            }
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at `total_steps`.
    Cosine,
}

/// Deterministic shuffled mini-batches over `n` items.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(WipError::invalid("batcher needs items and a positive batch size"));
        }
        Ok(Self { n, batch_size, seed })
    }

    /// Batches of epoch `epoch`; the last one may be short.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Endless stream of `(epoch, batch)`.
    pub fn stream(&self) -> impl Iterator<Item = (usize, Vec<usize>)> + '_ {
        (0..).flat_map(move |e| {
            log::debug!("epoch {e} begins");
            self.epoch(e).into_iter().map(move |b| (e, b))
        })
    }
}

/// Per-frame data of one sequence, restricted to the model's output nodes.
#[derive(Clone, Debug)]
struct Track {
    poses: Vec<PoseFrame>,
    dense: Vec<DistanceMatrix>,
    sparse: Vec<DistanceMatrix>,
}

/// Training frames of one or more anchored sequences.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    tracks: Vec<Track>,
    /// `(track, t)` with `t >= window + 1`, so `t - 1` has a full history too.
    index: Vec<(usize, usize)>,
    window: usize,
    variant: Variant,
    num_sensors: usize,
    pub bones: Vec<(usize, usize)>,
    pub anchor_start: usize,
    pub anchor_targets: Vec<[f64; 3]>,
}

impl TrainingSet {
    pub fn new(seqs: &[MotionSequence], spec: &SkeletonSpec, variant: Variant, window: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(WipError::invalid("no training sequences"));
        }
        let sparse_idx = spec.sparse_with_anchors();
        let mut tracks = Vec::new();
        let mut index = Vec::new();
        for (k, seq) in seqs.iter().enumerate() {
            if !seq.has_anchors {
                return Err(WipError::invalid("training sequences need anchors"));
            }
            if seq.len() <= window + 1 {
                return Err(WipError::invalid(format!(
                    "sequence of {} frames is too short for window {window}",
                    seq.len()
                )));
            }
            let dense_full = seq.frames.iter().map(pwd).collect::<Result<Vec<_>>>()?;
            let sparse: Vec<_> = dense_full.iter().map(|d| d.submatrix(&sparse_idx)).collect();
            let (poses, dense) = match variant {
                Variant::SI => (
                    seq.frames.iter().map(|f| f.select(&sparse_idx)).collect(),
                    sparse.clone(),
                ),
                _ => (seq.frames.clone(), dense_full),
            };
            index.extend((window + 1..seq.len()).map(|t| (k, t)));
            tracks.push(Track { poses, dense, sparse });
        }
        let num_nodes = tracks[0].poses[0].len();
        let bones = if variant == Variant::SI { Vec::new() } else { spec.bones.clone() };
        Ok(Self {
            tracks,
            index,
            window,
            variant,
            num_sensors: spec.num_sparse(),
            bones,
            anchor_start: num_nodes - spec.anchor_targets.len(),
            anchor_targets: spec.anchor_targets.iter().map(|v| [v.x, v.y, v.z]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Corrupted measurements for every track under `noise`.
    fn measurements(&self, noise: &NoiseConfig, salt: u64) -> Result<Vec<Vec<DistanceMatrix>>> {
        self.tracks
            .iter()
            .enumerate()
            .map(|(k, tr)| {
                if noise.sigma == 0.0 && noise.window == 1 {
                    return Ok(tr.sparse.clone());
                }
                let cfg = NoiseConfig {
                    seed: noise.seed.wrapping_add(salt.wrapping_mul(1_000_003)).wrapping_add(k as u64),
                    ..noise.clone()
                };
                corrupt(&tr.sparse, &cfg)
            })
            .collect()
    }
}

fn anchor_tensor(set: &TrainingSet, model: &WipModel) -> Result<Tensor> {
    let flat: Vec<f64> = set.anchor_targets.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (set.anchor_targets.len(), 3), model.params.device())?.to_dtype(model.dtype())?)
}

struct Batch {
    past: Tensor,
    current: Tensor,
    pose: Tensor,
    distances: Tensor,
}

fn permuted_pose(p: &PoseFrame, perm: &Permutation) -> PoseFrame {
    let mut out = p.clone();
    for i in 0..p.len() {
        out.points[perm.apply(i)] = p.points[i];
    }
    out
}

fn build_batch(
    model: &WipModel,
    set: &TrainingSet,
    meas: &[Vec<DistanceMatrix>],
    items: &[(usize, usize)],
    perms: Option<&[Permutation]>,
) -> Result<Batch> {
    let w = set.window;
    let mut past_d = Vec::new();
    let mut past_p = Vec::new();
    let mut cur = Vec::new();
    let mut poses = Vec::new();
    let mut dists = Vec::new();
    for (b, &(k, t)) in items.iter().enumerate() {
        let tr = &set.tracks[k];
        let perm = perms.map(|p| &p[b]);
        let pm = |d: &DistanceMatrix| match perm {
            Some(p) => crate::edm::permute(d, p),
            None => Ok(d.clone()),
        };
        let pp = |f: &PoseFrame| match perm {
            Some(p) => permuted_pose(f, p),
            None => f.clone(),
        };
        for s in t - w..t {
            match set.variant {
                Variant::Geo => past_p.push(tr.poses[s].clone()),
                _ => past_d.push(pm(&tr.dense[s])?),
            }
        }
        cur.push(pm(&meas[k][t].clamped())?);
        poses.push(pp(&tr.poses[t]));
        dists.push(pm(&tr.dense[t])?);
    }
    let n = items.len();
    let past = match set.variant {
        Variant::Geo => model.poses_tensor(&past_p)?,
        _ => model.distances_tensor(&past_d)?,
    };
    let (_, r, c) = past.dims3()?;
    Ok(Batch {
        past: past.reshape((n, w, r, c))?,
        current: model.distances_tensor(&cur)?,
        pose: model.poses_tensor(&poses)?,
        distances: model.distances_tensor(&dists)?,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted loss of one batch plus its per-term report. In stage two the
/// batch holds `(t - 1, t)` pairs: the first half is `t - 1`.
fn batch_loss(
    model: &WipModel,
    set: &TrainingSet,
    batch: &Batch,
    anchors: &Tensor,
    weights: &LossWeights,
    stage: Stage,
    mode: &mut Mode,
) -> Result<(Tensor, LossReport)> {
    let out = model.forward(&batch.past, &batch.current, mode, false)?;
    let pose_d = lt::pwd(&out.pose)?;
    let pd = lt::mse(&pose_d, &batch.distances)?;
    let dd = lt::mse(&out.distances, &batch.distances)?;
    let cons = lt::mse(&pose_d, &out.distances)?;
    let refs = lt::refs(&out.pose, set.anchor_start, anchors, 1e-12)?;
    let rig = if set.bones.is_empty() {
        pd.zeros_like()?
    } else {
        lt::rigidity(&out.distances, &batch.distances, &set.bones)?
    };
    let grav = lt::gravity(&out.pose)?;
    let mut total = ((&pd * weights.pd)? + (&dd * weights.dd)?)?;
    total = (total + (&cons * weights.cons)?)?;
    total = (total + (&refs * weights.refs)?)?;
    total = (total + (&rig * weights.rigidity)?)?;
    total = (total + (&grav * weights.gravity)?)?;
    let mut report = LossReport {
        pd: scalar(&pd)?,
        dd: scalar(&dd)?,
        cons: scalar(&cons)?,
        refs: scalar(&refs)?,
        velo: 0.0,
        rigidity: scalar(&rig)?,
        gravity: scalar(&grav)?,
        total: 0.0,
    };
    if stage == Stage::Two {
        let half = out.pose.dim(0)? / 2;
        let velo = lt::velo(
            &out.pose.narrow(0, 0, half)?,
            &out.pose.narrow(0, half, half)?,
            &batch.pose.narrow(0, 0, half)?,
            &batch.pose.narrow(0, half, half)?,
            1e-12,
        )?;
        report.velo = scalar(&velo)?;
        total = (total + (velo * weights.velo)?)?;
    }
    report.total = scalar(&total)?;
    Ok((total, report))
}

/// Loss curve of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, LossReport)>,
    pub epochs: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        LossReport::write_csv(&self.rows, f)
    }
}

/// Result of comparing frozen parameters before and after stage two.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeAudit {
    pub frozen_elements: usize,
    pub total_elements: usize,
    pub changed: Vec<String>,
}

impl FreezeAudit {
    pub fn frozen_fraction(&self) -> f64 {
        self.frozen_elements as f64 / self.total_elements as f64
    }

    pub fn trainable_fraction(&self) -> f64 {
        1.0 - self.frozen_fraction()
    }

    pub fn passed(&self) -> bool {
        self.changed.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "freeze audit: {} of {} parameters frozen, trainable fraction {:.4}, {}",
            self.frozen_elements,
            self.total_elements,
            self.trainable_fraction(),
            if self.passed() { "all frozen parameters unchanged".to_string() } else { format!("{} changed", self.changed.len()) }
        )
    }
}

/// Where to write periodic and last-good checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
}

fn run(
    model: &mut WipModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    stage: Stage,
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(p) = cfg.dropout {
        model.config.dropout = p;
        model.config.validate()?;
    }
    let names = model.trainable(stage);
    let vars: Vec<_> = names.iter().filter_map(|n| model.params.var(n).cloned()).collect();
    let mut opt = AdamW::new(
        vars,
        AdamWParams {
            lr: cfg.lr_at(1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    );
    let anchors = anchor_tensor(set, model)?;
    let batcher = Batcher::new(set.len(), cfg.batch_size, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut perm_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let noise = match stage {
        Stage::One => NoiseConfig::clean(),
        Stage::Two => cfg.noise.clone(),
    };
    let mut log = TrainLog::default();
    let mut meas = set.measurements(&noise, 0)?;
    let mut current_epoch = 0;
    for (step, (epoch, batch)) in (1..=cfg.total_steps).zip(batcher.stream()) {
        if epoch != current_epoch {
            current_epoch = epoch;
            log::info!("{} epoch {epoch} at step {step}", stage.tag());
            if cfg.resample_noise && stage == Stage::Two {
                meas = set.measurements(&noise, epoch as u64)?;
            }
        }
        let mut items: Vec<(usize, usize)> = batch.iter().map(|&i| set.index[i]).collect();
        if stage == Stage::Two {
            let prev: Vec<_> = items.iter().map(|&(k, t)| (k, t - 1)).collect();
            items = prev.into_iter().chain(items).collect();
        }
        let perms: Option<Vec<Permutation>> = (cfg.permute_nodes && set.variant == Variant::SI).then(|| {
            let half = if stage == Stage::Two { items.len() / 2 } else { items.len() };
            let drawn: Vec<Permutation> = (0..half).map(|_| sensor_permutation(set, &mut perm_rng)).collect();
            drawn.iter().cycle().take(items.len()).cloned().collect()
        });
        let b = build_batch(model, set, &meas, &items, perms.as_deref())?;
        let mut mode = Mode::train(&mut dropout_rng);
        if stage == Stage::One {
            mode = mode.holding_trust();
        }
        let (loss, report) = batch_loss(model, set, &b, &anchors, &cfg.weights, stage, &mut mode)?;
        if !report.total.is_finite() {
            if let Some(s) = sink {
                std::fs::create_dir_all(&s.dir)?;
                model.save(s.dir.join("last_good.safetensors"), stage)?;
            }
            return Err(WipError::Numeric(format!("non-finite loss at step {step}")));
        }
        opt.set_learning_rate(cfg.lr_at(step));
        opt.step(&loss.backward()?)?;
        log.rows.push((step, report));
        if let (Some(s), Some(every)) = (sink, cfg.checkpoint_every) {
            if every > 0 && step % every == 0 {
                std::fs::create_dir_all(&s.dir)?;
                model.save(s.dir.join(format!("step_{step:06}.safetensors")), stage)?;
            }
        }
    }
    log.epochs = current_epoch + 1;
    Ok(log)
}

fn sensor_permutation(set: &TrainingSet, rng: &mut ChaCha8Rng) -> Permutation {
    let n = set.tracks[0].poses[0].len();
    let mut head: Vec<usize> = (0..set.num_sensors).collect();
    head.shuffle(rng);
    head.extend(set.num_sensors..n);
    Permutation::new(head).expect("sensor shuffle is a permutation")
}

/// Distance-to-motion training on clean measurements.
pub fn train_stage1(
    model: &mut WipModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    if model.config.stj_sa {
        return Err(WipError::invalid("stage one expects a model without STJ-SA layers"));
    }
    run(model, set, cfg, Stage::One, sink)
}

/// Denoising fine-tune: inserts STJ-SA when missing, trains only the gated
/// cross-attention and STJ-SA groups, then audits every other parameter.
pub fn train_stage2(
    model: &mut WipModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<(TrainLog, FreezeAudit)> {
    if !model.config.stj_sa {
        model.insert_stj_sa(cfg.seed)?;
    }
    let trainable: std::collections::BTreeSet<String> = model.trainable(Stage::Two).into_iter().collect();
    let mut before = BTreeMap::new();
    for name in model.params.names() {
        if !trainable.contains(name) {
            before.insert(name.to_string(), model.params.snapshot(name)?);
        }
    }
    let log = run(model, set, cfg, Stage::Two, sink)?;
    let audit = freeze_audit(model, &before)?;
    if !audit.passed() {
        return Err(WipError::FreezeAudit(format!(
            "frozen parameters changed: {}",
            audit.changed.join(", ")
        )));
    }
    Ok((log, audit))
}

/// Compares current values against snapshots taken before training.
pub fn freeze_audit(model: &WipModel, before: &BTreeMap<String, Vec<f64>>) -> Result<FreezeAudit> {
    let mut changed = Vec::new();
    let mut frozen = 0;
    for (name, old) in before {
        let now = model.params.snapshot(name)?;
        frozen += old.len();
        let same = now.len() == old.len() && now.iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            changed.push(name.clone());
        }
    }
    Ok(FreezeAudit { frozen_elements: frozen, total_elements: model.num_parameters(), changed })
}

/// Mean loss report over the whole set in evaluation mode.
pub fn evaluate_set(model: &WipModel, set: &TrainingSet, noise: &NoiseConfig, weights: &LossWeights, batch_size: usize) -> Result<LossReport> {
    let anchors = anchor_tensor(set, model)?;
    let meas = set.measurements(noise, 0)?;
    let mut acc = LossReport::default();
    let mut count = 0.0;
    for chunk in set.index.chunks(batch_size.max(1)) {
        let b = build_batch(model, set, &meas, chunk, None)?;
        let (_, r) = batch_loss(model, set, &b, &anchors, weights, Stage::One, &mut Mode::eval().holding_trust())?;
        let n = chunk.len() as f64;
        acc.pd += r.pd * n;
        acc.dd += r.dd * n;
        acc.cons += r.cons * n;
        acc.refs += r.refs * n;
        acc.rigidity += r.rigidity * n;
        acc.gravity += r.gravity * n;
        acc.total += r.total * n;
        count += n;
    }
    for v in [&mut acc.pd, &mut acc.dd, &mut acc.cons, &mut acc.refs, &mut acc.rigidity, &mut acc.gravity, &mut acc.total] {
        *v /= count;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(250), 0.5e-4);
        assert_eq!(cfg.lr_at(500), 1e-4);
        assert_eq!(cfg.lr_at(10_000), 1e-4);
        let cos = TrainConfig { decay: LrDecay::Cosine, total_steps: 1500, ..cfg.clone() };
        assert_eq!(cos.lr_at(500), 1e-4);
        assert!((cos.lr_at(1000) - 0.5e-4).abs() < 1e-18);
        assert!(cos.lr_at(1500).abs() < 1e-18);
        assert_eq!((cfg.learning_rate, cfg.weight_decay, cfg.warmup_steps), (1e-4, 1e-3, 500));
    }

    #[test]
    fn batcher_properties() {
        let b = Batcher::new(10, 3, 42).unwrap();
        assert_eq!(b.epoch(0), Batcher::new(10, 3, 42).unwrap().epoch(0));
        assert_ne!(b.epoch(0), b.epoch(1));
        let all: Vec<usize> = b.epoch(3).into_iter().flatten().collect();
        let set: BTreeSet<_> = all.iter().copied().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(set, (0..10).collect());
        let big = Batcher::new(4, 100, 1).unwrap().epoch(0);
        assert_eq!(big.len(), 1);
        assert_eq!(big[0].len(), 4);
        let s: Vec<_> = b.stream().take(5).map(|(e, _)| e).collect();
        assert_eq!(s, vec![0, 0, 0, 0, 1]);
    }

    #[test]
    fn config_json_defaults() {
        let cfg = TrainConfig::from_json(r#"{"total_steps": 7, "batch_size": 4}"#).unwrap();
        assert_eq!(cfg.total_steps, 7);
        assert_eq!(cfg.warmup_steps, 500);
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json("not json").is_err());
    }
}
