//! Autoregressive generation, output smoothing and the classical baseline.

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataio::SkeletonSpec;
use crate::edm::{centered_gram, classical_mds, procrustes_align, pwd, DistanceMatrix, PoseFrame};
use crate::error::{Result, WipError};
use crate::model::{Feedback, Variant, WipModel};

/// What the model sees of its own previous prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackSource {
    /// Pairwise distances of the predicted pose, anchors included.
    PosePwd,
    /// The PWD head output.
    HeadPwd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub feedback: FeedbackSource,
    /// Width of the half-normal smoothing kernel, in frames.
    pub smoothing_sigma: f64,
    pub smooth: bool,
    /// Fixed-point passes used to seed the feedback buffer.
    pub warm_iterations: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { feedback: FeedbackSource::PosePwd, smoothing_sigma: 1.5, smooth: true, warm_iterations: 16 }
    }
}

/// Normalized half-normal weights for lags `0..n`, newest first.
pub fn smoothing_weights(n: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// Weighted average of recent poses, `poses[0]` being the newest.
pub fn smooth(poses: &[PoseFrame], sigma: f64) -> Result<PoseFrame> {
    let first = poses.first().ok_or_else(|| WipError::invalid("nothing to smooth"))?;
    if poses.iter().any(|p| p.len() != first.len()) {
        return Err(WipError::invalid("poses of different sizes"));
    }
    let w = smoothing_weights(poses.len(), sigma);
    let mut out = vec![Vector3::zeros(); first.len()];
    for (p, wk) in poses.iter().zip(&w) {
        for (o, q) in out.iter_mut().zip(&p.points) {
            *o += q * *wk;
        }
    }
    Ok(PoseFrame::new(out))
}

#[derive(Clone, Debug)]
enum FeedbackBuffer {
    Distances(Vec<DistanceMatrix>),
    Poses(Vec<PoseFrame>),
}

/// Rolling state of one stream.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    feedback: FeedbackBuffer,
    /// Newest first, at most `window / 2` raw predictions.
    recent: VecDeque<PoseFrame>,
    pub frame: usize,
    window: usize,
    last_raw: Option<PoseFrame>,
}

impl GeneratorState {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn feedback_len(&self) -> usize {
        match &self.feedback {
            FeedbackBuffer::Distances(d) => d.len(),
            FeedbackBuffer::Poses(p) => p.len(),
        }
    }

    pub fn smoothing_len(&self) -> usize {
        self.recent.len()
    }

    /// Unsmoothed prediction of the latest step.
    pub fn last_raw(&self) -> Option<&PoseFrame> {
        self.last_raw.as_ref()
    }
}

/// Output node `i` borrows the measured row of the nearest sensor in the
/// skeleton tree; anchors map to themselves.
pub fn proxy_nodes(spec: &SkeletonSpec, num_outputs: usize) -> Vec<usize> {
    let sparse = spec.sparse_with_anchors();
    if num_outputs == sparse.len() {
        return (0..num_outputs).collect();
    }
    let j = spec.num_joints();
    let mut adj = vec![Vec::new(); j];
    for &(a, b) in &spec.bones {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut out = Vec::with_capacity(num_outputs);
    for node in 0..num_outputs {
        if node >= j {
            out.push(spec.num_sparse() + (node - j));
            continue;
        }
        let mut dist = vec![usize::MAX; j];
        let mut queue = VecDeque::from([node]);
        dist[node] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let best = (0..spec.num_sparse())
            .min_by_key(|&s| (dist[spec.sparse_indices[s]], s))
            .expect("at least one sensor");
        out.push(best);
    }
    out
}

/// Rough dense pose from one measurement: classical reconstruction of the
/// sensors, every other joint placed on its proxy sensor.
pub fn lift_measurement(m: &DistanceMatrix, spec: &SkeletonSpec, num_outputs: usize) -> Result<PoseFrame> {
    let anchors: Vec<usize> = (spec.num_sparse()..m.size()).collect();
    let base = baseline_frame(m, &anchors, &anchor_frame(spec), None)?;
    let proxies = proxy_nodes(spec, num_outputs);
    Ok(PoseFrame::new(proxies.iter().map(|&p| base.pose.points[p]).collect()))
}

fn anchor_frame(spec: &SkeletonSpec) -> PoseFrame {
    PoseFrame::new(spec.anchor_targets.to_vec())
}

fn feedback_of(model: &WipModel, cfg: &InferenceConfig, pose: &PoseFrame, head: &DistanceMatrix) -> Result<FeedbackItem> {
    Ok(match (model.config.variant, cfg.feedback) {
        (Variant::Geo, _) => FeedbackItem::Pose(pose.clone()),
        (_, FeedbackSource::PosePwd) => FeedbackItem::Distances(pwd(pose)?),
        (_, FeedbackSource::HeadPwd) => FeedbackItem::Distances(head.clone()),
    })
}

enum FeedbackItem {
    Distances(DistanceMatrix),
    Pose(PoseFrame),
}

fn predict(model: &WipModel, buf: &FeedbackBuffer, m: &DistanceMatrix) -> Result<(PoseFrame, DistanceMatrix)> {
    match buf {
        FeedbackBuffer::Distances(d) => model.predict(Feedback::Distances(d), m),
        FeedbackBuffer::Poses(p) => model.predict(Feedback::Poses(p), m),
    }
}

fn push_window<T>(buf: &mut Vec<T>, x: T, window: usize) {
    buf.push(x);
    if buf.len() > window {
        buf.remove(0);
    }
}

fn push(buf: &mut FeedbackBuffer, item: FeedbackItem, window: usize) {
    match (buf, item) {
        (FeedbackBuffer::Distances(d), FeedbackItem::Distances(x)) => push_window(d, x, window),
        (FeedbackBuffer::Poses(p), FeedbackItem::Pose(x)) => push_window(p, x, window),
        _ => unreachable!("feedback kind is fixed per model"),
    }
}

fn filled(item: FeedbackItem, window: usize) -> FeedbackBuffer {
    match item {
        FeedbackItem::Distances(d) => FeedbackBuffer::Distances(vec![d; window]),
        FeedbackItem::Pose(p) => FeedbackBuffer::Poses(vec![p; window]),
    }
}

/// Seeds the feedback buffer without any ground-truth pose: the first
/// measurement is lifted to a rough dense pose, iterated through the model
/// to a fixed point, and the first `w` measurements are then run teacher-free.
/// Returns the state and the outputs for those `w` frames.
pub fn warm_start(
    model: &WipModel,
    spec: &SkeletonSpec,
    first: &[DistanceMatrix],
    cfg: &InferenceConfig,
) -> Result<(GeneratorState, Vec<PoseFrame>)> {
    let w = model.config.window;
    if first.len() < w {
        return Err(WipError::Underflow { needed: w, got: first.len() });
    }
    let lifted = lift_measurement(&first[0], spec, model.config.j_out)?;
    let mut item = match model.config.variant {
        Variant::Geo => FeedbackItem::Pose(lifted),
        _ => FeedbackItem::Distances(pwd(&lifted)?),
    };
    for _ in 0..cfg.warm_iterations {
        let buf = filled(item, w);
        let (pose, head) = predict(model, &buf, &first[0])?;
        item = feedback_of(model, cfg, &pose, &head)?;
    }
    let mut state = GeneratorState {
        feedback: filled(item, w),
        recent: VecDeque::new(),
        frame: 0,
        window: w,
        last_raw: None,
    };
    let mut out = Vec::with_capacity(w);
    for m in &first[..w] {
        out.push(step(&mut state, model, m, cfg)?);
    }
    Ok((state, out))
}

/// One autoregressive step; returns the smoothed pose.
pub fn step(state: &mut GeneratorState, model: &WipModel, m: &DistanceMatrix, cfg: &InferenceConfig) -> Result<PoseFrame> {
    let (pose, head) = predict(model, &state.feedback, m)?;
    if !pose.is_finite() {
        return Err(WipError::Numeric(format!("non-finite prediction at frame {}", state.frame)));
    }
    push(&mut state.feedback, feedback_of(model, cfg, &pose, &head)?, state.window);
    state.recent.push_front(pose.clone());
    state.recent.truncate((state.window / 2).max(1));
    state.frame += 1;
    state.last_raw = Some(pose.clone());
    if cfg.smooth {
        smooth(state.recent.make_contiguous(), cfg.smoothing_sigma)
    } else {
        Ok(pose)
    }
}

/// Full stream: warm start on the first `w` measurements, then one step per frame.
pub fn run_stream(
    model: &WipModel,
    spec: &SkeletonSpec,
    stream: &[DistanceMatrix],
    cfg: &InferenceConfig,
) -> Result<Vec<PoseFrame>> {
    let w = model.config.window;
    let (mut state, mut out) = warm_start(model, spec, stream, cfg)?;
    for m in &stream[w..] {
        out.push(step(&mut state, model, m, cfg)?);
    }
    Ok(out)
}

/// One reconstructed frame of the classical baseline.
#[derive(Clone, Debug)]
pub struct BaselineFrame {
    pub pose: PoseFrame,
    /// Whether the anchor-plane mirror of the aligned embedding was chosen.
    pub mirrored: bool,
}

fn mirror_z(p: &PoseFrame) -> PoseFrame {
    p.map(|q| Vector3::new(q.x, q.y, -q.z))
}

fn non_anchor_mean_z(p: &PoseFrame, anchors: &[usize]) -> f64 {
    let zs: Vec<f64> = (0..p.len()).filter(|i| !anchors.contains(i)).map(|i| p.points[i].z).collect();
    if zs.is_empty() {
        0.0
    } else {
        zs.iter().sum::<f64>() / zs.len() as f64
    }
}

/// Classical reconstruction of one frame. With anchors the embedding is
/// pinned to `anchor_targets` and the mirror ambiguity resolved by gravity;
/// without anchors it is aligned to `previous`.
pub fn baseline_frame(
    d: &DistanceMatrix,
    anchors: &[usize],
    anchor_targets: &PoseFrame,
    previous: Option<&BaselineFrame>,
) -> Result<BaselineFrame> {
    let d = d.clamped();
    let mut eig: Vec<f64> = centered_gram(&d).symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let top = eig.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eig.iter().take(3).filter(|&&v| v > 1e-9 * top && top > 0.0).count();
    if rank < 3 {
        return Err(WipError::DegenerateGeometry { rank, message: "embedding is not 3-dimensional".into() });
    }
    let x = classical_mds(&d, 3)?;
    if anchors.is_empty() {
        let pose = match previous {
            Some(prev) => procrustes_align(&x, &prev.pose, false, true)?.aligned,
            None => x,
        };
        return Ok(BaselineFrame { pose, mirrored: false });
    }
    let fit = procrustes_align(&x.select(anchors), anchor_targets, false, true)?;
    let aligned = fit.transform.apply_frame(&x);
    let mean_z = non_anchor_mean_z(&aligned, anchors);
    let mirrored = if mean_z.abs() < 1e-9 {
        previous.map(|p| p.mirrored).unwrap_or(false)
    } else {
        mean_z < 0.0
    };
    let pose = if mirrored { mirror_z(&aligned) } else { aligned };
    Ok(BaselineFrame { pose, mirrored })
}

/// Baseline output per frame, with the frames whose embedding was degenerate.
#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub poses: Vec<PoseFrame>,
    pub degenerate: Vec<usize>,
}

/// Per-frame classical reconstruction of a measured stream. Degenerate frames
/// hold the previous pose.
pub fn mds_procrustes_baseline(
    stream: &[DistanceMatrix],
    anchors: &[usize],
    anchor_targets: &PoseFrame,
) -> Result<BaselineOutput> {
    let mut prev: Option<BaselineFrame> = None;
    let mut poses = Vec::with_capacity(stream.len());
    let mut degenerate = Vec::new();
    for (t, d) in stream.iter().enumerate() {
        match baseline_frame(d, anchors, anchor_targets, prev.as_ref()) {
            Ok(f) => {
                poses.push(f.pose.clone());
                prev = Some(f);
            }
            Err(WipError::DegenerateGeometry { rank, message }) => {
                let Some(p) = &prev else {
                    return Err(WipError::DegenerateGeometry { rank, message: format!("first frame: {message}") });
                };
                degenerate.push(t);
                poses.push(p.pose.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BaselineOutput { poses, degenerate })
}

/// Baseline for sensor-plus-anchor measurements laid out as in [`SkeletonSpec::sparse_with_anchors`].
pub fn baseline_for_spec(stream: &[DistanceMatrix], spec: &SkeletonSpec) -> Result<BaselineOutput> {
    let n = spec.num_sparse();
    let anchors: Vec<usize> = (n..n + spec.anchor_targets.len()).collect();
    mds_procrustes_baseline(stream, &anchors, &anchor_frame(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{attach_anchors, generate_synthetic, preprocess, LowerBodyMode, MotionKind};
    use crate::model::ModelConfig;
    use candle_core::DType;

    fn walk() -> (SkeletonSpec, Vec<PoseFrame>) {
        let spec = SkeletonSpec::human(LowerBodyMode::Feet);
        let raw = generate_synthetic(MotionKind::Walk, 2.0, 60.0, 3).unwrap();
        let seq = attach_anchors(&preprocess(&raw, &spec).unwrap(), &spec).unwrap();
        (spec, seq.frames)
    }

    fn max_err(a: &PoseFrame, b: &PoseFrame) -> f64 {
        a.points.iter().zip(&b.points).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn weights_sum_to_one_and_identity_on_constant() {
        let w = smoothing_weights(8, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
        let p = PoseFrame::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let s = smooth(&vec![p.clone(); 8], 1.5).unwrap();
        assert!(max_err(&s, &p) < 1e-15);
    }

    #[test]
    fn linear_signal_lags_by_mean_lag() {
        let w = smoothing_weights(8, 1.5);
        let lag: f64 = w.iter().enumerate().map(|(k, wk)| k as f64 * wk).sum();
        let v = Vector3::new(0.3, -0.1, 0.05);
        let t_now = 20.0;
        let poses: Vec<_> = (0..8)
            .map(|k| PoseFrame::new(vec![v * (t_now - k as f64)]))
            .collect();
        let s = smooth(&poses, 1.5).unwrap();
        assert!((s.points[0] - v * (t_now - lag)).norm() < 1e-12);
    }

    #[test]
    fn baseline_exact_on_clean_walk_and_mirror() {
        let (spec, frames) = walk();
        let idx = spec.sparse_with_anchors();
        let stream: Vec<_> = frames.iter().map(|f| pwd(&f.select(&idx)).unwrap()).collect();
        let out = baseline_for_spec(&stream, &spec).unwrap();
        assert!(out.degenerate.is_empty());
        for (p, f) in out.poses.iter().zip(&frames) {
            assert!(max_err(p, &f.select(&idx)) < 1e-6);
        }
        let mirrored: Vec<_> = frames
            .iter()
            .map(|f| pwd(&mirror_z(&f.select(&idx)).map(|q| Vector3::new(-q.x, q.y, q.z))).unwrap())
            .collect();
        let out2 = baseline_for_spec(&mirrored, &spec).unwrap();
        for (a, b) in out.poses.iter().zip(&out2.poses) {
            assert!(max_err(a, b) < 1e-6);
        }
    }

    #[test]
    fn baseline_holds_degenerate_frames() {
        let (spec, frames) = walk();
        let idx = spec.sparse_with_anchors();
        let mut stream: Vec<_> = frames.iter().take(3).map(|f| pwd(&f.select(&idx)).unwrap()).collect();
        let flat = PoseFrame::new((0..9).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect());
        stream[1] = pwd(&flat).unwrap();
        let out = baseline_for_spec(&stream, &spec).unwrap();
        assert_eq!(out.degenerate, vec![1]);
        assert_eq!(out.poses[1], out.poses[0]);
        assert!(baseline_for_spec(&stream[1..2], &spec).is_err());
    }

    #[test]
    fn proxies_point_at_sensors() {
        let spec = SkeletonSpec::human(LowerBodyMode::Feet);
        let p = proxy_nodes(&spec, 27);
        assert_eq!(p[0], 0);
        assert_eq!(p[15], 1);
        assert_eq!(p[22], 2);
        assert_eq!(p[10], 4);
        assert_eq!(&p[24..], &[6, 7, 8]);
        assert!(p.iter().all(|&s| s < 9));
    }

    #[test]
    fn warm_start_underflow_and_counters() {
        let (spec, frames) = walk();
        let mut cfg = ModelConfig::human(Variant::H);
        cfg.num_blocks = 1;
        cfg.window = 4;
        let model = WipModel::new(cfg, 0, DType::F32).unwrap();
        let idx = spec.sparse_with_anchors();
        let stream: Vec<_> = frames.iter().take(10).map(|f| pwd(&f.select(&idx)).unwrap()).collect();
        let ic = InferenceConfig::default();
        assert!(matches!(
            warm_start(&model, &spec, &stream[..3], &ic),
            Err(WipError::Underflow { needed: 4, got: 3 })
        ));
        let (state, out) = warm_start(&model, &spec, &stream[..4], &ic).unwrap();
        assert_eq!(state.frame, 4);
        assert_eq!(out.len(), 4);
        assert_eq!(state.feedback_len(), 4);
        assert_eq!(state.smoothing_len(), 2);
        let mut a = state.clone();
        let mut b = state;
        assert_eq!(step(&mut a, &model, &stream[5], &ic).unwrap(), step(&mut b, &model, &stream[5], &ic).unwrap());
        let full = run_stream(&model, &spec, &stream, &ic).unwrap();
        let cut = run_stream(&model, &spec, &stream[..7], &ic).unwrap();
        assert_eq!(&full[..7], &cut[..]);
    }
}
