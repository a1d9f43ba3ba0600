//! Training objective.
//!
//! Two implementations of every term live here: plain `f64` versions over
//! [`PoseFrame`] / [`DistanceMatrix`] used for reporting and as references,
//! and tensor versions in [`tensor`] used for back-propagation.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::edm::{pwd, DistanceMatrix, PoseFrame};
use crate::error::{Result, WipError};

/// Weights of the seven loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pd: f64,
    pub dd: f64,
    pub cons: f64,
    pub refs: f64,
    pub velo: f64,
    pub rigidity: f64,
    pub gravity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dd: 1.0,
            pd: 1.0,
            refs: 0.5,
            cons: 0.5,
            velo: 0.1,
            rigidity: 1.0,
            gravity: 0.05,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            pd: self.pd * k,
            dd: self.dd * k,
            cons: self.cons * k,
            refs: self.refs * k,
            velo: self.velo * k,
            rigidity: self.rigidity * k,
            gravity: self.gravity * k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Distance-to-motion on clean data.
    One,
    /// Denoising fine-tune; adds the velocity term.
    Two,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

/// Per-term values and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pd: f64,
    pub dd: f64,
    pub cons: f64,
    pub refs: f64,
    pub velo: f64,
    pub rigidity: f64,
    pub gravity: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,pd,dd,cons,refs,velo,rigidity,gravity,total";

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.pd * self.pd
            + w.dd * self.dd
            + w.cons * self.cons
            + w.refs * self.refs
            + w.velo * self.velo
            + w.rigidity * self.rigidity
            + w.gravity * self.gravity
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.pd, self.dd, self.cons, self.refs, self.velo, self.rigidity, self.gravity, self.total
        )
    }

    pub fn write_csv<W: Write>(rows: &[(usize, LossReport)], mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (step, r) in rows {
            writeln!(w, "{}", r.csv_row(*step))?;
        }
        Ok(())
    }
}

fn check_same(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(WipError::invalid(format!("{what}: size {a} vs {b}")));
    }
    Ok(())
}

fn mse(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<f64> {
    check_same(a.size(), b.size(), "matrix shape mismatch")?;
    let n = a.size();
    if n == 0 {
        return Ok(0.0);
    }
    Ok((&a.values - &b.values).norm_squared() / (n * n) as f64)
}

/// Mean squared error between the distances of the predicted pose and the target.
pub fn loss_pd(pred_pose: &PoseFrame, target: &DistanceMatrix) -> Result<f64> {
    mse(&pwd(pred_pose)?, target)
}

pub fn loss_dd(pred: &DistanceMatrix, target: &DistanceMatrix) -> Result<f64> {
    mse(pred, target)
}

/// Agreement between the pose head and the distance head.
pub fn loss_cons(pred_pose: &PoseFrame, pred: &DistanceMatrix) -> Result<f64> {
    mse(&pwd(pred_pose)?, pred)
}

/// Sum of Euclidean anchor errors in one frame.
pub fn loss_refs(
    pred_pose: &PoseFrame,
    anchor_indices: &[usize],
    anchor_targets: &[Vector3<f64>],
) -> Result<f64> {
    check_same(anchor_indices.len(), anchor_targets.len(), "anchor count")?;
    if anchor_indices.iter().any(|&i| i >= pred_pose.len()) {
        return Err(WipError::invalid("prediction has no anchor nodes"));
    }
    Ok(anchor_indices
        .iter()
        .zip(anchor_targets)
        .map(|(&i, r)| (pred_pose.points[i] - r).norm())
        .sum())
}

/// Mean depth below the ground plane over all nodes of all frames.
pub fn gravity_reg(poses: &[PoseFrame]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in poses {
        for q in &p.points {
            sum += (-q.z).max(0.0);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Summed norm of per-joint velocity error, from the second frame on.
pub fn loss_velo(pred: &[PoseFrame], target: &[PoseFrame]) -> Result<f64> {
    check_same(pred.len(), target.len(), "sequence length")?;
    let mut total = 0.0;
    for t in 1..pred.len() {
        check_same(pred[t].len(), target[t].len(), "node count")?;
        for j in 0..pred[t].len() {
            let dp = pred[t].points[j] - pred[t - 1].points[j];
            let dt = target[t].points[j] - target[t - 1].points[j];
            total += (dp - dt).norm();
        }
    }
    Ok(total)
}

/// Summed absolute bone-length error read off the two matrices.
pub fn loss_rigidity(
    pred: &DistanceMatrix,
    target: &DistanceMatrix,
    bones: &[(usize, usize)],
) -> Result<f64> {
    check_same(pred.size(), target.size(), "matrix shape mismatch")?;
    Ok(bones
        .iter()
        .map(|&(i, j)| (target.get(i, j) - pred.get(i, j)).abs())
        .sum())
}

/// Everything needed to score a window of consecutive predictions.
pub struct LossInputs<'a> {
    pub pred_poses: &'a [PoseFrame],
    pub pred_distances: &'a [DistanceMatrix],
    pub target_poses: &'a [PoseFrame],
    pub target_distances: &'a [DistanceMatrix],
    pub bones: &'a [(usize, usize)],
    pub anchor_indices: &'a [usize],
    pub anchor_targets: &'a [Vector3<f64>],
}

/// Weighted objective over a window. Matrix terms are averaged over frames;
/// anchor, velocity and rigidity terms are summed, as is the velocity term
/// (stage two only).
pub fn total_loss(inputs: &LossInputs<'_>, weights: &LossWeights, stage: Stage) -> Result<LossReport> {
    let n = inputs.pred_poses.len();
    check_same(n, inputs.pred_distances.len(), "prediction count")?;
    check_same(n, inputs.target_poses.len(), "target count")?;
    check_same(n, inputs.target_distances.len(), "target count")?;
    if n == 0 {
        return Err(WipError::invalid("empty window"));
    }
    let mut r = LossReport::default();
    for t in 0..n {
        r.pd += loss_pd(&inputs.pred_poses[t], &inputs.target_distances[t])?;
        r.dd += loss_dd(&inputs.pred_distances[t], &inputs.target_distances[t])?;
        r.cons += loss_cons(&inputs.pred_poses[t], &inputs.pred_distances[t])?;
        r.refs += loss_refs(&inputs.pred_poses[t], inputs.anchor_indices, inputs.anchor_targets)?;
        r.rigidity += loss_rigidity(
            &inputs.pred_distances[t],
            &inputs.target_distances[t],
            inputs.bones,
        )?;
    }
    r.pd /= n as f64;
    r.dd /= n as f64;
    r.cons /= n as f64;
    r.gravity = gravity_reg(inputs.pred_poses);
    if stage == Stage::Two {
        r.velo = loss_velo(inputs.pred_poses, inputs.target_poses)?;
    }
    r.total = r.weighted_total(weights);
    Ok(r)
}

/// Differentiable batch versions of the loss terms.
pub mod tensor {
    use candle_core::{DType, Device, Result, Tensor, D};

    /// `(N, N)` identity in the given dtype.
    fn eye(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        Tensor::eye(n, dtype, device)
    }

    /// Pairwise distances of a `(B, N, 3)` batch, `(B, N, N)`, with a zero
    /// diagonal that carries no gradient.
    pub fn pwd(points: &Tensor) -> Result<Tensor> {
        let n = points.dim(1)?;
        let diff = points.unsqueeze(2)?.broadcast_sub(&points.unsqueeze(1)?)?;
        let sq = diff.sqr()?.sum(D::Minus1)?;
        let eye = eye(n, points.dtype(), points.device())?;
        let safe = sq.broadcast_add(&eye)?.sqrt()?;
        safe.broadcast_mul(&(1.0 - eye)?)
    }

    pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        (a - b)?.sqr()?.mean_all()
    }

    /// Anchor term: mean over the batch of the per-frame sum of anchor errors.
    /// `targets` is `(A, 3)`; `eps` keeps the gradient finite at zero error.
    pub fn refs(pred_pose: &Tensor, anchor_start: usize, targets: &Tensor, eps: f64) -> Result<Tensor> {
        let a = targets.dim(0)?;
        let anchors = pred_pose.narrow(1, anchor_start, a)?;
        let err = anchors.broadcast_sub(&targets.unsqueeze(0)?)?;
        let norm = (err.sqr()?.sum(D::Minus1)? + eps)?.sqrt()?;
        norm.sum(1)?.mean_all()
    }

    pub fn gravity(pred_pose: &Tensor) -> Result<Tensor> {
        let z = pred_pose.narrow(2, 2, 1)?;
        z.neg()?.relu()?.mean_all()
    }

    /// Velocity term for pairs of consecutive frames, summed over nodes and
    /// averaged over the batch.
    pub fn velo(
        pred_prev: &Tensor,
        pred_cur: &Tensor,
        target_prev: &Tensor,
        target_cur: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let dp = (pred_cur - pred_prev)?;
        let dt = (target_cur - target_prev)?;
        let norm = ((dp - dt)?.sqr()?.sum(D::Minus1)? + eps)?.sqrt()?;
        norm.sum(1)?.mean_all()
    }

    /// Bone term: gathers bone entries of both `(B, N, N)` matrices.
    pub fn rigidity(pred: &Tensor, target: &Tensor, bones: &[(usize, usize)]) -> Result<Tensor> {
        let n = pred.dim(1)?;
        let idx: Vec<u32> = bones.iter().map(|&(i, j)| (i * n + j) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), pred.device())?;
        let b = pred.dim(0)?;
        let p = pred.reshape((b, n * n))?.index_select(&idx, 1)?;
        let t = target.reshape((b, n * n))?.index_select(&idx, 1)?;
        (p - t)?.abs()?.sum(1)?.mean_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Rotation3};

    fn frame() -> PoseFrame {
        PoseFrame::from_rows(&[
            [0.1, 0.2, 0.5],
            [0.8, -0.1, 0.3],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
    }

    fn anchors() -> ([usize; 3], [Vector3<f64>; 3]) {
        (
            [2, 3, 4],
            [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)],
        )
    }

    #[test]
    fn pd_zero_at_truth_and_under_rigid_motion() {
        let f = frame();
        let d = pwd(&f).unwrap();
        assert_eq!(loss_pd(&f, &d).unwrap(), 0.0);
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let moved = f.map(|p| rot * p + Vector3::new(2.0, 0.0, -1.0));
        assert!(loss_pd(&moved, &d).unwrap() < 1e-28);
    }

    #[test]
    fn pd_two_point_hand_value() {
        let pred = PoseFrame::from_rows(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let target = DistanceMatrix::from_clean(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap();
        assert_eq!(loss_pd(&pred, &target).unwrap(), 0.5);
    }

    #[test]
    fn dd_and_cons_share_the_kernel() {
        let f = frame();
        let d = pwd(&f).unwrap();
        assert_eq!(loss_dd(&d, &d).unwrap(), 0.0);
        assert_eq!(loss_cons(&f, &d).unwrap(), 0.0);
        let mut other = d.clone();
        other.values[(0, 1)] += 0.3;
        other.values[(1, 0)] += 0.3;
        assert_eq!(loss_cons(&f, &other).unwrap(), loss_dd(&d, &other).unwrap());
        assert!(loss_dd(&d, &pwd(&PoseFrame::from_rows(&[[0.0; 3]])).unwrap()).is_err());
    }

    #[test]
    fn refs_values() {
        let (idx, targets) = anchors();
        let f = frame();
        assert_eq!(loss_refs(&f, &idx, &targets).unwrap(), 0.0);
        let mut g = f.clone();
        g.points[3] += Vector3::new(0.0, 0.0, 3.0);
        assert_eq!(loss_refs(&g, &idx, &targets).unwrap(), 3.0);
        let mut h = f.clone();
        h.points[2].x += 1.0;
        h.points[3].y += 1.0;
        h.points[4].z += 1.0;
        assert_eq!(loss_refs(&h, &idx, &targets).unwrap(), 3.0);
        assert!(loss_refs(&PoseFrame::from_rows(&[[0.0; 3]]), &idx, &targets).is_err());
    }

    #[test]
    fn gravity_values() {
        let f = frame();
        assert_eq!(gravity_reg(&[f.clone()]), 0.0);
        let mut g = f.clone();
        g.points[1].z = -0.5;
        assert_eq!(gravity_reg(&[g]), 0.5 / 5.0);
        let mirrored = f.map(|p| Vector3::new(p.x, p.y, -p.z));
        let mean_height = f.points.iter().map(|p| p.z.max(0.0)).sum::<f64>() / 5.0;
        let r = gravity_reg(&[mirrored]);
        assert!(r > 0.0);
        assert!((r - mean_height).abs() < 1e-15);
    }

    #[test]
    fn velo_values() {
        let seq: Vec<PoseFrame> = (0..5)
            .map(|t| frame().map(|p| p + Vector3::new(0.1 * t as f64, 0.0, 0.0)))
            .collect();
        assert_eq!(loss_velo(&seq, &seq).unwrap(), 0.0);
        let offset: Vec<_> = seq.iter().map(|f| f.map(|p| p + Vector3::new(0.5, -1.0, 2.0))).collect();
        assert!(loss_velo(&offset, &seq).unwrap() < 1e-12);
        let mut shifted = seq.clone();
        shifted[2] = shifted[2].map(|p| p + Vector3::new(1.0, 0.0, 0.0));
        let v = loss_velo(&shifted, &seq).unwrap();
        assert!((v - 2.0 * 5.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rigidity_values() {
        let f = frame();
        let d = pwd(&f).unwrap();
        let bones = [(0, 1), (1, 2), (0, 3)];
        assert_eq!(loss_rigidity(&d, &d, &bones).unwrap(), 0.0);
        let mut p = d.clone();
        p.values[(1, 2)] += 0.2;
        p.values[(2, 1)] += 0.2;
        assert!((loss_rigidity(&p, &d, &bones).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn total_zero_at_truth_and_linear_in_weights() {
        let (idx, targets) = anchors();
        let poses: Vec<PoseFrame> = (0..3)
            .map(|t| frame().map(|p| p + Vector3::new(0.0, 0.05 * t as f64, 0.0)))
            .map(|f| {
                let mut g = f;
                for (k, &i) in idx.iter().enumerate() {
                    g.points[i] = targets[k];
                }
                g
            })
            .collect();
        let dists: Vec<_> = poses.iter().map(|p| pwd(p).unwrap()).collect();
        let bones = [(0, 1), (1, 2)];
        let inputs = LossInputs {
            pred_poses: &poses,
            pred_distances: &dists,
            target_poses: &poses,
            target_distances: &dists,
            bones: &bones,
            anchor_indices: &idx,
            anchor_targets: &targets,
        };
        let r = total_loss(&inputs, &LossWeights::default(), Stage::Two).unwrap();
        assert_eq!(r.total, 0.0);

        let pred: Vec<_> = poses.iter().map(|f| f.map(|p| p * 1.1 + Vector3::new(0.0, 0.0, -0.2))).collect();
        let pred_d: Vec<_> = dists
            .iter()
            .map(|d| DistanceMatrix::from_clean(d.values.map(|v| v * 0.9)).unwrap())
            .collect();
        let noisy = LossInputs {
            pred_poses: &pred,
            pred_distances: &pred_d,
            ..inputs
        };
        let w = LossWeights::default();
        let r1 = total_loss(&noisy, &w, Stage::Two).unwrap();
        let manual = 1.0 * r1.pd + 1.0 * r1.dd + 0.5 * r1.cons + 0.5 * r1.refs + 0.1 * r1.velo
            + 1.0 * r1.rigidity
            + 0.05 * r1.gravity;
        assert!((r1.total - manual).abs() < 1e-12);
        let r2 = total_loss(&noisy, &w.scaled(2.0), Stage::Two).unwrap();
        assert!((r2.total - 2.0 * r1.total).abs() < 1e-12);
        let r0 = total_loss(&noisy, &w.scaled(0.0), Stage::Two).unwrap();
        assert_eq!(r0.total, 0.0);
        let s1 = total_loss(&noisy, &w, Stage::One).unwrap();
        assert_eq!(s1.velo, 0.0);
        assert!(r1.velo > 0.0);
    }
}
