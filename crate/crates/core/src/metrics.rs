//! Evaluation metrics. Functions take normalized poses; [`MetricReport`]
//! converts to physical units with the sequence scale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::SkeletonSpec;
use crate::edm::{eigen_report, triangle_inequality_score, DistanceMatrix, PoseFrame};
use crate::error::{Result, WipError};

fn check(pred: &[PoseFrame], gt: &[PoseFrame]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(WipError::invalid(format!("length mismatch: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(WipError::invalid("empty sequences"));
    }
    Ok(())
}

/// Mean Euclidean error over the given joints and all frames.
pub fn mean_joint_error(pred: &[PoseFrame], gt: &[PoseFrame], joints: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if joints.iter().any(|&j| j >= p.len() || j >= g.len()) {
            return Err(WipError::invalid("joint index out of range"));
        }
        sum += joints.iter().map(|&j| (p.points[j] - g.points[j]).norm()).sum::<f64>();
    }
    Ok(sum / (pred.len() * joints.len()) as f64)
}

/// Per-frame mean error over the given joints.
pub fn per_frame_error(pred: &[PoseFrame], gt: &[PoseFrame], joints: &[usize]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| mean_joint_error(std::slice::from_ref(p), std::slice::from_ref(g), joints))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalErrors {
    pub pe: f64,
    pub eee: f64,
    pub gte: f64,
}

/// PE over all skeleton joints, EEE over the end effectors, GTE at the pelvis.
pub fn positional_errors(pred: &[PoseFrame], gt: &[PoseFrame], spec: &SkeletonSpec) -> Result<PositionalErrors> {
    let joints: Vec<usize> = (0..spec.num_joints()).collect();
    Ok(PositionalErrors {
        pe: mean_joint_error(pred, gt, &joints)?,
        eee: mean_joint_error(pred, gt, &spec.end_effectors())?,
        gte: mean_joint_error(pred, gt, &[spec.pelvis()])?,
    })
}

fn mean_jerk(seq: &[PoseFrame], joints: &[usize], fps: f64) -> f64 {
    let f3 = fps * fps * fps;
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..seq.len() - 3 {
        for &j in joints {
            let p = |k: usize| seq[t + k].points[j];
            let jerk = (p(3) - p(2) * 3.0 + p(1) * 3.0 - p(0)) * f3;
            sum += jerk.norm();
            n += 1;
        }
    }
    sum / n as f64
}

/// Absolute difference of mean jerk magnitudes, in length units per s^3.
/// `None` for sequences shorter than four frames.
pub fn jitter_error(pred: &[PoseFrame], gt: &[PoseFrame], joints: &[usize], fps: f64) -> Result<Option<f64>> {
    check(pred, gt)?;
    if pred.len() < 4 {
        return Ok(None);
    }
    Ok(Some((mean_jerk(pred, joints, fps) - mean_jerk(gt, joints, fps)).abs()))
}

/// Mean absolute pairwise-distance error over joint pairs and frames.
pub fn structure_error(pred: &[PoseFrame], gt: &[PoseFrame], joints: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, &i) in joints.iter().enumerate() {
            for &j in &joints[a + 1..] {
                let dp = (p.points[i] - p.points[j]).norm();
                let dg = (g.points[i] - g.points[j]).norm();
                sum += (dp - dg).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Contact thresholds in meters and meters per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactConfig {
    pub max_speed: f64,
    pub max_height: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self { max_speed: 0.2, max_height: 0.10 }
    }
}

/// Per-frame `[left, right]` contact labels. A foot is planted when one of its
/// joints is slower than the speed threshold and below the height threshold.
pub fn foot_contacts(seq: &[PoseFrame], spec: &SkeletonSpec, fps: f64, scale: f64, cfg: &ContactConfig) -> Vec<[bool; 2]> {
    let feet = spec.foot_contact_joints();
    let speed = |t: usize, j: usize| -> f64 {
        let (a, b) = if t == 0 { (0, 1.min(seq.len() - 1)) } else { (t - 1, t) };
        (seq[b].points[j] - seq[a].points[j]).norm() * fps * scale
    };
    (0..seq.len())
        .map(|t| {
            let mut out = [false; 2];
            for (f, joints) in feet.iter().enumerate() {
                out[f] = joints
                    .iter()
                    .any(|&j| speed(t, j) < cfg.max_speed && seq[t].points[j].z * scale < cfg.max_height);
            }
            out
        })
        .collect()
}

/// Fraction of foot-frames whose predicted contact label matches ground truth.
pub fn foot_contact_accuracy(
    pred: &[PoseFrame],
    gt: &[PoseFrame],
    spec: &SkeletonSpec,
    fps: f64,
    scale: f64,
    cfg: &ContactConfig,
) -> Result<f64> {
    check(pred, gt)?;
    let a = foot_contacts(pred, spec, fps, scale, cfg);
    let b = foot_contacts(gt, spec, fps, scale, cfg);
    let agree: usize = a.iter().zip(&b).map(|(x, y)| (x[0] == y[0]) as usize + (x[1] == y[1]) as usize).sum();
    Ok(agree as f64 / (2 * a.len()) as f64)
}

/// Root error against elapsed time and against ground-truth root path length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriftCurves {
    pub time: Vec<(f64, f64)>,
    pub distance: Vec<(f64, f64)>,
}

pub fn drift_curves(pred: &[PoseFrame], gt: &[PoseFrame], root: usize, fps: f64) -> Result<DriftCurves> {
    check(pred, gt)?;
    let mut path = 0.0;
    let mut out = DriftCurves::default();
    for t in 0..pred.len() {
        if t > 0 {
            path += (gt[t].points[root] - gt[t - 1].points[root]).norm();
        }
        let err = (pred[t].points[root] - gt[t].points[root]).norm();
        out.time.push((t as f64 / fps, err));
        out.distance.push((path, err));
    }
    Ok(out)
}

impl DriftCurves {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            time: self.time.iter().map(|&(t, e)| (t, e * k)).collect(),
            distance: self.distance.iter().map(|&(d, e)| (d * k, e * k)).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time_s,drift_time,path_length,drift_distance")?;
        for ((t, a), (d, b)) in self.time.iter().zip(&self.distance) {
            writeln!(w, "{t:.6},{a:.9e},{d:.9e},{b:.9e}")?;
        }
        Ok(())
    }
}

/// Means of CEV(3) and the triangle-inequality score over predicted matrices.
pub fn pwd_diagnostics(ds: &[DistanceMatrix]) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(WipError::invalid("no matrices"));
    }
    let mut cev = 0.0;
    let mut tis = 0.0;
    for d in ds {
        cev += eigen_report(d)?.cev(3);
        tis += triangle_inequality_score(d);
    }
    let n = ds.len() as f64;
    Ok((cev / n, tis / n))
}

/// Metrics in physical units: centimeters, km/s^2 for jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pe_cm: f64,
    pub eee_cm: f64,
    pub gte_cm: f64,
    pub aje_km_s2: Option<f64>,
    pub gse_cm: f64,
    pub contact_accuracy: f64,
    pub cev3: Option<f64>,
    pub tis: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "pe_cm,eee_cm,gte_cm,aje_km_s2,gse_cm,contact_accuracy,cev3,tis";

    pub fn compute(
        pred: &[PoseFrame],
        gt: &[PoseFrame],
        spec: &SkeletonSpec,
        fps: f64,
        scale: f64,
        predicted_pwd: Option<&[DistanceMatrix]>,
    ) -> Result<Self> {
        let joints: Vec<usize> = (0..spec.num_joints()).collect();
        let pos = positional_errors(pred, gt, spec)?;
        let cm = scale * 100.0;
        let aje = jitter_error(pred, gt, &joints, fps)?.map(|v| v * scale / 1000.0);
        let (cev3, tis) = match predicted_pwd {
            Some(ds) => {
                let (c, t) = pwd_diagnostics(ds)?;
                (Some(c), Some(t))
            }
            None => (None, None),
        };
        Ok(Self {
            pe_cm: pos.pe * cm,
            eee_cm: pos.eee * cm,
            gte_cm: pos.gte * cm,
            aje_km_s2: aje,
            gse_cm: structure_error(pred, gt, &joints)? * cm,
            contact_accuracy: foot_contact_accuracy(pred, gt, spec, fps, scale, &ContactConfig::default())?,
            cev3,
            tis,
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into());
        format!(
            "{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{}",
            self.pe_cm,
            self.eee_cm,
            self.gte_cm,
            opt(self.aje_km_s2),
            self.gse_cm,
            self.contact_accuracy,
            opt(self.cev3),
            opt(self.tis)
        )
    }
}
