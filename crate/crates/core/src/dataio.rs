//! Motion sequences: skeleton layout, procedural motion, preprocessing,
//! anchors, windowed training samples and the text file formats.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edm::{corrupt, pwd, DistanceMatrix, NoiseConfig, PoseFrame};
use crate::error::{Result, WipError};

pub const NUM_ANCHORS: usize = 3;
pub const ANCHOR_LABELS: [&str; NUM_ANCHORS] = ["r_o", "r_x", "r_y"];

const SMPL_JOINTS: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

const SMPL_PARENTS: [Option<usize>; 24] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

// Rest offsets from parent in meters; body frame x forward, y left, z up.
const REST_OFFSETS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.09, -0.08],
    [0.0, -0.09, -0.08],
    [-0.01, 0.0, 0.11],
    [0.0, 0.01, -0.38],
    [0.0, -0.01, -0.38],
    [0.0, 0.0, 0.13],
    [-0.01, 0.0, -0.40],
    [-0.01, 0.0, -0.40],
    [0.0, 0.0, 0.05],
    [0.12, 0.01, -0.05],
    [0.12, -0.01, -0.05],
    [0.0, 0.0, 0.21],
    [0.0, 0.07, 0.12],
    [0.0, -0.07, 0.12],
    [0.02, 0.0, 0.09],
    [0.0, 0.12, 0.03],
    [0.0, -0.12, 0.03],
    [0.0, 0.02, -0.26],
    [0.0, -0.02, -0.26],
    [0.0, 0.0, -0.25],
    [0.0, 0.0, -0.25],
    [0.0, 0.0, -0.08],
    [0.0, 0.0, -0.08],
];

/// Which lower-body joints carry the two leg sensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerBodyMode {
    Feet,
    Knees,
}

impl FromStr for LowerBodyMode {
    type Err = WipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feet" => Ok(Self::Feet),
            "knees" => Ok(Self::Knees),
            other => Err(WipError::invalid(format!("unknown lower-body mode `{other}`"))),
        }
    }
}

/// Joint layout, sensor subset, bones and anchor placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    /// Sensor joints: pelvis, head, left hand, right hand, left/right foot or knee.
    pub sparse_indices: Vec<usize>,
    pub bones: Vec<(usize, usize)>,
    pub lower_body_mode: LowerBodyMode,
    pub anchor_targets: [Vector3<f64>; NUM_ANCHORS],
}

impl SkeletonSpec {
    pub fn human(mode: LowerBodyMode) -> Self {
        let joint_names = SMPL_JOINTS.iter().map(|s| s.to_string()).collect();
        let parents = SMPL_PARENTS.to_vec();
        let bones = parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
            .collect();
        let (left_leg, right_leg) = match mode {
            LowerBodyMode::Feet => (10, 11),
            LowerBodyMode::Knees => (4, 5),
        };
        Self {
            joint_names,
            parents,
            sparse_indices: vec![0, 15, 22, 23, left_leg, right_leg],
            bones,
            lower_body_mode: mode,
            anchor_targets: Self::default_anchor_targets(),
        }
    }

    /// Origin, unit x and unit y on the floor.
    pub fn default_anchor_targets() -> [Vector3<f64>; NUM_ANCHORS] {
        [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)]
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_sparse(&self) -> usize {
        self.sparse_indices.len()
    }

    pub fn pelvis(&self) -> usize {
        0
    }

    pub fn head(&self) -> usize {
        15
    }

    /// Node indices of the anchors in a frame that carries them.
    pub fn anchor_indices(&self) -> [usize; NUM_ANCHORS] {
        let j = self.num_joints();
        [j, j + 1, j + 2]
    }

    /// Sensor joints followed by anchors: the rows of the measured matrix.
    pub fn sparse_with_anchors(&self) -> Vec<usize> {
        let mut v = self.sparse_indices.clone();
        v.extend(self.anchor_indices());
        v
    }

    /// Head, hands and the two leg sensors, as dense joint indices.
    pub fn end_effectors(&self) -> Vec<usize> {
        self.sparse_indices[1..].to_vec()
    }

    /// Heel and toe joints of each foot, used by the contact detector.
    pub fn foot_contact_joints(&self) -> [[usize; 2]; 2] {
        [[7, 10], [8, 11]]
    }

    pub fn node_labels(&self, with_anchors: bool) -> Vec<String> {
        let mut v = self.joint_names.clone();
        if with_anchors {
            v.extend(ANCHOR_LABELS.iter().map(|s| s.to_string()));
        }
        v
    }
}

/// Timestamped pose sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
    /// Meters per unit: original head–pelvis distance after normalization, 1 for raw data.
    pub scale: f64,
    pub floor_aligned: bool,
    pub has_anchors: bool,
    pub joint_names: Vec<String>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_joints() + if self.has_anchors { NUM_ANCHORS } else { 0 }
    }

    /// Joints only, anchors dropped.
    pub fn joint_frames(&self) -> Vec<PoseFrame> {
        let j = self.num_joints();
        self.frames
            .iter()
            .map(|f| PoseFrame::new(f.points[..j].to_vec()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    ArmSwing,
    Squat,
    Turn,
    Figure8,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] = [
        MotionKind::Walk,
        MotionKind::ArmSwing,
        MotionKind::Squat,
        MotionKind::Turn,
        MotionKind::Figure8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::ArmSwing => "arm_swing",
            MotionKind::Squat => "squat",
            MotionKind::Turn => "turn",
            MotionKind::Figure8 => "figure8",
        }
    }
}

impl FromStr for MotionKind {
    type Err = WipError;

    fn from_str(s: &str) -> Result<Self> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| WipError::invalid(format!("unknown motion kind `{s}`")))
    }
}

/// Per-clip randomization of the procedural motion.
struct Style {
    body_scale: f64,
    cadence: f64,
    phase: f64,
    hip_amp: f64,
    knee_amp: f64,
    arm_amp: f64,
    heading: f64,
    origin: Vector3<f64>,
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            body_scale: rng.random_range(0.95..1.05),
            cadence: rng.random_range(0.85..1.0),
            phase: rng.random_range(0.0..TAU),
            hip_amp: rng.random_range(0.35..0.45),
            knee_amp: rng.random_range(0.5..0.7),
            arm_amp: rng.random_range(0.25..0.4),
            heading: rng.random_range(-0.3..0.3),
            origin: Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                0.0,
            ),
        }
    }
}

/// Local joint rotations plus root yaw and horizontal position at one instant.
struct Drive {
    local: [Rotation3<f64>; 24],
    yaw: f64,
    root_xy: Vector3<f64>,
}

fn ry(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

fn gait(local: &mut [Rotation3<f64>; 24], phi: f64, hip: f64, knee: f64, arm: f64) {
    let knee_curve = |p: f64| 0.08 + knee * (0.5 * (1.0 + (p + FRAC_PI_4).sin())).powi(2);
    local[1] = ry(-hip * phi.sin());
    local[2] = ry(-hip * (phi + PI).sin());
    local[4] = ry(knee_curve(phi));
    local[5] = ry(knee_curve(phi + PI));
    local[7] = ry(-0.15 * (phi + FRAC_PI_2).sin());
    local[8] = ry(-0.15 * (phi + PI + FRAC_PI_2).sin());
    local[3] = rz(0.06 * phi.sin());
    local[9] = rz(-0.08 * phi.sin());
    local[16] = ry(-arm * (phi + PI).sin()) * rx(-0.12);
    local[17] = ry(-arm * phi.sin()) * rx(0.12);
    local[18] = ry(-0.35 - 0.15 * (1.0 + (phi + PI).sin()));
    local[19] = ry(-0.35 - 0.15 * (1.0 + phi.sin()));
    local[15] = ry(0.05 * (2.0 * phi).sin());
}

fn drive(kind: MotionKind, style: &Style, t: f64, duration: f64) -> Drive {
    let mut local = [Rotation3::identity(); 24];
    let phi = TAU * style.cadence * t + style.phase;
    let leg = 0.83 * style.body_scale;
    match kind {
        MotionKind::Walk => {
            gait(&mut local, phi, style.hip_amp, style.knee_amp, style.arm_amp);
            let speed = 2.0 * leg * style.hip_amp.sin() * style.cadence;
            let dir = Vector3::new(style.heading.cos(), style.heading.sin(), 0.0);
            let root_xy = style.origin + dir * speed * (t - 0.5 * duration);
            Drive {
                local,
                yaw: style.heading,
                root_xy,
            }
        }
        MotionKind::ArmSwing => {
            let a = 0.6 + style.arm_amp;
            local[16] = ry(-a * phi.sin()) * rx(-0.3 - 0.3 * (1.0 + phi.cos()));
            local[17] = ry(-a * (phi + 0.5).sin()) * rx(0.3 + 0.3 * (1.0 + (phi + 0.5).cos()));
            local[18] = ry(-0.4 - 0.3 * (1.0 + phi.sin()));
            local[19] = ry(-0.4 - 0.3 * (1.0 + (phi + 0.5).sin()));
            local[3] = rz(0.1 * phi.sin());
            local[4] = ry(0.06);
            local[5] = ry(0.06);
            Drive {
                local,
                yaw: style.heading,
                root_xy: style.origin,
            }
        }
        MotionKind::Squat => {
            let q = 0.55 * (1.0 - (0.6 * phi).cos());
            local[1] = ry(-q);
            local[2] = ry(-q);
            local[4] = ry(2.0 * q);
            local[5] = ry(2.0 * q);
            local[7] = ry(-q);
            local[8] = ry(-q);
            local[3] = ry(0.35 * q);
            local[16] = ry(-1.2 * q);
            local[17] = ry(-1.2 * q);
            Drive {
                local,
                yaw: style.heading,
                root_xy: style.origin,
            }
        }
        MotionKind::Turn => {
            gait(&mut local, phi, 0.15, style.knee_amp, 0.15);
            let omega = 0.4 + 0.4 * style.cadence;
            Drive {
                local,
                yaw: style.heading + omega * t,
                root_xy: style.origin,
            }
        }
        MotionKind::Figure8 => {
            gait(&mut local, phi, style.hip_amp, style.knee_amp, style.arm_amp);
            let a = 1.5;
            let w = TAU / 12.0;
            let s = w * t;
            let pos = Vector3::new(a * s.sin(), a * s.sin() * s.cos(), 0.0);
            let vel = Vector3::new(a * w * s.cos(), a * w * (2.0 * s).cos(), 0.0);
            let rot = rz(style.heading);
            Drive {
                local,
                yaw: style.heading + vel.y.atan2(vel.x),
                root_xy: style.origin + rot * pos,
            }
        }
    }
}

fn forward_kinematics(
    offsets: &[Vector3<f64>; 24],
    local: &[Rotation3<f64>; 24],
    root_rot: Rotation3<f64>,
    root_pos: Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let mut global_rot = [Rotation3::identity(); 24];
    let mut pos = vec![Vector3::zeros(); 24];
    for j in 0..24 {
        match SMPL_PARENTS[j] {
            None => {
                global_rot[j] = root_rot * local[j];
                pos[j] = root_pos;
            }
            Some(p) => {
                global_rot[j] = global_rot[p] * local[j];
                pos[j] = pos[p] + global_rot[p] * offsets[j];
            }
        }
    }
    pos
}

/// Procedural 24-joint motion in meters with constant bone lengths.
///
/// Every frame is lifted so the lowest heel or toe touches `z = 0`.
pub fn generate_synthetic(
    kind: MotionKind,
    duration_s: f64,
    fps: f64,
    seed: u64,
) -> Result<MotionSequence> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(WipError::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(WipError::invalid(format!("fps must be positive, got {fps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style::sample(&mut rng);
    let offsets: [Vector3<f64>; 24] = std::array::from_fn(|j| {
        let o = REST_OFFSETS[j];
        Vector3::new(o[0], o[1], o[2]) * style.body_scale
    });
    let n = (duration_s * fps).round() as usize;
    let frames = (0..n)
        .map(|k| {
            let t = k as f64 / fps;
            let d = drive(kind, &style, t, duration_s);
            let root_rot = rz(d.yaw);
            let mut pts = forward_kinematics(&offsets, &d.local, root_rot, d.root_xy);
            let lowest = [7, 8, 10, 11]
                .iter()
                .map(|&j| pts[j].z)
                .fold(f64::INFINITY, f64::min);
            for p in &mut pts {
                p.z -= lowest;
            }
            PoseFrame::new(pts)
        })
        .collect();
    Ok(MotionSequence {
        frames,
        fps,
        scale: 1.0,
        floor_aligned: false,
        has_anchors: false,
        joint_names: SMPL_JOINTS.iter().map(|s| s.to_string()).collect(),
    })
}

/// Divides by the mean head–pelvis distance and shifts the lowest point to `z = 0`.
pub fn preprocess(seq: &MotionSequence, spec: &SkeletonSpec) -> Result<MotionSequence> {
    if seq.has_anchors {
        return Err(WipError::invalid(
            "preprocess must run before anchors are attached",
        ));
    }
    if seq.num_joints() != spec.num_joints() {
        return Err(WipError::invalid(format!(
            "sequence has {} joints, skeleton expects {}",
            seq.num_joints(),
            spec.num_joints()
        )));
    }
    if seq.is_empty() {
        return Err(WipError::invalid("empty sequence"));
    }
    let (pelvis, head) = (spec.pelvis(), spec.head());
    let mean_hp = seq
        .frames
        .iter()
        .map(|f| (f.points[head] - f.points[pelvis]).norm())
        .sum::<f64>()
        / seq.len() as f64;
    if !(mean_hp > 1e-12) {
        return Err(WipError::DegenerateGeometry {
            rank: 0,
            message: "head and pelvis coincide".into(),
        });
    }
    let min_z = seq
        .frames
        .iter()
        .flat_map(|f| f.points.iter().map(|p| p.z))
        .fold(f64::INFINITY, f64::min)
        / mean_hp;
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            f.map(|p| {
                let mut q = p / mean_hp;
                q.z -= min_z;
                q
            })
        })
        .collect();
    Ok(MotionSequence {
        frames,
        fps: seq.fps,
        scale: seq.scale * mean_hp,
        floor_aligned: true,
        has_anchors: false,
        joint_names: seq.joint_names.clone(),
    })
}

/// Appends the three fixed ground anchors to every frame.
pub fn attach_anchors(seq: &MotionSequence, spec: &SkeletonSpec) -> Result<MotionSequence> {
    if seq.has_anchors {
        return Err(WipError::invalid("anchors are already attached"));
    }
    if !seq.floor_aligned {
        return Err(WipError::invalid(
            "anchors require a preprocessed (floor-aligned) sequence",
        ));
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let mut pts = f.points.clone();
            pts.extend(spec.anchor_targets.iter().copied());
            PoseFrame::new(pts)
        })
        .collect();
    Ok(MotionSequence {
        frames,
        has_anchors: true,
        ..seq.clone()
    })
}

/// Per-frame tensors shared by sample construction and training.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub poses: Vec<PoseFrame>,
    /// Clean pairwise distances over all nodes, anchors included.
    pub dense: Vec<DistanceMatrix>,
    /// Corrupted distances over sensors plus anchors.
    pub noisy_sparse: Vec<DistanceMatrix>,
    pub fps: f64,
    pub scale: f64,
}

impl PreparedSequence {
    pub fn new(seq: &MotionSequence, spec: &SkeletonSpec, noise: &NoiseConfig) -> Result<Self> {
        if !seq.has_anchors {
            return Err(WipError::invalid("samples require anchored sequences"));
        }
        let dense = seq.frames.iter().map(pwd).collect::<Result<Vec<_>>>()?;
        let sparse_idx = spec.sparse_with_anchors();
        let sparse: Vec<_> = dense.iter().map(|d| d.submatrix(&sparse_idx)).collect();
        let noisy_sparse = corrupt(&sparse, noise)?;
        Ok(Self {
            poses: seq.frames.clone(),
            dense,
            noisy_sparse,
            fps: seq.fps,
            scale: seq.scale,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct WindowedSample {
    /// Frame index of the target.
    pub t: usize,
    /// Clean dense matrices for frames `t - w .. t - 1`.
    pub past_distances: Vec<DistanceMatrix>,
    pub current_noisy: DistanceMatrix,
    pub target_pose: PoseFrame,
    pub target_distances: DistanceMatrix,
}

/// Windowed samples with stride 1: one per frame `t` in `w..len`.
pub fn make_samples(
    seq: &MotionSequence,
    spec: &SkeletonSpec,
    noise: &NoiseConfig,
    w: usize,
) -> Result<Vec<WindowedSample>> {
    if w == 0 {
        return Err(WipError::invalid("window length must be positive"));
    }
    if seq.len() <= w + noise.window {
        return Err(WipError::invalid(format!(
            "sequence of {} frames is too short for window {} and noise window {}",
            seq.len(),
            w,
            noise.window
        )));
    }
    let prep = PreparedSequence::new(seq, spec, noise)?;
    Ok((w..prep.len())
        .map(|t| WindowedSample {
            t,
            past_distances: prep.dense[t - w..t].to_vec(),
            current_noisy: prep.noisy_sparse[t].clone(),
            target_pose: prep.poses[t].clone(),
            target_distances: prep.dense[t].clone(),
        })
        .collect())
}

const SEQ_MAGIC: &str = "WIPSEQ v1";

fn fmt_f64(out: &mut String, v: f64) {
    // 17 significant digits round-trip every f64 exactly.
    let _ = write!(out, "{v:.16e}");
}

pub fn write_sequence<W: Write>(seq: &MotionSequence, mut w: W) -> Result<()> {
    let mut s = String::new();
    s.push_str(SEQ_MAGIC);
    s.push('\n');
    let _ = write!(s, "fps=");
    fmt_f64(&mut s, seq.fps);
    let _ = write!(s, " J={} anchors={} scale=", seq.num_joints(), u8::from(seq.has_anchors));
    fmt_f64(&mut s, seq.scale);
    s.push('\n');
    s.push_str(&seq.joint_names.join(","));
    s.push('\n');
    w.write_all(s.as_bytes())?;
    for f in &seq.frames {
        let mut line = String::with_capacity(f.len() * 3 * 24);
        for (k, p) in f.points.iter().enumerate() {
            for (c, v) in p.iter().enumerate() {
                if k + c > 0 {
                    line.push(' ');
                }
                fmt_f64(&mut line, *v);
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn save_sequence(seq: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_sequence(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

fn header_value<'a>(fields: &'a [(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| WipError::parse(2, key, "missing header field"))
}

fn next_line(
    lines: &mut impl Iterator<Item = std::io::Result<String>>,
    line_no: usize,
    what: &str,
) -> Result<String> {
    lines
        .next()
        .ok_or_else(|| WipError::parse(line_no, what, "unexpected end of file"))?
        .map_err(WipError::from)
}

pub fn read_sequence<R: BufRead>(r: R) -> Result<MotionSequence> {
    let mut lines = r.lines();
    let magic = next_line(&mut lines, 1, "magic")?;
    if magic.trim() != SEQ_MAGIC {
        return Err(WipError::parse(1, "magic", format!("expected `{SEQ_MAGIC}`")));
    }
    let header = next_line(&mut lines, 2, "header")?;
    let fields: Vec<(&str, &str)> = header
        .split_whitespace()
        .map(|kv| kv.split_once('=').unwrap_or((kv, "")))
        .collect();
    let fps: f64 = header_value(&fields, "fps")?
        .parse()
        .map_err(|_| WipError::parse(2, "fps", "not a number"))?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(WipError::parse(2, "fps", "must be positive"));
    }
    let joints: usize = header_value(&fields, "J")?
        .parse()
        .map_err(|_| WipError::parse(2, "J", "not an integer"))?;
    let has_anchors = match header_value(&fields, "anchors")? {
        "0" => false,
        "1" => true,
        _ => return Err(WipError::parse(2, "anchors", "expected 0 or 1")),
    };
    let scale: f64 = header_value(&fields, "scale")?
        .parse()
        .map_err(|_| WipError::parse(2, "scale", "not a number"))?;
    let names_line = next_line(&mut lines, 3, "joint_names")?;
    let joint_names: Vec<String> = names_line.split(',').map(|s| s.trim().to_string()).collect();
    if joint_names.len() != joints {
        return Err(WipError::parse(
            3,
            "joint_names",
            format!("header declares J={joints} but {} names are listed", joint_names.len()),
        ));
    }
    let nodes = joints + if has_anchors { NUM_ANCHORS } else { 0 };
    let mut frames = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 4;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<f64>()
                    .map_err(|_| WipError::parse(line_no, format!("value {i}"), "not a number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 3 * nodes {
            return Err(WipError::parse(
                line_no,
                "frame",
                format!("expected {} values (3 x {nodes} nodes), got {}", 3 * nodes, vals.len()),
            ));
        }
        frames.push(PoseFrame::new(
            vals.chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        ));
    }
    let min_z = frames
        .iter()
        .flat_map(|f| f.points[..joints].iter().map(|p| p.z))
        .fold(f64::INFINITY, f64::min);
    Ok(MotionSequence {
        frames,
        fps,
        scale,
        floor_aligned: min_z.abs() <= 1e-12,
        has_anchors,
        joint_names,
    })
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let file = std::fs::File::open(path)?;
    read_sequence(BufReader::new(file))
}

/// Loads a sequence and checks it against the skeleton's joint count.
pub fn load_sequence_for(path: impl AsRef<Path>, spec: &SkeletonSpec) -> Result<MotionSequence> {
    let seq = load_sequence(path)?;
    if seq.num_joints() != spec.num_joints() {
        return Err(WipError::parse(
            2,
            "J",
            format!(
                "expected {} joints for this skeleton, file has {}",
                spec.num_joints(),
                seq.num_joints()
            ),
        ));
    }
    Ok(seq)
}

/// One matrix per line, row-major. Lines starting with `#` are comments.
pub fn write_matrix_stream<W: Write>(
    matrices: &[DistanceMatrix],
    comment: Option<&str>,
    mut w: W,
) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    for m in matrices {
        let mut line = String::new();
        for (k, v) in m.to_row_major().iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            fmt_f64(&mut line, *v);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Parses a single matrix line; the size is inferred from the entry count.
pub fn parse_matrix_line(line: &str, line_no: usize) -> Result<DistanceMatrix> {
    let vals = line
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>()
                .map_err(|_| WipError::parse(line_no, format!("value {i}"), "not a number"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = (vals.len() as f64).sqrt().round() as usize;
    if n * n != vals.len() || n == 0 {
        return Err(WipError::parse(
            line_no,
            "matrix",
            format!("{} values do not form a square matrix", vals.len()),
        ));
    }
    DistanceMatrix::from_row_major(n, &vals, true)
        .map_err(|e| WipError::parse(line_no, "matrix", e.to_string()))
}

pub fn read_matrix_stream<R: BufRead>(r: R) -> Result<Vec<DistanceMatrix>> {
    let mut out: Vec<DistanceMatrix> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let m = parse_matrix_line(t, k + 1)?;
        if let Some(first) = out.first() {
            if first.size() != m.size() {
                return Err(WipError::parse(
                    k + 1,
                    "matrix",
                    format!("size {} differs from stream size {}", m.size(), first.size()),
                ));
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// One pose per line: `3 · N` decimals.
pub fn write_pose_stream<W: Write>(poses: &[PoseFrame], mut w: W) -> Result<()> {
    for p in poses {
        let mut line = String::new();
        for (k, v) in p.points.iter().flat_map(|q| q.iter()).enumerate() {
            if k > 0 {
                line.push(' ');
            }
            fmt_f64(&mut line, *v);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_pose_stream<R: BufRead>(r: R) -> Result<Vec<PoseFrame>> {
    let mut out: Vec<PoseFrame> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals = t
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<f64>()
                    .map_err(|_| WipError::parse(k + 1, format!("value {i}"), "not a number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.is_empty() || vals.len() % 3 != 0 {
            return Err(WipError::parse(k + 1, "pose", format!("{} values are not 3-vectors", vals.len())));
        }
        let pose = PoseFrame::new(vals.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect());
        if let Some(first) = out.first() {
            if first.len() != pose.len() {
                return Err(WipError::parse(
                    k + 1,
                    "pose",
                    format!("{} nodes, stream has {}", pose.len(), first.len()),
                ));
            }
        }
        out.push(pose);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec() -> SkeletonSpec {
        SkeletonSpec::human(LowerBodyMode::Feet)
    }

    #[test]
    fn pose_stream_round_trip() {
        let poses = vec![
            PoseFrame::from_rows(&[[0.1, -2.0, 3.5], [1e-17, 0.0, 7.25]]),
            PoseFrame::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
        ];
        let mut buf = Vec::new();
        write_pose_stream(&poses, &mut buf).unwrap();
        assert_eq!(read_pose_stream(&buf[..]).unwrap(), poses);
        assert!(read_pose_stream(&b"1 2\n"[..]).is_err());
        assert!(read_pose_stream(&b"1 2 3\n1 2 3 4 5 6\n"[..]).is_err());
    }

    fn bone_lengths(spec: &SkeletonSpec, f: &PoseFrame) -> Vec<f64> {
        spec.bones
            .iter()
            .map(|&(a, b)| (f.points[a] - f.points[b]).norm())
            .collect()
    }

    fn anchored_walk() -> MotionSequence {
        let raw = generate_synthetic(MotionKind::Walk, 10.0, 60.0, 3).unwrap();
        attach_anchors(&preprocess(&raw, &spec()).unwrap(), &spec()).unwrap()
    }

    #[test]
    fn skeleton_is_a_connected_tree() {
        let s = spec();
        assert_eq!(s.num_joints(), 24);
        assert_eq!(s.num_sparse(), 6);
        assert_eq!(s.bones.len(), 23);
        let mut reached = vec![false; 24];
        reached[0] = true;
        for _ in 0..24 {
            for &(a, b) in &s.bones {
                if reached[a] {
                    reached[b] = true;
                }
            }
        }
        assert!(reached.iter().all(|&r| r));
        assert_eq!(SkeletonSpec::human(LowerBodyMode::Knees).sparse_indices[4..], [4, 5]);
    }

    #[test]
    fn walk_has_rigid_bones_and_travels() {
        let s = spec();
        let seq = generate_synthetic(MotionKind::Walk, 10.0, 60.0, 1).unwrap();
        assert_eq!(seq.len(), 600);
        let rest = bone_lengths(&s, &seq.frames[0]);
        for f in &seq.frames {
            for (a, b) in bone_lengths(&s, f).iter().zip(&rest) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let start = seq.frames[0].points[0];
        let end = seq.frames[599].points[0];
        let travel = ((end - start).xy()).norm();
        assert!(travel > 2.0, "travel {travel}");
        for f in &seq.frames {
            let lowest = [7, 8, 10, 11].iter().map(|&j| f.points[j].z).fold(f64::INFINITY, f64::min);
            assert_abs_diff_eq!(lowest, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn squat_bobs_in_place() {
        let seq = generate_synthetic(MotionKind::Squat, 5.0, 60.0, 2).unwrap();
        let xy0 = seq.frames[0].points[0].xy();
        let zs: Vec<f64> = seq.frames.iter().map(|f| f.points[0].z).collect();
        let (lo, hi) = zs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
        assert!(hi - lo > 0.1, "pelvis range {}", hi - lo);
        for f in &seq.frames {
            assert!((f.points[0].xy() - xy0).norm() < 1e-12);
        }
    }

    #[test]
    fn every_kind_generates() {
        for kind in MotionKind::ALL {
            let seq = generate_synthetic(kind, 1.0, 30.0, 0).unwrap();
            assert_eq!(seq.len(), 30);
            assert_eq!(kind.name().parse::<MotionKind>().unwrap(), kind);
        }
        assert!("jump".parse::<MotionKind>().is_err());
        assert!(generate_synthetic(MotionKind::Walk, 0.0, 60.0, 0).is_err());
    }

    #[test]
    fn preprocess_normalizes_and_is_idempotent() {
        let s = spec();
        let raw = generate_synthetic(MotionKind::Walk, 4.0, 60.0, 5).unwrap();
        let p = preprocess(&raw, &s).unwrap();
        let mean_hp = p.frames.iter().map(|f| (f.points[15] - f.points[0]).norm()).sum::<f64>() / p.len() as f64;
        assert_abs_diff_eq!(mean_hp, 1.0, epsilon = 1e-9);
        let min_z = p.frames.iter().flat_map(|f| f.points.iter().map(|q| q.z)).fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(min_z, 0.0, epsilon = 1e-9);
        assert!(p.floor_aligned);
        let q = preprocess(&p, &s).unwrap();
        assert_abs_diff_eq!(q.scale, p.scale, epsilon = 1e-12);
        for (a, b) in p.frames.iter().zip(&q.frames) {
            for (x, y) in a.points.iter().zip(&b.points) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn preprocess_is_scale_invariant() {
        let s = spec();
        let raw = generate_synthetic(MotionKind::Turn, 2.0, 60.0, 6).unwrap();
        let mut doubled = raw.clone();
        for f in &mut doubled.frames {
            *f = f.map(|p| p * 2.0);
        }
        let a = preprocess(&raw, &s).unwrap();
        let b = preprocess(&doubled, &s).unwrap();
        assert_abs_diff_eq!(b.scale, 2.0 * a.scale, epsilon = 1e-12);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            for (p, q) in x.points.iter().zip(&y.points) {
                assert!((p - q).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn preprocess_rejects_degenerate() {
        let s = spec();
        let mut raw = generate_synthetic(MotionKind::Walk, 0.5, 60.0, 1).unwrap();
        for f in &mut raw.frames {
            *f = f.map(|_| Vector3::zeros());
        }
        assert!(matches!(preprocess(&raw, &s), Err(WipError::DegenerateGeometry { .. })));
    }

    #[test]
    fn anchors_are_fixed_and_not_reattached() {
        let s = spec();
        let seq = anchored_walk();
        assert_eq!(seq.num_nodes(), 27);
        for f in &seq.frames {
            assert_eq!(f.points[24], Vector3::new(0.0, 0.0, 0.0));
            assert_eq!(f.points[25], Vector3::new(1.0, 0.0, 0.0));
            assert_eq!(f.points[26], Vector3::new(0.0, 1.0, 0.0));
        }
        let d = pwd(&seq.frames[0].select(&[24, 25, 26])).unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(0, 2), 1.0);
        assert_abs_diff_eq!(d.get(1, 2), 2f64.sqrt(), epsilon = 1e-15);
        assert!(attach_anchors(&seq, &s).is_err());
        let raw = generate_synthetic(MotionKind::Walk, 1.0, 60.0, 1).unwrap();
        assert!(attach_anchors(&raw, &s).is_err());
    }

    #[test]
    fn clean_samples_match_sparse_targets() {
        let s = spec();
        let seq = anchored_walk();
        let samples = make_samples(&seq, &s, &NoiseConfig::clean(), 16).unwrap();
        assert_eq!(samples.len(), 600 - 16);
        let idx = s.sparse_with_anchors();
        assert_eq!(idx, vec![0, 15, 22, 23, 10, 11, 24, 25, 26]);
        for smp in samples.iter().step_by(37) {
            assert_eq!(smp.current_noisy.size(), 9);
            assert_eq!(smp.current_noisy.values, smp.target_distances.submatrix(&idx).values);
            assert_eq!(smp.past_distances.len(), 16);
            assert_eq!(smp.target_distances.size(), 27);
            for (k, a) in s.anchor_targets.iter().enumerate() {
                assert_eq!(smp.target_pose.points[24 + k], *a);
            }
        }
        let noisy = make_samples(&seq, &s, &NoiseConfig::default(), 16).unwrap();
        assert_eq!(noisy.len(), 584);
        assert!(make_samples(&seq, &s, &NoiseConfig::default(), 596).is_err());
    }

    #[test]
    fn sequence_round_trip_is_bitwise() {
        let seq = anchored_walk();
        let mut buf = Vec::new();
        write_sequence(&seq, &mut buf).unwrap();
        let back = read_sequence(&buf[..]).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn loader_names_expected_joint_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.wipseq");
        let names: Vec<String> = (0..23).map(|i| format!("j{i}")).collect();
        let mut body = format!("WIPSEQ v1\nfps=20 J=23 anchors=0 scale=1\n{}\n", names.join(","));
        body.push_str(&vec!["0"; 69].join(" "));
        body.push('\n');
        std::fs::write(&path, body).unwrap();
        let seq = load_sequence(&path).unwrap();
        assert_eq!(seq.fps, 20.0);
        match load_sequence_for(&path, &spec()) {
            Err(WipError::Parse { message, .. }) => assert!(message.contains("24"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn loader_reports_bad_rows() {
        let text = "WIPSEQ v1\nfps=60 J=1 anchors=0 scale=1\npelvis\n0 0 0\n1 2\n";
        match read_sequence(text.as_bytes()) {
            Err(WipError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad = "WIPSEQ v2\n";
        assert!(matches!(read_sequence(bad.as_bytes()), Err(WipError::Parse { line: 1, .. })));
    }

    #[test]
    fn matrix_stream_round_trip() {
        let seq = anchored_walk();
        let mats: Vec<_> = seq.frames[..5]
            .iter()
            .map(|f| pwd(f).unwrap().submatrix(&spec().sparse_with_anchors()))
            .collect();
        let mut buf = Vec::new();
        write_matrix_stream(&mats, Some("test"), &mut buf).unwrap();
        let back = read_matrix_stream(&buf[..]).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in mats.iter().zip(&back) {
            assert_eq!(a.values, b.values);
        }
        assert!(read_matrix_stream("1 2 3\n".as_bytes()).is_err());
    }
}
