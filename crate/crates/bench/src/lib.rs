//! Shared fixtures for the benchmarks.

use wip_core::dataio::{attach_anchors, generate_synthetic, preprocess, LowerBodyMode, MotionKind};
use wip_core::edm::pwd;
use wip_core::{DistanceMatrix, MotionSequence, SkeletonSpec};

pub fn spec() -> SkeletonSpec {
    SkeletonSpec::human(LowerBodyMode::Feet)
}

/// Anchored, normalized walk.
pub fn walk(seconds: f64) -> MotionSequence {
    let spec = spec();
    let raw = generate_synthetic(MotionKind::Walk, seconds, 60.0, 0).expect("synthetic walk");
    attach_anchors(&preprocess(&raw, &spec).expect("preprocess"), &spec).expect("anchors")
}

/// Clean sensor-plus-anchor distance stream of `seq`.
pub fn sensor_stream(seq: &MotionSequence) -> Vec<DistanceMatrix> {
    let idx = spec().sparse_with_anchors();
    seq.frames.iter().map(|f| pwd(&f.select(&idx)).expect("pwd")).collect()
}
