use criterion::{black_box, criterion_group, criterion_main, Criterion};
use wip_bench::{sensor_stream, spec, walk};
use wip_core::edm::{classical_mds, eigen_report, pwd};
use wip_core::inference::{baseline_for_spec, run_stream, InferenceConfig};
use wip_core::model::{Feedback, ModelConfig, Variant, WipModel};
use wip_core::DType;

fn geometry(c: &mut Criterion) {
    let seq = walk(1.0);
    let frame = seq.frames[0].clone();
    let d = pwd(&frame).unwrap();
    c.bench_function("pwd_27", |b| b.iter(|| pwd(black_box(&frame)).unwrap()));
    c.bench_function("classical_mds_27", |b| b.iter(|| classical_mds(black_box(&d), 3).unwrap()));
    c.bench_function("eigen_report_27", |b| b.iter(|| eigen_report(black_box(&d)).unwrap()));
    let stream = sensor_stream(&seq);
    let spec = spec();
    c.bench_function("baseline_60_frames", |b| b.iter(|| baseline_for_spec(black_box(&stream), &spec).unwrap()));
}

fn model(c: &mut Criterion) {
    let spec = spec();
    let seq = walk(1.0);
    let stream = sensor_stream(&seq);
    let cfg = ModelConfig::human(Variant::H).with_pose_skip(&spec);
    let w = cfg.window;
    let model = WipModel::new(cfg, 0, DType::F32).unwrap();
    let past: Vec<_> = seq.frames[..w].iter().map(|f| pwd(f).unwrap()).collect();
    c.bench_function("forward_single_window", |b| {
        b.iter(|| model.predict(Feedback::Distances(black_box(&past)), &stream[w]).unwrap())
    });
    let mut g = c.benchmark_group("stream");
    g.sample_size(10);
    g.bench_function("run_stream_60_frames", |b| {
        b.iter(|| run_stream(&model, &spec, black_box(&stream), &InferenceConfig::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, geometry, model);
criterion_main!(benches);
