use criterion::{criterion_group, criterion_main, Criterion};
use mwreg::baseline::{build_pose_graph, icp_register, optimize_two_pass, prepare_cloud, IcpConfig, LineProcessConfig, MultiwayConfig};
use mwreg::cloudproc::{preprocess, PreprocessConfig};
use mwreg::dataio::{synth_generate, MotionModel, SyntheticSceneSpec};
use mwreg::geom3d::RigidTransform;
use mwreg::model::{Model, ModelConfig};
use std::hint::black_box;

fn baseline(c: &mut Criterion) {
    let seq = synth_generate(&SyntheticSceneSpec {
        motion: MotionModel::Loop { radius: 0.5, yaw_amplitude: 0.3 },
        ..Default::default()
    })
    .unwrap();
    let cfg = MultiwayConfig::default();
    let prepared: Vec<_> = seq.clouds.iter().map(|c| prepare_cloud(c, &cfg).unwrap()).collect();
    let icp = IcpConfig::default();
    c.bench_function("icp_point_to_plane", |b| {
        b.iter(|| icp_register(black_box(&prepared[1]), &prepared[0], &RigidTransform::identity(), &icp).unwrap())
    });
    let graph = build_pose_graph(&prepared, &cfg).unwrap();
    let lp = LineProcessConfig::for_graph(&graph, cfg.fine_distance());
    c.bench_function("optimize_two_pass_10_nodes", |b| b.iter(|| optimize_two_pass(black_box(&graph), &lp, &cfg.solver).unwrap()));
}

fn model(c: &mut Criterion) {
    let seq = synth_generate(&SyntheticSceneSpec { n_scans: 5, ..Default::default() }).unwrap();
    let clouds: Vec<_> = seq.clouds.iter().map(|c| preprocess(c, &PreprocessConfig::default(), 0).unwrap()).collect();
    let model = Model::init(ModelConfig::toy(), 0).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("toy_predict_window_5", |b| b.iter(|| model.predict_window(black_box(&clouds)).unwrap()));
    group.finish();
}

criterion_group!(benches, baseline, model);
criterion_main!(benches);
