//! Sequential vs parallel batch evaluation: EKF over a test set, and one
//! gradient batch of the learned-gain filter.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slamkn::dataset::{generate_dataset, NoiseConfig, NoiseSpec, ScenarioConfig};
use slamkn::ekf::{run_trajectory, NoiseMatrices};
use slamkn::hybrid::{Episode, FeatureNorm};
use slamkn::kalmannet::KalmanNetModel;
use slamkn::neural::GainNetConfig;
use slamkn::par::Execution;
use slamkn::slam_model::RangeBearingModel;
use slamkn::system::StateSpaceModel;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn ekf_batch(c: &mut Criterion) {
    let noise = NoiseConfig::new(1e-3, 1e-3, 10.0, 1e3).unwrap();
    let ds = generate_dataset(&ScenarioConfig::d2(64, 1), &NoiseSpec::Fixed(noise)).unwrap();
    let mut group = c.benchmark_group("ekf_batch_64x50");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&ds.trajectories, |_, t| run_trajectory(t, &NoiseMatrices::exact_for(t)).map(|r| r.means)))
        });
    }
    group.finish();
}

fn gradient_batch(c: &mut Criterion) {
    let ds = generate_dataset(&ScenarioConfig::d1(32, 2), &NoiseSpec::training()).unwrap();
    let system = RangeBearingModel::new(ds.landmark_count()).unwrap();
    let (n, p) = (system.state_dim(), system.meas_dim());
    let input = KalmanNetModel::input_dim(n, p);
    let mut cfg = GainNetConfig::new(input, 32, n, p);
    cfg.output_init_scale = 0.01;
    let model = KalmanNetModel::new(n, p, cfg, FeatureNorm::identity(input), 0).unwrap();
    let eps: Vec<Episode> = ds.trajectories.iter().map(|t| Episode::from_trajectory(t).unwrap()).collect();
    let mut group = c.benchmark_group("kalmannet_grad_batch_32x20");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&eps, |_, ep| model.loss_and_gradient(&system, ep).map(|(l, _)| l)))
        });
    }
    group.finish();
}

criterion_group!(benches, ekf_batch, gradient_batch);
criterion_main!(benches);
