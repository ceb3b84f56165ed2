use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use synflow_core::geom::{self, OrientedBox, Pose, Ray, Vec3};
use synflow_core::lidar::{self, BeamConfig, SensorScene};

fn single_ray(c: &mut Criterion) {
    let b = OrientedBox::from_pose(&Pose::from_yaw(0.4, Vec3::new(10.0, 2.0, 0.8)), Vec3::new(2.3, 1.0, 0.8));
    let origin = Vec3::new(0.0, 0.0, 1.9);
    let ray = Ray::new(origin, b.center - origin).unwrap();
    c.bench_function("ray_obb_hit", |bn| bn.iter(|| geom::ray_obb_intersect(std::hint::black_box(&ray), &b)));
}

fn full_scan(c: &mut Criterion) {
    let town = synflow_bench::town();
    let s = synflow_bench::busy_state(&town);
    let agents: Vec<_> = s.agents().collect();
    let mut g = c.benchmark_group("scan");
    g.sample_size(10);
    for cfg in [BeamConfig::default_32(), BeamConfig::default_64()] {
        g.bench_with_input(BenchmarkId::new("beams", cfg.channels), &cfg, |bn, cfg| {
            bn.iter(|| lidar::scan(&agents, &town.scenery, &s.ego, cfg).unwrap())
        });
        let scene = SensorScene::new(&agents, &town.scenery, &s.ego, &cfg);
        g.bench_with_input(BenchmarkId::new("cast_only", cfg.channels), &cfg, |bn, cfg| {
            bn.iter(|| lidar::scan_scene(&scene, cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, single_ray, full_scan);
criterion_main!(benches);
