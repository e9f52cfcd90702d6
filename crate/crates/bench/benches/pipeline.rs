use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatrig::optimize::{FitProblem, Targets};
use splatrig::scene::random_unit_quat;
use splatrig::*;

fn tree(m: usize, seed: u64) -> Skeleton {
    let cloud = GaussianCloud::random_in_sphere(4 * m, 1.0, seed).unwrap();
    build_tree(&sample_candidates(&cloud, m, seed).unwrap()).unwrap()
}

fn fk(c: &mut Criterion) {
    let skel = tree(30, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pose: Vec<Quat> = (0..30).map(|_| random_unit_quat(&mut rng)).collect();
    c.bench_function("forward_kinematics_30", |b| {
        b.iter(|| forward_kinematics(&skel, black_box(&pose), &Vec3::zeros()).unwrap())
    });
}

fn lbs(c: &mut Criterion) {
    let cloud = GaussianCloud::random_in_sphere(10_000, 1.0, 3).unwrap();
    let skel = tree(30, 3);
    let binding = bind(&cloud, &skel, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pose: Vec<Quat> = (0..30).map(|_| random_unit_quat(&mut rng)).collect();
    let fk = forward_kinematics(&skel, &pose, &Vec3::zeros()).unwrap();
    c.bench_function("bind_10k_k4", |b| b.iter(|| bind(black_box(&cloud), &skel, 4).unwrap()));
    c.bench_function("lbs_10k_k4", |b| b.iter(|| lbs_deform(black_box(&cloud), &binding, &fk).unwrap()));
}

fn rasterize(c: &mut Criterion) {
    let cloud = GaussianCloud::random_in_sphere(2_000, 1.0, 5).unwrap();
    let cam = CameraSpec::orbit_degrees(Vec3::zeros(), 3.5, 30.0, 15.0, 128, 128).unwrap();
    c.bench_function("render_2k_128px", |b| b.iter(|| render(black_box(&cloud), &cam).unwrap()));
}

fn hexplane(c: &mut Criterion) {
    let cloud = GaussianCloud::random_in_sphere(2_000, 1.0, 6).unwrap();
    let field = HexplaneField::for_cloud(&FieldConfig::default(), &cloud, 32, 0.25).unwrap();
    c.bench_function("hexplane_query_2k", |b| {
        b.iter(|| field.query_deltas(black_box(&cloud.positions), 7.5).unwrap())
    });
}

fn mst(c: &mut Criterion) {
    let cloud = GaussianCloud::random_in_sphere(5_000, 1.0, 7).unwrap();
    let cands = sample_candidates(&cloud, 70, 0).unwrap();
    c.bench_function("sample_candidates_70_of_5k", |b| {
        b.iter(|| sample_candidates(black_box(&cloud), 70, 0).unwrap())
    });
    c.bench_function("build_tree_70", |b| b.iter(|| build_tree(black_box(&cands)).unwrap()));
}

fn gradient(c: &mut Criterion) {
    let (cloud, skel, truth) = make_synthetic_scene(&SyntheticSpec::pendulum(16)).unwrap();
    let scene = Scene::new(cloud, skel, 4, 1).unwrap();
    let targets = Targets::synthesize(&scene, &truth, None, &[], true).unwrap();
    let objective = Objective::new(vec![(TermKind::Chamfer, 2e4)]).unwrap();
    let poses = PoseSequence::identity(16, 3);
    let problem = FitProblem::new(scene, targets, objective, Stage::R, poses, None).unwrap();
    c.bench_function("pendulum_chamfer_gradient", |b| b.iter(|| problem.gradient().unwrap()));
}

criterion_group!(benches, fk, lbs, rasterize, hexplane, mst, gradient);
criterion_main!(benches);
