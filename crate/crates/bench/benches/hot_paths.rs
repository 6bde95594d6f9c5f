use criterion::{criterion_group, criterion_main, Criterion};
use latentcatch::collision::gjk_distance;
use latentcatch::ekf::{predict_static, update};
use latentcatch::graph::shortest_path;
use latentcatch::kdtree::KdTree;
use latentcatch::manifold::embed_dataset;
use latentcatch::world::project_exact;
use latentcatch::{min_arm_clearance, run_scenario, ConvexShape, EkfConfig, EkfState, JointVector, ManifoldConfig};
use latentcatch_bench::{dataset, free_throw, pipeline};
use nalgebra::Vector3;

fn gjk(c: &mut Criterion) {
    let a = ConvexShape::capsule(Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.3, 0.1, 0.4), 0.06);
    let b = ConvexShape::capsule(Vector3::new(0.5, -0.2, 0.1), Vector3::new(0.2, 0.4, 0.5), 0.05);
    c.bench_function("gjk capsule-capsule", |bch| bch.iter(|| gjk_distance(&a, &b)));
    let p = pipeline(600);
    let q = JointVector(vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785]);
    let obs = [ConvexShape::sphere(Vector3::new(0.4, 0.1, 0.5), 0.05)];
    c.bench_function("arm clearance, one sphere", |bch| bch.iter(|| min_arm_clearance(&p.model, &q, &obs)));
}

fn dijkstra(c: &mut Criterion) {
    let p = pipeline(3000);
    let nodes: Vec<usize> = p.graph.giant_nodes().collect();
    let (src, dst) = (nodes[0], nodes[nodes.len() - 1]);
    c.bench_function("dijkstra 3000 nodes", |bch| bch.iter(|| shortest_path(&p.graph, src, dst)));
    let pts: Vec<[f64; 3]> = nodes.iter().map(|&n| p.node_ee(n).into()).collect();
    let tree = KdTree::build(pts);
    c.bench_function("kd-tree nearest, 3000 points", |bch| bch.iter(|| tree.nearest(&[0.4, 0.0, 0.5])));
}

fn embed(c: &mut Criterion) {
    let mut g = c.benchmark_group("embed");
    g.sample_size(10);
    for n in [500usize, 2000] {
        let ds = dataset(n);
        g.bench_function(format!("diffusion map n={n}"), |bch| {
            bch.iter(|| embed_dataset(&ds, &ManifoldConfig::default()))
        });
    }
    g.finish();
}

fn ekf(c: &mut Criterion) {
    let (sc, _) = free_throw();
    let cfg = EkfConfig::default();
    let o = project_exact(&sc.camera, &sc.ball.position, 0.0).unwrap();
    let s = EkfState::new(&cfg, &sc.camera, &o, sc.camera.frame_period()).unwrap();
    let y = s.measurement(&o);
    c.bench_function("ekf predict+update", |bch| {
        bch.iter(|| {
            let s = predict_static(&s).unwrap();
            update(&s, &y).unwrap()
        })
    });
}

fn scenario(c: &mut Criterion) {
    let p = pipeline(3000);
    let (sc, rc) = free_throw();
    let mut g = c.benchmark_group("runner");
    g.sample_size(10);
    g.bench_function("one free throw, 1 kHz tick", |bch| {
        bch.iter(|| run_scenario(&p, &sc, &rc))
    });
    g.finish();
}

criterion_group!(benches, gjk, dijkstra, embed, ekf, scenario);
criterion_main!(benches);
