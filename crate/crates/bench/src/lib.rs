//! Shared fixtures for the benchmarks.

use latentcatch::dataset::generate;
use latentcatch::manifold::embed_dataset;
use latentcatch::suite::generate_free_suite;
use latentcatch::{graph, Aabb, ArmModel, Dataset, ManifoldConfig, Pipeline, RunnerConfig, Scenario, SuiteConfig};

pub fn dataset(n: usize) -> Dataset {
    generate(&ArmModel::panda(), n, &Aabb::default_obstacle_box(), 42).expect("dataset")
}

pub fn pipeline(n: usize) -> Pipeline {
    let ds = dataset(n);
    let (_, emb) = embed_dataset(&ds, &ManifoldConfig::default()).expect("embedding");
    let g = graph::build(&emb, &ds, 8).expect("graph");
    Pipeline::new(ArmModel::panda(), ds, emb, g).expect("pipeline")
}

pub fn free_throw() -> (Scenario, RunnerConfig) {
    generate_free_suite(&SuiteConfig { count: 1, ..SuiteConfig::default() }).remove(0)
}
