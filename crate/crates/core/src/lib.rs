// Validation uses `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arm;
pub mod artifact;
pub mod collision;
pub mod dataset;
pub mod decoder;
pub mod ekf;
pub mod error;
pub mod graph;
pub mod hash;
pub mod kdtree;
pub mod manifold;
pub mod runner;
pub mod spectral;
pub mod suite;
pub mod world;

pub use arm::{forward_kinematics, ArmModel, EePose, JointVector};
pub use collision::{gjk_distance, min_arm_clearance, ConvexShape, DistanceResult};
pub use dataset::{Aabb, Dataset, Sample};
pub use decoder::{DecoderNet, TrainHyper};
pub use ekf::{EkfConfig, EkfState, InterceptPrediction};
pub use error::{Error, ErrorClass, Result};
pub use graph::{shortest_path, PlanGraph, Route};
pub use manifold::{DiffusionOperator, Embedding, ManifoldConfig};
pub use runner::{batch_run, run_scenario, Pipeline, RunMetrics, RunnerConfig, ScenarioConfig, ScenarioTrace};
pub use suite::SuiteConfig;
pub use world::{CameraModel, Scenario};
