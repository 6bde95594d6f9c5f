//! Closed-loop catch scenarios: camera features feed the EKF, intercept predictions pick a
//! target node by end-effector position, and the arm walks the latent graph one edge per tick
//! while obstacles are relabeled and routes revised.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{forward_kinematics, ArmModel, JointVector};
use crate::artifact::MetaBlock;
use crate::collision::{min_arm_clearance, NO_OBSTACLE_CLEARANCE};
use crate::dataset::{Dataset, DOF};
use crate::ekf::{
    estimate_feature_velocity, predict_intercept, predict_static, update, EkfConfig, EkfState,
    InterceptPrediction, ReachShell,
};
use crate::error::{Error, Result};
use crate::graph::{relabel_blocked, shortest_path, PlanGraph, Route};
use crate::kdtree::KdTree;
use crate::manifold::Embedding;
use crate::world::{project, step_ball, BallState, FeatureObservation, Scenario};

/// Artifact locations for file-driven runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    /// Arm model JSON; the built-in Panda model when absent.
    #[serde(default)]
    pub arm: Option<PathBuf>,
    pub dataset: PathBuf,
    pub embedding: PathBuf,
    pub graph: PathBuf,
    /// Only checked for hash consistency; nodes execute their stored joints.
    #[serde(default)]
    pub decoder: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    pub tick: f64,
    pub catch_tolerance: f64,
    pub substeps: usize,
    pub seed: u64,
    pub shell: ReachShell,
    /// Intercept prediction horizon, seconds.
    pub horizon: f64,
    /// Frames between the first prediction and the re-prediction.
    pub repredict_frames: usize,
    /// Earliest intercept time after the prediction, seconds.
    pub intercept_lead: f64,
    pub ekf: EkfConfig,
    pub start_joints: Vec<f64>,
    /// Relabel-reroute rounds allowed within one tick.
    pub max_reroutes_per_tick: usize,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            tick: 1.0 / 30.0,
            catch_tolerance: 0.10,
            substeps: 4,
            seed: 0,
            shell: ReachShell { center: Vector3::new(0.0, 0.0, 0.333), r_min: 0.25, r_max: 0.8 },
            horizon: 1.5,
            repredict_frames: 8,
            intercept_lead: 0.0,
            ekf: EkfConfig::default(),
            start_joints: vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785],
            max_reroutes_per_tick: 32,
        }
    }
}

impl RunnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tick > 0.0) {
            return bad(format!("tick {} must be > 0", self.tick));
        }
        if !(self.catch_tolerance > 0.0) {
            return bad(format!("catch tolerance {} must be > 0", self.catch_tolerance));
        }
        if self.substeps == 0 {
            return bad("substeps must be >= 1".into());
        }
        if !(self.horizon >= 0.0) || !(self.intercept_lead >= 0.0) {
            return bad("horizon and intercept lead must be >= 0".into());
        }
        let s = &self.shell;
        if !(s.r_min >= 0.0 && s.r_max > s.r_min) {
            return bad(format!("reach shell radii {} .. {} are invalid", s.r_min, s.r_max));
        }
        if self.start_joints.len() != DOF {
            return bad(format!("start joints need {DOF} values, got {}", self.start_joints.len()));
        }
        if self.ekf.window < 2 {
            return bad("velocity window must be >= 2".into());
        }
        Ok(())
    }
}

/// One scenario file: artifacts, world and control settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub artifacts: Option<ArtifactPaths>,
    pub scenario: Scenario,
    #[serde(default)]
    pub runner: RunnerConfig,
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig = serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.scenario.validate()?;
        cfg.runner.validate()?;
        Ok(cfg)
    }
}

/// Hash-consistent artifacts plus the lookup structures a run needs.
pub struct Pipeline {
    pub model: ArmModel,
    pub ds: Dataset,
    pub emb: Embedding,
    pub graph: PlanGraph,
    /// End-effector positions of giant-component nodes.
    ee_tree: KdTree<3>,
    /// Joint vectors of giant-component nodes.
    joint_tree: KdTree<DOF>,
}

impl Pipeline {
    pub fn new(model: ArmModel, ds: Dataset, emb: Embedding, graph: PlanGraph) -> Result<Self> {
        let arm_hash = model.content_hash();
        if ds.meta.arm_hash != arm_hash {
            return Err(Error::Config(format!(
                "dataset was generated for arm {} but the model hashes to {arm_hash}",
                ds.meta.arm_hash
            )));
        }
        if emb.dataset_hash != ds.hash || emb.len() != ds.len() {
            return Err(Error::Config(format!(
                "embedding belongs to dataset {}, not {}",
                emb.dataset_hash, ds.hash
            )));
        }
        if graph.dataset_hash != ds.hash || graph.embedding_hash != emb.hash {
            return Err(Error::Config(format!(
                "graph was built from dataset {} / embedding {}, expected {} / {}",
                graph.dataset_hash, graph.embedding_hash, ds.hash, emb.hash
            )));
        }
        let giant: Vec<usize> = graph.giant_nodes().collect();
        if giant.is_empty() {
            return Err(Error::Config("graph has no giant-component nodes".into()));
        }
        let ee_pts = giant
            .iter()
            .map(|&i| {
                let p = ds.samples[i].ee.position;
                [p.x, p.y, p.z]
            })
            .collect();
        let joint_pts = giant
            .iter()
            .map(|&i| std::array::from_fn(|j| ds.samples[i].theta.0[j]))
            .collect();
        Ok(Pipeline {
            ee_tree: KdTree::build_with_payload(ee_pts, giant.clone()),
            joint_tree: KdTree::build_with_payload(joint_pts, giant),
            model,
            ds,
            emb,
            graph,
        })
    }

    pub fn load(paths: &ArtifactPaths) -> Result<Self> {
        let model = match &paths.arm {
            Some(p) => ArmModel::load(p)?,
            None => ArmModel::panda(),
        };
        let ds = Dataset::load(&paths.dataset)?;
        let emb = Embedding::load(&paths.embedding)?;
        let graph = PlanGraph::load(&paths.graph)?;
        if let Some(d) = &paths.decoder {
            let net = crate::decoder::DecoderNet::load(d)?;
            if net.dataset_hash != ds.hash || net.embedding_hash != emb.hash {
                return Err(Error::Config(format!(
                    "decoder {} was trained on other artifacts",
                    d.display()
                )));
            }
        }
        Pipeline::new(model, ds, emb, graph)
    }

    pub fn node_joints(&self, node: usize) -> &JointVector {
        &self.ds.samples[node].theta
    }

    pub fn node_ee(&self, node: usize) -> Vector3<f64> {
        self.ds.samples[node].ee.position
    }

    /// Nearest giant node by end-effector position that `ok` accepts.
    pub fn nearest_ee_node(&self, p: &Vector3<f64>, ok: impl Fn(usize) -> bool) -> Option<usize> {
        nearest_accepted(&self.ee_tree, &[p.x, p.y, p.z], ok)
    }

    /// Nearest giant node in joint space that `ok` accepts.
    pub fn nearest_joint_node(&self, q: &JointVector, ok: impl Fn(usize) -> bool) -> Option<usize> {
        let a: [f64; DOF] = std::array::from_fn(|j| q.0[j]);
        nearest_accepted(&self.joint_tree, &a, ok)
    }

    /// Giant node whose stored joints are exactly `q`.
    pub fn node_at(&self, q: &JointVector) -> Option<usize> {
        self.nearest_joint_node(q, |_| true).filter(|&n| self.node_joints(n) == q)
    }
}

fn nearest_accepted<const D: usize>(tree: &KdTree<D>, q: &[f64; D], ok: impl Fn(usize) -> bool) -> Option<usize> {
    let mut k = 8;
    loop {
        let hits = tree.k_nearest(q, k).ok()?;
        if let Some(&(n, _)) = hits.iter().find(|(n, _)| ok(*n)) {
            return Some(n);
        }
        if k >= tree.len() {
            return None;
        }
        k = (k * 4).min(tree.len());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Event {
    Trigger,
    /// First intercept prediction and route.
    Predict,
    Repredict,
    Reroute,
    Catch,
    Miss,
    Blocked,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Event::Trigger => "TRIGGER",
            Event::Predict => "PREDICT",
            Event::Repredict => "REPREDICT",
            Event::Reroute => "REROUTE",
            Event::Catch => "CATCH",
            Event::Miss => "MISS",
            Event::Blocked => "BLOCKED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub ball: Vector3<f64>,
    pub observation: Option<FeatureObservation>,
    pub filter: Option<[f64; 3]>,
    pub filter_var: Option<[f64; 3]>,
    pub innovation: Option<f64>,
    pub stage: u32,
    pub revision: Option<u32>,
    pub joints: JointVector,
    pub ee: Vector3<f64>,
    /// Smallest link-obstacle clearance over the tick's substeps.
    pub clearance: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioTrace {
    pub rows: Vec<TraceRow>,
    pub meta: Vec<(String, String)>,
    /// Every issued route in order; not part of the CSV.
    pub routes: Vec<Route>,
    /// Accepted intercept predictions with the chosen target node.
    pub predictions: Vec<(InterceptPrediction, usize)>,
}

pub const TRACE_COLUMNS: [&str; 30] = [
    "time", "ball_x", "ball_y", "ball_z", "obs_fx", "obs_fy", "obs_z", "ekf_fx", "ekf_fy", "ekf_z",
    "var_fx", "var_fy", "var_z", "innovation", "stage", "revision", "q0", "q1", "q2", "q3", "q4",
    "q5", "q6", "ee_x", "ee_y", "ee_z", "clearance", "events", "catch_dist", "tick",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ScenarioTrace {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut meta = MetaBlock::new("latentcatch trace v1");
        for (k, v) in &self.meta {
            meta.set(k, v);
        }
        let mut out = meta.render().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
            for (k, r) in self.rows.iter().enumerate() {
                let o = r.observation.as_ref();
                let f = r.filter;
                let v = r.filter_var;
                let mut rec: Vec<String> = vec![
                    r.time.to_string(),
                    r.ball.x.to_string(),
                    r.ball.y.to_string(),
                    r.ball.z.to_string(),
                    opt(o.map(|o| o.fx)),
                    opt(o.map(|o| o.fy)),
                    opt(o.map(|o| o.z)),
                    opt(f.map(|x| x[0])),
                    opt(f.map(|x| x[1])),
                    opt(f.map(|x| x[2])),
                    opt(v.map(|x| x[0])),
                    opt(v.map(|x| x[1])),
                    opt(v.map(|x| x[2])),
                    opt(r.innovation),
                    r.stage.to_string(),
                    r.revision.map(|x| x.to_string()).unwrap_or_default(),
                ];
                rec.extend(r.joints.0.iter().map(|x| x.to_string()));
                rec.extend([r.ee.x, r.ee.y, r.ee.z].iter().map(|x| x.to_string()));
                rec.push(r.clearance.to_string());
                rec.push(r.events.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("|"));
                rec.push((r.ee - r.ball).norm().to_string());
                rec.push(k.to_string());
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Numerical(format!("trace write failed: {e}")))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::artifact::write(path.as_ref(), &self.to_csv()?)
    }

    pub fn events(&self) -> Vec<(f64, Event)> {
        self.rows
            .iter()
            .flat_map(|r| r.events.iter().map(move |e| (r.time, *e)))
            .collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv write failed: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub triggered: bool,
    pub caught: bool,
    /// Distance at the catch, else the closest approach over the run.
    pub catch_error: f64,
    pub time_to_catch: Option<f64>,
    pub reroutes: usize,
    pub blocked_events: usize,
    pub min_clearance: f64,
    /// Executed motion substeps with a penetrating configuration.
    pub penetrations: usize,
    /// Substeps where an obstacle reached the arm while it held still.
    pub held_contacts: usize,
    pub route_lengths: Vec<usize>,
    /// The first issued route later had a node blocked.
    pub initial_route_blocked: bool,
    pub ticks: usize,
}

struct Arm {
    q: JointVector,
    /// Node the arm rests at, if any.
    node: Option<usize>,
}

struct Plan {
    route: Route,
    /// Index in `route.nodes` of the next node to move to.
    next: usize,
    target: usize,
}

impl Plan {
    fn remaining(&self) -> &[usize] {
        &self.route.nodes[self.next.min(self.route.nodes.len())..]
    }
}

struct Runner<'a> {
    p: &'a Pipeline,
    cfg: &'a RunnerConfig,
    graph: PlanGraph,
    arm: Arm,
    plan: Option<Plan>,
    /// Target node kept while halted after BLOCKED.
    halted_target: Option<usize>,
    revision: u32,
    first_route_revision: Option<u32>,
    metrics: RunMetrics,
    routes: Vec<Route>,
}

impl<'a> Runner<'a> {
    /// Node to plan from: the resting node when usable, else the nearest free node.
    fn start_node(&self) -> Option<usize> {
        match self.arm.node {
            Some(n) if !self.graph.is_blocked(n) => Some(n),
            _ => self.p.nearest_joint_node(&self.arm.q, |n| !self.graph.is_blocked(n)),
        }
    }

    fn issue_route(&mut self, target: usize, now: f64) -> Result<bool> {
        let Some(start) = self.start_node() else {
            return Ok(false);
        };
        match shortest_path(&self.graph, start, target) {
            Ok(mut r) => {
                self.revision += 1;
                r.revision = self.revision;
                r.created_at = now;
                self.metrics.route_lengths.push(r.hops());
                self.routes.push(r.clone());
                if self.first_route_revision.is_none() {
                    self.first_route_revision = Some(r.revision);
                }
                let next = usize::from(self.arm.node == r.nodes.first().copied());
                self.plan = Some(Plan { route: r, next, target });
                self.halted_target = None;
                Ok(true)
            }
            Err(Error::NoPath { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn choose_target(&self, pred: &InterceptPrediction) -> Option<usize> {
        self.p.nearest_ee_node(&pred.point, |n| !self.graph.is_blocked(n))
    }

    /// Relabels the remaining route against the live obstacles and reroutes until it is clear.
    /// True when some substep of the edge from the current pose to `node` penetrates an
    /// obstacle at the substep's own time.
    fn edge_penetrates(&self, sc: &Scenario, node: usize, now: f64) -> Result<bool> {
        let to = self.p.node_joints(node);
        let h = self.cfg.tick / self.cfg.substeps as f64;
        for s in 1..=self.cfg.substeps {
            let q = self.arm.q.lerp(to, s as f64 / self.cfg.substeps as f64);
            let cl = min_arm_clearance(&self.p.model, &q, &sc.obstacles_at(now + s as f64 * h))?;
            if cl.penetrating || cl.distance <= 0.0 {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn block(&mut self, node: usize) {
        let mut b = (*self.graph.blocked).clone();
        b.insert(node);
        self.graph.blocked = std::sync::Arc::new(b);
    }

    fn keep_route_clear(&mut self, sc: &Scenario, now: f64, events: &mut Vec<Event>) -> Result<()> {
        let obstacles = &sc.obstacles_at(now);
        if obstacles.is_empty() {
            return Ok(());
        }
        if let Some(target) = self.halted_target {
            self.graph.blocked = relabel_blocked(&self.graph, &self.p.ds, &self.p.model, obstacles, &[target]);
            if !self.graph.is_blocked(target) && self.issue_route(target, now)? {
                events.push(Event::Reroute);
                self.metrics.reroutes += 1;
            }
        }
        for _ in 0..self.cfg.max_reroutes_per_tick {
            let Some(plan) = &self.plan else { return Ok(()) };
            // the resting node counts too, so a parked arm evades
            let mut cands: Vec<usize> = plan.remaining().to_vec();
            cands.extend(self.arm.node);
            let next = plan.remaining().first().copied();
            self.graph.blocked = relabel_blocked(&self.graph, &self.p.ds, &self.p.model, obstacles, &cands);
            let mut hit = cands.iter().any(|&c| self.graph.is_blocked(c));
            if !hit {
                if let Some(n) = next {
                    if self.edge_penetrates(sc, n, now)? {
                        self.block(n);
                        hit = true;
                    }
                }
            }
            if !hit {
                return Ok(());
            }
            let plan = self.plan.as_ref().expect("plan checked above");
            if Some(plan.route.revision) == self.first_route_revision {
                self.metrics.initial_route_blocked = true;
            }
            let target = plan.target;
            let target = if self.graph.is_blocked(target) {
                // nearest free node to the blocked target's end effector
                let ee = self.p.node_ee(target);
                match self.p.nearest_ee_node(&ee, |n| !self.graph.is_blocked(n)) {
                    Some(t) => t,
                    None => target,
                }
            } else {
                target
            };
            if self.issue_route(target, now)? {
                events.push(Event::Reroute);
                self.metrics.reroutes += 1;
            } else {
                events.push(Event::Blocked);
                self.metrics.blocked_events += 1;
                self.plan = None;
                self.halted_target = Some(target);
                return Ok(());
            }
        }
        log::warn!("route still blocked after {} reroutes at t={now}", self.cfg.max_reroutes_per_tick);
        events.push(Event::Blocked);
        self.metrics.blocked_events += 1;
        self.halted_target = self.plan.take().map(|pl| pl.target);
        Ok(())
    }
}

/// Runs one scenario to CATCH, MISS or timeout.
pub fn run_scenario(p: &Pipeline, sc: &Scenario, cfg: &RunnerConfig) -> Result<(ScenarioTrace, RunMetrics)> {
    sc.validate()?;
    cfg.validate()?;
    let start = JointVector(cfg.start_joints.clone());
    p.model.check_limits(&start).map_err(|e| Error::Config(format!("start joints: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r = Runner {
        p,
        cfg,
        graph: p.graph.clone(),
        arm: Arm { node: p.node_at(&start), q: start },
        plan: None,
        halted_target: None,
        revision: 0,
        first_route_revision: None,
        metrics: RunMetrics {
            triggered: false,
            caught: false,
            catch_error: f64::INFINITY,
            time_to_catch: None,
            reroutes: 0,
            blocked_events: 0,
            min_clearance: NO_OBSTACLE_CLEARANCE,
            penetrations: 0,
            held_contacts: 0,
            route_lengths: Vec::new(),
            initial_route_blocked: false,
            ticks: 0,
        },
        routes: Vec::new(),
    };
    let frame_period = sc.camera.frame_period();
    let h = cfg.tick / cfg.substeps as f64;
    let n_ticks = (sc.duration / cfg.tick).ceil() as usize;

    let mut ball: BallState = sc.ball;
    let mut ekf: Option<EkfState> = None;
    let mut history: Vec<FeatureObservation> = Vec::new();
    let mut stage = 0u32;
    let mut frames_since_predict = 0usize;
    let mut next_frame = 0usize;
    let mut was_in_shell = false;
    let mut last_innovation = None;
    let mut trace = ScenarioTrace {
        rows: Vec::with_capacity(n_ticks),
        meta: vec![
            ("dataset_hash".into(), p.ds.hash.clone()),
            ("graph_hash".into(), p.graph.hash.clone()),
            ("seed".into(), cfg.seed.to_string()),
            ("tick".into(), cfg.tick.to_string()),
            ("substeps".into(), cfg.substeps.to_string()),
            ("catch_tolerance".into(), cfg.catch_tolerance.to_string()),
        ],
        routes: Vec::new(),
        predictions: Vec::new(),
    };
    let mut finished = false;

    for k in 0..n_ticks {
        let t = k as f64 * cfg.tick;
        let mut events = Vec::new();
        let mut observation = None;

        // sensing: frames due up to now
        if (next_frame as f64) * frame_period <= t + 1e-9 {
            while (next_frame as f64) * frame_period <= t + 1e-9 {
                next_frame += 1;
            }
            if ekf.is_some() || sc.trigger.contains(&ball.position) {
                match project(&sc.camera, &ball.position, t, &mut rng) {
                    Ok(o) => observation = Some(o),
                    Err(Error::NotVisible { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if let Some(o) = observation {
            match ekf.as_mut() {
                None => {
                    events.push(Event::Trigger);
                    r.metrics.triggered = true;
                    ekf = Some(EkfState::new(&cfg.ekf, &sc.camera, &o, frame_period)?);
                    history.push(o);
                }
                Some(s) => {
                    while s.timestamp + 0.5 * s.dt < o.timestamp {
                        *s = predict_static(s)?;
                    }
                    s.timestamp = o.timestamp;
                    let (next, info) = update(s, &s.measurement(&o))?;
                    *s = next;
                    last_innovation = Some(info.innovation.norm());
                    history.push(o);
                }
            }
            let s = ekf.as_mut().expect("filter started");
            if history.len() >= 2 {
                let rate = estimate_feature_velocity(&history, cfg.ekf.window)?;
                s.v_o = nalgebra::Vector2::new(-rate.fx, -rate.fy);
                s.depth_rate = rate.z;
            }
            if stage >= 1 {
                frames_since_predict += 1;
            }
            let due = (stage == 0 && history.len() >= cfg.ekf.window)
                || (stage == 1 && frames_since_predict >= cfg.repredict_frames);
            if due {
                let pred = predict_intercept(
                    s,
                    &sc.camera,
                    &cfg.shell,
                    cfg.horizon,
                    cfg.intercept_lead,
                    stage + 1,
                    last_innovation.unwrap_or(0.0),
                )?;
                if pred.reachable {
                    if let Some(target) = r.choose_target(&pred) {
                        stage += 1;
                        frames_since_predict = 0;
                        trace.predictions.push((pred.clone(), target));
                        events.push(if stage == 1 { Event::Predict } else { Event::Repredict });
                        if !r.issue_route(target, t)? {
                            events.push(Event::Blocked);
                            r.metrics.blocked_events += 1;
                            r.plan = None;
                            r.halted_target = Some(target);
                        }
                    }
                } else if stage == 1 {
                    // keep the current route; the re-prediction is spent
                    stage = 2;
                }
            }
        }

        r.keep_route_clear(sc, t, &mut events)?;

        // execution: one edge, substep by substep
        let q_from = r.arm.q.clone();
        let edge_target = r.plan.as_ref().and_then(|pl| pl.remaining().first().copied());
        let q_to = edge_target.map(|n| p.node_joints(n).clone());
        let mut q_exec = q_from.clone();
        let mut aborted = false;
        let mut tick_clearance = NO_OBSTACLE_CLEARANCE;
        let mut ee = forward_kinematics(&p.model, &q_exec)?.position;
        for s in 1..=cfg.substeps {
            let tau = t + s as f64 * h;
            ball = step_ball(&ball, h, &sc.gravity);
            let obstacles = sc.obstacles_at(tau);
            let mut moved = false;
            if let (Some(to), false) = (&q_to, aborted) {
                let cand = q_from.lerp(to, s as f64 / cfg.substeps as f64);
                let cl = min_arm_clearance(&p.model, &cand, &obstacles)?;
                if cl.penetrating || cl.distance <= 0.0 {
                    // never execute a penetrating substep; force a replan from here
                    aborted = true;
                    if let Some(n) = edge_target {
                        r.block(n);
                    }
                } else {
                    moved = q_exec != cand;
                    q_exec = cand;
                }
            }
            let cl = min_arm_clearance(&p.model, &q_exec, &obstacles)?;
            tick_clearance = tick_clearance.min(cl.distance);
            r.metrics.min_clearance = r.metrics.min_clearance.min(cl.distance);
            if cl.penetrating || (!obstacles.is_empty() && cl.distance <= 0.0) {
                if moved {
                    r.metrics.penetrations += 1;
                } else {
                    r.metrics.held_contacts += 1;
                }
            }
            ee = forward_kinematics(&p.model, &q_exec)?.position;
            let d = (ee - ball.position).norm();
            r.metrics.catch_error = r.metrics.catch_error.min(d);
            if d <= cfg.catch_tolerance {
                events.push(Event::Catch);
                r.metrics.caught = true;
                r.metrics.catch_error = d;
                r.metrics.time_to_catch = Some(tau);
                finished = true;
                break;
            }
            if ball.position.z - ball.radius <= sc.floor_z {
                events.push(Event::Miss);
                finished = true;
                break;
            }
            if cfg.shell.contains(&ball.position) {
                was_in_shell = true;
            } else if was_in_shell {
                events.push(Event::Miss);
                finished = true;
                break;
            }
        }
        let completed = q_to.is_some() && !aborted && q_exec == *q_to.as_ref().expect("edge");
        r.arm.q = q_exec.clone();
        if completed {
            r.arm.node = edge_target;
            if let Some(pl) = r.plan.as_mut() {
                pl.next += 1;
            }
        } else if q_to.is_some() {
            r.arm.node = None;
        }
        if !finished && k + 1 == n_ticks {
            events.push(Event::Miss);
        }
        trace.rows.push(TraceRow {
            time: t,
            ball: ball.position,
            observation,
            filter: ekf.as_ref().map(|s| [s.x[0], s.x[1], s.x[2]]),
            filter_var: ekf.as_ref().map(|s| [s.p[(0, 0)], s.p[(1, 1)], s.p[(2, 2)]]),
            innovation: last_innovation,
            stage,
            revision: r.plan.as_ref().map(|pl| pl.route.revision),
            joints: q_exec,
            ee,
            clearance: tick_clearance,
            events,
        });
        r.metrics.ticks = k + 1;
        if finished {
            break;
        }
    }
    trace.routes = r.routes;
    Ok((trace, r.metrics))
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub runs: usize,
    pub triggered: usize,
    pub caught: usize,
    pub catch_rate: f64,
    pub catch_rate_interval: (f64, f64),
    pub mean_reroutes: f64,
    pub min_clearance: f64,
    pub penetrations: usize,
    /// Runs whose first route was blocked and never rerouted.
    pub blocked_without_reroute: usize,
}

pub struct BatchResult {
    pub metrics: Vec<RunMetrics>,
    pub traces: Vec<ScenarioTrace>,
    pub summary: BatchSummary,
}

pub fn summarize(metrics: &[RunMetrics]) -> BatchSummary {
    let n = metrics.len();
    let caught = metrics.iter().filter(|m| m.caught).count();
    BatchSummary {
        runs: n,
        triggered: metrics.iter().filter(|m| m.triggered).count(),
        caught,
        catch_rate: if n == 0 { 0.0 } else { caught as f64 / n as f64 },
        catch_rate_interval: wilson_interval(caught, n, 1.96),
        mean_reroutes: if n == 0 { 0.0 } else { metrics.iter().map(|m| m.reroutes as f64).sum::<f64>() / n as f64 },
        min_clearance: metrics.iter().map(|m| m.min_clearance).fold(NO_OBSTACLE_CLEARANCE, f64::min),
        penetrations: metrics.iter().map(|m| m.penetrations).sum(),
        blocked_without_reroute: metrics
            .iter()
            .filter(|m| m.initial_route_blocked && m.reroutes == 0)
            .count(),
    }
}

/// Independent runs in parallel; results keep the input order.
pub fn batch_run(p: &Pipeline, runs: &[(Scenario, RunnerConfig)]) -> Result<BatchResult> {
    let out: Vec<Result<(ScenarioTrace, RunMetrics)>> =
        runs.par_iter().map(|(sc, cfg)| run_scenario(p, sc, cfg)).collect();
    let mut traces = Vec::with_capacity(out.len());
    let mut metrics = Vec::with_capacity(out.len());
    for o in out {
        let (t, m) = o?;
        traces.push(t);
        metrics.push(m);
    }
    let summary = summarize(&metrics);
    Ok(BatchResult { metrics, traces, summary })
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "run", "seed", "triggered", "caught", "catch_error", "time_to_catch", "reroutes", "blocked",
    "min_clearance", "penetrations", "initial_route_blocked", "first_route_hops",
];

pub fn metrics_csv(runs: &[(Scenario, RunnerConfig)], metrics: &[RunMetrics]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        for (i, ((_, cfg), m)) in runs.iter().zip(metrics).enumerate() {
            w.write_record([
                i.to_string(),
                cfg.seed.to_string(),
                m.triggered.to_string(),
                m.caught.to_string(),
                m.catch_error.to_string(),
                opt(m.time_to_catch),
                m.reroutes.to_string(),
                m.blocked_events.to_string(),
                m.min_clearance.to_string(),
                m.penetrations.to_string(),
                m.initial_route_blocked.to_string(),
                m.route_lengths.first().map(|h| h.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Numerical(format!("metrics write failed: {e}")))?;
    }
    Ok(out)
}

pub fn write_batch(dir: &Path, runs: &[(Scenario, RunnerConfig)], res: &BatchResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, t) in res.traces.iter().enumerate() {
        t.save(dir.join(format!("trace_{i:03}.csv")))?;
    }
    crate::artifact::write(&dir.join("metrics.csv"), &metrics_csv(runs, &res.metrics)?)?;
    let summary = dir.join("summary.json");
    let mut f = std::fs::File::create(&summary).map_err(|e| Error::io(&summary, e))?;
    let text = serde_json::to_string_pretty(&res.summary)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&summary, e))?;
    Ok(())
}
