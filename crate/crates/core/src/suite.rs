//! Seeded throw scenarios. Each throw is dry-run without obstacles; one sphere is then
//! scripted to sweep through an arm link at the moment the initial route passes it.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{link_capsules_world, JointVector};
use crate::collision::min_arm_clearance;
use crate::error::{Error, Result};
use crate::runner::{run_scenario, Pipeline, RunnerConfig};
use crate::world::{
    obstacle_at, BallState, CameraModel, ObstacleScript, ObstacleShape, Scenario, TriggerSphere, Waypoint,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub count: usize,
    pub seed: u64,
    /// Ball passes a uniform point of this box.
    pub aim_lo: Vector3<f64>,
    pub aim_hi: Vector3<f64>,
    /// Horizontal launch distance from the aim point.
    pub launch_distance: (f64, f64),
    pub launch_height: (f64, f64),
    pub flight_time: (f64, f64),
    pub ball_radius: f64,
    /// Camera distance from the throw plane.
    pub camera_distance: f64,
    pub lambda: f64,
    pub frame_rate: f64,
    pub pixel_noise_sigma: f64,
    pub depth_noise_sigma: f64,
    /// Trigger sphere around the shell center, radius added to the shell's outer radius.
    pub trigger_margin: f64,
    pub obstacle_radius: f64,
    pub obstacle_margin: f64,
    pub obstacle_speed: f64,
    /// Half length of the obstacle's straight sweep.
    pub obstacle_sweep: f64,
    /// Throws rejected when the dry run issues no route of at least this many hops.
    pub min_route_hops: usize,
    pub max_attempts: usize,
    pub runner: RunnerConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            count: 50,
            seed: 7,
            aim_lo: Vector3::new(0.3, -0.3, 0.35),
            aim_hi: Vector3::new(0.6, 0.3, 0.75),
            launch_distance: (2.4, 2.8),
            launch_height: (1.0, 1.4),
            flight_time: (1.0, 1.2),
            ball_radius: 0.035,
            camera_distance: 2.5,
            lambda: 600.0,
            frame_rate: 60.0,
            pixel_noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            trigger_margin: 1.0,
            obstacle_radius: 0.05,
            obstacle_margin: 0.02,
            obstacle_speed: 0.6,
            obstacle_sweep: 0.4,
            min_route_hops: 2,
            max_attempts: 20,
            runner: RunnerConfig {
                // the arm's 1 kHz control rate; one edge per tick
                tick: 1.0 / 1000.0,
                intercept_lead: 0.03,
                ..RunnerConfig::default()
            },
        }
    }
}

/// Ballistic throw passing `aim` after `t` seconds.
pub fn throw_through(from: Vector3<f64>, aim: Vector3<f64>, t: f64, gravity: &Vector3<f64>) -> Vector3<f64> {
    (aim - from - 0.5 * gravity * t * t) / t
}

fn range(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Obstacle-free throw for one seed.
pub fn sample_throw(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let gravity = Vector3::new(0.0, 0.0, -9.81);
    let aim = Vector3::from_fn(|i, _| range(rng, (cfg.aim_lo[i], cfg.aim_hi[i])));
    let heading = rng.random_range(-0.35..0.35f64);
    let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let mut from = aim + dir * range(rng, cfg.launch_distance);
    from.z = range(rng, cfg.launch_height);
    let velocity = throw_through(from, aim, range(rng, cfg.flight_time), &gravity);
    // camera looks across the throw plane at the middle of the flight
    let side = dir.cross(&Vector3::z());
    let mid = 0.5 * (from + aim);
    let mut camera = CameraModel::look_at(mid - side * cfg.camera_distance, mid, cfg.lambda);
    camera.frame_rate = cfg.frame_rate;
    camera.pixel_noise_sigma = cfg.pixel_noise_sigma;
    camera.depth_noise_sigma = cfg.depth_noise_sigma;
    Scenario {
        ball: BallState { position: from, velocity, radius: cfg.ball_radius },
        gravity,
        camera,
        obstacles: Vec::new(),
        trigger: TriggerSphere {
            center: cfg.runner.shell.center,
            radius: cfg.runner.shell.r_max + cfg.trigger_margin,
        },
        duration: 2.5,
        floor_z: 0.0,
    }
}

/// Obstacle sweeping through the midpoint of a middle link while the dry-run arm rests at
/// the middle node of its first route.
fn crossing_obstacle(
    p: &Pipeline,
    cfg: &SuiteConfig,
    sc: &Scenario,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ObstacleScript>> {
    let (trace, _) = run_scenario(p, sc, &cfg.runner)?;
    let Some(route) = trace.routes.first() else { return Ok(None) };
    if route.hops() < cfg.min_route_hops {
        return Ok(None);
    }
    let node = route.nodes[route.nodes.len() / 2];
    let q = p.node_joints(node);
    let Some(row) = trace.rows.iter().find(|r| &r.joints == q) else { return Ok(None) };
    let links = link_capsules_world(&p.model, q)?;
    let link = &links[links.len() / 2];
    let Some((a, b)) = link.segment() else { return Ok(None) };
    let center = 0.5 * (a + b);
    let dt = cfg.obstacle_sweep / cfg.obstacle_speed;
    let t_cross = row.time;
    let start = JointVector(cfg.runner.start_joints.clone());
    // the arm has no plan before the throw is predicted, so the sweep must miss the parked pose
    for _ in 0..DIRECTION_TRIES {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = Vector3::new(ang.cos(), ang.sin(), rng.random_range(-0.3..0.3)).normalize();
        let script = ObstacleScript {
            shape: ObstacleShape::Sphere { radius: cfg.obstacle_radius },
            margin: cfg.obstacle_margin,
            waypoints: vec![
                Waypoint { t: t_cross - dt, position: center - dir * cfg.obstacle_sweep },
                Waypoint { t: t_cross + dt, position: center + dir * cfg.obstacle_sweep },
            ],
        };
        if sweep_clear_of(p, &script, &start, START_CLEARANCE)? {
            return Ok(Some(script));
        }
    }
    Ok(None)
}

const DIRECTION_TRIES: usize = 16;
const START_CLEARANCE: f64 = 0.05;

fn sweep_clear_of(p: &Pipeline, script: &ObstacleScript, q: &JointVector, clearance: f64) -> Result<bool> {
    let t0 = script.waypoints.first().map_or(0.0, |w| w.t);
    let t1 = script.waypoints.last().map_or(0.0, |w| w.t);
    let n = 64;
    for i in 0..=n {
        let t = t0 + (t1 - t0) * i as f64 / n as f64;
        let cl = min_arm_clearance(&p.model, q, &[obstacle_at(script, t)])?;
        if cl.penetrating || cl.distance <= clearance {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `count` scenarios, each with a throw whose dry run routes and one obstacle crossing that route.
pub fn generate_suite(p: &Pipeline, cfg: &SuiteConfig) -> Result<Vec<(Scenario, RunnerConfig)>> {
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut runner = cfg.runner.clone();
        runner.seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mut found = None;
        for _ in 0..cfg.max_attempts {
            let mut sc = sample_throw(cfg, &mut rng);
            if let Some(obs) = crossing_obstacle(p, &SuiteConfig { runner: runner.clone(), ..cfg.clone() }, &sc, &mut rng)? {
                sc.obstacles.push(obs);
                found = Some(sc);
                break;
            }
        }
        let sc = found.ok_or_else(|| {
            Error::Config(format!("scenario {i}: no routable throw in {} attempts", cfg.max_attempts))
        })?;
        out.push((sc, runner));
    }
    Ok(out)
}

/// Obstacle-free throws only, for checking the tracking and routing path alone.
pub fn generate_free_suite(cfg: &SuiteConfig) -> Vec<(Scenario, RunnerConfig)> {
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut runner = cfg.runner.clone();
            runner.seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            (sample_throw(cfg, &mut rng), runner)
        })
        .collect()
}
