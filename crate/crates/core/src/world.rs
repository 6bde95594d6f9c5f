//! Ground truth for scenarios: a drag-free ballistic ball, scripted convex obstacles, and a
//! fixed pinhole camera producing principal-point-centered features with depth.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collision::{ConvexShape, Geometry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub radius: f64,
}

/// Symplectic Euler: velocity first, then position with the new velocity.
pub fn step_ball(b: &BallState, dt: f64, gravity: &Vector3<f64>) -> BallState {
    debug_assert!(dt > 0.0);
    let velocity = b.velocity + gravity * dt;
    BallState {
        position: b.position + velocity * dt,
        velocity,
        radius: b.radius,
    }
}

mod matrix_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

/// Pinhole camera. `rotation`/`translation` map world to camera: `p_c = R p_w + t`, with the
/// camera z axis along the optical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub lambda: f64,
    #[serde(default)]
    pub principal_point: [f64; 2],
    #[serde(with = "matrix_rows")]
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    #[serde(default)]
    pub pixel_noise_sigma: f64,
    #[serde(default)]
    pub depth_noise_sigma: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    30.0
}

/// Principal-point-centered pixel features and depth of a target at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub fx: f64,
    pub fy: f64,
    pub z: f64,
    pub timestamp: f64,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, image y pointing towards world -z where possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, lambda: f64) -> Self {
        let z_c = (target - eye).normalize();
        let mut down = -Vector3::z();
        if z_c.cross(&down).norm() < 1e-9 {
            down = Vector3::y();
        }
        let x_c = down.cross(&z_c).normalize();
        let y_c = z_c.cross(&x_c);
        let rotation = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), z_c.transpose()]);
        CameraModel {
            lambda,
            principal_point: [320.0, 240.0],
            translation: -(rotation * eye),
            rotation,
            pixel_noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            frame_rate: default_frame_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("camera lambda {} must be > 0", self.lambda)));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config(format!(
                "camera frame rate {} must be > 0",
                self.frame_rate
            )));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.depth_noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        check_rotation(&self.rotation).map_err(Error::Config)
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Camera origin in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

pub fn check_rotation(r: &Matrix3<f64>) -> std::result::Result<(), String> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-9 {
        return Err(format!("rotation is not orthonormal (|R^T R - I| = {err:e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > 1e-9 {
        return Err(format!("rotation determinant {det} != +1"));
    }
    Ok(())
}

/// Noise-free projection.
pub fn project_exact(
    cam: &CameraModel,
    p_world: &Vector3<f64>,
    timestamp: f64,
) -> Result<FeatureObservation> {
    let p = cam.to_camera(p_world);
    if !(p.z > 0.0) {
        return Err(Error::NotVisible { z: p.z });
    }
    Ok(FeatureObservation {
        fx: cam.lambda * p.x / p.z,
        fy: cam.lambda * p.y / p.z,
        z: p.z,
        timestamp,
    })
}

/// Projection with the camera's Gaussian pixel and depth noise drawn from `rng`.
pub fn project<R: Rng + ?Sized>(
    cam: &CameraModel,
    p_world: &Vector3<f64>,
    timestamp: f64,
    rng: &mut R,
) -> Result<FeatureObservation> {
    let mut f = project_exact(cam, p_world, timestamp)?;
    if cam.pixel_noise_sigma > 0.0 {
        let n = Normal::new(0.0, cam.pixel_noise_sigma).expect("sigma > 0");
        f.fx += n.sample(rng);
        f.fy += n.sample(rng);
    }
    if cam.depth_noise_sigma > 0.0 {
        let n = Normal::new(0.0, cam.depth_noise_sigma).expect("sigma > 0");
        f.z += n.sample(rng);
    }
    Ok(f)
}

pub fn back_project_camera(cam: &CameraModel, fx: f64, fy: f64, z: f64) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth {z} must be > 0")));
    }
    Ok(Vector3::new(fx * z / cam.lambda, fy * z / cam.lambda, z))
}

pub fn back_project(cam: &CameraModel, f: &FeatureObservation) -> Result<Vector3<f64>> {
    let p_cam = back_project_camera(cam, f.fx, f.fy, f.z)?;
    Ok(cam.to_world(&p_cam))
}

/// Obstacle geometry in its own frame; placed by translating to the scripted position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleShape {
    Sphere {
        radius: f64,
    },
    Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
    },
    Hull {
        points: Vec<Vector3<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleScript {
    pub shape: ObstacleShape,
    #[serde(default)]
    pub margin: f64,
    pub waypoints: Vec<Waypoint>,
}

impl ObstacleScript {
    pub fn stationary(shape: ObstacleShape, margin: f64, position: Vector3<f64>) -> Self {
        ObstacleScript {
            shape,
            margin,
            waypoints: vec![Waypoint { t: 0.0, position }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::Config("obstacle script has no waypoints".into()));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Config(
                "obstacle waypoint times must be strictly increasing".into(),
            ));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("obstacle margin {} < 0", self.margin)));
        }
        self.shape_at_position(Vector3::zeros())
            .validate()
            .map_err(Error::Config)
    }

    /// Clamped piecewise-linear interpolation of the waypoints.
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        let wps = &self.waypoints;
        if t <= wps[0].t {
            return wps[0].position;
        }
        for w in wps.windows(2) {
            if t <= w[1].t {
                let s = (t - w[0].t) / (w[1].t - w[0].t);
                return w[0].position + (w[1].position - w[0].position) * s;
            }
        }
        wps[wps.len() - 1].position
    }

    fn shape_at_position(&self, p: Vector3<f64>) -> ConvexShape {
        let geometry = match &self.shape {
            ObstacleShape::Sphere { radius } => Geometry::Sphere {
                center: p,
                radius: *radius,
            },
            ObstacleShape::Capsule { a, b, radius } => Geometry::Capsule {
                a: a + p,
                b: b + p,
                radius: *radius,
            },
            ObstacleShape::Hull { points } => Geometry::Hull {
                vertices: points.iter().map(|v| v + p).collect(),
            },
        };
        ConvexShape {
            geometry,
            margin: self.margin,
        }
    }
}

/// World-frame shape (with its margin) of a scripted obstacle at time `t`.
pub fn obstacle_at(script: &ObstacleScript, t: f64) -> ConvexShape {
    script.shape_at_position(script.position_at(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl TriggerSphere {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).norm() < self.radius
    }
}

/// Everything the simulator needs for one throw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub ball: BallState,
    #[serde(default = "default_gravity")]
    pub gravity: Vector3<f64>,
    pub camera: CameraModel,
    #[serde(default)]
    pub obstacles: Vec<ObstacleScript>,
    pub trigger: TriggerSphere,
    /// Simulated duration, seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Height of the floor plane; reaching it ends the throw.
    #[serde(default)]
    pub floor_z: f64,
}

fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

fn default_duration() -> f64 {
    3.0
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.ball.radius > 0.0) {
            return Err(Error::Config(format!("ball radius {} must be > 0", self.ball.radius)));
        }
        if !(self.trigger.radius > 0.0) {
            return Err(Error::Config("trigger radius must be > 0".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be > 0".into()));
        }
        self.camera.validate()?;
        for o in &self.obstacles {
            o.validate()?;
        }
        Ok(())
    }

    pub fn obstacles_at(&self, t: f64) -> Vec<ConvexShape> {
        self.obstacles.iter().map(|o| obstacle_at(o, t)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Scenario = serde_json::from_str(&s)?;
        sc.validate()?;
        Ok(sc)
    }
}

/// Rotation about `axis` by `angle`, as a matrix.
pub fn rotation_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}
