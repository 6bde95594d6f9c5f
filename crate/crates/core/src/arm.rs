//! Serial-arm kinematics on modified (Craig) Denavit-Hartenberg parameters.
//!
//! Frame `i` is reached from frame `i - 1` by `RotX(alpha) * TransX(a) * RotZ(theta) * TransZ(d)`,
//! where `theta = q[i - 1] + offset` for joint rows and `theta = offset` for the trailing fixed
//! rows (the flange). Frame 0 is the base. The end-effector pose is the last frame.

use std::path::Path;

use nalgebra::{
    Isometry3, Matrix6xX, Translation3, UnitQuaternion, Vector3, Vector6,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::ConvexShape;
use crate::error::{Error, Result};
use crate::hash::ContentHasher;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub offset: f64,
}

impl DhRow {
    pub const fn new(a: f64, d: f64, alpha: f64) -> Self {
        DhRow {
            a,
            d,
            alpha,
            offset: 0.0,
        }
    }

    /// Transform from the previous frame to this row's frame at joint angle `theta`
    /// (the row offset is added here).
    pub fn transform(&self, theta: f64) -> Isometry3<f64> {
        let rot_x = Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha),
        );
        let trans_x = Isometry3::translation(self.a, 0.0, 0.0);
        let rot_z = Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta + self.offset),
        );
        let trans_z = Isometry3::translation(0.0, 0.0, self.d);
        rot_x * trans_x * rot_z * trans_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for JointLimit {
    fn from([lo, hi]: [f64; 2]) -> Self {
        JointLimit { lo, hi }
    }
}

impl From<JointLimit> for [f64; 2] {
    fn from(l: JointLimit) -> Self {
        [l.lo, l.hi]
    }
}

impl JointLimit {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Sphere-swept segment rigidly attached to frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCapsule {
    pub frame: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub name: String,
    /// Joint rows first (one per joint limit), then fixed rows.
    pub dh_rows: Vec<DhRow>,
    pub joint_limits: Vec<JointLimit>,
    pub link_shapes: Vec<LinkCapsule>,
}

/// Joint angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn zeros(dof: usize) -> Self {
        JointVector(vec![0.0; dof])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Componentwise `self + s * (other - self)`.
    pub fn lerp(&self, other: &JointVector, s: f64) -> JointVector {
        JointVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + s * (b - a))
                .collect(),
        )
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(v: Vec<f64>) -> Self {
        JointVector(v)
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// End-effector pose in the base frame; the quaternion is kept with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl EePose {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.into_inner();
        // Re-normalize after chaining and pick the w >= 0 hemisphere.
        let q = if q.w < 0.0 { -q } else { q };
        EePose {
            position: iso.translation.vector,
            orientation: UnitQuaternion::new_normalize(q),
        }
    }

    /// `[x, y, z, x_q, y_q, z_q, w_q]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.as_ref();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
        EePose {
            position: Vector3::new(v[0], v[1], v[2]),
            orientation: UnitQuaternion::new_unchecked(q),
        }
    }
}

impl ArmModel {
    /// Franka Emika Panda, modified DH from the manufacturer's documentation, with the
    /// flange as the end-effector frame.
    pub fn panda() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let dh_rows = vec![
            DhRow::new(0.0, 0.333, 0.0),
            DhRow::new(0.0, 0.0, -FRAC_PI_2),
            DhRow::new(0.0, 0.316, FRAC_PI_2),
            DhRow::new(0.0825, 0.0, FRAC_PI_2),
            DhRow::new(-0.0825, 0.384, -FRAC_PI_2),
            DhRow::new(0.0, 0.0, FRAC_PI_2),
            DhRow::new(0.088, 0.0, FRAC_PI_2),
            DhRow::new(0.0, 0.107, 0.0),
        ];
        let joint_limits = [
            [-2.8973, 2.8973],
            [-1.7628, 1.7628],
            [-2.8973, 2.8973],
            [-3.0718, -0.0698],
            [-2.8973, 2.8973],
            [-0.0175, 3.7525],
            [-2.8973, 2.8973],
        ]
        .into_iter()
        .map(JointLimit::from)
        .collect();
        // In modified DH the origin of frame i, seen from frame i-1, does not depend on
        // theta_i, so each link body is a segment from a frame origin to the next.
        let cap = |frame, a, b, radius| LinkCapsule {
            frame,
            a,
            b,
            radius,
        };
        let link_shapes = vec![
            cap(0, [0.0, 0.0, 0.0], [0.0, 0.0, 0.14], 0.09),
            cap(1, [0.0, 0.0, -0.19], [0.0, 0.0, 0.0], 0.07),
            cap(2, [0.0, 0.0, 0.0], [0.0, -0.316, 0.0], 0.065),
            cap(3, [0.0, 0.0, 0.0], [0.0825, 0.0, 0.0], 0.065),
            cap(4, [0.0, 0.0, 0.0], [-0.0825, 0.384, 0.0], 0.06),
            cap(6, [0.0, 0.0, 0.0], [0.088, 0.0, 0.0], 0.055),
            cap(7, [0.0, 0.0, 0.0], [0.0, 0.0, 0.107], 0.05),
            cap(8, [0.0, 0.0, 0.0], [0.0, 0.0, 0.1], 0.045),
        ];
        ArmModel {
            name: "panda".into(),
            dh_rows,
            joint_limits,
            link_shapes,
        }
    }

    /// Two revolute joints about base z with links along x; the tool frame sits at the
    /// tip of the second link.
    pub fn planar_2link(l1: f64, l2: f64) -> Self {
        use std::f64::consts::PI;
        ArmModel {
            name: "planar-2link".into(),
            dh_rows: vec![
                DhRow::new(0.0, 0.0, 0.0),
                DhRow::new(l1, 0.0, 0.0),
                DhRow::new(l2, 0.0, 0.0),
            ],
            joint_limits: vec![JointLimit { lo: -PI, hi: PI }; 2],
            link_shapes: vec![
                LinkCapsule {
                    frame: 0,
                    a: [0.0, 0.0, -0.05],
                    b: [0.0, 0.0, 0.0],
                    radius: 0.02,
                },
                LinkCapsule {
                    frame: 1,
                    a: [0.0, 0.0, 0.0],
                    b: [l1, 0.0, 0.0],
                    radius: 0.02,
                },
                LinkCapsule {
                    frame: 2,
                    a: [0.0, 0.0, 0.0],
                    b: [l2, 0.0, 0.0],
                    radius: 0.02,
                },
            ],
        }
    }

    pub fn dof(&self) -> usize {
        self.joint_limits.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dof = self.dof();
        if dof == 0 {
            return Err(Error::ArmModel("no joints".into()));
        }
        if self.dh_rows.len() < dof {
            return Err(Error::ArmModel(format!(
                "{} DH rows for {dof} joints",
                self.dh_rows.len()
            )));
        }
        for (i, l) in self.joint_limits.iter().enumerate() {
            if !(l.lo < l.hi) {
                return Err(Error::ArmModel(format!(
                    "joint {i} limit lo {} >= hi {}",
                    l.lo, l.hi
                )));
            }
        }
        for (i, c) in self.link_shapes.iter().enumerate() {
            if !(c.radius > 0.0) {
                return Err(Error::ArmModel(format!(
                    "capsule {i} radius {} must be positive",
                    c.radius
                )));
            }
            if c.frame > self.dh_rows.len() {
                return Err(Error::ArmModel(format!(
                    "capsule {i} attached to frame {} of {}",
                    c.frame,
                    self.dh_rows.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: ArmModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arm model serializes")
    }

    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new("arm-model");
        h.str(&serde_json::to_string(self).expect("arm model serializes"));
        h.finish()
    }

    pub fn check_limits(&self, q: &JointVector) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Domain(format!(
                "joint vector has {} entries, arm has {} joints",
                q.len(),
                self.dof()
            )));
        }
        for (joint, (v, l)) in q.0.iter().zip(&self.joint_limits).enumerate() {
            if !l.contains(*v) {
                return Err(Error::JointLimit {
                    joint,
                    value: *v,
                    lo: l.lo,
                    hi: l.hi,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &JointVector) -> (JointVector, usize) {
        let mut clamped = 0;
        let v = q
            .0
            .iter()
            .zip(&self.joint_limits)
            .map(|(v, l)| {
                let c = l.clamp(*v);
                if c != *v {
                    clamped += 1;
                }
                c
            })
            .collect();
        (JointVector(v), clamped)
    }

    /// Cumulative transforms: `frames[0]` is the base, `frames[i]` follows DH row `i - 1`.
    /// Limits are not checked.
    pub fn frames_unchecked(&self, q: &JointVector) -> Vec<Isometry3<f64>> {
        let mut frames = Vec::with_capacity(self.dh_rows.len() + 1);
        let mut acc = Isometry3::identity();
        frames.push(acc);
        for (i, row) in self.dh_rows.iter().enumerate() {
            let theta = q.0.get(i).copied().unwrap_or(0.0);
            acc *= row.transform(theta);
            frames.push(acc);
        }
        frames
    }

    pub fn frames(&self, q: &JointVector) -> Result<Vec<Isometry3<f64>>> {
        self.check_limits(q)?;
        Ok(self.frames_unchecked(q))
    }
}

pub fn forward_kinematics(model: &ArmModel, q: &JointVector) -> Result<EePose> {
    let frames = model.frames(q)?;
    Ok(EePose::from_isometry(frames.last().expect("base frame")))
}

/// 6 x dof geometric Jacobian `[linear; angular]` of the end-effector origin, base frame.
pub fn geometric_jacobian(model: &ArmModel, q: &JointVector) -> Result<Matrix6xX<f64>> {
    let frames = model.frames(q)?;
    let p_ee = frames.last().expect("base frame").translation.vector;
    let dof = model.dof();
    let mut jac = Matrix6xX::zeros(dof);
    for i in 0..dof {
        // Joint i rotates about z of frame i + 1 (RotZ comes after the row's RotX/TransX).
        let frame = &frames[i + 1];
        let z = frame.rotation * Vector3::z();
        let p = frame.translation.vector;
        let lin = z.cross(&(p_ee - p));
        jac.set_column(i, &Vector6::new(lin.x, lin.y, lin.z, z.x, z.y, z.z));
    }
    Ok(jac)
}

pub fn sample_random_config(model: &ArmModel, seed: u64) -> JointVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_config_with(model, &mut rng)
}

pub fn sample_config_with<R: Rng + ?Sized>(model: &ArmModel, rng: &mut R) -> JointVector {
    JointVector(
        model
            .joint_limits
            .iter()
            .map(|l| rng.random_range(l.lo..l.hi))
            .collect(),
    )
}

/// World-frame capsules of every link shape, in model order.
pub fn link_capsules_world(model: &ArmModel, q: &JointVector) -> Result<Vec<ConvexShape>> {
    let frames = model.frames(q)?;
    Ok(capsules_from_frames(model, &frames))
}

pub(crate) fn capsules_from_frames(
    model: &ArmModel,
    frames: &[Isometry3<f64>],
) -> Vec<ConvexShape> {
    model
        .link_shapes
        .iter()
        .map(|c| {
            let f = &frames[c.frame];
            let a = f * nalgebra::Point3::from(c.a);
            let b = f * nalgebra::Point3::from(c.b);
            ConvexShape::capsule(a.coords, b.coords, c.radius)
        })
        .collect()
}
