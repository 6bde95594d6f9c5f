//! GJK distance between convex shapes described by support functions.
//!
//! Every shape is a convex *core* (point, segment or vertex hull) swept by a sphere of
//! `radius + margin`. GJK runs on the cores; the sweep radii are subtracted afterwards and
//! the result is floored at zero. Penetration depth is not computed.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::arm::{capsules_from_frames, ArmModel, JointVector};
use crate::error::Result;

pub const GJK_MAX_ITERATIONS: usize = 64;
pub const GJK_TOLERANCE: f64 = 1e-9;

/// Clearance reported when there is nothing to collide with.
pub const NO_OBSTACLE_CLEARANCE: f64 = 1.0e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
    },
    Hull {
        vertices: Vec<Vector3<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexShape {
    pub geometry: Geometry,
    #[serde(default)]
    pub margin: f64,
}

impl ConvexShape {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        ConvexShape {
            geometry: Geometry::Sphere { center, radius },
            margin: 0.0,
        }
    }

    pub fn capsule(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Self {
        ConvexShape {
            geometry: Geometry::Capsule { a, b, radius },
            margin: 0.0,
        }
    }

    pub fn hull(vertices: Vec<Vector3<f64>>) -> Self {
        ConvexShape {
            geometry: Geometry::Hull { vertices },
            margin: 0.0,
        }
    }

    /// Axis-aligned box as an 8-vertex hull.
    pub fn cuboid(center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    vertices.push(
                        center
                            + Vector3::new(
                                sx * half_extents.x,
                                sy * half_extents.y,
                                sz * half_extents.z,
                            ),
                    );
                }
            }
        }
        ConvexShape::hull(vertices)
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.margin >= 0.0) {
            return Err(format!("margin {} must be >= 0", self.margin));
        }
        match &self.geometry {
            Geometry::Sphere { radius, .. } | Geometry::Capsule { radius, .. } => {
                if !(*radius >= 0.0) {
                    return Err(format!("radius {radius} must be >= 0"));
                }
            }
            Geometry::Hull { vertices } => {
                if vertices.is_empty() {
                    return Err("hull needs at least one vertex".into());
                }
            }
        }
        Ok(())
    }

    pub fn segment(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        match &self.geometry {
            Geometry::Capsule { a, b, .. } => Some((*a, *b)),
            _ => None,
        }
    }

    /// Sphere-sweep radius of the core, margin included.
    pub fn inflation(&self) -> f64 {
        let r = match &self.geometry {
            Geometry::Sphere { radius, .. } | Geometry::Capsule { radius, .. } => *radius,
            Geometry::Hull { .. } => 0.0,
        };
        r + self.margin
    }

    /// Support point of the core in direction `dir`. Ties go to the first vertex.
    pub fn core_support(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        match &self.geometry {
            Geometry::Sphere { center, .. } => *center,
            Geometry::Capsule { a, b, .. } => {
                if b.dot(dir) > a.dot(dir) {
                    *b
                } else {
                    *a
                }
            }
            Geometry::Hull { vertices } => {
                let mut best = vertices[0];
                let mut best_dot = best.dot(dir);
                for v in &vertices[1..] {
                    let d = v.dot(dir);
                    if d > best_dot {
                        best = *v;
                        best_dot = d;
                    }
                }
                best
            }
        }
    }

    pub fn core_center(&self) -> Vector3<f64> {
        match &self.geometry {
            Geometry::Sphere { center, .. } => *center,
            Geometry::Capsule { a, b, .. } => 0.5 * (a + b),
            Geometry::Hull { vertices } => {
                vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64
            }
        }
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let geometry = match &self.geometry {
            Geometry::Sphere { center, radius } => Geometry::Sphere {
                center: center + offset,
                radius: *radius,
            },
            Geometry::Capsule { a, b, radius } => Geometry::Capsule {
                a: a + offset,
                b: b + offset,
                radius: *radius,
            },
            Geometry::Hull { vertices } => Geometry::Hull {
                vertices: vertices.iter().map(|v| v + offset).collect(),
            },
        };
        ConvexShape {
            geometry,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    /// Separation of the inflated shapes, floored at 0.
    pub distance: f64,
    pub penetrating: bool,
    pub witness_a: Vector3<f64>,
    pub witness_b: Vector3<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy)]
struct Vertex {
    w: Vector3<f64>,
    pa: Vector3<f64>,
    pb: Vector3<f64>,
}

fn support(a: &ConvexShape, b: &ConvexShape, dir: &Vector3<f64>) -> Vertex {
    let pa = a.core_support(dir);
    let pb = b.core_support(&-dir);
    Vertex { w: pa - pb, pa, pb }
}

/// Closest point of the simplex hull to the origin. Enumerates faces (at most 15) and keeps
/// the nearest affine projection that falls strictly inside its face; returns the reduced
/// simplex and its barycentric weights.
fn closest_on_simplex(simplex: &[Vertex]) -> (Vec<Vertex>, Vec<f64>, Vector3<f64>) {
    let k = simplex.len();
    let mut best: Option<(u32, Vec<f64>, Vector3<f64>)> = None;
    let mut masks: Vec<u32> = (1..(1u32 << k)).collect();
    masks.sort_by_key(|m| m.count_ones());
    for mask in masks {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let Some(lambda) = affine_projection(simplex, &idx) else {
            continue;
        };
        if lambda.iter().any(|l| *l <= 0.0) {
            continue;
        }
        let p: Vector3<f64> = idx
            .iter()
            .zip(&lambda)
            .map(|(i, l)| simplex[*i].w * *l)
            .sum();
        let better = match &best {
            None => true,
            Some((_, _, q)) => p.norm_squared() < q.norm_squared(),
        };
        if better {
            best = Some((mask, lambda, p));
        }
    }
    let (mask, lambda, p) = best.expect("single vertices are always valid faces");
    let reduced = (0..k)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| simplex[i])
        .collect();
    (reduced, lambda, p)
}

/// Barycentric weights of the origin's projection onto the affine hull of `simplex[idx]`,
/// or `None` when those points are affinely dependent.
fn affine_projection(simplex: &[Vertex], idx: &[usize]) -> Option<Vec<f64>> {
    let y0 = simplex[idx[0]].w;
    let m = idx.len() - 1;
    if m == 0 {
        return Some(vec![1.0]);
    }
    let e: Vec<Vector3<f64>> = idx[1..].iter().map(|i| simplex[*i].w - y0).collect();
    let mut g = nalgebra::DMatrix::zeros(m, m);
    let mut rhs = nalgebra::DVector::zeros(m);
    let mut scale: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            g[(i, j)] = e[i].dot(&e[j]);
        }
        rhs[i] = -e[i].dot(&y0);
        scale = scale.max(g[(i, i)]);
    }
    let det = g.determinant();
    if !(det.abs() > 1e-24 * scale.powi(m as i32)) || scale == 0.0 {
        return None;
    }
    let mu = g.lu().solve(&rhs)?;
    let mut lambda = Vec::with_capacity(m + 1);
    lambda.push(1.0 - mu.sum());
    lambda.extend(mu.iter().copied());
    Some(lambda)
}

struct CoreDistance {
    v: Vector3<f64>,
    pa: Vector3<f64>,
    pb: Vector3<f64>,
    iterations: usize,
    converged: bool,
    overlap: bool,
}

fn gjk_core(a: &ConvexShape, b: &ConvexShape) -> CoreDistance {
    let mut dir = a.core_center() - b.core_center();
    if dir.norm_squared() < 1e-24 {
        dir = Vector3::x();
    }
    let first = support(a, b, &-dir);
    let mut simplex = vec![first];
    let mut lambda = vec![1.0];
    let mut v = first.w;
    let mut iterations = 0;
    let mut converged = false;
    let mut overlap = false;
    while iterations < GJK_MAX_ITERATIONS {
        iterations += 1;
        let vv = v.norm_squared();
        if vv <= GJK_TOLERANCE * GJK_TOLERANCE {
            overlap = true;
            converged = true;
            break;
        }
        let w = support(a, b, &-v);
        // ||v|| - v.w/||v|| bounds the remaining distance error
        let gap = (vv - v.dot(&w.w)) / vv.sqrt();
        if gap <= GJK_TOLERANCE || gap <= 1e-12 * vv.sqrt() {
            converged = true;
            break;
        }
        if simplex.iter().any(|s| (s.w - w.w).norm_squared() < 1e-30) {
            converged = true;
            break;
        }
        simplex.push(w);
        let (reduced, l, p) = closest_on_simplex(&simplex);
        if reduced.len() == 4 {
            simplex = reduced;
            lambda = l;
            v = p;
            overlap = true;
            converged = true;
            break;
        }
        if p.norm_squared() >= vv {
            // no progress: numerical floor reached
            converged = true;
            break;
        }
        simplex = reduced;
        lambda = l;
        v = p;
    }
    let pa = simplex.iter().zip(&lambda).map(|(s, l)| s.pa * *l).sum();
    let pb = simplex.iter().zip(&lambda).map(|(s, l)| s.pb * *l).sum();
    CoreDistance {
        v,
        pa,
        pb,
        iterations,
        converged,
        overlap,
    }
}

pub fn gjk_distance(a: &ConvexShape, b: &ConvexShape) -> DistanceResult {
    let core = gjk_core(a, b);
    if !core.converged {
        log::warn!(
            "GJK hit the {GJK_MAX_ITERATIONS}-iteration cap; reporting upper bound {}",
            core.v.norm()
        );
    }
    let (ra, rb) = (a.inflation(), b.inflation());
    let core_dist = if core.overlap { 0.0 } else { core.v.norm() };
    let dist = core_dist - ra - rb;
    let (witness_a, witness_b) = if core_dist > 0.0 {
        let n = core.v / core_dist;
        (core.pa - n * ra, core.pb + n * rb)
    } else {
        (core.pa, core.pb)
    };
    let penetrating = dist <= 0.0;
    DistanceResult {
        distance: if penetrating { 0.0 } else { dist },
        penetrating,
        witness_a,
        witness_b,
        iterations: core.iterations,
        converged: core.converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub distance: f64,
    pub penetrating: bool,
    /// Index into the model's link shapes, `None` without obstacles.
    pub link: Option<usize>,
    pub obstacle: Option<usize>,
}

impl Clearance {
    pub const FREE: Clearance = Clearance {
        distance: NO_OBSTACLE_CLEARANCE,
        penetrating: false,
        link: None,
        obstacle: None,
    };
}

pub fn min_clearance(links: &[ConvexShape], obstacles: &[ConvexShape]) -> Clearance {
    let mut best = Clearance::FREE;
    for (li, link) in links.iter().enumerate() {
        for (oi, obs) in obstacles.iter().enumerate() {
            let r = gjk_distance(link, obs);
            if r.distance < best.distance || (r.penetrating && !best.penetrating) {
                best = Clearance {
                    distance: r.distance,
                    penetrating: r.penetrating,
                    link: Some(li),
                    obstacle: Some(oi),
                };
            }
        }
    }
    best
}

pub fn min_arm_clearance(
    model: &ArmModel,
    q: &JointVector,
    obstacles: &[ConvexShape],
) -> Result<Clearance> {
    let frames = model.frames(q)?;
    Ok(min_clearance(&capsules_from_frames(model, &frames), obstacles))
}
