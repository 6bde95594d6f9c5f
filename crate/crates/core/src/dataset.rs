//! Randomized 18-value samples (joints, end-effector pose, obstacle point, collision flag),
//! their feature scaling, CSV persistence and the end-effector index.

use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, check_columns, join_f64, read_header, Header, MetaBlock};
use crate::arm::{forward_kinematics, link_capsules_world, sample_config_with, ArmModel, EePose, JointVector};
use crate::collision::{min_clearance, ConvexShape};
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
pub use crate::kdtree::EeKdTree;

pub const DOF: usize = 7;
pub const SAMPLE_WIDTH: usize = 18;
/// Kernel features: everything but the collision flag.
pub const FEATURE_WIDTH: usize = 17;
pub const DEFAULT_LABEL_MARGIN: f64 = 0.05;

pub const COLUMNS: [&str; SAMPLE_WIDTH] = [
    "theta0", "theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "ee_x", "ee_y", "ee_z",
    "ee_qx", "ee_qy", "ee_qz", "ee_qw", "obs_x", "obs_y", "obs_z", "collision",
];

const FORMAT_TAG: &str = "latentcatch dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub theta: JointVector,
    pub ee: EePose,
    pub obstacle: Vector3<f64>,
    pub collision: bool,
}

impl Sample {
    pub fn to_row(&self) -> [f64; SAMPLE_WIDTH] {
        let mut r = [0.0; SAMPLE_WIDTH];
        r[..DOF].copy_from_slice(self.theta.as_slice());
        r[7..14].copy_from_slice(&self.ee.to_array());
        r[14] = self.obstacle.x;
        r[15] = self.obstacle.y;
        r[16] = self.obstacle.z;
        r[17] = if self.collision { 1.0 } else { 0.0 };
        r
    }

    pub fn from_row(r: &[f64; SAMPLE_WIDTH]) -> Self {
        let mut ee = [0.0; 7];
        ee.copy_from_slice(&r[7..14]);
        Sample {
            theta: JointVector(r[..DOF].to_vec()),
            ee: EePose::from_array(ee),
            obstacle: Vector3::new(r[14], r[15], r[16]),
            collision: r[17] != 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Aabb {
    /// Tabletop region in front of the arm base.
    pub fn default_obstacle_box() -> Self {
        Aabb {
            lo: Vector3::new(0.2, -0.5, 0.05),
            hi: Vector3::new(0.8, 0.5, 0.9),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|k| self.hi[k] > self.lo[k]) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "degenerate obstacle box lo={:?} hi={:?}",
                self.lo.as_slice(),
                self.hi.as_slice()
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        Vector3::from_fn(|k, _| rng.random_range(self.lo[k]..self.hi[k]))
    }
}

/// Per-column standardization of the 17 kernel features; the four quaternion columns share
/// one pooled standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const QUAT_COLS: std::ops::Range<usize> = 10..14;

impl FeatureScaling {
    pub fn fit(samples: &[Sample]) -> Self {
        let n = samples.len().max(1) as f64;
        let rows: Vec<[f64; SAMPLE_WIDTH]> = samples.iter().map(Sample::to_row).collect();
        let mut mean = vec![0.0; FEATURE_WIDTH];
        for r in &rows {
            for c in 0..FEATURE_WIDTH {
                mean[c] += r[c] / n;
            }
        }
        let mut var = [0.0; FEATURE_WIDTH];
        for r in &rows {
            for c in 0..FEATURE_WIDTH {
                var[c] += (r[c] - mean[c]).powi(2) / n;
            }
        }
        let pooled = QUAT_COLS.map(|c| var[c]).sum::<f64>() / QUAT_COLS.len() as f64;
        for c in QUAT_COLS {
            var[c] = pooled;
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        FeatureScaling { mean, scale }
    }

    pub fn apply(&self, s: &Sample) -> [f64; FEATURE_WIDTH] {
        let r = s.to_row();
        std::array::from_fn(|c| (r[c] - self.mean[c]) / self.scale[c])
    }

    fn hash_into(&self, h: &mut ContentHasher) {
        h.f64s(&self.mean).f64s(&self.scale);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub arm_hash: String,
    pub margin: f64,
    pub obstacle_box: Aabb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub scaling: FeatureScaling,
    pub meta: DatasetMeta,
    pub hash: String,
}

/// Point obstacle inflated by `margin` against every link capsule.
pub fn label_collision(model: &ArmModel, theta: &JointVector, obstacle: &Vector3<f64>, margin: f64) -> Result<bool> {
    let links = link_capsules_world(model, theta)?;
    let obs = ConvexShape::sphere(*obstacle, 0.0).with_margin(margin);
    let c = min_clearance(&links, std::slice::from_ref(&obs));
    Ok(c.penetrating || c.distance <= 0.0)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_sample(
    model: &ArmModel,
    index: usize,
    obstacle_box: &Aabb,
    seed: u64,
    margin: f64,
) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let theta = sample_config_with(model, &mut rng);
    let ee = forward_kinematics(model, &theta)?;
    let obstacle = obstacle_box.sample(&mut rng);
    let collision = label_collision(model, &theta, &obstacle, margin)?;
    Ok(Sample {
        theta,
        ee,
        obstacle,
        collision,
    })
}

pub fn generate(model: &ArmModel, n: usize, obstacle_box: &Aabb, seed: u64) -> Result<Dataset> {
    generate_with_margin(model, n, obstacle_box, seed, DEFAULT_LABEL_MARGIN)
}

pub fn generate_with_margin(
    model: &ArmModel,
    n: usize,
    obstacle_box: &Aabb,
    seed: u64,
    margin: f64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if model.dof() != DOF {
        return Err(Error::Config(format!(
            "sample schema needs a {DOF}-joint arm, model has {}",
            model.dof()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("labeling margin {margin} < 0")));
    }
    model.validate()?;
    obstacle_box.validate()?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(model, i, obstacle_box, seed, margin))
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        seed,
        arm_hash: model.content_hash(),
        margin,
        obstacle_box: *obstacle_box,
    };
    Ok(Dataset::from_parts(samples, meta))
}

impl Dataset {
    /// Fits the scaling and computes the content hash.
    pub fn from_parts(samples: Vec<Sample>, meta: DatasetMeta) -> Self {
        let scaling = FeatureScaling::fit(&samples);
        let hash = content_hash(&samples, &scaling, &meta);
        Dataset {
            samples,
            scaling,
            meta,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn collision_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.collision).count() as f64 / self.len().max(1) as f64
    }

    /// Scaled kernel features, one row per sample.
    pub fn features(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.len(), FEATURE_WIDTH);
        for (i, s) in self.samples.iter().enumerate() {
            for (c, v) in self.scaling.apply(s).iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        m
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.to_row()).collect()
    }

    pub fn ee_tree(&self) -> EeKdTree {
        EeKdTree::build(
            self.samples
                .iter()
                .map(|s| [s.ee.position.x, s.ee.position.y, s.ee.position.z])
                .collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut meta = MetaBlock::new(FORMAT_TAG);
        meta.set("seed", self.meta.seed)
            .set("arm_hash", &self.meta.arm_hash)
            .set("margin", self.meta.margin)
            .set("obstacle_box_lo", join_f64(self.meta.obstacle_box.lo.as_slice()))
            .set("obstacle_box_hi", join_f64(self.meta.obstacle_box.hi.as_slice()))
            .set("scaling_mean", join_f64(&self.scaling.mean))
            .set("scaling_scale", join_f64(&self.scaling.scale))
            .set("rows", self.len())
            .set("hash", &self.hash);
        let mut w = csv::Writer::from_writer(meta.render().into_bytes());
        w.write_record(COLUMNS).map_err(|e| csv_io(path, e))?;
        for s in &self.samples {
            let r = s.to_row();
            let mut rec: Vec<String> = r[..17].iter().map(|v| v.to_string()).collect();
            rec.push(if s.collision { "1".into() } else { "0".into() });
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        artifact::write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let Header {
            meta,
            first_line,
            first_line_no,
            rest,
        } = read_header(path, artifact::open(path)?)?;
        meta.expect_tag(FORMAT_TAG, path)?;
        check_columns(path, &first_line, &COLUMNS)?;

        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(rest);
        let mut samples = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = first_line_no + k + 1;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != SAMPLE_WIDTH {
                return Err(parse_err(
                    line,
                    format!("expected {SAMPLE_WIDTH} fields, found {}", rec.len()),
                ));
            }
            let mut row = [0.0; SAMPLE_WIDTH];
            for (c, field) in rec.iter().enumerate() {
                row[c] = field.trim().parse::<f64>().map_err(|_| {
                    parse_err(line, format!("field '{}': cannot parse '{field}'", COLUMNS[c]))
                })?;
            }
            if row[17] != 0.0 && row[17] != 1.0 {
                return Err(parse_err(line, "field 'collision' must be 0 or 1".into()));
            }
            samples.push(Sample::from_row(&row));
        }

        let rows = meta.require_u64("rows", path)? as usize;
        if samples.len() != rows {
            return Err(parse_err(
                first_line_no + samples.len() + 1,
                format!("truncated: header declares {rows} rows, found {}", samples.len()),
            ));
        }
        let lo = meta.require_vec("obstacle_box_lo", Some(3), path)?;
        let hi = meta.require_vec("obstacle_box_hi", Some(3), path)?;
        let dmeta = DatasetMeta {
            seed: meta.require_u64("seed", path)?,
            arm_hash: meta.require("arm_hash", path)?.to_string(),
            margin: meta.require_f64("margin", path)?,
            obstacle_box: Aabb {
                lo: Vector3::from_column_slice(&lo),
                hi: Vector3::from_column_slice(&hi),
            },
        };
        let scaling = FeatureScaling {
            mean: meta.require_vec("scaling_mean", Some(FEATURE_WIDTH), path)?,
            scale: meta.require_vec("scaling_scale", Some(FEATURE_WIDTH), path)?,
        };
        let hash = content_hash(&samples, &scaling, &dmeta);
        let declared = meta.require("hash", path)?;
        if declared != hash {
            return Err(Error::ArtifactMismatch(format!(
                "{}: content hash {hash} does not match header {declared}",
                path.display()
            )));
        }
        Ok(Dataset {
            samples,
            scaling,
            meta: dmeta,
            hash,
        })
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn content_hash(samples: &[Sample], scaling: &FeatureScaling, meta: &DatasetMeta) -> String {
    let mut h = ContentHasher::new("dataset");
    h.u64(meta.seed)
        .str(&meta.arm_hash)
        .f64(meta.margin)
        .f64s(meta.obstacle_box.lo.as_slice())
        .f64s(meta.obstacle_box.hi.as_slice());
    scaling.hash_into(&mut h);
    h.u64(samples.len() as u64);
    for s in samples {
        h.f64s(&s.to_row());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::link_capsules_world;
    use crate::collision::Geometry;

    fn small(n: usize, seed: u64) -> Dataset {
        generate(&ArmModel::panda(), n, &Aabb::default_obstacle_box(), seed).unwrap()
    }

    fn point_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (a + ab * t)).norm()
    }

    fn oracle_label(model: &ArmModel, s: &Sample, margin: f64) -> bool {
        link_capsules_world(model, &s.theta).unwrap().iter().any(|c| match &c.geometry {
            Geometry::Capsule { a, b, radius } => point_segment(&s.obstacle, a, b) - radius - margin <= 0.0,
            _ => unreachable!(),
        })
    }

    #[test]
    fn far_obstacle_is_free() {
        let model = ArmModel::panda();
        let ds = generate(&model, 1, &Aabb { lo: Vector3::repeat(10.0), hi: Vector3::repeat(10.5) }, 1).unwrap();
        assert!(!ds.samples[0].collision);
    }

    #[test]
    fn obstacle_at_end_effector_collides() {
        let model = ArmModel::panda();
        let s = generate_sample(&model, 0, &Aabb::default_obstacle_box(), 3, 0.05).unwrap();
        assert!(label_collision(&model, &s.theta, &s.ee.position, 0.05).unwrap());
    }

    #[test]
    fn labels_match_point_capsule_oracle() {
        let model = ArmModel::panda();
        let ds = small(5000, 42);
        let frac = ds.collision_fraction();
        assert!(frac > 0.0 && frac < 1.0, "fraction {frac}");
        let oracle = ds.samples.iter().filter(|s| oracle_label(&model, s, 0.05)).count();
        let mismatched = ds
            .samples
            .iter()
            .filter(|s| s.collision != oracle_label(&model, s, 0.05))
            .count();
        assert_eq!(mismatched, 0);
        assert_eq!(oracle as f64 / 5000.0, frac);
    }

    #[test]
    fn ee_is_forward_kinematics() {
        let model = ArmModel::panda();
        for s in &small(200, 5).samples {
            let fk = forward_kinematics(&model, &s.theta).unwrap();
            let a = fk.to_array();
            let b = s.ee.to_array();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn flattened_width_and_determinism() {
        let a = small(300, 8);
        let b = small(300, 8);
        assert_eq!(a.flattened().len(), 300 * SAMPLE_WIDTH);
        assert_eq!(a.hash, b.hash);
        assert_eq!(
            a.flattened().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flattened().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a.hash, small(300, 9).hash);
    }

    #[test]
    fn save_load_is_bitwise() {
        let ds = small(250, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        ds.save(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(back.hash, ds.hash);
        let bits = |d: &Dataset| d.flattened().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));
        assert_eq!(back.scaling, ds.scaling);
        assert_eq!(back.meta, ds.meta);
        let first = std::fs::read(&p).unwrap();
        ds.save(&p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let ds = small(50, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        ds.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let cut = &text[..text.len() - text.len() / 5];
        std::fs::write(&p, cut).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_column_is_named() {
        let ds = small(10, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        ds.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let dropped: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with('#') {
                    l.to_string()
                } else {
                    let mut f: Vec<&str> = l.split(',').collect();
                    f.remove(16);
                    f.join(",")
                }
            })
            .collect();
        std::fs::write(&p, dropped.join("\n")).unwrap();
        match Dataset::load(&p) {
            Err(Error::Schema { message, .. }) => assert!(message.contains("obs_z"), "{message}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_line_and_field() {
        let ds = small(10, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        ds.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let k = lines.len() - 3;
        let mut f: Vec<String> = lines[k].split(',').map(String::from).collect();
        f[8] = "abc".into();
        lines[k] = f.join(",");
        std::fs::write(&p, lines.join("\n")).unwrap();
        match Dataset::load(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, k + 1);
                assert!(message.contains("ee_y"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ee_tree_matches_scan() {
        use rand::Rng;
        let ds = small(1000, 4);
        let tree = ds.ee_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(0.0..1.2)];
            let qv = Vector3::new(q[0], q[1], q[2]);
            let (bi, bd) = ds
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (i, (s.ee.position - qv).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            let (ti, td) = tree.nearest(&q).unwrap();
            assert_eq!(ti, bi);
            assert!((td - bd).abs() < 1e-12);
        }
        let p = ds.samples[17].ee.position;
        assert_eq!(tree.nearest(&[p.x, p.y, p.z]).unwrap(), (17, 0.0));
    }

    #[test]
    fn scaling_standardizes() {
        let ds = small(2000, 6);
        let f = ds.features();
        for c in 0..FEATURE_WIDTH {
            let col = f.column(c);
            let mean = col.mean();
            assert!(mean.abs() < 1e-9);
            if !QUAT_COLS.contains(&c) {
                assert!((col.variance() - 1.0).abs() < 1e-9);
            }
        }
        let pooled: f64 = QUAT_COLS.map(|c| f.column(c).variance()).sum::<f64>() / 4.0;
        assert!((pooled - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = ArmModel::panda();
        assert!(generate(&m, 0, &Aabb::default_obstacle_box(), 1).is_err());
        let flat = Aabb { lo: Vector3::zeros(), hi: Vector3::new(1.0, 0.0, 1.0) };
        assert!(matches!(generate(&m, 5, &flat, 1), Err(Error::Config(_))));
    }
}
