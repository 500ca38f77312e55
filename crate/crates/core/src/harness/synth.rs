//! Procedural articulated-body scenes: three capsules (torso, leg, arm)
//! rendered to depth, shading and silhouette grids, with vertex and joint
//! ground truth.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::InputGrids;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, io};
use crate::objective::{JointRegressor, project_points};

/// Distance from the camera to the body root along the view axis.
pub const CAMERA_DISTANCE: f64 = 3.0;
/// Depth assigned to pixels that miss every capsule.
pub const BACKGROUND_DEPTH: f64 = 8.0;
pub const CAMERA_GT: [f64; 3] = [1.0, 0.0, 0.0];

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
const MAX_TILT: f64 = std::f64::consts::FRAC_PI_3;
const ROOT_JITTER: f64 = 0.15;
/// Half-width of the in-plane angle range for each limb. Poses vary mostly
/// by tilt out of the image plane, whose sign shading alone cannot reveal.
const SPREAD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub v_coarse: usize,
    pub v_full: usize,
    pub joints: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints != 4 {
            return Err(Error::Config(format!("the capsule body has 4 joints, got {}", self.joints)));
        }
        for (name, v) in [("v_coarse", self.v_coarse), ("v_full", self.v_full)] {
            if v < 8 || v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even and ≥ 8, got {v}")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `H×W×1` shading in `[0,1]`.
    pub image: Tensor,
    /// `H×W` depth, `BACKGROUND_DEPTH` off the body.
    pub depth: Tensor,
    /// `H×W` in `{0,1}`.
    pub silhouette: Tensor,
    pub gt_vertices: Tensor,
    pub gt_vertices_full: Tensor,
    pub gt_j3d: Tensor,
    pub gt_j2d: Tensor,
    pub camera_gt: [f64; 3],
}

impl Scene {
    pub fn grids(&self) -> Result<InputGrids> {
        InputGrids::new(self.image.clone(), self.depth.clone())
    }

    pub fn tensors(&self) -> Result<Vec<(&'static str, Tensor)>> {
        Ok(vec![
            ("image", self.image.clone()),
            ("depth", self.depth.clone()),
            ("silhouette", self.silhouette.clone()),
            ("gt_vertices", self.gt_vertices.clone()),
            ("gt_vertices_full", self.gt_vertices_full.clone()),
            ("gt_j3d", self.gt_j3d.clone()),
            ("gt_j2d", self.gt_j2d.clone()),
            ("camera_gt", Tensor::new(&[3], self.camera_gt.to_vec())?),
        ])
    }

    /// Writes each field as `<name>.d2a` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in self.tensors()? {
            io::save(&dir.join(format!("{name}.d2a")), &t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
}

impl Capsule {
    fn axis(&self) -> Vector3<f64> {
        (self.b - self.a).normalize()
    }

    /// Nearest-surface hit for the view ray through `(x, y)`: the closest
    /// axis point in the image plane and the front of the cross-section
    /// circle there. Returns `(z, |n_z|)`.
    fn hit(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (ax, ay) = (self.a.x, self.a.y);
        let (dx, dy) = (self.b.x - ax, self.b.y - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 1e-12 {
            (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        let r2 = self.radius * self.radius;
        if d2 >= r2 {
            return None;
        }
        let h = (r2 - d2).sqrt();
        let z_axis = self.a.z + t * (self.b.z - self.a.z);
        Some((z_axis - h, h / self.radius))
    }
}

fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(theta.sin() * phi.cos(), -theta.cos() * phi.cos(), phi.sin())
}

/// Joints in order root (pelvis), neck, foot, hand.
fn sample_body<R: Rng>(rng: &mut R) -> ([Vector3<f64>; 4], [Capsule; 3]) {
    let pi = std::f64::consts::PI;
    let root = Vector3::new(
        rng.random_range(-ROOT_JITTER..ROOT_JITTER),
        rng.random_range(-ROOT_JITTER..ROOT_JITTER),
        0.0,
    );
    let mut tilt = || rng.random_range(-MAX_TILT..MAX_TILT);
    let (t_phi, l_phi, a_phi) = (tilt(), tilt(), tilt());
    let neck = root + 0.45 * direction(pi + rng.random_range(-SPREAD..SPREAD), t_phi);
    let foot = root + 0.45 * direction(rng.random_range(-SPREAD..SPREAD), l_phi);
    let hand = neck + 0.35 * direction(pi / 2.0 + rng.random_range(-SPREAD..SPREAD), a_phi);
    let capsules = [
        Capsule { a: root, b: neck, radius: 0.12 },
        Capsule { a: root, b: foot, radius: 0.08 },
        Capsule { a: neck, b: hand, radius: 0.06 },
    ];
    ([root, neck, foot, hand], capsules)
}

fn frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let c = axis.cross(&Vector3::z());
    let e1 = if c.norm() > 1e-6 { c.normalize() } else { axis.cross(&Vector3::x()).normalize() };
    (e1, axis.cross(&e1))
}

/// `count` surface points in antipodal pairs. Pair `k < 4` straddles joint
/// `k`; the rest are spread round-robin along the three segments.
fn surface_points(joints: &[Vector3<f64>; 4], caps: &[Capsule; 3], count: usize) -> Vec<Vector3<f64>> {
    let pairs = count / 2;
    let joint_cap = [0, 0, 1, 2];
    let extra = pairs - 4;
    let per_seg = |s: usize| extra / 3 + usize::from(s < extra % 3);
    let mut out = Vec::with_capacity(count);
    for k in 0..pairs {
        let (center, cap) = if k < 4 {
            (joints[k], caps[joint_cap[k]])
        } else {
            let (s, m) = ((k - 4) % 3, (k - 4) / 3);
            let cap = caps[s];
            let t = (m + 1) as f64 / (per_seg(s) + 1) as f64;
            (cap.a + t * (cap.b - cap.a), cap)
        };
        let (e1, e2) = frame(&cap.axis());
        let alpha = k as f64 * GOLDEN_ANGLE;
        let u = cap.radius * (alpha.cos() * e1 + alpha.sin() * e2);
        out.push(center + u);
        out.push(center - u);
    }
    out
}

fn rows_tensor(points: &[Vector3<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| vec![p.x, p.y, p.z]).collect();
    Tensor::from_rows(&rows)
}

/// Averages each antipodal joint pair, recovering the joints from vertices.
pub fn joint_regressor(v_coarse: usize, joints: usize) -> Result<JointRegressor> {
    if v_coarse < 2 * joints {
        return Err(Error::Config(format!("{v_coarse} vertices cannot hold {joints} joint pairs")));
    }
    let mut m = Tensor::zeros(&[joints, v_coarse]);
    for k in 0..joints {
        m.data_mut()[k * v_coarse + 2 * k] = 0.5;
        m.data_mut()[k * v_coarse + 2 * k + 1] = 0.5;
    }
    JointRegressor::new(m)
}

/// Deterministic scene for `seed`.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (joints, caps) = sample_body(&mut rng);
    let (h, w) = (cfg.height, cfg.width);
    let mut depth = vec![BACKGROUND_DEPTH; h * w];
    let mut image = vec![0.0; h * w];
    for i in 0..h {
        let y = 1.0 - (i as f64 + 0.5) * 2.0 / h as f64;
        for j in 0..w {
            let x = -1.0 + (j as f64 + 0.5) * 2.0 / w as f64;
            let mut best: Option<(f64, f64)> = None;
            for cap in &caps {
                if let Some((z, nz)) = cap.hit(x, y) {
                    if best.is_none_or(|(bz, _)| z < bz) {
                        best = Some((z, nz));
                    }
                }
            }
            if let Some((z, nz)) = best {
                depth[i * w + j] = CAMERA_DISTANCE + z;
                image[i * w + j] = 0.25 + 0.75 * nz;
            }
        }
    }
    let silhouette = depth.iter().map(|&d| if d < BACKGROUND_DEPTH { 1.0 } else { 0.0 }).collect();
    let gt_j3d = rows_tensor(&joints);
    let gt_j2d = project_points(&gt_j3d, CAMERA_GT)?;
    Ok(Scene {
        image: Tensor::new(&[h, w, 1], image)?,
        depth: Tensor::new(&[h, w], depth)?,
        silhouette: Tensor::new(&[h, w], silhouette)?,
        gt_vertices: rows_tensor(&surface_points(&joints, &caps, cfg.v_coarse)),
        gt_vertices_full: rows_tensor(&surface_points(&joints, &caps, cfg.v_full)),
        gt_j3d,
        gt_j2d,
        camera_gt: CAMERA_GT,
    })
}
