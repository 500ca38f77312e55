//! Supervision terms, the weighted total objective, weak-perspective
//! projection, and the evaluation metrics.

use std::fmt;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Scene units are metres; metrics are reported in millimetres.
pub const MM_PER_UNIT: f64 = 1000.0;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub distribution: f64,
    pub vertices: f64,
    pub joints_3d: f64,
    pub joints_2d: f64,
    pub silhouette: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distribution: 0.01,
            vertices: 1.0,
            joints_3d: 1.0,
            joints_2d: 1.0,
            silhouette: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            distribution: 0.0,
            vertices: 0.0,
            joints_3d: 0.0,
            joints_2d: 0.0,
            silhouette: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("rle", self.distribution),
            ("vertices", self.vertices),
            ("joints_3d", self.joints_3d),
            ("joints_2d", self.joints_2d),
            ("silhouette", self.silhouette),
        ]
    }
}

/// Row-stochastic `J×V` vertex-to-joint map.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    m: Tensor,
}

impl JointRegressor {
    pub fn new(m: Tensor) -> Result<Self> {
        if m.shape().len() != 2 {
            return Err(Error::dim("joint regressor", m.shape(), &[0, 0]));
        }
        if m.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("joint regressor entries must be ≥ 0".into()));
        }
        for r in 0..m.rows() {
            let s: f64 = m.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("joint regressor row {r} sums to {s}")));
            }
        }
        Ok(JointRegressor { m })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }
}

/// `J_3D = M·vertices`.
pub fn regress_joints(g: &mut Graph, vertices: Var, m: Var) -> Result<Var> {
    g.matmul(m, vertices)
}

/// `s·(x, y) + (t_x, t_y)` for each row of `joints` (`J×3`); `camera` is
/// `(s, t_x, t_y)` as a `1×3` row.
pub fn project_weak_perspective(g: &mut Graph, joints: Var, camera: Var) -> Result<Var> {
    if g.shape(joints).len() != 2 || g.shape(joints)[1] != 3 {
        return Err(Error::dim("project_weak_perspective", g.shape(joints), &[0, 3]));
    }
    if g.value(camera).numel() != 3 {
        return Err(Error::dim("project_weak_perspective camera", g.shape(camera), &[1, 3]));
    }
    let camera = g.reshape(camera, &[1, 3])?;
    let s = g.slice_cols(camera, 0, 1)?;
    if g.item(s) <= 0.0 {
        return Err(Error::Domain(format!("camera scale {} must be positive", g.item(s))));
    }
    let t = g.slice_cols(camera, 1, 2)?;
    let xy = g.slice_cols(joints, 0, 2)?;
    let scaled = g.scale_by(s, xy)?;
    g.add_row(scaled, t)
}

/// Plain-tensor projection, used for ground truth.
pub fn project_points(joints: &Tensor, camera: [f64; 3]) -> Result<Tensor> {
    let mut g = Graph::new();
    let j = g.constant(joints.clone());
    let c = g.constant(Tensor::new(&[1, 3], camera.to_vec())?);
    let p = project_weak_perspective(&mut g, j, c)?;
    Ok(g.value(p).clone())
}

/// Mean absolute difference over all entries.
pub fn l1_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let d = g.sub(pred, gt)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn silhouette_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::dim("silhouette_loss", g.shape(pred), gt.shape()));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("silhouette target must be binary".into()));
    }
    let p = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.log(p)?;
    let one_minus = g.scale(p, -1.0)?;
    let one_minus = g.shift(one_minus, 1.0)?;
    let log_q = g.log(one_minus)?;
    let y = g.constant(gt.clone());
    let not_y = g.constant(Tensor::new(gt.shape(), gt.data().iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.scale(m, -1.0)
}

/// Loss terms of one scene; `None` marks a term that is switched off.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub rle: Option<Var>,
    pub vertices: Option<Var>,
    pub joints_3d: Option<Var>,
    pub joints_2d: Option<Var>,
    pub silhouette: Option<Var>,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, Option<Var>); 5] {
        [
            ("rle", self.rle),
            ("vertices", self.vertices),
            ("joints_3d", self.joints_3d),
            ("joints_2d", self.joints_2d),
            ("silhouette", self.silhouette),
        ]
    }
}

/// Tags a non-finite failure with the loss term that produced it.
pub fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("loss term {term} ({what})")),
        other => other,
    })
}

/// `λ_d·L_RLE + λ_v·L_v + λ_3D·L_3D + λ_2D·L_2D + λ_s·L_silh` over the present
/// terms.
pub fn total_loss(g: &mut Graph, c: &LossComponents, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut total = g.constant(Tensor::scalar(0.0));
    for ((name, term), (_, lambda)) in c.named().into_iter().zip(w.named()) {
        let Some(v) = term else { continue };
        if g.value(v).numel() != 1 {
            return Err(Error::dim("total_loss term", g.shape(v), &[1]));
        }
        if !g.item(v).is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        let v = g.reshape(v, &[1])?;
        let weighted = g.scale(v, lambda)?;
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

fn points(t: &Tensor, op: &'static str) -> Result<Vec<Vector3<f64>>> {
    if t.shape().len() != 2 || t.cols() != 3 {
        return Err(Error::dim(op, t.shape(), &[0, 3]));
    }
    Ok((0..t.rows()).map(|r| Vector3::from_row_slice(t.row(r))).collect())
}

fn paired(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(op, pred.shape(), gt.shape()));
    }
    Ok((points(pred, op)?, points(gt, op)?))
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Mean Euclidean joint error, optionally after moving joint 0 of both sets
/// to the origin. Result is in input units.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root_center: bool) -> Result<f64> {
    let (mut p, mut q) = paired(pred, gt, "mpjpe")?;
    if root_center {
        let (rp, rq) = (p[0], q[0]);
        p.iter_mut().for_each(|v| *v -= rp);
        q.iter_mut().for_each(|v| *v -= rq);
    }
    Ok(mean_distance(&p, &q))
}

/// Per-vertex error: [`mpjpe`] on vertex arrays without centering.
pub fn mpve(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    mpjpe(pred, gt, false)
}

/// Mean `|Δz|` after root-centering at joint 0.
pub fn mpjpe_z(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, q) = paired(pred, gt, "mpjpe_z")?;
    let n = p.len() as f64;
    Ok(p.iter().zip(&q).map(|(a, b)| ((a.z - p[0].z) - (b.z - q[0].z)).abs()).sum::<f64>() / n)
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

const DEGENERATE_VAR: f64 = 1e-20;

/// Least-squares similarity taking `src` onto `dst` (Umeyama), with the
/// rotation forced to `det R = +1`. A collapsed `src` maps onto the centroid
/// of `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::Alignment(format!("need ≥ 3 paired points, got {n}")));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let var_s = src.iter().map(|x| (x - mu_s).norm_squared()).sum::<f64>() / nf;
    let var_d = dst.iter().map(|x| (x - mu_d).norm_squared()).sum::<f64>() / nf;
    if var_d <= DEGENERATE_VAR {
        return Err(Error::Alignment("target points coincide".into()));
    }
    if var_s <= DEGENERATE_VAR {
        // every similarity maps a single point to a single point; the best
        // one lands it on the target centroid
        return Ok(Similarity {
            scale: 0.0,
            rotation: Matrix3::identity(),
            translation: mu_d,
        });
    }
    let mut cov = Matrix3::zeros();
    for (x, y) in src.iter().zip(dst) {
        cov += (y - mu_d) * (x - mu_s).transpose();
    }
    cov /= nf;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Alignment("SVD did not converge".into())),
    };
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // singular values are sorted descending; flip the weakest axis
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_s;
    let translation = mu_d - scale * (rotation * mu_s);
    if !(scale.is_finite() && rotation.iter().all(|v| v.is_finite())) {
        return Err(Error::Alignment("non-finite similarity".into()));
    }
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Mean joint error after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, q) = paired(pred, gt, "pa_mpjpe")?;
    let sim = umeyama(&p, &q)?;
    let aligned: Vec<Vector3<f64>> = p.iter().map(|x| sim.apply(x)).collect();
    Ok(mean_distance(&aligned, &q))
}

/// Evaluation metrics in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
    pub mpjpe_z: f64,
}

impl MetricsReport {
    pub const KEYS: [&'static str; 4] = ["mpjpe", "pa_mpjpe", "mpve", "mpjpe_z"];

    /// Metrics of one scene from joints (`J×3`) and vertices (`V×3`) in
    /// scene units.
    pub fn for_scene(pred_joints: &Tensor, gt_joints: &Tensor, pred_vertices: &Tensor, gt_vertices: &Tensor) -> Result<Self> {
        Ok(MetricsReport {
            mpjpe: MM_PER_UNIT * mpjpe(pred_joints, gt_joints, true)?,
            pa_mpjpe: MM_PER_UNIT * pa_mpjpe(pred_joints, gt_joints)?,
            mpve: MM_PER_UNIT * mpve(pred_vertices, gt_vertices)?,
            mpjpe_z: MM_PER_UNIT * mpjpe_z(pred_joints, gt_joints)?,
        })
    }

    /// Average over scenes, summed in the given order.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Config("no scenes to average".into()));
        }
        let n = reports.len() as f64;
        let mut acc = MetricsReport::default();
        for r in reports {
            acc.mpjpe += r.mpjpe;
            acc.pa_mpjpe += r.pa_mpjpe;
            acc.mpve += r.mpve;
            acc.mpjpe_z += r.mpjpe_z;
        }
        Ok(MetricsReport {
            mpjpe: acc.mpjpe / n,
            pa_mpjpe: acc.pa_mpjpe / n,
            mpve: acc.mpve / n,
            mpjpe_z: acc.mpjpe_z / n,
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.mpjpe, self.pa_mpjpe, self.mpve, self.mpjpe_z]
    }

    /// `key=value` lines, one metric per line.
    pub fn to_key_values(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12}", "metric", "mm")?;
        for (k, v) in Self::KEYS.iter().zip(self.values()) {
            writeln!(f, "{k:<10} {v:>12.4}")?;
        }
        Ok(())
    }
}
