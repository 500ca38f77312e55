//! Metric evaluation over held-out scenes for any mesh predictor.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objective::MetricsReport;
use crate::params::ParamStore;

use super::config::TrainConfig;
use super::model::predict;
use super::synth::{Scene, synth_scene};

/// Anything that maps a scene to `(joints J×3, full vertices V_full×3)`.
pub trait MeshPredictor {
    fn predict(&self, scene: &Scene) -> Result<(Tensor, Tensor)>;
}

/// A trained or initialized network, run with masking and dropout off.
pub struct ModelPredictor<'a> {
    pub params: &'a ParamStore,
    pub config: &'a TrainConfig,
}

impl MeshPredictor for ModelPredictor<'_> {
    fn predict(&self, scene: &Scene) -> Result<(Tensor, Tensor)> {
        predict(self.params, self.config, scene)
    }
}

/// Returns the ground truth itself.
pub struct OraclePredictor;

impl MeshPredictor for OraclePredictor {
    fn predict(&self, scene: &Scene) -> Result<(Tensor, Tensor)> {
        Ok((scene.gt_j3d.clone(), scene.gt_vertices_full.clone()))
    }
}

/// Predicts the same joints and vertices for every scene.
pub struct ConstantPredictor {
    pub joints: Tensor,
    pub vertices: Tensor,
}

impl ConstantPredictor {
    pub fn zeros(joints: usize, vertices: usize) -> Self {
        ConstantPredictor {
            joints: Tensor::zeros(&[joints, 3]),
            vertices: Tensor::zeros(&[vertices, 3]),
        }
    }
}

impl MeshPredictor for ConstantPredictor {
    fn predict(&self, _: &Scene) -> Result<(Tensor, Tensor)> {
        Ok((self.joints.clone(), self.vertices.clone()))
    }
}

/// Mean metrics over `seeds`, in the given order.
pub fn evaluate<P: MeshPredictor + ?Sized>(predictor: &P, cfg: &TrainConfig, seeds: &[u64]) -> Result<MetricsReport> {
    if seeds.is_empty() {
        return Err(Error::Config("no evaluation seeds".into()));
    }
    let reports = seeds
        .iter()
        .map(|&s| {
            let scene = synth_scene(s, &cfg.synth())?;
            let (joints, verts) = predictor.predict(&scene)?;
            if joints.shape() != scene.gt_j3d.shape() || verts.shape() != scene.gt_vertices_full.shape() {
                return Err(Error::Config(format!(
                    "predictor output {:?}/{:?} does not match scene {:?}/{:?}",
                    joints.shape(),
                    verts.shape(),
                    scene.gt_j3d.shape(),
                    scene.gt_vertices_full.shape()
                )));
            }
            MetricsReport::for_scene(&joints, &scene.gt_j3d, &verts, &scene.gt_vertices_full)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}

/// Seeds file: whitespace- or comma-separated unsigned integers, `#` comments.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .lines()
        .flat_map(|l| l.split('#').next().unwrap_or("").split([',', ' ', '\t']))
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{}`", t.trim())))
        })
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("seeds file lists no seeds".into()));
    }
    Ok(seeds)
}

/// Default held-out seeds, disjoint from the default training range.
pub fn default_test_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| 1_000_000 + i).collect()
}
