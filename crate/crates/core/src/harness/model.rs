//! Parameter initialization and the end-to-end forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{self, StreamEmbedding, embed_inputs};
use crate::encoder::{self, EncoderParams, encoder_forward};
use crate::error::Result;
use crate::flow::{self, FlowModel, rle_loss};
use crate::heads::{
    self, MASK_TOKEN, MeshPrediction, RegressorParams, SilhouetteParams, decode_silhouette, regress_mesh,
    sample_mask, upsample_mesh,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::objective::{
    LossComponents, in_term, l1_loss, project_weak_perspective, regress_joints, silhouette_loss, total_loss,
};
use crate::params::{Bound, ParamStore};

use super::config::TrainConfig;
use super::synth::{BACKGROUND_DEPTH, Scene, joint_regressor};

pub const FLOW_PREFIX: &str = "flow";

/// Fresh parameters for every module, whether or not it is toggled on, so
/// that checkpoints of all ablation arms share one layout.
pub fn init_model(cfg: &TrainConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    embedding::init_params(&mut store, &cfg.embedding(), BACKGROUND_DEPTH, &mut rng)?;
    encoder::init_params(&mut store, &cfg.encoder(), &mut rng)?;
    heads::init_params(&mut store, &cfg.heads(), &mut rng)?;
    if cfg.silhouette().validate().is_ok() {
        heads::init_silhouette_params(&mut store, &cfg.silhouette(), &mut rng)?;
    }
    flow::init_params(&mut store, FLOW_PREFIX, &cfg.flow(), &mut rng)?;
    heads::init_mask_token(&mut store, cfg.d_model, &mut rng);
    Ok(store)
}

/// Training mode turns on masking and dropout, drawing from `rng`.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub struct ForwardOutput {
    pub prediction: MeshPrediction,
    pub full: Var,
    pub joints_3d: Var,
    pub joints_2d: Var,
    pub silhouette: Option<Var>,
    pub components: LossComponents,
    pub total: Var,
}

/// Bound modules of one graph.
pub struct Model {
    cfg: TrainConfig,
    image: StreamEmbedding,
    depth: StreamEmbedding,
    encoder: EncoderParams,
    regressor: RegressorParams,
    upsample: (Var, Var),
    silhouette: Option<SilhouetteParams>,
    flow: FlowModel,
    mask_token: Var,
    regressor_matrix: Var,
}

impl Model {
    pub fn bind(g: &mut Graph, bound: &Bound, cfg: &TrainConfig) -> Result<Self> {
        let emb = cfg.embedding();
        let m = joint_regressor(cfg.v_coarse, cfg.joints)?;
        Ok(Model {
            cfg: cfg.clone(),
            image: StreamEmbedding::bind(g, bound, "image", &emb)?,
            depth: StreamEmbedding::bind(g, bound, "depth", &emb)?,
            encoder: EncoderParams::bind(bound, &cfg.encoder())?,
            regressor: RegressorParams::bind(bound, &cfg.heads())?,
            upsample: (bound.get("upsample.u")?, bound.get("upsample.bias")?),
            silhouette: if cfg.toggles.silhouette { Some(SilhouetteParams::bind(bound)?) } else { None },
            flow: FlowModel::bind(bound, FLOW_PREFIX, &cfg.flow())?,
            mask_token: bound.get(MASK_TOKEN)?,
            regressor_matrix: g.constant(m.matrix().clone()),
        })
    }

    /// Prediction and every enabled loss term for one scene.
    pub fn forward(&self, g: &mut Graph, scene: &Scene, mut mode: Mode<'_>) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let t = cfg.toggles;
        let mask = match &mut mode {
            Mode::Train(rng) if t.masking => {
                let n = cfg.embedding().tokens();
                let picked = sample_mask(n, cfg.mask_ratio, &mut **rng)?;
                let mut rows = vec![false; n];
                picked.iter().for_each(|&i| rows[i] = true);
                Some((self.mask_token, rows))
            }
            _ => None,
        };
        let grids = scene.grids()?;
        let (z_img, z_depth) = embed_inputs(g, &grids, &self.image, &self.depth, cfg.patch, mask)?;
        let z = encoder_forward(g, z_img, t.depth_stream.then_some(z_depth), &self.encoder)?;
        let prediction = regress_mesh(g, z, &self.regressor)?;
        let full = upsample_mesh(g, prediction.mu, self.upsample.0, self.upsample.1)?;
        let joints_3d = regress_joints(g, prediction.mu, self.regressor_matrix)?;
        let joints_2d = project_weak_perspective(g, joints_3d, prediction.camera)?;

        let gt_v = g.constant(scene.gt_vertices.clone());
        let gt_full = g.constant(scene.gt_vertices_full.clone());
        let gt_j3 = g.constant(scene.gt_j3d.clone());
        let gt_j2 = g.constant(scene.gt_j2d.clone());

        let mut c = LossComponents::default();
        c.vertices = Some(in_term("vertices", (|| {
            let coarse = l1_loss(g, prediction.mu, gt_v)?;
            let dense = l1_loss(g, full, gt_full)?;
            g.add(coarse, dense)
        })())?);
        c.joints_3d = Some(in_term("joints_3d", l1_loss(g, joints_3d, gt_j3))?);
        c.joints_2d = Some(in_term("joints_2d", l1_loss(g, joints_2d, gt_j2))?);
        if t.distribution {
            c.rle = Some(in_term(
                "rle",
                rle_loss(g, prediction.mu, prediction.sigma, gt_v, &self.flow),
            )?);
        }
        let mut silhouette = None;
        if let Some(sp) = &self.silhouette {
            let rng = match &mut mode {
                Mode::Train(rng) => Some(&mut **rng),
                Mode::Eval => None,
            };
            let s = in_term("silhouette", decode_silhouette(g, z, sp, &cfg.silhouette(), rng))?;
            c.silhouette = Some(in_term("silhouette", silhouette_loss(g, s, &scene.silhouette))?);
            silhouette = Some(s);
        }
        let total = total_loss(g, &c, &cfg.weights)?;
        Ok(ForwardOutput {
            prediction,
            full,
            joints_3d,
            joints_2d,
            silhouette,
            components: c,
            total,
        })
    }
}

/// Joints and full-resolution vertices predicted for `scene` in eval mode.
pub fn predict(store: &ParamStore, cfg: &TrainConfig, scene: &Scene) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let model = Model::bind(&mut g, &bound, cfg)?;
    let out = model.forward(&mut g, scene, Mode::Eval)?;
    Ok((g.value(out.joints_3d).clone(), g.value(out.full).clone()))
}

/// Seeded stream for masking and dropout at a given optimizer step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Toggles;
    use crate::harness::synth::synth_scene;

    #[test]
    fn untrained_model_predicts_the_zero_mesh() {
        let cfg = TrainConfig::reduced();
        let store = init_model(&cfg).unwrap();
        let scene = synth_scene(3, &cfg.synth()).unwrap();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let model = Model::bind(&mut g, &bound, &cfg).unwrap();
        let out = model.forward(&mut g, &scene, Mode::Eval).unwrap();
        assert!(g.data(out.prediction.mu).iter().all(|&v| v == 0.0));
        assert!(g.data(out.prediction.sigma).iter().all(|&v| v == 1.0));
        assert_eq!(g.data(out.prediction.camera), &[1.0, 0.0, 0.0]);
        assert!(g.data(out.full).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(out.full), &[12, 3]);
        assert_eq!(g.shape(out.joints_2d), &[4, 2]);
        assert_eq!(g.shape(out.silhouette.unwrap()), &[16, 16]);
        assert!(out.components.named().iter().all(|(_, v)| v.is_some()));
    }

    #[test]
    fn toggles_remove_terms() {
        let mut cfg = TrainConfig::reduced();
        cfg.toggles = Toggles {
            depth_stream: false,
            distribution: false,
            silhouette: false,
            masking: false,
        };
        let store = init_model(&cfg).unwrap();
        let scene = synth_scene(4, &cfg.synth()).unwrap();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let model = Model::bind(&mut g, &bound, &cfg).unwrap();
        let out = model.forward(&mut g, &scene, Mode::Eval).unwrap();
        assert!(out.components.rle.is_none() && out.components.silhouette.is_none());
        assert!(out.silhouette.is_none());
        let sum: f64 = [out.components.vertices, out.components.joints_3d, out.components.joints_2d]
            .iter()
            .map(|v| g.item(v.unwrap()))
            .sum();
        assert!((g.item(out.total) - sum).abs() < 1e-12);
    }

    #[test]
    fn training_mode_is_reproducible_per_step() {
        let cfg = TrainConfig::reduced();
        let store = init_model(&cfg).unwrap();
        let scene = synth_scene(5, &cfg.synth()).unwrap();
        let run = |step| {
            let mut g = Graph::new();
            let bound = store.bind_frozen(&mut g);
            let model = Model::bind(&mut g, &bound, &cfg).unwrap();
            let mut r = step_rng(cfg.seed, step);
            let out = model.forward(&mut g, &scene, Mode::Train(&mut r)).unwrap();
            g.item(out.total)
        };
        assert_eq!(run(1).to_bits(), run(1).to_bits());
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn reduced_pipeline_gradients() {
        let mut cfg = TrainConfig::reduced();
        cfg.d_model = 4;
        cfg.heads = 1;
        let report = crate::harness::checks::pipeline_grad_check(&cfg, 6, 1e-5).unwrap();
        assert_eq!(report.entries_checked, init_model(&cfg).unwrap().numel());
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
