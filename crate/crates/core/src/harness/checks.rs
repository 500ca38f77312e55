//! Self-check suites behind the `flowcheck` and `gradcheck` commands.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{FlowConfig, FlowModel, init_params};
use crate::numerics::{GradCheckReport, Graph, Tensor};
use crate::params::{ParamStore, grad_check_params};

use super::config::TrainConfig;
use super::model::{Model, Mode, init_model, step_rng};
use super::synth::synth_scene;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub pass: bool,
    pub elapsed: Duration,
}

pub struct CheckTable(pub Vec<CheckRow>);

impl CheckTable {
    pub fn all_pass(&self) -> bool {
        self.0.iter().all(|r| r.pass)
    }
}

impl fmt::Display for CheckTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>14} {:>16} {:>9} {:>6}", "check", "value", "limit", "seconds", "result")?;
        for r in &self.0 {
            writeln!(
                f,
                "{:<28} {:>14.3e} {:>16} {:>9.2} {:>6}",
                r.name,
                r.value,
                r.limit,
                r.elapsed.as_secs_f64(),
                if r.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Randomly initialized flow whose coupling outputs are drawn with std
/// `out_std`, bound as constants in `g`.
pub fn random_flow(g: &mut Graph, cfg: &FlowConfig, seed: u64) -> Result<FlowModel> {
    let mut store = ParamStore::new();
    init_params(&mut store, "flow", cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let bound = store.bind_frozen(g);
    FlowModel::bind(&bound, "flow", cfg)
}

fn test_flow(dim: usize, layers: usize, hidden: usize, out_std: f64) -> FlowConfig {
    FlowConfig {
        dim,
        layers,
        hidden,
        scale_bound: 4.0,
        output_init_std: out_std,
    }
}

/// Largest `‖f⁻¹(f(x)) − x‖∞` and `‖f(f⁻¹(x)) − x‖∞` over `count` standard
/// normal points.
pub fn flow_round_trip(dim: usize, count: usize, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let flow = random_flow(&mut g, &test_flow(dim, 6, 64, 0.1), seed)?;
    let x = Tensor::randn(&[count, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let xv = g.constant(x.clone());
    let (y, _) = flow.forward(&mut g, xv)?;
    let (back, _) = flow.inverse(&mut g, y)?;
    let (z, _) = flow.inverse(&mut g, xv)?;
    let (again, _) = flow.forward(&mut g, z)?;
    Ok(g.value(back).max_abs_diff(&x).max(g.value(again).max_abs_diff(&x)))
}

/// Largest relative gap between each coupling layer's analytic log-det
/// and `log|det J|` of its central-difference Jacobian, over `layers`
/// random layers of width `dim`.
pub fn coupling_log_det(dim: usize, layers: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for k in 0..layers as u64 {
        let mut g = Graph::new();
        let flow = random_flow(&mut g, &test_flow(dim, 2, 16, 0.4), seed + 7 * k)?;
        let layer = &flow.layers[(k % 2) as usize];
        let x = Tensor::randn(&[1, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7 * k + 3));
        let xv = g.constant(x.clone());
        let (_, ld) = layer.forward(&mut g, xv)?;
        let analytic = g.item(ld);
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for j in 0..dim {
            let mut col = [vec![], vec![]];
            for (slot, delta) in col.iter_mut().zip([h, -h]) {
                let mut p = x.clone();
                p.data_mut()[j] += delta;
                let pv = g.constant(p);
                let (y, _) = layer.forward(&mut g, pv)?;
                *slot = g.data(y).to_vec();
            }
            for i in 0..dim {
                jac[(i, j)] = (col[0][i] - col[1][i]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Midpoint-rule mass of a random 2-D flow density on `n×n` cells over
/// `[−8, 8]²`.
pub fn flow_density_mass(n: usize, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let flow = random_flow(&mut g, &test_flow(2, 2, 64, 0.05), seed)?;
    let step = 16.0 / n as f64;
    let pts: Vec<f64> = (0..n * n)
        .flat_map(|k| [-8.0 + ((k / n) as f64 + 0.5) * step, -8.0 + ((k % n) as f64 + 0.5) * step])
        .collect();
    let x = g.constant(Tensor::new(&[n * n, 2], pts)?);
    let ld = flow.log_density(&mut g, x)?;
    Ok(g.data(ld).iter().map(|v| v.exp()).sum::<f64>() * step * step)
}

fn timed(name: &str, limit: &str, f: impl FnOnce() -> Result<(f64, bool)>) -> Result<CheckRow> {
    let start = Instant::now();
    let (value, pass) = f()?;
    Ok(CheckRow {
        name: name.into(),
        value,
        limit: limit.into(),
        pass,
        elapsed: start.elapsed(),
    })
}

/// Invertibility, log-determinant and normalization checks.
pub fn flow_suite() -> Result<CheckTable> {
    let mut rows = vec![timed("round trip (d=16, n=100)", "< 1e-9", || {
        let e = flow_round_trip(16, 100, 1)?;
        Ok((e, e < 1e-9))
    })?];
    for d in [2, 4, 6] {
        rows.push(timed(&format!("log-det vs FD Jacobian d={d}"), "rel < 1e-5", || {
            let e = coupling_log_det(d, 20, 100 + d as u64)?;
            Ok((e, e < 1e-5))
        })?);
    }
    rows.push(timed("density mass 400×400", "|m − 1| < 0.01", || {
        let m = flow_density_mass(400, 11)?;
        Ok((m, (m - 1.0).abs() < 0.01))
    })?);
    Ok(CheckTable(rows))
}

/// Central-difference check of the total loss with respect to every
/// parameter, on one scene, in training mode with fixed masking and dropout.
///
/// Parameters are the seeded init plus `N(0, 0.05²)` noise, so that layers
/// initialized to zero (regressor and coupling outputs) do not hide the
/// gradients of everything upstream of them.
pub fn pipeline_grad_check(cfg: &TrainConfig, scene_seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut store = init_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    for (_, t) in store.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(w, n)| *w += n);
    }
    let scene = synth_scene(scene_seed, &cfg.synth())?;
    grad_check_params(
        &store,
        |g, b| {
            let model = Model::bind(g, b, cfg)?;
            let mut rng = step_rng(cfg.seed, 1);
            Ok(model.forward(g, &scene, Mode::Train(&mut rng))?.total)
        },
        eps,
    )
}
