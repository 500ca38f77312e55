//! Affine-coupling normalizing flow over standardized residuals and the
//! residual log-likelihood loss built on it.
//!
//! The flow `f` maps base samples `z ~ N(0, I)` to residuals `x̂ = f(z)`.
//! Each coupling layer copies one half of the coordinates and transforms the
//! other half with `y = x·exp(s(x_c)) + t(x_c)`, where `s = bound·tanh(·)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub scale_bound: f64,
    /// Std of the coupling nets' output layers at init; 0 gives the identity.
    pub output_init_std: f64,
}

impl FlowConfig {
    pub fn desk(dim: usize) -> Self {
        FlowConfig {
            dim,
            layers: 6,
            hidden: 64,
            scale_bound: 4.0,
            output_init_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        if self.layers > 0 && self.dim < 2 {
            return Err(Error::Config(format!(
                "coupling layers need dimension ≥ 2, got {}",
                self.dim
            )));
        }
        if self.layers > 0 && self.hidden == 0 {
            return Err(Error::Config("coupling nets need a hidden width".into()));
        }
        Ok(())
    }
}

/// Copied (`cond`) and transformed (`trans`) coordinates of layer `k`.
/// Even layers condition on the first half, odd layers on the second.
pub fn layer_mask(dim: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let half = dim / 2;
    let (first, second): (Vec<usize>, Vec<usize>) = ((0..half).collect(), (half..dim).collect());
    if k % 2 == 0 {
        (first, second)
    } else {
        (second, first)
    }
}

fn net_prefix(prefix: &str, k: usize, net: &str) -> String {
    format!("{prefix}.{k}.{net}")
}

pub fn init_params<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for k in 0..cfg.layers {
        let (cond, trans) = layer_mask(cfg.dim, k);
        for net in ["s", "t"] {
            let p = net_prefix(prefix, k, net);
            let h = cfg.hidden;
            store.insert(format!("{p}.w1"), Tensor::randn(&[cond.len(), h], 1.0 / (cond.len() as f64).sqrt(), rng));
            store.insert(format!("{p}.b1"), Tensor::zeros(&[h]));
            store.insert(format!("{p}.w2"), Tensor::randn(&[h, h], 1.0 / (h as f64).sqrt(), rng));
            store.insert(format!("{p}.b2"), Tensor::zeros(&[h]));
            let out = if cfg.output_init_std > 0.0 {
                Tensor::randn(&[h, trans.len()], cfg.output_init_std, rng)
            } else {
                Tensor::zeros(&[h, trans.len()])
            };
            store.insert(format!("{p}.w3"), out);
            let bias = if cfg.output_init_std > 0.0 {
                Tensor::randn(&[trans.len()], cfg.output_init_std, rng)
            } else {
                Tensor::zeros(&[trans.len()])
            };
            store.insert(format!("{p}.b3"), bias);
        }
    }
    Ok(())
}

/// Two tanh hidden layers and a linear output.
#[derive(Debug, Clone, Copy)]
pub struct CouplingNet {
    w: [Var; 3],
    b: [Var; 3],
}

impl CouplingNet {
    fn bind(bound: &Bound, p: &str) -> Result<Self> {
        Ok(CouplingNet {
            w: [bound.get(&format!("{p}.w1"))?, bound.get(&format!("{p}.w2"))?, bound.get(&format!("{p}.w3"))?],
            b: [bound.get(&format!("{p}.b1"))?, bound.get(&format!("{p}.b2"))?, bound.get(&format!("{p}.b3"))?],
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w[0], self.b[0])?;
        let h = g.tanh(h)?;
        let h = g.linear(h, self.w[1], self.b[1])?;
        let h = g.tanh(h)?;
        g.linear(h, self.w[2], self.b[2])
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub cond: Vec<usize>,
    pub trans: Vec<usize>,
    pub scale_net: CouplingNet,
    pub translate_net: CouplingNet,
    pub scale_bound: f64,
}

fn gather_cols(g: &mut Graph, x: Var, cols: &[usize]) -> Result<Var> {
    let (rows, d) = (g.shape(x)[0], g.shape(x)[1]);
    let idx = (0..rows).flat_map(|r| cols.iter().map(move |&c| r * d + c)).collect();
    g.gather(x, idx, &[rows, cols.len()])
}

/// Row sums of a `rows×cols` matrix as `rows×1`.
fn row_sums(g: &mut Graph, x: Var) -> Result<Var> {
    let cols = g.shape(x)[1];
    let ones = g.constant(Tensor::filled(&[cols, 1], 1.0));
    g.matmul(x, ones)
}

impl CouplingLayer {
    fn scale_shift(&self, g: &mut Graph, cond: Var) -> Result<(Var, Var)> {
        let raw = self.scale_net.forward(g, cond)?;
        let s = g.tanh(raw)?;
        let s = g.scale(s, self.scale_bound)?;
        let t = self.translate_net.forward(g, cond)?;
        Ok((s, t))
    }

    /// Scatters `[cond | trans]` columns back into original coordinate order.
    fn reassemble(&self, g: &mut Graph, cond: Var, trans: Var) -> Result<Var> {
        let rows = g.shape(cond)[0];
        let d = self.cond.len() + self.trans.len();
        let cat = g.concat_cols(&[cond, trans])?;
        let mut src_col = vec![0; d];
        for (i, &c) in self.cond.iter().chain(&self.trans).enumerate() {
            src_col[c] = i;
        }
        let idx = (0..rows).flat_map(|r| src_col.iter().map(move |&s| r * d + s)).collect();
        g.gather(cat, idx, &[rows, d])
    }

    /// Row-wise `y` and `log|det ∂y/∂x| = Σ s` (shape `rows×1`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let xc = gather_cols(g, x, &self.cond)?;
        let xt = gather_cols(g, x, &self.trans)?;
        let (s, t) = self.scale_shift(g, xc)?;
        let es = g.exp(s)?;
        let yt = g.mul(xt, es)?;
        let yt = g.add(yt, t)?;
        let y = self.reassemble(g, xc, yt)?;
        let logdet = row_sums(g, s)?;
        Ok((y, logdet))
    }

    /// Row-wise `x` and `log|det ∂x/∂y| = −Σ s`.
    pub fn inverse(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        let yc = gather_cols(g, y, &self.cond)?;
        let yt = gather_cols(g, y, &self.trans)?;
        let (s, t) = self.scale_shift(g, yc)?;
        let neg_s = g.scale(s, -1.0)?;
        let e = g.exp(neg_s)?;
        let diff = g.sub(yt, t)?;
        let xt = g.mul(diff, e)?;
        let x = self.reassemble(g, yc, xt)?;
        let logdet = row_sums(g, neg_s)?;
        Ok((x, logdet))
    }
}

/// Bound flow: ordered coupling layers over a standard-normal base.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub layers: Vec<CouplingLayer>,
    pub dim: usize,
}

impl FlowModel {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|k| {
                let (cond, trans) = layer_mask(cfg.dim, k);
                Ok(CouplingLayer {
                    cond,
                    trans,
                    scale_net: CouplingNet::bind(bound, &net_prefix(prefix, k, "s"))?,
                    translate_net: CouplingNet::bind(bound, &net_prefix(prefix, k, "t"))?,
                    scale_bound: cfg.scale_bound,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FlowModel { layers, dim: cfg.dim })
    }

    fn check_width(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim("flow input", s, &[0, self.dim]));
        }
        Ok(())
    }

    /// `x̂ = f(z)` row-wise, with accumulated forward log-determinants.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Option<Var>)> {
        self.check_width(g, z)?;
        let mut x = z;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (y, ld) = layer.forward(g, x)?;
            x = y;
            total = Some(match total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        Ok((x, total))
    }

    /// `z = f⁻¹(x̂)` row-wise, with accumulated inverse log-determinants.
    pub fn inverse(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_width(g, x)?;
        let mut z = x;
        let mut total: Option<Var> = None;
        for layer in self.layers.iter().rev() {
            let (y, ld) = layer.inverse(g, z)?;
            z = y;
            total = Some(match total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        Ok((z, total))
    }

    /// `log G(x̄) = log N(f⁻¹(x̄); 0, I) + log|det ∂f⁻¹/∂x̄|`, one row per input row.
    pub fn log_density(&self, g: &mut Graph, x_bar: Var) -> Result<Var> {
        let (z, logdet) = self.inverse(g, x_bar)?;
        let log_q = standard_normal_log_density(g, z)?;
        match logdet {
            Some(ld) => g.add(log_q, ld),
            None => Ok(log_q),
        }
    }
}

/// Row-wise `log N(z; 0, I) = −½‖z‖² − (d/2)·ln 2π`.
pub fn standard_normal_log_density(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g.shape(z)[1];
    let sq = g.square(z)?;
    let ss = row_sums(g, sq)?;
    let half = g.scale(ss, -0.5)?;
    g.shift(half, -0.5 * d as f64 * LN_2PI)
}

pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e3;

/// Predicted Gaussian that standardizes ground-truth residuals as
/// `(μ_g − μ)/σ`. Both fields are `V×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStandardization {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl ResidualStandardization {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::dim("standardization", mu.shape(), sigma.shape()));
        }
        if let Some(s) = sigma.data().iter().find(|s| !(SIGMA_MIN..=SIGMA_MAX).contains(*s)) {
            return Err(Error::Domain(format!("sigma {s} outside [{SIGMA_MIN}, {SIGMA_MAX}]")));
        }
        Ok(ResidualStandardization { mu, sigma })
    }
}

/// Residual log-likelihood loss without the constant `−log c`:
/// `−log Q(μ̄) − log G(μ̄) + Σ log σ`, with `μ̄ = (μ_g − μ)/σ` flattened to
/// one row of the flow dimension.
pub fn rle_loss(g: &mut Graph, mu: Var, sigma: Var, mu_g: Var, flow: &FlowModel) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    for v in [sigma, mu_g] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::dim("rle_loss", &shape, g.shape(v)));
        }
    }
    if g.data(sigma).iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("rle_loss requires positive sigma".into()));
    }
    let numel: usize = shape.iter().product();
    if numel != flow.dim {
        return Err(Error::dim("rle_loss flow dimension", &shape, &[flow.dim]));
    }
    let resid = g.sub(mu_g, mu)?;
    let mubar = g.div(resid, sigma)?;
    let mubar = g.reshape(mubar, &[1, numel])?;
    let log_q = standard_normal_log_density(g, mubar)?;
    let log_g = flow.log_density(g, mubar)?;
    let log_sigma = g.log(sigma)?;
    let sum_log_sigma = g.sum(log_sigma)?;
    let both = g.add(log_q, log_g)?;
    let both = g.reshape(both, &[1])?;
    g.sub(sum_log_sigma, both)
}

/// Draws `count` samples `x = f(z)·σ + μ` with `z ~ N(0, I)`, deterministic
/// in `seed`. `mu` and `sigma` are flattened to the flow dimension. The flow
/// parameters must be bound in `g`.
pub fn flow_sample(
    g: &mut Graph,
    flow: &FlowModel,
    std: &ResidualStandardization,
    count: usize,
    seed: u64,
) -> Result<Tensor> {
    let (mu, sigma) = (&std.mu, &std.sigma);
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let d = flow.dim;
    if mu.numel() != d || sigma.numel() != d {
        return Err(Error::dim("flow_sample", mu.shape(), &[d]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..count * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = g.constant(Tensor::new(&[count, d], base)?);
    let (x_hat, _) = flow.forward(g, z)?;
    let out = g
        .data(x_hat)
        .iter()
        .enumerate()
        .map(|(i, v)| v * sigma.data()[i % d] + mu.data()[i % d])
        .collect();
    Tensor::new(&[count, d], out)
}

/// Splits `log P` into `[log Q, log(P/(c·Q)), log c]`; the three terms sum
/// back to `log P`.
pub fn decompose_log_density(p: f64, q: f64, c: f64) -> Result<[f64; 3]> {
    if !(p > 0.0 && q > 0.0 && c > 0.0) {
        return Err(Error::Domain("densities and c must be positive".into()));
    }
    Ok([q.ln(), (p / (c * q)).ln(), c.ln()])
}
