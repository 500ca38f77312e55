//! Dual-stream transformer block: self-attention on each stream,
//! cross-attention between them, gated fusion
//! `z = ω₃·z'_img + ω₄·z'_depth + (1 − ω₃ − ω₄)·z_c`, layer norm and a GELU MLP.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// How the fusion triple is produced from its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Three logits through a softmax, so the weights are positive and
    /// the convex form is always well defined.
    Normalized,
    /// `ω₃, ω₄` are unconstrained scalars.
    Raw,
}

/// Which stream supplies the cross-attention queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossDirection {
    ImageQueries,
    DepthQueries,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub depth_stream: bool,
    pub fusion: FusionMode,
    pub cross: CrossDirection,
    pub residual: bool,
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn desk(d_model: usize) -> Self {
        EncoderConfig {
            d_model,
            heads: 4,
            mlp_hidden: 4 * d_model,
            blocks: 1,
            depth_stream: true,
            fusion: FusionMode::Normalized,
            cross: CrossDirection::ImageQueries,
            residual: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by head count {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder needs at least one block and a hidden layer".into()));
        }
        Ok(())
    }
}

/// Projection matrices of one attention layer (`d×d` each, no biases).
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionParams {
    fn bind(bound: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        Ok(AttentionParams {
            wq: bound.get(&format!("{prefix}.wq"))?,
            wk: bound.get(&format!("{prefix}.wk"))?,
            wv: bound.get(&format!("{prefix}.wv"))?,
            wo: bound.get(&format!("{prefix}.wo"))?,
            heads,
        })
    }
}

/// Attention output plus the per-head row-stochastic weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention with queries from `queries` and
/// keys/values from `keys_values`. The residual, when enabled, is added to
/// the query stream.
pub fn attend(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    p: &AttentionParams,
    residual: bool,
) -> Result<AttentionOutput> {
    let d = g.shape(p.wq)[0];
    let (qs, ks) = (g.shape(queries).to_vec(), g.shape(keys_values).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d {
        return Err(Error::dim("attention", &qs, &ks));
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {} heads", p.heads)));
    }
    let dh = d / p.heads;
    let q = g.matmul(queries, p.wq)?;
    let k = g.matmul(keys_values, p.wk)?;
    let v = g.matmul(keys_values, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let mut out = g.matmul(cat, p.wo)?;
    if residual {
        out = g.add(out, queries)?;
    }
    Ok(AttentionOutput { out, weights })
}

pub fn self_attention(g: &mut Graph, tokens: Var, p: &AttentionParams, residual: bool) -> Result<Var> {
    Ok(attend(g, tokens, tokens, p, residual)?.out)
}

pub fn cross_attention(g: &mut Graph, queries: Var, keys_values: Var, p: &AttentionParams, residual: bool) -> Result<Var> {
    Ok(attend(g, queries, keys_values, p, residual)?.out)
}

/// Learnable fusion parameters: 3 logits (normalized) or 2 raw scalars.
#[derive(Debug, Clone, Copy)]
pub struct FusionGates {
    pub params: Var,
    pub mode: FusionMode,
}

/// Plain-number fusion weights `(ω₃, ω₄, 1 − ω₃ − ω₄)`.
///
/// In normalized mode `ω₅ = softmax(l)₂` and `1 − ω₅` is split between
/// `ω₃, ω₄` in the ratio `e^l₀ : e^l₁`. The larger share is computed by
/// multiplication and the smaller by an exact subtraction, so every entry is
/// non-negative and `(ω₃ + ω₄) + ω₅` rounds to exactly 1.
pub fn fusion_weights(params: &[f64], mode: FusionMode) -> Result<[f64; 3]> {
    match (mode, params.len()) {
        (FusionMode::Normalized, 3) => {
            let w5 = crate::numerics::softmax_rows(params, 3)[2];
            let rest = 1.0 - w5;
            let ratio = crate::numerics::softmax_rows(&params[..2], 2);
            let big = usize::from(params[1] > params[0]);
            let mut w = [0.0; 2];
            w[big] = rest * ratio[big];
            w[1 - big] = rest - w[big];
            Ok([w[0], w[1], w5])
        }
        (FusionMode::Raw, 2) => Ok([params[0], params[1], 1.0 - (params[0] + params[1])]),
        _ => Err(Error::dim("fusion_weights", &[params.len()], &[3])),
    }
}

impl FusionGates {
    /// Graph nodes for `(ω₃, ω₄, 1 − ω₃ − ω₄)`, built the same way as
    /// [`fusion_weights`].
    pub fn weights(&self, g: &mut Graph) -> Result<[Var; 3]> {
        match self.mode {
            FusionMode::Normalized => {
                if g.value(self.params).numel() != 3 {
                    return Err(Error::dim("fusion gates", g.shape(self.params), &[3]));
                }
                let sm = g.softmax(self.params)?;
                let w5 = g.gather(sm, vec![2], &[1])?;
                let neg = g.scale(w5, -1.0)?;
                let rest = g.shift(neg, 1.0)?;
                let pair = g.gather(self.params, vec![0, 1], &[2])?;
                let ratio = g.softmax(pair)?;
                let l = g.data(self.params);
                let big = usize::from(l[1] > l[0]);
                let r_big = g.gather(ratio, vec![big], &[1])?;
                let w_big = g.mul(rest, r_big)?;
                let w_small = g.sub(rest, w_big)?;
                Ok(if big == 0 { [w_big, w_small, w5] } else { [w_small, w_big, w5] })
            }
            FusionMode::Raw => {
                if g.value(self.params).numel() != 2 {
                    return Err(Error::dim("fusion gates", g.shape(self.params), &[2]));
                }
                let w3 = g.gather(self.params, vec![0], &[1])?;
                let w4 = g.gather(self.params, vec![1], &[1])?;
                let s = g.add(w3, w4)?;
                let neg = g.scale(s, -1.0)?;
                let w5 = g.shift(neg, 1.0)?;
                Ok([w3, w4, w5])
            }
        }
    }
}

pub fn gated_fusion(g: &mut Graph, z_img: Var, z_depth: Var, z_cross: Var, gates: &FusionGates) -> Result<Var> {
    let s = g.shape(z_img).to_vec();
    for other in [z_depth, z_cross] {
        if g.shape(other) != s.as_slice() {
            return Err(Error::dim("gated_fusion", &s, g.shape(other)));
        }
    }
    let [w3, w4, w5] = gates.weights(g)?;
    let a = g.scale_by(w3, z_img)?;
    let b = g.scale_by(w4, z_depth)?;
    let c = g.scale_by(w5, z_cross)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Bound parameters of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub sa_image: AttentionParams,
    pub sa_depth: AttentionParams,
    pub cross: AttentionParams,
    pub gates: FusionGates,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub config: EncoderConfig,
}

fn block_prefix(b: usize) -> String {
    format!("encoder.{b}")
}

impl EncoderParams {
    pub fn bind(bound: &Bound, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let p = block_prefix(b);
                Ok(BlockParams {
                    sa_image: AttentionParams::bind(bound, &format!("{p}.sa_image"), cfg.heads)?,
                    sa_depth: AttentionParams::bind(bound, &format!("{p}.sa_depth"), cfg.heads)?,
                    cross: AttentionParams::bind(bound, &format!("{p}.cross"), cfg.heads)?,
                    gates: FusionGates {
                        params: bound.get(&format!("{p}.gates"))?,
                        mode: cfg.fusion,
                    },
                    ln_gamma: bound.get(&format!("{p}.ln.gamma"))?,
                    ln_beta: bound.get(&format!("{p}.ln.beta"))?,
                    mlp_w1: bound.get(&format!("{p}.mlp.w1"))?,
                    mlp_b1: bound.get(&format!("{p}.mlp.b1"))?,
                    mlp_w2: bound.get(&format!("{p}.mlp.w2"))?,
                    mlp_b2: bound.get(&format!("{p}.mlp.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams { blocks, config: *cfg })
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    for b in 0..cfg.blocks {
        let p = block_prefix(b);
        for layer in ["sa_image", "sa_depth", "cross"] {
            for m in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("{p}.{layer}.{m}"), Tensor::randn(&[d, d], std, rng));
            }
        }
        let gates = match cfg.fusion {
            FusionMode::Normalized => Tensor::zeros(&[3]),
            FusionMode::Raw => Tensor::filled(&[2], 1.0 / 3.0),
        };
        store.insert(format!("{p}.gates"), gates);
        store.insert(format!("{p}.ln.gamma"), Tensor::filled(&[d], 1.0));
        store.insert(format!("{p}.ln.beta"), Tensor::zeros(&[d]));
        store.insert(format!("{p}.mlp.w1"), Tensor::randn(&[d, cfg.mlp_hidden], std, rng));
        store.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[cfg.mlp_hidden]));
        store.insert(
            format!("{p}.mlp.w2"),
            Tensor::randn(&[cfg.mlp_hidden, d], 1.0 / (cfg.mlp_hidden as f64).sqrt(), rng),
        );
        store.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
    }
    Ok(())
}

fn norm_mlp(g: &mut Graph, x: Var, p: &BlockParams, eps: f64) -> Result<Var> {
    let n = g.layer_norm(x, p.ln_gamma, p.ln_beta, eps)?;
    let h = g.linear(n, p.mlp_w1, p.mlp_b1)?;
    let h = g.gelu(h)?;
    g.linear(h, p.mlp_w2, p.mlp_b2)
}

/// Runs every block. With `z_depth = None` (or the depth stream disabled in
/// the config) each block reduces to image self-attention followed by the
/// same norm and MLP.
pub fn encoder_forward(g: &mut Graph, z_img: Var, z_depth: Option<Var>, params: &EncoderParams) -> Result<Var> {
    let cfg = &params.config;
    let mut img = z_img;
    let mut depth = if cfg.depth_stream { z_depth } else { None };
    if let Some(dv) = depth {
        if g.shape(dv) != g.shape(img) {
            return Err(Error::dim("encoder streams", g.shape(img), g.shape(dv)));
        }
    }
    for block in &params.blocks {
        let img_sa = self_attention(g, img, &block.sa_image, cfg.residual)?;
        let fused = match depth {
            Some(dv) => {
                let depth_sa = self_attention(g, dv, &block.sa_depth, cfg.residual)?;
                let z_c = match cfg.cross {
                    CrossDirection::ImageQueries => cross_attention(g, img_sa, depth_sa, &block.cross, cfg.residual)?,
                    CrossDirection::DepthQueries => cross_attention(g, depth_sa, img_sa, &block.cross, cfg.residual)?,
                };
                depth = Some(depth_sa);
                gated_fusion(g, img_sa, depth_sa, z_c, &block.gates)?
            }
            None => img_sa,
        };
        img = norm_mlp(g, fused, block, cfg.ln_eps)?;
    }
    Ok(img)
}
