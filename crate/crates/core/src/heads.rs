//! Output heads: the mesh regressor, coarse-to-full upsampler, silhouette
//! decoder, and random token masking.

use rand::Rng;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::flow::{SIGMA_MAX, SIGMA_MIN};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub d_model: usize,
    pub hidden: usize,
    pub v_coarse: usize,
    pub v_full: usize,
    /// Std of the regressor's output layer at init; 0 predicts the zero mesh.
    pub output_init_std: f64,
}

impl HeadConfig {
    pub fn desk(d_model: usize) -> Self {
        HeadConfig {
            d_model,
            hidden: 128,
            v_coarse: 20,
            v_full: 100,
            output_init_std: 0.0,
        }
    }

    /// Regressor output width `2·V·3 + 3`.
    pub fn outputs(&self) -> usize {
        6 * self.v_coarse + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden == 0 || self.v_coarse == 0 || self.v_full == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d, h, o) = (cfg.d_model, cfg.hidden, cfg.outputs());
    store.insert("head.w1", Tensor::randn(&[d, h], 1.0 / (d as f64).sqrt(), rng));
    store.insert("head.b1", Tensor::zeros(&[h]));
    let w2 = if cfg.output_init_std > 0.0 {
        Tensor::randn(&[h, o], cfg.output_init_std, rng)
    } else {
        Tensor::zeros(&[h, o])
    };
    store.insert("head.w2", w2);
    store.insert("head.b2", Tensor::zeros(&[o]));
    store.insert(
        "upsample.u",
        Tensor::filled(&[cfg.v_full, cfg.v_coarse], 1.0 / cfg.v_coarse as f64),
    );
    store.insert("upsample.bias", Tensor::zeros(&[cfg.v_full, 3]));
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct RegressorParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub v_coarse: usize,
}

impl RegressorParams {
    pub fn bind(bound: &Bound, cfg: &HeadConfig) -> Result<Self> {
        Ok(RegressorParams {
            w1: bound.get("head.w1")?,
            b1: bound.get("head.b1")?,
            w2: bound.get("head.w2")?,
            b2: bound.get("head.b2")?,
            v_coarse: cfg.v_coarse,
        })
    }
}

/// Mesh mean and spread (`V×3` each) plus weak-perspective camera `1×3`
/// laid out as `(s, t_x, t_y)`.
#[derive(Debug, Clone, Copy)]
pub struct MeshPrediction {
    pub mu: Var,
    pub sigma: Var,
    pub camera: Var,
}

/// Mean-pools tokens and regresses `[μ | raw σ | raw s, t_x, t_y]` with a
/// GELU MLP. `σ = clamp(exp(raw), 1e-6, 1e3)` and `s = exp(raw)`.
pub fn regress_mesh(g: &mut Graph, z: Var, p: &RegressorParams) -> Result<MeshPrediction> {
    let v3 = 3 * p.v_coarse;
    let pooled = g.mean_rows(z)?;
    let h = g.linear(pooled, p.w1, p.b1)?;
    let h = g.gelu(h)?;
    let out = g.linear(h, p.w2, p.b2)?;
    if g.shape(out)[1] != 2 * v3 + 3 {
        return Err(Error::dim("regress_mesh", g.shape(out), &[1, 2 * v3 + 3]));
    }
    let mu = g.slice_cols(out, 0, v3)?;
    let mu = g.reshape(mu, &[p.v_coarse, 3])?;
    let raw_sigma = g.slice_cols(out, v3, v3)?;
    let sigma = g.exp(raw_sigma)?;
    let sigma = g.clamp(sigma, SIGMA_MIN, SIGMA_MAX)?;
    let sigma = g.reshape(sigma, &[p.v_coarse, 3])?;
    let raw_s = g.slice_cols(out, 2 * v3, 1)?;
    let s = g.exp(raw_s)?;
    let t = g.slice_cols(out, 2 * v3 + 1, 2)?;
    let camera = g.concat_cols(&[s, t])?;
    Ok(MeshPrediction { mu, sigma, camera })
}

/// `U·coarse + bias` with `U: V_full×V_coarse` and `bias: V_full×3`.
pub fn upsample_mesh(g: &mut Graph, coarse: Var, u: Var, bias: Var) -> Result<Var> {
    if g.shape(bias) != [g.shape(u)[0], 3] {
        return Err(Error::dim("upsample bias", g.shape(bias), &[g.shape(u)[0], 3]));
    }
    let full = g.matmul(u, coarse)?;
    g.add(full, bias)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilhouetteConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub channels: [usize; 2],
    pub dropout: f64,
}

impl SilhouetteConfig {
    pub fn desk(height: usize, width: usize, patch: usize, d_model: usize) -> Self {
        SilhouetteConfig {
            height,
            width,
            patch,
            d_model,
            channels: [16, 8],
            dropout: 0.1,
        }
    }

    /// Two stride-2 stages restore full resolution only from 4×4 patches.
    pub fn validate(&self) -> Result<()> {
        if self.patch != 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "silhouette decoder needs patch 4 on a grid divisible by 4, got patch {} on {}×{}",
                self.patch, self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub fn init_silhouette_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &SilhouetteConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let [c1, c2] = cfg.channels;
    for (name, cin, cout) in [("t1", cfg.d_model, c1), ("t2", c1, c2)] {
        store.insert(
            format!("silhouette.{name}.w"),
            Tensor::randn(&[cin, 4 * cout], (2.0 / cin as f64).sqrt(), rng),
        );
        store.insert(format!("silhouette.{name}.b"), Tensor::zeros(&[cout]));
    }
    store.insert("silhouette.fc.w", Tensor::randn(&[c2, 1], 1.0 / (c2 as f64).sqrt(), rng));
    store.insert("silhouette.fc.b", Tensor::zeros(&[1]));
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SilhouetteParams {
    pub t1: (Var, Var),
    pub t2: (Var, Var),
    pub fc: (Var, Var),
}

impl SilhouetteParams {
    pub fn bind(bound: &Bound) -> Result<Self> {
        let pair = |n: &str| -> Result<(Var, Var)> {
            Ok((bound.get(&format!("silhouette.{n}.w"))?, bound.get(&format!("silhouette.{n}.b"))?))
        };
        Ok(SilhouetteParams {
            t1: pair("t1")?,
            t2: pair("t2")?,
            fc: pair("fc")?,
        })
    }
}

/// Kernel-2 stride-2 transposed convolution on an `h×w` pixel grid stored as
/// `(h·w)×C_in` rows. `w` is `C_in × (4·C_out)` with kernel offset `(a, b)`
/// in column block `2a + b`; output is `(2h·2w)×C_out`.
pub fn conv_transpose2x2(g: &mut Graph, x: Var, h: usize, w: usize, weight: Var, bias: Var) -> Result<Var> {
    if g.shape(x)[0] != h * w {
        return Err(Error::dim("conv_transpose2x2", g.shape(x), &[h * w, 0]));
    }
    let blocks = g.matmul(x, weight)?;
    let cols = g.shape(blocks)[1];
    let c = cols / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xx in 0..ow {
            let src = (y / 2) * w + xx / 2;
            let block = (y % 2) * 2 + xx % 2;
            idx.extend((0..c).map(|ch| src * cols + block * c + ch));
        }
    }
    let shuffled = g.gather(blocks, idx, &[oh * ow, c])?;
    g.add_row(shuffled, bias)
}

/// Inverted dropout: keeps each entry with probability `1 − p` and rescales
/// by `1/(1 − p)`.
fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, m)
}

/// Decodes tokens (patch grid, row-major) to an `H×W` silhouette in `(0,1)`.
/// Dropout is applied after each ReLU only when `train_rng` is given.
pub fn decode_silhouette<R: Rng + ?Sized>(
    g: &mut Graph,
    z: Var,
    p: &SilhouetteParams,
    cfg: &SilhouetteConfig,
    mut train_rng: Option<&mut R>,
) -> Result<Var> {
    cfg.validate()?;
    let (gh, gw) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    if g.shape(z) != [gh * gw, cfg.d_model] {
        return Err(Error::Config(format!(
            "silhouette decoder expects {}×{} tokens, got {:?}",
            gh * gw,
            cfg.d_model,
            g.shape(z)
        )));
    }
    let mut x = z;
    let (mut h, mut w) = (gh, gw);
    for (weight, bias) in [p.t1, p.t2] {
        x = conv_transpose2x2(g, x, h, w, weight, bias)?;
        x = g.relu(x)?;
        if let Some(rng) = train_rng.as_deref_mut() {
            x = dropout(g, x, cfg.dropout, rng)?;
        }
        h *= 2;
        w *= 2;
    }
    let logits = g.linear(x, p.fc.0, p.fc.1)?;
    let probs = g.sigmoid(logits)?;
    g.reshape(probs, &[cfg.height, cfg.width])
}

/// `⌈p·n⌉`, with a small tolerance so that products like `0.3·10` are not
/// rounded up by representation error.
pub fn mask_count(ratio: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// Samples `⌈p·n⌉` distinct positions uniformly, returned in ascending order.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    let k = mask_count(ratio, n)?;
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Replaces `⌈p·n⌉` random rows of `tokens` with the learnable `mask_token`
/// and returns the masked sequence with the chosen positions.
pub fn mask_tokens<R: Rng + ?Sized>(
    g: &mut Graph,
    tokens: Var,
    mask_token: Var,
    ratio: f64,
    rng: &mut R,
) -> Result<(Var, Vec<usize>)> {
    let n = g.shape(tokens)[0];
    let picked = sample_mask(n, ratio, rng)?;
    let mut rows = vec![false; n];
    picked.iter().for_each(|&i| rows[i] = true);
    let out = g.replace_rows(tokens, mask_token, rows)?;
    Ok((out, picked))
}

pub const MASK_TOKEN: &str = "mask_token";

pub fn init_mask_token<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, rng: &mut R) {
    store.insert(MASK_TOKEN, Tensor::randn(&[d_model], 0.02, rng));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check_params;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_head() -> HeadConfig {
        HeadConfig {
            d_model: 8,
            hidden: 6,
            v_coarse: 5,
            v_full: 9,
            output_init_std: 0.0,
        }
    }

    #[test]
    fn zero_regressor_gives_unit_spread_and_scale() {
        let cfg = small_head();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let p = RegressorParams::bind(&b, &cfg).unwrap();
        let z = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(2)));
        let m = regress_mesh(&mut g, z, &p).unwrap();
        assert_eq!(g.shape(m.mu), &[5, 3]);
        assert_eq!(g.shape(m.sigma), &[5, 3]);
        assert_eq!(g.shape(m.camera), &[1, 3]);
        assert!(g.data(m.mu).iter().all(|&v| v == 0.0));
        assert!(g.data(m.sigma).iter().all(|&v| v == 1.0));
        assert_eq!(g.data(m.camera), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn raw_sigma_of_ln_two_gives_two() {
        let cfg = small_head();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut rng(1)).unwrap();
        let mut bias = vec![0.0; cfg.outputs()];
        bias[15..30].iter_mut().for_each(|v| *v = std::f64::consts::LN_2);
        bias[30] = 0.5f64.ln();
        bias[31] = 0.25;
        store.insert("head.b2", Tensor::new(&[cfg.outputs()], bias).unwrap());
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let p = RegressorParams::bind(&b, &cfg).unwrap();
        let z = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(2)));
        let m = regress_mesh(&mut g, z, &p).unwrap();
        assert!(g.data(m.sigma).iter().all(|&v| v == 2.0));
        assert_eq!(g.data(m.camera), &[0.5, 0.25, 0.0]);
    }

    #[test]
    fn sigma_stays_in_clamp_range() {
        let cfg = HeadConfig {
            output_init_std: 40.0,
            ..small_head()
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut rng(3)).unwrap();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let p = RegressorParams::bind(&b, &cfg).unwrap();
        let z = g.constant(Tensor::randn(&[4, 8], 3.0, &mut rng(4)));
        let m = regress_mesh(&mut g, z, &p).unwrap();
        let s = g.data(m.sigma);
        assert!(s.iter().all(|v| (SIGMA_MIN..=SIGMA_MAX).contains(v)));
        assert!(s.contains(&SIGMA_MIN) || s.contains(&SIGMA_MAX));
    }

    #[test]
    fn regressor_gradients_reach_all_outputs() {
        let cfg = HeadConfig {
            output_init_std: 0.2,
            ..small_head()
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut rng(5)).unwrap();
        store.insert("z", Tensor::randn(&[4, 8], 1.0, &mut rng(6)));
        let mut r = rng(7);
        let wm = Tensor::randn(&[5, 3], 1.0, &mut r);
        let ws = Tensor::randn(&[5, 3], 1.0, &mut r);
        let wc = Tensor::randn(&[1, 3], 1.0, &mut r);
        let report = grad_check_params(
            &store,
            |g, b| {
                let p = RegressorParams::bind(b, &cfg)?;
                let m = regress_mesh(g, b.get("z")?, &p)?;
                let mut total = None;
                for (v, w) in [(m.mu, &wm), (m.sigma, &ws), (m.camera, &wc)] {
                    let w = g.constant(w.clone());
                    let t = g.mul(v, w)?;
                    let t = g.sum(t)?;
                    total = Some(match total {
                        Some(a) => g.add(a, t)?,
                        None => t,
                    });
                }
                Ok(total.unwrap())
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn upsample_selector_and_zero() {
        let mut g = Graph::new();
        let coarse_t = Tensor::randn(&[4, 3], 1.0, &mut rng(8));
        let coarse = g.constant(coarse_t.clone());
        let pick = [2, 0, 3, 3, 1, 2];
        let mut u = Tensor::zeros(&[6, 4]);
        for (r, &c) in pick.iter().enumerate() {
            u.data_mut()[r * 4 + c] = 1.0;
        }
        let u = g.constant(u);
        let bias = g.constant(Tensor::zeros(&[6, 3]));
        let full = upsample_mesh(&mut g, coarse, u, bias).unwrap();
        for (r, &c) in pick.iter().enumerate() {
            assert_eq!(g.value(full).row(r), coarse_t.row(c));
        }
        let zu = g.constant(Tensor::zeros(&[6, 4]));
        let zero = upsample_mesh(&mut g, coarse, zu, bias).unwrap();
        assert!(g.data(zero).iter().all(|&v| v == 0.0));
        let bad_bias = g.constant(Tensor::zeros(&[5, 3]));
        assert!(upsample_mesh(&mut g, coarse, u, bad_bias).is_err());
        let bad_coarse = g.constant(Tensor::zeros(&[5, 3]));
        assert!(upsample_mesh(&mut g, bad_coarse, u, bias).is_err());
    }

    #[test]
    fn full_scale_upsample_shape() {
        let mut r = rng(9);
        let mut g = Graph::new();
        let coarse = g.constant(Tensor::randn(&[431, 3], 1.0, &mut r));
        let u = g.constant(Tensor::randn(&[6890, 431], 1.0 / 431.0, &mut r));
        let bias = g.constant(Tensor::zeros(&[6890, 3]));
        let full = upsample_mesh(&mut g, coarse, u, bias).unwrap();
        assert_eq!(g.shape(full), &[6890, 3]);
    }

    fn conv_transpose_oracle(x: &Tensor, h: usize, w: usize, weight: &Tensor, bias: &[f64]) -> Vec<f64> {
        let cin = x.cols();
        let cout = bias.len();
        let mut out = vec![0.0; 4 * h * w * cout];
        for i in 0..h {
            for j in 0..w {
                for a in 0..2 {
                    for b in 0..2 {
                        let o = (2 * i + a) * (2 * w) + 2 * j + b;
                        for co in 0..cout {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                acc += x.at(i * w + j, ci) * weight.at(ci, (2 * a + b) * cout + co);
                            }
                            out[o * cout + co] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn transposed_convolution_matches_loops() {
        let mut r = rng(10);
        let (h, w, cin, cout) = (3, 2, 5, 4);
        let x = Tensor::randn(&[h * w, cin], 1.0, &mut r);
        let wt = Tensor::randn(&[cin, 4 * cout], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = conv_transpose2x2(&mut g, xv, h, w, wv, bv).unwrap();
        assert_eq!(g.shape(y), &[4 * h * w, cout]);
        let oracle = conv_transpose_oracle(&x, h, w, &wt, b.data());
        for (a, e) in g.data(y).iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn silhouette_setup(seed: u64) -> (ParamStore, SilhouetteConfig) {
        let cfg = SilhouetteConfig::desk(32, 32, 4, 16);
        let mut store = ParamStore::new();
        init_silhouette_params(&mut store, &cfg, &mut rng(seed)).unwrap();
        (store, cfg)
    }

    #[test]
    fn silhouette_shape_range_and_inference_determinism() {
        let (store, cfg) = silhouette_setup(11);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let p = SilhouetteParams::bind(&b).unwrap();
        let z = g.constant(Tensor::randn(&[64, 16], 1.0, &mut rng(12)));
        let a = decode_silhouette::<ChaCha8Rng>(&mut g, z, &p, &cfg, None).unwrap();
        let c = decode_silhouette::<ChaCha8Rng>(&mut g, z, &p, &cfg, None).unwrap();
        assert_eq!(g.shape(a), &[32, 32]);
        assert!(g.data(a).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(g.data(a).iter().zip(g.data(c)).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut r = rng(13);
        let t = decode_silhouette(&mut g, z, &p, &cfg, Some(&mut r)).unwrap();
        assert_ne!(g.data(t), g.data(a));
    }

    #[test]
    fn silhouette_rejects_mismatched_configuration() {
        let (store, mut cfg) = silhouette_setup(14);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let p = SilhouetteParams::bind(&b).unwrap();
        let z = g.constant(Tensor::zeros(&[63, 16]));
        let r = decode_silhouette::<ChaCha8Rng>(&mut g, z, &p, &cfg, None);
        assert!(matches!(r, Err(Error::Config(_))));
        cfg.patch = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn silhouette_gradients_with_fixed_dropout() {
        let cfg = SilhouetteConfig {
            channels: [3, 2],
            ..SilhouetteConfig::desk(8, 8, 4, 4)
        };
        let mut store = ParamStore::new();
        init_silhouette_params(&mut store, &cfg, &mut rng(15)).unwrap();
        store.insert("z", Tensor::randn(&[4, 4], 1.0, &mut rng(16)));
        let report = grad_check_params(
            &store,
            |g, b| {
                let p = SilhouetteParams::bind(b)?;
                let mut r = rng(17);
                let s = decode_silhouette(g, b.get("z")?, &p, &cfg, Some(&mut r))?;
                let l = g.log(s)?;
                g.mean(l)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(0.15, 64).unwrap(), 10);
        assert_eq!(mask_count(0.3, 10).unwrap(), 3);
        assert_eq!(mask_count(0.0, 64).unwrap(), 0);
        assert_eq!(mask_count(1.0, 64).unwrap(), 64);
        assert_eq!(mask_count(0.01, 64).unwrap(), 1);
        assert!(mask_count(1.5, 4).is_err());
    }

    #[test]
    fn masking_endpoints() {
        let mut g = Graph::new();
        let t = Tensor::randn(&[6, 4], 1.0, &mut rng(18));
        let tokens = g.constant(t.clone());
        let token = g.constant(Tensor::new(&[4], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let (out, idx) = mask_tokens(&mut g, tokens, token, 0.0, &mut rng(1)).unwrap();
        assert!(idx.is_empty());
        assert_eq!(g.value(out), &t);
        let (out, idx) = mask_tokens(&mut g, tokens, token, 1.0, &mut rng(1)).unwrap();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
        for r in 0..6 {
            assert_eq!(g.value(out).row(r), &[9.0, 8.0, 7.0, 6.0]);
        }
    }

    #[test]
    fn masked_positions_are_uniform() {
        let (n, draws) = (64, 10_000);
        let mut counts = vec![0usize; n];
        let mut r = rng(19);
        for _ in 0..draws {
            let idx = sample_mask(n, 0.15, &mut r).unwrap();
            assert_eq!(idx.len(), 10);
            idx.iter().for_each(|&i| counts[i] += 1);
        }
        let expected = (draws * 10) as f64 / n as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat}, p {p}");
    }

    #[test]
    fn masking_reproducible_and_seed_sensitive() {
        let a = sample_mask(64, 0.15, &mut rng(20)).unwrap();
        assert_eq!(a, sample_mask(64, 0.15, &mut rng(20)).unwrap());
        let mut sets: Vec<Vec<usize>> = (0..100).map(|s| sample_mask(64, 0.15, &mut rng(s)).unwrap()).collect();
        sets.sort();
        sets.dedup();
        assert!(sets.len() >= 99);
    }

    proptest! {
        #[test]
        fn upsample_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut r = rng(seed);
            let (x, y) = (Tensor::randn(&[5, 3], 1.0, &mut r), Tensor::randn(&[5, 3], 1.0, &mut r));
            let mut g = Graph::new();
            let u = g.constant(Tensor::randn(&[7, 5], 1.0, &mut r));
            let bias = g.constant(Tensor::zeros(&[7, 3]));
            let (xv, yv) = (g.constant(x), g.constant(y));
            let ax = g.scale(xv, a).unwrap();
            let by = g.scale(yv, b).unwrap();
            let comb = g.add(ax, by).unwrap();
            let lhs = upsample_mesh(&mut g, comb, u, bias).unwrap();
            let ux = upsample_mesh(&mut g, xv, u, bias).unwrap();
            let uy = upsample_mesh(&mut g, yv, u, bias).unwrap();
            let ux = g.scale(ux, a).unwrap();
            let uy = g.scale(uy, b).unwrap();
            let rhs = g.add(ux, uy).unwrap();
            prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-12);
        }
    }
}
