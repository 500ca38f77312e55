//! Patch embedding of the image and pseudo-depth grids, plus the hybrid
//! positional encoding `ω₁·P_l + ω₂·P_s` added to each stream.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Image (`H×W×C`, values in `[0,1]`) and depth (`H×W`, metres) grids.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrids {
    pub image: Tensor,
    pub depth: Tensor,
}

impl InputGrids {
    pub fn new(image: Tensor, depth: Tensor) -> Result<Self> {
        let grids = InputGrids { image, depth };
        grids.validate()?;
        Ok(grids)
    }

    pub fn validate(&self) -> Result<()> {
        let (is, ds) = (self.image.shape(), self.depth.shape());
        if is.len() != 3 || ds.len() != 2 || is[..2] != ds[..] {
            return Err(Error::dim("input grids", is, ds));
        }
        if self.depth.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("depth must be non-negative".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

/// Flat indices that rearrange an `H×W×C` grid into `n × (p·p·C)` patch rows.
///
/// Patches are visited row-major over the patch grid; inside a patch the
/// layout is `(dy, dx, c)`.
pub fn patch_indices(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "grid {h}×{w} is not divisible by patch size {p}"
        )));
    }
    let mut idx = Vec::with_capacity(h * w * c);
    for py in 0..h / p {
        for px in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (py * p + dy, px * p + dx);
                    for ch in 0..c {
                        idx.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Splits `grid` (`H×W` or `H×W×C`) into `p×p` patches and maps each
/// flattened patch through `tokens = patches·W_embed + b_embed`.
pub fn patchify(g: &mut Graph, grid: Var, patch: usize, w_embed: Var, b_embed: Var) -> Result<Var> {
    let shape = g.shape(grid).to_vec();
    let (h, w, c) = match shape[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("patchify", &shape, &[0, 0])),
    };
    let idx = patch_indices(h, w, c, patch)?;
    let n = (h / patch) * (w / patch);
    let patches = g.gather(grid, idx, &[n, patch * patch * c])?;
    g.linear(patches, w_embed, b_embed)
}

/// Fixed sinusoidal table: `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_pe(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal encoding needs even width, got {d}")));
    }
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(&[n, d], data)
}

/// Graph handles for one stream's positional encoding.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEncoding {
    /// Learnable table `P_l`.
    pub learned: Var,
    /// Fixed sinusoidal table `P_s` (a graph constant).
    pub sinusoidal: Var,
    pub omega1: Var,
    pub omega2: Var,
}

/// `tokens + ω₁·P_l + ω₂·P_s`.
pub fn hybrid_pe(g: &mut Graph, tokens: Var, enc: &PositionalEncoding) -> Result<Var> {
    let ts = g.shape(tokens).to_vec();
    for table in [enc.learned, enc.sinusoidal] {
        if g.shape(table) != ts.as_slice() {
            return Err(Error::dim("hybrid_pe", &ts, g.shape(table)));
        }
    }
    let a = g.scale_by(enc.omega1, enc.learned)?;
    let b = g.scale_by(enc.omega2, enc.sinusoidal)?;
    let pe = g.add(a, b)?;
    g.add(tokens, pe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub image_channels: usize,
    pub d_model: usize,
}

impl EmbeddingConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "grid {}×{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        Ok(())
    }
}

/// Parameter names for one input stream (`"image"` or `"depth"`).
pub struct StreamNames {
    pub w: String,
    pub b: String,
    pub learned: String,
    pub omega1: String,
    pub omega2: String,
}

pub fn stream_names(stream: &str) -> StreamNames {
    let p = format!("embed.{stream}");
    StreamNames {
        w: format!("{p}.w"),
        b: format!("{p}.b"),
        learned: format!("{p}.pe_learned"),
        omega1: format!("{p}.omega1"),
        omega2: format!("{p}.omega2"),
    }
}

/// Adds both streams' embedding weights and positional encodings to `store`.
///
/// `P_l ~ N(0, 0.02²)`; `ω₁ = ω₂ = 0.5`. `input_scale` divides the default
/// `1/√fan_in` init of the depth projection, whose inputs are in metres.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &EmbeddingConfig,
    depth_input_scale: f64,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let n = cfg.tokens();
    let d = cfg.d_model;
    for (stream, channels, scale) in [
        ("image", cfg.image_channels, 1.0),
        ("depth", 1, depth_input_scale),
    ] {
        let names = stream_names(stream);
        let fan_in = cfg.patch * cfg.patch * channels;
        let std = 1.0 / (fan_in as f64).sqrt() / scale;
        store.insert(names.w, Tensor::randn(&[fan_in, d], std, rng));
        store.insert(names.b, Tensor::zeros(&[d]));
        store.insert(names.learned, Tensor::randn(&[n, d], 0.02, rng));
        store.insert(names.omega1, Tensor::scalar(0.5));
        store.insert(names.omega2, Tensor::scalar(0.5));
    }
    Ok(())
}

/// Bound embedding weights for one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamEmbedding {
    pub w_embed: Var,
    pub b_embed: Var,
    pub encoding: PositionalEncoding,
}

impl StreamEmbedding {
    pub fn bind(g: &mut Graph, bound: &Bound, stream: &str, cfg: &EmbeddingConfig) -> Result<Self> {
        let names = stream_names(stream);
        let sinusoidal = g.constant(sinusoidal_pe(cfg.tokens(), cfg.d_model)?);
        Ok(StreamEmbedding {
            w_embed: bound.get(&names.w)?,
            b_embed: bound.get(&names.b)?,
            encoding: PositionalEncoding {
                learned: bound.get(&names.learned)?,
                sinusoidal,
                omega1: bound.get(&names.omega1)?,
                omega2: bound.get(&names.omega2)?,
            },
        })
    }

    /// Patchify, optionally replace masked rows with `mask`, then add the
    /// positional encoding.
    pub fn embed(&self, g: &mut Graph, grid: Var, patch: usize, mask: Option<(Var, Vec<bool>)>) -> Result<Var> {
        let mut tokens = patchify(g, grid, patch, self.w_embed, self.b_embed)?;
        if let Some((token, rows)) = mask {
            tokens = g.replace_rows(tokens, token, rows)?;
        }
        hybrid_pe(g, tokens, &self.encoding)
    }
}

/// Embeds both streams with separate weights and encodings. Masking, when
/// given, applies to the image stream only.
pub fn embed_inputs(
    g: &mut Graph,
    grids: &InputGrids,
    image: &StreamEmbedding,
    depth: &StreamEmbedding,
    patch: usize,
    image_mask: Option<(Var, Vec<bool>)>,
) -> Result<(Var, Var)> {
    grids.validate()?;
    let img = g.constant(grids.image.clone());
    let dep = g.constant(grids.depth.clone());
    let z_img = image.embed(g, img, patch, image_mask)?;
    let z_depth = depth.embed(g, dep, patch, None)?;
    Ok((z_img, z_depth))
}
