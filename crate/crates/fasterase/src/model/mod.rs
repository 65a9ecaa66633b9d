//! Conditional denoiser, condition encoder, latent codec, parameters, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod condition;
pub mod params;
pub mod unet;

use ndarray::{Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::tensor::backend::Backend;
use crate::tensor::{PlainBackend, Scalar};

pub use checkpoint::Checkpoint;
pub use condition::{embed_condition, mask_image, CondEncoder};
pub use params::ParamSet;
pub use unet::{AttentionTrace, AttnBlock, AttnHook, StandardAttn, UNet, ATTN_SITES};

/// Spatial reduction between image pixels and the condition token grid:
/// the condition encoder applies three stride-2 convolutions (×8) followed
/// by a 2×2 mean-pool (×2). Input image sides must be divisible by this.
pub const TOKEN_GRID_FACTOR: usize = 16;

/// Index of the designated visual condition token whose cross-attention
/// column drives attention supervision and cache prioritization.
pub const VISUAL_TOKEN: usize = 0;

/// Denoiser hyperparameters and attention-site placement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Stage widths, finest to coarsest.
    pub widths: [usize; 3],
    /// Attention token dimension.
    pub token_dim: usize,
    pub heads: usize,
    /// Condition token count (must match `(image/16)²` of the data).
    pub cond_tokens: usize,
    /// Condition token width.
    pub cond_dim: usize,
    /// Sinusoidal timestep feature width.
    pub time_dim: usize,
    /// Group-norm group count; must divide every stage width.
    pub groups: usize,
    /// Enabled attention sites; each must be one of [`ATTN_SITES`], unique.
    pub attn_sites: Vec<String>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 3,
            widths: [32, 64, 128],
            token_dim: 64,
            heads: 4,
            cond_tokens: 4,
            cond_dim: 64,
            time_dim: 32,
            groups: 8,
            attn_sites: ATTN_SITES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl UNetConfig {
    /// Narrow variant for CPU-budget runs; same topology, smaller widths.
    pub fn compact() -> Self {
        UNetConfig {
            widths: [8, 16, 32],
            token_dim: 32,
            cond_dim: 32,
            time_dim: 16,
            groups: 4,
            ..UNetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.cond_tokens == 0 {
            return Err(Error::config("latent channels and condition tokens must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return Err(Error::config(format!(
                "stage widths {:?} must be positive multiples of groups {}",
                self.widths, self.groups
            )));
        }
        if self.token_dim == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "token dim {} must be a positive multiple of heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.cond_dim % 4 != 0 || self.cond_dim == 0 {
            return Err(Error::config("condition dim must be a positive multiple of 4"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config("time dim must be even and at least 2"));
        }
        for (i, site) in self.attn_sites.iter().enumerate() {
            if !ATTN_SITES.contains(&site.as_str()) {
                return Err(Error::config(format!(
                    "attention site {site:?} does not resolve to any block (known: {ATTN_SITES:?})"
                )));
            }
            if self.attn_sites[..i].contains(site) {
                return Err(Error::config(format!("attention site {site:?} listed twice")));
            }
        }
        Ok(())
    }

    /// Serializes into checkpoint metadata keys.
    pub fn to_meta(&self, meta: &mut std::collections::BTreeMap<String, String>) {
        let widths = self.widths.map(|w| w.to_string()).join(",");
        meta.insert("unet.latent_channels".into(), self.latent_channels.to_string());
        meta.insert("unet.widths".into(), widths);
        meta.insert("unet.token_dim".into(), self.token_dim.to_string());
        meta.insert("unet.heads".into(), self.heads.to_string());
        meta.insert("unet.cond_tokens".into(), self.cond_tokens.to_string());
        meta.insert("unet.cond_dim".into(), self.cond_dim.to_string());
        meta.insert("unet.time_dim".into(), self.time_dim.to_string());
        meta.insert("unet.groups".into(), self.groups.to_string());
        meta.insert("unet.attn_sites".into(), self.attn_sites.join(","));
    }

    /// Rebuilds from checkpoint metadata written by [`Self::to_meta`].
    pub fn from_meta(meta: &std::collections::BTreeMap<String, String>) -> Result<UNetConfig> {
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::data(format!("checkpoint: missing model key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(format!("checkpoint: model key {k} unparsable")))
        };
        let widths_raw = get("unet.widths")?;
        let parts: Vec<usize> = widths_raw
            .split(',')
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(format!("checkpoint: widths {widths_raw:?} unparsable")))?;
        if parts.len() != 3 {
            return Err(Error::data("checkpoint: expected exactly 3 stage widths"));
        }
        let sites_raw = get("unet.attn_sites")?;
        let cfg = UNetConfig {
            latent_channels: num("unet.latent_channels")?,
            widths: [parts[0], parts[1], parts[2]],
            token_dim: num("unet.token_dim")?,
            heads: num("unet.heads")?,
            cond_tokens: num("unet.cond_tokens")?,
            cond_dim: num("unet.cond_dim")?,
            time_dim: num("unet.time_dim")?,
            groups: num("unet.groups")?,
            attn_sites: if sites_raw.is_empty() {
                Vec::new()
            } else {
                sites_raw.split(',').map(|s| s.to_string()).collect()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How images map to the latent space the diffusion runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecMode {
    /// Latent equals the image exactly; lossless both ways.
    Identity,
    /// Reserved for a trained compressor; not available in this build.
    Learned,
}

/// Image ↔ latent mapping with declared channel count and spatial factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentCodec {
    pub mode: CodecMode,
    pub latent_channels: usize,
    /// Spatial reduction factor (latent side = image side / factor).
    pub factor: usize,
}

impl LatentCodec {
    pub fn identity() -> LatentCodec {
        LatentCodec { mode: CodecMode::Identity, latent_channels: 3, factor: 1 }
    }

    fn ensure_identity(&self) -> Result<()> {
        match self.mode {
            CodecMode::Identity => Ok(()),
            CodecMode::Learned => Err(Error::config(
                "learned codec mode is a reserved slot; this build supports identity only",
            )),
        }
    }

    pub fn encode(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        self.ensure_identity()?;
        let s = image.shape();
        if s[0] != self.latent_channels || s[1] % self.factor != 0 || s[2] % self.factor != 0 {
            return Err(Error::data(format!(
                "codec: image shape {s:?} incompatible with {} channels, factor {}",
                self.latent_channels, self.factor
            )));
        }
        Ok(image.clone())
    }

    pub fn decode(&self, latent: &Array3<f32>) -> Result<Array3<f32>> {
        self.ensure_identity()?;
        if latent.shape()[0] != self.latent_channels {
            return Err(Error::data(format!(
                "codec: latent has {} channels, expected {}",
                latent.shape()[0],
                self.latent_channels
            )));
        }
        Ok(latent.clone())
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            CodecMode::Identity => "identity",
            CodecMode::Learned => "learned",
        }
    }

    pub fn from_mode_name(name: &str) -> Result<LatentCodec> {
        match name {
            "identity" => Ok(LatentCodec::identity()),
            "learned" => Ok(LatentCodec { mode: CodecMode::Learned, latent_channels: 4, factor: 8 }),
            other => Err(Error::data(format!("codec: unknown mode {other:?}"))),
        }
    }
}

/// The denoiser's three-part input before channel concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub z_t: Array3<f32>,
    /// Object mask at latent resolution, binary.
    pub mask: Array2<f32>,
    pub z_ref: Array3<f32>,
}

impl ModelInput {
    /// Channel concatenation in the fixed order `(z_t, mask, z_ref)`,
    /// shape `(2C+1, h, w)`.
    pub fn concat(&self) -> Array3<f32> {
        let (c, h, w) = self.z_t.dim();
        let mut out = Array3::zeros((2 * c + 1, h, w));
        out.slice_mut(ndarray::s![..c, .., ..]).assign(&self.z_t);
        out.slice_mut(ndarray::s![c, .., ..]).assign(&self.mask);
        out.slice_mut(ndarray::s![c + 1.., .., ..]).assign(&self.z_ref);
        out
    }
}

/// Validates and bundles the denoiser input parts.
pub fn assemble_input(
    z_t: Array3<f32>,
    mask: Array2<f32>,
    z_ref: Array3<f32>,
) -> Result<ModelInput> {
    let (c, h, w) = z_t.dim();
    if z_ref.dim() != (c, h, w) || mask.dim() != (h, w) {
        return Err(Error::data(format!(
            "input assembly: shapes disagree (z_t {:?}, mask {:?}, z_ref {:?})",
            z_t.dim(),
            mask.dim(),
            z_ref.dim()
        )));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("input assembly: mask channel is not binary"));
    }
    Ok(ModelInput { z_t, mask, z_ref })
}

/// In-graph channel concatenation for sampler unrolls, same order as
/// [`ModelInput::concat`].
pub fn concat_input<F: Scalar, B: Backend<F>>(
    be: &mut B,
    z_t: &B::T,
    mask: &B::T,
    z_ref: &B::T,
) -> B::T {
    be.concat(&[z_t.clone(), mask.clone(), z_ref.clone()], 0)
}

/// Reduces a binary pixel mask to a flat token mask on a coarser grid by
/// max-pooling `factor × factor` cells: a token is set when any pixel under
/// it is set. Token order is row-major, matching the tokenization of
/// feature maps.
pub fn downsample_mask_tokens(mask: &Array2<f32>, factor: usize) -> Result<ndarray::Array1<f32>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::data(format!(
            "token mask: {h}×{w} mask not divisible by grid factor {factor}"
        )));
    }
    let (th, tw) = (h / factor, w / factor);
    let mut out = ndarray::Array1::zeros(th * tw);
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 0.0 {
                out[(r / factor) * tw + c / factor] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Grid factor between a pixel grid of side `h` and a token grid of `n`
/// row-major tokens (attention sites run at h/2 or h/4).
pub fn token_grid_side(n_tokens: usize) -> Result<usize> {
    let side = (n_tokens as f64).sqrt().round() as usize;
    if side * side != n_tokens {
        return Err(Error::data(format!("token count {n_tokens} is not a square grid")));
    }
    Ok(side)
}

/// Spatial divisor between the pixel grid and a named attention site's
/// token grid: the 16² sites run at h/2, the 8² sites at h/4.
pub fn site_grid_divisor(site: &str) -> Result<usize> {
    match site {
        "down.1" | "up.1" => Ok(2),
        "down.2" | "mid" | "up.0" => Ok(4),
        other => Err(Error::config(format!("unknown attention site {other:?}"))),
    }
}

/// The reference latent `z_ref`: the input image with the erase region
/// blanked, so the network sees the visible background context but not the
/// content it must replace. Complements [`mask_image`], which keeps only
/// the region inside the mask.
pub fn reference_latent(image: &Array3<f32>, mask: &Array2<f32>) -> Array3<f32> {
    let mut out = image.clone();
    let (h, w) = mask.dim();
    for r in 0..h {
        for c in 0..w {
            if mask[(r, c)] != 0.0 {
                for ch in 0..3 {
                    out[(ch, r, c)] = 0.0;
                }
            }
        }
    }
    out
}

/// Condition tokens for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    /// `(K_c, d_c)` tokens.
    pub tokens: Array2<f32>,
    /// Index of the designated visual token (always [`VISUAL_TOKEN`]).
    pub visual_token: usize,
}

/// Concrete attention maps captured by [`denoise`].
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// `(site id, N×K_c head-averaged cross-attention map)`.
    pub cross: Vec<(String, Array2<f32>)>,
    /// `(site id, token dimension)` per attention block.
    pub self_meta: Vec<(String, usize)>,
}

/// Runs the denoiser on one sample with plain (non-taped) execution.
///
/// `t` must lie inside the caller's noise schedule. Non-finite activations
/// surface as a numeric fault rather than propagating silently.
pub fn denoise(
    net: &UNet,
    ps: &ParamSet<f32>,
    input: &ModelInput,
    t: usize,
    cond: &ConditionEmbedding,
) -> Result<(Array3<f32>, AttentionRecord)> {
    let mut be = PlainBackend::new(ps.arrays());
    let x = be.constant(input.concat().into_dyn());
    let c = be.constant(cond.tokens.clone().into_dyn());
    let (y, trace) = net.forward(&mut be, &mut StandardAttn, &x, t, &c);

    let eps_hat: ArrayD<f32> = be.value(&y);
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("denoise: non-finite values in predicted noise"));
    }
    let mut cross = Vec::with_capacity(trace.cross.len());
    for (id, node) in &trace.cross {
        let m = be.value(node);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("denoise: non-finite attention map at {id}")));
        }
        cross.push((
            id.clone(),
            m.into_dimensionality::<ndarray::Ix2>().expect("attention maps are 2-D"),
        ));
    }
    let eps_hat = eps_hat
        .into_dimensionality::<ndarray::Ix3>()
        .expect("prediction is (C, h, w)");
    Ok((eps_hat, AttentionRecord { cross, self_meta: trace.self_meta }))
}
