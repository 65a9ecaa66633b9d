//! Trainable visual condition encoder.
//!
//! Maps the object patch (image with everything outside the object mask
//! zeroed) to `K_c` condition tokens of width `d_c`: three stride-2
//! convolutions (×8 reduction) followed by a 2×2 mean-pool (×16 total, see
//! [`super::TOKEN_GRID_FACTOR`]), then one token per remaining grid cell,
//! row-major. Token 0 is the designated visual token whose cross-attention
//! column drives both the attention supervision loss and cache
//! prioritization.

use ndarray::{Array2, ArrayD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::synthgen::Scene;
use crate::tensor::backend::Backend;
use crate::tensor::{PlainBackend, Scalar};

use super::params::ParamSet;
use super::unet::Conv;
use super::{ConditionEmbedding, UNetConfig, TOKEN_GRID_FACTOR, VISUAL_TOKEN};

#[derive(Clone)]
pub struct CondEncoder {
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    d_c: usize,
}

impl CondEncoder {
    pub fn new<F: Scalar>(
        cfg: &UNetConfig,
        prefix: &str,
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
    ) -> Result<CondEncoder> {
        cfg.validate()?;
        let d_c = cfg.cond_dim;
        let (c1, c2) = (d_c / 4, d_c / 2);
        Ok(CondEncoder {
            conv1: Conv::new(ps, rng, &format!("{prefix}.conv1"), 3, c1, 3, 2, 1, false),
            conv2: Conv::new(ps, rng, &format!("{prefix}.conv2"), c1, c2, 3, 2, 1, false),
            conv3: Conv::new(ps, rng, &format!("{prefix}.conv3"), c2, d_c, 3, 2, 1, false),
            d_c,
        })
    }

    /// Encodes a masked image `(3, H, W)` into `(K_c, d_c)` tokens, where
    /// `K_c = (H/16)·(W/16)`.
    pub fn forward<F: Scalar, B: Backend<F>>(&self, be: &mut B, masked_image: &B::T) -> B::T {
        let h = self.conv1.apply(be, masked_image);
        let h = be.silu(&h);
        let h = self.conv2.apply(be, &h);
        let h = be.silu(&h);
        let h = self.conv3.apply(be, &h);
        let h = be.silu(&h);
        // 2x2 mean pool, then one token per grid cell.
        let pooled = be.downsum2x(&h);
        let pooled = be.scale(&pooled, 0.25);
        let shape = be.value(&pooled).shape().to_vec();
        let k_c = shape[1] * shape[2];
        let flat = be.reshape(&pooled, &[self.d_c, k_c]);
        be.transpose(&flat)
    }
}

/// Zeroes the image outside the object mask: the network sees only the
/// object patch.
pub fn mask_image(image: &ArrayD<f32>, m_obj: &Array2<f32>) -> ArrayD<f32> {
    let mut out = image.clone();
    let (h, w) = m_obj.dim();
    for r in 0..h {
        for c in 0..w {
            if m_obj[(r, c)] == 0.0 {
                for ch in 0..3 {
                    out[[ch, r, c]] = 0.0;
                }
            }
        }
    }
    out
}

/// Embeds a scene's object patch into condition tokens with the encoder's
/// current weights.
pub fn embed_condition(
    encoder: &CondEncoder,
    ps: &ParamSet<f32>,
    scene: &Scene,
) -> Result<ConditionEmbedding> {
    if scene.m_obj.iter().all(|&v| v == 0.0) {
        return Err(Error::data("condition embedding: object mask is empty"));
    }
    let (h, w) = (scene.height(), scene.width());
    if h % TOKEN_GRID_FACTOR != 0 || w % TOKEN_GRID_FACTOR != 0 {
        return Err(Error::data(format!(
            "condition embedding: scene {h}x{w} not divisible by token grid factor {TOKEN_GRID_FACTOR}"
        )));
    }
    let masked = mask_image(&scene.image.clone().into_dyn(), &scene.m_obj);
    let mut be = PlainBackend::new(ps.arrays());
    let x = be.constant(masked);
    let tokens = encoder.forward(&mut be, &x);
    let tokens = be
        .value(&tokens)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("condition tokens are 2-D");
    Ok(ConditionEmbedding { tokens, visual_token: VISUAL_TOKEN })
}
