//! Foreground-pruned attention caching for few-step inference.
//!
//! The final sampling step of a few-step run redoes almost all of the work
//! of the step before it, yet only the tokens near the erase region change
//! meaningfully. This module exploits that: the penultimate step records
//! each attention block's output tokens into a [`LayerCache`], a
//! [`TokenMask`] derived from the recorded cross-attention picks the tokens
//! that still matter, and the final step recomputes attention queries only
//! for those foreground tokens while background tokens are carried from the
//! cache bitwise ([`asymmetric_block_forward`]). A final attention-weighted
//! fusion ([`fuse_final`]) then blends the prediction into the original
//! image so untouched pixels keep their exact input values.
//!
//! Running [`run_cached_inference`] with an empty cached-layer list *is*
//! the uncached sampler — one code path serves both, so cached and uncached
//! runs are comparable by construction.

mod asym;
mod infer;
mod mask;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::model::{site_grid_divisor, token_grid_side, UNetConfig, ATTN_SITES};

pub use asym::{asymmetric_attention, asymmetric_block_forward};
pub use infer::{
    run_cached_inference, CacheAuditSite, InferenceModel, InferenceOutput, StepRecord,
};
pub use mask::{coarsen_token_mask, derive_token_mask, TokenMask};

/// One cached attention layer: the block's output feature map and its
/// cross-attention map, stamped with the plan position that produced them.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    /// Block output `(C, H_site, W_site)` — the tokens downstream layers
    /// consumed at the producing step.
    pub features: ArrayD<f32>,
    /// Head-averaged cross-attention map `(N, K_c)` recorded alongside.
    pub map: Array2<f32>,
    /// Plan position (0-based) whose forward pass produced the entry.
    pub produced_step: usize,
    /// Cleared entries may not be consumed.
    pub valid: bool,
}

/// Per-layer store of cached attention outputs.
///
/// Consumption is only legal strictly after the producing step: a step may
/// never read a cache it wrote itself, and invalidated or missing entries
/// are errors rather than silent recomputation.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl LayerCache {
    pub fn new() -> LayerCache {
        LayerCache::default()
    }

    /// Stores (or replaces) the entry for `site`, marking it valid.
    pub fn insert(
        &mut self,
        site: &str,
        features: ArrayD<f32>,
        map: Array2<f32>,
        produced_step: usize,
    ) {
        self.entries.insert(
            site.to_string(),
            CacheEntry { features, map, produced_step, valid: true },
        );
    }

    /// Marks an entry stale without removing it; consuming it afterwards is
    /// an error.
    pub fn invalidate(&mut self, site: &str) {
        if let Some(e) = self.entries.get_mut(site) {
            e.valid = false;
        }
    }

    /// The entry for `site`, checked for consumption at plan position
    /// `step`: the entry must exist, be valid, and have been produced at a
    /// strictly earlier step.
    pub fn consume(&self, site: &str, step: usize) -> Result<&CacheEntry> {
        let e = self
            .entries
            .get(site)
            .ok_or_else(|| Error::config(format!("layer cache has no entry for site {site:?}")))?;
        if !e.valid {
            return Err(Error::config(format!(
                "layer cache entry for site {site:?} was invalidated"
            )));
        }
        if step <= e.produced_step {
            return Err(Error::config(format!(
                "cache for site {site:?} produced at step {} cannot be consumed at step {step}; \
                 consumption must come strictly later",
                e.produced_step
            )));
        }
        Ok(e)
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Knobs of the caching policy.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheConfig {
    /// Attention sites that run asymmetrically at the consuming step. An
    /// empty list disables caching entirely (the run is then the plain
    /// sampler).
    pub layers: Vec<String>,
    /// Plan position that consumes the caches; `None` means the final
    /// step. The position directly before it produces them.
    pub cached_step: Option<usize>,
    /// Attention quantile for foreground selection: a token is foreground
    /// when its attention reaches the `quantile` level of the distinct
    /// attention values, subject to a `ceil((1 - quantile) * N)` budget
    /// with lowest-index tie-breaking. `0.0` forces every token foreground.
    pub quantile: f64,
    /// Chebyshev radius of the user-mask dilation; tokens within this
    /// distance of the user's erase mask are always foreground.
    pub dilation: usize,
    /// Attention site whose cross-attention column drives both the token
    /// masks and the final fusion weights. Must run on the fine (side/2)
    /// token grid.
    pub attn_site: String,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            layers: ATTN_SITES.iter().map(|s| s.to_string()).collect(),
            cached_step: None,
            quantile: 0.85,
            dilation: 1,
            attn_site: "up.1".to_string(),
        }
    }
}

impl CacheConfig {
    /// Caching disabled: the sampler recomputes every token every step.
    pub fn disabled() -> CacheConfig {
        CacheConfig { layers: Vec::new(), ..CacheConfig::default() }
    }

    /// Whether any layer actually runs cached.
    pub fn enabled(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Validates against the model and plan; returns the resolved
    /// consuming plan position (meaningful only when caching is enabled).
    pub fn validate(&self, cfg: &UNetConfig, plan_len: usize) -> Result<usize> {
        if !(self.quantile.is_finite() && (0.0..=1.0).contains(&self.quantile)) {
            return Err(Error::config(format!(
                "foreground quantile {} must lie in [0, 1]",
                self.quantile
            )));
        }
        if !cfg.attn_sites.iter().any(|s| s == &self.attn_site) {
            return Err(Error::config(format!(
                "mask/fusion source site {:?} has no attention block (sites: {:?})",
                self.attn_site, cfg.attn_sites
            )));
        }
        if site_grid_divisor(&self.attn_site)? != 2 {
            return Err(Error::config(format!(
                "mask/fusion source site {:?} must run on the fine token grid",
                self.attn_site
            )));
        }
        for (i, site) in self.layers.iter().enumerate() {
            site_grid_divisor(site)?;
            if !cfg.attn_sites.iter().any(|s| s == site) {
                return Err(Error::config(format!(
                    "cached layer {site:?} has no attention block (sites: {:?})",
                    cfg.attn_sites
                )));
            }
            if self.layers[..i].contains(site) {
                return Err(Error::config(format!("cached layer {site:?} listed twice")));
            }
        }
        let consume = self.cached_step.unwrap_or(plan_len.saturating_sub(1));
        if self.enabled() {
            if plan_len < 2 {
                return Err(Error::config(format!(
                    "caching needs a plan of at least 2 steps (one to fill, one to consume); got {plan_len}"
                )));
            }
            if consume == 0 || consume >= plan_len {
                return Err(Error::config(format!(
                    "cached step {consume} outside the consumable range 1..{plan_len}"
                )));
            }
        }
        Ok(consume)
    }
}

/// Per-pixel blend weights on the latent grid, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub alpha: Array2<f32>,
}

impl FusionWeights {
    /// Wraps raw weights, rejecting values outside `[0, 1]`.
    pub fn new(alpha: Array2<f32>) -> Result<FusionWeights> {
        if alpha.is_empty() {
            return Err(Error::data("fusion weights are empty"));
        }
        if let Some(bad) = alpha.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::numeric(format!(
                "fusion weight {bad} outside [0, 1]"
            )));
        }
        Ok(FusionWeights { alpha })
    }
}

/// Fusion weights from a cross-attention map: the designated visual-token
/// column, normalized by its maximum, clamped to `[0, 1]`, and replicated
/// from the token grid onto the `latent_side²` pixel grid. An all-zero
/// column yields all-zero weights (the fused image is then the original).
pub fn derive_fusion_weights(
    map: &Array2<f32>,
    visual_token: usize,
    latent_side: usize,
) -> Result<FusionWeights> {
    let (n, k_c) = map.dim();
    if visual_token >= k_c {
        return Err(Error::config(format!(
            "visual token {visual_token} outside the {k_c} condition tokens"
        )));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fusion source map contains non-finite values"));
    }
    let side = token_grid_side(n)?;
    if latent_side == 0 || latent_side % side != 0 {
        return Err(Error::config(format!(
            "latent side {latent_side} is not a multiple of the {side}-token grid side"
        )));
    }
    let factor = latent_side / side;
    let col = map.column(visual_token);
    let max = col.iter().fold(0.0f32, |m, &v| m.max(v));
    let mut alpha = Array2::<f32>::zeros((latent_side, latent_side));
    if max > 0.0 {
        for (t, &v) in col.iter().enumerate() {
            let a = (v / max).clamp(0.0, 1.0);
            let (tr, tc) = (t / side, t % side);
            for dr in 0..factor {
                for dc in 0..factor {
                    alpha[[tr * factor + dr, tc * factor + dc]] = a;
                }
            }
        }
    }
    FusionWeights::new(alpha)
}

/// Convex per-pixel blend: `alpha * predicted + (1 - alpha) * original`,
/// with the weights broadcast over channels. Weights outside `[0, 1]` or
/// mismatched shapes are errors.
pub fn fuse_final(
    predicted: &Array3<f32>,
    original: &Array3<f32>,
    weights: &FusionWeights,
) -> Result<Array3<f32>> {
    let (c, h, w) = predicted.dim();
    if original.dim() != (c, h, w) {
        return Err(Error::data(format!(
            "fusion shape mismatch: predicted {:?} vs original {:?}",
            predicted.dim(),
            original.dim()
        )));
    }
    if weights.alpha.dim() != (h, w) {
        return Err(Error::data(format!(
            "fusion weights {:?} do not cover the {h}×{w} image",
            weights.alpha.dim()
        )));
    }
    if let Some(bad) = weights.alpha.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::numeric(format!("fusion weight {bad} outside [0, 1]")));
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for cc in 0..w {
                let a = weights.alpha[[r, cc]];
                out[[ch, r, cc]] =
                    a * predicted[[ch, r, cc]] + (1.0 - a) * original[[ch, r, cc]];
            }
        }
    }
    Ok(out)
}
