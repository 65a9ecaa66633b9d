//! The sampling loop with optional attention caching.
//!
//! [`run_cached_inference`] is the single sampler: with an empty
//! cached-layer list it is the plain deterministic few-step sampler; with
//! caching enabled, the step directly before the consuming step records
//! every cached block's output and cross-attention map, a token mask is
//! derived from the recorded attention, and the consuming step recomputes
//! only foreground tokens while background tokens come from the cache
//! bitwise. The returned [`InferenceOutput`] carries everything the
//! acceptance checks need: the fused image, the raw prediction, per-step
//! attention maps and masks, the arithmetic-cost report, and a cache audit
//! for exactness verification.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix2, Ix3, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flops::{self, FlopsReport, SiteTokens, StepTokens};
use crate::model::{
    assemble_input, downsample_mask_tokens, embed_condition, reference_latent, site_grid_divisor,
    AttentionTrace, AttnBlock, AttnHook, Checkpoint, CondEncoder, ParamSet, StandardAttn, UNet,
    UNetConfig, TOKEN_GRID_FACTOR, VISUAL_TOKEN,
};
use crate::rng::derive_rng;
use crate::scheduler::{ddim_step, NoiseSchedule, TimestepPlan};
use crate::synthgen::Scene;
use crate::tensor::{Backend, PlainBackend};

use super::{
    asymmetric_block_forward, coarsen_token_mask, derive_fusion_weights, derive_token_mask,
    fuse_final, CacheConfig, FusionWeights, LayerCache, TokenMask,
};

/// A trained denoiser plus condition encoder, ready to sample.
pub struct InferenceModel {
    pub cfg: UNetConfig,
    pub unet: UNet,
    pub cond: CondEncoder,
    pub params: ParamSet<f32>,
    /// Training role recorded in the checkpoint ("teacher" or "student").
    pub role: String,
}

impl InferenceModel {
    /// Wraps already-built parts (used by tests and by training code that
    /// wants to sample without a checkpoint round-trip).
    pub fn from_parts(
        cfg: UNetConfig,
        unet: UNet,
        cond: CondEncoder,
        params: ParamSet<f32>,
        role: &str,
    ) -> InferenceModel {
        InferenceModel { cfg, unet, cond, params, role: role.to_string() }
    }

    /// Loads a teacher or student checkpoint: the network is rebuilt from
    /// the stored model metadata, then the stored tensors are loaded over
    /// it by name. Extra arrays (critic, optimizer state) are ignored.
    pub fn load(path: &Path) -> Result<InferenceModel> {
        let ck = Checkpoint::read(path)?;
        let role = ck
            .meta
            .get("train.role")
            .cloned()
            .ok_or_else(|| Error::data(format!(
                "checkpoint at {} does not record its training role",
                path.display()
            )))?;
        let cfg = UNetConfig::from_meta(&ck.meta)?;
        let mut ps = ParamSet::new();
        let mut rng = derive_rng(0, "infer.rebuild", 0);
        let unet = UNet::new(&cfg, "unet", &mut ps, &mut rng)?;
        let cond = CondEncoder::new(&cfg, "cond", &mut ps, &mut rng)?;
        ck.load_into(&mut ps)?;
        Ok(InferenceModel { cfg, unet, cond, params: ps, role })
    }
}

/// What one denoising step saw: its plan position, schedule timestep, the
/// cross-attention map of every attention site (for cached sites, the
/// assembled map — fresh foreground rows over cached background rows), and
/// the token mask the caching policy derives from this step's attention.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub tau: usize,
    pub maps: Vec<(String, Array2<f32>)>,
    pub mask: TokenMask,
}

impl StepRecord {
    /// The map recorded for `site`, if that site has an attention block.
    pub fn map_for(&self, site: &str) -> Option<&Array2<f32>> {
        self.maps.iter().find(|(s, _)| s == site).map(|(_, m)| m)
    }
}

/// One cached site's evidence from the consuming step: the token mask it
/// ran under, the block output it produced, and the cache it drew from.
/// Background tokens of `output` must match `cached` bitwise.
#[derive(Clone, Debug)]
pub struct CacheAuditSite {
    pub site: String,
    pub mask: TokenMask,
    pub output: ArrayD<f32>,
    pub cached: ArrayD<f32>,
}

/// Everything a sampling run produces.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Final image: the raw prediction blended into the input by the
    /// attention-derived weights, so untouched pixels keep input values.
    pub image: Array3<f32>,
    /// Raw clean-image prediction of the final step, before fusion.
    pub raw_image: Array3<f32>,
    /// The fusion weights used for the blend.
    pub alpha: FusionWeights,
    /// One record per plan position.
    pub steps: Vec<StepRecord>,
    /// Arithmetic cost of the denoising passes.
    pub flops: FlopsReport,
    /// Cache-exactness evidence, one entry per cached site (empty when
    /// caching is disabled).
    pub audit: Vec<CacheAuditSite>,
}

impl InferenceOutput {
    /// Verifies that every audited background value is bitwise equal to
    /// its cache entry; returns the number of values compared.
    pub fn verify_cache_exactness(&self) -> Result<usize> {
        let mut checked = 0usize;
        for a in &self.audit {
            let out = a.output.view().into_dimensionality::<Ix3>().map_err(|_| {
                Error::data(format!("cache audit at {}: output is not a feature map", a.site))
            })?;
            let cached = a.cached.view().into_dimensionality::<Ix3>().map_err(|_| {
                Error::data(format!("cache audit at {}: cache is not a feature map", a.site))
            })?;
            let (c, h, w) = out.dim();
            if cached.dim() != (c, h, w) || a.mask.len() != h * w {
                return Err(Error::data(format!(
                    "cache audit at {}: shapes disagree (output {:?}, cache {:?}, mask {})",
                    a.site,
                    out.dim(),
                    cached.dim(),
                    a.mask.len()
                )));
            }
            for t in 0..h * w {
                if a.mask.is_foreground(t) {
                    continue;
                }
                let (r, cc) = (t / w, t % w);
                for ch in 0..c {
                    if out[[ch, r, cc]].to_bits() != cached[[ch, r, cc]].to_bits() {
                        return Err(Error::numeric(format!(
                            "cache exactness violated at site {} token {t} channel {ch}: \
                             {} vs cached {}",
                            a.site,
                            out[[ch, r, cc]],
                            cached[[ch, r, cc]]
                        )));
                    }
                    checked += 1;
                }
            }
        }
        Ok(checked)
    }
}

/// Hook that runs blocks normally while recording each block's output
/// feature map and cross-attention map (the cache-filling step).
#[derive(Default)]
struct RecordingAttn {
    records: HashMap<String, (ArrayD<f32>, Array2<f32>)>,
}

impl<'p> AttnHook<f32, PlainBackend<'p, f32>> for RecordingAttn {
    fn run(
        &mut self,
        be: &mut PlainBackend<'p, f32>,
        blk: &AttnBlock,
        x: &ArrayD<f32>,
        cond: &ArrayD<f32>,
        hw: (usize, usize),
        trace: &mut AttentionTrace<ArrayD<f32>>,
    ) -> ArrayD<f32> {
        let out = blk.forward_standard(be, x, cond, hw, trace);
        let map = trace.cross.last().expect("standard block records its cross map").1.clone();
        let map2 = map
            .into_dimensionality::<Ix2>()
            .expect("cross-attention map is (N, K_c)");
        self.records.insert(blk.id.clone(), (out.clone(), map2));
        out
    }
}

/// One cached site's work order for the consuming step.
struct CachedSiteJob {
    mask: TokenMask,
    features: ArrayD<f32>,
    map: Array2<f32>,
}

/// Hook for the consuming step: sites with a job run asymmetrically
/// against their cache, everything else runs normally. Assembled
/// cross-attention maps are pushed into the trace so downstream consumers
/// (mask derivation, fusion) transparently see the freshest available map.
struct CachedAttn<'a> {
    params: &'a [ArrayD<f32>],
    jobs: HashMap<String, CachedSiteJob>,
    audits: Vec<CacheAuditSite>,
}

impl<'a, 'p> AttnHook<f32, PlainBackend<'p, f32>> for CachedAttn<'a> {
    fn run(
        &mut self,
        be: &mut PlainBackend<'p, f32>,
        blk: &AttnBlock,
        x: &ArrayD<f32>,
        cond: &ArrayD<f32>,
        hw: (usize, usize),
        trace: &mut AttentionTrace<ArrayD<f32>>,
    ) -> ArrayD<f32> {
        let Some(job) = self.jobs.get(&blk.id) else {
            return blk.forward_standard(be, x, cond, hw, trace);
        };
        let xv = be.value(x);
        let condv = be.value(cond);
        let (out, map) = asymmetric_block_forward(
            self.params,
            blk,
            &xv,
            &condv,
            hw,
            &job.mask,
            &job.features,
            &job.map,
        )
        .expect("cache job shapes come from this run's own recording step");
        self.audits.push(CacheAuditSite {
            site: blk.id.clone(),
            mask: job.mask.clone(),
            output: out.clone(),
            cached: job.features.clone(),
        });
        trace.cross.push((blk.id.clone(), be.constant(map.into_dyn())));
        trace.self_meta.push((blk.id.clone(), blk.d));
        be.constant(out)
    }
}

/// The visual-token attention column of `site`'s map from a step's trace.
fn site_attention_column(
    maps: &[(String, Array2<f32>)],
    site: &str,
) -> Result<Array1<f32>> {
    let map = maps
        .iter()
        .find(|(s, _)| s == site)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::config(format!("no attention map recorded at site {site:?}")))?;
    if VISUAL_TOKEN >= map.ncols() {
        return Err(Error::config(format!(
            "attention map at {site:?} has {} condition columns, visual token is {VISUAL_TOKEN}",
            map.ncols()
        )));
    }
    Ok(map.column(VISUAL_TOKEN).to_owned())
}

/// Deterministic few-step sampling of one scene, cached or plain.
///
/// `seed` scopes the run; the per-scene starting noise is drawn from a
/// stream derived from `(seed, scene.seed)`, so corpora sample
/// reproducibly in any order. With `cache_cfg.layers` empty this is the
/// plain sampler; otherwise the step before the resolved consuming step
/// records the caches and the consuming step runs them asymmetrically.
pub fn run_cached_inference(
    model: &InferenceModel,
    scene: &Scene,
    plan: &TimestepPlan,
    cache_cfg: &CacheConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<InferenceOutput> {
    model.cfg.validate()?;
    scene.check_invariants()?;
    let consume_step = cache_cfg.validate(&model.cfg, plan.len())?;
    let caching = cache_cfg.enabled();

    let (h, w) = (scene.height(), scene.width());
    if h != w {
        return Err(Error::data(format!("inference expects square scenes, got {h}×{w}")));
    }
    if h % TOKEN_GRID_FACTOR != 0 {
        return Err(Error::data(format!(
            "scene side {h} is not a multiple of the condition grid factor {TOKEN_GRID_FACTOR}"
        )));
    }
    let grid = h / TOKEN_GRID_FACTOR;
    if grid * grid != model.cfg.cond_tokens {
        return Err(Error::config(format!(
            "model expects {} condition tokens, scene yields {}",
            model.cfg.cond_tokens,
            grid * grid
        )));
    }
    if model.cfg.latent_channels != scene.image.dim().0 {
        return Err(Error::config(format!(
            "model expects {} latent channels, scene has {}",
            model.cfg.latent_channels,
            scene.image.dim().0
        )));
    }
    for &tau in plan.taus() {
        if tau >= sched.len() {
            return Err(Error::config(format!(
                "plan timestep {tau} outside the {}-step schedule",
                sched.len()
            )));
        }
    }

    // Fixed per-run inputs.
    let cond = embed_condition(&model.cond, &model.params, scene)?;
    let cond_arr = cond.tokens.clone().into_dyn();
    let z_ref = reference_latent(&scene.image, &scene.m_obj);
    let user_fine = downsample_mask_tokens(&scene.m_obj, 2)?;

    // Starting noise, scoped by run seed and scene identity.
    let mut zr = derive_rng(seed, "infer.init", scene.seed);
    let c = model.cfg.latent_channels;
    let mut z: ArrayD<f32> =
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| zr.sample::<f32, _>(StandardNormal));

    let mut cache = LayerCache::new();
    let mut site_masks: HashMap<String, TokenMask> = HashMap::new();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(plan.len());
    let mut step_tokens: Vec<StepTokens> = Vec::with_capacity(plan.len());
    let mut audit: Vec<CacheAuditSite> = Vec::new();

    for i in 0..plan.len() {
        let tau = plan.taus()[i];
        let z3 = z
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("latent is (C, h, w)");
        let input = assemble_input(z3, scene.m_obj.clone(), z_ref.clone())?.concat();

        let mut be = PlainBackend::new(model.params.arrays());
        let input_c = be.constant(input.into_dyn());
        let cond_c = be.constant(cond_arr.clone());

        // Run the step under the hook its role demands.
        let (y, trace, mut recorded) = if caching && i == consume_step {
            let mut jobs: HashMap<String, CachedSiteJob> = HashMap::new();
            for site in &cache_cfg.layers {
                let entry = cache.consume(site, i)?;
                let mask = site_masks
                    .get(site)
                    .ok_or_else(|| {
                        Error::config(format!("no token mask derived for cached site {site:?}"))
                    })?
                    .clone();
                jobs.insert(
                    site.clone(),
                    CachedSiteJob {
                        mask,
                        features: entry.features.clone(),
                        map: entry.map.clone(),
                    },
                );
            }
            let mut hook = CachedAttn { params: model.params.arrays(), jobs, audits: Vec::new() };
            let (y, trace) = model.unet.forward(&mut be, &mut hook, &input_c, tau, &cond_c);
            audit.extend(hook.audits.drain(..));
            (y, trace, HashMap::new())
        } else if caching && i + 1 == consume_step {
            let mut hook = RecordingAttn::default();
            let (y, trace) = model.unet.forward(&mut be, &mut hook, &input_c, tau, &cond_c);
            (y, trace, std::mem::take(&mut hook.records))
        } else {
            let mut hook = StandardAttn;
            let (y, trace) = model.unet.forward(&mut be, &mut hook, &input_c, tau, &cond_c);
            (y, trace, HashMap::new())
        };

        let eps_hat = be.value(&y);
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "noise prediction at plan step {i} (t={tau}) is not finite"
            )));
        }

        let maps: Vec<(String, Array2<f32>)> = trace
            .cross
            .iter()
            .map(|(s, t)| {
                (
                    s.clone(),
                    be.value(t)
                        .into_dimensionality::<Ix2>()
                        .expect("cross-attention map is (N, K_c)"),
                )
            })
            .collect();

        // The per-step token mask, from this step's designated map.
        let col = site_attention_column(&maps, &cache_cfg.attn_site)?;
        let step_mask =
            derive_token_mask(&col, &user_fine, cache_cfg.quantile, cache_cfg.dilation)?;

        // Cache-filling step: store block outputs and fix the per-site
        // masks the consuming step will run under.
        if caching && i + 1 == consume_step {
            for site in &cache_cfg.layers {
                let (features, map) = recorded.remove(site).ok_or_else(|| {
                    Error::config(format!(
                        "recording step saw no attention block for cached site {site:?}"
                    ))
                })?;
                cache.insert(site, features, map, i);
                let mask = if site_grid_divisor(site)? == 2 {
                    step_mask.clone()
                } else {
                    coarsen_token_mask(&step_mask, 2)?
                };
                site_masks.insert(site.clone(), mask);
            }
        }

        // Arithmetic cost of this step.
        let mut sites = Vec::new();
        for site in crate::model::ATTN_SITES {
            if !model.cfg.attn_sites.iter().any(|s| s == site) {
                continue;
            }
            let div = site_grid_divisor(site)?;
            let side = h / div;
            let n = side * side;
            let n_f = if caching && i == consume_step && cache_cfg.layers.iter().any(|l| l == site)
            {
                site_masks
                    .get(site)
                    .expect("mask fixed at the recording step")
                    .n_foreground()
            } else {
                n
            };
            sites.push(SiteTokens { site: site.to_string(), n, n_f });
        }
        step_tokens.push(StepTokens { sites });

        steps.push(StepRecord { step: i, tau, maps, mask: step_mask });

        z = ddim_step(sched, &z, &eps_hat, tau, plan.next_tau(i))?;
    }

    let raw_image = z
        .into_dimensionality::<Ix3>()
        .expect("final latent is (C, h, w)");

    // Fusion from the final step's designated map (for cached runs this is
    // the assembled map: fresh foreground rows over cached rows).
    let final_maps = &steps.last().expect("plan has at least one step").maps;
    let final_map = final_maps
        .iter()
        .find(|(s, _)| s == &cache_cfg.attn_site)
        .map(|(_, m)| m)
        .expect("designated site validated against the model");
    let alpha = derive_fusion_weights(final_map, VISUAL_TOKEN, h)?;
    let image = fuse_final(&raw_image, &scene.image, &alpha)?;

    let flops = flops::count_run(&model.cfg, h, &step_tokens)?;

    Ok(InferenceOutput { image, raw_image, alpha, steps, flops, audit })
}
