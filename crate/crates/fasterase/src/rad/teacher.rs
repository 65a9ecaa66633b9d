//! Teacher training: standard noise-prediction diffusion over ground-truth
//! backgrounds, conditioned on the tight object mask, the blanked
//! reference, and the object-patch tokens, plus a weighted attention
//! localization term supervised by object+effect tokens.
//!
//! The trained teacher both anchors quality (many-step sampling) and seeds
//! the student and the critic encoder during distillation.
//!
//! Every iteration derives a fresh random stream from `(seed, iteration)`
//! and draws all of its randomness up front, so a resumed run replays the
//! identical trajectory regardless of how it was interrupted.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayD, Dimension, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    concat_input, downsample_mask_tokens, mask_image, reference_latent, site_grid_divisor,
    Checkpoint, CondEncoder, ParamSet, StandardAttn, UNet, UNetConfig, VISUAL_TOKEN,
};
use crate::rng::derive_rng;
use crate::scheduler::{forward_diffuse, NoiseSchedule};
use crate::synthgen::Scene;
use crate::tensor::{Backend, GraphBackend};

use super::losses::mask_loss;
use super::optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the attention localization term.
    pub lambda_mask: f64,
    /// Attention site whose cross-attention map is supervised (and later
    /// drives cache prioritization): the finest decoder site by default.
    pub mask_site: String,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            seed: 0,
            batch: 8,
            lr: 2e-3,
            weight_decay: 0.0,
            lambda_mask: 0.1,
            mask_site: "up.1".to_string(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self, cfg: &UNetConfig) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("teacher batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("teacher learning rate {} invalid", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("teacher weight decay {} invalid", self.weight_decay)));
        }
        if !(self.lambda_mask.is_finite() && self.lambda_mask >= 0.0) {
            return Err(Error::config(format!("lambda_mask {} invalid", self.lambda_mask)));
        }
        site_grid_divisor(&self.mask_site)?;
        if !cfg.attn_sites.iter().any(|s| s == &self.mask_site) {
            return Err(Error::config(format!(
                "supervised attention site {:?} has no attention block (sites: {:?})",
                self.mask_site, cfg.attn_sites
            )));
        }
        Ok(())
    }
}

/// Loss breakdown of one training iteration (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherMetrics {
    pub iter: u64,
    /// `noise_mse + lambda_mask · mask_term`.
    pub total: f32,
    pub noise_mse: f32,
    /// Raw (unweighted) attention localization loss.
    pub mask_term: f32,
}

#[derive(Clone)]
pub struct TeacherState {
    pub cfg: UNetConfig,
    pub tc: TeacherConfig,
    pub unet: UNet,
    pub cond: CondEncoder,
    /// All trainable tensors: denoiser under `unet.`, condition encoder
    /// under `cond.`.
    pub params: ParamSet<f32>,
    pub opt: AdamW,
    pub iter: u64,
    /// In-memory metric history of this process's iterations (the run log
    /// is the durable record).
    pub history: Vec<TeacherMetrics>,
}

/// Fresh teacher with seeded initialization.
pub fn init_teacher(cfg: &UNetConfig, tc: TeacherConfig) -> Result<TeacherState> {
    cfg.validate()?;
    tc.validate(cfg)?;
    let mut ps = ParamSet::new();
    let mut rng = derive_rng(tc.seed, "teacher.init", 0);
    let unet = UNet::new(cfg, "unet", &mut ps, &mut rng)?;
    let cond = CondEncoder::new(cfg, "cond", &mut ps, &mut rng)?;
    let opt = AdamW::new(&ps, tc.lr, tc.weight_decay, |_| true);
    Ok(TeacherState {
        cfg: cfg.clone(),
        tc,
        unet,
        cond,
        params: ps,
        opt,
        iter: 0,
        history: Vec::new(),
    })
}

/// Everything one training sample feeds the networks, precomputed from a
/// scene: the regression target, the conditioning triple, and the token
/// mask supervising attention.
pub(crate) struct SampleInputs {
    /// Ground-truth background latent (identity codec): the clean sample
    /// the diffusion models.
    pub z_gt: ArrayD<f32>,
    /// Tight object mask as the `(1, h, w)` conditioning channel.
    pub mask_channel: ArrayD<f32>,
    /// Input image with the tight mask blanked.
    pub z_ref: ArrayD<f32>,
    /// Object patch (image inside the tight mask) for the condition
    /// encoder.
    pub cond_input: ArrayD<f32>,
    /// Object+effect token mask at the supervised site's grid.
    pub m_fg_tokens: Array1<f32>,
    /// Object+effect mask as a `(1, h, w)` channel (critic conditioning).
    pub mask_eff_channel: ArrayD<f32>,
}

pub(crate) fn sample_inputs(scene: &Scene, mask_site: &str) -> Result<SampleInputs> {
    let (h, w) = (scene.height(), scene.width());
    let divisor = site_grid_divisor(mask_site)?;
    let m_fg_tokens = downsample_mask_tokens(&scene.m_obj_eff, divisor)?;
    Ok(SampleInputs {
        z_gt: scene.gt_background.clone().into_dyn(),
        mask_channel: scene
            .m_obj
            .clone()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .expect("mask reshape"),
        z_ref: reference_latent(&scene.image, &scene.m_obj).into_dyn(),
        cond_input: mask_image(&scene.image.clone().into_dyn(), &scene.m_obj),
        m_fg_tokens,
        mask_eff_channel: scene
            .m_obj_eff
            .clone()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .expect("mask reshape"),
    })
}

fn teacher_iteration(
    state: &mut TeacherState,
    scenes: &[Scene],
    sched: &NoiseSchedule,
) -> Result<TeacherMetrics> {
    let batch = state.tc.batch;
    let mut rng = derive_rng(state.tc.seed, "teacher.iter", state.iter);

    // All randomness up front, in a fixed order.
    let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..scenes.len())).collect();
    let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..sched.len())).collect();
    let eps: Vec<ArrayD<f32>> = idx
        .iter()
        .map(|&i| {
            let s = scenes[i].gt_background.raw_dim();
            ArrayD::from_shape_fn(s.into_dyn(), |_| rng.sample::<f32, _>(StandardNormal))
        })
        .collect();

    let mut acc: Vec<ArrayD<f32>> =
        state.params.arrays().iter().map(|a| ArrayD::zeros(a.raw_dim())).collect();
    let (mut noise_sum, mut mask_sum) = (0.0f64, 0.0f64);

    for k in 0..batch {
        let scene = &scenes[idx[k]];
        let inp = sample_inputs(scene, &state.tc.mask_site)?;
        let z_t = forward_diffuse(sched, &inp.z_gt, ts[k], &eps[k])?;

        let mut gb = GraphBackend::new(state.params.arrays());
        let cond_in = gb.constant(inp.cond_input);
        let cond_tokens = state.cond.forward(&mut gb, &cond_in);
        let zt_c = gb.constant(z_t);
        let m_c = gb.constant(inp.mask_channel);
        let zr_c = gb.constant(inp.z_ref);
        let input = concat_input(&mut gb, &zt_c, &m_c, &zr_c);
        let (eps_hat, trace) =
            state.unet.forward(&mut gb, &mut StandardAttn, &input, ts[k], &cond_tokens);

        let eps_c = gb.constant(eps[k].clone());
        let d = gb.sub(&eps_hat, &eps_c);
        let sq = gb.mul(&d, &d);
        let noise_mse = gb.mean_all(&sq);

        let map = trace
            .cross
            .iter()
            .find(|(id, _)| id == &state.tc.mask_site)
            .map(|(_, n)| n.clone())
            .ok_or_else(|| {
                Error::config(format!("site {} recorded no attention map", state.tc.mask_site))
            })?;
        let ml = mask_loss(&mut gb, &map, VISUAL_TOKEN, &inp.m_fg_tokens)?;
        let ml_w = gb.scale(&ml, state.tc.lambda_mask);
        let total = gb.add(&noise_mse, &ml_w);
        let root = gb.scale(&total, 1.0 / batch as f64);

        let nv = gb.scalar(&noise_mse);
        let mv = gb.scalar(&ml);
        if !gb.scalar(&total).is_finite() {
            return Err(Error::numeric(format!(
                "teacher loss diverged at iteration {} (noise {nv}, localization {mv})",
                state.iter
            )));
        }
        noise_sum += nv as f64;
        mask_sum += mv as f64;

        for (a, g) in acc.iter_mut().zip(gb.grads(root)) {
            *a += &g;
        }
    }

    state.opt.apply(&mut state.params, &acc)?;
    let it = state.iter;
    state.iter += 1;
    let noise_mse = (noise_sum / batch as f64) as f32;
    let mask_term = (mask_sum / batch as f64) as f32;
    Ok(TeacherMetrics {
        iter: it,
        total: noise_mse + (state.tc.lambda_mask as f32) * mask_term,
        noise_mse,
        mask_term,
    })
}

/// Runs `iters` training iterations, appending one `teacher`-tagged record
/// per iteration to `log`. On a numeric fault the current state is dumped
/// into `dump_dir` (when given) before the error propagates.
pub fn train_teacher(
    state: &mut TeacherState,
    scenes: &[Scene],
    sched: &NoiseSchedule,
    iters: u64,
    mut log: Option<&mut dyn Write>,
    dump_dir: Option<&Path>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::config("teacher training needs at least one scene"));
    }
    for _ in 0..iters {
        let m = match teacher_iteration(state, scenes, sched) {
            Ok(m) => m,
            Err(e) => {
                if let (Some(dir), Error::Numeric(_)) = (dump_dir, &e) {
                    // Best-effort dump for post-mortem; the fault itself is
                    // what the caller must see.
                    let _ = save_teacher(state, &dir.join("teacher-diverged.ckpt"));
                }
                return Err(e);
            }
        };
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "teacher\t{}\t{}\t{}\t{}", m.iter, m.total, m.noise_mse, m.mask_term)?;
        }
        state.history.push(m);
    }
    Ok(())
}

pub fn save_teacher(state: &TeacherState, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_params(&state.params);
    state.cfg.to_meta(&mut ck.meta);
    ck.meta.insert("train.role".into(), "teacher".into());
    ck.meta.insert("train.iter".into(), state.iter.to_string());
    ck.meta.insert("teacher.seed".into(), state.tc.seed.to_string());
    ck.meta.insert("teacher.batch".into(), state.tc.batch.to_string());
    ck.meta.insert("teacher.lr".into(), state.tc.lr.to_string());
    ck.meta.insert("teacher.weight_decay".into(), state.tc.weight_decay.to_string());
    ck.meta.insert("teacher.lambda_mask".into(), state.tc.lambda_mask.to_string());
    ck.meta.insert("teacher.mask_site".into(), state.tc.mask_site.clone());
    state.opt.append_to_checkpoint(&mut ck, "opt", &state.params);
    ck.write(path)
}

pub fn load_teacher(path: &Path) -> Result<TeacherState> {
    let ck = Checkpoint::read(path)?;
    match ck.meta.get("train.role").map(String::as_str) {
        Some("teacher") => {}
        other => {
            return Err(Error::data(format!(
                "checkpoint at {} holds role {:?}, expected a teacher",
                path.display(),
                other
            )))
        }
    }
    let cfg = UNetConfig::from_meta(&ck.meta)?;
    let tc = TeacherConfig {
        seed: ck.meta_parsed("teacher.seed")?,
        batch: ck.meta_parsed("teacher.batch")?,
        lr: ck.meta_parsed("teacher.lr")?,
        weight_decay: ck.meta_parsed("teacher.weight_decay")?,
        lambda_mask: ck.meta_parsed("teacher.lambda_mask")?,
        mask_site: ck.meta_parsed("teacher.mask_site")?,
    };
    tc.validate(&cfg)?;

    let mut ps = ParamSet::new();
    let mut rng = derive_rng(0, "teacher.rebuild", 0);
    let unet = UNet::new(&cfg, "unet", &mut ps, &mut rng)?;
    let cond = CondEncoder::new(&cfg, "cond", &mut ps, &mut rng)?;
    ck.load_into(&mut ps)?;
    let opt = AdamW::from_checkpoint(&ck, "opt", &ps, |_| true)?;
    let iter = ck.meta_parsed("train.iter")?;
    Ok(TeacherState { cfg, tc, unet, cond, params: ps, opt, iter, history: Vec::new() })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::unet::ATTN_SITES;
    use crate::synthgen::{generate_corpus, CorpusConfig};

    pub(crate) fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            latent_channels: 3,
            widths: [4, 8, 8],
            token_dim: 8,
            heads: 2,
            cond_tokens: 1,
            cond_dim: 8,
            time_dim: 8,
            groups: 2,
            attn_sites: ATTN_SITES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn tiny_corpus(count: u32, seed: u64) -> Vec<Scene> {
        let cfg = CorpusConfig { image_size: 16, count, ..CorpusConfig::default() };
        generate_corpus(&cfg, seed).unwrap()
    }

    fn tiny_tc(seed: u64, batch: usize) -> TeacherConfig {
        TeacherConfig { seed, batch, ..TeacherConfig::default() }
    }

    #[test]
    fn init_is_deterministic_and_validates_config() {
        let cfg = tiny_cfg();
        let a = init_teacher(&cfg, tiny_tc(5, 4)).unwrap();
        let b = init_teacher(&cfg, tiny_tc(5, 4)).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for id in 0..a.params.len() {
            assert_eq!(a.params.get(id), b.params.get(id));
        }

        let bad_site = TeacherConfig { mask_site: "nowhere".into(), ..tiny_tc(5, 4) };
        assert!(init_teacher(&cfg, bad_site).is_err());
        // A real site name that carries no attention block in this config.
        let no_attn = UNetConfig { attn_sites: vec!["mid".into()], ..cfg.clone() };
        let unplaced = TeacherConfig { mask_site: "up.1".into(), ..tiny_tc(5, 4) };
        assert!(init_teacher(&no_attn, unplaced).is_err());
        assert!(init_teacher(&cfg, TeacherConfig { batch: 0, ..tiny_tc(5, 4) }).is_err());
    }

    /// A short run on a small corpus reduces the training objective.
    #[test]
    fn short_run_reduces_loss() {
        let scenes = tiny_corpus(32, 100);
        let sched = NoiseSchedule::default_linear();
        let mut state = init_teacher(&tiny_cfg(), tiny_tc(7, 4)).unwrap();
        train_teacher(&mut state, &scenes, &sched, 150, None, None).unwrap();

        let early: f32 =
            state.history[..20].iter().map(|m| m.total).sum::<f32>() / 20.0;
        let late: f32 =
            state.history[130..].iter().map(|m| m.total).sum::<f32>() / 20.0;
        assert!(
            late < early,
            "teacher loss did not improve: first-20 mean {early}, last-20 mean {late}"
        );
        assert_eq!(state.iter, 150);
        assert!(state.history.iter().all(|m| m.total.is_finite()));
    }

    /// Interrupting after N iterations, persisting, and resuming replays
    /// the identical trajectory: parameters, optimizer moments, and every
    /// logged metric match the uninterrupted run bitwise.
    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let scenes = tiny_corpus(12, 200);
        let sched = NoiseSchedule::default_linear();

        let mut straight = init_teacher(&tiny_cfg(), tiny_tc(9, 2)).unwrap();
        train_teacher(&mut straight, &scenes, &sched, 6, None, None).unwrap();

        let mut first = init_teacher(&tiny_cfg(), tiny_tc(9, 2)).unwrap();
        train_teacher(&mut first, &scenes, &sched, 3, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        save_teacher(&first, &path).unwrap();

        let mut resumed = load_teacher(&path).unwrap();
        assert_eq!(resumed.iter, 3);
        assert_eq!(resumed.tc.mask_site, "up.1");
        train_teacher(&mut resumed, &scenes, &sched, 3, None, None).unwrap();

        for id in 0..straight.params.len() {
            assert_eq!(
                straight.params.get(id),
                resumed.params.get(id),
                "parameter {} diverged after resume",
                straight.params.name(id)
            );
        }
        let tail: Vec<TeacherMetrics> = straight.history[3..].to_vec();
        assert_eq!(tail, resumed.history);
    }

    /// A divergent run aborts with a numeric fault and leaves a state dump.
    #[test]
    fn divergence_aborts_with_dump() {
        let scenes = tiny_corpus(4, 300);
        let sched = NoiseSchedule::default_linear();
        let tc = TeacherConfig { lr: 1e18, ..tiny_tc(11, 2) };
        let mut state = init_teacher(&tiny_cfg(), tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train_teacher(&mut state, &scenes, &sched, 50, None, Some(dir.path()))
            .expect_err("absurd learning rate must diverge");
        assert_eq!(err.exit_code(), crate::error::EXIT_NUMERIC);
        assert!(dir.path().join("teacher-diverged.ckpt").exists());
    }

    /// Wrong-role checkpoints are rejected by the loader.
    #[test]
    fn loader_rejects_foreign_checkpoints() {
        let state = init_teacher(&tiny_cfg(), tiny_tc(13, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        save_teacher(&state, &path).unwrap();
        let mut ck = Checkpoint::read(&path).unwrap();
        ck.meta.insert("train.role".into(), "student".into());
        ck.write(&path).unwrap();
        assert!(load_teacher(&path).is_err());
    }
}
