//! Few-step distillation with a latent critic.
//!
//! Starting from a trained teacher, the student learns to jump from a
//! noised latent straight to the clean background in a single call, for
//! the handful of timesteps in a short trailing plan. Each iteration runs
//! three phases over one scene batch:
//!
//! 1. every sample is noised to a plan timestep and the student predicts
//!    the clean latent in one call (the noise output is converted to a
//!    clean-latent prediction inside the tape, so gradients flow through
//!    the conversion);
//! 2. the critic takes one optimizer step on real backgrounds versus the
//!    detached predictions;
//! 3. the generator takes one optimizer step on reconstruction +
//!    perceptual + adversarial + localization, scoring predictions
//!    through the *updated* critic, whose weights enter the tape as
//!    constants so only the student receives gradients.
//!
//! Mask asymmetry, by construction: the student network always consumes
//! the tight object mask, while every critic call — real, fake, and
//! generator-side — consumes the expanded object+effect mask. The
//! [`StepCapture`] hook records the exact mask arrays each call consumed
//! so runs can be audited.
//!
//! The condition encoder stays frozen during distillation; only `unet.*`
//! tensors train on the generator side.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis, Dimension, Ix3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::ToyPerceptual;
use crate::model::{
    concat_input, site_grid_divisor, Checkpoint, CondEncoder, ParamSet, StandardAttn, UNet,
    UNetConfig, VISUAL_TOKEN,
};
use crate::rng::derive_rng;
use crate::scheduler::{forward_diffuse, NoiseSchedule, TimestepPlan};
use crate::synthgen::Scene;
use crate::tensor::{Backend, FrozenParams, GraphBackend, Scalar};

use super::disc::Discriminator;
use super::losses::{disc_loss, gen_loss, mask_loss, GenLossTerms, LossWeights};
use super::optim::AdamW;
use super::teacher::{sample_inputs, SampleInputs, TeacherState};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub seed: u64,
    pub batch: usize,
    /// Learning rate shared by the generator and critic optimizers.
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Length of the trailing timestep plan the student trains on.
    pub plan_steps: usize,
    /// Attention site supervised by the localization term.
    pub mask_site: String,
    /// Enables the perceptual term (otherwise it is an exact zero).
    pub perceptual: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            seed: 0,
            batch: 8,
            lr: 1e-5,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            plan_steps: 4,
            mask_site: "up.1".to_string(),
            perceptual: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, cfg: &UNetConfig) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("distillation batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("distillation learning rate {} invalid", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "distillation weight decay {} invalid",
                self.weight_decay
            )));
        }
        self.weights.validate()?;
        if self.plan_steps == 0 {
            return Err(Error::config("plan must have at least one step"));
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

/// Loss breakdown of one distillation iteration (batch means; the raw,
/// unweighted value of each term).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillMetrics {
    pub iter: u64,
    /// Full weighted generator objective.
    pub gen_total: f32,
    pub diff: f32,
    pub perceptual: f32,
    pub adv: f32,
    pub mask: f32,
    /// Critic hinge loss (before its optimizer step).
    pub disc: f32,
}

/// Audit record of the mask each network call consumed, appended per batch
/// member. The student entry is the mask channel fed to the generator; the
/// three critic entries are the mask channel of its real-score, fake-score,
/// and generator-side calls.
#[derive(Clone, Debug, Default)]
pub struct StepCapture {
    pub scene_indices: Vec<usize>,
    pub student_input_masks: Vec<Array2<f32>>,
    pub disc_real_masks: Vec<Array2<f32>>,
    pub disc_fake_masks: Vec<Array2<f32>>,
    pub adv_call_masks: Vec<Array2<f32>>,
}

#[derive(Clone)]
pub struct DistillState {
    pub cfg: UNetConfig,
    pub dc: DistillConfig,
    pub unet: UNet,
    pub cond: CondEncoder,
    /// Generator tensors (`unet.*` trainable, `cond.*` frozen).
    pub student: ParamSet<f32>,
    pub dnet: Discriminator,
    /// Critic tensors, fully trainable.
    pub disc: ParamSet<f32>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub iter: u64,
    pub history: Vec<DistillMetrics>,
}

/// Student starts as an exact copy of the teacher; the critic's encoder is
/// initialized from the teacher's and its head freshly seeded.
pub fn init_distill(teacher: &TeacherState, dc: DistillConfig) -> Result<DistillState> {
    dc.validate(&teacher.cfg)?;
    let student = teacher.params.clone();
    let mut disc = ParamSet::new();
    let mut rng = derive_rng(dc.seed, "distill.disc_init", 0);
    let dnet = Discriminator::new(&teacher.cfg, "disc", &mut disc, &mut rng)?;
    Discriminator::init_encoder_from(&mut disc, &teacher.params)?;
    let opt_g = AdamW::new(&student, dc.lr, dc.weight_decay, |n| n.starts_with("unet."));
    let opt_d = AdamW::new(&disc, dc.lr, dc.weight_decay, |_| true);
    Ok(DistillState {
        cfg: teacher.cfg.clone(),
        dc,
        unet: teacher.unet.clone(),
        cond: teacher.cond.clone(),
        student,
        dnet,
        disc,
        opt_g,
        opt_d,
        iter: 0,
        history: Vec::new(),
    })
}

fn cast_arr<F: Scalar>(a: &ArrayD<f32>) -> ArrayD<F> {
    a.mapv(|v| F::from_f64(v as f64))
}

fn channel_to_mask(ch: &ArrayD<f32>) -> Array2<f32> {
    ch.view()
        .into_dimensionality::<Ix3>()
        .expect("mask channel is (1, h, w)")
        .index_axis(Axis(0), 0)
        .to_owned()
}

/// One student call: condition on the object patch, denoise the noised
/// latent once at `tau`, and convert the noise estimate to a clean-latent
/// prediction inside the tape. Returns the prediction and the supervised
/// site's cross-attention map.
fn sample_predict<F: Scalar, B: Backend<F>>(
    be: &mut B,
    unet: &UNet,
    cond: &CondEncoder,
    inp: &SampleInputs,
    z_t: &ArrayD<f32>,
    tau: usize,
    alpha_bar: f64,
    mask_site: &str,
) -> Result<(B::T, B::T)> {
    let cond_in = be.constant(cast_arr::<F>(&inp.cond_input));
    let tokens = cond.forward(be, &cond_in);
    let zt = be.constant(cast_arr::<F>(z_t));
    let m = be.constant(cast_arr::<F>(&inp.mask_channel));
    let zr = be.constant(cast_arr::<F>(&inp.z_ref));
    let input = concat_input(be, &zt, &m, &zr);
    let (eps_hat, trace) = unet.forward(be, &mut StandardAttn, &input, tau, &tokens);
    let scaled = be.scale(&eps_hat, (1.0 - alpha_bar).sqrt());
    let num = be.sub(&zt, &scaled);
    let z_pred = be.scale(&num, 1.0 / alpha_bar.sqrt());
    let map = trace
        .cross
        .iter()
        .find(|(id, _)| id == mask_site)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::config(format!("site {mask_site} recorded no attention map")))?;
    Ok((z_pred, map))
}

struct SampleObjective<T> {
    /// `gen total + mask weight · localization`.
    total: T,
    terms: GenLossTerms<T>,
    mask_term: T,
}

/// The full per-sample generator objective, continued on the tape that
/// produced `z_pred`/`map`. The critic weights enter as constants, so its
/// score backpropagates into the prediction but not into the critic.
fn sample_objective<F: Scalar, B: Backend<F>>(
    be: &mut B,
    dnet: &Discriminator,
    disc_arrays: &[ArrayD<F>],
    z_pred: &B::T,
    map: &B::T,
    inp: &SampleInputs,
    tau: usize,
    perceptual: Option<&ToyPerceptual>,
    w: &LossWeights,
) -> Result<SampleObjective<B::T>> {
    let meff = be.constant(cast_arr::<F>(&inp.mask_eff_channel));
    let zr = be.constant(cast_arr::<F>(&inp.z_ref));
    let fake_score = {
        let mut frozen = FrozenParams::new(&mut *be, disc_arrays);
        dnet.score(&mut frozen, z_pred, &meff, &zr, tau)
    };
    let zgt = be.constant(cast_arr::<F>(&inp.z_gt));
    let terms = gen_loss(be, z_pred, &zgt, &fake_score, perceptual, w)?;
    let ml = mask_loss(be, map, VISUAL_TOKEN, &inp.m_fg_tokens)?;
    let mlw = be.scale(&ml, w.mask);
    let total = be.add(&terms.total, &mlw);
    Ok(SampleObjective { total, terms, mask_term: ml })
}

fn distill_step(
    state: &mut DistillState,
    scenes: &[Scene],
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    perceptual: Option<&ToyPerceptual>,
    mut capture: Option<&mut StepCapture>,
) -> Result<DistillMetrics> {
    let batch = state.dc.batch;
    let mut rng = derive_rng(state.dc.seed, "distill.iter", state.iter);

    // All randomness up front, in a fixed order, so resumed runs replay
    // the identical trajectory.
    let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..scenes.len())).collect();
    let taus: Vec<usize> =
        (0..batch).map(|_| plan.taus()[rng.gen_range(0..plan.len())]).collect();
    let eps: Vec<ArrayD<f32>> = idx
        .iter()
        .map(|&i| {
            let s = scenes[i].gt_background.raw_dim();
            ArrayD::from_shape_fn(s.into_dyn(), |_| rng.sample::<f32, _>(StandardNormal))
        })
        .collect();

    let mut inputs = Vec::with_capacity(batch);
    let mut zts = Vec::with_capacity(batch);
    for k in 0..batch {
        let inp = sample_inputs(&scenes[idx[k]], &state.dc.mask_site)?;
        zts.push(forward_diffuse(sched, &inp.z_gt, taus[k], &eps[k])?);
        inputs.push(inp);
    }

    // Phase 1: one-call prediction per sample, each on its own tape (kept
    // alive so the generator phase can continue it).
    let mut tapes = Vec::with_capacity(batch);
    let mut preds = Vec::with_capacity(batch);
    for k in 0..batch {
        let mut gb = GraphBackend::new(state.student.arrays());
        let ab = sched.alpha_bar(taus[k])?;
        let (z_pred, map) = sample_predict(
            &mut gb,
            &state.unet,
            &state.cond,
            &inputs[k],
            &zts[k],
            taus[k],
            ab,
            &state.dc.mask_site,
        )?;
        let z_pred_val = gb.value(&z_pred);
        if !z_pred_val.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "student prediction diverged at iteration {}",
                state.iter
            )));
        }
        tapes.push(gb);
        preds.push((z_pred, map, z_pred_val));
        if let Some(cap) = capture.as_deref_mut() {
            cap.scene_indices.push(idx[k]);
            cap.student_input_masks.push(channel_to_mask(&inputs[k].mask_channel));
        }
    }

    // Phase 2: critic step on real backgrounds vs detached predictions,
    // conditioned on the expanded object+effect mask in both calls.
    let disc_val;
    {
        let mut db = GraphBackend::new(state.disc.arrays());
        let mut real_scores = Vec::with_capacity(batch);
        let mut fake_scores = Vec::with_capacity(batch);
        for k in 0..batch {
            let inp = &inputs[k];
            let zgt = db.constant(inp.z_gt.clone());
            let meff = db.constant(inp.mask_eff_channel.clone());
            let zr = db.constant(inp.z_ref.clone());
            real_scores.push(state.dnet.score(&mut db, &zgt, &meff, &zr, taus[k]));
            let zp = db.constant(preds[k].2.clone());
            fake_scores.push(state.dnet.score(&mut db, &zp, &meff, &zr, taus[k]));
            if let Some(cap) = capture.as_deref_mut() {
                cap.disc_real_masks.push(channel_to_mask(&inp.mask_eff_channel));
                cap.disc_fake_masks.push(channel_to_mask(&inp.mask_eff_channel));
            }
        }
        let dloss = disc_loss(&mut db, &real_scores, &fake_scores)?;
        disc_val = db.scalar(&dloss);
        if !disc_val.is_finite() {
            return Err(Error::numeric(format!(
                "critic loss diverged at iteration {}",
                state.iter
            )));
        }
        let dgrads = db.grads(dloss);
        drop(db);
        state.opt_d.apply(&mut state.disc, &dgrads)?;
    }

    // Phase 3: generator step, scored through the critic as it now stands.
    let disc_arrays = state.disc.arrays();
    let mut acc: Vec<ArrayD<f32>> =
        state.student.arrays().iter().map(|a| ArrayD::zeros(a.raw_dim())).collect();
    let mut sums = [0.0f64; 5];
    for (k, mut gb) in tapes.into_iter().enumerate() {
        let (z_pred, map, _) = &preds[k];
        let obj = sample_objective(
            &mut gb,
            &state.dnet,
            disc_arrays,
            z_pred,
            map,
            &inputs[k],
            taus[k],
            perceptual,
            &state.dc.weights,
        )?;
        let total = gb.scalar(&obj.total);
        if !total.is_finite() {
            return Err(Error::numeric(format!(
                "generator loss diverged at iteration {}",
                state.iter
            )));
        }
        sums[0] += total as f64;
        sums[1] += gb.scalar(&obj.terms.diff) as f64;
        sums[2] += gb.scalar(&obj.terms.perceptual) as f64;
        sums[3] += gb.scalar(&obj.terms.adv) as f64;
        sums[4] += gb.scalar(&obj.mask_term) as f64;
        let root = gb.scale(&obj.total, 1.0 / batch as f64);
        for (a, g) in acc.iter_mut().zip(gb.grads(root)) {
            *a += &g;
        }
        if let Some(cap) = capture.as_deref_mut() {
            cap.adv_call_masks.push(channel_to_mask(&inputs[k].mask_eff_channel));
        }
    }
    state.opt_g.apply(&mut state.student, &acc)?;

    let it = state.iter;
    state.iter += 1;
    let b = batch as f64;
    Ok(DistillMetrics {
        iter: it,
        gen_total: (sums[0] / b) as f32,
        diff: (sums[1] / b) as f32,
        perceptual: (sums[2] / b) as f32,
        adv: (sums[3] / b) as f32,
        mask: (sums[4] / b) as f32,
        disc: disc_val,
    })
}

/// Runs `iters` distillation iterations, appending one `distill`-tagged
/// record per iteration to `log`. `capture`, when given, accumulates the
/// per-call mask audit of every batch member. On a numeric fault the
/// current state is dumped into `dump_dir` (when given) before the error
/// propagates.
pub fn run_distill(
    state: &mut DistillState,
    scenes: &[Scene],
    sched: &NoiseSchedule,
    iters: u64,
    mut log: Option<&mut dyn Write>,
    dump_dir: Option<&Path>,
    mut capture: Option<&mut StepCapture>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::config("distillation needs at least one scene"));
    }
    let plan = TimestepPlan::trailing(sched.len(), state.dc.plan_steps)?;
    let perceptual = if state.dc.perceptual {
        Some(ToyPerceptual::new(ToyPerceptual::DEFAULT_SEED, state.cfg.latent_channels))
    } else {
        None
    };
    for _ in 0..iters {
        let m = match distill_step(
            state,
            scenes,
            sched,
            &plan,
            perceptual.as_ref(),
            capture.as_deref_mut(),
        ) {
            Ok(m) => m,
            Err(e) => {
                if let (Some(dir), Error::Numeric(_)) = (dump_dir, &e) {
                    let _ = save_distill(state, &dir.join("distill-diverged.ckpt"));
                }
                return Err(e);
            }
        };
        if let Some(out) = log.as_deref_mut() {
            writeln!(
                out,
                "distill\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.iter, m.gen_total, m.diff, m.perceptual, m.adv, m.mask, m.disc
            )?;
        }
        state.history.push(m);
    }
    Ok(())
}

pub fn save_distill(state: &DistillState, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_params(&state.student);
    for (name, arr) in state.disc.iter() {
        ck.arrays.push((name.to_string(), arr.clone()));
    }
    state.cfg.to_meta(&mut ck.meta);
    ck.meta.insert("train.role".into(), "student".into());
    ck.meta.insert("train.iter".into(), state.iter.to_string());
    ck.meta.insert("distill.seed".into(), state.dc.seed.to_string());
    ck.meta.insert("distill.batch".into(), state.dc.batch.to_string());
    ck.meta.insert("distill.lr".into(), state.dc.lr.to_string());
    ck.meta.insert("distill.weight_decay".into(), state.dc.weight_decay.to_string());
    ck.meta.insert("distill.plan_steps".into(), state.dc.plan_steps.to_string());
    ck.meta.insert("distill.mask_site".into(), state.dc.mask_site.clone());
    ck.meta.insert("distill.perceptual".into(), state.dc.perceptual.to_string());
    ck.meta.insert("distill.w_diff".into(), state.dc.weights.diff.to_string());
    ck.meta.insert("distill.w_lpips".into(), state.dc.weights.lpips.to_string());
    ck.meta.insert("distill.w_gan".into(), state.dc.weights.gan.to_string());
    ck.meta.insert("distill.w_mask".into(), state.dc.weights.mask.to_string());
    state.opt_g.append_to_checkpoint(&mut ck, "opt_g", &state.student);
    state.opt_d.append_to_checkpoint(&mut ck, "opt_d", &state.disc);
    ck.write(path)
}

pub fn load_distill(path: &Path) -> Result<DistillState> {
    let ck = Checkpoint::read(path)?;
    match ck.meta.get("train.role").map(String::as_str) {
        Some("student") => {}
        other => {
            return Err(Error::data(format!(
                "checkpoint at {} holds role {:?}, expected a distilled student",
                path.display(),
                other
            )))
        }
    }
    let cfg = UNetConfig::from_meta(&ck.meta)?;
    let dc = DistillConfig {
        seed: ck.meta_parsed("distill.seed")?,
        batch: ck.meta_parsed("distill.batch")?,
        lr: ck.meta_parsed("distill.lr")?,
        weight_decay: ck.meta_parsed("distill.weight_decay")?,
        plan_steps: ck.meta_parsed("distill.plan_steps")?,
        mask_site: ck.meta_parsed("distill.mask_site")?,
        perceptual: ck.meta_parsed("distill.perceptual")?,
        weights: LossWeights {
            diff: ck.meta_parsed("distill.w_diff")?,
            lpips: ck.meta_parsed("distill.w_lpips")?,
            gan: ck.meta_parsed("distill.w_gan")?,
            mask: ck.meta_parsed("distill.w_mask")?,
        },
    };
    dc.validate(&cfg)?;

    let mut student = ParamSet::new();
    let mut rng = derive_rng(0, "distill.rebuild", 0);
    let unet = UNet::new(&cfg, "unet", &mut student, &mut rng)?;
    let cond = CondEncoder::new(&cfg, "cond", &mut student, &mut rng)?;
    ck.load_into(&mut student)?;

    let mut disc = ParamSet::new();
    let dnet = Discriminator::new(&cfg, "disc", &mut disc, &mut rng)?;
    ck.load_into(&mut disc)?;

    let opt_g = AdamW::from_checkpoint(&ck, "opt_g", &student, |n| n.starts_with("unet."))?;
    let opt_d = AdamW::from_checkpoint(&ck, "opt_d", &disc, |_| true)?;
    let iter = ck.meta_parsed("train.iter")?;
    Ok(DistillState {
        cfg,
        dc,
        unet,
        cond,
        student,
        dnet,
        disc,
        opt_g,
        opt_d,
        iter,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rad::teacher::tests::{tiny_cfg, tiny_corpus};
    use crate::rad::teacher::{init_teacher, save_teacher, TeacherConfig};
    use crate::tensor::PlainBackend;

    fn tiny_teacher(seed: u64) -> TeacherState {
        init_teacher(&tiny_cfg(), TeacherConfig { seed, ..TeacherConfig::default() }).unwrap()
    }

    fn tiny_dc(seed: u64, batch: usize) -> DistillConfig {
        DistillConfig { seed, batch, ..DistillConfig::default() }
    }

    #[test]
    fn init_clones_teacher_and_splits_trainability() {
        let teacher = tiny_teacher(21);
        let a = init_distill(&teacher, tiny_dc(3, 2)).unwrap();
        assert_eq!(a.student.len(), teacher.params.len());
        for id in 0..a.student.len() {
            assert_eq!(a.student.get(id), teacher.params.get(id));
        }
        // Generator optimizer trains the denoiser only; the critic
        // optimizer trains everything.
        for id in 0..a.student.len() {
            let name = a.student.name(id);
            assert_eq!(a.opt_g.is_trainable(id), name.starts_with("unet."), "{name}");
        }
        for id in 0..a.disc.len() {
            assert!(a.opt_d.is_trainable(id));
        }
        // Critic head initialization is a pure function of the seed.
        let b = init_distill(&teacher, tiny_dc(3, 2)).unwrap();
        for id in 0..a.disc.len() {
            assert_eq!(a.disc.get(id), b.disc.get(id));
        }
        assert_eq!(a.iter, 0);

        let bad = DistillConfig { weights: LossWeights { gan: -1.0, ..LossWeights::default() }, ..tiny_dc(3, 2) };
        assert!(init_distill(&teacher, bad).is_err());
    }

    /// With every weight but the reconstruction term at zero, one
    /// distillation step must update the student exactly like a plain
    /// latent-regression step: the zero-scaled adversarial, perceptual,
    /// and localization branches contribute literal zeros.
    #[test]
    fn zero_weight_step_is_pure_latent_regression() {
        let scenes = tiny_corpus(8, 400);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(23);
        let dc = DistillConfig {
            weights: LossWeights { diff: 1.0, lpips: 0.0, gan: 0.0, mask: 0.0 },
            perceptual: false,
            plan_steps: 2,
            ..tiny_dc(5, 2)
        };
        let mut state = init_distill(&teacher, dc.clone()).unwrap();
        let mut oracle = state.clone();

        run_distill(&mut state, &scenes, &sched, 1, None, None, None).unwrap();
        let m = state.history[0];
        assert_eq!(m.gen_total, m.diff, "zero-weight terms leaked into the total");
        assert_eq!(m.perceptual, 0.0);

        // Hand-built regression step with the same random draws.
        let plan = TimestepPlan::trailing(sched.len(), dc.plan_steps).unwrap();
        let batch = dc.batch;
        let mut rng = derive_rng(dc.seed, "distill.iter", 0);
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..scenes.len())).collect();
        let taus: Vec<usize> =
            (0..batch).map(|_| plan.taus()[rng.gen_range(0..plan.len())]).collect();
        let eps: Vec<ArrayD<f32>> = idx
            .iter()
            .map(|&i| {
                let s = scenes[i].gt_background.raw_dim();
                ArrayD::from_shape_fn(s.into_dyn(), |_| rng.sample::<f32, _>(StandardNormal))
            })
            .collect();
        let mut acc: Vec<ArrayD<f32>> =
            oracle.student.arrays().iter().map(|a| ArrayD::zeros(a.raw_dim())).collect();
        for k in 0..batch {
            let inp = sample_inputs(&scenes[idx[k]], &dc.mask_site).unwrap();
            let z_t = forward_diffuse(&sched, &inp.z_gt, taus[k], &eps[k]).unwrap();
            let mut gb = GraphBackend::new(oracle.student.arrays());
            let ab = sched.alpha_bar(taus[k]).unwrap();
            let (z_pred, _map) = sample_predict(
                &mut gb,
                &oracle.unet,
                &oracle.cond,
                &inp,
                &z_t,
                taus[k],
                ab,
                &dc.mask_site,
            )
            .unwrap();
            let zgt = gb.constant(inp.z_gt.clone());
            let d = gb.sub(&z_pred, &zgt);
            let sq = gb.mul(&d, &d);
            let diff = gb.mean_all(&sq);
            let root = gb.scale(&diff, 1.0 / batch as f64);
            for (a, g) in acc.iter_mut().zip(gb.grads(root)) {
                *a += &g;
            }
        }
        oracle.opt_g.apply(&mut oracle.student, &acc).unwrap();

        for id in 0..state.student.len() {
            assert_eq!(
                state.student.get(id),
                oracle.student.get(id),
                "parameter {} differs from the pure regression step",
                state.student.name(id)
            );
        }
    }

    /// Full generator objective (reconstruction + perceptual + adversarial
    /// + localization, critic frozen) against central finite differences
    /// in f64, probing the parameters with the largest gradients plus a
    /// spread of arbitrary ones.
    #[test]
    fn generator_gradients_match_finite_differences() {
        let scenes = tiny_corpus(2, 500);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(31);
        let state = init_distill(&teacher, tiny_dc(7, 1)).unwrap();

        let mut ps64 = state.student.cast::<f64>();
        // Move zero-initialized projections off zero so no gradient path
        // is silently dead.
        let mut prng = derive_rng(77, "distill.fd", 0);
        ps64.randomize_all(&mut prng, 0.1);
        let disc64: Vec<ArrayD<f64>> =
            state.disc.cast::<f64>().arrays().to_vec();
        let perceptual = ToyPerceptual::new(ToyPerceptual::DEFAULT_SEED, state.cfg.latent_channels);
        let w = LossWeights::default();

        let inp = sample_inputs(&scenes[0], &state.dc.mask_site).unwrap();
        let tau = 499;
        let ab = sched.alpha_bar(tau).unwrap();
        let mut erng = derive_rng(78, "distill.fd", 1);
        let eps = ArrayD::from_shape_fn(inp.z_gt.raw_dim(), |_| {
            erng.sample::<f32, _>(StandardNormal)
        });
        let z_t = forward_diffuse(&sched, &inp.z_gt, tau, &eps).unwrap();

        let eval = |ps: &ParamSet<f64>| -> f64 {
            let mut be = PlainBackend::new(ps.arrays());
            let (z_pred, map) = sample_predict(
                &mut be, &state.unet, &state.cond, &inp, &z_t, tau, ab, &state.dc.mask_site,
            )
            .unwrap();
            let obj = sample_objective(
                &mut be, &state.dnet, &disc64, &z_pred, &map, &inp, tau, Some(&perceptual), &w,
            )
            .unwrap();
            be.scalar(&obj.total)
        };

        let grads = {
            let mut gb = GraphBackend::new(ps64.arrays());
            let (z_pred, map) = sample_predict(
                &mut gb, &state.unet, &state.cond, &inp, &z_t, tau, ab, &state.dc.mask_site,
            )
            .unwrap();
            let obj = sample_objective(
                &mut gb, &state.dnet, &disc64, &z_pred, &map, &inp, tau, Some(&perceptual), &w,
            )
            .unwrap();
            gb.grads(obj.total)
        };

        // Top gradients plus an even spread across the tensor list.
        let mut ranked: Vec<usize> = (0..ps64.len()).collect();
        ranked.sort_by(|&a, &b| {
            let ma = grads[a].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mb = grads[b].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            mb.partial_cmp(&ma).unwrap()
        });
        let mut probe_ids: Vec<usize> = ranked[..6].to_vec();
        let stride = (ps64.len() / 6).max(1);
        probe_ids.extend((0..ps64.len()).step_by(stride).take(6));
        probe_ids.sort_unstable();
        probe_ids.dedup();

        let mut checked = 0;
        for id in probe_ids {
            let flat = grads[id]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            let g = grads[id].as_slice().unwrap()[flat];
            let theta = ps64.get(id).as_slice().unwrap()[flat];
            let h = 1e-5 * theta.abs().max(1.0);
            let mut plus = ps64.clone();
            plus.get_mut(id).as_slice_mut().unwrap()[flat] = theta + h;
            let mut minus = ps64.clone();
            minus.get_mut(id).as_slice_mut().unwrap()[flat] = theta - h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (fd - g).abs();
            let tol = 1e-3 * fd.abs().max(g.abs()).max(1e-6);
            assert!(
                err <= tol,
                "gradient mismatch on {} [{}]: autograd {g:.6e}, finite difference {fd:.6e}",
                ps64.name(id),
                flat
            );
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} probes ran");
    }

    /// Audits the mask asymmetry on live iterations: the generator consumes
    /// the tight object mask, the critic the expanded object+effect mask,
    /// in its update and in the generator-side score alike.
    #[test]
    fn capture_shows_tight_generator_and_expanded_critic_masks() {
        let scenes = tiny_corpus(16, 600);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(41);
        let mut state = init_distill(&teacher, tiny_dc(9, 2)).unwrap();
        let mut cap = StepCapture::default();
        run_distill(&mut state, &scenes, &sched, 3, None, None, Some(&mut cap)).unwrap();

        let n = 3 * state.dc.batch;
        assert_eq!(cap.scene_indices.len(), n);
        assert_eq!(cap.student_input_masks.len(), n);
        assert_eq!(cap.disc_real_masks.len(), n);
        assert_eq!(cap.disc_fake_masks.len(), n);
        assert_eq!(cap.adv_call_masks.len(), n);

        let mut saw_expansion = false;
        for i in 0..n {
            let scene = &scenes[cap.scene_indices[i]];
            assert_eq!(cap.student_input_masks[i], scene.m_obj, "entry {i}: generator mask");
            assert_eq!(cap.disc_real_masks[i], scene.m_obj_eff, "entry {i}: critic real mask");
            assert_eq!(cap.disc_fake_masks[i], scene.m_obj_eff, "entry {i}: critic fake mask");
            assert_eq!(cap.adv_call_masks[i], scene.m_obj_eff, "entry {i}: adversarial mask");
            saw_expansion |= scene.m_obj_eff != scene.m_obj;
        }
        assert!(saw_expansion, "corpus produced no scene with an effect region");
    }

    /// Reconstruction-dominated distillation makes measurable progress
    /// from a fresh initialization.
    #[test]
    fn short_run_reduces_objective() {
        let scenes = tiny_corpus(64, 700);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(51);
        let dc = DistillConfig {
            lr: 1e-3,
            weights: LossWeights { diff: 1.0, lpips: 0.0, gan: 0.0, mask: 0.01 },
            perceptual: false,
            plan_steps: 1,
            ..tiny_dc(11, 4)
        };
        let mut state = init_distill(&teacher, dc).unwrap();
        run_distill(&mut state, &scenes, &sched, 150, None, None, None).unwrap();

        let early: f32 =
            state.history[..20].iter().map(|m| m.gen_total).sum::<f32>() / 20.0;
        let late: f32 =
            state.history[130..].iter().map(|m| m.gen_total).sum::<f32>() / 20.0;
        assert!(
            late < early,
            "objective did not improve: first-20 mean {early}, last-20 mean {late}"
        );
        assert!(state.history.iter().all(|m| m.gen_total.is_finite() && m.disc.is_finite()));
    }

    /// After a short adversarial run the critic scores real backgrounds
    /// above the student's current predictions.
    #[test]
    fn critic_separates_real_from_predicted() {
        let scenes = tiny_corpus(16, 800);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(61);
        let dc = DistillConfig { lr: 1e-3, perceptual: false, plan_steps: 1, ..tiny_dc(13, 4) };
        let mut state = init_distill(&teacher, dc).unwrap();
        run_distill(&mut state, &scenes, &sched, 60, None, None, None).unwrap();

        let tau = 999;
        let ab = sched.alpha_bar(tau).unwrap();
        let mut rng = derive_rng(62, "critic.eval", 0);
        let (mut real_sum, mut fake_sum) = (0.0f64, 0.0f64);
        for scene in &scenes[..8] {
            let inp = sample_inputs(scene, &state.dc.mask_site).unwrap();
            let eps = ArrayD::from_shape_fn(inp.z_gt.raw_dim(), |_| {
                rng.sample::<f32, _>(StandardNormal)
            });
            let z_t = forward_diffuse(&sched, &inp.z_gt, tau, &eps).unwrap();
            let z_pred = {
                let mut be = PlainBackend::new(state.student.arrays());
                let (zp, _) = sample_predict(
                    &mut be, &state.unet, &state.cond, &inp, &z_t, tau, ab, &state.dc.mask_site,
                )
                .unwrap();
                be.value(&zp)
            };
            let real = super::super::disc::discriminator_score(
                &state.dnet, &state.disc, &inp.z_gt, &scene.m_obj_eff, &inp.z_ref, tau,
            )
            .unwrap();
            let fake = super::super::disc::discriminator_score(
                &state.dnet, &state.disc, &z_pred, &scene.m_obj_eff, &inp.z_ref, tau,
            )
            .unwrap();
            real_sum += real as f64;
            fake_sum += fake as f64;
        }
        assert!(
            real_sum > fake_sum,
            "critic failed to separate: real mean {}, fake mean {}",
            real_sum / 8.0,
            fake_sum / 8.0
        );
    }

    /// Interrupting, persisting, and resuming replays the identical
    /// trajectory for the student, the critic, and every logged metric.
    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let scenes = tiny_corpus(12, 900);
        let sched = NoiseSchedule::default_linear();
        let teacher = tiny_teacher(71);
        let dc = DistillConfig { plan_steps: 2, ..tiny_dc(15, 2) };

        let mut straight = init_distill(&teacher, dc.clone()).unwrap();
        run_distill(&mut straight, &scenes, &sched, 6, None, None, None).unwrap();

        let mut first = init_distill(&teacher, dc).unwrap();
        run_distill(&mut first, &scenes, &sched, 3, None, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ckpt");
        save_distill(&first, &path).unwrap();

        let mut resumed = load_distill(&path).unwrap();
        assert_eq!(resumed.iter, 3);
        assert_eq!(resumed.dc.plan_steps, 2);
        assert!(resumed.dc.perceptual);
        run_distill(&mut resumed, &scenes, &sched, 3, None, None, None).unwrap();

        for id in 0..straight.student.len() {
            assert_eq!(
                straight.student.get(id),
                resumed.student.get(id),
                "student parameter {} diverged after resume",
                straight.student.name(id)
            );
        }
        for id in 0..straight.disc.len() {
            assert_eq!(
                straight.disc.get(id),
                resumed.disc.get(id),
                "critic parameter {} diverged after resume",
                straight.disc.name(id)
            );
        }
        let tail: Vec<DistillMetrics> = straight.history[3..].to_vec();
        assert_eq!(tail, resumed.history);
    }

    /// Teacher checkpoints are not accepted as distilled students.
    #[test]
    fn loader_rejects_teacher_checkpoints() {
        let teacher = tiny_teacher(81);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        save_teacher(&teacher, &path).unwrap();
        assert!(load_distill(&path).is_err());
    }
}
