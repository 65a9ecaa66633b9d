//! Latent-space discriminator for adversarial distillation.
//!
//! The body reuses the denoiser's encoder wiring — same blocks, same
//! shapes, and parameter names chosen so that every encoder tensor's
//! dot-suffix matches its counterpart in the denoiser. Initialization then
//! reduces to a name-suffix copy from a trained teacher, which starts the
//! critic with meaningful features instead of noise. The scoring head and
//! the learned null-condition tokens have no teacher counterpart and stay
//! freshly initialized.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::unet::{time_features, AttentionTrace, AttnBlock, Conv, Linear, Norm, ResBlock};
use crate::model::params::init_normal;
use crate::model::{ParamSet, UNetConfig};
use crate::tensor::backend::ParamId;
use crate::tensor::{Backend, PlainBackend, Scalar};

/// Scalar-score critic over `(candidate latent, erase mask, reference
/// latent)` triples at a given timestep. Holds parameter ids only; values
/// live in a [`ParamSet`] of its own, separate from the generator's.
#[derive(Clone)]
pub struct Discriminator {
    pub cfg: UNetConfig,
    conv_in: Conv,
    temb1: Linear,
    temb2: Linear,
    down0_res: ResBlock,
    down0_down: Conv,
    down1_res: ResBlock,
    down1_attn: Option<AttnBlock>,
    down1_down: Conv,
    down2_res: ResBlock,
    down2_attn: Option<AttnBlock>,
    head_norm: Norm,
    head_conv: Conv,
    head_out: Linear,
    null_cond: ParamId,
}

/// Tensors with no counterpart in the denoiser encoder: the scoring head
/// (norm scale/shift, conv weight/bias, linear weight/bias) and the
/// null-condition tokens.
pub const DISC_FRESH_TENSORS: usize = 7;

impl Discriminator {
    /// Registers all parameters under `prefix` and returns the wiring. The
    /// config must be the generator's, so encoder shapes line up for
    /// teacher initialization.
    pub fn new<F: Scalar>(
        cfg: &UNetConfig,
        prefix: &str,
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
    ) -> Result<Discriminator> {
        cfg.validate()?;
        let [w0, w1, w2] = cfg.widths;
        let c_in = 2 * cfg.latent_channels + 1;
        let tproj = 2 * cfg.time_dim;
        let g = cfg.groups;
        let p = |s: &str| format!("{prefix}.{s}");

        fn attn_at<F: Scalar, R: Rng>(
            cfg: &UNetConfig,
            ps: &mut ParamSet<F>,
            rng: &mut R,
            name: &str,
            id: &str,
            ch: usize,
        ) -> Option<AttnBlock> {
            if cfg.attn_sites.iter().any(|s| s == id) {
                Some(AttnBlock::new(
                    ps,
                    rng,
                    name,
                    id,
                    ch,
                    cfg.token_dim,
                    cfg.cond_dim,
                    cfg.heads,
                    cfg.groups,
                ))
            } else {
                None
            }
        }

        Ok(Discriminator {
            cfg: cfg.clone(),
            conv_in: Conv::new(ps, rng, &p("conv_in"), c_in, w0, 3, 1, 1, false),
            temb1: Linear::new(ps, rng, &p("temb1"), cfg.time_dim, tproj, false),
            temb2: Linear::new(ps, rng, &p("temb2"), tproj, tproj, false),
            down0_res: ResBlock::new(ps, rng, &p("down0.res"), w0, w0, tproj, g),
            down0_down: Conv::new(ps, rng, &p("down0.down"), w0, w1, 3, 2, 1, false),
            down1_res: ResBlock::new(ps, rng, &p("down1.res"), w1, w1, tproj, g),
            down1_attn: attn_at(cfg, ps, rng, &p("down1.attn"), "down.1", w1),
            down1_down: Conv::new(ps, rng, &p("down1.down"), w1, w2, 3, 2, 1, false),
            down2_res: ResBlock::new(ps, rng, &p("down2.res"), w2, w2, tproj, g),
            down2_attn: attn_at(cfg, ps, rng, &p("down2.attn"), "down.2", w2),
            head_norm: Norm::new(ps, &p("head.norm"), w2),
            head_conv: Conv::new(ps, rng, &p("head.conv"), w2, w2, 3, 2, 1, false),
            head_out: Linear::new(ps, rng, &p("head.out"), w2, 1, false),
            null_cond: ps.add(
                p("null_cond"),
                init_normal::<F>(rng, &[cfg.cond_tokens, cfg.cond_dim], 0.02),
            ),
        })
    }

    /// Copies every encoder tensor from a trained denoiser parameter set by
    /// name suffix, leaving head and null-condition tokens fresh. Returns
    /// the number of copied tensors after checking it is exactly everything
    /// but the fresh ones.
    pub fn init_encoder_from(
        disc_ps: &mut ParamSet<f32>,
        teacher_ps: &ParamSet<f32>,
    ) -> Result<usize> {
        let copied = disc_ps.copy_by_suffix(teacher_ps)?;
        let expected = disc_ps.len() - DISC_FRESH_TENSORS;
        if copied != expected {
            return Err(Error::config(format!(
                "critic init copied {copied} tensors, expected {expected}: \
                 encoder naming no longer mirrors the denoiser"
            )));
        }
        Ok(copied)
    }

    /// Realness score for one sample, as a rank-0 tensor of the executing
    /// backend. `z` is the candidate clean latent `(C, H, W)`, `mask` the
    /// erase mask `(1, H, W)`, `z_ref` the masked reference latent the
    /// generator saw, `t` the diffusion timestep the candidate was
    /// predicted from.
    pub fn score<F: Scalar, B: Backend<F>>(
        &self,
        be: &mut B,
        z: &B::T,
        mask: &B::T,
        z_ref: &B::T,
        t: usize,
    ) -> B::T {
        let shape = be.value(z).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut trace = AttentionTrace::default();
        let temb = time_features(be, &self.temb1, &self.temb2, t, self.cfg.time_dim);
        let cond = be.param(self.null_cond);

        let input = be.concat(&[z.clone(), mask.clone(), z_ref.clone()], 0);
        let x0 = self.conv_in.apply(be, &input);
        let s0 = self.down0_res.forward(be, &x0, &temb);
        let e0 = self.down0_down.apply(be, &s0);

        let mut s1 = self.down1_res.forward(be, &e0, &temb);
        if let Some(blk) = &self.down1_attn {
            s1 = blk.forward_standard(be, &s1, &cond, (h / 2, w / 2), &mut trace);
        }
        let e1 = self.down1_down.apply(be, &s1);

        let mut s2 = self.down2_res.forward(be, &e1, &temb);
        if let Some(blk) = &self.down2_attn {
            s2 = blk.forward_standard(be, &s2, &cond, (h / 4, w / 4), &mut trace);
        }

        // Head: norm → conv stride 2 → spatial mean → scalar readout.
        let f = self.head_norm.group(be, &s2, self.cfg.groups);
        let f = be.silu(&f);
        let f = self.head_conv.apply(be, &f);
        let f = be.silu(&f);
        let fshape = be.value(&f).shape().to_vec();
        let (ch, sp) = (fshape[0], fshape[1] * fshape[2]);
        let flat = be.reshape(&f, &[ch, sp]);
        let avg = be.constant(ArrayD::from_elem(IxDyn(&[sp, 1]), F::from_f64(1.0 / sp as f64)));
        let pooled = be.matmul(&flat, &avg);
        let pooled = be.transpose(&pooled);
        let s = self.head_out.apply(be, &pooled);
        be.reshape(&s, &[])
    }
}

/// Eager, validated scoring of one concrete sample.
pub fn discriminator_score(
    disc: &Discriminator,
    ps: &ParamSet<f32>,
    z: &ArrayD<f32>,
    mask: &Array2<f32>,
    z_ref: &ArrayD<f32>,
    t: usize,
) -> Result<f32> {
    if z.ndim() != 3 || z.shape() != z_ref.shape() {
        return Err(Error::data(format!(
            "critic input: candidate {:?} and reference {:?} must be matching (C,H,W)",
            z.shape(),
            z_ref.shape()
        )));
    }
    if mask.dim() != (z.shape()[1], z.shape()[2]) {
        return Err(Error::data(format!(
            "critic input: mask {:?} does not cover latent {:?}",
            mask.dim(),
            z.shape()
        )));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("critic input: erase mask is not binary"));
    }
    let (h, w) = mask.dim();
    let mut be = PlainBackend::new(ps.arrays());
    let zc = be.constant(z.clone());
    let mc = be.constant(
        mask.clone().into_shape_with_order(IxDyn(&[1, h, w])).expect("mask reshape"),
    );
    let rc = be.constant(z_ref.clone());
    let s = disc.score(&mut be, &zc, &mc, &rc, t);
    let v = be.scalar(&s);
    if !v.is_finite() {
        return Err(Error::numeric(format!("critic produced non-finite score {v}")));
    }
    Ok(v)
}
