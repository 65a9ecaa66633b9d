//! The conditional denoising U-Net.
//!
//! One generic forward definition serves every consumer: eager inference,
//! gradient-taped training, and cached inference (which swaps the attention
//! executor via [`AttnHook`] without touching the rest of the network).
//!
//! Layout for a 32×32 latent: three encoder stages at widths `w0,w1,w2`
//! (32² → 16² → 8²), a middle stage, and a mirrored decoder with skip
//! concatenation. Joint self+cross attention blocks sit at the named sites
//! `down.1`, `down.2` (encoder 16²/8²), `mid`, and `up.0`, `up.1` (decoder
//! 8²/16²); those names are the cache-site identifiers used elsewhere.

use ndarray::ArrayD;
use rand::Rng;

use crate::tensor::backend::{Backend, ParamId};
use crate::tensor::Scalar;

use super::params::{init_fan_in, ones, zeros, ParamSet};
use super::UNetConfig;

/// Sites that may carry an attention block, in network order.
pub const ATTN_SITES: [&str; 5] = ["down.1", "down.2", "mid", "up.0", "up.1"];

/// Sinusoidal timestep features, shape `(1, dim)`.
pub fn sinusoidal_embedding<F: Scalar>(t: usize, dim: usize) -> ArrayD<F> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push(F::from_f64((t as f64 * omega).sin()));
    }
    for i in 0..half {
        let omega = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push(F::from_f64((t as f64 * omega).cos()));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&[1, dim]), v).unwrap()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        zero_init: bool,
    ) -> Linear {
        let w = if zero_init {
            zeros::<F>(&[din, dout])
        } else {
            init_fan_in::<F>(rng, &[din, dout], din)
        };
        Linear {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), zeros::<F>(&[dout])),
        }
    }

    pub(crate) fn apply<F: Scalar, B: Backend<F>>(&self, be: &mut B, x: &B::T) -> B::T {
        let w = be.param(self.w);
        let b = be.param(self.b);
        be.linear(x, &w, &b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
}

impl Conv {
    pub(crate) fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Conv {
        let shape = [cout, cin, k, k];
        let w = if zero_init {
            zeros::<F>(&shape)
        } else {
            init_fan_in::<F>(rng, &shape, cin * k * k)
        };
        Conv {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), zeros::<F>(&[cout])),
            stride,
            pad,
        }
    }

    pub(crate) fn apply<F: Scalar, B: Backend<F>>(&self, be: &mut B, x: &B::T) -> B::T {
        let w = be.param(self.w);
        let b = be.param(self.b);
        be.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

/// Scale/shift pair serving both group norm and layer norm.
#[derive(Clone, Debug)]
pub struct Norm {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub(crate) fn new<F: Scalar>(ps: &mut ParamSet<F>, name: &str, ch: usize) -> Norm {
        Norm {
            gamma: ps.add(format!("{name}.g"), ones::<F>(&[ch])),
            beta: ps.add(format!("{name}.b"), zeros::<F>(&[ch])),
        }
    }

    pub(crate) fn group<F: Scalar, B: Backend<F>>(&self, be: &mut B, x: &B::T, groups: usize) -> B::T {
        let g = be.param(self.gamma);
        let b = be.param(self.beta);
        be.group_norm(x, &g, &b, groups, NORM_EPS)
    }

    pub(crate) fn layer<F: Scalar, B: Backend<F>>(&self, be: &mut B, x: &B::T) -> B::T {
        let g = be.param(self.gamma);
        let b = be.param(self.beta);
        be.layer_norm(x, &g, &b, NORM_EPS)
    }
}

/// Residual block: `x + conv2(silu(gn2(conv1(silu(gn1(x))) + temb)))`,
/// with a 1×1 projection on the skip when widths change. `conv2` starts at
/// zero so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct ResBlock {
    gn1: Norm,
    conv1: Conv,
    emb: Linear,
    gn2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    groups: usize,
    cout: usize,
}

impl ResBlock {
    pub(crate) fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        tproj: usize,
        groups: usize,
    ) -> ResBlock {
        ResBlock {
            gn1: Norm::new(ps, &format!("{name}.gn1"), cin),
            conv1: Conv::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1, false),
            emb: Linear::new(ps, rng, &format!("{name}.emb"), tproj, cout, false),
            gn2: Norm::new(ps, &format!("{name}.gn2"), cout),
            conv2: Conv::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, true),
            skip: if cin != cout {
                Some(Conv::new(ps, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0, false))
            } else {
                None
            },
            groups,
            cout,
        }
    }

    pub(crate) fn forward<F: Scalar, B: Backend<F>>(&self, be: &mut B, x: &B::T, temb: &B::T) -> B::T {
        let h = self.gn1.group(be, x, self.groups);
        let h = be.silu(&h);
        let h = self.conv1.apply(be, &h);
        // Per-channel timestep shift: (1, tproj) -> (1, cout) -> (cout,).
        let shift = self.emb.apply(be, temb);
        let shift = be.reshape(&shift, &[self.cout]);
        let h = be.add_bias_chan(&h, &shift);
        let h = self.gn2.group(be, &h, self.groups);
        let h = be.silu(&h);
        let h = self.conv2.apply(be, &h);
        let sk = match &self.skip {
            Some(conv) => conv.apply(be, x),
            None => x.clone(),
        };
        be.add(&h, &sk)
    }
}

/// Joint self-attention + cross-attention + feed-forward block over the
/// token grid of one feature map. All out-projections start at zero, so a
/// fresh block is the identity.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub id: String,
    pub(crate) gn_in: Norm,
    pub(crate) proj_in: Linear,
    pub(crate) ln1: Norm,
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) self_out: Linear,
    pub(crate) ln2: Norm,
    pub(crate) cq: Linear,
    pub(crate) ck: Linear,
    pub(crate) cv: Linear,
    pub(crate) cross_out: Linear,
    pub(crate) ln3: Norm,
    pub(crate) ff1: Linear,
    pub(crate) ff2: Linear,
    pub(crate) proj_out: Linear,
    pub(crate) heads: usize,
    pub(crate) d: usize,
    pub(crate) channels: usize,
    pub(crate) groups: usize,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        id: &str,
        channels: usize,
        d: usize,
        d_c: usize,
        heads: usize,
        groups: usize,
    ) -> AttnBlock {
        AttnBlock {
            id: id.to_string(),
            gn_in: Norm::new(ps, &format!("{name}.gn_in"), channels),
            proj_in: Linear::new(ps, rng, &format!("{name}.proj_in"), channels, d, false),
            ln1: Norm::new(ps, &format!("{name}.ln1"), d),
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d, d, false),
            self_out: Linear::new(ps, rng, &format!("{name}.self_out"), d, d, true),
            ln2: Norm::new(ps, &format!("{name}.ln2"), d),
            cq: Linear::new(ps, rng, &format!("{name}.cq"), d, d, false),
            ck: Linear::new(ps, rng, &format!("{name}.ck"), d_c, d, false),
            cv: Linear::new(ps, rng, &format!("{name}.cv"), d_c, d, false),
            cross_out: Linear::new(ps, rng, &format!("{name}.cross_out"), d, d, true),
            ln3: Norm::new(ps, &format!("{name}.ln3"), d),
            ff1: Linear::new(ps, rng, &format!("{name}.ff1"), d, 4 * d, false),
            ff2: Linear::new(ps, rng, &format!("{name}.ff2"), 4 * d, d, false),
            proj_out: Linear::new(ps, rng, &format!("{name}.proj_out"), d, channels, true),
            heads,
            d,
            channels,
            groups,
        }
    }

    /// Feature map `(C, H, W)` to tokens `(N, C)`, row-major over pixels.
    pub(crate) fn tokenize<F: Scalar, B: Backend<F>>(
        be: &mut B,
        x: &B::T,
        channels: usize,
        n: usize,
    ) -> B::T {
        let flat = be.reshape(x, &[channels, n]);
        be.transpose(&flat)
    }

    /// Tokens `(N, C)` back to a feature map `(C, H, W)`.
    pub(crate) fn untokenize<F: Scalar, B: Backend<F>>(
        be: &mut B,
        tokens: &B::T,
        channels: usize,
        hw: (usize, usize),
    ) -> B::T {
        let t = be.transpose(tokens);
        be.reshape(&t, &[channels, hw.0, hw.1])
    }

    /// Reference attention-block body. Returns the updated feature map and
    /// records this block's head-averaged cross-attention map.
    pub(crate) fn forward_standard<F: Scalar, B: Backend<F>>(
        &self,
        be: &mut B,
        x: &B::T,
        cond: &B::T,
        hw: (usize, usize),
        trace: &mut AttentionTrace<B::T>,
    ) -> B::T {
        let n = hw.0 * hw.1;
        let h0 = self.gn_in.group(be, x, self.groups);
        let tokens = Self::tokenize(be, &h0, self.channels, n);
        let t0 = self.proj_in.apply(be, &tokens);

        // Self-attention (pre-norm residual).
        let a = self.ln1.layer(be, &t0);
        let q = self.wq.apply(be, &a);
        let k = self.wk.apply(be, &a);
        let v = self.wv.apply(be, &a);
        let (sa, _) = multihead_attention(be, &q, &k, &v, self.d, self.heads, false);
        let sa = self.self_out.apply(be, &sa);
        let t1 = be.add(&t0, &sa);

        // Cross-attention against the condition tokens.
        let a2 = self.ln2.layer(be, &t1);
        let q2 = self.cq.apply(be, &a2);
        let k2 = self.ck.apply(be, cond);
        let v2 = self.cv.apply(be, cond);
        let (ca, map) = multihead_attention(be, &q2, &k2, &v2, self.d, self.heads, true);
        let ca = self.cross_out.apply(be, &ca);
        let t2 = be.add(&t1, &ca);
        trace.cross.push((self.id.clone(), map.expect("cross map recorded")));
        trace.self_meta.push((self.id.clone(), self.d));

        // Feed-forward.
        let a3 = self.ln3.layer(be, &t2);
        let f = self.ff1.apply(be, &a3);
        let f = be.silu(&f);
        let f = self.ff2.apply(be, &f);
        let t3 = be.add(&t2, &f);

        let out_tokens = self.proj_out.apply(be, &t3);
        let delta = Self::untokenize(be, &out_tokens, self.channels, hw);
        be.add(x, &delta)
    }
}

/// Scaled dot-product attention over `heads` equal slices of the token
/// dimension. Returns the concatenated head outputs and, when asked, the
/// head-averaged post-softmax attention map (`N × K`, row-stochastic).
pub(crate) fn multihead_attention<F: Scalar, B: Backend<F>>(
    be: &mut B,
    q: &B::T,
    k: &B::T,
    v: &B::T,
    d: usize,
    heads: usize,
    record_map: bool,
) -> (B::T, Option<B::T>) {
    assert_eq!(d % heads, 0, "token dim {d} not divisible by heads {heads}");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut map_sum: Option<B::T> = None;
    for h in 0..heads {
        let qh = be.slice_axis(q, 1, h * dh, dh);
        let kh = be.slice_axis(k, 1, h * dh, dh);
        let vh = be.slice_axis(v, 1, h * dh, dh);
        let kt = be.transpose(&kh);
        let scores = be.matmul(&qh, &kt);
        let scores = be.scale(&scores, scale);
        let attn = be.softmax_rows(&scores);
        if record_map {
            map_sum = Some(match map_sum {
                Some(m) => be.add(&m, &attn),
                None => attn.clone(),
            });
        }
        outs.push(be.matmul(&attn, &vh));
    }
    let out = be.concat(&outs, 1);
    let map = map_sum.map(|m| be.scale(&m, 1.0 / heads as f64));
    (out, map)
}

/// Shared timestep feature path: sinusoidal features through two SiLU
/// linears, shape `(1, 2·time_dim)`.
pub(crate) fn time_features<F: Scalar, B: Backend<F>>(
    be: &mut B,
    temb1: &Linear,
    temb2: &Linear,
    t: usize,
    time_dim: usize,
) -> B::T {
    let temb0 = be.constant(sinusoidal_embedding::<F>(t, time_dim));
    let e = temb1.apply(be, &temb0);
    let e = be.silu(&e);
    let e = temb2.apply(be, &e);
    be.silu(&e)
}

/// Attention maps and metadata captured during one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    /// `(site id, N×K_c head-averaged cross-attention map)` in network
    /// order.
    pub cross: Vec<(String, T)>,
    /// `(site id, token dimension)` for each attention block.
    pub self_meta: Vec<(String, usize)>,
}

impl<T> Default for AttentionTrace<T> {
    fn default() -> Self {
        AttentionTrace { cross: Vec::new(), self_meta: Vec::new() }
    }
}

/// Pluggable executor for attention blocks. The standard executor runs the
/// reference body; the caching executor (see the token-caching module)
/// recomputes only prioritized query rows and serves the rest from cache.
pub trait AttnHook<F: Scalar, B: Backend<F>> {
    fn run(
        &mut self,
        be: &mut B,
        blk: &AttnBlock,
        x: &B::T,
        cond: &B::T,
        hw: (usize, usize),
        trace: &mut AttentionTrace<B::T>,
    ) -> B::T;
}

/// Reference executor: every query row computed, nothing cached.
pub struct StandardAttn;

impl<F: Scalar, B: Backend<F>> AttnHook<F, B> for StandardAttn {
    fn run(
        &mut self,
        be: &mut B,
        blk: &AttnBlock,
        x: &B::T,
        cond: &B::T,
        hw: (usize, usize),
        trace: &mut AttentionTrace<B::T>,
    ) -> B::T {
        blk.forward_standard(be, x, cond, hw, trace)
    }
}

#[derive(Clone)]
struct DownStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv>,
}

#[derive(Clone)]
struct UpStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv>,
}

/// The denoiser. Holds parameter ids only; values live in a [`ParamSet`].
#[derive(Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    conv_in: Conv,
    temb1: Linear,
    temb2: Linear,
    down: Vec<DownStage>,
    mid_res1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid_res2: ResBlock,
    up: Vec<UpStage>,
    gn_out: Norm,
    conv_out: Conv,
}

impl UNet {
    /// Registers all parameters under `prefix` and returns the wiring.
    pub fn new<F: Scalar>(
        cfg: &UNetConfig,
        prefix: &str,
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
    ) -> crate::error::Result<UNet> {
        cfg.validate()?;
        let [w0, w1, w2] = cfg.widths;
        let c_in = 2 * cfg.latent_channels + 1;
        let tproj = 2 * cfg.time_dim;
        let g = cfg.groups;

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

        let p = |s: &str| format!("{prefix}.{s}");
        let conv_in = Conv::new(ps, rng, &p("conv_in"), c_in, w0, 3, 1, 1, false);
        let temb1 = Linear::new(ps, rng, &p("temb1"), cfg.time_dim, tproj, false);
        let temb2 = Linear::new(ps, rng, &p("temb2"), tproj, tproj, false);

        let down = vec![
            DownStage {
                res: ResBlock::new(ps, rng, &p("down0.res"), w0, w0, tproj, g),
                attn: None,
                down: Some(Conv::new(ps, rng, &p("down0.down"), w0, w1, 3, 2, 1, false)),
            },
            DownStage {
                res: ResBlock::new(ps, rng, &p("down1.res"), w1, w1, tproj, g),
                attn: attn_at(cfg, ps, rng, &p("down1.attn"), "down.1", w1),
                down: Some(Conv::new(ps, rng, &p("down1.down"), w1, w2, 3, 2, 1, false)),
            },
            DownStage {
                res: ResBlock::new(ps, rng, &p("down2.res"), w2, w2, tproj, g),
                attn: attn_at(cfg, ps, rng, &p("down2.attn"), "down.2", w2),
                down: None,
            },
        ];
        let mid_res1 = ResBlock::new(ps, rng, &p("mid.res1"), w2, w2, tproj, g);
        let mid_attn = attn_at(cfg, ps, rng, &p("mid.attn"), "mid", w2);
        let mid_res2 = ResBlock::new(ps, rng, &p("mid.res2"), w2, w2, tproj, g);
        let up = vec![
            UpStage {
                res: ResBlock::new(ps, rng, &p("up0.res"), 2 * w2, w2, tproj, g),
                attn: attn_at(cfg, ps, rng, &p("up0.attn"), "up.0", w2),
                up: Some(Conv::new(ps, rng, &p("up0.up"), w2, w1, 3, 1, 1, false)),
            },
            UpStage {
                res: ResBlock::new(ps, rng, &p("up1.res"), 2 * w1, w1, tproj, g),
                attn: attn_at(cfg, ps, rng, &p("up1.attn"), "up.1", w1),
                up: Some(Conv::new(ps, rng, &p("up1.up"), w1, w0, 3, 1, 1, false)),
            },
            UpStage {
                res: ResBlock::new(ps, rng, &p("up2.res"), 2 * w0, w0, tproj, g),
                attn: None,
                up: None,
            },
        ];
        let gn_out = Norm::new(ps, &p("gn_out"), w0);
        let conv_out = Conv::new(ps, rng, &p("conv_out"), w0, cfg.latent_channels, 3, 1, 1, true);

        Ok(UNet {
            cfg: cfg.clone(),
            conv_in,
            temb1,
            temb2,
            down,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            gn_out,
            conv_out,
        })
    }

    /// Attention blocks in network order (the cache schedule iterates
    /// these).
    pub fn attn_blocks(&self) -> Vec<&AttnBlock> {
        let mut v = Vec::new();
        for s in &self.down {
            if let Some(a) = &s.attn {
                v.push(a);
            }
        }
        if let Some(a) = &self.mid_attn {
            v.push(a);
        }
        for s in &self.up {
            if let Some(a) = &s.attn {
                v.push(a);
            }
        }
        v
    }

    /// Predicts noise for one sample.
    ///
    /// `input` is the channel concatenation `(2C+1, H, W)` (see input
    /// assembly), `cond` the `(K_c, d_c)` condition tokens. The attention
    /// executor `hook` decides how attention blocks run.
    pub fn forward<F: Scalar, B: Backend<F>, H: AttnHook<F, B>>(
        &self,
        be: &mut B,
        hook: &mut H,
        input: &B::T,
        t: usize,
        cond: &B::T,
    ) -> (B::T, AttentionTrace<B::T>) {
        let shape = be.value(input).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut trace = AttentionTrace::default();
        let temb = time_features(be, &self.temb1, &self.temb2, t, self.cfg.time_dim);

        // Encoder.
        let x0 = self.conv_in.apply(be, input);
        let s0 = self.down[0].res.forward(be, &x0, &temb);
        let e0 = self.down[0].down.as_ref().unwrap().apply(be, &s0);

        let mut s1 = self.down[1].res.forward(be, &e0, &temb);
        if let Some(blk) = &self.down[1].attn {
            s1 = hook.run(be, blk, &s1, cond, (h / 2, w / 2), &mut trace);
        }
        let e1 = self.down[1].down.as_ref().unwrap().apply(be, &s1);

        let mut s2 = self.down[2].res.forward(be, &e1, &temb);
        if let Some(blk) = &self.down[2].attn {
            s2 = hook.run(be, blk, &s2, cond, (h / 4, w / 4), &mut trace);
        }

        // Middle.
        let mut m = self.mid_res1.forward(be, &s2, &temb);
        if let Some(blk) = &self.mid_attn {
            m = hook.run(be, blk, &m, cond, (h / 4, w / 4), &mut trace);
        }
        let m = self.mid_res2.forward(be, &m, &temb);

        // Decoder with skip concatenation (current features first).
        let cat0 = be.concat(&[m, s2], 0);
        let mut u0 = self.up[0].res.forward(be, &cat0, &temb);
        if let Some(blk) = &self.up[0].attn {
            u0 = hook.run(be, blk, &u0, cond, (h / 4, w / 4), &mut trace);
        }
        let u0 = be.upsample2x(&u0);
        let u0 = self.up[0].up.as_ref().unwrap().apply(be, &u0);

        let cat1 = be.concat(&[u0, s1], 0);
        let mut u1 = self.up[1].res.forward(be, &cat1, &temb);
        if let Some(blk) = &self.up[1].attn {
            u1 = hook.run(be, blk, &u1, cond, (h / 2, w / 2), &mut trace);
        }
        let u1 = be.upsample2x(&u1);
        let u1 = self.up[1].up.as_ref().unwrap().apply(be, &u1);

        let cat2 = be.concat(&[u1, s0], 0);
        let u2 = self.up[2].res.forward(be, &cat2, &temb);

        let y = self.gn_out.group(be, &u2, self.cfg.groups);
        let y = be.silu(&y);
        let y = self.conv_out.apply(be, &y);
        (y, trace)
    }
}
