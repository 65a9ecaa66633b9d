//! Analytic, hardware-independent arithmetic-operation accounting for
//! denoising runs.
//!
//! Counting conventions, fixed once and documented here because ratios are
//! what the accounting exists to certify and ratios are invariant to the
//! convention:
//!
//! * a multiply-accumulate costs 2 ops;
//! * softmax costs 3 ops per logit;
//! * normalization layers and activations cost 4 ops per element;
//! * tensor reshapes, transposes, concatenations, nearest-neighbor
//!   upsampling, and copies cost 0.
//!
//! Attention blocks split into two op classes per site:
//!
//! * `attn_fixed` — work that runs over every token regardless of the
//!   token mask: the input group norm, the token projection, the first row
//!   norm, and all key/value projections (self-attention keys and values
//!   must summarize every token for the pruned rows to equal the dense
//!   computation, and condition-side keys/values do not depend on the
//!   mask at all);
//! * `attn_tokens` — work exactly proportional to the number of computed
//!   (foreground) query rows, with zero constant term: query projections,
//!   both attention cores, output projections, residual adds, row norms,
//!   and the feed-forward.
//!
//! Because `attn_tokens` is exactly linear in the foreground count, a
//! cached run's savings obey an integer identity: dense total − cached
//! total = Σ over cached sites of (N − N_f) × (that site's `attn_tokens`
//! cost per token). Tests assert this to the last digit.
//!
//! The per-step cost covers the denoising network and its timestep
//! features only; the condition encoder runs once per scene and the final
//! fusion once per run, so keeping them out of the step account preserves
//! exact step linearity (cache-free run total = n_steps × per-step cost).

use crate::error::{Error, Result};
use crate::model::{UNetConfig, ATTN_SITES};

/// One accounting row: a network layer, the operation class, and its cost.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerEntry {
    pub layer: String,
    pub op_class: String,
    pub count: u64,
}

/// Token counts for one attention site during one step: `n` grid tokens of
/// which `n_f` were computed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteTokens {
    pub site: String,
    pub n: usize,
    pub n_f: usize,
}

/// Per-site token counts for one denoising step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepTokens {
    pub sites: Vec<SiteTokens>,
}

impl StepTokens {
    /// A step in which every attention site computes every token.
    pub fn dense(cfg: &UNetConfig, latent_side: usize) -> Result<StepTokens> {
        let mut sites = Vec::new();
        for site in ATTN_SITES {
            if cfg.attn_sites.iter().any(|s| s == site) {
                let n = site_tokens(site, latent_side)?;
                sites.push(SiteTokens { site: site.to_string(), n, n_f: n });
            }
        }
        Ok(StepTokens { sites })
    }
}

/// Cost breakdown of a single denoising step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFlops {
    pub step: usize,
    pub entries: Vec<LayerEntry>,
    pub subtotal: u64,
    /// `(site, N_f / N)` for every enabled attention site.
    pub foreground: Vec<(String, f64)>,
}

/// Cost breakdown of a full run; the total equals the sum of the per-step
/// subtotals, each of which equals the sum of its entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub steps: Vec<StepFlops>,
    pub total: u64,
}

impl FlopsReport {
    /// `self.total / other.total` as a ratio.
    pub fn ratio_to(&self, other: &FlopsReport) -> Result<f64> {
        if other.total == 0 {
            return Err(Error::numeric("flops ratio: denominator run has zero cost"));
        }
        Ok(self.total as f64 / other.total as f64)
    }
}

/// Scaled dot-product attention core: `n_q` query rows against `n_kv`
/// key/value rows, width `d` split across `heads`.
fn attention_core(n_q: u64, n_kv: u64, d: u64, heads: u64) -> u64 {
    // Per head: scores 2·n_q·n_kv·d_h, softmax 3·n_q·n_kv, mix 2·n_q·n_kv·d_h;
    // summed over heads the score/mix terms recombine to the full d.
    4 * n_q * n_kv * d + 3 * heads * n_q * n_kv
}

/// Operation count of multi-head attention over `n` tokens in which only
/// `n_f` query rows are computed (keys and values still cover all `n`).
pub fn count_attention(n: usize, n_f: usize, d: usize, heads: usize) -> Result<u64> {
    if n_f > n {
        return Err(Error::config(format!(
            "attention count: {n_f} computed rows exceed {n} tokens"
        )));
    }
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention count: width {d} not divisible into {heads} heads"
        )));
    }
    Ok(attention_core(n_f as u64, n as u64, d as u64, heads as u64))
}

/// 3×3 convolution: `cin → cout` over `n` output pixels (bias included).
fn conv3x3(cin: u64, cout: u64, n: u64) -> u64 {
    2 * cin * 9 * cout * n + cout * n
}

/// 1×1 convolution / per-pixel linear map (bias included).
fn conv1x1(cin: u64, cout: u64, n: u64) -> u64 {
    2 * cin * cout * n + cout * n
}

/// Row-wise linear map `(rows, cin) → (rows, cout)` with bias.
fn linear(rows: u64, cin: u64, cout: u64) -> u64 {
    2 * rows * cin * cout + rows * cout
}

/// Norms and activations: 4 ops per element.
fn per_element(elems: u64) -> u64 {
    4 * elems
}

/// Residual block cost: two 3×3 convolutions with norms and activations, a
/// timestep-feature shift, and the skip path (1×1 projection when widths
/// change).
fn res_block(cin: u64, cout: u64, n: u64, time_dim: u64) -> u64 {
    let mut total = 0u64;
    total += per_element(cin * n); // gn1
    total += per_element(cin * n); // silu
    total += conv3x3(cin, cout, n);
    total += linear(1, 2 * time_dim, cout); // timestep projection
    total += cout * n; // broadcast shift add
    total += per_element(cout * n); // gn2
    total += per_element(cout * n); // silu
    total += conv3x3(cout, cout, n);
    if cin != cout {
        total += conv1x1(cin, cout, n); // skip projection
    }
    total += cout * n; // residual add
    total
}

/// Timestep feature MLP, evaluated once per step.
fn time_mlp(time_dim: u64) -> u64 {
    let mut total = 0u64;
    total += linear(1, time_dim, 2 * time_dim);
    total += per_element(2 * time_dim); // silu
    total += linear(1, 2 * time_dim, 2 * time_dim);
    total += per_element(2 * time_dim); // silu
    total
}

/// Mask-independent part of one attention block (see module docs).
fn attn_fixed(ch: u64, n: u64, d: u64, d_c: u64, k_c: u64) -> u64 {
    let mut total = 0u64;
    total += per_element(ch * n); // input group norm
    total += linear(n, ch, d); // token projection
    total += per_element(n * d); // ln1
    total += linear(n, d, d); // self-attention keys
    total += linear(n, d, d); // self-attention values
    total += linear(k_c, d_c, d); // condition keys
    total += linear(k_c, d_c, d); // condition values
    total
}

/// Token-proportional part of one attention block for `m` computed rows.
/// Exactly linear in `m` with zero constant term.
fn attn_tokens(ch: u64, n: u64, m: u64, d: u64, k_c: u64, heads: u64) -> u64 {
    let mut total = 0u64;
    total += linear(m, d, d); // self-attention queries
    total += attention_core(m, n, d, heads); // self-attention
    total += linear(m, d, d); // self-attention output
    total += m * d; // residual add
    total += per_element(m * d); // ln2
    total += linear(m, d, d); // cross queries
    total += attention_core(m, k_c, d, heads); // cross-attention
    total += linear(m, d, d); // cross output
    total += m * d; // residual add
    total += per_element(m * d); // ln3
    total += linear(m, d, 4 * d); // ff1
    total += per_element(m * 4 * d); // silu
    total += linear(m, 4 * d, d); // ff2
    total += m * d; // residual add
    total += linear(m, d, ch); // out projection to channels
    total += m * ch; // residual add into the feature map
    total
}

/// Grid-token count for an attention site at the given latent side.
fn site_tokens(site: &str, latent_side: usize) -> Result<usize> {
    let div = crate::model::site_grid_divisor(site)?;
    if latent_side % div != 0 {
        return Err(Error::config(format!(
            "flops: latent side {latent_side} not divisible by {div} at site {site}"
        )));
    }
    let side = latent_side / div;
    Ok(side * side)
}

/// Channel width of an attention site.
fn site_channels(site: &str, cfg: &UNetConfig) -> Result<u64> {
    match site {
        "down.1" | "up.1" => Ok(cfg.widths[1] as u64),
        "down.2" | "mid" | "up.0" => Ok(cfg.widths[2] as u64),
        other => Err(Error::config(format!("flops: unknown attention site {other}"))),
    }
}

/// Cost entries for one step of the denoising network given per-site token
/// counts. Sites absent from the model configuration must be absent from
/// the trace and vice versa.
pub fn count_step(cfg: &UNetConfig, latent_side: usize, tokens: &StepTokens) -> Result<Vec<LayerEntry>> {
    cfg.validate()?;
    if latent_side % 4 != 0 || latent_side == 0 {
        return Err(Error::config(format!(
            "flops: latent side {latent_side} must be a positive multiple of 4"
        )));
    }
    for st in &tokens.sites {
        if !cfg.attn_sites.iter().any(|s| s == &st.site) {
            return Err(Error::config(format!(
                "flops: trace mentions site {} which the model does not enable",
                st.site
            )));
        }
        if st.n != site_tokens(&st.site, latent_side)? {
            return Err(Error::config(format!(
                "flops: trace has {} tokens at site {}, model has {}",
                st.n,
                st.site,
                site_tokens(&st.site, latent_side)?
            )));
        }
        if st.n_f > st.n {
            return Err(Error::config(format!(
                "flops: trace at site {} computes {} of {} tokens",
                st.site, st.n_f, st.n
            )));
        }
    }
    let fg_at = |site: &str| -> Result<(u64, u64)> {
        let matches: Vec<&SiteTokens> = tokens.sites.iter().filter(|s| s.site == site).collect();
        match matches.len() {
            1 => Ok((matches[0].n as u64, matches[0].n_f as u64)),
            0 => Err(Error::config(format!("flops: trace missing enabled site {site}"))),
            _ => Err(Error::config(format!("flops: trace lists site {site} twice"))),
        }
    };

    let c = cfg.latent_channels as u64;
    let (w0, w1, w2) = (cfg.widths[0] as u64, cfg.widths[1] as u64, cfg.widths[2] as u64);
    let d = cfg.token_dim as u64;
    let d_c = cfg.cond_dim as u64;
    let k_c = cfg.cond_tokens as u64;
    let heads = cfg.heads as u64;
    let td = cfg.time_dim as u64;
    let n_full = (latent_side * latent_side) as u64;
    let n_half = n_full / 4;
    let n_quart = n_full / 16;

    let mut entries: Vec<LayerEntry> = Vec::new();
    let mut push = |layer: &str, op_class: &str, count: u64| {
        entries.push(LayerEntry {
            layer: layer.to_string(),
            op_class: op_class.to_string(),
            count,
        });
    };
    let attn = |push: &mut dyn FnMut(&str, &str, u64), layer: &str, site: &str| -> Result<()> {
        if !cfg.attn_sites.iter().any(|s| s == site) {
            return Ok(());
        }
        let (n, n_f) = fg_at(site)?;
        let ch = site_channels(site, cfg)?;
        push(layer, "attn_fixed", attn_fixed(ch, n, d, d_c, k_c));
        push(layer, "attn_tokens", attn_tokens(ch, n, n_f, d, k_c, heads));
        Ok(())
    };

    push("time", "time_mlp", time_mlp(td));
    push("conv_in", "conv", conv3x3(2 * c + 1, w0, n_full));
    push("down.0.res", "res", res_block(w0, w0, n_full, td));
    push("down.0.down", "conv", conv3x3(w0, w1, n_half));
    push("down.1.res", "res", res_block(w1, w1, n_half, td));
    attn(&mut push, "down.1.attn", "down.1")?;
    push("down.1.down", "conv", conv3x3(w1, w2, n_quart));
    push("down.2.res", "res", res_block(w2, w2, n_quart, td));
    attn(&mut push, "down.2.attn", "down.2")?;
    push("mid.res1", "res", res_block(w2, w2, n_quart, td));
    attn(&mut push, "mid.attn", "mid")?;
    push("mid.res2", "res", res_block(w2, w2, n_quart, td));
    push("up.0.res", "res", res_block(2 * w2, w2, n_quart, td));
    attn(&mut push, "up.0.attn", "up.0")?;
    push("up.0.up", "conv", conv3x3(w2, w1, n_half));
    push("up.1.res", "res", res_block(2 * w1, w1, n_half, td));
    attn(&mut push, "up.1.attn", "up.1")?;
    push("up.1.up", "conv", conv3x3(w1, w0, n_full));
    push("up.2.res", "res", res_block(2 * w0, w0, n_full, td));
    push(
        "out",
        "conv",
        per_element(w0 * n_full) + per_element(w0 * n_full) + conv3x3(w0, c, n_full),
    );
    Ok(entries)
}

/// Full-run account: one [`StepTokens`] per denoising step.
pub fn count_run(cfg: &UNetConfig, latent_side: usize, steps: &[StepTokens]) -> Result<FlopsReport> {
    if steps.is_empty() {
        return Err(Error::config("flops: a run needs at least one step"));
    }
    let mut out = Vec::with_capacity(steps.len());
    let mut total = 0u64;
    for (i, tokens) in steps.iter().enumerate() {
        let entries = count_step(cfg, latent_side, tokens)?;
        let subtotal: u64 = entries.iter().map(|e| e.count).sum();
        let foreground = tokens
            .sites
            .iter()
            .map(|s| (s.site.clone(), s.n_f as f64 / s.n as f64))
            .collect();
        total += subtotal;
        out.push(StepFlops { step: i, entries, subtotal, foreground });
    }
    Ok(FlopsReport { steps: out, total })
}

/// Convenience: a cache-free run of `n_steps` equal dense steps.
pub fn count_dense_run(cfg: &UNetConfig, latent_side: usize, n_steps: usize) -> Result<FlopsReport> {
    let step = StepTokens::dense(cfg, latent_side)?;
    count_run(cfg, latent_side, &vec![step; n_steps])
}
