//! Training objectives, written once against the backend trait so the same
//! definitions run eagerly (evaluation) and on the gradient tape
//! (training).
//!
//! All losses reduce to rank-0 tensors. The discriminator uses the hinge
//! objective; the generator combines latent reconstruction, perceptual
//! distance, and the adversarial score; the localization loss contrasts
//! mean visual-token attention between background and foreground tokens.

use ndarray::{Array1, Array2, ArrayD};

use crate::error::{Error, Result};
use crate::metrics::ToyPerceptual;
use crate::tensor::{Backend, PlainBackend, Scalar};

/// Weights of the generator-side loss terms. Defaults are the distillation
/// recipe: reconstruction 1.0, perceptual 5.0, adversarial 0.5,
/// localization 0.01.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub diff: f64,
    pub lpips: f64,
    pub gan: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { diff: 1.0, lpips: 5.0, gan: 0.5, mask: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.diff, self.lpips, self.gan, self.mask];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn mean_hinge<F: Scalar, B: Backend<F>>(be: &mut B, scores: &[B::T], sign: f64) -> B::T {
    let mut acc: Option<B::T> = None;
    for s in scores {
        let z = be.scale(s, sign);
        let z = be.add_scalar(&z, 1.0);
        let z = be.relu(&z);
        acc = Some(match acc {
            Some(a) => be.add(&a, &z),
            None => z,
        });
    }
    let total = acc.expect("nonempty score batch");
    be.scale(&total, 1.0 / scores.len() as f64)
}

/// Hinge discriminator objective over a batch of rank-0 realness scores:
/// `mean(relu(1 − real)) + mean(relu(1 + fake))`. Saturated examples
/// (real ≥ 1, fake ≤ −1) contribute zero; an undecided discriminator
/// scoring everything 0 sits at exactly 2.
pub fn disc_loss<F: Scalar, B: Backend<F>>(
    be: &mut B,
    real: &[B::T],
    fake: &[B::T],
) -> Result<B::T> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::config(format!(
            "hinge loss needs equal nonempty score batches, got {} real / {} fake",
            real.len(),
            fake.len()
        )));
    }
    let r = mean_hinge(be, real, -1.0);
    let f = mean_hinge(be, fake, 1.0);
    Ok(be.add(&r, &f))
}

/// Generator-side loss terms for one sample, before batch averaging. All
/// values are rank-0 tensors of the executing backend.
#[derive(Clone, Debug)]
pub struct GenLossTerms<T> {
    /// Weighted sum of the three terms below (localization is added by the
    /// training step, which owns the attention trace).
    pub total: T,
    /// Mean squared latent reconstruction error.
    pub diff: T,
    /// Perceptual distance between decoded prediction and target; an exact
    /// zero constant when no perceptual backend is registered.
    pub perceptual: T,
    /// Adversarial term `−score` (the generator maximizes realness).
    pub adv: T,
    /// False when the perceptual backend is absent: the reported zero is
    /// "disabled", not a measured distance.
    pub perceptual_enabled: bool,
}

/// Assembles the generator objective for one sample.
///
/// `z_pred` and `z_gt` are clean-background latents (with the identity
/// codec, decoding is a no-op, so the perceptual term runs directly on
/// them); `fake_score` is the discriminator's rank-0 score of `z_pred`
/// produced inside the same tape (the discriminator is conditioned on the
/// expanded object+effect mask there, as in its own update).
pub fn gen_loss<F: Scalar, B: Backend<F>>(
    be: &mut B,
    z_pred: &B::T,
    z_gt: &B::T,
    fake_score: &B::T,
    perceptual: Option<&ToyPerceptual>,
    w: &LossWeights,
) -> Result<GenLossTerms<B::T>> {
    w.validate()?;
    let d = be.sub(z_pred, z_gt);
    let sq = be.mul(&d, &d);
    let diff = be.mean_all(&sq);

    let (perc, perceptual_enabled) = match perceptual {
        Some(p) => {
            let raw = p.distance_in(be, z_pred, z_gt);
            (be.reshape(&raw, &[]), true)
        }
        None => (be.constant(ArrayD::zeros(ndarray::IxDyn(&[]))), false),
    };

    let neg = be.scale(fake_score, -1.0);
    let adv = be.reshape(&neg, &[]);

    let mut total = be.scale(&diff, w.diff);
    let tp = be.scale(&perc, w.lpips);
    total = be.add(&total, &tp);
    let ta = be.scale(&adv, w.gan);
    total = be.add(&total, &ta);

    Ok(GenLossTerms { total, diff, perceptual: perc, adv, perceptual_enabled })
}

fn check_token_mask(m_fg: &Array1<f32>, n: usize) -> Result<(usize, usize)> {
    if m_fg.len() != n {
        return Err(Error::data(format!(
            "localization loss: token mask has {} entries for {} tokens",
            m_fg.len(),
            n
        )));
    }
    if m_fg.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("localization loss: token mask is not binary"));
    }
    let n_fg = m_fg.iter().filter(|&&v| v == 1.0).count();
    let n_bg = n - n_fg;
    if n_fg == 0 || n_bg == 0 {
        return Err(Error::data(
            "localization loss: token mask needs both foreground and background tokens",
        ));
    }
    Ok((n_fg, n_bg))
}

/// Attention localization loss: `mean(a | background) − mean(a | foreground)`
/// where `a` is the designated visual token's attention column of a
/// row-stochastic `N×K` cross-attention map. Lies in `[−1, 1]`; −1 means
/// attention mass sits exactly on the foreground tokens.
///
/// The two means are computed as separate sums over the indicator vectors
/// so the endpoint identities (`a = m_fg → −1`, uniform dyadic `a → 0`)
/// hold exactly in floating point.
pub fn mask_loss<F: Scalar, B: Backend<F>>(
    be: &mut B,
    attn_map: &B::T,
    visual_token: usize,
    m_fg: &Array1<f32>,
) -> Result<B::T> {
    let shape = be.value(attn_map).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::data(format!(
            "localization loss: attention map must be 2-D, got {shape:?}"
        )));
    }
    let (n, kc) = (shape[0], shape[1]);
    if visual_token >= kc {
        return Err(Error::config(format!(
            "localization loss: visual token {visual_token} out of range for {kc} condition tokens"
        )));
    }
    let (n_fg, n_bg) = check_token_mask(m_fg, n)?;

    let col = be.slice_axis(attn_map, 1, visual_token, 1);
    let fg = be.constant(
        ArrayD::from_shape_vec(ndarray::IxDyn(&[n, 1]), m_fg.iter().map(|&v| F::from_f64(v as f64)).collect())
            .expect("indicator shape"),
    );
    let bg = be.constant(
        ArrayD::from_shape_vec(
            ndarray::IxDyn(&[n, 1]),
            m_fg.iter().map(|&v| F::from_f64(1.0 - v as f64)).collect(),
        )
        .expect("indicator shape"),
    );
    let fg_masked = be.mul(&col, &fg);
    let fg_sum = be.sum_all(&fg_masked);
    let fg_mean = be.scale(&fg_sum, 1.0 / n_fg as f64);
    let bg_masked = be.mul(&col, &bg);
    let bg_sum = be.sum_all(&bg_masked);
    let bg_mean = be.scale(&bg_sum, 1.0 / n_bg as f64);
    Ok(be.sub(&bg_mean, &fg_mean))
}

/// Eager convenience wrapper over [`mask_loss`] for evaluation and reports.
pub fn mask_loss_value(
    attn_map: &Array2<f32>,
    visual_token: usize,
    m_fg: &Array1<f32>,
) -> Result<f32> {
    let params: [ArrayD<f32>; 0] = [];
    let mut be = PlainBackend::new(&params);
    let map = be.constant(attn_map.clone().into_dyn());
    let l = mask_loss(&mut be, &map, visual_token, m_fg)?;
    Ok(be.scalar(&l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GraphBackend;
    use ndarray::IxDyn;
    use rand::Rng;

    fn scalar_const<F: Scalar, B: Backend<F>>(be: &mut B, v: f64) -> B::T {
        be.constant(ArrayD::from_elem(IxDyn(&[]), F::from_f64(v)))
    }

    /// Saturated scores cost nothing; an all-zero scorer sits at exactly 2.
    #[test]
    fn hinge_endpoints() {
        let params: [ArrayD<f64>; 0] = [];
        let mut be = PlainBackend::new(&params);
        let one = scalar_const(&mut be, 1.0);
        let neg = scalar_const(&mut be, -1.0);
        let zero = scalar_const(&mut be, 0.0);

        let l = disc_loss(&mut be, &[one.clone()], &[neg.clone()]).unwrap();
        assert_eq!(be.scalar(&l), 0.0);
        let l = disc_loss(&mut be, &[zero.clone()], &[zero.clone()]).unwrap();
        assert_eq!(be.scalar(&l), 2.0);
        // Batch means: real {1, 0} → 0.5, fake {−1, −1} → 0.
        let l = disc_loss(&mut be, &[one, zero.clone()], &[neg.clone(), neg.clone()]).unwrap();
        assert_eq!(be.scalar(&l), 0.5);

        assert!(disc_loss(&mut be, &[], &[]).is_err());
        assert!(disc_loss(&mut be, &[zero.clone(), zero.clone()], &[neg]).is_err());
    }

    /// Values against the closed-form hinge and gradients against central
    /// differences, over many random batch configurations.
    #[test]
    fn hinge_matches_formula_and_finite_differences() {
        let mut rng = crate::rng::derive_rng(11, "loss-test-hinge", 0);
        for case in 0..25 {
            let nr = rng.gen_range(1..=4);
            let nf = nr;
            // Keep scores away from the hinge kinks at ±1 so central
            // differences see a smooth function.
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| loop {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if (v.abs() - 1.0).abs() > 0.05 {
                    return v;
                }
            };
            let real: Vec<f64> = (0..nr).map(|_| draw(&mut rng)).collect();
            let fake: Vec<f64> = (0..nf).map(|_| draw(&mut rng)).collect();

            let oracle = real.iter().map(|r| (1.0 - r).max(0.0)).sum::<f64>() / nr as f64
                + fake.iter().map(|f| (1.0 + f).max(0.0)).sum::<f64>() / nf as f64;

            let loss_at = |real: &[f64], fake: &[f64]| -> f64 {
                let params: [ArrayD<f64>; 0] = [];
                let mut be = PlainBackend::new(&params);
                let rn: Vec<_> = real.iter().map(|&v| scalar_const(&mut be, v)).collect();
                let fn_: Vec<_> = fake.iter().map(|&v| scalar_const(&mut be, v)).collect();
                let l = disc_loss(&mut be, &rn, &fn_).unwrap();
                be.scalar(&l)
            };
            assert!((loss_at(&real, &fake) - oracle).abs() < 1e-12, "case {case}");

            // Gradient w.r.t. every score via tape inputs.
            let params: [ArrayD<f64>; 0] = [];
            let mut gb = GraphBackend::new(&params);
            let rn: Vec<_> = real
                .iter()
                .map(|&v| gb.graph.var(ArrayD::from_elem(IxDyn(&[]), v)))
                .collect();
            let fn_: Vec<_> = fake
                .iter()
                .map(|&v| gb.graph.var(ArrayD::from_elem(IxDyn(&[]), v)))
                .collect();
            let root = disc_loss(&mut gb, &rn, &fn_).unwrap();
            let all = gb.graph.backward(root);
            let h = 1e-6;
            for (i, node) in rn.iter().enumerate() {
                let an = all[node.idx()].as_ref().map(|g| g[[]]).unwrap_or(0.0);
                let mut plus = real.clone();
                plus[i] += h;
                let mut minus = real.clone();
                minus[i] -= h;
                let fd = (loss_at(&plus, &fake) - loss_at(&minus, &fake)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-3 * fd.abs().max(an.abs()).max(1.0));
            }
            for (i, node) in fn_.iter().enumerate() {
                let an = all[node.idx()].as_ref().map(|g| g[[]]).unwrap_or(0.0);
                let mut plus = fake.clone();
                plus[i] += h;
                let mut minus = fake.clone();
                minus[i] -= h;
                let fd = (loss_at(&real, &plus) - loss_at(&real, &minus)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-3 * fd.abs().max(an.abs()).max(1.0));
            }
        }
    }

    fn rand_latent(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(-1.0..1.0))
    }

    /// Generator compound: value against a hand-built oracle and gradients
    /// w.r.t. the prediction against central differences, with and without
    /// the perceptual term, across many configurations.
    #[test]
    fn gen_loss_matches_oracle_and_finite_differences() {
        let mut rng = crate::rng::derive_rng(12, "loss-test-gen", 0);
        let perc = ToyPerceptual::new(7, 3);
        for case in 0..22 {
            let (h, w) = ([4, 8][case % 2], [8, 4][case % 2]);
            let z_pred = rand_latent(&mut rng, 3, h, w);
            let z_gt = rand_latent(&mut rng, 3, h, w);
            let score: f64 = rng.gen_range(-1.0..1.0);
            let weights = LossWeights {
                diff: rng.gen_range(0.1..2.0),
                lpips: if case % 3 == 0 { 0.0 } else { rng.gen_range(0.1..6.0) },
                gan: rng.gen_range(0.1..1.0),
                mask: 0.0,
            };
            let use_perc = case % 4 != 1;

            let eval = |zp: &ArrayD<f64>| -> (f64, f64, f64, f64, bool) {
                let params: [ArrayD<f64>; 0] = [];
                let mut be = PlainBackend::new(&params);
                let zpn = be.constant(zp.clone());
                let zgn = be.constant(z_gt.clone());
                let sn = scalar_const(&mut be, score);
                let t =
                    gen_loss(&mut be, &zpn, &zgn, &sn, use_perc.then_some(&perc), &weights)
                        .unwrap();
                (
                    be.scalar(&t.total),
                    be.scalar(&t.diff),
                    be.scalar(&t.perceptual),
                    be.scalar(&t.adv),
                    t.perceptual_enabled,
                )
            };

            let (total, diff, perceptual, adv, enabled) = eval(&z_pred);
            assert_eq!(enabled, use_perc);
            let mse_oracle = (&z_pred - &z_gt).mapv(|v| v * v).sum() / z_pred.len() as f64;
            assert!((diff - mse_oracle).abs() < 1e-12);
            assert!((adv - (-score)).abs() < 1e-15);
            if !use_perc {
                assert_eq!(perceptual, 0.0);
            }
            let total_oracle =
                weights.diff * diff + weights.lpips * perceptual + weights.gan * adv;
            assert!((total - total_oracle).abs() < 1e-12);

            // FD on a few prediction entries through the full compound.
            let params: [ArrayD<f64>; 0] = [];
            let mut gb = GraphBackend::new(&params);
            let zpn = gb.graph.var(z_pred.clone());
            let zgn = gb.constant(z_gt.clone());
            let sn = scalar_const(&mut gb, score);
            let t =
                gen_loss(&mut gb, &zpn, &zgn, &sn, use_perc.then_some(&perc), &weights).unwrap();
            let all = gb.graph.backward(t.total);
            let an_grad = all[zpn.idx()].as_ref().expect("prediction receives gradient");
            let h_fd = 1e-5;
            let len = z_pred.len();
            for probe in 0..4 {
                let flat = probe * (len / 4).max(1);
                let mut plus = z_pred.clone();
                plus.as_slice_mut().unwrap()[flat] += h_fd;
                let mut minus = z_pred.clone();
                minus.as_slice_mut().unwrap()[flat] -= h_fd;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h_fd);
                let an = an_grad.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(((fd - an) / denom).abs() < 1e-3, "case {case} flat {flat}: {fd} vs {an}");
            }
        }
    }

    /// With the perceptual, adversarial, and localization weights at zero,
    /// the compound is bitwise the plain reconstruction objective.
    #[test]
    fn zero_weights_reduce_to_pure_regression() {
        let mut rng = crate::rng::derive_rng(13, "loss-test-zero", 0);
        let z_pred = rand_latent(&mut rng, 3, 8, 8).mapv(|v| v as f32);
        let z_gt = rand_latent(&mut rng, 3, 8, 8).mapv(|v| v as f32);
        let w = LossWeights { diff: 1.0, lpips: 0.0, gan: 0.0, mask: 0.0 };

        let params: [ArrayD<f32>; 0] = [];
        let mut be = PlainBackend::new(&params);
        let zpn = be.constant(z_pred.clone());
        let zgn = be.constant(z_gt.clone());
        let sn = scalar_const(&mut be, 0.73);
        let t = gen_loss(&mut be, &zpn, &zgn, &sn, None, &w).unwrap();

        let d = be.sub(&zpn, &zgn);
        let sq = be.mul(&d, &d);
        let pure = be.mean_all(&sq);
        assert_eq!(be.scalar(&t.total), be.scalar(&pure));
        assert_eq!(be.scalar(&t.total), be.scalar(&t.diff));
        assert_eq!(be.scalar(&t.perceptual), 0.0);
        assert!(!t.perceptual_enabled);
    }

    fn map_from_col(col: &Array1<f32>, kc: usize) -> Array2<f32> {
        // Puts `col` in the visual column 0 and spreads the remaining mass
        // uniformly so rows stay stochastic.
        let n = col.len();
        Array2::from_shape_fn((n, kc), |(i, j)| {
            if j == 0 {
                col[i]
            } else {
                (1.0 - col[i]) / (kc - 1) as f32
            }
        })
    }

    /// Endpoint identities hold exactly: attention equal to the foreground
    /// indicator scores −1, uniform attention scores 0.
    #[test]
    fn localization_endpoints_are_exact() {
        let n = 64;
        let m_fg = Array1::from_shape_fn(n, |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let a_mask = map_from_col(&m_fg, 4);
        assert_eq!(mask_loss_value(&a_mask, 0, &m_fg).unwrap(), -1.0);

        let uniform = map_from_col(&Array1::from_elem(n, 0.5), 4);
        assert_eq!(mask_loss_value(&uniform, 0, &m_fg).unwrap(), 0.0);

        // Anti-aligned attention scores +1.
        let inv = Array1::from_shape_fn(n, |i| 1.0 - m_fg[i]);
        let a_inv = map_from_col(&inv, 4);
        assert_eq!(mask_loss_value(&a_inv, 0, &m_fg).unwrap(), 1.0);
    }

    #[test]
    fn localization_rejects_degenerate_masks_and_bad_shapes() {
        let a = map_from_col(&Array1::from_elem(16, 0.5), 4);
        let all_fg = Array1::from_elem(16, 1.0);
        assert!(mask_loss_value(&a, 0, &all_fg).is_err());
        let all_bg = Array1::zeros(16);
        assert!(mask_loss_value(&a, 0, &all_bg).is_err());
        let short = Array1::from_elem(8, 1.0);
        assert!(mask_loss_value(&a, 0, &short).is_err());
        let not_binary = Array1::from_elem(16, 0.5);
        assert!(mask_loss_value(&a, 0, &not_binary).is_err());
        let m = Array1::from_shape_fn(16, |i| if i < 4 { 1.0 } else { 0.0 });
        assert!(mask_loss_value(&a, 9, &m).is_err());
    }

    /// Bounded in [−1, 1] under heavy fuzz, and matches a two-mean oracle.
    #[test]
    fn localization_is_bounded_and_matches_two_mean_oracle() {
        let mut rng = crate::rng::derive_rng(14, "loss-test-mask", 0);
        for _ in 0..1000 {
            let n = rng.gen_range(4..64);
            let kc = rng.gen_range(2..6);
            let mut map = Array2::from_shape_fn((n, kc), |_| rng.gen_range(0.0f32..1.0));
            for mut row in map.rows_mut() {
                let s: f32 = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            let n_fg = rng.gen_range(1..n);
            let mut m_fg = Array1::zeros(n);
            for i in 0..n_fg {
                m_fg[i] = 1.0;
            }
            let vt = rng.gen_range(0..kc);
            let v = mask_loss_value(&map, vt, &m_fg).unwrap();
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&(v as f64)), "out of range: {v}");

            let col = map.column(vt);
            let fg_mean: f32 =
                col.iter().zip(m_fg.iter()).filter(|(_, &m)| m == 1.0).map(|(&a, _)| a).sum::<f32>()
                    / n_fg as f32;
            let bg_mean: f32 =
                col.iter().zip(m_fg.iter()).filter(|(_, &m)| m == 0.0).map(|(&a, _)| a).sum::<f32>()
                    / (n - n_fg) as f32;
            assert!((v - (bg_mean - fg_mean)).abs() < 1e-5);
        }
    }

    /// Gradients of the localization loss w.r.t. the attention map match
    /// central differences across many configurations.
    #[test]
    fn localization_matches_finite_differences() {
        let mut rng = crate::rng::derive_rng(15, "loss-test-mask-fd", 0);
        for case in 0..20 {
            let n = rng.gen_range(6..24);
            let kc = rng.gen_range(2..5);
            let map = ArrayD::from_shape_fn(IxDyn(&[n, kc]), |_| rng.gen_range(0.0f64..1.0));
            let n_fg = rng.gen_range(1..n);
            let m_fg = Array1::from_shape_fn(n, |i| if i < n_fg { 1.0 } else { 0.0 });
            let vt = rng.gen_range(0..kc);

            let eval = |m: &ArrayD<f64>| -> f64 {
                let params: [ArrayD<f64>; 0] = [];
                let mut be = PlainBackend::new(&params);
                let node = be.constant(m.clone());
                let l = mask_loss(&mut be, &node, vt, &m_fg).unwrap();
                be.scalar(&l)
            };

            let params: [ArrayD<f64>; 0] = [];
            let mut gb = GraphBackend::new(&params);
            let node = gb.graph.var(map.clone());
            let root = mask_loss(&mut gb, &node, vt, &m_fg).unwrap();
            let all = gb.graph.backward(root);
            let grad = all[node.idx()].as_ref().expect("map receives gradient");

            let h = 1e-6;
            for probe in 0..6 {
                let flat = probe * (map.len() / 6).max(1) % map.len();
                let mut plus = map.clone();
                plus.as_slice_mut().unwrap()[flat] += h;
                let mut minus = map.clone();
                minus.as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[flat];
                assert!(
                    (fd - an).abs() < 1e-3 * fd.abs().max(an.abs()).max(1e-3),
                    "case {case}: {fd} vs {an}"
                );
            }
        }
    }
}
