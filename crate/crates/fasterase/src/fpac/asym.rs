//! Attention restricted to foreground query rows.
//!
//! Keys and values always cover every token — a foreground query must see
//! the full context, which is what makes its output equal the dense
//! computation — but score rows, the value mix, and everything downstream
//! of attention run only for foreground tokens. Background rows never
//! enter any kernel: their outputs are spliced from the cache bitwise, not
//! computed and discarded.
//!
//! [`asymmetric_block_forward`] applies the same idea to a whole attention
//! block. The per-token sublayers (row norms, projections, the feed-forward)
//! are row-independent, so running them on the gathered foreground rows
//! reproduces the dense block's rows exactly up to floating-point
//! reassociation inside the matrix kernels; the full-token prefix (input
//! group norm, token projection, self-attention keys/values) is computed
//! with the very same kernels the dense path uses.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3};

use crate::error::{Error, Result};
use crate::model::unet::{multihead_attention, AttnBlock};
use crate::tensor::{Backend, PlainBackend};

use super::TokenMask;

/// Gathers the mask's foreground rows into a dense `(N_f, cols)` matrix.
fn gather_rows(a: &ArrayD<f32>, rows: &[usize]) -> ArrayD<f32> {
    a.select(Axis(0), rows)
}

/// Multi-head scaled dot-product attention where only foreground query rows
/// are computed; background output rows come from `cache_rows` bitwise.
///
/// `q` is `(N, d)` with one row per token of the mask; `k`/`v` are
/// `(N_k, d)` over the full key token set; `cache_rows` is `(N, d)`.
pub fn asymmetric_attention(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    mask: &TokenMask,
    cache_rows: &Array2<f32>,
    heads: usize,
) -> Result<Array2<f32>> {
    let (n, d) = q.dim();
    if mask.len() != n {
        return Err(Error::data(format!(
            "asymmetric attention: mask covers {} tokens but queries have {n} rows",
            mask.len()
        )));
    }
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "asymmetric attention: dimension {d} not divisible into {heads} heads"
        )));
    }
    if k.dim() != v.dim() || k.ncols() != d {
        return Err(Error::data(format!(
            "asymmetric attention: keys {:?} / values {:?} incompatible with {d}-wide queries",
            k.dim(),
            v.dim()
        )));
    }
    if cache_rows.dim() != (n, d) {
        return Err(Error::data(format!(
            "asymmetric attention: cache rows {:?} do not match output shape ({n}, {d})",
            cache_rows.dim()
        )));
    }
    if mask.n_foreground() == 0 {
        return Ok(cache_rows.clone());
    }

    let fg = mask.foreground_indices();
    let no_params: [ArrayD<f32>; 0] = [];
    let mut be = PlainBackend::new(&no_params);
    let qf = be.constant(gather_rows(&q.clone().into_dyn(), &fg));
    let kc = be.constant(k.clone().into_dyn());
    let vc = be.constant(v.clone().into_dyn());
    let (out_f, _) = multihead_attention(&mut be, &qf, &kc, &vc, d, heads, false);
    let out_f = out_f.into_dimensionality::<Ix2>().expect("attention output is 2-D");

    let mut out = cache_rows.clone();
    for (row, &tok) in fg.iter().enumerate() {
        out.row_mut(tok).assign(&out_f.row(row));
    }
    Ok(out)
}

/// One attention block evaluated asymmetrically: foreground token rows run
/// the full sublayer pipeline against all-token keys/values, background
/// rows of the output feature map are carried from `cached_features`
/// bitwise, and the returned cross-attention map stitches freshly computed
/// foreground rows over the cached map.
///
/// With an all-foreground mask this reproduces the dense block; with an
/// all-background mask it returns the cached output without touching any
/// attention kernel.
#[allow(clippy::too_many_arguments)]
pub fn asymmetric_block_forward(
    params: &[ArrayD<f32>],
    blk: &AttnBlock,
    x: &ArrayD<f32>,
    cond: &ArrayD<f32>,
    hw: (usize, usize),
    mask: &TokenMask,
    cached_features: &ArrayD<f32>,
    cached_map: &Array2<f32>,
) -> Result<(ArrayD<f32>, Array2<f32>)> {
    let n = hw.0 * hw.1;
    if x.shape() != [blk.channels, hw.0, hw.1] {
        return Err(Error::data(format!(
            "asymmetric block: input {:?} does not match {} channels at {hw:?}",
            x.shape(),
            blk.channels
        )));
    }
    if mask.len() != n {
        return Err(Error::data(format!(
            "asymmetric block: mask covers {} tokens, grid has {n}",
            mask.len()
        )));
    }
    if cached_features.shape() != x.shape() {
        return Err(Error::data(format!(
            "asymmetric block: cached features {:?} do not match input {:?}",
            cached_features.shape(),
            x.shape()
        )));
    }
    if cond.ndim() != 2 {
        return Err(Error::data("asymmetric block: condition tokens must be 2-D"));
    }
    let k_c = cond.shape()[0];
    if cached_map.dim() != (n, k_c) {
        return Err(Error::data(format!(
            "asymmetric block: cached map {:?} does not match ({n}, {k_c})",
            cached_map.dim()
        )));
    }

    // Nothing to recompute: the cached output is the output.
    if mask.n_foreground() == 0 {
        return Ok((cached_features.clone(), cached_map.clone()));
    }

    let fg = mask.foreground_indices();
    let mut be = PlainBackend::new(params);
    let xb = be.constant(x.clone());
    let condb = be.constant(cond.clone());

    // Full-token prefix: self-attention keys/values summarize every token,
    // so this part always runs dense (same kernels as the standard block).
    let h0 = blk.gn_in.group(&mut be, &xb, blk.groups);
    let tokens = AttnBlock::tokenize(&mut be, &h0, blk.channels, n);
    let t0 = blk.proj_in.apply(&mut be, &tokens);
    let a = blk.ln1.layer(&mut be, &t0);
    let k = blk.wk.apply(&mut be, &a);
    let v = blk.wv.apply(&mut be, &a);

    // Foreground-only pipeline; every sublayer below is row-independent.
    let t0_f = gather_rows(&t0, &fg);
    let a_f = gather_rows(&a, &fg);
    let q_f = blk.wq.apply(&mut be, &a_f);
    let (sa_f, _) = multihead_attention(&mut be, &q_f, &k, &v, blk.d, blk.heads, false);
    let sa_f = blk.self_out.apply(&mut be, &sa_f);
    let t1_f = be.add(&t0_f, &sa_f);

    let a2_f = blk.ln2.layer(&mut be, &t1_f);
    let q2_f = blk.cq.apply(&mut be, &a2_f);
    let k2 = blk.ck.apply(&mut be, &condb);
    let v2 = blk.cv.apply(&mut be, &condb);
    let (ca_f, map_f) = multihead_attention(&mut be, &q2_f, &k2, &v2, blk.d, blk.heads, true);
    let ca_f = blk.cross_out.apply(&mut be, &ca_f);
    let t2_f = be.add(&t1_f, &ca_f);

    let a3_f = blk.ln3.layer(&mut be, &t2_f);
    let f_f = blk.ff1.apply(&mut be, &a3_f);
    let f_f = be.silu(&f_f);
    let f_f = blk.ff2.apply(&mut be, &f_f);
    let t3_f = be.add(&t2_f, &f_f);
    let out_f = blk.proj_out.apply(&mut be, &t3_f);

    // Splice: foreground pixels get their residual update, background
    // pixels are byte-for-byte the cached output.
    let mut out = cached_features.clone();
    {
        let mut out3 = out.view_mut().into_dimensionality::<Ix3>().expect("feature map is 3-D");
        let x3 = x.view().into_dimensionality::<Ix3>().expect("feature map is 3-D");
        let out_f2 = out_f.view().into_dimensionality::<Ix2>().expect("tokens are 2-D");
        for (row, &tok) in fg.iter().enumerate() {
            let (r, c) = (tok / hw.1, tok % hw.1);
            for ch in 0..blk.channels {
                out3[[ch, r, c]] = x3[[ch, r, c]] + out_f2[[row, ch]];
            }
        }
    }

    let map_f = map_f
        .expect("cross map requested")
        .into_dimensionality::<Ix2>()
        .expect("cross map is 2-D");
    let mut map_out = cached_map.clone();
    for (row, &tok) in fg.iter().enumerate() {
        map_out.row_mut(tok).assign(&map_f.row(row));
    }

    Ok((out, map_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionTrace, ParamSet};
    use ndarray::Array1;
    use rand::Rng;

    fn rand2(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0f32..1.0))
    }

    fn random_mask(rng: &mut impl Rng, n: usize, p_fg: f64) -> TokenMask {
        TokenMask::new((0..n).map(|_| rng.gen_bool(p_fg)).collect()).unwrap()
    }

    /// Dense oracle: the standard multi-head attention over every row.
    fn dense_attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>, heads: usize) -> Array2<f32> {
        let no_params: [ArrayD<f32>; 0] = [];
        let mut be = PlainBackend::new(&no_params);
        let qc = be.constant(q.clone().into_dyn());
        let kc = be.constant(k.clone().into_dyn());
        let vc = be.constant(v.clone().into_dyn());
        let (out, _) = multihead_attention(&mut be, &qc, &kc, &vc, q.ncols(), heads, false);
        out.into_dimensionality::<Ix2>().unwrap()
    }

    #[test]
    fn foreground_rows_match_dense_and_background_rows_match_cache_bitwise() {
        let mut rng = crate::rng::derive_rng(31, "asym-test", 0);
        for case in 0..120 {
            let n = [4usize, 16, 64][case % 3];
            let d = [8usize, 16][case % 2];
            let heads = [1usize, 2, 4][case % 3];
            let q = rand2(&mut rng, n, d);
            let k = rand2(&mut rng, n, d);
            let v = rand2(&mut rng, n, d);
            let cache = rand2(&mut rng, n, d);
            let mask = random_mask(&mut rng, n, 0.4);

            let got = asymmetric_attention(&q, &k, &v, &mask, &cache, heads).unwrap();
            let want = dense_attention(&q, &k, &v, heads);
            for t in 0..n {
                if mask.is_foreground(t) {
                    for c in 0..d {
                        let (g, w) = (got[[t, c]], want[[t, c]]);
                        assert!(
                            (g - w).abs() <= 1e-6 * w.abs().max(1.0),
                            "case {case}: fg row {t} col {c}: {g} vs {w}"
                        );
                    }
                } else {
                    for c in 0..d {
                        assert_eq!(
                            got[[t, c]].to_bits(),
                            cache[[t, c]].to_bits(),
                            "case {case}: bg row {t} col {c} not carried bitwise"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn all_foreground_equals_dense_attention() {
        let mut rng = crate::rng::derive_rng(32, "asym-test", 1);
        let (n, d, heads) = (16, 8, 2);
        let q = rand2(&mut rng, n, d);
        let k = rand2(&mut rng, n, d);
        let v = rand2(&mut rng, n, d);
        let cache = rand2(&mut rng, n, d);
        let mask = TokenMask::all_foreground(n).unwrap();
        let got = asymmetric_attention(&q, &k, &v, &mask, &cache, heads).unwrap();
        assert_eq!(got, dense_attention(&q, &k, &v, heads));
    }

    #[test]
    fn all_background_returns_the_cache_bitwise() {
        let mut rng = crate::rng::derive_rng(33, "asym-test", 2);
        let (n, d) = (16, 8);
        let q = rand2(&mut rng, n, d);
        let k = rand2(&mut rng, n, d);
        let v = rand2(&mut rng, n, d);
        let cache = rand2(&mut rng, n, d);
        let mask = TokenMask::all_background(n).unwrap();
        let got = asymmetric_attention(&q, &k, &v, &mask, &cache, 2).unwrap();
        for (g, c) in got.iter().zip(cache.iter()) {
            assert_eq!(g.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn single_foreground_token_is_the_dense_row() {
        let mut rng = crate::rng::derive_rng(34, "asym-test", 3);
        let (n, d, heads) = (64, 16, 4);
        let q = rand2(&mut rng, n, d);
        let k = rand2(&mut rng, n, d);
        let v = rand2(&mut rng, n, d);
        let cache = rand2(&mut rng, n, d);
        let mut bits = vec![false; n];
        bits[37] = true;
        let mask = TokenMask::new(bits).unwrap();
        let got = asymmetric_attention(&q, &k, &v, &mask, &cache, heads).unwrap();
        let want = dense_attention(&q, &k, &v, heads);
        for c in 0..d {
            assert!((got[[37, c]] - want[[37, c]]).abs() <= 1e-6);
        }
        for t in (0..n).filter(|&t| t != 37) {
            for c in 0..d {
                assert_eq!(got[[t, c]].to_bits(), cache[[t, c]].to_bits());
            }
        }
    }

    #[test]
    fn attention_rejects_inconsistent_shapes() {
        let q = Array2::<f32>::zeros((8, 8));
        let k = Array2::<f32>::zeros((8, 8));
        let v = Array2::<f32>::zeros((8, 8));
        let cache = Array2::<f32>::zeros((8, 8));
        let mask7 = TokenMask::all_foreground(7).unwrap();
        assert!(asymmetric_attention(&q, &k, &v, &mask7, &cache, 2).is_err());
        let mask = TokenMask::all_foreground(8).unwrap();
        // Head count must divide the width.
        assert!(asymmetric_attention(&q, &k, &v, &mask, &cache, 3).is_err());
        assert!(asymmetric_attention(&q, &k, &v, &mask, &cache, 0).is_err());
        // Cache must match the output shape.
        let bad_cache = Array2::<f32>::zeros((8, 4));
        assert!(asymmetric_attention(&q, &k, &v, &mask, &bad_cache, 2).is_err());
        // Keys and values must agree.
        let bad_v = Array2::<f32>::zeros((4, 8));
        assert!(asymmetric_attention(&q, &k, &bad_v, &mask, &cache, 2).is_err());
    }

    /// Builds one attention block with randomized weights plus matching
    /// random inputs on a `side × side` grid.
    fn block_fixture(
        seed: u64,
        side: usize,
        channels: usize,
    ) -> (ParamSet<f32>, AttnBlock, ArrayD<f32>, ArrayD<f32>) {
        let mut rng = crate::rng::derive_rng(seed, "asym-block-test", 0);
        let mut ps = ParamSet::<f32>::new();
        let (d, d_c, heads, groups) = (8, 8, 2, 2);
        let blk = AttnBlock::new(&mut ps, &mut rng, "blk", "up.1", channels, d, d_c, heads, groups);
        ps.randomize_all(&mut rng, 0.2);
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[channels, side, side]), |_| {
            rng.gen_range(-1.0f32..1.0)
        });
        let cond = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, d_c]), |_| rng.gen_range(-1.0f32..1.0));
        (ps, blk, x, cond)
    }

    /// The dense block output and its cross map for the same inputs.
    fn dense_block(
        ps: &ParamSet<f32>,
        blk: &AttnBlock,
        x: &ArrayD<f32>,
        cond: &ArrayD<f32>,
        hw: (usize, usize),
    ) -> (ArrayD<f32>, Array2<f32>) {
        let mut be = PlainBackend::new(ps.arrays());
        let xb = be.constant(x.clone());
        let cb = be.constant(cond.clone());
        let mut trace = AttentionTrace::default();
        let out = blk.forward_standard(&mut be, &xb, &cb, hw, &mut trace);
        let map = trace.cross.pop().expect("one cross map").1;
        (out, map.into_dimensionality::<Ix2>().unwrap())
    }

    #[test]
    fn block_foreground_pixels_match_dense_and_background_matches_cache() {
        for (seed, p_fg) in [(41u64, 0.3f64), (42, 0.6), (43, 0.1)] {
            let side = 4;
            let (ps, blk, x, cond) = block_fixture(seed, side, 6);
            let hw = (side, side);
            let n = side * side;
            let mut rng = crate::rng::derive_rng(seed, "asym-block-test", 1);
            let mask = random_mask(&mut rng, n, p_fg);
            let cached_feats = ArrayD::from_shape_fn(x.raw_dim(), |_| rng.gen_range(-1.0f32..1.0));
            let cached_map = Array2::from_shape_fn((n, 3), |_| rng.gen_range(0.0f32..1.0));

            let (out, map) = asymmetric_block_forward(
                ps.arrays(),
                &blk,
                &x,
                &cond,
                hw,
                &mask,
                &cached_feats,
                &cached_map,
            )
            .unwrap();
            let (want_out, want_map) = dense_block(&ps, &blk, &x, &cond, hw);

            let out3 = out.view().into_dimensionality::<Ix3>().unwrap();
            let want3 = want_out.view().into_dimensionality::<Ix3>().unwrap();
            let cache3 = cached_feats.view().into_dimensionality::<Ix3>().unwrap();
            for t in 0..n {
                let (r, c) = (t / side, t % side);
                for ch in 0..6 {
                    if mask.is_foreground(t) {
                        let (g, w) = (out3[[ch, r, c]], want3[[ch, r, c]]);
                        assert!(
                            (g - w).abs() <= 1e-6 * w.abs().max(1.0),
                            "seed {seed}: fg pixel ({ch},{r},{c}): {g} vs {w}"
                        );
                    } else {
                        assert_eq!(
                            out3[[ch, r, c]].to_bits(),
                            cache3[[ch, r, c]].to_bits(),
                            "seed {seed}: bg pixel ({ch},{r},{c}) not carried bitwise"
                        );
                    }
                }
                for kc in 0..3 {
                    if mask.is_foreground(t) {
                        let (g, w) = (map[[t, kc]], want_map[[t, kc]]);
                        assert!((g - w).abs() <= 1e-6, "map row {t}: {g} vs {w}");
                    } else {
                        assert_eq!(map[[t, kc]].to_bits(), cached_map[[t, kc]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn block_with_all_foreground_mask_equals_the_dense_block() {
        let side = 4;
        let (ps, blk, x, cond) = block_fixture(44, side, 4);
        let n = side * side;
        let mask = TokenMask::all_foreground(n).unwrap();
        // Deliberately poisoned cache: it must not leak into any output.
        let cached_feats = ArrayD::from_elem(x.raw_dim(), f32::MAX);
        let cached_map = Array2::from_elem((n, 3), -1.0f32);
        let (out, map) = asymmetric_block_forward(
            ps.arrays(),
            &blk,
            &x,
            &cond,
            (side, side),
            &mask,
            &cached_feats,
            &cached_map,
        )
        .unwrap();
        let (want_out, want_map) = dense_block(&ps, &blk, &x, &cond, (side, side));
        assert_eq!(out, want_out);
        assert_eq!(map, want_map);
    }

    #[test]
    fn block_with_all_background_mask_returns_the_cache_bitwise() {
        let side = 4;
        let (ps, blk, x, cond) = block_fixture(45, side, 4);
        let n = side * side;
        let mask = TokenMask::all_background(n).unwrap();
        let mut rng = crate::rng::derive_rng(45, "asym-block-test", 2);
        let cached_feats = ArrayD::from_shape_fn(x.raw_dim(), |_| rng.gen_range(-1.0f32..1.0));
        let cached_map = Array2::from_shape_fn((n, 3), |_| rng.gen_range(0.0f32..1.0));
        let (out, map) = asymmetric_block_forward(
            ps.arrays(),
            &blk,
            &x,
            &cond,
            (side, side),
            &mask,
            &cached_feats,
            &cached_map,
        )
        .unwrap();
        for (g, c) in out.iter().zip(cached_feats.iter()) {
            assert_eq!(g.to_bits(), c.to_bits());
        }
        assert_eq!(map, cached_map);
    }

    #[test]
    fn block_rejects_mismatched_geometry() {
        let side = 4;
        let (ps, blk, x, cond) = block_fixture(46, side, 4);
        let n = side * side;
        let good_feats = x.clone();
        let good_map = Array2::<f32>::zeros((n, 3));
        let mask = TokenMask::all_foreground(n).unwrap();

        // Wrong mask size.
        let short = TokenMask::all_foreground(n - 1).unwrap();
        assert!(asymmetric_block_forward(
            ps.arrays(), &blk, &x, &cond, (side, side), &short, &good_feats, &good_map
        )
        .is_err());
        // Wrong cached-feature shape.
        let bad_feats = ArrayD::<f32>::zeros(ndarray::IxDyn(&[4, 2, 2]));
        assert!(asymmetric_block_forward(
            ps.arrays(), &blk, &x, &cond, (side, side), &mask, &bad_feats, &good_map
        )
        .is_err());
        // Wrong cached-map shape.
        let bad_map = Array2::<f32>::zeros((n, 2));
        assert!(asymmetric_block_forward(
            ps.arrays(), &blk, &x, &cond, (side, side), &mask, &good_feats, &bad_map
        )
        .is_err());
        // Input that does not match the declared grid.
        let bad_x = ArrayD::<f32>::zeros(ndarray::IxDyn(&[4, 2, 2]));
        assert!(asymmetric_block_forward(
            ps.arrays(), &blk, &bad_x, &cond, (side, side), &mask, &good_feats, &good_map
        )
        .is_err());
    }

    /// The standalone attention op and the block-level path share row
    /// semantics: a mask built from a pixel mask keeps exactly the masked
    /// rows live.
    #[test]
    fn mask_row_indexing_matches_the_token_grid() {
        let side = 4;
        let n = side * side;
        let mut user = Array1::<f32>::zeros(n);
        user[5] = 1.0; // (1, 1)
        let attention = Array1::<f32>::zeros(n);
        let mask = super::super::derive_token_mask(&attention, &user, 1.0, 1).unwrap();
        // Chebyshev ball around (1,1): rows 0,1,2 × cols 0,1,2.
        let expect: Vec<usize> =
            vec![0, 1, 2, 4, 5, 6, 8, 9, 10];
        assert_eq!(mask.foreground_indices(), expect);
    }
}
