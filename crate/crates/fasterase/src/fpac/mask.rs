//! Foreground token selection from cross-attention.
//!
//! A token is worth recomputing when the model's own attention says it
//! participates in the edit, or when it sits under (or next to) the user's
//! erase mask. The attention rule is a dynamic threshold with a budget:
//!
//! * threshold `tau` = the `q`-quantile of the *distinct* attention levels
//!   (so a flat map does not drag the threshold to zero, and a binary
//!   attention signal thresholds at its upper level);
//! * every token with attention `>= tau` is a candidate;
//! * at most `ceil((1 - q) * N)` candidates are kept, preferring higher
//!   attention and breaking ties toward the lowest token index.
//!
//! The user-mask union is unconditional: tokens within a Chebyshev
//! `dilation` radius of the user's mask are always foreground, so the edit
//! region can never be starved by a misleading attention map.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::token_grid_side;

/// Binary partition of a square token grid into recompute (foreground) and
/// cache-carried (background) tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<bool>,
    n_foreground: usize,
}

impl TokenMask {
    pub fn new(bits: Vec<bool>) -> Result<TokenMask> {
        if bits.is_empty() {
            return Err(Error::data("token mask has no tokens"));
        }
        let n_foreground = bits.iter().filter(|&&b| b).count();
        Ok(TokenMask { bits, n_foreground })
    }

    pub fn all_foreground(n: usize) -> Result<TokenMask> {
        TokenMask::new(vec![true; n])
    }

    pub fn all_background(n: usize) -> Result<TokenMask> {
        TokenMask::new(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_foreground(&self, token: usize) -> bool {
        self.bits[token]
    }

    pub fn n_foreground(&self) -> usize {
        self.n_foreground
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Foreground token indices in ascending order.
    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Fraction of tokens marked foreground.
    pub fn fraction(&self) -> f64 {
        self.n_foreground as f64 / self.bits.len() as f64
    }
}

/// Selects foreground tokens from one attention column and the user's erase
/// mask (both flat, row-major over the same square token grid).
///
/// `attention` is typically the designated visual-token column of a
/// cross-attention map; `user_mask` is the erase mask max-pooled onto the
/// token grid (binary). `quantile = 0` marks every token foreground;
/// `quantile = 1` keeps only the dilated user mask.
pub fn derive_token_mask(
    attention: &Array1<f32>,
    user_mask: &Array1<f32>,
    quantile: f64,
    dilation: usize,
) -> Result<TokenMask> {
    let n = attention.len();
    if n == 0 {
        return Err(Error::data("token mask derivation: empty attention column"));
    }
    if user_mask.len() != n {
        return Err(Error::data(format!(
            "token mask derivation: attention has {n} tokens but user mask has {}",
            user_mask.len()
        )));
    }
    let side = token_grid_side(n)?;
    if !(quantile.is_finite() && (0.0..=1.0).contains(&quantile)) {
        return Err(Error::config(format!(
            "foreground quantile {quantile} must lie in [0, 1]"
        )));
    }
    if attention.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "token mask derivation: non-finite attention values",
        ));
    }
    if user_mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("token mask derivation: user mask is not binary"));
    }

    // Budget: how many tokens the attention rule may select.
    let budget = n - ((quantile * n as f64).floor() as usize).min(n);

    // Dynamic threshold over the distinct attention levels.
    let mut levels: Vec<f32> = attention.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite-checked"));
    levels.dedup();
    let u = levels.len();
    let p = ((quantile * u as f64).ceil() as usize).clamp(1, u);
    let tau = levels[p - 1];

    // Candidates at or above the threshold, strongest attention first,
    // lowest index winning ties, capped by the budget.
    let mut order: Vec<usize> = (0..n).filter(|&i| attention[i] >= tau).collect();
    order.sort_by(|&i, &j| {
        attention[j]
            .partial_cmp(&attention[i])
            .expect("finite-checked")
            .then(i.cmp(&j))
    });
    let mut bits = vec![false; n];
    for &i in order.iter().take(budget) {
        bits[i] = true;
    }

    // Unconditional union: the dilated user mask is always foreground.
    let r = dilation as i64;
    for t in 0..n {
        if user_mask[t] == 0.0 {
            continue;
        }
        let (tr, tc) = ((t / side) as i64, (t % side) as i64);
        for dr in -r..=r {
            for dc in -r..=r {
                let (nr, nc) = (tr + dr, tc + dc);
                if (0..side as i64).contains(&nr) && (0..side as i64).contains(&nc) {
                    bits[nr as usize * side + nc as usize] = true;
                }
            }
        }
    }

    TokenMask::new(bits)
}

/// Reduces a fine token mask to a coarser square grid by OR-pooling
/// `factor × factor` cells: a coarse token is foreground when any fine
/// token under it is. Keeps user-mask safety intact across grid scales.
pub fn coarsen_token_mask(mask: &TokenMask, factor: usize) -> Result<TokenMask> {
    let side = token_grid_side(mask.len())?;
    if factor == 0 || side % factor != 0 {
        return Err(Error::config(format!(
            "token mask side {side} not divisible by coarsening factor {factor}"
        )));
    }
    let cs = side / factor;
    let mut bits = vec![false; cs * cs];
    for t in 0..mask.len() {
        if mask.is_foreground(t) {
            let (r, c) = (t / side, t % side);
            bits[(r / factor) * cs + c / factor] = true;
        }
    }
    TokenMask::new(bits)
}
