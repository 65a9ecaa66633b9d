//! Shared numeric kernels.
//!
//! These free functions are the single source of truth for the heavy math:
//! both the eager backend and the autodiff graph call into them, which keeps
//! the two execution modes numerically identical. Convolutions lower to
//! im2col + matrix multiply; the backward kernels are their exact adjoints.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::Scalar;

/// Output spatial size of a convolution along one dimension.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lowers `x` (C, H, W) to the column matrix (C*kh*kw, Hout*Wout).
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kh * kw, hout * wout));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wout + ox] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating
/// overlapping contributions.
pub fn col2im<F: Scalar>(
    cols: &ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = cols.row(row);
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] =
                            x[(ci, iy as usize, ix as usize)] + col_row[oy * wout + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution: `x` (Cin, H, W) * `w` (Cout, Cin, kh, kw) + bias.
pub fn conv2d<F: Scalar>(
    x: &ArrayView3<F>,
    w: &ArrayView4<F>,
    b: Option<&ArrayView1<F>>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (cout, cin, kh, kw) = w.dim();
    assert_eq!(cin, x.dim().0, "conv2d: input channel mismatch");
    let hout = conv_out_len(x.dim().1, kh, stride, pad);
    let wout = conv_out_len(x.dim().2, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut y = w_mat.dot(&cols);
    if let Some(b) = b {
        for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
    }
    y.into_shape_with_order((cout, hout, wout)).unwrap()
}

/// Gradient of [`conv2d`] with respect to the input.
pub fn conv2d_grad_input<F: Scalar>(
    dy: &ArrayView3<F>,
    w: &ArrayView4<F>,
    in_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (cout, cin, kh, kw) = w.dim();
    let (_, hout, wout) = dy.dim();
    let dy_mat = dy.to_shape((cout, hout * wout)).unwrap();
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let dcols = w_mat.t().dot(&dy_mat);
    col2im(&dcols.view(), in_shape.0, in_shape.1, in_shape.2, kh, kw, stride, pad)
}

/// Gradients of [`conv2d`] with respect to the weights and bias.
pub fn conv2d_grad_weights<F: Scalar>(
    x: &ArrayView3<F>,
    dy: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array1<F>) {
    let cin = x.dim().0;
    let (cout, hout, wout) = dy.dim();
    let cols = im2col(x, kh, kw, stride, pad);
    let dy_mat = dy.to_shape((cout, hout * wout)).unwrap();
    let dw_mat = dy_mat.dot(&cols.t());
    let dw = dw_mat.into_shape_with_order((cout, cin, kh, kw)).unwrap();
    let db = dy_mat.sum_axis(Axis(1));
    (dw, db)
}

/// Group normalization over (C, H, W) with per-channel affine parameters.
/// Returns the output plus the per-group `(mean, rstd)` needed backward.
pub fn group_norm<F: Scalar>(
    x: &ArrayView3<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
    groups: usize,
    eps: f64,
) -> (Array3<F>, Vec<(F, F)>) {
    let (c, h, w) = x.dim();
    assert!(c % groups == 0, "group_norm: channels {c} not divisible by {groups} groups");
    let cg = c / groups;
    let m = F::from_f64((cg * h * w) as f64);
    let mut y = Array3::<F>::zeros((c, h, w));
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = x.slice(s![g * cg..(g + 1) * cg, .., ..]);
        let mean = xs.sum() / m;
        let mut var = F::zero();
        for &v in xs.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / m;
        let rstd = F::one() / (var + F::from_f64(eps)).sqrt();
        for ci in 0..cg {
            let ch = g * cg + ci;
            let ga = gamma[ch];
            let be = beta[ch];
            let xs_ch = x.slice(s![ch, .., ..]);
            let mut ys_ch = y.slice_mut(s![ch, .., ..]);
            ndarray::Zip::from(&mut ys_ch).and(&xs_ch).for_each(|yo, &xi| {
                *yo = (xi - mean) * rstd * ga + be;
            });
        }
        stats.push((mean, rstd));
    }
    (y, stats)
}

/// Backward of [`group_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn group_norm_grad<F: Scalar>(
    x: &ArrayView3<F>,
    dy: &ArrayView3<F>,
    gamma: &ArrayView1<F>,
    stats: &[(F, F)],
    groups: usize,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = x.dim();
    let cg = c / groups;
    let m = F::from_f64((cg * h * w) as f64);
    let mut dx = Array3::<F>::zeros((c, h, w));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for g in 0..groups {
        let (mean, rstd) = stats[g];
        // dyh = dy * gamma (gradient w.r.t. the normalized values)
        let mut sum_dyh = F::zero();
        let mut sum_dyh_xhat = F::zero();
        for ci in 0..cg {
            let ch = g * cg + ci;
            let ga = gamma[ch];
            let xs = x.slice(s![ch, .., ..]);
            let dys = dy.slice(s![ch, .., ..]);
            let mut dg = F::zero();
            let mut db = F::zero();
            ndarray::Zip::from(&dys).and(&xs).for_each(|&dyo, &xi| {
                let xhat = (xi - mean) * rstd;
                let dyh = dyo * ga;
                sum_dyh = sum_dyh + dyh;
                sum_dyh_xhat = sum_dyh_xhat + dyh * xhat;
                dg = dg + dyo * xhat;
                db = db + dyo;
            });
            dgamma[ch] = dgamma[ch] + dg;
            dbeta[ch] = dbeta[ch] + db;
        }
        let mean_dyh = sum_dyh / m;
        let mean_dyh_xhat = sum_dyh_xhat / m;
        for ci in 0..cg {
            let ch = g * cg + ci;
            let ga = gamma[ch];
            let xs = x.slice(s![ch, .., ..]);
            let dys = dy.slice(s![ch, .., ..]);
            let mut dxs = dx.slice_mut(s![ch, .., ..]);
            ndarray::Zip::from(&mut dxs).and(&dys).and(&xs).for_each(|dxo, &dyo, &xi| {
                let xhat = (xi - mean) * rstd;
                let dyh = dyo * ga;
                *dxo = rstd * (dyh - mean_dyh - xhat * mean_dyh_xhat);
            });
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise layer normalization over (N, d) with affine parameters of
/// length d. Returns the output plus per-row `(mean, rstd)`.
pub fn layer_norm<F: Scalar>(
    x: &ArrayView2<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
    eps: f64,
) -> (Array2<F>, Vec<(F, F)>) {
    let (n, d) = x.dim();
    let m = F::from_f64(d as f64);
    let mut y = Array2::<F>::zeros((n, d));
    let mut stats = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / m;
        let mut var = F::zero();
        for &v in row.iter() {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / m;
        let rstd = F::one() / (var + F::from_f64(eps)).sqrt();
        let mut yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push((mean, rstd));
    }
    (y, stats)
}

/// Backward of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_grad<F: Scalar>(
    x: &ArrayView2<F>,
    dy: &ArrayView2<F>,
    gamma: &ArrayView1<F>,
    stats: &[(F, F)],
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (n, d) = x.dim();
    let m = F::from_f64(d as f64);
    let mut dx = Array2::<F>::zeros((n, d));
    let mut dgamma = Array1::<F>::zeros(d);
    let mut dbeta = Array1::<F>::zeros(d);
    for i in 0..n {
        let (mean, rstd) = stats[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut sum_dyh = F::zero();
        let mut sum_dyh_xhat = F::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dyh = dyr[j] * gamma[j];
            sum_dyh = sum_dyh + dyh;
            sum_dyh_xhat = sum_dyh_xhat + dyh * xhat;
            dgamma[j] = dgamma[j] + dyr[j] * xhat;
            dbeta[j] = dbeta[j] + dyr[j];
        }
        let mean_dyh = sum_dyh / m;
        let mean_dyh_xhat = sum_dyh_xhat / m;
        let mut dxr = dx.row_mut(i);
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dyh = dyr[j] * gamma[j];
            dxr[j] = rstd * (dyh - mean_dyh - xhat * mean_dyh_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise numerically-stable softmax over the last axis of (N, K).
pub fn softmax_rows<F: Scalar>(x: &ArrayView2<F>) -> Array2<F> {
    let (n, k) = x.dim();
    let mut y = Array2::<F>::zeros((n, k));
    for i in 0..n {
        let row = x.row(i);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        let mut yr = y.row_mut(i);
        for j in 0..k {
            let e = (row[j] - max).exp();
            yr[j] = e;
            sum = sum + e;
        }
        let inv = F::one() / sum;
        for j in 0..k {
            yr[j] = yr[j] * inv;
        }
    }
    y
}

/// Backward of softmax given its output `y`: `dx = y * (dy - rowsum(dy*y))`.
pub fn softmax_rows_grad<F: Scalar>(y: &ArrayView2<F>, dy: &ArrayView2<F>) -> Array2<F> {
    let (n, k) = y.dim();
    let mut dx = Array2::<F>::zeros((n, k));
    for i in 0..n {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let mut dot = F::zero();
        for j in 0..k {
            dot = dot + yr[j] * dyr[j];
        }
        let mut dxr = dx.row_mut(i);
        for j in 0..k {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<F: Scalar>(v: F) -> F {
    v * sigmoid(v)
}

/// Derivative of SiLU at `x`.
pub fn silu_grad<F: Scalar>(v: F) -> F {
    let s = sigmoid(v);
    s * (F::one() + v * (F::one() - s))
}

/// Nearest-neighbour 2x upsampling of (C, H, W).
pub fn upsample2x<F: Scalar>(x: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn downsum2x<F: Scalar>(dy: &ArrayView3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[(ci, i, j)] = dy[(ci, 2 * i, 2 * j)]
                    + dy[(ci, 2 * i, 2 * j + 1)]
                    + dy[(ci, 2 * i + 1, 2 * j)]
                    + dy[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    dx
}
