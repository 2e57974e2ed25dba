//! Forward/backward primitives shared by the residual blocks.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Branch-free single-precision `exp` (Cody-Waite reduction plus a degree-6
/// polynomial, about 1e-7 relative error) that vectorizes on baseline SSE2.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp_fast())
}

#[inline]
pub(crate) fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

#[inline]
pub(crate) fn silu_grad<S: Scalar>(z: S) -> S {
    let sg = sigmoid(z);
    sg * (S::one() + z * (S::one() - sg))
}

/// `c += a · b`
#[inline]
pub(crate) fn matmul_acc<S: Scalar>(a: &ArrayView2<S>, b: &ArrayView2<S>, c: &mut ArrayViewMut2<S>) {
    general_mat_mul(S::one(), a, b, S::one(), c);
}

/// Column sums accumulated into a `1 × d` row.
pub(crate) fn add_col_sums<S: Scalar>(x: &Array2<S>, acc: &mut Array2<S>) {
    let sums = x.sum_axis(Axis(0));
    let mut row = acc.row_mut(0);
    row += &sums;
}

pub(crate) struct NormCache<S> {
    pub xhat: Array2<S>,
    pub rstd: Array1<S>,
}

/// Row-wise standardization followed by a learned affine map.
pub(crate) fn layer_norm<S: Scalar>(
    x: &Array2<S>,
    gain: &Array2<S>,
    bias: &Array2<S>,
) -> (Array2<S>, NormCache<S>) {
    let (n, d) = x.dim();
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let eps = S::from_f64(NORM_EPS).unwrap();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() * inv_d;
        let var = row.fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let r = S::one() / (var + eps).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i))
            .and(&row)
            .for_each(|h, &v| *h = (v - mean) * r);
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    gain: &Array2<S>,
    cache: &NormCache<S>,
    d_gain: &mut Array2<S>,
    d_bias: &mut Array2<S>,
) -> Array2<S> {
    let (n, d) = dy.dim();
    add_col_sums(&(dy * &cache.xhat), d_gain);
    add_col_sums(dy, d_bias);
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let dxhat = dy * gain;
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() * inv_d;
        let mean_gx = g.dot(&xh) * inv_d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

/// Numerically stable in-place row softmax.
pub(crate) fn softmax_rows<S: Scalar>(x: &mut Array2<S>) {
    let cols = x.ncols();
    let data = x.as_slice_mut().expect("softmax input is contiguous");
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
        for v in row.iter_mut() {
            *v = (*v - max).exp_fast();
        }
        let inv = S::one() / row.iter().copied().sum::<S>();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax Jacobian-vector product: `p ⊙ (dp − rowsum(dp ⊙ p))`.
pub(crate) fn softmax_backward<S: Scalar>(p: &Array2<S>, dp: &Array2<S>) -> Array2<S> {
    let mut ds = Array2::zeros(p.dim());
    for i in 0..p.nrows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let dot = pr.dot(&dr);
        Zip::from(ds.row_mut(i))
            .and(&pr)
            .and(&dr)
            .for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    }
    ds
}

/// Sinusoidal embedding of a scalar position into `width` features
/// (sines in the first half, cosines in the second).
pub(crate) fn sinusoid(position: f64, width: usize) -> Array1<f64> {
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Interleaved sine/cosine encoding of timestep indices `0..len`.
pub(crate) fn position_table<S: Scalar>(len: usize, width: usize) -> Array2<S> {
    let mut out = Array2::zeros((len, width));
    for l in 0..len {
        for i in 0..width / 2 {
            let rate = 10_000f64.powf(-(2.0 * i as f64) / width as f64);
            out[[l, 2 * i]] = S::from_f64((l as f64 * rate).sin()).unwrap();
            out[[l, 2 * i + 1]] = S::from_f64((l as f64 * rate).cos()).unwrap();
        }
    }
    out
}

/// Rows of `u` for one channel, shifted back by `j · dilation` steps for tap
/// `j`, concatenated along features. Out-of-range rows are zero.
pub(crate) fn gather_taps<S: Scalar>(
    u: &ArrayView2<S>,
    taps: usize,
    dilation: usize,
) -> Array2<S> {
    let (len, d) = u.dim();
    let mut g = Array2::zeros((len, taps * d));
    for j in 0..taps {
        let shift = j * dilation;
        if shift >= len {
            continue;
        }
        g.slice_mut(s![shift.., j * d..(j + 1) * d])
            .assign(&u.slice(s![..len - shift, ..]));
    }
    g
}

/// Adjoint of [`gather_taps`]: scatter-adds `dg` back into `du`.
pub(crate) fn scatter_taps<S: Scalar>(
    dg: &Array2<S>,
    taps: usize,
    dilation: usize,
    du: &mut ArrayViewMut2<S>,
) {
    let (len, d) = du.dim();
    for j in 0..taps {
        let shift = j * dilation;
        if shift >= len {
            continue;
        }
        let mut dst = du.slice_mut(s![..len - shift, ..]);
        dst += &dg.slice(s![shift.., j * d..(j + 1) * d]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -80.0f32;
        while x < 80.0 {
            let exact = (x as f64).exp();
            let rel = ((exp_f32(x) as f64 - exact) / exact).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "worst relative error {worst:e}");
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((x[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, -1.0]];
        let g = Array2::ones((1, 4));
        let b = Array2::zeros((1, 4));
        let (y, _) = layer_norm(&x, &g, &b);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.mapv(|v| v * v).sum() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let u = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.5);
        let g = gather_taps(&u.view(), 3, 2);
        let probe = Array2::from_shape_fn(g.dim(), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0);
        let lhs = (&g * &probe).sum();
        let mut back = Array2::zeros((7, 3));
        scatter_taps(&probe, 3, 2, &mut back.view_mut());
        let rhs = (&u * &back).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_layout() {
        let e = sinusoid(0.0, 8);
        assert_eq!(e.slice(s![..4]).sum(), 0.0);
        assert_eq!(e.slice(s![4..]).sum(), 4.0);
    }
}
