//! Direct 2D convolution kernels: im2col lowering plus GEMM.
//!
//! Stride is fixed at 1 and padding is always "same", so spatial extents are
//! preserved. Kernels may be square with odd extents, or 1×n / n×1 pairs for
//! the asymmetric variant; dilation applies per axis.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-axis zero padding that keeps the output the same size:
/// ((k − 1) · d) / 2, which is integral for odd or unit extents.
pub fn same_padding(k: usize, d: usize) -> usize {
    (k - 1) * d / 2
}

/// The output columns `j` for which `j + dv` lands inside `0..w`, clamped so
/// the range is always valid (possibly empty) even when the shifted tap
/// misses the row entirely.
fn valid_j_range(dv: isize, w: usize) -> (usize, usize) {
    let j0 = (-dv).clamp(0, w as isize) as usize;
    let j1 = (w as isize - dv).clamp(0, w as isize) as usize;
    (j0, j1.max(j0))
}

/// Validates a conv instance and returns (B, Cin, H, W, Cout, kh, kw).
pub fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {:?} has {cin} channels, kernel {:?} expects {kcin}",
            input.shape(),
            kernel.shape()
        )));
    }
    for (axis, k) in [("height", kh), ("width", kw)] {
        if k != 1 && k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel {axis} extent {k} is even; only odd or unit extents are supported"
            )));
        }
    }
    if dilation.0 == 0 || dilation.1 == 0 {
        return Err(Error::Shape("conv2d dilation must be >= 1".into()));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok((b, cin, h, w, cout, kh, kw))
}

/// Lowers one image of shape Cin×H×W into a (Cin·kh·kw) × (H·W) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
    col: &mut [T],
) {
    let ph = same_padding(kh, dh) as isize;
    let pw = same_padding(kw, dw) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * hw;
                let dv = v as isize * dw as isize - pw;
                for i in 0..h {
                    let si = i as isize + u as isize * dh as isize - ph;
                    let dst = &mut col[row + i * w..row + (i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    let (j0, j1) = valid_j_range(dv, w);
                    dst[..j0].fill(T::zero());
                    dst[j1..].fill(T::zero());
                    for j in j0..j1 {
                        dst[j] = src[(j as isize + dv) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
    dx: &mut [T],
) {
    let ph = same_padding(kh, dh) as isize;
    let pw = same_padding(kw, dw) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * hw;
                let dv = v as isize * dw as isize - pw;
                for i in 0..h {
                    let si = i as isize + u as isize * dh as isize - ph;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &col[row + i * w..row + (i + 1) * w];
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let (j0, j1) = valid_j_range(dv, w);
                    for j in j0..j1 {
                        dst[(j as isize + dv) as usize] = dst[(j as isize + dv) as usize] + src[j];
                    }
                }
            }
        }
    }
}

/// Forward convolution; shapes must already have been checked.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: (usize, usize),
) -> Tensor<T> {
    let (b, cin, h, w) = input.dims4().expect("checked");
    let (cout, _, kh, kw) = kernel.dims4().expect("checked");
    let hw = h * w;
    let ckk = cin * kh * kw;
    let mut out = Tensor::zeros(vec![b, cout, h, w]);
    let mut col = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        im2col(
            &input.data()[bi * cin * hw..(bi + 1) * cin * hw],
            cin, h, w, kh, kw, dilation.0, dilation.1, &mut col,
        );
        let y = &mut out.data_mut()[bi * cout * hw..(bi + 1) * cout * hw];
        T::gemm(cout, ckk, hw, T::one(), kernel.data(), &col, T::zero(), y);
        for co in 0..cout {
            let beta = bias.data()[co];
            for v in &mut y[co * hw..(co + 1) * hw] {
                *v = *v + beta;
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: (usize, usize),
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, cin, h, w) = input.dims4().expect("checked");
    let (cout, _, kh, kw) = kernel.dims4().expect("checked");
    let hw = h * w;
    let ckk = cin * kh * kw;
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut dk = Tensor::zeros(kernel.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    let mut col = vec![T::zero(); ckk * hw];
    let mut dcol = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let dy_b = &dy.data()[bi * cout * hw..(bi + 1) * cout * hw];
        im2col(
            &input.data()[bi * cin * hw..(bi + 1) * cin * hw],
            cin, h, w, kh, kw, dilation.0, dilation.1, &mut col,
        );
        // dK += dY · colᵀ (accumulate across the batch in index order)
        unsafe {
            gemm_strided(
                cout, hw, ckk, T::one(),
                dy_b.as_ptr(), hw as isize, 1,
                col.as_ptr(), 1, hw as isize,
                T::one(),
                dk.data_mut().as_mut_ptr(), ckk as isize, 1,
            );
        }
        // dcol = Kᵀ · dY, then scatter back to the input
        unsafe {
            gemm_strided(
                ckk, cout, hw, T::one(),
                kernel.data().as_ptr(), 1, ckk as isize,
                dy_b.as_ptr(), hw as isize, 1,
                T::zero(),
                dcol.as_mut_ptr(), hw as isize, 1,
            );
        }
        col2im_acc(
            &dcol,
            cin, h, w, kh, kw, dilation.0, dilation.1,
            &mut dx.data_mut()[bi * cin * hw..(bi + 1) * cin * hw],
        );
        for co in 0..cout {
            let s: T = dy_b[co * hw..(co + 1) * hw].iter().copied().sum();
            db.data_mut()[co] = db.data()[co] + s;
        }
    }
    (dx, dk, db)
}

/// Strided GEMM used for the transposed products in the backward pass.
///
/// # Safety
/// Pointers must reference buffers large enough for the given extents and
/// strides; aliasing between `c` and the inputs is not allowed.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided<T: Scalar>(
    m: usize, k: usize, n: usize, alpha: T,
    a: *const T, rsa: isize, csa: isize,
    b: *const T, rsb: isize, csb: isize,
    beta: T,
    c: *mut T, rsc: isize, csc: isize,
) {
    // Monomorphised per scalar type; only two widths exist.
    if std::mem::size_of::<T>() == 4 {
        matrixmultiply::sgemm(
            m, k, n,
            alpha.to_f64() as f32,
            a as *const f32, rsa, csa,
            b as *const f32, rsb, csb,
            beta.to_f64() as f32,
            c as *mut f32, rsc, csc,
        );
    } else {
        matrixmultiply::dgemm(
            m, k, n,
            alpha.to_f64(),
            a as *const f64, rsa, csa,
            b as *const f64, rsb, csb,
            beta.to_f64(),
            c as *mut f64, rsc, csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution by direct summation, independent of im2col.
    pub fn conv2d_naive(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        dilation: (usize, usize),
    ) -> Tensor<f64> {
        let (b, cin, h, w) = input.dims4().unwrap();
        let (cout, _, kh, kw) = kernel.dims4().unwrap();
        let ph = same_padding(kh, dilation.0) as isize;
        let pw = same_padding(kw, dilation.1) as isize;
        let mut out = Tensor::zeros(vec![b, cout, h, w]);
        for bi in 0..b {
            for co in 0..cout {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for u in 0..kh as isize {
                                for v in 0..kw as isize {
                                    let si = i + u * dilation.0 as isize - ph;
                                    let sj = j + v * dilation.1 as isize - pw;
                                    if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                                        acc += input.at4(bi, ci, si as usize, sj as usize)
                                            * kernel.at4(co, ci, u as usize, v as usize);
                                    }
                                }
                            }
                        }
                        let idx = ((bi * cout + co) * h + i as usize) * w + j as usize;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        // small deterministic LCG; good enough for agreement tests
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn gemm_path_matches_direct_summation() {
        for (ks, dil, seed) in [
            ((3, 3), (1, 1), 1u64),
            ((3, 3), (2, 2), 2),
            ((5, 5), (1, 1), 3),
            ((1, 3), (1, 2), 4),
            ((3, 1), (2, 1), 5),
            ((1, 1), (1, 1), 6),
        ] {
            let x = rand_tensor(vec![2, 3, 6, 5], seed);
            let k = rand_tensor(vec![4, 3, ks.0, ks.1], seed + 100);
            let b = rand_tensor(vec![4], seed + 200);
            check_conv_shapes(&x, &k, &b, dil).unwrap();
            let fast = conv2d_forward(&x, &k, &b, dil);
            let slow = conv2d_naive(&x, &k, &b, dil);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "kernel {ks:?} dilation {dil:?}");
            }
        }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(vec![1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros(vec![1]);
        let y = conv2d_forward(&x, &k, &b, (1, 1));
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![2, 4, 3, 3]);
        let b = Tensor::<f32>::zeros(vec![2]);
        let err = check_conv_shapes(&x, &k, &b, (1, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn rejects_even_non_unit_kernel() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(vec![1]);
        assert!(check_conv_shapes(&x, &k, &b, (1, 1)).is_err());
    }

    #[test]
    fn dilated_impulse_support_spans_receptive_field() {
        // Centered delta on a 9x9 grid through a 3x3 kernel with dilation 2:
        // the response hits the 3x3 grid of taps spaced 2 apart, spanning an
        // effective receptive field of (3-1)*2+1 = 5 per axis.
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros(vec![1]);
        for y in [conv2d_naive(&x, &k, &b, (2, 2)), conv2d_forward(&x, &k, &b, (2, 2))] {
            let mut support = vec![];
            for i in 0..9 {
                for j in 0..9 {
                    if y.at4(0, 0, i, j) != 0.0 {
                        support.push((i, j));
                    }
                }
            }
            let expect: Vec<(usize, usize)> = [2, 4, 6]
                .iter()
                .flat_map(|&i| [2, 4, 6].iter().map(move |&j| (i, j)))
                .collect();
            assert_eq!(support, expect);
            let (lo, hi) = (
                support.iter().map(|p| p.0).min().unwrap(),
                support.iter().map(|p| p.0).max().unwrap(),
            );
            assert_eq!(hi - lo + 1, 5, "per-axis span equals (k-1)*d+1");
        }
    }
}
