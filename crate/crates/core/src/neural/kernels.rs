//! Dense matrix-vector kernels on row-major storage.
//!
//! Each kernel is written once and compiled twice: a portable version and,
//! on x86-64 machines that support it, an AVX2/FMA version chosen at run
//! time.

use ndarray::{Array1, Array2};

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn dot<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    let mut lo = [0.0; 4];
    let mut hi = [0.0; 4];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 8] = x.try_into().expect("chunk of 8");
        let y: &[f64; 8] = y.try_into().expect("chunk of 8");
        for k in 0..4 {
            lo[k] = madd::<FMA>(x[k], y[k], lo[k]);
            hi[k] = madd::<FMA>(x[k + 4], y[k + 4], hi[k]);
        }
    }
    let mut s = 0.0;
    for k in 0..4 {
        s += lo[k] + hi[k];
    }
    for (x, y) in ra.iter().zip(rb) {
        s = madd::<FMA>(*x, *y, s);
    }
    s
}

#[inline(always)]
fn axpy<const FMA: bool>(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = madd::<FMA>(a, xi, *yi);
    }
}

#[inline(always)]
fn matvec_impl<const FMA: bool>(m: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = dot::<FMA>(row, x);
    }
}

#[inline(always)]
fn outer_impl<const FMA: bool>(m: &mut [f64], cols: usize, a: &[f64], b: &[f64]) {
    for (row, &ai) in m.chunks_exact_mut(cols).zip(a) {
        if ai != 0.0 {
            axpy::<FMA>(ai, b, row);
        }
    }
}

#[inline(always)]
fn dot_t_impl<const FMA: bool>(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (row, &vi) in m.chunks_exact(cols).zip(v) {
        if vi != 0.0 {
            axpy::<FMA>(vi, row, out);
        }
    }
}

macro_rules! dispatch {
    ($name:ident, $impl:ident, ($($arg:ident: $ty:ty),*)) => {
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn fast($($arg: $ty),*) {
                    $impl::<true>($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were just detected.
                    return unsafe { fast($($arg),*) };
                }
            }
            $impl::<false>($($arg),*)
        }
    };
}

dispatch!(matvec_slices, matvec_impl, (m: &[f64], cols: usize, x: &[f64], out: &mut [f64]));
dispatch!(outer_slices, outer_impl, (m: &mut [f64], cols: usize, a: &[f64], b: &[f64]));
dispatch!(dot_t_slices, dot_t_impl, (m: &[f64], cols: usize, v: &[f64], out: &mut [f64]));

fn flat(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("standard layout")
}

fn vec_slice(v: &Array1<f64>) -> &[f64] {
    v.as_slice().expect("contiguous vector")
}

/// `m x`.
pub(crate) fn matvec(m: &Array2<f64>, x: &Array1<f64>) -> Array1<f64> {
    assert_eq!(m.ncols(), x.len(), "matrix-vector shape mismatch");
    let mut out = Array1::zeros(m.nrows());
    if m.ncols() > 0 {
        matvec_slices(
            flat(m),
            m.ncols(),
            vec_slice(x),
            out.as_slice_mut().expect("fresh vector"),
        );
    }
    out
}

/// `m += a ⊗ b`.
pub(crate) fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    assert_eq!(
        (m.nrows(), m.ncols()),
        (a.len(), b.len()),
        "outer product shape mismatch"
    );
    let cols = m.ncols();
    if cols > 0 {
        outer_slices(
            m.as_slice_mut().expect("standard layout"),
            cols,
            vec_slice(a),
            vec_slice(b),
        );
    }
}

/// `out += mᵀ v`.
pub(crate) fn add_dot_t(out: &mut Array1<f64>, m: &Array2<f64>, v: &Array1<f64>) {
    assert_eq!(
        (m.nrows(), m.ncols()),
        (v.len(), out.len()),
        "transposed product shape mismatch"
    );
    let cols = m.ncols();
    if cols > 0 {
        dot_t_slices(
            flat(m),
            cols,
            vec_slice(v),
            out.as_slice_mut().expect("contiguous vector"),
        );
    }
}

/// `mᵀ v`.
pub(crate) fn dot_t(m: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    add_dot_t(&mut out, m, v);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn agrees_with_ndarray() {
        let m = Array2::from_shape_fn((5, 11), |(i, j)| (i as f64 + 1.0) * 0.25 - j as f64 * 0.125);
        let x = Array1::from_shape_fn(11, |j| j as f64 - 3.0);
        let v = Array1::from_shape_fn(5, |i| 0.5 - i as f64);
        for (a, b) in matvec(&m, &x).iter().zip(m.dot(&x).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in dot_t(&m, &v).iter().zip(m.t().dot(&v).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut acc = Array2::zeros((2, 3));
        add_outer(&mut acc, &array![1.0, 2.0], &array![3.0, 4.0, 5.0]);
        assert_eq!(acc, array![[3.0, 4.0, 5.0], [6.0, 8.0, 10.0]]);
    }

    #[test]
    fn empty_dimensions() {
        let m = Array2::<f64>::zeros((3, 0));
        assert_eq!(matvec(&m, &Array1::zeros(0)), Array1::<f64>::zeros(3));
        assert_eq!(dot_t(&m, &Array1::ones(3)).len(), 0);
    }
}
