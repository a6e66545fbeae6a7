//! Normalized DFT and DCT along one axis of a token × embedding matrix.
//!
//! Both transforms are unitary (`1/√K` on forward and inverse), so Parseval
//! holds exactly and the adjoint of each forward map is its inverse. The DCT
//! is the orthonormal DCT-II obtained from the DFT of the double-length even
//! extension `[x_0 .. x_{K-1}, x_{K-1} .. x_0]`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{FouraError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Dft,
    Dct,
}

/// Which axis of a `d × k` activation matrix the transform runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Along each token's embedding vector (each row).
    #[default]
    Embedding,
    /// Along the token dimension (each column).
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub kind: TransformKind,
    pub axis: Axis,
    pub re: Matrix,
    /// Identically zero for the DCT.
    pub im: Matrix,
}

/// Cosine/sine of `2πm/n` for `m in 0..n`, cached per length and thread.
struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

thread_local! {
    static TWIDDLES: RefCell<HashMap<usize, Rc<Twiddles>>> = RefCell::new(HashMap::new());
}

fn twiddles(n: usize) -> Rc<Twiddles> {
    TWIDDLES.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let (cos, sin) = (0..n)
                    .map(|m| {
                        let ang = 2.0 * PI * m as f64 / n as f64;
                        (ang.cos(), ang.sin())
                    })
                    .unzip();
                Rc::new(Twiddles { cos, sin })
            })
            .clone()
    })
}

/// Forward normalized DFT of a real signal: `X[f] = 1/√K Σ_k x[k] e^{−j2πfk/K}`.
pub fn dft_1d(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = x.len();
    let tw = twiddles(k);
    let norm = 1.0 / (k as f64).sqrt();
    let mut re = vec![0.0; k];
    let mut im = vec![0.0; k];
    for f in 0..k {
        let (mut sr, mut si) = (0.0, 0.0);
        for (n, &xn) in x.iter().enumerate() {
            let m = (f * n) % k;
            sr += xn * tw.cos[m];
            si -= xn * tw.sin[m];
        }
        re[f] = sr * norm;
        im[f] = si * norm;
    }
    (re, im)
}

/// Real part of the normalized inverse DFT of `re + j·im`.
pub fn idft_1d_real(re: &[f64], im: &[f64]) -> Vec<f64> {
    let k = re.len();
    let tw = twiddles(k);
    let norm = 1.0 / (k as f64).sqrt();
    (0..k)
        .map(|n| {
            let mut acc = 0.0;
            for f in 0..k {
                let m = (f * n) % k;
                acc += re[f] * tw.cos[m] - im[f] * tw.sin[m];
            }
            acc * norm
        })
        .collect()
}

/// Orthonormal DCT-II via the DFT of the double-length even extension.
pub fn dct_1d(x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let two_k = 2 * k;
    let tw2 = twiddles(two_k);
    let tw4 = twiddles(4 * k);
    let extended: Vec<f64> = (0..two_k)
        .map(|n| if n < k { x[n] } else { x[two_k - n - 1] })
        .collect();
    // Unnormalized length-2K DFT; only the first K bins are needed.
    // Y[f] = 2 e^{jπf/2K} Σ_n x[n] cos(πf(2n+1)/2K), so the DCT-II sum is
    // Re(e^{−jπf/2K} Y[f]) / 2.
    (0..k)
        .map(|f| {
            let (mut yr, mut yi) = (0.0, 0.0);
            for (n, &xn) in extended.iter().enumerate() {
                let m = (f * n) % two_k;
                yr += xn * tw2.cos[m];
                yi -= xn * tw2.sin[m];
            }
            let sum = 0.5 * (yr * tw4.cos[f] + yi * tw4.sin[f]);
            dct_scale(f, k) * sum
        })
        .collect()
}

/// Inverse of [`dct_1d`] (orthonormal DCT-III).
pub fn idct_1d(c: &[f64]) -> Vec<f64> {
    let k = c.len();
    let tw4 = twiddles(4 * k);
    (0..k)
        .map(|n| {
            c.iter()
                .enumerate()
                .map(|(f, &cf)| dct_scale(f, k) * cf * tw4.cos[(f * (2 * n + 1)) % (4 * k)])
                .sum()
        })
        .collect()
}

fn dct_scale(f: usize, k: usize) -> f64 {
    if f == 0 {
        (1.0 / k as f64).sqrt()
    } else {
        (2.0 / k as f64).sqrt()
    }
}

/// Applies `f` to every row (embedding axis) or column (token axis).
fn map_axis(z: &Matrix, axis: Axis, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Matrix {
    match axis {
        Axis::Embedding => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                out.row_mut(i).copy_from_slice(&f(z.row(i)));
            }
            out
        }
        Axis::Token => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for j in 0..z.cols() {
                out.set_col(j, &f(&z.col(j)));
            }
            out
        }
    }
}

fn map_axis_to_pair(
    z: &Matrix,
    axis: Axis,
    mut f: impl FnMut(&[f64]) -> (Vec<f64>, Vec<f64>),
) -> (Matrix, Matrix) {
    let mut out_re = Matrix::zeros(z.rows(), z.cols());
    let mut out_im = Matrix::zeros(z.rows(), z.cols());
    match axis {
        Axis::Embedding => {
            for i in 0..z.rows() {
                let (a, b) = f(z.row(i));
                out_re.row_mut(i).copy_from_slice(&a);
                out_im.row_mut(i).copy_from_slice(&b);
            }
        }
        Axis::Token => {
            for j in 0..z.cols() {
                let (a, b) = f(&z.col(j));
                out_re.set_col(j, &a);
                out_im.set_col(j, &b);
            }
        }
    }
    (out_re, out_im)
}

fn map_pair_to_axis(
    re: &Matrix,
    im: &Matrix,
    axis: Axis,
    mut f: impl FnMut(&[f64], &[f64]) -> Vec<f64>,
) -> Matrix {
    let mut out = Matrix::zeros(re.rows(), re.cols());
    match axis {
        Axis::Embedding => {
            for i in 0..re.rows() {
                out.row_mut(i).copy_from_slice(&f(re.row(i), im.row(i)));
            }
        }
        Axis::Token => {
            for j in 0..re.cols() {
                out.set_col(j, &f(&re.col(j), &im.col(j)));
            }
        }
    }
    out
}

/// Forward transform of a real matrix along `axis`.
pub fn forward(z: &Matrix, kind: TransformKind, axis: Axis) -> Result<Spectrum> {
    let (re, im) = match kind {
        TransformKind::Dft => map_axis_to_pair(z, axis, dft_1d),
        TransformKind::Dct => (
            map_axis(z, axis, dct_1d),
            Matrix::zeros(z.rows(), z.cols()),
        ),
    };
    Ok(Spectrum { kind, axis, re, im })
}

/// Inverse transform. On the DFT path only the real part is returned.
pub fn inverse(s: &Spectrum) -> Result<Matrix> {
    if s.re.shape() != s.im.shape() {
        return Err(FouraError::invalid(format!(
            "spectrum parts differ in shape: {:?} vs {:?}",
            s.re.shape(),
            s.im.shape()
        )));
    }
    match s.kind {
        TransformKind::Dft => Ok(map_pair_to_axis(&s.re, &s.im, s.axis, idft_1d_real)),
        TransformKind::Dct => {
            if s.im.data().iter().any(|&x| x != 0.0) {
                return Err(FouraError::invalid(
                    "DCT spectrum must have an all-zero imaginary part",
                ));
            }
            Ok(map_axis(&s.re, s.axis, idct_1d))
        }
    }
}

/// Inverse transform from separately held real and imaginary parts. The
/// imaginary part is ignored for the DCT; `None` means zero.
pub fn inverse_parts(
    re: &Matrix,
    im: Option<&Matrix>,
    kind: TransformKind,
    axis: Axis,
) -> Result<Matrix> {
    match (kind, im) {
        (TransformKind::Dft, Some(im)) => {
            if re.shape() != im.shape() {
                return Err(FouraError::invalid("spectrum parts differ in shape"));
            }
            Ok(map_pair_to_axis(re, im, axis, idft_1d_real))
        }
        (TransformKind::Dft, None) => {
            let zero = Matrix::zeros(re.rows(), re.cols());
            Ok(map_pair_to_axis(re, &zero, axis, idft_1d_real))
        }
        (TransformKind::Dct, _) => Ok(map_axis(re, axis, idct_1d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct O(K²) summation with fresh trig calls, independent of the
    /// cached twiddle tables.
    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = x.len() as f64;
        (0..x.len())
            .map(|f| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (n, &v)| {
                    let ang = -2.0 * PI * f as f64 * n as f64 / k;
                    (r + v * ang.cos() / k.sqrt(), i + v * ang.sin() / k.sqrt())
                })
            })
            .unzip()
    }

    fn direct_dct2(x: &[f64]) -> Vec<f64> {
        let k = x.len();
        (0..k)
            .map(|f| {
                let s = if f == 0 { (1.0 / k as f64).sqrt() } else { (2.0 / k as f64).sqrt() };
                s * x
                    .iter()
                    .enumerate()
                    .map(|(n, &v)| v * (PI * f as f64 * (2.0 * n as f64 + 1.0) / (2.0 * k as f64)).cos())
                    .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let z = Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]);
        let s = forward(&z, TransformKind::Dft, Axis::Embedding).unwrap();
        assert!(s.re.max_abs_diff(&Matrix::row_vector(&[0.5; 4])) < 1e-15);
        assert!(s.im.max_abs() < 1e-15);
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let z = Matrix::row_vector(&[1.7; 6]);
        let s = forward(&z, TransformKind::Dct, Axis::Embedding).unwrap();
        assert!((s.re.get(0, 0) - 1.7 * 6f64.sqrt()).abs() < 1e-12);
        assert!(s.re.data()[1..].iter().all(|x| x.abs() < 1e-12));
        assert_eq!(s.im.max_abs(), 0.0);
    }

    #[test]
    fn dft_matches_direct_summation() {
        let mut rng = Rng::seed_from_u64(8);
        let z = rng.gaussian_matrix(5, 8, 1.0);
        let s = forward(&z, TransformKind::Dft, Axis::Embedding).unwrap();
        for i in 0..5 {
            let (re, im) = naive_dft(z.row(i));
            for f in 0..8 {
                assert!((s.re.get(i, f) - re[f]).abs() < 1e-10);
                assert!((s.im.get(i, f) - im[f]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dct_via_even_extension_matches_direct_formula() {
        let mut rng = Rng::seed_from_u64(9);
        for k in [1, 2, 3, 7, 16, 33] {
            let x: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let a = dct_1d(&x);
            let b = direct_dct2(&x);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-10, "k={k}");
            }
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let s = Spectrum {
            kind: TransformKind::Dft,
            axis: Axis::Embedding,
            re: Matrix::row_vector(&[2.0 * 2.0, 0.0, 0.0, 0.0]),
            im: Matrix::zeros(1, 4),
        };
        let out = inverse(&s).unwrap();
        assert!(out.max_abs_diff(&Matrix::row_vector(&[2.0; 4])) < 1e-15);
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        for kind in [TransformKind::Dft, TransformKind::Dct] {
            let s = Spectrum {
                kind,
                axis: Axis::Token,
                re: Matrix::zeros(3, 4),
                im: Matrix::zeros(3, 4),
            };
            assert_eq!(inverse(&s).unwrap(), Matrix::zeros(3, 4));
        }
    }

    #[test]
    fn malformed_spectra_rejected() {
        let bad = Spectrum {
            kind: TransformKind::Dft,
            axis: Axis::Embedding,
            re: Matrix::zeros(2, 3),
            im: Matrix::zeros(3, 2),
        };
        assert!(matches!(inverse(&bad), Err(FouraError::InvalidInput(_))));
        let dct_with_im = Spectrum {
            kind: TransformKind::Dct,
            axis: Axis::Embedding,
            re: Matrix::zeros(1, 2),
            im: Matrix::row_vector(&[0.0, 1.0]),
        };
        assert!(inverse(&dct_with_im).is_err());
    }

    #[test]
    fn conjugate_symmetry_on_real_input() {
        let mut rng = Rng::seed_from_u64(10);
        let z = rng.gaussian_matrix(4, 7, 1.0);
        let s = forward(&z, TransformKind::Dft, Axis::Token).unwrap();
        let k = 4;
        for j in 0..7 {
            for f in 0..k {
                let g = (k - f) % k;
                assert!((s.re.get(f, j) - s.re.get(g, j)).abs() < 1e-10);
                assert!((s.im.get(f, j) + s.im.get(g, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn axis_semantics_commute_with_transpose() {
        let mut rng = Rng::seed_from_u64(12);
        let z = rng.gaussian_matrix(6, 5, 1.0);
        for kind in [TransformKind::Dft, TransformKind::Dct] {
            let a = forward(&z, kind, Axis::Embedding).unwrap();
            let b = forward(&z.transpose(), kind, Axis::Token).unwrap();
            assert!(a.re.transpose().max_abs_diff(&b.re) < 1e-12);
            assert!(a.im.transpose().max_abs_diff(&b.im) < 1e-12);
        }
    }

    #[test]
    fn inverse_parts_matches_inverse() {
        let mut rng = Rng::seed_from_u64(13);
        let z = rng.gaussian_matrix(3, 6, 1.0);
        for kind in [TransformKind::Dft, TransformKind::Dct] {
            let s = forward(&z, kind, Axis::Embedding).unwrap();
            let a = inverse(&s).unwrap();
            let b = inverse_parts(&s.re, Some(&s.im), kind, Axis::Embedding).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-15);
            assert!(a.max_abs_diff(&z) < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip_parseval_and_linearity(
            seed in 0u64..10_000,
            rows in 1usize..9,
            cols in 1usize..17,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = Rng::seed_from_u64(seed);
            let x = rng.gaussian_matrix(rows, cols, 1.0);
            let y = rng.gaussian_matrix(rows, cols, 1.0);
            for kind in [TransformKind::Dft, TransformKind::Dct] {
                for axis in [Axis::Embedding, Axis::Token] {
                    let s = forward(&x, kind, axis).unwrap();
                    let back = inverse(&s).unwrap();
                    proptest::prop_assert!(back.max_abs_diff(&x) < 1e-10);
                    let energy = s.re.sum_squares() + s.im.sum_squares();
                    proptest::prop_assert!((energy - x.sum_squares()).abs() < 1e-10 * (1.0 + x.sum_squares()));
                    let combo = x.scale(a).add(&y.scale(b)).unwrap();
                    let lhs = forward(&combo, kind, axis).unwrap();
                    let sy = forward(&y, kind, axis).unwrap();
                    let rhs_re = s.re.scale(a).add(&sy.re.scale(b)).unwrap();
                    let rhs_im = s.im.scale(a).add(&sy.im.scale(b)).unwrap();
                    proptest::prop_assert!(lhs.re.max_abs_diff(&rhs_re) < 1e-10);
                    proptest::prop_assert!(lhs.im.max_abs_diff(&rhs_im) < 1e-10);
                }
            }
        }
    }
}
