//! Small complex FFT used by the mel frontend and the frequency fuser.
//!
//! Radix-2 Cooley-Tukey for power-of-two lengths, naive DFT otherwise.
//! Sizes in this crate are tiny, so no further optimization is needed.

use num_complex::Complex;

use crate::scalar::Scalar;

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place forward (`inverse = false`) or unnormalized inverse DFT.
/// The inverse here includes the 1/n factor, so `ifft(fft(x)) == x`.
pub fn fft_inplace<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if is_pow2(n) {
        fft_radix2(buf, inverse);
    } else {
        let out = dft_naive(buf, inverse);
        buf.copy_from_slice(&out);
    }
    if inverse {
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for v in buf.iter_mut() {
            *v = *v * inv_n;
        }
    }
}

fn fft_radix2<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { T::one() } else { -T::one() };
    let mut len = 2;
    while len <= n {
        let ang = sign * T::from_f64_lossy(2.0) * T::PI() / T::from_usize(len).unwrap();
        let wlen = Complex::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex::new(T::one(), T::zero());
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w = w * wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

fn dft_naive<T: Scalar>(buf: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = buf.len();
    let sign = if inverse { T::one() } else { -T::one() };
    let two_pi = T::from_f64_lossy(2.0) * T::PI();
    (0..n)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (m, &v) in buf.iter().enumerate() {
                let ang = sign * two_pi * T::from_usize(k * m).unwrap() / T::from_usize(n).unwrap();
                acc += v * Complex::new(ang.cos(), ang.sin());
            }
            acc
        })
        .collect()
}

/// 3D DFT over a (d0, d1, d2) row-major complex grid.
pub fn fft3_inplace<T: Scalar>(
    grid: &mut [Complex<T>],
    dims: (usize, usize, usize),
    inverse: bool,
) {
    let (d0, d1, d2) = dims;
    assert_eq!(grid.len(), d0 * d1 * d2);
    // axis 2 (contiguous rows)
    for row in grid.chunks_mut(d2) {
        fft_inplace(row, inverse);
    }
    // axis 1
    let mut tmp = vec![Complex::new(T::zero(), T::zero()); d1];
    for i0 in 0..d0 {
        for i2 in 0..d2 {
            for i1 in 0..d1 {
                tmp[i1] = grid[(i0 * d1 + i1) * d2 + i2];
            }
            fft_inplace(&mut tmp, inverse);
            for i1 in 0..d1 {
                grid[(i0 * d1 + i1) * d2 + i2] = tmp[i1];
            }
        }
    }
    // axis 0
    let mut tmp = vec![Complex::new(T::zero(), T::zero()); d0];
    for i1 in 0..d1 {
        for i2 in 0..d2 {
            for i0 in 0..d0 {
                tmp[i0] = grid[(i0 * d1 + i1) * d2 + i2];
            }
            fft_inplace(&mut tmp, inverse);
            for i0 in 0..d0 {
                grid[(i0 * d1 + i1) * d2 + i2] = tmp[i0];
            }
        }
    }
}

/// Forward real-to-complex 3D DFT of a real grid.
pub fn fft3_real<T: Scalar>(real: &[T], dims: (usize, usize, usize)) -> Vec<Complex<T>> {
    let mut grid: Vec<Complex<T>> = real
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft3_inplace(&mut grid, dims, false);
    grid
}
