//! 2D FFT on a periodic unit square plus the wavenumber tables the
//! pseudo-spectral solver needs.

use std::sync::Arc;

use ndarray::Array2;
use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

pub(crate) struct Spectral<T: Scalar> {
    pub h: usize,
    pub w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    /// Angular wavenumber along x for each column index.
    pub kx: Vec<T>,
    /// Angular wavenumber along y for each row index.
    pub ky: Vec<T>,
    /// |k|² per mode (row-major), zero at the mean mode.
    pub k2: Vec<T>,
    /// 2/3-rule mask per mode.
    pub dealias: Vec<bool>,
    col_buf: Vec<Complex<T>>,
}

fn wavenumbers<T: Scalar>(n: usize) -> (Vec<T>, Vec<usize>) {
    let two_pi = T::PI() + T::PI();
    let mut k = Vec::with_capacity(n);
    let mut m_abs = Vec::with_capacity(n);
    for j in 0..n {
        let m = if j < n / 2 { j as i64 } else { j as i64 - n as i64 };
        m_abs.push(m.unsigned_abs() as usize);
        // The Nyquist mode has no well-defined derivative on a real grid.
        if j == n / 2 {
            k.push(T::zero());
        } else {
            k.push(two_pi * T::lit(m as f64));
        }
    }
    (k, m_abs)
}

impl<T: Scalar> Spectral<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let (kx, mx) = wavenumbers::<T>(w);
        let (ky, my) = wavenumbers::<T>(h);
        let mut k2 = Vec::with_capacity(h * w);
        let mut dealias = Vec::with_capacity(h * w);
        for j in 0..h {
            for i in 0..w {
                k2.push(kx[i] * kx[i] + ky[j] * ky[j]);
                dealias.push(3 * mx[i] < w && 3 * my[j] < h);
            }
        }
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
            kx,
            ky,
            k2,
            dealias,
            col_buf: vec![Complex::zero(); h],
        }
    }

    fn transform(&mut self, data: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (self.row_inv.clone(), self.col_inv.clone())
        } else {
            (self.row_fwd.clone(), self.col_fwd.clone())
        };
        row.process(data);
        for i in 0..w {
            for j in 0..h {
                self.col_buf[j] = data[j * w + i];
            }
            col.process(&mut self.col_buf);
            for j in 0..h {
                data[j * w + i] = self.col_buf[j];
            }
        }
        if inverse {
            let scale = T::one() / T::from_usize_lossy(h * w);
            for v in data.iter_mut() {
                *v = *v * scale;
            }
        }
    }

    pub fn forward(&mut self, field: &Array2<T>) -> Vec<Complex<T>> {
        let mut data: Vec<Complex<T>> = field.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut data, false);
        data
    }

    pub fn forward_in_place(&mut self, data: &mut [Complex<T>]) {
        self.transform(data, false);
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&mut self, spec: &[Complex<T>]) -> Array2<T> {
        let mut data = spec.to_vec();
        self.transform(&mut data, true);
        Array2::from_shape_vec((self.h, self.w), data.into_iter().map(|c| c.re).collect())
            .expect("grid shape")
    }

    /// `∂/∂x` in spectral space.
    pub fn ddx(&self, spec: &[Complex<T>]) -> Vec<Complex<T>> {
        let w = self.w;
        spec.iter()
            .enumerate()
            .map(|(idx, c)| c * Complex::new(T::zero(), self.kx[idx % w]))
            .collect()
    }

    /// `∂/∂y` in spectral space.
    pub fn ddy(&self, spec: &[Complex<T>]) -> Vec<Complex<T>> {
        let w = self.w;
        spec.iter()
            .enumerate()
            .map(|(idx, c)| c * Complex::new(T::zero(), self.ky[idx / w]))
            .collect()
    }
}
