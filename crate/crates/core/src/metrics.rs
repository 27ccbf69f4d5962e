//! Distortion metrics: PSNR and SSIM on RGB channels.
//!
//! Accumulation runs in f64 regardless of the tensor scalar type. PSNR
//! pools the MSE over all channels jointly; SSIM is computed per channel
//! over fully valid Gaussian windows, then averaged over positions and
//! channels.

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};
use crate::tensor::Tensor;

/// SSIM constants; defaults are the canonical (11, 1.5, 0.01, 0.03).
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size.is_multiple_of(2) || self.window_size == 0 {
            return Err(Error::invalid("ssim", "window size must be odd"));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::invalid("ssim", "k1 and k2 must be positive"));
        }
        Ok(())
    }
}

/// Sum a row pairing mirrored elements first, so the result is bitwise
/// invariant under reversal of the row (horizontal flip invariance).
fn sym_row_sum(row: &[f64]) -> f64 {
    let n = row.len();
    let mut acc = 0.0;
    for i in 0..n / 2 {
        acc += row[i] + row[n - 1 - i];
    }
    if n % 2 == 1 {
        acc += row[n / 2];
    }
    acc
}

/// Mean squared error over all elements jointly.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("shapes {} and {} differ", a.shape(), b.shape()),
        ));
    }
    let s = a.shape();
    let mut acc = 0.0f64;
    let mut row = vec![0.0f64; s.w];
    for r in 0..s.n * s.c * s.h {
        let ra = &a.data()[r * s.w..][..s.w];
        let rb = &b.data()[r * s.w..][..s.w];
        for i in 0..s.w {
            let d = to_f64(ra[i]) - to_f64(rb[i]);
            row[i] = d * d;
        }
        acc += sym_row_sum(&row);
    }
    Ok(acc / a.numel() as f64)
}

/// 10 log10(peak^2 / MSE) in decibels; +infinity when the MSE is zero.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let e = mse(a, b)?;
    Ok(psnr_from_mse(e, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean SSIM over the valid window positions of every channel.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("shapes {} and {} differ", a.shape(), b.shape()),
        ));
    }
    let s = a.shape();
    let win = params.window_size;
    if s.h < win || s.w < win {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} is smaller than the {win}x{win} window", s.h, s.w),
        ));
    }

    let g = gaussian_window(win, params.window_sigma);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let (vh, vw) = (s.h - win + 1, s.w - win + 1);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for plane in 0..s.n * s.c {
        let pa: Vec<f64> = a.data()[plane * s.h * s.w..][..s.h * s.w]
            .iter()
            .map(|&v| to_f64(v))
            .collect();
        let pb: Vec<f64> = b.data()[plane * s.h * s.w..][..s.h * s.w]
            .iter()
            .map(|&v| to_f64(v))
            .collect();

        // separable Gaussian filtering (valid mode) of the five moment maps
        let mu_a = filter_valid(&pa, s.h, s.w, &g);
        let mu_b = filter_valid(&pb, s.h, s.w, &g);
        let aa: Vec<f64> = pa.iter().map(|&v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|&v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(&x, &y)| x * y).collect();
        let e_aa = filter_valid(&aa, s.h, s.w, &g);
        let e_bb = filter_valid(&bb, s.h, s.w, &g);
        let e_ab = filter_valid(&ab, s.h, s.w, &g);

        let mut row = vec![0.0f64; vw];
        for y in 0..vh {
            for (x, slot) in row.iter_mut().enumerate() {
                let i = y * vw + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let var_a = e_aa[i] - ma * ma;
                let var_b = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                *slot = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
            total += sym_row_sum(&row);
        }
        count += vh * vw;
    }
    Ok(total / count as f64)
}

/// 1-D Gaussian window normalized to sum 1; the separable factors of the
/// 2-D window.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filtering: horizontal pass then vertical pass.
/// The horizontal window sum pairs mirrored taps (the window is
/// symmetric), keeping the result bitwise invariant under flips.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let win = g.len();
    let vw = w - win + 1;
    let vh = h - win + 1;
    let half = win / 2;
    let mut mid = vec![0.0; h * vw];
    for y in 0..h {
        let row = &plane[y * w..][..w];
        for x in 0..vw {
            let mut acc = 0.0;
            for k in 0..half {
                acc += g[k] * (row[x + k] + row[x + win - 1 - k]);
            }
            acc += g[half] * row[x + half];
            mid[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, &gv) in g.iter().enumerate() {
                acc += gv * mid[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}
