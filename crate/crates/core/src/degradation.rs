//! Degradation synthesis: antialiased bicubic resampling, Gaussian blur
//! kernels, and PSNR-calibrated additive noise, driven by a declarative
//! [`DegradationSpec`].

use crate::error::{Error, Result};
use crate::rng::{mix_seed, Rng};
use crate::scalar::{from_f64, to_f64, Scalar};
use crate::tensor::{Shape, Tensor};

/// Keys' coefficient for the bicubic kernel (the DIV2K convention).
pub const KEYS_A: f64 = -0.5;

/// Keys cubic kernel:
/// (a+2)|x|^3 - (a+3)|x|^2 + 1          for |x| <= 1
/// a|x|^3 - 5a|x|^2 + 8a|x| - 4a        for 1 < |x| < 2
/// 0                                    otherwise
pub fn bicubic_weight(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Tap weights for one output position along one axis.
struct AxisTaps {
    /// first source index before clamping
    start: isize,
    weights: Vec<f64>,
}

/// Precompute normalized taps for every output position along an axis.
/// Half-pixel convention: src = (dst + 0.5) / scale - 0.5. When
/// downscaling with antialias, the kernel support stretches by 1/scale
/// and weights are renormalized to sum 1.
fn axis_taps(out_len: usize, scale: f64, antialias: bool) -> Vec<AxisTaps> {
    let stretch = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..out_len)
        .map(|dst| {
            let sx = (dst as f64 + 0.5) / scale - 0.5;
            let lo = (sx - support).ceil() as isize;
            let hi = (sx + support).floor() as isize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|i| bicubic_weight((sx - i as f64) * stretch, KEYS_A))
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            AxisTaps { start: lo, weights }
        })
        .collect()
}

/// Separable bicubic resampling (rows then columns) with clamp-replicate
/// borders; the result is clipped to [0, 1].
pub fn resample_bicubic<S: Scalar>(
    image: &Tensor<S>,
    scale: f64,
    antialias: bool,
) -> Result<Tensor<S>> {
    let s = image.shape();
    if scale <= 0.0 {
        return Err(Error::invalid("resample_bicubic", "scale must be positive"));
    }
    let out_h = (s.h as f64 * scale).round() as usize;
    let out_w = (s.w as f64 * scale).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resample_bicubic",
            format!("output dimensions {out_h}x{out_w} must be positive"),
        ));
    }

    let taps_w = axis_taps(out_w, scale, antialias);
    let taps_h = axis_taps(out_h, scale, antialias);

    // pass 1: rows (horizontal)
    let mut mid = vec![0f64; s.n * s.c * s.h * out_w];
    for plane in 0..s.n * s.c {
        let src = &image.data()[plane * s.h * s.w..][..s.h * s.w];
        let dst = &mut mid[plane * s.h * out_w..][..s.h * out_w];
        for y in 0..s.h {
            let row = &src[y * s.w..][..s.w];
            for (x, taps) in taps_w.iter().enumerate() {
                let mut acc = 0.0;
                for (k, &w) in taps.weights.iter().enumerate() {
                    let i = (taps.start + k as isize).clamp(0, s.w as isize - 1) as usize;
                    acc += w * to_f64(row[i]);
                }
                dst[y * out_w + x] = acc;
            }
        }
    }

    // pass 2: columns (vertical)
    let mut out = vec![S::zero(); s.n * s.c * out_h * out_w];
    for plane in 0..s.n * s.c {
        let src = &mid[plane * s.h * out_w..][..s.h * out_w];
        let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for (y, taps) in taps_h.iter().enumerate() {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (k, &w) in taps.weights.iter().enumerate() {
                    let i = (taps.start + k as isize).clamp(0, s.h as isize - 1) as usize;
                    acc += w * src[i * out_w + x];
                }
                dst[y * out_w + x] = from_f64(acc.clamp(0.0, 1.0));
            }
        }
    }

    Tensor::new(Shape::new(s.n, s.c, out_h, out_w), out)
}

/// Square isotropic Gaussian kernel, normalized to sum exactly 1.
#[derive(Clone, Debug)]
pub struct BlurKernel {
    pub size: usize,
    /// Row-major size*size weights.
    pub weights: Vec<f64>,
}

pub fn blur_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::invalid(
            "blur_kernel",
            format!("kernel size {size} must be odd"),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("blur_kernel", "sigma must be positive"));
    }
    let c = (size / 2) as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity(size * size);
    for y in 0..size as isize {
        for x in 0..size as isize {
            let (dy, dx) = ((y - c) as f64, (x - c) as f64);
            weights.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(BlurKernel { size, weights })
}

/// Default blur width used for the paper-style kernel sizes:
/// sigma = (size - 1) / 4, so 7 -> 1.5, 9 -> 2.0, 11 -> 2.5.
pub fn default_sigma(size: usize) -> f64 {
    (size as f64 - 1.0) / 4.0
}

/// Per-channel 2-D correlation with clamp-replicate borders.
pub fn blur<S: Scalar>(image: &Tensor<S>, kernel: &BlurKernel) -> Result<Tensor<S>> {
    let s = image.shape();
    let k = kernel.size;
    let c = (k / 2) as isize;
    let mut out = vec![S::zero(); s.numel()];
    for plane in 0..s.n * s.c {
        let src = &image.data()[plane * s.h * s.w..][..s.h * s.w];
        let dst = &mut out[plane * s.h * s.w..][..s.h * s.w];
        for y in 0..s.h as isize {
            for x in 0..s.w as isize {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    let sy = (y + ky - c).clamp(0, s.h as isize - 1) as usize;
                    for kx in 0..k as isize {
                        let sx = (x + kx - c).clamp(0, s.w as isize - 1) as usize;
                        acc += kernel.weights[(ky * k as isize + kx) as usize]
                            * to_f64(src[sy * s.w + sx]);
                    }
                }
                dst[(y * s.w as isize + x) as usize] = from_f64(acc);
            }
        }
    }
    Tensor::new(s, out)
}

/// Additive i.i.d. Gaussian noise with sigma chosen so that
/// PSNR(noisy, clean) equals `target_psnr_db` at peak 1.0; the result is
/// clipped back into [0, 1]. Deterministic for a fixed seed.
pub fn add_noise<S: Scalar>(image: &Tensor<S>, target_psnr_db: f64, seed: u64) -> Tensor<S> {
    let sigma = noise_sigma(target_psnr_db);
    let mut rng = Rng::seed_from(seed);
    image.map(|v| {
        let noisy = to_f64(v) + sigma * rng.normal();
        from_f64(noisy.clamp(0.0, 1.0))
    })
}

/// sigma = peak * 10^(-psnr/20) with peak = 1.0.
pub fn noise_sigma(target_psnr_db: f64) -> f64 {
    10f64.powf(-target_psnr_db / 20.0)
}

/// One step of a degradation chain.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    BicubicDown(u32),
    BicubicUp(u32),
    Blur { size: u32, sigma: f64 },
    Noise { target_psnr_db: f64, seed: u64 },
}

/// Ordered degradation steps applied to ground-truth images.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DegradationSpec {
    pub steps: Vec<Step>,
}

impl DegradationSpec {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        let spec = DegradationSpec { steps };
        spec.validate()?;
        Ok(spec)
    }

    /// Empty chain: the identity.
    pub fn identity() -> Self {
        DegradationSpec { steps: Vec::new() }
    }

    pub fn bicubic_down(scale: u32) -> Self {
        DegradationSpec {
            steps: vec![Step::BicubicDown(scale)],
        }
    }

    /// Blur with the default sigma for `size`, then calibrated noise.
    pub fn blur_noise(size: u32, target_psnr_db: f64, seed: u64) -> Self {
        DegradationSpec {
            steps: vec![
                Step::Blur {
                    size,
                    sigma: default_sigma(size as usize),
                },
                Step::Noise {
                    target_psnr_db,
                    seed,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            match *step {
                Step::BicubicDown(s) | Step::BicubicUp(s) => {
                    if s != 2 && s != 4 {
                        return Err(Error::invalid(
                            "degradation",
                            format!("bicubic scale {s} not in {{2, 4}}"),
                        ));
                    }
                }
                Step::Blur { size, sigma } => {
                    if size != 7 && size != 9 && size != 11 {
                        return Err(Error::invalid(
                            "degradation",
                            format!("blur size {size} not in {{7, 9, 11}}"),
                        ));
                    }
                    if sigma <= 0.0 {
                        return Err(Error::invalid("degradation", "blur sigma must be positive"));
                    }
                }
                Step::Noise { target_psnr_db, .. } => {
                    if target_psnr_db <= 0.0 {
                        return Err(Error::invalid(
                            "degradation",
                            "noise target PSNR must be positive",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Net spatial scale of the chain as (numerator, denominator), e.g.
    /// [Down 4] -> (1, 4); [Down 4, Up 2] -> (1, 2).
    pub fn net_scale(&self) -> (u32, u32) {
        let (mut num, mut den) = (1u32, 1u32);
        for step in &self.steps {
            match *step {
                Step::BicubicDown(s) => den *= s,
                Step::BicubicUp(s) => num *= s,
                _ => {}
            }
        }
        let g = gcd(num, den);
        (num / g, den / g)
    }

    /// Apply the chain in order. Noise seeds are mixed with `salt` so
    /// that callers (dataset pairing, the CLI) can give every image an
    /// independent yet reproducible noise realization.
    pub fn apply_salted<S: Scalar>(&self, image: &Tensor<S>, salt: u64) -> Result<Tensor<S>> {
        self.validate()?;
        let mut current = image.clone();
        for step in &self.steps {
            current = match *step {
                Step::BicubicDown(s) => resample_bicubic(&current, 1.0 / s as f64, true)?,
                Step::BicubicUp(s) => resample_bicubic(&current, s as f64, true)?,
                Step::Blur { size, sigma } => blur(&current, &blur_kernel(size as usize, sigma)?)?,
                Step::Noise {
                    target_psnr_db,
                    seed,
                } => add_noise(&current, target_psnr_db, mix_seed(seed, salt)),
            };
        }
        Ok(current)
    }

    /// Apply with salt 0 (the plain form).
    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.apply_salted(image, 0)
    }

    /// Short human-readable domain label, e.g. "blur9+noise40" or "down4".
    pub fn label(&self) -> String {
        if self.steps.is_empty() {
            return "identity".into();
        }
        self.steps
            .iter()
            .map(|step| match *step {
                Step::BicubicDown(s) => format!("down{s}"),
                Step::BicubicUp(s) => format!("up{s}"),
                Step::Blur { size, .. } => format!("blur{size}"),
                Step::Noise { target_psnr_db, .. } => format!("noise{}", target_psnr_db.round()),
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
