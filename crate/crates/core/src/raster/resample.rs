use super::{MultiBandImage, RasterError, Result};
use serde::{Deserialize, Serialize};

/// Keys' cubic convolution coefficient.
pub const BICUBIC_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResampleFilter {
    Bicubic,
    Box,
    Gaussian { sigma: f64 },
}

impl ResampleFilter {
    /// Low-pass filter used for Wald degradation by `factor`.
    pub fn wald(factor: usize) -> Self {
        ResampleFilter::Gaussian {
            sigma: factor as f64 / 2.0,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            ResampleFilter::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(RasterError::InvalidSigma(sigma))
            }
            _ => Ok(()),
        }
    }
}

pub fn bicubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

/// Reflect-101 border extension (`dcb|abcd|cba`).
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Sparse 1-D resampling operator: for every output index, the source taps
/// and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    pub n_in: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn n_out(&self) -> usize {
        self.taps.len()
    }

    fn push_normalized(row: &mut Vec<(usize, f64)>) {
        let total: f64 = row.iter().map(|t| t.1).sum();
        for t in row.iter_mut() {
            t.1 /= total;
        }
    }
}

/// Interpolation weights mapping `n_in` samples to `n_in * factor` with
/// pixel-centre alignment.
pub fn upsample_weights(n_in: usize, factor: usize, filter: ResampleFilter) -> AxisWeights {
    let n_out = n_in * factor;
    let f = factor as f64;
    let taps = (0..n_out)
        .map(|t| {
            let u = (t as f64 + 0.5) / f - 0.5;
            match filter {
                ResampleFilter::Box => vec![(t / factor, 1.0)],
                ResampleFilter::Bicubic => {
                    let base = u.floor() as isize;
                    (base - 1..=base + 2)
                        .map(|i| (reflect101(i, n_in), bicubic_kernel(u - i as f64)))
                        .collect()
                }
                ResampleFilter::Gaussian { sigma } => {
                    let radius = (3.0 * sigma).ceil() as isize;
                    let base = u.round() as isize;
                    let mut row: Vec<_> = (base - radius..=base + radius)
                        .map(|i| (reflect101(i, n_in), gaussian(u - i as f64, sigma)))
                        .collect();
                    AxisWeights::push_normalized(&mut row);
                    row
                }
            }
        })
        .collect();
    AxisWeights { n_in, taps }
}

/// Anti-aliased decimation weights mapping `n_in` samples to `n_in / factor`.
/// Each output sample is centred on its `factor`-wide source block.
pub fn downsample_weights(n_in: usize, factor: usize, filter: ResampleFilter) -> AxisWeights {
    let n_out = n_in / factor;
    let f = factor as f64;
    let taps = (0..n_out)
        .map(|o| {
            let centre = (o * factor) as f64 + (f - 1.0) / 2.0;
            match filter {
                ResampleFilter::Box => {
                    let w = 1.0 / f;
                    (o * factor..(o + 1) * factor).map(|i| (i, w)).collect()
                }
                ResampleFilter::Bicubic => {
                    let lo = (centre - 2.0 * f).floor() as isize;
                    let hi = (centre + 2.0 * f).ceil() as isize;
                    let mut row: Vec<_> = (lo..=hi)
                        .map(|i| (i, bicubic_kernel((i as f64 - centre) / f)))
                        .filter(|t| t.1 != 0.0)
                        .map(|(i, w)| (reflect101(i, n_in), w))
                        .collect();
                    AxisWeights::push_normalized(&mut row);
                    row
                }
                ResampleFilter::Gaussian { sigma } => {
                    let radius = (3.0 * sigma).ceil();
                    let lo = (centre - radius).floor() as isize;
                    let hi = (centre + radius).ceil() as isize;
                    let mut row: Vec<_> = (lo..=hi)
                        .map(|i| (reflect101(i, n_in), gaussian(i as f64 - centre, sigma)))
                        .collect();
                    AxisWeights::push_normalized(&mut row);
                    row
                }
            }
        })
        .collect();
    AxisWeights { n_in, taps }
}

// Pairwise summation: repeated identical terms add up exactly when the
// count is a power of two, which keeps box resampling lossless on constants.
fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        2 => terms[0] + terms[1],
        n => pairwise_sum(&terms[..n / 2]) + pairwise_sum(&terms[n / 2..]),
    }
}

fn apply_taps(row: &[(usize, f64)], sample: impl Fn(usize) -> f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(row.iter().map(|&(i, w)| w * sample(i)));
    pairwise_sum(scratch)
}

/// Applies `wx` along rows and `wy` along columns of a single plane.
pub(crate) fn resample_plane(
    plane: &[f64],
    width: usize,
    height: usize,
    wx: &AxisWeights,
    wy: &AxisWeights,
) -> Vec<f64> {
    debug_assert_eq!(wx.n_in, width);
    debug_assert_eq!(wy.n_in, height);
    let (ow, oh) = (wx.n_out(), wy.n_out());
    let mut scratch = Vec::new();
    let mut horizontal = vec![0.0; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for (x, row) in wx.taps.iter().enumerate() {
            horizontal[y * ow + x] = apply_taps(row, |i| src[i], &mut scratch);
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (y, row) in wy.taps.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = apply_taps(row, |i| horizontal[i * ow + x], &mut scratch);
        }
    }
    out
}

/// Same-size separable filtering of one plane with an odd-length kernel and
/// reflect-101 borders.
pub fn filter_plane(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    assert!(kernel.len() % 2 == 1, "kernel length must be odd");
    let half = (kernel.len() / 2) as isize;
    let weights = |n: usize| AxisWeights {
        n_in: n,
        taps: (0..n as isize)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| (reflect101(i + k as isize - half, n), w))
                    .collect()
            })
            .collect(),
    };
    resample_plane(plane, width, height, &weights(width), &weights(height))
}

/// Mean over a `size × size` window centred on each pixel.
pub fn box_filter(plane: &[f64], width: usize, height: usize, size: usize) -> Vec<f64> {
    filter_plane(plane, width, height, &vec![1.0 / size as f64; size])
}

/// Normalized gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| gaussian(i as f64, sigma)).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn resample(img: &MultiBandImage, wx: &AxisWeights, wy: &AxisWeights) -> Result<MultiBandImage> {
    let (w, h) = (img.width(), img.height());
    let data: Vec<f64> = (0..img.bands())
        .flat_map(|b| resample_plane(img.band(b), w, h, wx, wy))
        .collect();
    let out = MultiBandImage::new(wx.n_out(), wy.n_out(), img.bands(), data)?;
    let (lo, hi) = img.value_range();
    Ok(out.with_value_range(lo, hi).with_dtype(img.dtype()))
}

pub fn upsample(img: &MultiBandImage, factor: usize, filter: ResampleFilter) -> Result<MultiBandImage> {
    if factor < 2 {
        return Err(RasterError::FactorTooSmall(factor));
    }
    filter.validate()?;
    let wx = upsample_weights(img.width(), factor, filter);
    let wy = upsample_weights(img.height(), factor, filter);
    resample(img, &wx, &wy)
}

pub fn downsample(img: &MultiBandImage, factor: usize, filter: ResampleFilter) -> Result<MultiBandImage> {
    if factor < 2 {
        return Err(RasterError::FactorTooSmall(factor));
    }
    if img.width() % factor != 0 || img.height() % factor != 0 {
        return Err(RasterError::NotDivisible {
            width: img.width(),
            height: img.height(),
            factor,
        });
    }
    filter.validate()?;
    let wx = downsample_weights(img.width(), factor, filter);
    let wy = downsample_weights(img.height(), factor, filter);
    resample(img, &wx, &wy)
}
