//! Classical pan-sharpening baselines.
//!
//! Every method maps an MS image already interpolated to the PAN grid, plus
//! the PAN itself, to a fused image on the PAN grid. Component-substitution
//! methods (IHS, Brovey, GS) moment-match the PAN to the intensity before
//! substituting it; multi-resolution methods (HPF, SFIM) inject PAN detail
//! extracted with a boxcar low-pass; LMVM and LMM adjust local moments.

use crate::raster::{box_filter, upsample, MultiBandImage, RasterError, ResampleFilter};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Floor applied to every denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("window of {0} pixels must be odd and at least 3")]
    BadWindow(usize),
    #[error("unknown fusion method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    Ihs,
    Brovey,
    Hpf,
    Sfim,
    Gs,
    Lmvm,
    Lmm,
}

impl FusionKind {
    pub const ALL: [FusionKind; 7] = [
        FusionKind::Ihs,
        FusionKind::Brovey,
        FusionKind::Hpf,
        FusionKind::Sfim,
        FusionKind::Gs,
        FusionKind::Lmvm,
        FusionKind::Lmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Ihs => "ihs",
            FusionKind::Brovey => "brovey",
            FusionKind::Hpf => "hpf",
            FusionKind::Sfim => "sfim",
            FusionKind::Gs => "gs",
            FusionKind::Lmvm => "lmvm",
            FusionKind::Lmm => "lmm",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FusionError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionMethod {
    pub kind: FusionKind,
    /// Sliding window for LMVM/LMM.
    pub window: usize,
    /// Boxcar size for HPF/SFIM.
    pub hp_kernel: usize,
}

impl FusionMethod {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            window: 7,
            hp_kernel: 5,
        }
    }

    fn validate(&self) -> Result<()> {
        for size in [self.window, self.hp_kernel] {
            if size < 3 || size % 2 == 0 {
                return Err(FusionError::BadWindow(size));
            }
        }
        Ok(())
    }
}

impl From<FusionKind> for FusionMethod {
    fn from(kind: FusionKind) -> Self {
        FusionMethod::new(kind)
    }
}

/// A fused image and the number of samples whose denominator hit the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub image: MultiBandImage,
    pub floored: usize,
}

#[derive(Default)]
struct Floor {
    hits: usize,
}

impl Floor {
    fn apply(&mut self, d: f64) -> f64 {
        if d.abs() < DENOMINATOR_FLOOR {
            self.hits += 1;
            if d < 0.0 {
                -DENOMINATOR_FLOOR
            } else {
                DENOMINATOR_FLOOR
            }
        } else {
            d
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unweighted band mean at every pixel.
pub fn intensity(ms: &MultiBandImage) -> Vec<f64> {
    let b = ms.bands() as f64;
    (0..ms.pixels())
        .map(|i| (0..ms.bands()).map(|k| ms.band(k)[i]).sum::<f64>() / b)
        .collect()
}

// Moment match that degrades to a mean shift when the source is flat.
fn match_moments(src: &[f64], target: &[f64]) -> Vec<f64> {
    let (ms, ss) = mean_std(src);
    let (mt, st) = mean_std(target);
    if ss < DENOMINATOR_FLOOR {
        src.iter().map(|v| v - ms + mt).collect()
    } else {
        let gain = st / ss;
        src.iter().map(|v| (v - ms) * gain + mt).collect()
    }
}

/// Forward Gram-Schmidt decomposition whose first basis vector is the
/// intensity; `inverse` reconstructs the bands from (possibly modified)
/// components.
#[derive(Debug, Clone)]
pub struct GramSchmidt {
    band_means: Vec<f64>,
    intensity_mean: f64,
    /// `coeffs[k][l]`: projection of centred band `k` on component `l`.
    coeffs: Vec<Vec<f64>>,
    /// Component 0 is the centred intensity, component `k + 1` the residual
    /// of band `k`.
    pub components: Vec<Vec<f64>>,
}

impl GramSchmidt {
    pub fn forward(ms: &MultiBandImage) -> GramSchmidt {
        let n = ms.pixels() as f64;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let intensity = intensity(ms);
        let intensity_mean = intensity.iter().sum::<f64>() / n;
        let mut components = vec![intensity.iter().map(|v| v - intensity_mean).collect::<Vec<_>>()];
        let mut band_means = Vec::with_capacity(ms.bands());
        let mut coeffs = Vec::with_capacity(ms.bands());
        for k in 0..ms.bands() {
            let band = ms.band(k);
            let mean = band.iter().sum::<f64>() / n;
            band_means.push(mean);
            let mut residual: Vec<f64> = band.iter().map(|v| v - mean).collect();
            let centred = residual.clone();
            let row: Vec<f64> = components
                .iter()
                .map(|c| {
                    let var = dot(c, c);
                    if var < DENOMINATOR_FLOOR * DENOMINATOR_FLOOR {
                        0.0
                    } else {
                        dot(&centred, c) / var
                    }
                })
                .collect();
            for (c, &phi) in components.iter().zip(&row) {
                residual.iter_mut().zip(c).for_each(|(r, v)| *r -= phi * v);
            }
            coeffs.push(row);
            components.push(residual);
        }
        GramSchmidt {
            band_means,
            intensity_mean,
            coeffs,
            components,
        }
    }

    pub fn intensity_mean(&self) -> f64 {
        self.intensity_mean
    }

    /// Rebuilds band samples from `components` (same layout as `self.components`).
    pub fn inverse(&self, components: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let mut band: Vec<f64> = components[k + 1].iter().map(|v| v + self.band_means[k]).collect();
                for (c, &phi) in components.iter().zip(row) {
                    band.iter_mut().zip(c).for_each(|(b, v)| *b += phi * v);
                }
                band
            })
            .collect()
    }
}

fn check_inputs(ms_up: &MultiBandImage, pan: &MultiBandImage) -> Result<()> {
    if pan.bands() != 1 {
        return Err(FusionError::DimensionMismatch(format!(
            "PAN must have one band, got {}",
            pan.bands()
        )));
    }
    if (ms_up.width(), ms_up.height()) != (pan.width(), pan.height()) {
        return Err(FusionError::DimensionMismatch(format!(
            "MS {}x{} vs PAN {}x{}",
            ms_up.width(),
            ms_up.height(),
            pan.width(),
            pan.height()
        )));
    }
    Ok(())
}

// Runs `f` on every band in parallel, collecting planes and floor hits.
fn per_band(ms_up: &MultiBandImage, f: impl Fn(usize, &[f64], &mut Floor) -> Vec<f64> + Sync) -> Result<Fused> {
    let results: Vec<(Vec<f64>, usize)> = (0..ms_up.bands())
        .into_par_iter()
        .map(|b| {
            let mut floor = Floor::default();
            let plane = f(b, ms_up.band(b), &mut floor);
            (plane, floor.hits)
        })
        .collect();
    let floored = results.iter().map(|r| r.1).sum();
    let planes = results.into_iter().map(|r| r.0).collect();
    let image = MultiBandImage::from_bands(ms_up.width(), ms_up.height(), planes)?
        .with_value_range(ms_up.value_range().0, ms_up.value_range().1)
        .with_dtype(ms_up.dtype());
    Ok(Fused { image, floored })
}

pub fn fuse(method: FusionMethod, ms_up: &MultiBandImage, pan: &MultiBandImage) -> Result<Fused> {
    method.validate()?;
    check_inputs(ms_up, pan)?;
    let (w, h) = (pan.width(), pan.height());
    let p = pan.data();
    match method.kind {
        FusionKind::Ihs => {
            let i = intensity(ms_up);
            let matched = match_moments(p, &i);
            per_band(ms_up, |_, m, _| {
                m.iter()
                    .zip(&matched)
                    .zip(&i)
                    .map(|((m, pm), i)| m + (pm - i))
                    .collect()
            })
        }
        FusionKind::Brovey => {
            let i = intensity(ms_up);
            let matched = match_moments(p, &i);
            per_band(ms_up, |_, m, floor| {
                m.iter()
                    .zip(&matched)
                    .zip(&i)
                    .map(|((m, pm), i)| m * pm / floor.apply(*i))
                    .collect()
            })
        }
        FusionKind::Hpf => {
            let low = box_filter(p, w, h, method.hp_kernel);
            per_band(ms_up, |_, m, _| {
                m.iter().zip(p).zip(&low).map(|((m, p), l)| m + (p - l)).collect()
            })
        }
        FusionKind::Sfim => {
            let low = box_filter(p, w, h, method.hp_kernel);
            per_band(ms_up, |_, m, floor| {
                m.iter()
                    .zip(p)
                    .zip(&low)
                    .map(|((m, p), l)| m * p / floor.apply(*l))
                    .collect()
            })
        }
        FusionKind::Gs => {
            let gs = GramSchmidt::forward(ms_up);
            let mut components = gs.components.clone();
            let matched = match_moments(p, &components[0]);
            components[0] = matched;
            let planes = gs.inverse(&components);
            let image = MultiBandImage::from_bands(w, h, planes)?
                .with_value_range(ms_up.value_range().0, ms_up.value_range().1)
                .with_dtype(ms_up.dtype());
            Ok(Fused { image, floored: 0 })
        }
        FusionKind::Lmvm => {
            let win = method.window;
            let mu_p = box_filter(p, w, h, win);
            let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
            let sigma_p: Vec<f64> = box_filter(&sq, w, h, win)
                .iter()
                .zip(&mu_p)
                .map(|(s, m)| (s - m * m).max(0.0).sqrt())
                .collect();
            per_band(ms_up, |_, m, floor| {
                let mu_m = box_filter(m, w, h, win);
                let sq: Vec<f64> = m.iter().map(|v| v * v).collect();
                let ex2 = box_filter(&sq, w, h, win);
                (0..w * h)
                    .map(|i| {
                        let sigma_m = (ex2[i] - mu_m[i] * mu_m[i]).max(0.0).sqrt();
                        (p[i] - mu_p[i]) * (sigma_m / floor.apply(sigma_p[i])) + mu_m[i]
                    })
                    .collect()
            })
        }
        FusionKind::Lmm => {
            let win = method.window;
            let mu_p = box_filter(p, w, h, win);
            per_band(ms_up, |_, m, floor| {
                let mu_m = box_filter(m, w, h, win);
                (0..w * h).map(|i| p[i] * mu_m[i] / floor.apply(mu_p[i])).collect()
            })
        }
    }
}

/// Bicubic interpolation only: the no-injection floor every method must beat.
pub fn fuse_naive(ms: &MultiBandImage, ratio: usize) -> Result<MultiBandImage> {
    Ok(upsample(ms, ratio, ResampleFilter::Bicubic)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(w: usize, h: usize, b: usize, seed: u64) -> MultiBandImage {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let data = (0..w * h * b)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                0.05 + 0.9 * (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        MultiBandImage::new(w, h, b, data).unwrap()
    }

    fn max_abs_diff(a: &MultiBandImage, b: &MultiBandImage) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ihs_and_gs_with_intensity_pan_are_identity() {
        let ms = image(12, 10, 4, 3);
        let pan = MultiBandImage::new(12, 10, 1, intensity(&ms)).unwrap();
        for kind in [FusionKind::Ihs, FusionKind::Gs, FusionKind::Brovey] {
            let out = fuse(kind.into(), &ms, &pan).unwrap();
            assert!(max_abs_diff(&out.image, &ms) <= 1e-9, "{kind}");
        }
    }

    #[test]
    fn hpf_and_sfim_with_constant_pan_are_identity() {
        let ms = image(9, 11, 4, 5);
        let pan = MultiBandImage::filled(9, 11, 1, 0.37).unwrap();
        for kind in [FusionKind::Hpf, FusionKind::Sfim] {
            let out = fuse(kind.into(), &ms, &pan).unwrap();
            assert!(max_abs_diff(&out.image, &ms) <= 1e-9, "{kind}");
            assert_eq!(out.floored, 0);
        }
    }

    #[test]
    fn sfim_test_card_matches_direct_loop() {
        let ms = MultiBandImage::filled(3, 3, 1, 2.0).unwrap();
        let mut pan = vec![1.0; 9];
        pan[4] = 4.0;
        let pan = MultiBandImage::new(3, 3, 1, pan).unwrap();
        let method = FusionMethod {
            hp_kernel: 3,
            ..FusionKind::Sfim.into()
        };
        let out = fuse(method, &ms, &pan).unwrap().image;

        // direct loop: 3x3 boxcar with reflect-101 indices
        let refl = |i: i64| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i > 2 {
                (4 - i) as usize
            } else {
                i as usize
            }
        };
        for y in 0..3i64 {
            for x in 0..3i64 {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        s += pan.get(refl(x + dx), refl(y + dy), 0);
                    }
                }
                let expect = 2.0 * pan.get(x as usize, y as usize, 0) / (s / 9.0);
                assert!((out.get(x as usize, y as usize, 0) - expect).abs() < 1e-12);
            }
        }
        assert!((out.get(1, 1, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gs_round_trip_with_unmodified_components() {
        let ms = image(16, 16, 4, 11);
        let gs = GramSchmidt::forward(&ms);
        let planes = gs.inverse(&gs.components);
        for (k, plane) in planes.iter().enumerate() {
            for (a, b) in plane.iter().zip(ms.band(k)) {
                assert!((a - b).abs() <= 1e-7);
            }
        }
        // components past the first are orthogonal to it
        let c0 = &gs.components[0];
        for c in &gs.components[1..4] {
            let d: f64 = c.iter().zip(c0).map(|(a, b)| a * b).sum();
            assert!(d.abs() < 1e-9);
        }
    }

    #[test]
    fn output_finite_on_adversarial_inputs() {
        let zeros = MultiBandImage::filled(5, 5, 4, 0.0).unwrap();
        let zero_pan = MultiBandImage::filled(5, 5, 1, 0.0).unwrap();
        let single = MultiBandImage::filled(1, 1, 4, 0.0).unwrap();
        let single_pan = MultiBandImage::filled(1, 1, 1, 0.5).unwrap();
        for kind in FusionKind::ALL {
            for (m, p) in [(&zeros, &zero_pan), (&single, &single_pan)] {
                let out = fuse(kind.into(), m, p).unwrap();
                assert!(out.image.data().iter().all(|v| v.is_finite()), "{kind}");
            }
        }
        let out = fuse(FusionKind::Brovey.into(), &zeros, &zero_pan).unwrap();
        assert_eq!(out.floored, 100);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ms = image(4, 4, 4, 1);
        assert!(matches!(
            fuse(FusionKind::Ihs.into(), &ms, &image(4, 5, 1, 1)),
            Err(FusionError::DimensionMismatch(_))
        ));
        assert!(matches!(
            fuse(FusionKind::Ihs.into(), &ms, &image(4, 4, 2, 1)),
            Err(FusionError::DimensionMismatch(_))
        ));
        let even = FusionMethod {
            window: 4,
            ..FusionKind::Lmvm.into()
        };
        assert!(matches!(
            fuse(even, &ms, &image(4, 4, 1, 1)),
            Err(FusionError::BadWindow(4))
        ));
        assert_eq!("GS".parse::<FusionKind>().unwrap(), FusionKind::Gs);
        assert!("hcs".parse::<FusionKind>().is_err());
    }

    #[test]
    fn naive_is_bicubic_upsampling() {
        let ms = image(6, 6, 4, 2);
        assert_eq!(
            fuse_naive(&ms, 4).unwrap(),
            upsample(&ms, 4, ResampleFilter::Bicubic).unwrap()
        );
        let flat = MultiBandImage::filled(3, 3, 2, 0.25).unwrap();
        assert!(fuse_naive(&flat, 4).unwrap().data().iter().all(|&v| v == 0.25));
    }

    proptest! {
        #[test]
        fn scale_equivariance(seed in any::<u64>(), scale in 0.1f64..10.0, kind_idx in 0usize..7) {
            let kind = FusionKind::ALL[kind_idx];
            let ms = image(10, 10, 4, seed);
            let pan = image(10, 10, 1, seed ^ 0xABCD);
            let base = fuse(kind.into(), &ms, &pan).unwrap().image;
            for a in [scale, 4.0] {
                let scaled = fuse(kind.into(), &ms.map(|v| a * v), &pan.map(|v| a * v)).unwrap().image;
                for (x, y) in scaled.data().iter().zip(base.data()) {
                    let expect = a * y;
                    let tol = if a == 4.0 && kind != FusionKind::Lmvm && kind != FusionKind::Gs { 0.0 } else { 1e-9 * (1.0 + expect.abs()) };
                    prop_assert!((x - expect).abs() <= tol, "{kind} a={a}: {x} vs {expect}");
                }
            }
        }
    }
}
