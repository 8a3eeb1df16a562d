//! Wald-protocol dataset construction, patch sampling and synthetic scenes.
//!
//! Under Wald's protocol both sensors are degraded by the resolution ratio so
//! that the original multispectral image becomes the ground truth for the
//! fused product at the degraded scale.

use crate::raster::{
    downsample, filter_plane, gaussian_kernel, load_msrf, save_msrf, BandStats, MultiBandImage, RasterError,
    ResampleFilter,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_RATIO: usize = 4;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("patch of {patch} MS pixels does not fit a {width}x{height} MS image")]
    PatchTooLarge { patch: usize, width: usize, height: usize },
    #[error("scene size {0} must be a positive multiple of 4")]
    BadSceneSize(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// An aligned (MS, PAN, reference) triple at the degraded scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub ms: MultiBandImage,
    pub pan: MultiBandImage,
    pub reference: MultiBandImage,
    pub ratio: usize,
}

impl TrainingSample {
    pub fn new(ms: MultiBandImage, pan: MultiBandImage, reference: MultiBandImage, ratio: usize) -> Result<Self> {
        if pan.bands() != 1 {
            return Err(ProtocolError::DimensionMismatch(format!(
                "PAN must have one band, got {}",
                pan.bands()
            )));
        }
        if pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
            return Err(ProtocolError::DimensionMismatch(format!(
                "PAN {}x{} is not MS {}x{} scaled by {ratio}",
                pan.width(),
                pan.height(),
                ms.width(),
                ms.height()
            )));
        }
        if reference.dims() != (pan.width(), pan.height(), ms.bands()) {
            return Err(ProtocolError::DimensionMismatch(format!(
                "reference {:?} does not match PAN geometry with {} bands",
                reference.dims(),
                ms.bands()
            )));
        }
        Ok(Self {
            ms,
            pan,
            reference,
            ratio,
        })
    }

    /// Crops the MS window at `(x, y)` of size `patch` and the matching
    /// PAN/reference windows scaled by the ratio.
    pub fn crop(&self, x: usize, y: usize, patch: usize) -> TrainingSample {
        let r = self.ratio;
        TrainingSample {
            ms: self.ms.crop(x, y, patch, patch),
            pan: self.pan.crop(x * r, y * r, patch * r, patch * r),
            reference: self.reference.crop(x * r, y * r, patch * r, patch * r),
            ratio: r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Patch edge in MS pixels.
    pub ms_patch: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ms_patch: 64,
            count: 0,
            seed: 0,
        }
    }
}

/// Degrades an original (MS, PAN) pair by `ratio`; the original MS becomes the
/// reference.
pub fn wald_degrade(
    ms: &MultiBandImage,
    pan: &MultiBandImage,
    ratio: usize,
    filter: ResampleFilter,
) -> Result<TrainingSample> {
    if pan.bands() != 1 {
        return Err(ProtocolError::DimensionMismatch(format!(
            "PAN must have one band, got {}",
            pan.bands()
        )));
    }
    if pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
        return Err(ProtocolError::DimensionMismatch(format!(
            "PAN {}x{} is not MS {}x{} scaled by {ratio}",
            pan.width(),
            pan.height(),
            ms.width(),
            ms.height()
        )));
    }
    let ms_lr = downsample(ms, ratio, filter)?;
    let pan_lr = downsample(pan, ratio, filter)?;
    TrainingSample::new(ms_lr, pan_lr, ms.clone(), ratio)
}

/// Top-left MS-pixel corner of patch `index`. Each index owns its own PRNG
/// stream, so corner `i` does not depend on how many patches are drawn.
pub fn patch_corner(ms_width: usize, ms_height: usize, patch: usize, seed: u64, index: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let x = rng.gen_range(0..=ms_width - patch);
    let y = rng.gen_range(0..=ms_height - patch);
    (x, y)
}

pub fn patch_corners(sample: &TrainingSample, cfg: &SamplerConfig) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (sample.ms.width(), sample.ms.height());
    if cfg.ms_patch == 0 || cfg.ms_patch > w || cfg.ms_patch > h {
        return Err(ProtocolError::PatchTooLarge {
            patch: cfg.ms_patch,
            width: w,
            height: h,
        });
    }
    Ok((0..cfg.count as u64)
        .map(|i| patch_corner(w, h, cfg.ms_patch, cfg.seed, i))
        .collect())
}

/// Draws `cfg.count` aligned random crops, uniform corners with replacement.
pub fn extract_patches(sample: &TrainingSample, cfg: &SamplerConfig) -> Result<Vec<TrainingSample>> {
    Ok(patch_corners(sample, cfg)?
        .into_iter()
        .map(|(x, y)| sample.crop(x, y, cfg.ms_patch))
        .collect())
}

/// A synthetic scene: the high-resolution MS ground truth and the PAN
/// acquired on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub hr_ms: MultiBandImage,
    pub pan: MultiBandImage,
    /// Spectral weights mixing MS bands into PAN; they sum to one.
    pub pan_weights: Vec<f64>,
}

const DETAIL_STD: f64 = 0.05;
const DETAIL_SIGMA: f64 = 0.8;

fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            let amp = rng.gen_range(0.4..1.0);
            let freq = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (amp, freq * angle.cos(), freq * angle.sin(), phase)
        })
        .collect();
    let mut field: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            waves
                .iter()
                .map(|&(a, fx, fy, p)| a * (fx * x + fy * y + p).cos())
                .sum()
        })
        .collect();
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    field
}

/// Generates a deterministic scene: smooth spectrally-correlated backgrounds
/// overlaid with flat rectangles and disks, and a PAN that mixes the bands
/// with simplex weights plus a zero-mean high-frequency detail field.
pub fn synth_scene(size: usize, bands: usize, seed: u64) -> Result<SyntheticScene> {
    if size == 0 || size % 4 != 0 {
        return Err(ProtocolError::BadSceneSize(size));
    }
    let bands = bands.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;

    let shared = smooth_field(&mut rng, size);
    let mut planes: Vec<Vec<f64>> = (0..bands)
        .map(|_| {
            let own = smooth_field(&mut rng, size);
            let offset = rng.gen_range(0.15..0.35);
            let gain = rng.gen_range(0.3..0.5);
            shared
                .iter()
                .zip(&own)
                .map(|(s, o)| offset + gain * (0.75 * s + 0.25 * o))
                .collect()
        })
        .collect();

    let objects = (n / 96).max(4);
    for _ in 0..objects {
        let brightness: f64 = rng.gen_range(0.1..0.9);
        let signature: Vec<f64> = (0..bands)
            .map(|_| (brightness + 0.08 * rng.sample::<f64, _>(StandardNormal)).clamp(0.02, 0.98))
            .collect();
        let extent = rng.gen_range((size / 16).max(3)..=(size / 4).max(4)) as f64;
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let is_disk = rng.gen_bool(0.5);
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let (hx, hy) = (extent * aspect.sqrt() / 2.0, extent / aspect.sqrt() / 2.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if is_disk {
                    dx * dx + dy * dy <= (extent / 2.0) * (extent / 2.0)
                } else {
                    dx.abs() <= hx && dy.abs() <= hy
                };
                if inside {
                    for (plane, &s) in planes.iter_mut().zip(&signature) {
                        plane[y * size + x] = s;
                    }
                }
            }
        }
    }
    for plane in planes.iter_mut() {
        plane.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    let mut pan_weights: Vec<f64> = (0..bands)
        .map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln())
        .collect();
    let total: f64 = pan_weights.iter().sum();
    pan_weights.iter_mut().for_each(|w| *w /= total);

    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut detail = filter_plane(&noise, size, size, &gaussian_kernel(DETAIL_SIGMA));
    let stats = BandStats::of(&detail);
    let scale = if stats.std > 0.0 { DETAIL_STD / stats.std } else { 0.0 };
    detail.iter_mut().for_each(|v| *v = (*v - stats.mean) * scale);

    let pan: Vec<f64> = (0..n)
        .map(|i| {
            let mix: f64 = planes.iter().zip(&pan_weights).map(|(p, w)| w * p[i]).sum();
            (mix + detail[i]).clamp(0.0, 1.0)
        })
        .collect();

    Ok(SyntheticScene {
        hr_ms: MultiBandImage::from_bands(size, size, planes)?,
        pan: MultiBandImage::new(size, size, 1, pan)?,
        pan_weights,
    })
}

/// A Wald-ready sample built from a synthetic scene: the scene's MS is the
/// reference, its degraded copy the MS input, and its PAN the PAN input.
pub fn synth_sample(size: usize, bands: usize, ratio: usize, seed: u64) -> Result<TrainingSample> {
    let scene = synth_scene(size, bands, seed)?;
    let ms = downsample(&scene.hr_ms, ratio, ResampleFilter::wald(ratio))?;
    TrainingSample::new(ms, scene.pan, scene.hr_ms, ratio)
}

/// One row of `manifest.tsv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub corner_x: usize,
    pub corner_y: usize,
}

pub const MANIFEST_HEADER: &str = "index\tseed\tcorner_x\tcorner_y";

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProtocolError + '_ {
    move |source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<root>/sample_%06d/{ms,pan,ref}.msrf` plus `manifest.tsv`.
pub fn write_dataset(root: &Path, samples: &[(TrainingSample, ManifestEntry)]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (sample, entry) in samples {
        let dir = sample_dir(root, entry.index);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_msrf(&sample.ms, dir.join("ms.msrf"))?;
        save_msrf(&sample.pan, dir.join("pan.msrf"))?;
        save_msrf(&sample.reference, dir.join("ref.msrf"))?;
        let _ = writeln!(
            manifest,
            "{}\t{}\t{}\t{}",
            entry.index, entry.seed, entry.corner_x, entry.corner_y
        );
    }
    let path = root.join("manifest.tsv");
    crate::io::write_atomic(&path, manifest.as_bytes()).map_err(io_err(&path))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut entries = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |reason: &str| ProtocolError::Manifest {
            line: line_no + 1,
            reason: reason.to_string(),
        };
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("non-numeric field"));
        entries.push(ManifestEntry {
            index: num(fields[0])? as usize,
            seed: num(fields[1])?,
            corner_x: num(fields[2])? as usize,
            corner_y: num(fields[3])? as usize,
        });
    }
    Ok(entries)
}

/// Loads every sample listed in the manifest, normalized to [0, 1].
pub fn read_dataset(root: &Path) -> Result<Vec<TrainingSample>> {
    read_manifest(root)?
        .into_iter()
        .map(|entry| {
            let dir = sample_dir(root, entry.index);
            let ms = load_msrf(dir.join("ms.msrf"))?.normalized();
            let pan = load_msrf(dir.join("pan.msrf"))?.normalized();
            let reference = load_msrf(dir.join("ref.msrf"))?.normalized();
            if ms.width() == 0 || pan.width() % ms.width() != 0 {
                return Err(ProtocolError::DimensionMismatch(format!(
                    "sample {} has PAN width {} and MS width {}",
                    entry.index,
                    pan.width(),
                    ms.width()
                )));
            }
            let ratio = pan.width() / ms.width();
            TrainingSample::new(ms, pan, reference, ratio)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize, b: usize) -> MultiBandImage {
        MultiBandImage::new(w, h, b, (0..w * h * b).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap()
    }

    #[test]
    fn paper_patch_geometry() {
        let ms = ramp(256, 256, 4);
        let pan = ramp(1024, 1024, 1);
        let s = wald_degrade(&ms, &pan, 4, ResampleFilter::wald(4)).unwrap();
        assert_eq!(s.ms.dims(), (64, 64, 4));
        assert_eq!(s.pan.dims(), (256, 256, 1));
        assert_eq!(s.reference.dims(), (256, 256, 4));
        assert_eq!(s.reference, ms);
    }

    #[test]
    fn constant_inputs_degrade_to_constants() {
        let ms = MultiBandImage::filled(16, 16, 4, 0.3).unwrap();
        let pan = MultiBandImage::filled(64, 64, 1, 0.3).unwrap();
        let s = wald_degrade(&ms, &pan, 4, ResampleFilter::wald(4)).unwrap();
        for v in s.ms.data().iter().chain(s.pan.data()) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn divisibility_and_mismatch() {
        let ms = MultiBandImage::filled(10, 10, 4, 0.3).unwrap();
        let pan = MultiBandImage::filled(40, 40, 1, 0.3).unwrap();
        let err = wald_degrade(&ms, &pan, 4, ResampleFilter::Box).unwrap_err();
        assert!(matches!(err, ProtocolError::Raster(RasterError::NotDivisible { .. })));
        let pan = MultiBandImage::filled(44, 40, 1, 0.3).unwrap();
        assert!(matches!(
            wald_degrade(&ms, &pan, 4, ResampleFilter::Box),
            Err(ProtocolError::DimensionMismatch(_))
        ));
    }

    fn sample(ms_size: usize) -> TrainingSample {
        TrainingSample::new(
            ramp(ms_size, ms_size, 4),
            ramp(ms_size * 4, ms_size * 4, 1),
            ramp(ms_size * 4, ms_size * 4, 4),
            4,
        )
        .unwrap()
    }

    #[test]
    fn patch_sampling_contract() {
        let s = sample(32);
        let cfg = SamplerConfig {
            ms_patch: 8,
            count: 0,
            seed: 42,
        };
        assert!(extract_patches(&s, &cfg).unwrap().is_empty());

        let cfg = SamplerConfig { count: 20, ..cfg };
        assert_eq!(patch_corners(&s, &cfg).unwrap(), patch_corners(&s, &cfg).unwrap());
        let patches = extract_patches(&s, &cfg).unwrap();
        assert_eq!(patches.len(), 20);

        // the first corners are unaffected by the total count
        let fewer = patch_corners(&s, &SamplerConfig { count: 5, ..cfg }).unwrap();
        assert_eq!(fewer[..], patch_corners(&s, &cfg).unwrap()[..5]);

        let whole = extract_patches(
            &sample(8),
            &SamplerConfig {
                ms_patch: 8,
                count: 3,
                seed: 1,
            },
        )
        .unwrap();
        assert!(whole.iter().all(|p| *p == sample(8)));

        assert!(matches!(
            extract_patches(
                &sample(8),
                &SamplerConfig {
                    ms_patch: 9,
                    count: 1,
                    seed: 1
                }
            ),
            Err(ProtocolError::PatchTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn patches_stay_aligned(seed in any::<u64>(), patch in 1usize..12) {
            let s = sample(12);
            let cfg = SamplerConfig { ms_patch: patch, count: 4, seed };
            for ((x, y), p) in patch_corners(&s, &cfg).unwrap().into_iter().zip(extract_patches(&s, &cfg).unwrap()) {
                prop_assert_eq!(p.pan.dims(), (patch * 4, patch * 4, 1));
                prop_assert_eq!(&p.reference, &s.reference.crop(4 * x, 4 * y, 4 * patch, 4 * patch));
                prop_assert_eq!(&p.ms, &s.ms.crop(x, y, patch, patch));
            }
        }
    }

    #[test]
    fn synthetic_scene_contract() {
        let a = synth_scene(64, 4, 9).unwrap();
        let b = synth_scene(64, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.hr_ms, synth_scene(64, 4, 10).unwrap().hr_ms);
        assert!(a
            .hr_ms
            .data()
            .iter()
            .chain(a.pan.data())
            .all(|v| (0.0..=1.0).contains(v)));
        assert!((a.pan_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let pan_mean = BandStats::of(a.pan.data()).mean;
        let mixed: f64 = (0..4)
            .map(|b| a.pan_weights[b] * BandStats::of(a.hr_ms.band(b)).mean)
            .sum();
        assert!((pan_mean - mixed).abs() < 1e-2, "{pan_mean} vs {mixed}");
        assert!(matches!(synth_scene(30, 4, 0), Err(ProtocolError::BadSceneSize(30))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..2)
            .map(|i| {
                let s = synth_sample(32, 4, 4, i).unwrap();
                (
                    s,
                    ManifestEntry {
                        index: i as usize,
                        seed: i,
                        corner_x: 0,
                        corner_y: 0,
                    },
                )
            })
            .collect();
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap().len(), 2);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back[1].ms.dims(), (8, 8, 4));
        assert_eq!(back[1].ratio, 4);
        for (a, (b, _)) in back.iter().zip(&samples) {
            for (x, y) in a.reference.data().iter().zip(b.reference.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
