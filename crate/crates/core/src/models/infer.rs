//! Whole-scene generator inference with overlapping tiles.

use super::blueprint::GeneratorBlueprint;
use super::{image_to_tensor, GeneratorVariant, ModelError, Result};
use crate::neural::{ComputeGraph, Tensor};
use crate::raster::{upsample, MultiBandImage, ResampleFilter};

/// Tile corners are kept on multiples of this so every tile sees the same
/// stride-2 sampling grid as a single-shot run.
const ALIGN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceConfig {
    /// Tile edge in PAN pixels.
    pub tile: usize,
    /// Overlap between neighbouring tiles, blended with a linear ramp.
    pub overlap: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { tile: 256, overlap: 32 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.tile % ALIGN != 0 || self.overlap % ALIGN != 0 || self.overlap >= self.tile {
            return Err(ModelError::InvalidConfig(format!(
                "tile {} / overlap {} must be multiples of {ALIGN} with overlap < tile",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }
}

/// Start offsets of tiles covering `n` pixels. The last tile is flush with
/// the far edge.
pub fn tile_starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < n).collect();
    starts.push(n - tile);
    starts
}

// Per-pixel blend weights along one axis of a tile.
fn ramp(len: usize, overlap: usize, rising: bool, falling: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut w: f64 = 1.0;
            if rising && i < overlap {
                w = w.min((i as f64 + 0.5) / overlap as f64);
            }
            if falling && len - 1 - i < overlap {
                w = w.min(((len - 1 - i) as f64 + 0.5) / overlap as f64);
            }
            w
        })
        .collect()
}

/// Fuses a full scene with a trained generator. The MS is up-sampled once for
/// the whole scene; scenes larger than one tile are processed in overlapping
/// tiles and blended.
pub fn pansharpen_nn(
    ms: &MultiBandImage,
    pan: &MultiBandImage,
    generator: &ComputeGraph,
    variant: GeneratorVariant,
    cfg: &InferenceConfig,
) -> Result<MultiBandImage> {
    cfg.validate()?;
    let ratio = GeneratorBlueprint::RATIO;
    if pan.bands() != 1 || pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
        return Err(ModelError::DimensionMismatch(format!(
            "PAN {}×{}×{} does not match MS {}×{} at ratio {ratio}",
            pan.width(),
            pan.height(),
            pan.bands(),
            ms.width(),
            ms.height()
        )));
    }
    let expected_bands = generator.inputs().find(|(n, _)| *n == "ms").map(|(_, c)| c);
    if expected_bands != Some(ms.bands()) {
        return Err(ModelError::WeightShapeMismatch {
            name: "ms".into(),
            detail: format!(
                "generator expects {expected_bands:?} MS bands, image has {}",
                ms.bands()
            ),
        });
    }
    let pan_t = image_to_tensor(pan);
    let ms_t = if variant.takes_upsampled_ms() {
        let up =
            upsample(ms, ratio, ResampleFilter::Bicubic).map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
        image_to_tensor(&up)
    } else {
        image_to_tensor(ms)
    };
    let ms_scale = if variant.takes_upsampled_ms() { 1 } else { ratio };

    let (w, h, bands) = (pan.width(), pan.height(), ms.bands());
    let xs = tile_starts(w, cfg.tile, cfg.overlap);
    let ys = tile_starts(h, cfg.tile, cfg.overlap);
    if xs.len() == 1 && ys.len() == 1 {
        let out = run(generator, &pan_t, &ms_t)?;
        return Ok(MultiBandImage::new(w, h, bands, out.into_data()).expect("generator output is finite"));
    }
    if xs.iter().chain(&ys).any(|s| s % ALIGN != 0) {
        return Err(ModelError::DimensionMismatch(format!(
            "PAN edges must be multiples of {ALIGN} for tiling"
        )));
    }

    let mut acc = vec![0.0; bands * w * h];
    let mut norm = vec![0.0; w * h];
    for (iy, &y0) in ys.iter().enumerate() {
        let th = cfg.tile.min(h);
        let wy = ramp(th, cfg.overlap, iy > 0, iy + 1 < ys.len());
        for (ix, &x0) in xs.iter().enumerate() {
            let tw = cfg.tile.min(w);
            let wx = ramp(tw, cfg.overlap, ix > 0, ix + 1 < xs.len());
            let out = run(
                generator,
                &pan_t.crop(x0, y0, tw, th),
                &ms_t.crop(x0 / ms_scale, y0 / ms_scale, tw / ms_scale, th / ms_scale),
            )?;
            for y in 0..th {
                for x in 0..tw {
                    let wt = wy[y] * wx[x];
                    let p = (y0 + y) * w + x0 + x;
                    norm[p] += wt;
                    for b in 0..bands {
                        acc[b * w * h + p] += wt * out.plane(0, b)[y * tw + x];
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= norm[i % (w * h)];
    }
    Ok(MultiBandImage::new(w, h, bands, acc).expect("blended output is finite"))
}

fn run(generator: &ComputeGraph, pan: &Tensor, ms: &Tensor) -> Result<Tensor> {
    let mut out = generator.infer(&[("pan", pan), ("ms", ms)])?;
    out.remove("fused")
        .ok_or_else(|| ModelError::InvalidConfig("generator has no \"fused\" output".into()))
}
