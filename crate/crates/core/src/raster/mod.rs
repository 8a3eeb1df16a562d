//! Multiband raster container, resampling, moment matching and MSRF file I/O.

mod msrf;
mod resample;

pub use msrf::{decode_msrf, encode_msrf, load_msrf, save_msrf, MSRF_HEADER_LEN, MSRF_MAGIC};
pub(crate) use resample::resample_plane;
pub use resample::{
    bicubic_kernel, box_filter, downsample, downsample_weights, filter_plane, gaussian_kernel, reflect101, upsample,
    upsample_weights, AxisWeights, ResampleFilter, BICUBIC_A,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be non-zero (got {width}x{height}x{bands})")]
    EmptyImage { width: usize, height: usize, bands: usize },
    #[error("sample buffer holds {actual} values, {expected} expected for {width}x{height}x{bands}")]
    LengthMismatch {
        width: usize,
        height: usize,
        bands: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("band index {band} out of range for {bands}-band image")]
    BandOutOfRange { band: usize, bands: usize },
    #[error("resampling factor must be at least 2 (got {0})")]
    FactorTooSmall(usize),
    #[error("{width}x{height} image is not divisible by factor {factor}")]
    NotDivisible { width: usize, height: usize, factor: usize },
    #[error("gaussian sigma must be positive (got {0})")]
    InvalidSigma(f64),
    #[error("band has zero variance")]
    DegenerateBand,
    #[error("expected a single-band image, got {0} bands")]
    NotSingleBand(usize),
    #[error("bad magic at byte offset 0: expected \"MSRF\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported MSRF version {version} at byte offset 4")]
    UnsupportedVersion { version: u8 },
    #[error("unsupported MSRF dtype code {code} at byte offset 5")]
    UnsupportedDtype { code: u8 },
    #[error("truncated MSRF data at byte offset {offset}: need {expected} bytes, file has {actual}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("trailing bytes after MSRF payload at byte offset {offset}")]
    TrailingBytes { offset: usize },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// On-disk sample encoding of an MSRF file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleType {
    U8,
    U16,
    F32,
}

impl SampleType {
    pub fn code(self) -> u8 {
        match self {
            SampleType::U8 => 0,
            SampleType::U16 => 1,
            SampleType::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SampleType::U8),
            1 => Some(SampleType::U16),
            2 => Some(SampleType::F32),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            SampleType::U8 => 1,
            SampleType::U16 => 2,
            SampleType::F32 => 4,
        }
    }

    /// Largest value of the nominal range; floats are taken to be normalized.
    pub fn nominal_max(self) -> f64 {
        match self {
            SampleType::U8 => u8::MAX as f64,
            SampleType::U16 => u16::MAX as f64,
            SampleType::F32 => 1.0,
        }
    }
}

/// A `width × height × bands` raster, stored band-sequential and row-major.
///
/// Samples are always held in double precision; `dtype` only records how the
/// image is encoded when written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandImage {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f64>,
    value_range: (f64, f64),
    dtype: SampleType,
}

impl MultiBandImage {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(RasterError::EmptyImage { width, height, bands });
        }
        let expected = width * height * bands;
        if data.len() != expected {
            return Err(RasterError::LengthMismatch {
                width,
                height,
                bands,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
            value_range: (0.0, 1.0),
            dtype: SampleType::F32,
        })
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f64) -> Result<Self> {
        Self::new(width, height, bands, vec![value; width * height * bands])
    }

    /// Builds an image from one plane per band.
    pub fn from_bands(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let bands = planes.len();
        let data: Vec<f64> = planes.into_iter().flatten().collect();
        Self::new(width, height, bands, data)
    }

    pub fn with_value_range(mut self, lo: f64, hi: f64) -> Self {
        self.value_range = (lo, hi);
        self
    }

    pub fn with_dtype(mut self, dtype: SampleType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.bands)
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn dtype(&self) -> SampleType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, b: usize) -> f64 {
        self.data[b * self.pixels() + y * self.width + x]
    }

    /// Copies one band out as a single-band image with the same metadata.
    pub fn extract_band(&self, b: usize) -> Result<MultiBandImage> {
        if b >= self.bands {
            return Err(RasterError::BandOutOfRange {
                band: b,
                bands: self.bands,
            });
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            bands: 1,
            data: self.band(b).to_vec(),
            value_range: self.value_range,
            dtype: self.dtype,
        })
    }

    /// Same geometry and metadata, new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<MultiBandImage> {
        let img = Self::new(self.width, self.height, self.bands, data)?;
        Ok(img
            .with_value_range(self.value_range.0, self.value_range.1)
            .with_dtype(self.dtype))
    }

    /// Copies the `w × h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> MultiBandImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h * self.bands);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Self {
            width: w,
            height: h,
            bands: self.bands,
            data,
            value_range: self.value_range,
            dtype: self.dtype,
        }
    }

    /// Applies `f` to every sample. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> MultiBandImage {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite sample");
        Self { data, ..self.clone() }
    }

    /// Divides by the nominal maximum of the value range, mapping it to [0, 1].
    pub fn normalized(&self) -> MultiBandImage {
        let hi = self.value_range.1;
        let scale = if hi > 0.0 { hi } else { 1.0 };
        self.map(|v| v / scale)
            .with_value_range(0.0, 1.0)
            .with_dtype(self.dtype)
    }

    /// Inverse of [`normalized`](Self::normalized) for a target range and encoding.
    pub fn denormalized(&self, hi: f64, dtype: SampleType) -> MultiBandImage {
        let scale = if hi > 0.0 { hi } else { 1.0 };
        self.map(|v| v * scale).with_value_range(0.0, hi).with_dtype(dtype)
    }
}

/// Population statistics of one band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl BandStats {
    pub fn of(values: &[f64]) -> BandStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        BandStats {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

pub fn band_stats(img: &MultiBandImage) -> Vec<BandStats> {
    (0..img.bands()).map(|b| BandStats::of(img.band(b))).collect()
}

/// Moment matching: rescales `src` so that its mean and standard deviation
/// equal those of `reference`.
pub fn histogram_match(src: &MultiBandImage, reference: &MultiBandImage) -> Result<MultiBandImage> {
    if src.bands() != 1 {
        return Err(RasterError::NotSingleBand(src.bands()));
    }
    if reference.bands() != 1 {
        return Err(RasterError::NotSingleBand(reference.bands()));
    }
    let s = BandStats::of(src.data());
    let r = BandStats::of(reference.data());
    if s.std == 0.0 {
        return Err(RasterError::DegenerateBand);
    }
    let gain = r.std / s.std;
    Ok(src.map(|v| (v - s.mean) * gain + r.mean))
}
