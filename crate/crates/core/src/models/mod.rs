//! PSGAN generators, the patch discriminator, adversarial losses, the
//! alternating training loop, tiled inference and weight files.

mod blueprint;
mod infer;
mod loss;
mod train;
mod weights;

pub use blueprint::{
    build_discriminator, build_generator, DiscriminatorBlueprint, GeneratorBlueprint, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE,
};
pub use infer::{pansharpen_nn, tile_starts, InferenceConfig};
#[cfg(feature = "inspect-objectives")]
pub use loss::printed_discriminator_objective;
pub use loss::{discriminator_loss, generator_loss, DiscriminatorLoss, GeneratorLoss, LOG_FLOOR};
pub use train::{train, train_with, Profile, StepRecord, TrainConfig, TrainHistory, Trained};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WeightsFile, PSGW_MAGIC};

use crate::neural::{NeuralError, Tensor};
use crate::raster::MultiBandImage;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights were trained for {found}, expected {expected}")]
    VariantMismatch {
        expected: GeneratorVariant,
        found: GeneratorVariant,
    },
    #[error("weight {name}: {detail}")]
    WeightShapeMismatch { name: String, detail: String },
    #[error("not a weights file (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorVariant {
    /// Two streams; the MS input is up-sampled to PAN size beforehand.
    Psgan,
    /// Two streams; the MS stream up-scales raw MS features inside the network.
    FuPsgan,
    /// One stream over the stacked PAN and up-sampled MS.
    StPsgan,
}

impl GeneratorVariant {
    pub const ALL: [GeneratorVariant; 3] = [
        GeneratorVariant::Psgan,
        GeneratorVariant::FuPsgan,
        GeneratorVariant::StPsgan,
    ];

    pub fn code(self) -> u8 {
        match self {
            GeneratorVariant::Psgan => 0,
            GeneratorVariant::FuPsgan => 1,
            GeneratorVariant::StPsgan => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorVariant::Psgan => "psgan",
            GeneratorVariant::FuPsgan => "fu-psgan",
            GeneratorVariant::StPsgan => "st-psgan",
        }
    }

    /// Whether the generator consumes MS at PAN size rather than raw MS.
    pub fn takes_upsampled_ms(self) -> bool {
        self != GeneratorVariant::FuPsgan
    }
}

impl fmt::Display for GeneratorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "psgan" => Ok(GeneratorVariant::Psgan),
            "fu-psgan" | "fupsgan" => Ok(GeneratorVariant::FuPsgan),
            "st-psgan" | "stpsgan" => Ok(GeneratorVariant::StPsgan),
            other => Err(format!(
                "unknown variant {other:?} (expected psgan, fu-psgan or st-psgan)"
            )),
        }
    }
}

/// Single-item tensor view of an image (band-major data is already NCHW).
pub fn image_to_tensor(img: &MultiBandImage) -> Tensor {
    Tensor::new([1, img.bands(), img.height(), img.width()], img.data().to_vec()).expect("image samples are finite")
}

/// Image from item `n` of a tensor.
pub fn tensor_to_image(t: &Tensor, n: usize) -> MultiBandImage {
    MultiBandImage::new(t.width(), t.height(), t.channels(), t.item(n).to_vec()).expect("tensor values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_and_codes() {
        for v in GeneratorVariant::ALL {
            assert_eq!(v.name().parse::<GeneratorVariant>().unwrap(), v);
            assert_eq!(GeneratorVariant::from_code(v.code()), Some(v));
        }
        assert_eq!(
            "ST_PSGAN".parse::<GeneratorVariant>().unwrap(),
            GeneratorVariant::StPsgan
        );
        assert!("pnn".parse::<GeneratorVariant>().is_err());
        assert_eq!(GeneratorVariant::from_code(3), None);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = MultiBandImage::new(3, 2, 2, (0..12).map(f64::from).collect()).unwrap();
        let t = image_to_tensor(&img);
        assert_eq!(t.dims(), [1, 2, 2, 3]);
        assert_eq!(tensor_to_image(&t, 0), img);
    }
}
