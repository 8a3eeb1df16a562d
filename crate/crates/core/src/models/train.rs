//! Alternating discriminator / generator optimization.

use super::blueprint::{DiscriminatorBlueprint, GeneratorBlueprint};
use super::loss::{discriminator_loss, generator_loss, GeneratorLoss};
use super::{image_to_tensor, GeneratorVariant, ModelError, Result};
use crate::neural::{AdamConfig, ComputeGraph, Gradients, Mode, Tape, Tensor};
use crate::protocol::TrainingSample;
use crate::raster::{upsample, ResampleFilter};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small patches and batches for single-core runs.
    Desk,
    /// MS 64×64 / PAN 256×256 patches, batch 8.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile {other:?} (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the adversarial term.
    pub alpha: f64,
    /// Weight of the ℓ1 term.
    pub beta: f64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub use_bn: bool,
    /// MS patch edge the dataset is expected to have.
    pub ms_patch: usize,
    pub ratio: usize,
    /// Generator base width.
    pub width: usize,
    /// Discriminator base width.
    pub disc_width: usize,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (batch, ms_patch) = match profile {
            Profile::Desk => (4, 16),
            Profile::Paper => (8, 64),
        };
        Self {
            alpha: 1.0,
            beta: 100.0,
            batch,
            adam: AdamConfig::default(),
            steps: 0,
            seed: 0,
            use_bn: false,
            ms_patch,
            ratio: GeneratorBlueprint::RATIO,
            width: 32,
            disc_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if self.batch == 0 || self.width == 0 || self.disc_width == 0 {
            return bad("batch and widths must be at least 1".into());
        }
        if self.ratio != GeneratorBlueprint::RATIO {
            return bad(format!(
                "generators are built for ratio {}, got {}",
                GeneratorBlueprint::RATIO,
                self.ratio
            ));
        }
        self.adam.validate().map_err(ModelError::InvalidConfig)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub g_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub d_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.g_loss,
            self.g_adv,
            self.g_l1,
            self.d_loss,
            self.d_real_mean,
            self.d_fake_mean,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(StepRecord::is_finite)
    }

    /// Mean ℓ1 over the first `n` steps.
    pub fn head_l1(&self, n: usize) -> f64 {
        let s = &self.steps[..n.min(self.steps.len())];
        s.iter().map(|r| r.g_l1).sum::<f64>() / s.len() as f64
    }

    /// Mean ℓ1 over the last `n` steps.
    pub fn tail_l1(&self, n: usize) -> f64 {
        let s = &self.steps[self.steps.len().saturating_sub(n)..];
        s.iter().map(|r| r.g_l1).sum::<f64>() / s.len() as f64
    }

    /// Exact bit patterns of every recorded value, for reproducibility checks.
    pub fn bits(&self) -> Vec<u64> {
        self.steps
            .iter()
            .flat_map(|r| [r.g_loss, r.g_adv, r.g_l1, r.d_loss, r.d_real_mean, r.d_fake_mean])
            .map(f64::to_bits)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub variant: GeneratorVariant,
    pub bands: usize,
    pub generator: ComputeGraph,
    pub discriminator: ComputeGraph,
    pub history: TrainHistory,
}

/// Per-sample tensors prepared once before training.
struct Prepared {
    pan: Tensor,
    ms: Tensor,
    condition: Tensor,
    reference: Tensor,
}

fn prepare(sample: &TrainingSample, variant: GeneratorVariant) -> Result<Prepared> {
    let up = upsample(&sample.ms, sample.ratio, ResampleFilter::Bicubic)
        .map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
    let condition = image_to_tensor(&up);
    let ms = if variant.takes_upsampled_ms() {
        condition.clone()
    } else {
        image_to_tensor(&sample.ms)
    };
    Ok(Prepared {
        pan: image_to_tensor(&sample.pan),
        ms,
        condition,
        reference: image_to_tensor(&sample.reference),
    })
}

fn check_dataset(dataset: &[TrainingSample], cfg: &TrainConfig) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| ModelError::InvalidConfig("training set is empty".into()))?;
    let geometry = |s: &TrainingSample| (s.ms.dims(), s.pan.dims(), s.ratio);
    if let Some(bad) = dataset.iter().find(|s| geometry(s) != geometry(first)) {
        return Err(ModelError::DimensionMismatch(format!(
            "samples differ in geometry: {:?} vs {:?}",
            geometry(bad),
            geometry(first)
        )));
    }
    if first.ratio != cfg.ratio {
        return Err(ModelError::DimensionMismatch(format!(
            "samples have ratio {}, config {}",
            first.ratio, cfg.ratio
        )));
    }
    if first.ms.width() != cfg.ms_patch || first.ms.height() != cfg.ms_patch {
        return Err(ModelError::DimensionMismatch(format!(
            "samples are {}×{} MS pixels, config expects {}",
            first.ms.width(),
            first.ms.height(),
            cfg.ms_patch
        )));
    }
    if first.pan.width() % 4 != 0 || first.pan.height() % 4 != 0 {
        return Err(ModelError::DimensionMismatch(
            "PAN patch edges must be multiples of 4".into(),
        ));
    }
    Ok(())
}

fn sum_grads(a: Gradients, b: Gradients) -> BTreeMap<String, Tensor> {
    let mut out = a.params;
    for (name, g) in b.params {
        match out.get_mut(&name) {
            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                out.insert(name, g);
            }
        }
    }
    out
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

/// Tensors shared by the two half-steps of one iteration.
struct Batch<'a> {
    condition: &'a Tensor,
    reference: &'a Tensor,
    /// Generator output, treated as a constant by the discriminator step.
    fake: &'a Tensor,
}

struct DStats {
    total: f64,
    real_mean: f64,
    fake_mean: f64,
}

fn at_step(e: ModelError, step: usize) -> ModelError {
    match e {
        ModelError::NonFiniteLoss { .. } => ModelError::NonFiniteLoss { step },
        other => other,
    }
}

/// One Adam update of the discriminator on real and detached fake pairs.
fn discriminator_step(discriminator: &mut ComputeGraph, batch: &Batch, cfg: &TrainConfig) -> Result<DStats> {
    let real_tape = discriminator.forward(
        &[("condition", batch.condition), ("candidate", batch.reference)],
        Mode::Train,
    )?;
    let fake_tape = discriminator.forward(
        &[("condition", batch.condition), ("candidate", batch.fake)],
        Mode::Train,
    )?;
    let (d_real, d_fake) = (real_tape.output("prob")?, fake_tape.output("prob")?);
    let loss = discriminator_loss(d_real, d_fake)?;
    let stats = DStats {
        total: loss.total,
        real_mean: mean(d_real),
        fake_mean: mean(d_fake),
    };
    let g_real = discriminator.backward(&real_tape, &[("prob", &loss.real_grad)])?;
    let g_fake = discriminator.backward(&fake_tape, &[("prob", &loss.fake_grad)])?;
    discriminator.params.adam_step(&sum_grads(g_real, g_fake), &cfg.adam)?;
    Ok(stats)
}

/// One Adam update of the generator against a frozen discriminator.
fn generator_step(
    generator: &mut ComputeGraph,
    g_tape: &Tape,
    discriminator: &ComputeGraph,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss> {
    let adv_tape = discriminator.forward(
        &[("condition", batch.condition), ("candidate", batch.fake)],
        Mode::Train,
    )?;
    let loss = generator_loss(
        adv_tape.output("prob")?,
        batch.fake,
        batch.reference,
        cfg.alpha,
        cfg.beta,
    )?;
    let through_d = discriminator.backward(&adv_tape, &[("prob", &loss.d_fake_grad)])?;
    let mut upstream = loss.fused_grad.clone();
    upstream
        .data_mut()
        .iter_mut()
        .zip(through_d.inputs["candidate"].data())
        .for_each(|(a, b)| *a += b);
    let grads = generator.backward(g_tape, &[("fused", &upstream)])?;
    generator.params.adam_step(&grads.params, &cfg.adam)?;
    Ok(loss)
}

/// Trains a generator/discriminator pair; see [`train_with`].
pub fn train(dataset: &[TrainingSample], variant: GeneratorVariant, cfg: &TrainConfig) -> Result<Trained> {
    train_with(dataset, variant, cfg, |_, _| {})
}

/// Alternating optimization. Each step draws a batch (epoch-wise shuffling),
/// updates D once on (reference, detached generator output), then updates G
/// once against the updated D. `on_step` sees every finished step.
pub fn train_with(
    dataset: &[TrainingSample],
    variant: GeneratorVariant,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &StepRecord),
) -> Result<Trained> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let bands = dataset[0].ms.bands();
    let mut generator = GeneratorBlueprint::new(variant, bands)
        .with_width(cfg.width)
        .with_bn(cfg.use_bn)
        .build(cfg.seed.wrapping_mul(2).wrapping_add(1));
    let mut discriminator = DiscriminatorBlueprint::new(bands)
        .with_width(cfg.disc_width)
        .build(cfg.seed.wrapping_mul(2).wrapping_add(2));
    let prepared = dataset
        .iter()
        .map(|s| prepare(s, variant))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = Vec::new();
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let stack =
            |f: fn(&Prepared) -> &Tensor| Tensor::stack(&batch.iter().map(|&i| f(&prepared[i])).collect::<Vec<_>>());
        let pan = stack(|p| &p.pan)?;
        let ms = stack(|p| &p.ms)?;
        let condition = stack(|p| &p.condition)?;
        let reference = stack(|p| &p.reference)?;

        let g_tape = generator.forward(&[("pan", &pan), ("ms", &ms)], Mode::Train)?;
        generator.commit_running_stats(&g_tape);
        let fake = g_tape.output("fused")?.clone();
        let batch = Batch {
            condition: &condition,
            reference: &reference,
            fake: &fake,
        };
        let d = discriminator_step(&mut discriminator, &batch, cfg).map_err(|e| at_step(e, step))?;
        let g = generator_step(&mut generator, &g_tape, &discriminator, &batch, cfg).map_err(|e| at_step(e, step))?;

        let record = StepRecord {
            g_loss: g.total,
            g_adv: g.adv,
            g_l1: g.l1,
            d_loss: d.total,
            d_real_mean: d.real_mean,
            d_fake_mean: d.fake_mean,
        };
        if !record.is_finite() || !generator.params.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(ModelError::NonFiniteLoss { step });
        }
        on_step(step, &record);
        history.steps.push(record);
    }
    Ok(Trained {
        variant,
        bands,
        generator,
        discriminator,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::synth_sample;

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            ms_patch: 4,
            width: 2,
            disc_width: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Vec<TrainingSample> {
        (0..3).map(|s| synth_sample(16, 4, 4, s).unwrap()).collect()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_config(0);
        let t = train(&dataset(), GeneratorVariant::Psgan, &cfg).unwrap();
        assert!(t.history.is_empty());
        let init = GeneratorBlueprint::new(GeneratorVariant::Psgan, 4)
            .with_width(2)
            .build(11);
        assert_eq!(t.generator.params.fingerprint(), init.params.fingerprint());
    }

    #[test]
    fn deterministic_and_finite() {
        for v in GeneratorVariant::ALL {
            let cfg = tiny_config(4);
            let a = train(&dataset(), v, &cfg).unwrap();
            let b = train(&dataset(), v, &cfg).unwrap();
            assert_eq!(a.history.bits(), b.history.bits());
            assert_eq!(a.generator.params.fingerprint(), b.generator.params.fingerprint());
            assert!(a.history.all_finite());
            assert_eq!(a.history.len(), 4);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config(1);
        assert!(matches!(
            train(&[], GeneratorVariant::Psgan, &cfg),
            Err(ModelError::InvalidConfig(_))
        ));
        let mut mixed = dataset();
        mixed.push(synth_sample(32, 4, 4, 9).unwrap());
        assert!(matches!(
            train(&mixed, GeneratorVariant::Psgan, &cfg),
            Err(ModelError::DimensionMismatch(_))
        ));
        let bad = TrainConfig { alpha: 0.0, ..cfg };
        assert!(matches!(
            train(&dataset(), GeneratorVariant::Psgan, &bad),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn each_half_step_touches_one_network() {
        let data = dataset();
        let cfg = tiny_config(1);
        let p = prepare(&data[0], GeneratorVariant::Psgan).unwrap();
        let mut g = GeneratorBlueprint::new(GeneratorVariant::Psgan, 4)
            .with_width(2)
            .build(1);
        let mut d = DiscriminatorBlueprint::new(4).with_width(2).build(2);
        let tape = g.forward(&[("pan", &p.pan), ("ms", &p.ms)], Mode::Train).unwrap();
        let fake = tape.output("fused").unwrap().clone();
        let batch = Batch {
            condition: &p.condition,
            reference: &p.reference,
            fake: &fake,
        };
        let (g0, d0) = (g.params.fingerprint(), d.params.fingerprint());
        discriminator_step(&mut d, &batch, &cfg).unwrap();
        assert_eq!(g.params.fingerprint(), g0);
        let d1 = d.params.fingerprint();
        assert_ne!(d1, d0);
        generator_step(&mut g, &tape, &d, &batch, &cfg).unwrap();
        assert_eq!(d.params.fingerprint(), d1);
        assert_ne!(g.params.fingerprint(), g0);
    }

    #[test]
    fn profiles() {
        let desk = TrainConfig::profile(Profile::Desk);
        let paper = TrainConfig::profile(Profile::Paper);
        assert_eq!((desk.batch, desk.ms_patch), (4, 16));
        assert_eq!((paper.batch, paper.ms_patch), (8, 64));
        assert_eq!((desk.alpha, desk.beta), (1.0, 100.0));
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
    }
}
