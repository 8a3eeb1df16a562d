//! Layer tables of the three generators and the discriminator.
//!
//! With base width `w` (32 by default) a PSGAN generator is
//!
//! ```text
//! stream (pan, ms)  c1 conv3 w, c2 conv3 w, c3 conv3/2 2w      each + LReLU
//! trunk             concat 4w, t1 conv3 4w, t2 conv3/2 8w, t3 conv3 8w
//! decoder           d1 tconv4/2 4w, concat trunk entry -> 8w, d2 conv3 4w,
//!                   d3 tconv4/2 2w, concat stream c2 features -> 4w,
//!                   d4 conv3 w, d5 conv3 b
//! output            relu(d5 + up-sampled MS)
//! ```
//!
//! FU-PSGAN replaces the MS stream by conv3 w at MS size, tconv4/2 w and
//! conv3 2w, and its final skip carries only PAN features. ST-PSGAN runs a
//! single stream over concat(PAN, up-MS), so the trunk entry has 2w channels
//! and the final skip only the stream's c2 features.
//!
//! Generator weights start from a fan-in scaled normal law (`WeightInit::He`),
//! the discriminator from `N(0, 0.02)`.

use super::GeneratorVariant;
use crate::neural::{ComputeGraph, GraphBuilder, ValueId, WeightInit};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorBlueprint {
    pub variant: GeneratorVariant,
    pub bands: usize,
    /// Base channel width `w`.
    pub width: usize,
    /// Batch norm after every convolution that feeds a LeakyReLU.
    pub use_bn: bool,
}

impl GeneratorBlueprint {
    pub fn new(variant: GeneratorVariant, bands: usize) -> Self {
        Self {
            variant,
            bands,
            width: 32,
            use_bn: false,
        }
    }

    pub fn with_width(self, width: usize) -> Self {
        Self { width, ..self }
    }

    pub fn with_bn(self, use_bn: bool) -> Self {
        Self { use_bn, ..self }
    }

    /// Resolution ratio between PAN and the raw MS input of FU-PSGAN.
    pub const RATIO: usize = 4;

    pub fn build(&self, seed: u64) -> ComputeGraph {
        assert!(self.bands >= 1 && self.width >= 1, "bands and width must be positive");
        let mut g = Layers {
            b: GraphBuilder::with_init(seed, WeightInit::He),
            bn: self.use_bn,
        };
        let w = self.width;
        let pan = g.b.input("pan", 1);
        let ms = g.b.input("ms", self.bands);

        let (entry, skips, ms_up) = match self.variant {
            GeneratorVariant::Psgan => {
                let (p_skip, p_out) = g.stream("pan", pan, w);
                let (m_skip, m_out) = g.stream("ms", ms, w);
                (g.b.concat("trunk.entry", &[p_out, m_out]), vec![p_skip, m_skip], ms)
            }
            GeneratorVariant::FuPsgan => {
                let (p_skip, p_out) = g.stream("pan", pan, w);
                let m1 = g.conv_block("ms.c1", ms, w, 1);
                let m2 = g.tconv_block("ms.up", m1, w);
                let m3 = g.conv_block("ms.c3", m2, 2 * w, 1);
                let up = g.b.upsample("ms.resample", ms, Self::RATIO);
                (g.b.concat("trunk.entry", &[p_out, m3]), vec![p_skip], up)
            }
            GeneratorVariant::StPsgan => {
                let stacked = g.b.concat("stack", &[pan, ms]);
                let (skip, out) = g.stream("st", stacked, w);
                (out, vec![skip], ms)
            }
        };

        let t1 = g.conv_block("trunk.t1", entry, 4 * w, 1);
        let t2 = g.conv_block("trunk.t2", t1, 8 * w, 2);
        let t3 = g.conv_block("trunk.t3", t2, 8 * w, 1);

        let d1 = g.tconv_block("dec.d1", t3, 4 * w);
        let c1 = g.b.concat("dec.skip1", &[d1, entry]);
        let d2 = g.conv_block("dec.d2", c1, 4 * w, 1);
        let d3 = g.tconv_block("dec.d3", d2, 2 * w);
        let mut parts = vec![d3];
        parts.extend(skips);
        let c2 = g.b.concat("dec.skip2", &parts);
        let d4 = g.conv_block("dec.d4", c2, w, 1);
        let d5 = g.b.conv("dec.d5", d4, self.bands, 3, 1, 1);
        let sum = g.b.add("residual", d5, ms_up);
        let out = g.b.relu("out", sum);
        g.b.output("fused", out);
        g.b.finish()
    }
}

struct Layers {
    b: GraphBuilder,
    bn: bool,
}

impl Layers {
    fn activate(&mut self, name: &str, x: ValueId) -> ValueId {
        let x = if self.bn {
            self.b.batchnorm(&format!("{name}.bn"), x, BN_EPS, BN_MOMENTUM)
        } else {
            x
        };
        self.b.leaky_relu(&format!("{name}.act"), x, LEAKY_SLOPE)
    }

    fn conv_block(&mut self, name: &str, x: ValueId, out_c: usize, stride: usize) -> ValueId {
        let c = self.b.conv(name, x, out_c, 3, stride, 1);
        self.activate(name, c)
    }

    fn tconv_block(&mut self, name: &str, x: ValueId, out_c: usize) -> ValueId {
        let t = self.b.tconv(name, x, out_c, 4, 2, 1, 0);
        self.activate(name, t)
    }

    /// Two full-size convolutions and a strided one; returns the
    /// pre-downsampling features (for the skip) and the stream output.
    fn stream(&mut self, prefix: &str, x: ValueId, w: usize) -> (ValueId, ValueId) {
        let c1 = self.conv_block(&format!("{prefix}.c1"), x, w, 1);
        let c2 = self.conv_block(&format!("{prefix}.c2"), c1, w, 1);
        let c3 = self.conv_block(&format!("{prefix}.c3"), c2, 2 * w, 2);
        (c2, c3)
    }
}

pub fn build_generator(variant: GeneratorVariant, bands: usize, use_bn: bool, seed: u64) -> ComputeGraph {
    GeneratorBlueprint::new(variant, bands).with_bn(use_bn).build(seed)
}

/// Five 3×3 convolutions: strides 2, 2, 2, 1, 1 and widths w, 2w, 4w, 4w, 1
/// (w = 64), LeakyReLU between them and a sigmoid at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorBlueprint {
    pub bands: usize,
    pub width: usize,
}

impl DiscriminatorBlueprint {
    pub fn new(bands: usize) -> Self {
        Self { bands, width: 64 }
    }

    pub fn with_width(self, width: usize) -> Self {
        Self { width, ..self }
    }

    pub fn build(&self, seed: u64) -> ComputeGraph {
        let mut b = GraphBuilder::new(seed);
        let w = self.width;
        let cond = b.input("condition", self.bands);
        let cand = b.input("candidate", self.bands);
        let mut x = b.concat("pair", &[cond, cand]);
        for (i, (out_c, stride)) in [(w, 2), (2 * w, 2), (4 * w, 2), (4 * w, 1)].into_iter().enumerate() {
            let name = format!("d{}", i + 1);
            let c = b.conv(&name, x, out_c, 3, stride, 1);
            x = b.leaky_relu(&format!("{name}.act"), c, LEAKY_SLOPE);
        }
        let logits = b.conv("d5", x, 1, 3, 1, 1);
        let p = b.sigmoid("prob", logits);
        b.output("prob", p);
        b.finish()
    }
}

pub fn build_discriminator(bands: usize, seed: u64) -> ComputeGraph {
    DiscriminatorBlueprint::new(bands).build(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{LayerSpec, Mode, Tensor};

    fn forward(g: &ComputeGraph, pan: usize, ms: usize, bands: usize) -> [usize; 4] {
        let p = Tensor::full([1, 1, pan, pan], 0.5);
        let m = Tensor::full([1, bands, ms, ms], 0.4);
        g.forward(&[("pan", &p), ("ms", &m)], Mode::Train)
            .unwrap()
            .output("fused")
            .unwrap()
            .dims()
    }

    #[test]
    fn output_shapes_at_small_scale() {
        for v in GeneratorVariant::ALL {
            let g = GeneratorBlueprint::new(v, 4).with_width(4).build(1);
            let ms = if v.takes_upsampled_ms() { 32 } else { 8 };
            assert_eq!(forward(&g, 32, ms, 4), [1, 4, 32, 32], "{v}");
        }
    }

    #[test]
    fn decoder_layer_counts() {
        for v in GeneratorVariant::ALL {
            let g = GeneratorBlueprint::new(v, 4).build(0);
            let dec: Vec<_> = g
                .nodes()
                .iter()
                .filter(|n| n.name.starts_with("dec.d") && n.name.matches('.').count() == 1)
                .collect();
            let tconv = dec.iter().filter(|n| matches!(n.spec, LayerSpec::TConv { .. })).count();
            let conv = dec.iter().filter(|n| matches!(n.spec, LayerSpec::Conv { .. })).count();
            assert_eq!((tconv, conv), (2, 3), "{v}");
            let last = g.nodes().last().unwrap();
            assert_eq!(last.spec, LayerSpec::Relu);
        }
    }

    #[test]
    fn default_width_channel_ladder() {
        let g = GeneratorBlueprint::new(GeneratorVariant::Psgan, 4).build(0);
        let out_c = |name: &str| match g.nodes().iter().find(|n| n.name == name).unwrap().spec {
            LayerSpec::Conv { out_c, .. } | LayerSpec::TConv { out_c, .. } => out_c,
            _ => unreachable!(),
        };
        let ladder: Vec<usize> = [
            "pan.c1", "pan.c2", "pan.c3", "trunk.t1", "trunk.t2", "trunk.t3", "dec.d1", "dec.d2", "dec.d3", "dec.d4",
            "dec.d5",
        ]
        .iter()
        .map(|n| out_c(n))
        .collect();
        assert_eq!(ladder, [32, 32, 64, 128, 256, 256, 128, 128, 64, 32, 4]);
        let in_c = |name: &str| match g.nodes().iter().find(|n| n.name == name).unwrap().spec {
            LayerSpec::Conv { in_c, .. } | LayerSpec::TConv { in_c, .. } => in_c,
            _ => unreachable!(),
        };
        assert_eq!((in_c("trunk.t1"), in_c("dec.d2"), in_c("dec.d4")), (128, 256, 128));
    }

    #[test]
    fn fu_stream_and_st_input() {
        let fu = GeneratorBlueprint::new(GeneratorVariant::FuPsgan, 4).build(0);
        let spec = |g: &ComputeGraph, name: &str| g.nodes().iter().find(|n| n.name == name).unwrap().spec.clone();
        assert_eq!(
            spec(&fu, "ms.c1"),
            LayerSpec::Conv {
                k: 3,
                stride: 1,
                in_c: 4,
                out_c: 32,
                pad: 1
            }
        );
        assert_eq!(
            spec(&fu, "ms.up"),
            LayerSpec::TConv {
                k: 4,
                stride: 2,
                in_c: 32,
                out_c: 32,
                pad: 1,
                out_pad: 0
            }
        );
        assert_eq!(
            spec(&fu, "ms.c3"),
            LayerSpec::Conv {
                k: 3,
                stride: 1,
                in_c: 32,
                out_c: 64,
                pad: 1
            }
        );
        let st = GeneratorBlueprint::new(GeneratorVariant::StPsgan, 4).build(0);
        assert_eq!(
            spec(&st, "st.c1"),
            LayerSpec::Conv {
                k: 3,
                stride: 1,
                in_c: 5,
                out_c: 32,
                pad: 1
            }
        );
    }

    #[test]
    fn st_has_fewer_parameters() {
        let count = |v| GeneratorBlueprint::new(v, 4).build(0).params.trainable_count();
        assert!(count(GeneratorVariant::StPsgan) < count(GeneratorVariant::Psgan));
    }

    #[test]
    fn bn_follows_every_activated_conv() {
        for v in GeneratorVariant::ALL {
            let g = GeneratorBlueprint::new(v, 4).with_bn(true).build(0);
            assert_eq!(g.batchnorm_count(), g.conv_count() - 1, "{v}");
            assert_eq!(GeneratorBlueprint::new(v, 4).build(0).batchnorm_count(), 0);
        }
    }

    #[test]
    fn discriminator_patch_grid() {
        let d = DiscriminatorBlueprint::new(4).with_width(4).build(0);
        for (size, grid) in [(64, 8), (32, 4)] {
            let x = Tensor::full([2, 4, size, size], 0.3);
            let tape = d.forward(&[("condition", &x), ("candidate", &x)], Mode::Train).unwrap();
            let p = tape.output("prob").unwrap();
            assert_eq!(p.dims(), [2, 1, grid, grid]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
