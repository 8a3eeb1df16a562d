//! Central finite-difference verification of [`ComputeGraph::backward`].

use super::graph::{ComputeGraph, Mode, Tape};
use super::{Result, Tensor};
use crate::metrics::exact_sum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation applied in each direction.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so coordinates with
    /// vanishing gradient are compared absolutely.
    pub floor: f64,
    pub mode: Mode,
    /// Seed of the random projection that turns outputs into a scalar.
    pub seed: u64,
    /// Also check gradients with respect to the graph inputs.
    pub include_inputs: bool,
    pub stencil: Stencil,
}

/// Central difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error
    /// O(h⁴). Lets curved graphs (batch norm) use a step large enough to
    /// keep rounding noise small.
    FourPoint,
}

impl Stencil {
    fn offsets(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::TwoPoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FourPoint => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-3,
            mode: Mode::Train,
            seed: 0,
            include_inputs: false,
            stencil: Stencil::TwoPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because a rectifier changed sign between the
    /// perturbed evaluations (the objective has a kink in between).
    pub excluded: usize,
}

fn rectifier_signs(graph: &ComputeGraph, tape: &Tape) -> Vec<bool> {
    graph
        .nodes()
        .iter()
        .filter(|n| n.spec.is_rectifier())
        .flat_map(|n| tape.value(n.inputs[0]).data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Objective value and rectifier signs at a perturbation.
type Probe<'a> = Box<dyn FnMut(f64) -> Result<(f64, Vec<bool>)> + 'a>;

struct Objective<'a> {
    projections: Vec<(&'a str, Tensor)>,
}

impl Objective<'_> {
    fn eval(&self, tape: &Tape) -> f64 {
        exact_sum(self.projections.iter().flat_map(|(name, r)| {
            let y = tape.output(name).expect("output exists");
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).collect::<Vec<_>>()
        }))
    }
}

/// Compares analytic gradients of `L = Σ_o <R_o, y_o>` (random fixed `R_o`)
/// with central differences over every trainable parameter coordinate and,
/// optionally, every input coordinate.
pub fn grad_check(graph: &ComputeGraph, inputs: &[(&str, &Tensor)], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let base = graph.forward(inputs, cfg.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objective = Objective {
        projections: graph
            .outputs()
            .iter()
            .map(|(name, _)| {
                let dims = base.output(name).expect("declared output").dims();
                let n = dims.iter().product();
                let r = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (name.as_str(), Tensor::from_raw(dims, r))
            })
            .collect(),
    };
    let seeds: Vec<(&str, &Tensor)> = objective.projections.iter().map(|(n, t)| (*n, t)).collect();
    let analytic = graph.backward(&base, &seeds)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        excluded: 0,
    };
    // Central difference from the perturbed evaluations, `None` across a kink.
    let differentiate = |mut run: Probe<'_>| -> Result<Option<f64>> {
        let mut numeric = 0.0;
        let mut signs: Option<Vec<bool>> = None;
        let mut kink = false;
        for &(k, w) in cfg.stencil.offsets() {
            let (f, s) = run(k * cfg.eps)?;
            numeric += w * f;
            match &signs {
                Some(first) => kink |= *first != s,
                None => signs = Some(s),
            }
        }
        Ok((!kink).then_some(numeric / cfg.eps))
    };
    let mut record = |name: &str, i: usize, a: f64, numeric: Option<f64>| {
        let Some(numeric) = numeric else {
            report.excluded += 1;
            return;
        };
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = err.max(report.max_rel_err);
            report.worst = format!("{name}[{i}]");
        }
    };

    let mut probe = graph.clone();
    let names: Vec<String> = graph
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &names {
        let len = graph.params.get(name)?.len();
        for i in 0..len {
            let orig = graph.params.get(name)?.data()[i];
            let (probe_ref, objective) = (&mut probe, &objective);
            let numeric = differentiate(Box::new(move |delta: f64| {
                probe_ref.params.value_mut(name).expect("parameter").data_mut()[i] = orig + delta;
                let tape = probe_ref.forward(inputs, cfg.mode)?;
                Ok((objective.eval(&tape), rectifier_signs(probe_ref, &tape)))
            }))?;
            probe.params.value_mut(name).expect("parameter").data_mut()[i] = orig;
            record(name, i, analytic.params[name].data()[i], numeric);
        }
    }

    if cfg.include_inputs {
        for (k, (name, t)) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let numeric = differentiate(Box::new(|delta: f64| {
                    let mut shifted = (*t).clone();
                    shifted.data_mut()[i] += delta;
                    let mut bound: Vec<(&str, &Tensor)> = inputs.to_vec();
                    bound[k] = (name, &shifted);
                    let tape = graph.forward(&bound, cfg.mode)?;
                    Ok((objective.eval(&tape), rectifier_signs(graph, &tape)))
                }))?;
                record(name, i, analytic.inputs[*name].data()[i], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::GraphBuilder;

    fn random(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(graph: &ComputeGraph, inputs: &[(&str, &Tensor)]) -> GradCheckReport {
        let cfg = GradCheckConfig {
            include_inputs: true,
            ..Default::default()
        };
        grad_check(graph, inputs, &cfg).unwrap()
    }

    #[test]
    fn linear_conv_is_exact() {
        // differences of a linear map are exact for any step, so a large
        // step keeps rounding out of the comparison
        let mut b = GraphBuilder::with_init_std(1, 0.5);
        let x = b.input("x", 2);
        let c = b.conv("c", x, 3, 3, 2, 1);
        b.output("y", c);
        let g = b.finish();
        let input = random([2, 2, 5, 5], 2);
        let cfg = GradCheckConfig {
            eps: 0.1,
            include_inputs: true,
            ..Default::default()
        };
        let r = grad_check(&g, &[("x", &input)], &cfg).unwrap();
        assert!(r.max_rel_err <= 1e-10, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn every_layer_kind() {
        let mut b = GraphBuilder::with_init_std(3, 0.5);
        let x = b.input("x", 2);
        let m = b.input("m", 2);
        let c1 = b.conv("c1", x, 3, 3, 1, 1);
        let n1 = b.batchnorm("bn", c1, 1e-5, 0.1);
        let a1 = b.leaky_relu("a1", n1, 0.2);
        let d = b.conv("down", a1, 4, 3, 2, 1);
        let a2 = b.relu("a2", d);
        let t = b.tconv("up", a2, 3, 4, 2, 1, 0);
        let mu = b.upsample("mu", m, 2);
        let cat = b.concat("cat", &[t, a1, mu]);
        let c2 = b.conv("c2", cat, 2, 3, 1, 1);
        let mu2 = b.conv("mproj", mu, 2, 1, 1, 0);
        let sum = b.add("sum", c2, mu2);
        let s = b.sigmoid("sig", sum);
        b.output("y", s);
        b.output("feat", a2);
        let g = b.finish();
        let input = random([2, 2, 6, 6], 4);
        let ms = random([2, 2, 3, 3], 5);
        let r = check(&g, &[("x", &input), ("m", &ms)]);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
        assert!(r.checked > 400);

        let cfg = GradCheckConfig {
            mode: Mode::Infer,
            ..Default::default()
        };
        let r = grad_check(&g, &[("x", &input), ("m", &ms)], &cfg).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn four_point_stencil_on_curved_graph() {
        let mut b = GraphBuilder::with_init_std(6, 0.5);
        let x = b.input("x", 2);
        let c = b.conv("c", x, 3, 3, 1, 1);
        let n = b.batchnorm("bn", c, 1e-5, 0.1);
        let s = b.sigmoid("s", n);
        b.output("y", s);
        let g = b.finish();
        let input = random([2, 2, 5, 5], 7);
        let at = |eps, stencil| {
            let cfg = GradCheckConfig {
                eps,
                stencil,
                include_inputs: true,
                ..Default::default()
            };
            grad_check(&g, &[("x", &input)], &cfg).unwrap().max_rel_err
        };
        let (two, four) = (at(1e-3, Stencil::TwoPoint), at(1e-3, Stencil::FourPoint));
        assert!(four < two / 100.0, "{two} vs {four}");
        assert!(at(1e-4, Stencil::FourPoint) <= 1e-8);
    }

    #[test]
    fn kink_coordinates_are_excluded() {
        // bias sits exactly on the kink: the +eps and -eps runs straddle it
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", 1);
        let c = b.conv("c", x, 1, 1, 1, 0);
        let a = b.leaky_relu("a", c, 0.2);
        b.output("y", a);
        let mut g = b.finish();
        g.params.set("c.weight", Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        let input = Tensor::zeros([1, 1, 1, 1]);
        let r = grad_check(&g, &[("x", &input)], &GradCheckConfig::default()).unwrap();
        // the weight multiplies a zero input and never moves the kink
        assert_eq!((r.excluded, r.checked), (1, 1));
    }
}
