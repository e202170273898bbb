//! Central finite-difference gradient checking.
//!
//! Rebuilds the graph from scratch for every perturbed evaluation, so the
//! numerical side never touches the reverse pass it is checking.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub coords: Option<usize>,
    /// Random directional-derivative probes over all inputs jointly.
    pub directions: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            coords: None,
            directions: 2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.probes += 1;
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

impl GradCheck {
    /// Compares reverse-mode gradients of the scalar `f(inputs)` with central
    /// differences.
    pub fn run<F, R>(&self, f: F, inputs: &[Tensor], rng: &mut R) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
        R: Rng,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let mut grads = g.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();

        let mut report = GradReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.len();
            let picks: Vec<usize> = match self.coords {
                Some(c) if c < n => (0..c).map(|_| rng.gen_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            for j in picks {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let up = eval(&f, &work)?;
                work[i].data_mut()[j] = orig - self.eps;
                let down = eval(&f, &work)?;
                work[i].data_mut()[j] = orig;
                report.record(analytic[i].data()[j], (up - down) / (2.0 * self.eps));
            }
        }

        for _ in 0..self.directions {
            let dirs: Vec<Vec<f64>> = inputs
                .iter()
                .map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let shifted = |sign: f64| -> Vec<Tensor> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(t, d)| {
                        let data = t.data().iter().zip(d).map(|(x, dx)| x + sign * self.eps * dx).collect();
                        Tensor::new(t.shape().to_vec(), data).unwrap()
                    })
                    .collect()
            };
            let up = eval(&f, &shifted(1.0))?;
            let down = eval(&f, &shifted(-1.0))?;
            let directional: f64 = analytic
                .iter()
                .zip(&dirs)
                .map(|(a, d)| a.data().iter().zip(d).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            report.record(directional, (up - down) / (2.0 * self.eps));
        }
        Ok(report)
    }
}
