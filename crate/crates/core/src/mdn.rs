//! Mixture-density output head over 2D coordinates.
//!
//! A raw output vector of length `5K` is laid out as `K` weight logits, then
//! `K` component means as `(x, y)` pairs, then `K` log-scales as pairs. Each
//! component is an axis-aligned Gaussian.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Raw outputs per mixture component: one weight logit, two means, two log-scales.
pub const PARAMS_PER_COMPONENT: usize = 5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Logits further than this below the largest are raised to it, so every
/// weight stays strictly inside (0, 1) in `f64`. The affected weights are
/// below 1e-13.
const LOGIT_SPREAD: f64 = 30.0;

/// Log-scales are clamped to this magnitude so `exp` stays finite and positive.
const MAX_LOG_SCALE: f64 = 300.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
}

/// How a point prediction is read off a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointMode {
    /// Mean of the heaviest component, lowest index on ties.
    Mle,
    /// Weighted average of all component means.
    MixtureMean,
}

impl FromStr for PointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(PointMode::Mle),
            "mixture-mean" | "mixture_mean" | "mean" => Ok(PointMode::MixtureMean),
            other => Err(Error::Config(format!("unknown prediction mode `{other}`"))),
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Splits one raw output vector of length `5K` into mixture parameters.
pub fn split_theta(raw: &[f64]) -> Result<MixtureParams> {
    if raw.is_empty() || raw.len() % PARAMS_PER_COMPONENT != 0 {
        return Err(Error::BadShape {
            op: "split_theta",
            detail: format!("raw length {} is not a positive multiple of 5", raw.len()),
        });
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "split_theta",
            detail: format!("non-finite raw value {bad}"),
        });
    }
    let k = raw.len() / PARAMS_PER_COMPONENT;
    let top = raw[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logits: Vec<f64> = raw[..k].iter().map(|l| l.max(top - LOGIT_SPREAD)).collect();
    let pi = softmax(&logits);
    let mu = raw[k..3 * k].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let scale = |v: f64| v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let sigma = raw[3 * k..]
        .chunks_exact(2)
        .map(|c| [scale(c[0]), scale(c[1])])
        .collect();
    Ok(MixtureParams { pi, mu, sigma })
}

/// Splits every row of a `[B × 5K]` output.
pub fn split_batch(raw: &Tensor) -> Result<Vec<MixtureParams>> {
    if raw.rank() != 2 {
        return Err(Error::BadShape {
            op: "split_theta",
            detail: format!("expected [B × 5K], got {:?}", raw.shape()),
        });
    }
    (0..raw.shape()[0]).map(|r| split_theta(raw.row(r))).collect()
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::BadShape {
                op: "mixture",
                detail: format!("{} weights, {} means, {} scales", k, self.mu.len(), self.sigma.len()),
            });
        }
        if self.sigma.iter().flatten().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain {
                op: "mixture",
                detail: "scales must be positive and finite".into(),
            });
        }
        if self.pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain {
                op: "mixture",
                detail: "weights must be non-negative".into(),
            });
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain {
                op: "mixture",
                detail: format!("weights sum to {total}"),
            });
        }
        Ok(())
    }

    /// Per-component log of `π_k · N(y; μ_k, diag σ_k²)`.
    fn component_log_terms(&self, y: [f64; 2]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let mut acc = self.pi[k].ln();
                for d in 0..2 {
                    let z = (y[d] - self.mu[k][d]) / self.sigma[k][d];
                    acc += -0.5 * z * z - self.sigma[k][d].ln() - HALF_LN_2PI;
                }
                acc
            })
            .collect()
    }

    /// Negative log-likelihood of `y` under the mixture.
    pub fn nll(&self, y: [f64; 2]) -> Result<f64> {
        self.validate()?;
        Ok(-log_sum_exp(&self.component_log_terms(y)))
    }

    /// Posterior component responsibilities for `y`.
    pub fn responsibilities(&self, y: [f64; 2]) -> Vec<f64> {
        softmax(&self.component_log_terms(y))
    }

    /// `Σ_k π_k / (2π σ_k,1 σ_k,2)`: the density can never exceed this.
    pub fn density_upper_bound(&self) -> f64 {
        self.pi
            .iter()
            .zip(&self.sigma)
            .map(|(p, s)| p / (2.0 * PI * s[0] * s[1]))
            .sum()
    }

    /// Index of the heaviest component, lowest index on ties.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for k in 1..self.k() {
            if self.pi[k] > self.pi[best] {
                best = k;
            }
        }
        best
    }

    pub fn mixture_mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (p, mu) in self.pi.iter().zip(&self.mu) {
            m[0] += p * mu[0];
            m[1] += p * mu[1];
        }
        m
    }

    pub fn predict(&self, mode: PointMode) -> [f64; 2] {
        match mode {
            PointMode::Mle => self.mu[self.dominant()],
            PointMode::MixtureMean => self.mixture_mean(),
        }
    }

    /// Draws a component by inverse CDF over the weights, then a point from it.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // rounding can leave the cumulative sum a hair under 1
        self.k() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let k = self.sample_component(rng);
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [
            self.mu[k][0] + self.sigma[k][0] * z0,
            self.mu[k][1] + self.sigma[k][1] * z1,
        ]
    }

    /// Inverse of [`split_theta`]: the raw vector that reproduces these parameters.
    pub fn to_raw(&self) -> Vec<f64> {
        let mut raw: Vec<f64> = self.pi.iter().map(|p| p.ln()).collect();
        raw.extend(self.mu.iter().flatten());
        raw.extend(self.sigma.iter().flatten().map(|s| s.ln()));
        raw
    }
}

/// Mean negative log-likelihood of `targets[B × 2]` under the mixtures encoded
/// by `raw[B × 5K]`, built on the graph so it can be differentiated.
pub fn mixture_nll(g: &mut Graph, raw: Var, targets: &Tensor) -> Result<Var> {
    let shape = g.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] % PARAMS_PER_COMPONENT != 0 {
        return Err(Error::BadShape {
            op: "mixture_nll",
            detail: format!("expected [B × 5K], got {shape:?}"),
        });
    }
    let (batch, k) = (shape[0], shape[1] / PARAMS_PER_COMPONENT);
    if targets.shape() != [batch, 2] {
        return Err(Error::Shape {
            op: "mixture_nll",
            lhs: vec![batch, 2],
            rhs: targets.shape().to_vec(),
        });
    }
    let logits = g.narrow(raw, 1, 0, k)?;
    let mu = g.narrow(raw, 1, k, 2 * k)?;
    let log_sigma = g.narrow(raw, 1, 3 * k, 2 * k)?;

    // targets repeated once per component, matching the (x, y) pair layout of mu
    let mut tiled = Vec::with_capacity(batch * 2 * k);
    for r in 0..batch {
        for _ in 0..k {
            tiled.extend_from_slice(targets.row(r));
        }
    }
    let y = g.constant(Tensor::new(vec![batch, 2 * k], tiled)?);

    let diff = g.sub(y, mu)?;
    let neg_ls = g.neg(log_sigma)?;
    let inv_sigma = g.exp(neg_ls)?;
    let z = g.mul(diff, inv_sigma)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, -0.5)?;
    let per_dim = g.sub(half, log_sigma)?;
    let per_dim = g.shift(per_dim, -HALF_LN_2PI)?;
    let per_dim = g.reshape(per_dim, &[batch, k, 2])?;
    let comp_ll = g.reduce(crate::graph::ReduceKind::Sum, per_dim, Some(2))?;

    let log_pi = g.log_softmax(logits, 1)?;
    let joint = g.add(log_pi, comp_ll)?;
    let ll = g.logsumexp(joint, 1)?;
    let mean_ll = g.mean(ll)?;
    g.neg(mean_ll)
}
