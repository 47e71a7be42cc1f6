//! Model-inversion attacks.

mod blv1;
mod blv2;
mod miface;

pub use blv1::{blv1_attack, blv1_step};
pub use blv2::{blv2_attack, clamp_scale, nes_gradient};
pub use miface::mi_face;

use std::fmt;

use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MiFace,
    Blv1,
    Blv2,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "miface" => Ok(Self::MiFace),
            "blv1" => Ok(Self::Blv1),
            "blv2" => Ok(Self::Blv2),
            _ => Err(Error::Config(format!("unknown attack method `{s}`"))),
        }
    }

    pub fn needs_spiking_target(self) -> bool {
        !matches!(self, Self::MiFace)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MiFace => "miface",
            Self::Blv1 => "blv1",
            Self::Blv2 => "blv2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub target: usize,
    /// Iteration cap.
    pub iterations: usize,
    /// NES population size `K`.
    pub population: usize,
    /// Sparsity strength `ξ`.
    pub xi: f64,
    /// RMSProp decay `ρ`.
    pub rho: f64,
    /// Momentum coefficient `β`.
    pub beta: f64,
    /// Base learning rate `η`.
    pub eta: f64,
    pub seed: u64,
    /// Spike trains drawn from the final `X_p`.
    pub samples: usize,
    /// Starting Bernoulli probability (BL-v2 `X_p`, BL-v1 initial spikes).
    pub init: f64,
    /// Early stop once the best population confidence stays at or above
    /// `stop_confidence` for `patience` consecutive iterations.
    pub stop_confidence: f64,
    pub patience: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: 0,
            iterations: 2000,
            population: 8,
            xi: 0.2,
            rho: 0.9,
            beta: 0.9,
            eta: 0.005,
            seed: 0,
            samples: 20,
            init: 0.5,
            stop_confidence: 0.99,
            patience: 20,
        }
    }
}

impl AttackConfig {
    /// Defaults with the step size tuned per method.
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::MiFace => Self {
                eta: 0.1,
                xi: 0.0,
                ..Self::default()
            },
            Method::Blv1 | Method::Blv2 => Self::default(),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.target >= classes {
            return Err(Error::Config(format!(
                "target class {} out of range for {classes} classes",
                self.target
            )));
        }
        if self.population < 1 {
            return fail("population size K must be at least 1");
        }
        if !(self.xi >= 0.0) {
            return fail("sparsity strength must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rho) || !(0.0..1.0).contains(&self.beta) {
            return fail("rho and beta must lie in [0, 1)");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return fail("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.init) {
            return fail("initial probability must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reconstruction {
    /// Final Bernoulli parameters `X_p`, `[T × F]`.
    Params(Vec<f64>),
    Spikes(SpikeTrain),
    /// Pixels in `[0, 1]`.
    Image(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub method: Method,
    pub target: usize,
    pub reconstruction: Reconstruction,
    /// One entry per executed iteration: the best loss seen in that iteration.
    pub loss_trace: Vec<f64>,
    /// Running minimum of `loss_trace`.
    pub best_trace: Vec<f64>,
    /// Target-model confidence for the attacked class: mean over emitted
    /// samples for BL-v2, of the returned iterate otherwise.
    pub confidence: f64,
    /// Best single-sample target confidence in the final iteration.
    pub final_best_confidence: f64,
    pub spike_samples: Vec<SpikeTrain>,
    pub image_samples: Vec<Vec<f64>>,
}

impl AttackResult {
    pub fn iterations(&self) -> usize {
        self.loss_trace.len()
    }

    pub fn is_finite(&self) -> bool {
        let rec = match &self.reconstruction {
            Reconstruction::Params(v) | Reconstruction::Image(v) => v.iter().all(|x| x.is_finite()),
            Reconstruction::Spikes(_) => true,
        };
        rec && self.confidence.is_finite() && self.loss_trace.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn running_min(trace: &[f64]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::INFINITY, |best, &v| {
            *best = best.min(v);
            Some(*best)
        })
        .collect()
}

/// `ξ · (#spikes / #voxels)`.
pub fn sparsity_penalty(spikes: &SpikeTrain, xi: f64) -> f64 {
    if xi == 0.0 {
        return 0.0;
    }
    xi * spikes.density()
}

/// `1 − M_y(input) + P_ξ(input)`; the penalty applies only to spiking models.
pub fn identity_loss(model: &Model, input: &[f64], y: usize, xi: f64) -> Result<f64> {
    if y >= model.spec.classes {
        return Err(Error::Index(format!("class {y} out of range")));
    }
    let p = model.predict(input)?;
    let penalty = if model.is_spiking() { xi * density(input) } else { 0.0 };
    Ok(1.0 - p[y] + penalty)
}

pub(crate) fn density(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub(crate) fn check_target(model: &Model, cfg: &AttackConfig, spiking: bool) -> Result<()> {
    if model.is_spiking() != spiking {
        return Err(Error::Config(format!(
            "this attack needs a {} target, got {}",
            if spiking { "spiking" } else { "non-spiking" },
            model.spec.kind
        )));
    }
    cfg.validate(model.spec.classes)
}
