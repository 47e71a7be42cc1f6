use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_target, running_min, AttackConfig, AttackResult, Method, Reconstruction};
use crate::encoding::{sample_params, SpikeTrain};
use crate::error::{Error, Result};
use crate::model::Model;

const EPS: f64 = 1e-8;

/// Loss-weighted population average `Σ e^{−L_i} g_i / Σ e^{−L_i}`.
pub fn nes_gradient(losses: &[f64], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Usage("NES population is empty".into()));
    }
    if grads.len() != losses.len() {
        return Err(Error::Dimension(format!(
            "{} losses but {} gradients",
            losses.len(),
            grads.len()
        )));
    }
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension("population gradients differ in length".into()));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = losses.iter().map(|l| (-(l - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; n];
    for (w, g) in weights.iter().zip(grads) {
        let w = w / total;
        for (o, v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Negatives to zero, then rescale by the maximum if it exceeds one.
pub fn clamp_scale(x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 1.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}

struct Population {
    losses: Vec<f64>,
    confidences: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn evaluate(model: &Model, trains: &[SpikeTrain], y: usize, xi: f64) -> Result<Population> {
    let mut xs = Vec::with_capacity(trains.len() * model.spec.input_len());
    for t in trains {
        xs.extend(t.to_f64());
    }
    let (post, mut grads) = model.input_gradients(&xs, &vec![y; trains.len()])?;
    let n = model.spec.input_len() as f64;
    if xi > 0.0 {
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v += xi / n);
        }
    }
    let confidences: Vec<f64> = post.iter().map(|p| p[y]).collect();
    let losses = confidences
        .iter()
        .zip(trains)
        .map(|(c, t)| 1.0 - c + xi * t.density())
        .collect();
    Ok(Population {
        losses,
        confidences,
        grads,
    })
}

/// Optimises Bernoulli parameters `X_p` with NES-weighted surrogate
/// gradients, RMSProp scaling and momentum.
pub fn blv2_attack(model: &Model, cfg: &AttackConfig) -> Result<AttackResult> {
    check_target(model, cfg, true)?;
    let y = cfg.target;
    let steps = model.spec.steps;
    let n = model.spec.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xp = vec![cfg.init; n];
    let mut r = vec![0.0; n];
    let mut momentum = vec![0.0; n];
    let mut trace = Vec::new();
    let mut streak = 0;
    let mut last_best = f64::NAN;
    for _ in 0..cfg.iterations {
        let trains: Vec<SpikeTrain> = (0..cfg.population)
            .map(|_| sample_params(&xp, steps, &mut rng))
            .collect();
        let pop = evaluate(model, &trains, y, cfg.xi)?;
        let grad = nes_gradient(&pop.losses, &pop.grads)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::AttackNan(format!("non-finite BL-v2 gradient for class {y}")));
        }
        for i in 0..n {
            r[i] = cfg.rho * r[i] + (1.0 - cfg.rho) * grad[i] * grad[i];
            momentum[i] = cfg.beta * momentum[i] + grad[i];
            xp[i] -= cfg.eta / (r[i].sqrt() + EPS) * momentum[i];
        }
        xp = clamp_scale(&xp);
        trace.push(pop.losses.iter().copied().fold(f64::INFINITY, f64::min));
        last_best = pop.confidences.iter().copied().fold(0.0, f64::max);
        streak = if last_best >= cfg.stop_confidence { streak + 1 } else { 0 };
        if cfg.patience > 0 && streak >= cfg.patience {
            break;
        }
    }
    let samples: Vec<SpikeTrain> = (0..cfg.samples).map(|_| sample_params(&xp, steps, &mut rng)).collect();
    let confidence = if samples.is_empty() {
        f64::NAN
    } else {
        let mut xs = Vec::with_capacity(samples.len() * n);
        for s in &samples {
            xs.extend(s.to_f64());
        }
        let post = model.posteriors(&xs)?;
        post.iter().map(|p| p[y]).sum::<f64>() / post.len() as f64
    };
    if xp.iter().any(|v| !v.is_finite()) {
        return Err(Error::AttackNan(format!("non-finite X_p for class {y}")));
    }
    Ok(AttackResult {
        method: Method::Blv2,
        target: y,
        reconstruction: Reconstruction::Params(xp),
        best_trace: running_min(&trace),
        loss_trace: trace,
        confidence,
        final_best_confidence: last_best,
        spike_samples: samples,
        image_samples: vec![],
    })
}
