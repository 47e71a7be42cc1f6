use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_target, running_min, AttackConfig, AttackResult, Method, Reconstruction};
use crate::encoding::{sample_params, SpikeTrain};
use crate::error::{Error, Result};
use crate::model::Model;

fn check_shape(model: &Model, spikes: &SpikeTrain) -> Result<()> {
    if spikes.steps() != model.spec.steps || spikes.features() != model.spec.features() {
        return Err(Error::Dimension(format!(
            "spike train is {}x{}, model expects {}x{}",
            spikes.steps(),
            spikes.features(),
            model.spec.steps,
            model.spec.features()
        )));
    }
    Ok(())
}

/// Ternary update of `spikes` from a dense gradient.
fn quantized_update<R: Rng>(spikes: &SpikeTrain, grad: &[f64], rng: &mut R) -> SpikeTrain {
    let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut out = spikes.clone();
    if max == 0.0 {
        return out;
    }
    let f = spikes.features();
    for (i, &g) in grad.iter().enumerate() {
        if !rng.gen_bool((g.abs() / max).min(1.0)) {
            continue;
        }
        let s = i64::from(spikes.data()[i]) - g.signum() as i64;
        out.set(i / f, i % f, s >= 1);
    }
    out
}

/// Loss, target confidence and input gradient of `1 − M_y + P_ξ` for one train.
fn loss_and_grad(model: &Model, spikes: &SpikeTrain, y: usize, xi: f64) -> Result<(f64, f64, Vec<f64>)> {
    let x = spikes.to_f64();
    let (post, mut grads) = model.input_gradients(&x, &[y])?;
    let mut g = grads.remove(0);
    let n = g.len() as f64;
    if xi > 0.0 {
        g.iter_mut().for_each(|v| *v += xi / n);
    }
    let conf = post[0][y];
    Ok((1.0 - conf + xi * spikes.density(), conf, g))
}

/// One quantized-gradient step on a binary spike train.
///
/// Mask `G ~ Bernoulli(|g| / max|g|)`, ternary `t = G ⊙ sign(g)`, then
/// `s − t` clipped back to `{0, 1}`.
pub fn blv1_step<R: Rng>(model: &Model, spikes: &SpikeTrain, y: usize, xi: f64, rng: &mut R) -> Result<SpikeTrain> {
    check_shape(model, spikes)?;
    let (_, _, g) = loss_and_grad(model, spikes, y, xi)?;
    Ok(quantized_update(spikes, &g, rng))
}

/// Iterates [`blv1_step`] from a Bernoulli spike train and returns the
/// lowest-loss iterate.
pub fn blv1_attack(model: &Model, cfg: &AttackConfig) -> Result<AttackResult> {
    check_target(model, cfg, true)?;
    let y = cfg.target;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = vec![cfg.init; model.spec.features()];
    let mut cur = sample_params(
        &init.repeat(model.spec.steps),
        model.spec.steps,
        &mut rng,
    );
    let (mut loss, mut conf, mut grad) = loss_and_grad(model, &cur, y, cfg.xi)?;
    let (mut best, mut best_loss, mut best_conf) = (cur.clone(), loss, conf);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        cur = quantized_update(&cur, &grad, &mut rng);
        (loss, conf, grad) = loss_and_grad(model, &cur, y, cfg.xi)?;
        if !loss.is_finite() {
            return Err(Error::AttackNan(format!("non-finite BL-v1 loss for class {y}")));
        }
        trace.push(loss);
        if loss < best_loss {
            (best, best_loss, best_conf) = (cur.clone(), loss, conf);
        }
    }
    Ok(AttackResult {
        method: Method::Blv1,
        target: y,
        reconstruction: Reconstruction::Spikes(best.clone()),
        best_trace: running_min(&trace),
        loss_trace: trace,
        confidence: best_conf,
        final_best_confidence: conf,
        spike_samples: vec![best],
        image_samples: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelKind, ModelSpec, Scale};
    use proptest::prelude::*;

    fn target() -> Model {
        let mut s = ModelSpec::preset(ModelKind::SnnMlp, 4, 4, 3, Scale::Desk);
        s.hidden = vec![12];
        s.steps = 5;
        s.theta = 0.3;
        build_model(&s, 21).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let s = SpikeTrain::new(2, 3, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(quantized_update(&s, &[0.0; 6], &mut rng), s);
        let m = Model::zeroed(&target().spec).unwrap();
        let x = SpikeTrain::zeros(5, 16);
        assert_eq!(blv1_step(&m, &x, 1, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn overflow_is_clipped() {
        // Full-magnitude gradients always fire the mask.
        let s = SpikeTrain::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = quantized_update(&s, &[-1.0, 1.0, 1.0, -1.0], &mut rng);
        // 1 − (−1) = 2 → 1; 0 − 1 = −1 → 0; 1 − 1 = 0; 0 + 1 = 1.
        assert_eq!(out.data(), &[1, 0, 0, 1]);
    }

    #[test]
    fn mask_probability_tracks_magnitude() {
        let s = SpikeTrain::new(1, 2, vec![1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 20_000;
        let flips = (0..trials)
            .filter(|_| quantized_update(&s, &[1.0, 0.25], &mut rng).get(0, 1) == 0)
            .count();
        let rate = flips as f64 / trials as f64;
        assert!((rate - 0.25).abs() < 0.015, "{rate}");
    }

    #[test]
    fn zero_cap_returns_initialization() {
        let m = target();
        let cfg = AttackConfig {
            iterations: 0,
            seed: 5,
            ..AttackConfig::default()
        };
        let r = blv1_attack(&m, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = sample_params(&vec![0.5; 80], 5, &mut rng);
        assert_eq!(r.reconstruction, Reconstruction::Spikes(init));
        assert_eq!(r.iterations(), 0);
    }

    #[test]
    fn attack_improves_and_tracks_best() {
        let m = target();
        let cfg = AttackConfig {
            iterations: 60,
            target: 2,
            seed: 1,
            ..AttackConfig::default()
        };
        let r = blv1_attack(&m, &cfg).unwrap();
        assert_eq!(r.iterations(), 60);
        assert!(r.best_trace.windows(2).all(|w| w[1] <= w[0]));
        let Reconstruction::Spikes(best) = &r.reconstruction else { panic!() };
        let l = super::super::identity_loss(&m, &best.to_f64(), 2, 0.0).unwrap();
        assert!((1.0 - l - r.confidence).abs() < 1e-12);
    }

    #[test]
    fn ann_target_is_rejected() {
        let s = ModelSpec::preset(ModelKind::AnnMlp, 4, 4, 3, Scale::Desk);
        let m = build_model(&s, 0).unwrap();
        assert!(matches!(blv1_attack(&m, &AttackConfig::default()), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn update_stays_binary(
            bits in proptest::collection::vec(0u8..=1, 12),
            grad in proptest::collection::vec(-5.0f64..5.0, 12),
            seed in any::<u64>(),
        ) {
            let s = SpikeTrain::new(3, 4, bits).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = quantized_update(&s, &grad, &mut rng);
            prop_assert!(out.data().iter().all(|&b| b <= 1));
            prop_assert_eq!(out.steps(), 3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn step_on_model_stays_binary(bits in proptest::collection::vec(0u8..=1, 80), seed in any::<u64>()) {
            let m = target();
            let s = SpikeTrain::new(5, 16, bits).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = blv1_step(&m, &s, (seed % 3) as usize, 0.1, &mut rng).unwrap();
            prop_assert!(out.data().iter().all(|&b| b <= 1));
        }
    }
}
