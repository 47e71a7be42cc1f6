use super::{check_target, running_min, AttackConfig, AttackResult, Method, Reconstruction};
use crate::error::{Error, Result};
use crate::model::Model;

/// Gradient descent on `1 − M_y(x)` from a black image, clamping pixels to
/// `[0, 1]` after every step. Returns the lowest-loss iterate.
pub fn mi_face(model: &Model, cfg: &AttackConfig) -> Result<AttackResult> {
    check_target(model, cfg, false)?;
    let y = cfg.target;
    let mut x = vec![0.0; model.spec.input_len()];
    let (post, grads) = model.input_gradients(&x, &[y])?;
    let mut conf = post[0][y];
    let mut grad = grads.into_iter().next().unwrap_or_default();
    let (mut best, mut best_conf) = (x.clone(), conf);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut streak = 0;
    for _ in 0..cfg.iterations {
        for (v, g) in x.iter_mut().zip(&grad) {
            *v = (*v - cfg.eta * g).clamp(0.0, 1.0);
        }
        let (post, grads) = model.input_gradients(&x, &[y])?;
        conf = post[0][y];
        grad = grads.into_iter().next().unwrap_or_default();
        if !conf.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::AttackNan(format!("non-finite MI-FACE state for class {y}")));
        }
        trace.push(1.0 - conf);
        if conf > best_conf {
            (best, best_conf) = (x.clone(), conf);
        }
        streak = if conf >= cfg.stop_confidence { streak + 1 } else { 0 };
        if cfg.patience > 0 && streak >= cfg.patience {
            break;
        }
    }
    Ok(AttackResult {
        method: Method::MiFace,
        target: y,
        reconstruction: Reconstruction::Image(best.clone()),
        best_trace: running_min(&trace),
        loss_trace: trace,
        confidence: best_conf,
        final_best_confidence: conf,
        spike_samples: vec![],
        image_samples: vec![best],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ModelSpec, Scale};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(rows: Vec<Vec<f64>>) -> Model {
        let mut s = ModelSpec::preset(ModelKind::AnnMlp, 3, 3, rows.len(), Scale::Desk);
        s.hidden = vec![];
        let c = rows.len();
        let w = Tensor::new(vec![c, 9], rows.concat()).unwrap();
        Model::from_params(s, vec![w, Tensor::zeros(&[c])]).unwrap()
    }

    #[test]
    fn recovers_weight_direction_of_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target: Vec<f64> = (0..9).map(|_| rng.gen_range(0.2..1.0)).collect();
        let mut rows = vec![target.clone()];
        for _ in 0..3 {
            rows.push((0..9).map(|_| rng.gen_range(-0.1..0.1)).collect());
        }
        let m = linear(rows);
        let cfg = AttackConfig {
            iterations: 30,
            eta: 0.02,
            patience: 0,
            ..AttackConfig::default()
        };
        let r = mi_face(&m, &cfg).unwrap();
        let Reconstruction::Image(x) = &r.reconstruction else { panic!() };
        let dot: f64 = x.iter().zip(&target).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = dot / (norm(x) * norm(&target));
        assert!(cos > 0.9, "{cos}");
    }

    #[test]
    fn best_so_far_is_monotone_and_pixels_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = (0..3).map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = linear(rows);
        let cfg = AttackConfig {
            iterations: 50,
            eta: 0.5,
            target: 2,
            patience: 0,
            ..AttackConfig::default()
        };
        let r = mi_face(&m, &cfg).unwrap();
        assert!(r.best_trace.windows(2).all(|w| w[1] <= w[0]));
        let Reconstruction::Image(x) = &r.reconstruction else { panic!() };
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spiking_target_is_rejected() {
        let s = ModelSpec::preset(ModelKind::SnnMlp, 3, 3, 2, Scale::Desk);
        let m = Model::zeroed(&s).unwrap();
        assert!(matches!(mi_face(&m, &AttackConfig::default()), Err(Error::Config(_))));
    }
}
