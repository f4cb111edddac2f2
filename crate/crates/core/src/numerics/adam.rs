use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards. Padding rows are never touched. Fails without
/// modifying anything if any gradient is non-finite.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    let (names, values, grads, m1, m2, padding, step) = store.adam_parts();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFiniteGradient(names[i].clone()));
    }
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..values.len() {
        let skip = if padding[i] { values[i].last_dim() } else { 0 };
        let g = grads[i].data();
        let (m, v) = (m1[i].data_mut(), m2[i].data_mut());
        let theta = values[i].data_mut();
        for k in skip..theta.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn scalar_store(theta: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("theta", Tensor::vector(vec![theta]));
        s
    }

    fn set_grad(store: &mut ParameterStore, g: f64) {
        let mut grads = crate::numerics::params::Gradients::new(1);
        let id = store.id("theta").unwrap();
        grads.slot(id, &[1]).data_mut()[0] = g;
        store.accumulate(&grads);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.7, -0.02] {
            let mut s = scalar_store(0.5);
            set_grad(&mut s, g);
            adam_step(&mut s, &AdamConfig::default()).unwrap();
            let moved = s.value(s.id("theta").unwrap()).item() - 0.5;
            assert!((moved + 0.001 * g.signum()).abs() < 1e-8, "moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.25);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(s.id("theta").unwrap()).item(), 0.25);
    }

    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        // Independent scalar Adam recurrence on f(θ) = θ².
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * th;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            th -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }

        let mut s = scalar_store(1.0);
        let id = s.id("theta").unwrap();
        for _ in 0..200 {
            let g = 2.0 * s.value(id).item();
            set_grad(&mut s, g);
            adam_step(&mut s, &cfg).unwrap();
        }
        let got = s.value(id).item();
        assert_eq!(got, th);
        assert!(got.abs() < 0.05, "theta = {got}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, f64::NAN);
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(s.value(s.id("theta").unwrap()).item(), 1.0);
    }

    #[test]
    fn padding_row_is_frozen() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        let id = s.add_padded_table("emb", 3, 2, &mut rng);
        let mut grads = crate::numerics::params::Gradients::new(1);
        grads.slot(id, &[3, 2]).fill(1.0);
        s.accumulate(&grads);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(&s.value(id).data()[..2], &[0.0, 0.0]);
    }
}
