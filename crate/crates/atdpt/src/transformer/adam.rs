//! Adam optimizer with bias correction, operating on the flat tensor views
//! exposed by `ModelParams`.

use super::ModelParams;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second-moment accumulators, one pair per parameter tensor, plus the
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: ModelParams::zeros_like(params.cfg),
            v: ModelParams::zeros_like(params.cfg),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. If any gradient entry is non-finite the whole
/// update is skipped and `false` is returned, leaving the parameters and
/// moments untouched.
pub fn optimizer_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> bool {
    if !grads.all_finite() {
        return false;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m_tensors.iter_mut().zip(v_tensors.iter_mut()))
    {
        for i in 0..p.len() {
            let grad = g[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad * grad;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::super::{forward, ModelParams, TransformerConfig};
    use super::*;
    use crate::rng::substream;

    fn cfg() -> TransformerConfig {
        TransformerConfig::new(1, 1, 4, 3, 2, 2)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut rng = substream(9600, &[]);
        let mut params = ModelParams::init(cfg(), &mut rng);
        let before = params.clone();
        let grads = ModelParams::zeros_like(cfg());
        let mut state = AdamState::new(&params);
        assert!(optimizer_step(&mut params, &grads, &mut state, 0.1));
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction, the first update for any gradient value g is
        // lr * g / (|g| + eps') ~= lr * sign(g).
        let mut rng = substream(9610, &[]);
        let mut params = ModelParams::init(cfg(), &mut rng);
        let before = params.clone();
        let mut grads = ModelParams::zeros_like(cfg());
        for t in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v = 1.0;
            }
        }
        let mut state = AdamState::new(&params);
        assert!(optimizer_step(&mut params, &grads, &mut state, 0.01));
        assert_eq!(state.step_count(), 1);
        for (a, b) in params.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((y - x) - 0.01).abs() < 1e-8, "step was {}", y - x);
            }
        }
    }

    #[test]
    fn non_finite_gradients_skip_the_step() {
        let mut rng = substream(9620, &[]);
        let mut params = ModelParams::init(cfg(), &mut rng);
        let before = params.clone();
        let mut grads = ModelParams::zeros_like(cfg());
        grads.tensors_mut()[0][0] = f64::NAN;
        let mut state = AdamState::new(&params);
        assert!(!optimizer_step(&mut params, &grads, &mut state, 0.1));
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn minimizes_convex_quadratic() {
        // f(x) = 1.5 x0^2 + 0.5 x1^2 embedded in the token bias of a tiny
        // model; everything else gets zero gradients.
        let mut rng = substream(9630, &[]);
        let mut params = ModelParams::init(cfg(), &mut rng);
        params.tok_b = vec![5.0, -3.0, 0.0, 0.0];
        let mut state = AdamState::new(&params);
        let mut grad_norm = f64::MAX;
        for _ in 0..5000 {
            let mut grads = ModelParams::zeros_like(cfg());
            grads.tok_b[0] = 3.0 * params.tok_b[0];
            grads.tok_b[1] = params.tok_b[1];
            grad_norm = (grads.tok_b[0].powi(2) + grads.tok_b[1].powi(2)).sqrt();
            if grad_norm < 1e-6 {
                break;
            }
            assert!(optimizer_step(&mut params, &grads, &mut state, 0.01));
        }
        assert!(grad_norm < 1e-6, "final gradient norm {grad_norm}");
    }

    #[test]
    fn updated_model_stays_finite_under_training_noise() {
        let mut rng = substream(9640, &[]);
        let c = cfg();
        let mut params = ModelParams::init(c, &mut rng);
        let mut state = AdamState::new(&params);
        let tokens = vec![0.3, -0.7, 0.1, 0.9];
        for i in 0..50 {
            let mut grads = ModelParams::zeros_like(c);
            for t in grads.tensors_mut() {
                for (j, v) in t.iter_mut().enumerate() {
                    *v = ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5;
                }
            }
            assert!(optimizer_step(&mut params, &grads, &mut state, 0.01));
        }
        assert!(params.all_finite());
        assert!(forward(&params, &tokens, 2).is_ok());
    }
}
