use crate::error::{Error, Result};

use super::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name} at index {i}"
            )));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
            v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            stage3_channels: 2,
            stage4_channels: 2,
            film_hidden: 2,
            head_channels: 2,
            max_points: 4,
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = ModelParams::init(&tiny(), 1);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ModelParams::init(&tiny(), 2);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.output.bias.data[0] = 0.37;
        g.head.weight.data[3] = -2.5;
        let mut s = AdamState::new(&p);
        let lr = 1e-4;
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        assert!((p.output.bias.data[0] - (before.output.bias.data[0] - lr)).abs() < lr * 1e-6);
        assert!((p.head.weight.data[3] - (before.head.weight.data[3] + lr)).abs() < lr * 1e-6);
    }

    #[test]
    fn steps_are_deterministic() {
        let p0 = ModelParams::init(&tiny(), 3);
        let mut g = p0.zeros_like();
        g.stage3
            .weight
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin());
        let s0 = AdamState::new(&p0);
        let (mut a, mut sa) = (p0.clone(), s0.clone());
        let (mut b, mut sb) = (p0.clone(), s0.clone());
        adam_step(&mut a, &g, &mut sa, 1e-2).unwrap();
        adam_step(&mut b, &g, &mut sb, 1e-2).unwrap();
        assert_eq!((a, sa), (b, sb));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = ModelParams::init(&tiny(), 4);
        let mut g = p.zeros_like();
        g.film4.out.weight.data[1] = f64::NAN;
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut s, 1e-3) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("film4.out.weight")),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert_eq!(s.step, 0);
    }
}
