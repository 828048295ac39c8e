use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::stack::NetworkStack;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← m·v − lr·(g + wd·θ)`, then `θ ← θ + v`.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl OptimState {
    pub fn new(stack: &NetworkStack, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("optimizer momentum {momentum} outside [0, 1)")));
        }
        // zero is allowed so a frozen run can be expressed
        if !(learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be >= 0")));
        }
        let velocity = stack
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }
}

pub fn sgd_step(stack: &mut NetworkStack, state: &mut OptimState, grads: &[Matrix]) -> Result<()> {
    let mut params = stack.params_mut();
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape("sgd_step", params.len(), grads.len()));
    }
    let (lr, m, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((theta, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if theta.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{:?}", theta.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        let theta = theta.as_mut_slice();
        for ((t, &gi), vi) in theta.iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            *vi = m * *vi - lr * (gi + wd * *t);
            *t += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Dense, StackSpec};

    /// A stack whose only nonempty parameter is the 1x1 head weight.
    fn scalar_stack(theta: f64) -> NetworkStack {
        let spec = StackSpec {
            input_dim: 1,
            encoder_hidden: vec![],
            channels: 1,
            positions: 1,
            mapper_hidden: vec![],
            embed_dim: 1,
            classes: 1,
            domains: 1,
            ..StackSpec::default()
        };
        let layer = |w: f64| Dense {
            weight: Matrix::from_rows(&[[w]]),
            bias: Matrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        NetworkStack::from_layers(spec, vec![layer(0.0)], vec![], layer(theta), layer(0.0), vec![layer(0.0)]).unwrap()
    }

    fn head_grads(stack: &NetworkStack, g: f64) -> Vec<Matrix> {
        // params: encoder w,b; head w,b; classifier w,b; discriminator w,b
        let mut grads: Vec<Matrix> = stack.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        grads[2] = Matrix::from_rows(&[[g]]);
        grads
    }

    #[test]
    fn quadratic_step() {
        // loss θ²/2 has gradient θ
        let mut stack = scalar_stack(1.0);
        let mut state = OptimState::new(&stack, 0.1, 0.0, 0.0).unwrap();
        let grads = head_grads(&stack, 1.0);
        sgd_step(&mut stack, &mut state, &grads).unwrap();
        assert!((stack.head().weight[(0, 0)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_and_decay_law() {
        let (lr, m, wd) = (0.05, 0.9, 5e-4);
        let mut stack = scalar_stack(2.0);
        let mut state = OptimState::new(&stack, lr, m, wd).unwrap();
        let (mut theta, mut v) = (2.0, 0.0);
        for g in [0.3, -1.2, 0.7] {
            let grads = head_grads(&stack, g);
            sgd_step(&mut stack, &mut state, &grads).unwrap();
            v = m * v - lr * (g + wd * theta);
            theta += v;
            assert_eq!(stack.head().weight[(0, 0)], theta);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut stack = scalar_stack(1.5);
        let before = stack.clone();
        let mut state = OptimState::new(&stack, 0.1, 0.9, 0.0).unwrap();
        let grads = head_grads(&stack, 0.0);
        sgd_step(&mut stack, &mut state, &grads).unwrap();
        assert_eq!(stack, before);
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        let mut stack = scalar_stack(1.0);
        assert!(OptimState::new(&stack, 0.1, 1.0, 0.0).is_err());
        assert!(OptimState::new(&stack, -0.1, 0.5, 0.0).is_err());
        assert!(OptimState::new(&stack, 0.1, 0.5, -1.0).is_err());
        let mut state = OptimState::new(&stack, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(sgd_step(&mut stack, &mut state, &[]).unwrap_err().kind(), "shape_mismatch");
    }
}
