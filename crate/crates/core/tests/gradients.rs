mod common;

use common::{random_matrix, GradientCase};
use dccd::linalg::Matrix;
use dccd::net::{NetworkStack, StackSpec, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_objective_matches_central_differences() {
    for seed in 0..60 {
        let e = GradientCase::new(seed).max_relative_error(1e-4);
        assert!(e < 1e-4, "seed {seed}: {e:.2e}");
    }
}

#[test]
fn difference_error_shrinks_quadratically() {
    // a correct gradient leaves only the O(h²) truncation error
    for seed in 0..200 {
        let fine = GradientCase::new(seed).max_relative_error(1e-5);
        assert!(fine < 1e-5, "seed {seed}: {fine:.2e}");
    }
}

fn two_layer(rng: &mut ChaCha8Rng) -> NetworkStack {
    let spec = StackSpec {
        input_dim: 4,
        encoder_hidden: vec![5],
        channels: 2,
        positions: 3,
        mapper_hidden: vec![],
        embed_dim: 3,
        classes: 3,
        domains: 2,
        ..StackSpec::default()
    };
    NetworkStack::new(spec, rng).unwrap()
}

/// Classifier loss on the plain path, with a central-difference check at
/// the tighter 1e-5 tolerance.
#[test]
fn two_layer_classifier_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let stack = two_layer(&mut rng);
        let x = random_matrix(&mut rng, 4, 4);
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let loss_of = |s: &NetworkStack| {
            let mut tape = Tape::new();
            let net = s.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let z = net.encode(&mut tape, xv).and_then(|f| net.map(&mut tape, f)).unwrap();
            let logits = net.classify(&mut tape, z).unwrap();
            let loss = tape.cross_entropy(logits, &y).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), net.param_grads(&g))
        };
        let (_, grads) = loss_of(&stack);
        let h = 1e-4;
        for (p, g) in grads.iter().enumerate() {
            for e in 0..g.as_slice().len() {
                let mut plus = stack.clone();
                plus.params_mut()[p].as_mut_slice()[e] += h;
                let mut minus = stack.clone();
                minus.params_mut()[p].as_mut_slice()[e] -= h;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let a = g.as_slice()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-5, "param {p}[{e}]: {a} vs {numeric}");
            }
        }
    }
}

proptest! {
    #[test]
    fn reversal_is_negated_identity_gradient(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 2);
        let grad_of = |reverse: bool| -> Matrix {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let through = if reverse { tape.grad_reverse(xv, lambda) } else { xv };
            let out = tape.matmul(through, wv).unwrap();
            let t = tape.tanh(out);
            let loss = tape.cross_entropy(t, &[0, 1, 1]).unwrap();
            tape.backward(loss).unwrap().get(xv).unwrap().clone()
        };
        let plain = grad_of(false);
        let reversed = grad_of(true);
        for (r, p) in reversed.as_slice().iter().zip(plain.as_slice()) {
            prop_assert!((r + lambda * p).abs() < 1e-12);
        }
    }
}
