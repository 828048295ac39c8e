//! Domain-intervention effect on embeddings and cross-domain marginal match.

use serde::Serialize;

use crate::dccd::{intervention_embeddings, DomainStyleBank};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::NetworkStack;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AteReport {
    /// Mean of `‖z(do(d=i)) − z(do(d=j))‖₂` over probes and ordered pairs `i ≠ j`.
    pub ate_norm: f64,
    /// `pairs[i][j]`: mean displacement norm between interventions `i` and `j`.
    pub pairs: Vec<Vec<f64>>,
    pub probes: usize,
}

pub fn ate_from_interventions(per_domain: &[Matrix]) -> Result<AteReport> {
    let k = per_domain.len();
    let Some(first) = per_domain.first() else {
        return Err(Error::EmptyInput("ate interventions"));
    };
    let n = first.rows();
    if n == 0 {
        return Err(Error::EmptyInput("ate probe set"));
    }
    if let Some(z) = per_domain.iter().find(|z| z.shape() != first.shape()) {
        return Err(Error::shape("ate interventions", format!("{:?}", first.shape()), format!("{:?}", z.shape())));
    }
    let mut pairs = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let mean = (0..n)
                .map(|r| {
                    let (a, b) = (per_domain[i].row(r), per_domain[j].row(r));
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                })
                .sum::<f64>()
                / n as f64;
            pairs[i][j] = mean;
            pairs[j][i] = mean;
            total += 2.0 * mean;
        }
    }
    let ordered = k * k.saturating_sub(1);
    Ok(AteReport {
        ate_norm: if ordered == 0 { 0.0 } else { total / ordered as f64 },
        pairs,
        probes: n,
    })
}

/// ATE of the domain intervention on `z` over a probe set.
pub fn estimate_ate(stack: &NetworkStack, bank: &DomainStyleBank, probe: &Matrix, epsilon: f64) -> Result<AteReport> {
    if probe.rows() == 0 {
        return Err(Error::EmptyInput("ate probe set"));
    }
    ate_from_interventions(&intervention_embeddings(stack, probe, bank, epsilon)?)
}

fn mean_pairwise_distance(a: &Matrix, b: &Matrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            sum += a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    sum / (a.rows() * b.rows()) as f64
}

/// V-statistic energy distance `2E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖`.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> f64 {
    2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) - mean_pairwise_distance(b, b)
}

/// Mean energy distance over all unordered pairs of domains.
pub fn marginal_match(embeddings_by_domain: &[Matrix]) -> Result<f64> {
    if embeddings_by_domain.len() < 2 {
        return Err(Error::Config("marginal_match needs at least two domains".into()));
    }
    let dim = embeddings_by_domain[0].cols();
    for z in embeddings_by_domain {
        if z.rows() < 2 {
            return Err(Error::EmptyInput("marginal_match needs two samples per domain"));
        }
        if z.cols() != dim {
            return Err(Error::shape("marginal_match", dim, z.cols()));
        }
    }
    let k = embeddings_by_domain.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += energy_distance(&embeddings_by_domain[i], &embeddings_by_domain[j]);
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Dense, StackSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Identity encoder to C=2, S=3 and a pooled identity head: `z` is the
    /// channel mean of the colored map, i.e. the bank mean.
    fn linear_stack(domains: usize) -> NetworkStack {
        let spec = StackSpec {
            input_dim: 6,
            encoder_hidden: vec![],
            channels: 2,
            positions: 3,
            mapper_hidden: vec![],
            embed_dim: 2,
            classes: 2,
            domains,
            ..StackSpec::default()
        };
        let identity = |n| Dense {
            weight: Matrix::identity(n),
            bias: Matrix::zeros(1, n),
            activation: Activation::Identity,
        };
        NetworkStack::from_layers(
            spec,
            vec![identity(6)],
            vec![],
            identity(2),
            Dense::zeros(2, 2, Activation::Identity),
            vec![Dense::zeros(2, domains, Activation::Identity)],
        )
        .unwrap()
    }

    fn bank(styles: &[(Matrix, Vec<f64>)]) -> DomainStyleBank {
        let mut bank = DomainStyleBank::new(styles.len(), styles[0].1.len(), 0.3).unwrap();
        for (j, (v, u)) in styles.iter().enumerate() {
            bank.set_domain(j, v.clone(), u.clone()).unwrap();
        }
        bank
    }

    #[test]
    fn identical_banks_have_zero_ate() {
        let stack = linear_stack(3);
        let style = (Matrix::from_diag(&[2.0, 1.0]), vec![0.5, -0.5]);
        let bank = bank(&[style.clone(), style.clone(), style]);
        let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(0), 4, 6);
        let r = estimate_ate(&stack, &bank, &x, 1e-5).unwrap();
        assert!(r.ate_norm.abs() < 1e-12);
    }

    #[test]
    fn two_domain_displacement_is_mean_gap() {
        let stack = linear_stack(2);
        let bank = bank(&[
            (Matrix::identity(2), vec![1.0, 3.0]),
            (Matrix::from_diag(&[4.0, 2.0]), vec![-2.0, 7.0]),
        ]);
        let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 5, 6);
        let r = estimate_ate(&stack, &bank, &x, 1e-5).unwrap();
        // ‖(1,3) − (−2,7)‖ = 5
        assert!((r.ate_norm - 5.0).abs() < 1e-10);
        assert_eq!(r.pairs[0][1], r.pairs[1][0]);
        assert_eq!(r.pairs[0][0], 0.0);
    }

    #[test]
    fn ate_is_invariant_to_domain_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = StackSpec {
            input_dim: 5,
            encoder_hidden: vec![7],
            channels: 2,
            positions: 6,
            mapper_hidden: vec![5],
            embed_dim: 3,
            classes: 2,
            domains: 3,
            ..StackSpec::default()
        };
        let stack = NetworkStack::new(spec, &mut rng).unwrap();
        let styles: Vec<(Matrix, Vec<f64>)> = (0..3)
            .map(|_| {
                let a = random_matrix(&mut rng, 2, 2);
                let v = a.matmul_transposed(&a).unwrap().add(&Matrix::identity(2)).unwrap();
                (v, vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            })
            .collect();
        let b = bank(&styles);
        let x = random_matrix(&mut rng, 6, 5);
        let base = estimate_ate(&stack, &b, &x, 1e-5).unwrap();
        let perm = estimate_ate(&stack, &b.permuted(&[2, 0, 1]).unwrap(), &x, 1e-5).unwrap();
        assert!((base.ate_norm - perm.ate_norm).abs() < 1e-12);
        assert!(base.ate_norm > 0.0);
    }

    #[test]
    fn ate_rejects_empty_probe() {
        let stack = linear_stack(2);
        let b = bank(&[(Matrix::identity(2), vec![0.0; 2]), (Matrix::identity(2), vec![1.0; 2])]);
        assert!(estimate_ate(&stack, &b, &Matrix::zeros(0, 6), 1e-5).is_err());
    }

    #[test]
    fn identical_sets_match_exactly() {
        let z = random_matrix(&mut ChaCha8Rng::seed_from_u64(2), 10, 3);
        assert_eq!(marginal_match(&[z.clone(), z.clone(), z]).unwrap(), 0.0);
    }

    #[test]
    fn point_masses() {
        // two copies of (0,0) vs two copies of (3,4): 2·5 − 0 − 0
        let a = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0], [3.0, 4.0]]);
        assert_eq!(marginal_match(&[a.clone(), b.clone()]).unwrap(), 10.0);
        assert_eq!(marginal_match(&[b, a]).unwrap(), 10.0);
    }

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 6, 2);
            let b = random_matrix(&mut rng, 9, 2);
            let ab = energy_distance(&a, &b);
            assert!((ab - energy_distance(&b, &a)).abs() < 1e-12);
            assert!(ab >= -1e-12);
        }
    }

    #[test]
    fn marginal_match_errors() {
        let a = Matrix::zeros(3, 2);
        assert!(marginal_match(std::slice::from_ref(&a)).is_err());
        assert!(marginal_match(&[a.clone(), Matrix::zeros(1, 2)]).is_err());
        assert!(marginal_match(&[a, Matrix::zeros(3, 4)]).is_err());
    }
}
