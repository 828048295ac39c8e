use dccd::linalg::Matrix;
use dccd::synth::{build_world, empirical_domain_given_label_entropy, generate, WorldSpec};

fn sample_covariance(rows: &[&[f64]]) -> (Vec<f64>, Matrix) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut cov = Matrix::zeros(dim, dim);
    for r in rows {
        for a in 0..dim {
            for b in 0..dim {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    (mean, cov)
}

/// Domain covariance `A·(signal + σ²I)·Aᵀ` at N = 10⁴, where `signal` is
/// the covariance of the domain's prototypes under equal sampling.
#[test]
fn domain_covariance_matches_style_law() {
    let spec = WorldSpec {
        ids_per_domain: vec![20, 20],
        target_domains: 1,
        target_ids_per_domain: 5,
        samples_per_id: 500,
        input_dim: 12,
        class_signal_dim: 6,
        style_channels: 3,
        ..WorldSpec::default()
    };
    let world = build_world(&spec).unwrap();
    let n = spec.input_dim;
    let sigma2 = spec.noise_scale * spec.noise_scale;
    let mut offset = 0;
    for (d, &ids) in spec.ids_per_domain.iter().enumerate() {
        let protos: Vec<&[f64]> = (offset..offset + ids).map(|y| world.prototypes[y].as_slice()).collect();
        offset += ids;
        let (_, signal) = sample_covariance(&protos);
        let mut inner = signal;
        for i in 0..n {
            inner[(i, i)] += sigma2;
        }
        let a = &world.styles[d].mixing;
        let expected = a.matmul(&inner).unwrap().matmul(&a.transpose()).unwrap();

        let rows: Vec<&[f64]> = world.dataset.train.iter().filter(|s| s.d == d).map(|s| s.x.as_slice()).collect();
        assert_eq!(rows.len(), 10_000);
        let (_, got) = sample_covariance(&rows);
        let samples = rows.len() as f64;
        for i in 0..n {
            for j in 0..n {
                let se = ((expected[(i, i)] * expected[(j, j)] + expected[(i, j)].powi(2)) / samples).sqrt();
                let gap = (got[(i, j)] - expected[(i, j)]).abs();
                assert!(gap < 5.0 * se, "domain {d} entry ({i},{j}): gap {gap:.4} vs 5 SE {:.4}", 5.0 * se);
            }
        }
    }
}

#[test]
fn default_world_has_disjoint_labels() {
    let data = generate(&WorldSpec::default()).unwrap();
    assert_eq!(empirical_domain_given_label_entropy(&data.train).unwrap(), 0.0);
    assert_eq!(data.source_domains, 3);
    assert_eq!(data.target_domains, 2);
}
