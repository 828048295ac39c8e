//! Whitening, coloring and the domain-intervention transform.
//!
//! A feature map is a `C x S` block (channels by spatial positions). Its
//! style is the per-channel mean and the channel covariance over positions.
//! With `Σ + εI = L Lᵀ` the whitened map is `f̂ = L⁻¹(f − μ)`, and coloring
//! into domain `j` with bank statistics `V_j + εI = L_j L_jᵀ`, `U_j` gives
//! `f* = L_j f̂ + U_j`.

mod bank;

use std::sync::Arc;

pub use bank::{read_bank, write_bank, DomainStyleBank, StyleTarget, BANK_FORMAT_VERSION, BANK_MAGIC};

use crate::error::{Error, Result};
use crate::linalg::{center_rows, cholesky, covariance, regularize_spd, solve_lower, Matrix, SpdFactor};
use crate::net::{FrozenMap, NetworkStack, Tape};

/// SPD regularization used when nothing else is configured.
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::EmptyInput("feature map needs C, S >= 1"));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { values })
    }

    /// Reads one channel-major `[C·S]` row.
    pub fn from_row(row: &[f64], channels: usize, positions: usize) -> Result<Self> {
        Self::new(Matrix::from_vec(channels, positions, row.to_vec())?)
    }

    /// Splits a `[b x C·S]` batch into per-sample maps.
    pub fn batch(features: &Matrix, channels: usize, positions: usize) -> Result<Vec<Self>> {
        (0..features.rows())
            .map(|i| Self::from_row(features.row(i), channels, positions))
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn positions(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// The sample's own channel covariance (normalized by `S`).
    pub fn covariance(&self) -> Matrix {
        covariance(&self.values, false).expect("S >= 1 by construction")
    }
}

/// Per-channel mean over positions.
pub fn channel_mean(f: &FeatureMap) -> Vec<f64> {
    f.values.row_means()
}

/// Result of [`whiten`]: the white map plus the statistics that were removed.
#[derive(Clone, Debug)]
pub struct Whitened {
    pub white: FeatureMap,
    pub mean: Vec<f64>,
    pub factor: SpdFactor,
}

pub fn whiten(f: &FeatureMap, epsilon: f64) -> Result<Whitened> {
    if f.positions() < 2 {
        return Err(Error::EmptyInput("whitening needs at least two positions"));
    }
    let mean = channel_mean(f);
    let centered = center_rows(&f.values);
    let cov = covariance(&centered, true)?;
    let factor = cholesky(&regularize_spd(&cov, epsilon))?;
    let white = FeatureMap::new(solve_lower(&factor, &centered)?)?;
    Ok(Whitened { white, mean, factor })
}

/// `L_j f̂ + U_j` for a precomputed style target.
pub fn color_with(f_hat: &FeatureMap, style: &StyleTarget) -> Result<FeatureMap> {
    if f_hat.channels() != style.factor.dim() {
        return Err(Error::shape("color", style.factor.dim(), f_hat.channels()));
    }
    let mut out = style.factor.mul(&f_hat.values)?;
    for (c, mu) in style.mean.iter().enumerate() {
        for v in out.row_mut(c) {
            *v += mu;
        }
    }
    FeatureMap::new(out)
}

pub fn color(f_hat: &FeatureMap, target_domain: usize, bank: &DomainStyleBank, epsilon: f64) -> Result<FeatureMap> {
    color_with(f_hat, &bank.style(target_domain, epsilon)?)
}

/// Removes the sample's own style and imposes domain `target_domain`'s.
pub fn dccd_transform(f: &FeatureMap, target_domain: usize, bank: &DomainStyleBank, epsilon: f64) -> Result<FeatureMap> {
    let style = bank.style(target_domain, epsilon)?;
    color_with(&whiten(f, epsilon)?.white, &style)
}

/// The whiten-then-color map of one sample with both factors frozen.
///
/// `apply` recomputes the centering from its input, so at the sample it was
/// built from it reproduces [`dccd_transform`] exactly; `pullback` is the
/// exact derivative with the two Cholesky factors held constant.
pub struct StyleTransfer {
    source: SpdFactor,
    target: Arc<StyleTarget>,
}

impl StyleTransfer {
    pub fn new(f: &FeatureMap, target: Arc<StyleTarget>, epsilon: f64) -> Result<Self> {
        let source = whiten(f, epsilon)?.factor;
        Ok(Self { source, target })
    }
}

impl FrozenMap for StyleTransfer {
    fn apply(&self, sample: &Matrix) -> Result<Matrix> {
        let white = solve_lower(&self.source, &center_rows(sample))?;
        let mut out = self.target.factor.mul(&white)?;
        for (c, mu) in self.target.mean.iter().enumerate() {
            for v in out.row_mut(c) {
                *v += mu;
            }
        }
        Ok(out)
    }

    fn pullback(&self, grad: &Matrix) -> Result<Matrix> {
        let through_color = self.target.factor.mul_transpose(grad)?;
        let through_whiten = self.source.solve_transpose(&through_color)?;
        Ok(center_rows(&through_whiten))
    }
}

/// Builds one [`StyleTransfer`] per row of an encoder batch.
pub fn transfer_maps(
    features: &Matrix,
    channels: usize,
    positions: usize,
    targets: &[usize],
    styles: &[Arc<StyleTarget>],
    epsilon: f64,
) -> Result<Vec<Arc<dyn FrozenMap>>> {
    if targets.len() != features.rows() {
        return Err(Error::shape("transfer_maps", features.rows(), targets.len()));
    }
    FeatureMap::batch(features, channels, positions)?
        .iter()
        .zip(targets)
        .map(|(f, &j)| {
            let style = styles.get(j).ok_or(Error::BankNotReady { domain: j })?;
            Ok(Arc::new(StyleTransfer::new(f, style.clone(), epsilon)?) as Arc<dyn FrozenMap>)
        })
        .collect()
}

/// A generated tuple `(z*, y, d*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSample {
    pub embedding: Vec<f64>,
    pub class_label: usize,
    pub intervened_domain: usize,
}

/// Embeddings `M(dccd_transform(E(x), i))` for every bank domain `i`.
pub fn intervention_embeddings(
    stack: &NetworkStack,
    x: &Matrix,
    bank: &DomainStyleBank,
    epsilon: f64,
) -> Result<Vec<Matrix>> {
    let spec = stack.spec();
    let features = stack.encode(x)?;
    let maps = FeatureMap::batch(&features, spec.channels, spec.positions)?;
    let whitened: Vec<FeatureMap> = maps
        .iter()
        .map(|f| whiten(f, epsilon).map(|w| w.white))
        .collect::<Result<_>>()?;
    (0..bank.domain_count())
        .map(|i| {
            let style = bank.style(i, epsilon)?;
            let mut colored = Matrix::zeros(features.rows(), features.cols());
            for (row, w) in whitened.iter().enumerate() {
                let c = color_with(w, &style)?;
                colored.row_mut(row).copy_from_slice(c.values.as_slice());
            }
            stack.map_features(&colored)
        })
        .collect()
}

/// Generates `(z*, y, d*)` tuples for explicit intervention targets.
pub fn intervene(
    stack: &NetworkStack,
    x: &Matrix,
    labels: &[usize],
    targets: &[usize],
    bank: &DomainStyleBank,
    epsilon: f64,
) -> Result<Vec<InterventionSample>> {
    if labels.len() != x.rows() || targets.len() != x.rows() {
        return Err(Error::shape("intervene", x.rows(), labels.len().min(targets.len())));
    }
    let spec = stack.spec();
    let styles = bank.styles(epsilon)?;
    let mut tape = Tape::new();
    let net = stack.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let f = net.encode(&mut tape, xv)?;
    let maps = transfer_maps(tape.value(f), spec.channels, spec.positions, targets, &styles, epsilon)?;
    let f_star = tape.frozen_map(f, spec.channels, spec.positions, maps)?;
    let z_star = net.map(&mut tape, f_star)?;
    let z = tape.value(z_star);
    Ok((0..x.rows())
        .map(|i| InterventionSample {
            embedding: z.row(i).to_vec(),
            class_label: labels[i],
            intervened_domain: targets[i],
        })
        .collect())
}

/// Intervention-averaged embedding `Σᵢ wᵢ · M(dccd_transform(E(x), i))`.
///
/// `weights` defaults to uniform `1/K`; explicit weights must sum to one
/// within `1e-9`.
pub fn do_test_embed(
    stack: &NetworkStack,
    x: &Matrix,
    bank: &DomainStyleBank,
    weights: Option<&[f64]>,
    epsilon: f64,
) -> Result<Matrix> {
    let k = bank.domain_count();
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != k {
                return Err(Error::Config(format!("{} do-test weights for {k} domains", w.len())));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("do-test weights must be a distribution (sum {sum})")));
            }
            w.to_vec()
        }
        None => vec![1.0 / k as f64; k],
    };
    let per_domain = intervention_embeddings(stack, x, bank, epsilon)?;
    let mut out = Matrix::zeros(x.rows(), stack.spec().embed_dim);
    for (z, w) in per_domain.iter().zip(&weights) {
        out.axpy(*w, z)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Dense, StackSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_map(rng: &mut impl Rng, c: usize, s: usize, scale: f64) -> FeatureMap {
        let data = (0..c * s).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        FeatureMap::new(Matrix::from_vec(c, s, data).unwrap()).unwrap()
    }

    fn frob_dist(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm()
    }

    /// Two ±1 patterns over four positions with zero mean and unit,
    /// uncorrelated variance.
    fn white_2x4() -> FeatureMap {
        FeatureMap::new(Matrix::from_rows(&[[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]])).unwrap()
    }

    #[test]
    fn channel_mean_examples() {
        let f = FeatureMap::new(Matrix::from_rows(&[[2.5; 3], [2.5; 3]])).unwrap();
        assert_eq!(channel_mean(&f), vec![2.5, 2.5]);
        let f = FeatureMap::new(Matrix::from_rows(&[[1.0, 3.0], [2.0, 2.0]])).unwrap();
        assert_eq!(channel_mean(&f), vec![2.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 3, 7, 1.0);
        let mean = channel_mean(&f);
        for c in 0..3 {
            let mut brute = 0.0;
            for s in 0..7 {
                brute += f.values()[(c, s)];
            }
            assert!((mean[c] - brute / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn whitening_white_input_is_near_identity() {
        let f = white_2x4();
        assert!(frob_dist(&f.covariance(), &Matrix::identity(2)) < 1e-15);
        let w = whiten(&f, 1e-9).unwrap();
        assert!(frob_dist(w.white.values(), f.values()) < 1e-8);
    }

    #[test]
    fn whitening_diagonal_covariance() {
        // rows scaled to cov diag(4, 9)
        let base = white_2x4();
        let f = FeatureMap::new(Matrix::from_diag(&[2.0, 3.0]).matmul(base.values()).unwrap()).unwrap();
        let w = whiten(&f, 1e-12).unwrap();
        let expected = Matrix::from_diag(&[0.5, 1.0 / 3.0]).matmul(f.values()).unwrap();
        assert!(frob_dist(w.white.values(), &expected) < 1e-10);
    }

    #[test]
    fn whitening_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let f = random_map(&mut rng, 5, 40, 2.0);
            let w = whiten(&f, 1e-6).unwrap();
            assert!(frob_dist(&w.white.covariance(), &Matrix::identity(5)) < 1e-3);
        }
    }

    #[test]
    fn whitening_needs_two_positions() {
        let f = FeatureMap::new(Matrix::zeros(2, 1)).unwrap();
        assert!(whiten(&f, 1e-5).is_err());
    }

    fn bank_with(styles: &[(Matrix, Vec<f64>)]) -> DomainStyleBank {
        let c = styles[0].1.len();
        let mut bank = DomainStyleBank::new(styles.len(), c, 0.3).unwrap();
        for (j, (v, u)) in styles.iter().enumerate() {
            bank.set_domain(j, v.clone(), u.clone()).unwrap();
        }
        bank
    }

    #[test]
    fn coloring_identity_style_is_noop() {
        let bank = bank_with(&[(Matrix::identity(2), vec![0.0, 0.0])]);
        let f = white_2x4();
        let out = color(&f, 0, &bank, 0.0).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn coloring_diagonal_style() {
        let bank = bank_with(&[(Matrix::from_diag(&[4.0, 9.0]), vec![1.0, 2.0])]);
        let f = white_2x4();
        let out = color(&f, 0, &bank, 0.0).unwrap();
        let expected = Matrix::from_rows(&[[3.0, -1.0, 3.0, -1.0], [5.0, 5.0, -1.0, -1.0]]);
        assert!(frob_dist(out.values(), &expected) < 1e-14);
    }

    #[test]
    fn color_then_whiten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_map(&mut rng, 4, 4, 1.0).into_values();
        let v = a.matmul_transposed(&a).unwrap();
        let v = regularize_spd(&v, 0.1);
        let bank = bank_with(&[(v, vec![0.5, -1.0, 2.0, 0.0])]);
        let f = random_map(&mut rng, 4, 32, 1.0);
        let white = whiten(&f, 1e-6).unwrap().white;
        let colored = color(&white, 0, &bank, 1e-6).unwrap();
        let again = whiten(&colored, 1e-6).unwrap().white;
        assert!(frob_dist(&again.covariance(), &Matrix::identity(4)) < 1e-3);
        assert!(channel_mean(&again).iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn color_uninitialized_domain_fails() {
        let bank = DomainStyleBank::new(2, 2, 0.3).unwrap();
        assert!(matches!(
            color(&white_2x4(), 1, &bank, 1e-5),
            Err(Error::BankNotReady { domain: 1 })
        ));
    }

    #[test]
    fn self_transfer_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_map(&mut rng, 4, 20, 1.5);
        let bank = bank_with(&[(f.covariance(), channel_mean(&f))]);
        let out = dccd_transform(&f, 0, &bank, 1e-5).unwrap();
        assert!(frob_dist(out.values(), f.values()) < 1e-3);
    }

    #[test]
    fn transform_of_white_map_equals_coloring() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_map(&mut rng, 2, 2, 1.0).into_values();
        let v = regularize_spd(&a.matmul_transposed(&a).unwrap(), 0.5);
        let bank = bank_with(&[(v, vec![0.3, -0.2])]);
        let f = white_2x4();
        let via_transform = dccd_transform(&f, 0, &bank, 1e-9).unwrap();
        let via_color = color(&f, 0, &bank, 1e-9).unwrap();
        assert!(frob_dist(via_transform.values(), via_color.values()) < 1e-7);
    }

    #[test]
    fn different_samples_acquire_target_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = Matrix::from_rows(&[[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 0.7]]);
        let bank = bank_with(&[(target.clone(), vec![1.0, 0.0, -1.0])]);
        for scale in [0.3, 3.0] {
            let f = random_map(&mut rng, 3, 48, scale);
            let out = dccd_transform(&f, 0, &bank, 1e-6).unwrap();
            assert!(frob_dist(&out.covariance(), &target) < 1e-3);
        }
    }

    #[test]
    fn frozen_transfer_matches_transform_and_pullback_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_map(&mut rng, 3, 10, 1.0);
        let a = random_map(&mut rng, 3, 3, 1.0).into_values();
        let v = regularize_spd(&a.matmul_transposed(&a).unwrap(), 0.2);
        let bank = bank_with(&[(v, vec![0.1, 0.2, 0.3])]);
        let style = Arc::new(bank.style(0, 1e-5).unwrap());
        let map = StyleTransfer::new(&f, style, 1e-5).unwrap();
        let direct = dccd_transform(&f, 0, &bank, 1e-5).unwrap();
        let frozen = map.apply(f.values()).unwrap();
        assert!(frob_dist(&frozen, direct.values()) < 1e-12);

        // <J u, g> == <u, Jᵀ g> for the linear part
        let u = random_map(&mut rng, 3, 10, 1.0).into_values();
        let g = random_map(&mut rng, 3, 10, 1.0).into_values();
        let zero = Matrix::zeros(3, 10);
        let ju = map.apply(&u).unwrap().sub(&map.apply(&zero).unwrap()).unwrap();
        let jtg = map.pullback(&g).unwrap();
        let lhs = crate::linalg::dot(ju.as_slice(), g.as_slice());
        let rhs = crate::linalg::dot(u.as_slice(), jtg.as_slice());
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    /// Identity encoder from 2·3 inputs to C=2, S=3, pooled identity mapper.
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
        let encoder = Dense {
            weight: Matrix::identity(6),
            bias: Matrix::zeros(1, 6),
            activation: Activation::Identity,
        };
        let head = Dense {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
            activation: Activation::Identity,
        };
        NetworkStack::from_layers(
            spec,
            vec![encoder],
            vec![],
            head,
            Dense::zeros(2, 2, Activation::Identity),
            vec![Dense::zeros(2, domains, Activation::Identity)],
        )
        .unwrap()
    }

    #[test]
    fn do_test_single_domain_and_identical_banks() {
        let stack = linear_stack(1);
        let x = Matrix::from_rows(&[[1.0, 2.0, 4.0, 0.0, -1.0, 1.0], [0.5, 0.0, 1.0, 2.0, 2.0, 3.0]]);
        let bank = bank_with(&[(Matrix::from_diag(&[2.0, 0.5]), vec![1.0, -1.0])]);
        let avg = do_test_embed(&stack, &x, &bank, None, 1e-5).unwrap();
        let single = &intervention_embeddings(&stack, &x, &bank, 1e-5).unwrap()[0];
        assert_eq!(&avg, single);

        let stack = linear_stack(3);
        let style = (Matrix::from_diag(&[2.0, 0.5]), vec![1.0, -1.0]);
        let bank = bank_with(&[style.clone(), style.clone(), style]);
        let avg = do_test_embed(&stack, &x, &bank, None, 1e-5).unwrap();
        let single = &intervention_embeddings(&stack, &x, &bank, 1e-5).unwrap()[0];
        assert!(frob_dist(&avg, single) < 1e-12);
    }

    #[test]
    fn do_test_linear_mapper_hand_average() {
        // pooled identity mapper: the embedding is the channel mean of f*,
        // which is exactly the target bank mean
        let stack = linear_stack(2);
        let x = Matrix::from_rows(&[[1.0, 2.0, 4.0, 0.0, -1.0, 1.0]]);
        let bank = bank_with(&[
            (Matrix::from_diag(&[1.0, 1.0]), vec![1.0, 3.0]),
            (Matrix::from_diag(&[4.0, 2.0]), vec![-1.0, 5.0]),
        ]);
        let avg = do_test_embed(&stack, &x, &bank, None, 1e-5).unwrap();
        assert!((avg[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((avg[(0, 1)] - 4.0).abs() < 1e-12);
        let weighted = do_test_embed(&stack, &x, &bank, Some(&[0.25, 0.75]), 1e-5).unwrap();
        assert!((weighted[(0, 0)] - (-0.5)).abs() < 1e-12);
        assert!((weighted[(0, 1)] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn do_test_rejects_bad_weights() {
        let stack = linear_stack(2);
        let x = Matrix::zeros(1, 6);
        let bank = bank_with(&[
            (Matrix::identity(2), vec![0.0, 0.0]),
            (Matrix::identity(2), vec![0.0, 0.0]),
        ]);
        assert!(matches!(
            do_test_embed(&stack, &x, &bank, Some(&[0.5, 0.6]), 1e-5),
            Err(Error::Config(_))
        ));
        assert!(do_test_embed(&stack, &x, &bank, Some(&[1.0]), 1e-5).is_err());
    }

    #[test]
    fn do_test_is_invariant_to_domain_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = StackSpec {
            input_dim: 5,
            encoder_hidden: vec![6],
            channels: 2,
            positions: 5,
            mapper_hidden: vec![4],
            embed_dim: 3,
            classes: 2,
            domains: 3,
            ..StackSpec::default()
        };
        let stack = NetworkStack::new(spec, &mut rng).unwrap();
        let styles: Vec<(Matrix, Vec<f64>)> = (0..3)
            .map(|j| {
                let a = random_map(&mut rng, 2, 2, 1.0).into_values();
                (regularize_spd(&a.matmul_transposed(&a).unwrap(), 0.1), vec![j as f64, -0.5])
            })
            .collect();
        let x = random_map(&mut rng, 4, 5, 1.0).into_values();
        let a = do_test_embed(&stack, &x, &bank_with(&styles), None, 1e-5).unwrap();
        let permuted = [styles[2].clone(), styles[0].clone(), styles[1].clone()];
        let b = do_test_embed(&stack, &x, &bank_with(&permuted), None, 1e-5).unwrap();
        assert!(frob_dist(&a, &b) < 1e-12);
    }
}
