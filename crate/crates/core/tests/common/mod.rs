#![allow(dead_code)]

use std::sync::Arc;

use dccd::dccd::{transfer_maps, DomainStyleBank};
use dccd::linalg::Matrix;
use dccd::net::{BoundStack, EncoderKind, FrozenMap, NetworkStack, Pooling, StackSpec, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `A·Aᵀ/n + floor·I` for a Gaussian `A`.
pub fn random_spd(rng: &mut impl Rng, n: usize, floor: f64) -> Matrix {
    let a = random_matrix(rng, n, n);
    let mut m = a.matmul_transposed(&a).unwrap().scale(1.0 / n as f64);
    for i in 0..n {
        m[(i, i)] += floor;
    }
    m
}

/// Covariance over positions by explicit sums, normalized by `S`.
pub fn direct_covariance(f: &Matrix) -> Matrix {
    let (c, s) = f.shape();
    let mean: Vec<f64> = (0..c).map(|i| (0..s).map(|p| f[(i, p)]).sum::<f64>() / s as f64).collect();
    let mut cov = Matrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            let mut acc = 0.0;
            for p in 0..s {
                acc += (f[(a, p)] - mean[a]) * (f[(b, p)] - mean[b]);
            }
            cov[(a, b)] = acc / s as f64;
        }
    }
    cov
}

pub fn direct_mean(f: &Matrix) -> Vec<f64> {
    (0..f.rows()).map(|i| f.row(i).iter().sum::<f64>() / f.cols() as f64).collect()
}

/// Elementwise `|a - b|` maximum.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Exhaustive CMC curve and mAP: each gallery item's rank is counted from
/// the pairwise ordering (distance, then index) without sorting.
pub fn brute_force_retrieval(
    query: &Matrix,
    gallery: &Matrix,
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> (Vec<f64>, f64) {
    let n = gallery.rows();
    let dist = |q: usize, g: usize| -> f64 {
        query.row(q).iter().zip(gallery.row(g)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut cmc = vec![0.0; n];
    let mut ap_total = 0.0;
    for q in 0..query.rows() {
        let d: Vec<f64> = (0..n).map(|g| dist(q, g)).collect();
        let rank = |g: usize| 1 + (0..n).filter(|&h| d[h] < d[g] || (d[h] == d[g] && h < g)).count();
        let relevant: Vec<usize> = (0..n).filter(|&g| gallery_ids[g] == query_ids[q]).collect();
        let ranks: Vec<usize> = relevant.iter().map(|&g| rank(g)).collect();
        let best = *ranks.iter().min().unwrap();
        for (k, c) in cmc.iter_mut().enumerate() {
            if best <= k + 1 {
                *c += 1.0;
            }
        }
        let ap: f64 = ranks
            .iter()
            .map(|&r| {
                let hits_up_to = ranks.iter().filter(|&&o| o <= r).count();
                hits_up_to as f64 / r as f64
            })
            .sum::<f64>()
            / ranks.len() as f64;
        ap_total += ap;
    }
    let nq = query.rows() as f64;
    (cmc.into_iter().map(|c| c / nq).collect(), ap_total / nq)
}

/// A random retrieval instance with small integer coordinates (so ties
/// occur) and every query id present in the gallery.
pub fn random_retrieval_case(rng: &mut impl Rng) -> (Matrix, Matrix, Vec<usize>, Vec<usize>) {
    let dim = rng.random_range(1..4);
    let n_gallery = rng.random_range(1..=20);
    let ids = rng.random_range(1..=n_gallery.min(6));
    let mut gallery_ids: Vec<usize> = (0..n_gallery).map(|i| if i < ids { i } else { rng.random_range(0..ids) }).collect();
    for i in (1..gallery_ids.len()).rev() {
        let j = rng.random_range(0..=i);
        gallery_ids.swap(i, j);
    }
    let n_query = rng.random_range(1..6);
    let query_ids: Vec<usize> = (0..n_query).map(|_| rng.random_range(0..ids)).collect();
    let mut coords = |rows: usize| {
        let data = (0..rows * dim).map(|_| rng.random_range(-3..=3) as f64).collect();
        Matrix::from_vec(rows, dim, data).unwrap()
    };
    let gallery = coords(n_gallery);
    let query = coords(n_query);
    (query, gallery, query_ids, gallery_ids)
}

/// Loss terms of one forward pass with the intervention maps held fixed.
struct Terms {
    ce: f64,
    adv: f64,
    ce_star: f64,
    adv_star: f64,
}

pub struct GradientCase {
    pub stack: NetworkStack,
    x: Matrix,
    y: Vec<usize>,
    d: Vec<usize>,
    d_star: Vec<usize>,
    maps: Vec<Arc<dyn FrozenMap>>,
    reversal: f64,
    gamma: f64,
}

fn random_bank(rng: &mut impl Rng, k: usize, c: usize) -> DomainStyleBank {
    let mut bank = DomainStyleBank::new(k, c, 0.3).unwrap();
    for j in 0..k {
        let v = random_spd(rng, c, 0.2);
        let u = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        bank.set_domain(j, v, u).unwrap();
    }
    bank
}

impl GradientCase {
    /// A small random stack and batch. Even seeds use the position-wise
    /// encoder with flattened pooling, odd seeds the dense encoder with
    /// mean pooling.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = rng.random_range(2..=3);
        // S ≥ 2C keeps the per-sample whitening factor well conditioned
        let positions = rng.random_range(2 * channels..=2 * channels + 2);
        let (encoder, pooling) = if seed.is_multiple_of(2) {
            (EncoderKind::Positionwise, Pooling::Flatten)
        } else {
            (EncoderKind::Dense, Pooling::Mean)
        };
        let input_dim = match encoder {
            // at least C inputs per position so channels are not collinear
            EncoderKind::Positionwise => positions * rng.random_range(channels..=channels + 1),
            EncoderKind::Dense => rng.random_range(3..=6),
        };
        let classes = rng.random_range(2..=4);
        let domains = rng.random_range(2..=3);
        let spec = StackSpec {
            input_dim,
            encoder,
            encoder_hidden: vec![rng.random_range(3..=5)],
            channels,
            positions,
            mapper_hidden: vec![rng.random_range(2..=4)],
            pooling,
            embed_dim: rng.random_range(2..=4),
            classes,
            domains,
            discriminator_hidden: vec![rng.random_range(2..=4)],
        };
        let stack = NetworkStack::new(spec, &mut rng).unwrap();
        let b = rng.random_range(3..=5);
        let x = random_matrix(&mut rng, b, input_dim);
        let y = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let d = (0..b).map(|_| rng.random_range(0..domains)).collect();
        let d_star: Vec<usize> = (0..b).map(|_| rng.random_range(0..domains)).collect();
        let bank = random_bank(&mut rng, domains, channels);
        let features = stack.encode(&x).unwrap();
        let styles = bank.styles(1e-5).unwrap();
        let maps = transfer_maps(&features, channels, positions, &d_star, &styles, 1e-5).unwrap();
        Self {
            stack,
            x,
            y,
            d,
            d_star,
            maps,
            reversal: rng.random_range(0.2..1.5),
            gamma: rng.random_range(0.1..1.0),
        }
    }

    fn record(&self, net: &BoundStack, spec: &StackSpec, tape: &mut Tape) -> (Var, Terms) {
        let x = tape.leaf(self.x.clone());
        let f = net.encode(tape, x).unwrap();
        let z = net.map(tape, f).unwrap();
        let logits = net.classify(tape, z).unwrap();
        let ce = tape.cross_entropy(logits, &self.y).unwrap();
        let zr = tape.grad_reverse(z, self.reversal);
        let dl = net.discriminate(tape, zr).unwrap();
        let adv = tape.cross_entropy(dl, &self.d).unwrap();
        let f_star = tape.frozen_map(f, spec.channels, spec.positions, self.maps.clone()).unwrap();
        let z_star = net.map(tape, f_star).unwrap();
        let ls = net.classify(tape, z_star).unwrap();
        let ce_star = tape.cross_entropy(ls, &self.y).unwrap();
        let zrs = tape.grad_reverse(z_star, self.reversal);
        let dls = net.discriminate(tape, zrs).unwrap();
        let adv_star = tape.cross_entropy(dls, &self.d_star).unwrap();
        let loss = tape
            .weighted_sum(&[(ce, 1.0), (adv, 1.0), (ce_star, self.gamma), (adv_star, self.gamma)])
            .unwrap();
        let terms = Terms {
            ce: tape.scalar(ce),
            adv: tape.scalar(adv),
            ce_star: tape.scalar(ce_star),
            adv_star: tape.scalar(adv_star),
        };
        (loss, terms)
    }

    pub fn analytic(&self) -> Vec<Matrix> {
        let mut tape = Tape::new();
        let net = self.stack.bind(&mut tape);
        let (loss, _) = self.record(&net, self.stack.spec(), &mut tape);
        let g = tape.backward(loss).unwrap();
        net.param_grads(&g)
    }

    fn terms(&self, stack: &NetworkStack) -> Terms {
        let mut tape = Tape::new();
        let net = stack.bind(&mut tape);
        self.record(&net, stack.spec(), &mut tape).1
    }

    /// Largest relative error between the tape gradient and central
    /// differences, `|a − n| / max(|a|, |n|, 1e-4)`.
    ///
    /// Gradient reversal makes the tape gradient of the encoder-side
    /// parameters the derivative of `ce + γ·ce* − λ·(adv + γ·adv*)`, while the
    /// discriminator parameters see `adv + γ·adv*`.
    pub fn max_relative_error(&self, step: f64) -> f64 {
        let analytic = self.analytic();
        let n_params = analytic.len();
        let n_disc = 2 * self.stack.discriminator().len();
        let (lambda, gamma) = (self.reversal, self.gamma);
        let mut worst: f64 = 0.0;
        for p in 0..n_params {
            let discriminator = p >= n_params - n_disc;
            let objective = |t: Terms| {
                if discriminator {
                    t.adv + gamma * t.adv_star
                } else {
                    t.ce + gamma * t.ce_star - lambda * (t.adv + gamma * t.adv_star)
                }
            };
            for e in 0..analytic[p].as_slice().len() {
                let mut plus = self.stack.clone();
                plus.params_mut()[p].as_mut_slice()[e] += step;
                let mut minus = self.stack.clone();
                minus.params_mut()[p].as_mut_slice()[e] -= step;
                let numeric = (objective(self.terms(&plus)) - objective(self.terms(&minus))) / (2.0 * step);
                let a = analytic[p].as_slice()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }
}
