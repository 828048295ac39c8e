//! Exact entropies of small discrete joints `p(z, y, d)`.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};

/// Shannon entropy in bits; zero-probability cells contribute nothing.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    Z,
    Y,
    D,
}

impl Variable {
    fn axis(self) -> usize {
        match self {
            Variable::Z => 0,
            Variable::Y => 1,
            Variable::D => 2,
        }
    }
}

/// Probability table over `(z, y, d)` stored in z-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    sizes: [usize; 3],
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nz: usize, ny: usize, nd: usize, p: Vec<f64>) -> Result<Self> {
        if nz * ny * nd == 0 || p.len() != nz * ny * nd {
            return Err(Error::shape("DiscreteJoint", nz * ny * nd, p.len()));
        }
        if p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("joint probabilities must be >= 0".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("joint sums to {total}, expected 1")));
        }
        Ok(Self { sizes: [nz, ny, nd], p })
    }

    /// Normalizes nonnegative weights into a joint.
    pub fn from_weights(nz: usize, ny: usize, nd: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("joint weights must have positive mass".into()));
        }
        Self::new(nz, ny, nd, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.sizes[0], self.sizes[1], self.sizes[2])
    }

    pub fn prob(&self, z: usize, y: usize, d: usize) -> f64 {
        self.p[(z * self.sizes[1] + y) * self.sizes[2] + d]
    }

    fn cells(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        let [_, ny, nd] = self.sizes;
        self.p.iter().enumerate().map(move |(i, &p)| {
            let d = i % nd;
            let y = (i / nd) % ny;
            let z = i / (nd * ny);
            ([z, y, d], p)
        })
    }

    /// Dense marginal over `vars` (in the given order).
    pub fn marginal(&self, vars: &[Variable]) -> Vec<f64> {
        let dims: Vec<usize> = vars.iter().map(|v| self.sizes[v.axis()]).collect();
        let mut out = vec![0.0; dims.iter().product()];
        for (idx, p) in self.cells() {
            out[flat_index(&idx, vars, &dims)] += p;
        }
        out
    }

    pub fn entropy(&self, vars: &[Variable]) -> f64 {
        entropy_bits(&self.marginal(vars))
    }
}

fn flat_index(idx: &[usize; 3], vars: &[Variable], dims: &[usize]) -> usize {
    vars.iter()
        .zip(dims)
        .fold(0, |acc, (v, &n)| acc * n + idx[v.axis()])
}

/// `H(target | given) = −Σ p(t, g)·log₂ p(t, g)/p(g)` in bits.
pub fn conditional_entropy(joint: &DiscreteJoint, target: &[Variable], given: &[Variable]) -> f64 {
    let both: Vec<Variable> = given.iter().chain(target).copied().collect();
    let p_both = joint.marginal(&both);
    let p_given = joint.marginal(given);
    let target_cells: usize = target.iter().map(|v| joint.sizes[v.axis()]).product();
    let mut h = 0.0;
    for (i, &p) in p_both.iter().enumerate() {
        if p > 0.0 {
            let g = p_given[i / target_cells];
            h -= p * (p / g).log2();
        }
    }
    h
}

/// Tolerance for treating `H(d|z)` as equal to `H(d)`.
pub const PREMISE_TOLERANCE: f64 = 1e-9;
/// Tolerance on inequality slack.
pub const SLACK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Report {
    /// False when the joint does not have `H(d|y) = 0`.
    pub applicable: bool,
    pub holds: bool,
    /// `H(y|z) − (H(d|z) − H(d|y))`.
    pub slack: f64,
    /// True when `H(d|z) = H(d)` within [`PREMISE_TOLERANCE`].
    pub premise_active: bool,
    /// `H(y|z) − H(d)` when the premise is active.
    pub premise_slack: Option<f64>,
    pub h_y_given_z: f64,
    pub h_d_given_z: f64,
    pub h_d_given_y: f64,
    pub h_d: f64,
}

/// Checks the information-loss bound `H(y|z) ≥ H(d|z) − H(d|y)` and, for a
/// fully domain-invariant `z`, `H(y|z) ≥ H(d)`.
pub fn verify_theorem1(joint: &DiscreteJoint) -> Theorem1Report {
    use Variable::*;
    let h_y_given_z = conditional_entropy(joint, &[Y], &[Z]);
    let h_d_given_z = conditional_entropy(joint, &[D], &[Z]);
    let h_d_given_y = conditional_entropy(joint, &[D], &[Y]);
    let h_d = joint.entropy(&[D]);
    let applicable = h_d_given_y.abs() <= 1e-12;
    let slack = h_y_given_z - (h_d_given_z - h_d_given_y);
    let premise_active = (h_d_given_z - h_d).abs() <= PREMISE_TOLERANCE;
    let premise_slack = premise_active.then_some(h_y_given_z - h_d);
    let holds = applicable
        && slack >= -SLACK_TOLERANCE
        && premise_slack.is_none_or(|s| s >= -SLACK_TOLERANCE);
    Theorem1Report {
        applicable,
        holds,
        slack,
        premise_active,
        premise_slack,
        h_y_given_z,
        h_d_given_z,
        h_d_given_y,
        h_d,
    }
}

/// Random joint whose labels come in disjoint per-domain blocks.
///
/// With `domain_invariant_z` the construction is `p(z)·p(d)·p(y | z, d)`,
/// which forces `H(d|z) = H(d)`; otherwise `p(z, y)` is unrestricted.
pub fn random_disjoint_joint(
    rng: &mut impl Rng,
    nz: usize,
    ids_per_domain: &[usize],
    domain_invariant_z: bool,
) -> Result<DiscreteJoint> {
    let nd = ids_per_domain.len();
    let ny: usize = ids_per_domain.iter().sum();
    let mut block = Vec::with_capacity(ny);
    for (d, &m) in ids_per_domain.iter().enumerate() {
        block.extend(std::iter::repeat_n(d, m));
    }
    let mut w = vec![0.0; nz * ny * nd];
    let mut draw = || -> f64 {
        // occasional exact zeros exercise the 0·log 0 convention
        if rng.random_bool(0.15) {
            0.0
        } else {
            rng.sample(Exp1)
        }
    };
    if domain_invariant_z {
        let pz: Vec<f64> = (0..nz).map(|_| draw() + 1e-3).collect();
        let pd: Vec<f64> = (0..nd).map(|_| draw() + 1e-3).collect();
        for z in 0..nz {
            for d in 0..nd {
                let ys: Vec<usize> = (0..ny).filter(|&y| block[y] == d).collect();
                let mut cond: Vec<f64> = ys.iter().map(|_| draw()).collect();
                let total: f64 = cond.iter().sum();
                if total == 0.0 {
                    cond[0] = 1.0;
                }
                let total: f64 = cond.iter().sum();
                for (&y, c) in ys.iter().zip(&cond) {
                    w[(z * ny + y) * nd + d] = pz[z] * pd[d] * c / total;
                }
            }
        }
    } else {
        for z in 0..nz {
            for y in 0..ny {
                w[(z * ny + y) * nd + block[y]] = draw();
            }
        }
        if w.iter().all(|&v| v == 0.0) {
            w[block[0]] = 1.0;
        }
    }
    DiscreteJoint::from_weights(nz, ny, nd, w)
}
