//! Upper-bound proxy for `H(d|z)` from a domain discriminator refit on
//! frozen embeddings.

use serde::{Deserialize, Serialize};

use super::entropy::entropy_bits;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{softmax, NetworkStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyProxy {
    /// Mean `−log₂ q(d|z)` under the refit discriminator.
    pub proxy_bits: f64,
    /// Empirical `H(d)` of the sample domains.
    pub domain_entropy_bits: f64,
    /// `H(d) − proxy`; near zero when `z` carries no domain information.
    pub invariance_gap: f64,
    /// Refit discriminator accuracy on the same samples.
    pub accuracy: f64,
}

/// Mean `−log₂ q(d|z)` for discriminator probabilities `q` (rows sum to one).
pub fn proxy_from_probabilities(probs: &Matrix, domains: &[usize]) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("entropy proxy"));
    }
    if domains.len() != probs.rows() {
        return Err(Error::shape("entropy proxy labels", probs.rows(), domains.len()));
    }
    let mut sum = 0.0;
    for (i, &d) in domains.iter().enumerate() {
        if d >= probs.cols() {
            return Err(Error::Config(format!("domain {d} out of range")));
        }
        sum -= probs[(i, d)].log2();
    }
    Ok(sum / domains.len() as f64)
}

fn domain_entropy(domains: &[usize], k: usize) -> f64 {
    let mut counts = vec![0.0; k];
    for &d in domains {
        counts[d] += 1.0;
    }
    let n = domains.len() as f64;
    let p: Vec<f64> = counts.iter().map(|c| c / n).collect();
    entropy_bits(&p)
}

/// Per-column z-scoring; constant columns are only centered.
fn standardize(z: &Matrix) -> Matrix {
    let n = z.rows() as f64;
    let mut out = z.clone();
    for c in 0..z.cols() {
        let mean = (0..z.rows()).map(|r| z[(r, c)]).sum::<f64>() / n;
        let var = (0..z.rows()).map(|r| (z[(r, c)] - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for r in 0..z.rows() {
            out.row_mut(r)[c] = (z[(r, c)] - mean) / scale;
        }
    }
    out
}

/// Fits a softmax-linear discriminator by full-batch momentum gradient
/// descent from zero weights and returns its probabilities on `z`.
pub fn refit_probabilities(z: &Matrix, domains: &[usize], k: usize, config: &RefitConfig) -> Result<Matrix> {
    if z.rows() == 0 {
        return Err(Error::EmptyInput("discriminator refit"));
    }
    if domains.len() != z.rows() {
        return Err(Error::shape("discriminator refit labels", z.rows(), domains.len()));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= k) {
        return Err(Error::Config(format!("domain {d} out of range for {k} domains")));
    }
    let x = standardize(z);
    let (n, dim) = (x.rows(), x.cols());
    let mut w = Matrix::zeros(dim, k);
    let mut b = vec![0.0; k];
    let mut vw = Matrix::zeros(dim, k);
    let mut vb = vec![0.0; k];
    let probs_of = |w: &Matrix, b: &[f64]| -> Result<Matrix> {
        let mut logits = x.matmul(w)?;
        for r in 0..n {
            for (l, bias) in logits.row_mut(r).iter_mut().zip(b) {
                *l += bias;
            }
        }
        Ok(softmax(&logits))
    };
    for _ in 0..config.iterations {
        let mut residual = probs_of(&w, &b)?;
        for (r, &d) in domains.iter().enumerate() {
            residual.row_mut(r)[d] -= 1.0;
        }
        let gw = x.transposed_matmul(&residual)?.scale(1.0 / n as f64);
        let gb: Vec<f64> = (0..k).map(|c| (0..n).map(|r| residual[(r, c)]).sum::<f64>() / n as f64).collect();
        vw = vw.scale(config.momentum).sub(&gw.scale(config.learning_rate))?;
        w = w.add(&vw)?;
        for c in 0..k {
            vb[c] = config.momentum * vb[c] - config.learning_rate * gb[c];
            b[c] += vb[c];
        }
    }
    let probs = probs_of(&w, &b)?;
    if !probs.is_finite() {
        return Err(Error::NonFinite("discriminator refit"));
    }
    Ok(probs)
}

/// Proxy from embeddings already computed.
pub fn entropy_proxy(z: &Matrix, domains: &[usize], k: usize, config: &RefitConfig) -> Result<EntropyProxy> {
    let probs = refit_probabilities(z, domains, k, config)?;
    let proxy_bits = proxy_from_probabilities(&probs, domains)?;
    let correct = domains
        .iter()
        .enumerate()
        .filter(|&(r, &d)| {
            let row = probs.row(r);
            row.iter().enumerate().all(|(c, &p)| c == d || p < row[d])
        })
        .count();
    let domain_entropy_bits = domain_entropy(domains, k);
    Ok(EntropyProxy {
        proxy_bits,
        domain_entropy_bits,
        invariance_gap: domain_entropy_bits - proxy_bits,
        accuracy: correct as f64 / domains.len() as f64,
    })
}

/// Embeds `x` with the frozen stack and refits a discriminator on `z`.
pub fn entropy_proxy_from_discriminator(
    stack: &NetworkStack,
    x: &Matrix,
    domains: &[usize],
    config: &RefitConfig,
) -> Result<EntropyProxy> {
    let z = stack.embed(x)?;
    entropy_proxy(&z, domains, stack.spec().domains, config)
}
