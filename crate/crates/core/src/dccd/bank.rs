//! Per-domain style memory with momentum updates.
//!
//! For every domain `j` present in a batch of size `b`:
//!
//! ```text
//! V_j ← (1−β)·V_j + β · Σᵢ 𝟙(dᵢ=j)·var(fᵢ) / Σᵢ 𝟙(dᵢ=j)
//! U_j ← (1−β)·U_j + β · Σᵢ 𝟙(dᵢ=j)·μ(fᵢ)  / Σᵢ 𝟙(dᵢ=j)
//! ```
//!
//! A domain's first update stores the batch statistic directly.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "DCDB" | version u32 | K u32 | C u32 | β f64 | K × initialized u8
//! | U: K·C f64 | V: K·C·C f64
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, regularize_spd, Matrix, SpdFactor};

use super::{channel_mean, FeatureMap};

pub const BANK_MAGIC: &[u8; 4] = b"DCDB";
pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyleBank {
    momentum: f64,
    channels: usize,
    cov: Vec<Matrix>,
    mean: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

/// Coloring target for one domain: `chol(V_j + εI)` and `U_j`.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    pub factor: SpdFactor,
    pub mean: Vec<f64>,
}

impl DomainStyleBank {
    pub fn new(domain_count: usize, channels: usize, momentum: f64) -> Result<Self> {
        if domain_count == 0 || channels == 0 {
            return Err(Error::Config("style bank needs K, C >= 1".into()));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("bank momentum {momentum} outside (0, 1]")));
        }
        Ok(Self {
            momentum,
            channels,
            cov: vec![Matrix::zeros(channels, channels); domain_count],
            mean: vec![vec![0.0; channels]; domain_count],
            initialized: vec![false; domain_count],
        })
    }

    pub fn domain_count(&self) -> usize {
        self.cov.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self, domain: usize) -> bool {
        self.initialized.get(domain).copied().unwrap_or(false)
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn covariance(&self, domain: usize) -> &Matrix {
        &self.cov[domain]
    }

    pub fn mean(&self, domain: usize) -> &[f64] {
        &self.mean[domain]
    }

    /// Overwrites a domain's statistics and marks it initialized.
    pub fn set_domain(&mut self, domain: usize, cov: Matrix, mean: Vec<f64>) -> Result<()> {
        self.check_domain(domain)?;
        let c = self.channels;
        if cov.shape() != (c, c) || mean.len() != c {
            return Err(Error::shape("set_domain", format!("{c}x{c} and {c}"), format!("{:?} and {}", cov.shape(), mean.len())));
        }
        if cov != cov.transpose() {
            return Err(Error::NotSymmetric {
                asymmetry: cov.sub(&cov.transpose())?.max_abs(),
            });
        }
        self.cov[domain] = cov;
        self.mean[domain] = mean;
        self.initialized[domain] = true;
        Ok(())
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.domain_count() {
            return Err(Error::Config(format!(
                "domain {domain} out of range for {} bank domains",
                self.domain_count()
            )));
        }
        Ok(())
    }

    pub fn update(&mut self, batch: &[(&FeatureMap, usize)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("bank update batch"));
        }
        let (k, c) = (self.domain_count(), self.channels);
        let mut cov_sum = vec![Matrix::zeros(c, c); k];
        let mut mean_sum = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for &(f, d) in batch {
            self.check_domain(d)?;
            if f.channels() != c {
                return Err(Error::shape("bank update", c, f.channels()));
            }
            cov_sum[d].axpy(1.0, &f.covariance())?;
            for (s, m) in mean_sum[d].iter_mut().zip(channel_mean(f)) {
                *s += m;
            }
            counts[d] += 1;
        }
        let beta = self.momentum;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let n = counts[j] as f64;
            let batch_cov = cov_sum[j].scale(1.0 / n);
            let batch_mean: Vec<f64> = mean_sum[j].iter().map(|s| s / n).collect();
            if self.initialized[j] {
                let mut v = self.cov[j].scale(1.0 - beta);
                v.axpy(beta, &batch_cov)?;
                self.cov[j] = v;
                for (u, m) in self.mean[j].iter_mut().zip(&batch_mean) {
                    *u = (1.0 - beta) * *u + beta * m;
                }
            } else {
                self.cov[j] = batch_cov;
                self.mean[j] = batch_mean;
                self.initialized[j] = true;
            }
        }
        Ok(())
    }

    pub fn style(&self, domain: usize, epsilon: f64) -> Result<StyleTarget> {
        if !self.is_initialized(domain) {
            return Err(Error::BankNotReady { domain });
        }
        Ok(StyleTarget {
            factor: cholesky(&regularize_spd(&self.cov[domain], epsilon))?,
            mean: self.mean[domain].clone(),
        })
    }

    /// Coloring targets for every domain.
    pub fn styles(&self, epsilon: f64) -> Result<Vec<Arc<StyleTarget>>> {
        (0..self.domain_count())
            .map(|j| self.style(j, epsilon).map(Arc::new))
            .collect()
    }

    /// Reorders domains: new domain `i` holds old domain `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.domain_count()];
        if order.len() != seen.len() || order.iter().any(|&j| j >= seen.len() || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::Config("not a permutation of the bank domains".into()));
        }
        Ok(Self {
            momentum: self.momentum,
            channels: self.channels,
            cov: order.iter().map(|&j| self.cov[j].clone()).collect(),
            mean: order.iter().map(|&j| self.mean[j].clone()).collect(),
            initialized: order.iter().map(|&j| self.initialized[j]).collect(),
        })
    }
}

pub fn write_bank<W: Write>(bank: &DomainStyleBank, out: W) -> Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(BANK_MAGIC)?;
    w.u32(BANK_FORMAT_VERSION)?;
    w.len(bank.domain_count())?;
    w.len(bank.channels)?;
    w.f64(bank.momentum)?;
    for &flag in &bank.initialized {
        w.u8(flag as u8)?;
    }
    for u in &bank.mean {
        w.f64s(u)?;
    }
    for v in &bank.cov {
        w.f64s(v.as_slice())?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_bank<R: Read>(input: R) -> Result<DomainStyleBank> {
    let mut r = LeReader::new(input, "style bank");
    r.magic(BANK_MAGIC)?;
    r.version(BANK_FORMAT_VERSION)?;
    let k = r.len()?;
    let c = r.len()?;
    let momentum = r.f64()?;
    let mut bank = DomainStyleBank::new(k, c, momentum).map_err(|e| r.fail(e.to_string()))?;
    for j in 0..k {
        bank.initialized[j] = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.fail(format!("initialized flag {other}"))),
        };
    }
    for j in 0..k {
        bank.mean[j] = r.f64s(c)?;
    }
    for j in 0..k {
        bank.cov[j] = Matrix::from_vec(c, c, r.f64s(c * c)?)?;
    }
    r.expect_end()?;
    Ok(bank)
}
