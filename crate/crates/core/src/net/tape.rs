//! Reverse-mode tape over dense 2-D values.
//!
//! Nodes are appended in forward order, so reverse index order is a valid
//! topological order for backprop.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A per-sample linear map on a `C x S` block whose coefficients are held
/// fixed during backprop (stop-gradient through the coefficients only).
pub trait FrozenMap: Send + Sync {
    fn apply(&self, sample: &Matrix) -> Result<Matrix>;

    /// Vector-Jacobian product of [`FrozenMap::apply`] at fixed coefficients.
    fn pullback(&self, grad: &Matrix) -> Result<Matrix>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    GradReverse(Var, f64),
    ToPositionRows {
        input: Var,
        channels: usize,
        positions: usize,
    },
    FromPositionRows {
        input: Var,
        channels: usize,
        positions: usize,
    },
    MeanPool {
        input: Var,
        group: usize,
    },
    Frozen {
        input: Var,
        channels: usize,
        positions: usize,
        maps: Vec<Arc<dyn FrozenMap>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that reaches it.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of an `m x n` node.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("1x{}", xv.cols()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, bj) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    /// Identity on values; scales the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::GradReverse(x, lambda))
    }

    /// Reshapes `[b x C·S]` (channel-major per sample) into `[b·S x C]`,
    /// one row per position.
    pub fn to_position_rows(&mut self, x: Var, channels: usize, positions: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != channels * positions {
            return Err(Error::shape(
                "to_position_rows",
                format!("{} columns", channels * positions),
                xv.cols(),
            ));
        }
        let out = split_positions(xv, channels, positions);
        Ok(self.push(
            out,
            Op::ToPositionRows {
                input: x,
                channels,
                positions,
            },
        ))
    }

    /// Inverse of [`Tape::to_position_rows`]: `[b·S x C] -> [b x C·S]`.
    pub fn from_position_rows(&mut self, x: Var, positions: usize) -> Result<Var> {
        let xv = self.value(x);
        if positions == 0 || !xv.rows().is_multiple_of(positions) {
            return Err(Error::shape(
                "from_position_rows",
                format!("rows divisible by {positions}"),
                xv.rows(),
            ));
        }
        let channels = xv.cols();
        let out = merge_positions(xv, channels, positions);
        Ok(self.push(
            out,
            Op::FromPositionRows {
                input: x,
                channels,
                positions,
            },
        ))
    }

    /// Averages consecutive groups of `group` rows: `[b·group x h] -> [b x h]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(Error::shape(
                "mean_pool",
                format!("rows divisible by {group}"),
                xv.rows(),
            ));
        }
        let b = xv.rows() / group;
        let mut out = Matrix::zeros(b, xv.cols());
        let inv = 1.0 / group as f64;
        for i in 0..b {
            for r in 0..group {
                let src = xv.row(i * group + r);
                for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                    *o += s * inv;
                }
            }
        }
        Ok(self.push(out, Op::MeanPool { input: x, group }))
    }

    /// Applies one [`FrozenMap`] per sample row of a `[b x C·S]` node.
    pub fn frozen_map(
        &mut self,
        x: Var,
        channels: usize,
        positions: usize,
        maps: Vec<Arc<dyn FrozenMap>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != channels * positions || xv.rows() != maps.len() {
            return Err(Error::shape(
                "frozen_map",
                format!("{}x{}", maps.len(), channels * positions),
                format!("{}x{}", xv.rows(), xv.cols()),
            ));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for (i, map) in maps.iter().enumerate() {
            let sample = Matrix::from_vec(channels, positions, xv.row(i).to_vec())?;
            let mapped = map.apply(&sample)?;
            out.row_mut(i).copy_from_slice(mapped.as_slice());
        }
        Ok(self.push(
            out,
            Op::Frozen {
                input: x,
                channels,
                positions,
                maps,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[b x n]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Matrix::from_rows(&[[loss]]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ wᵢ·termᵢ` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(Error::shape("weighted_sum", "1x1", format!("{:?}", m.shape())));
            }
            total += w * m[(0, 0)];
        }
        Ok(self.push(Matrix::from_rows(&[[total]]), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::MissingTape {
                node: loss.0,
                len: self.nodes.len(),
            });
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_rows(&[[1.0]]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transposed(self.value(*b))?;
                    let gb = self.value(*a).transposed_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb)?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Tanh(x) => {
                    let mut gx = g.clone();
                    for (o, y) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GradReverse(x, lambda) => {
                    accumulate(&mut grads, *x, g.scale(-lambda))?;
                }
                Op::ToPositionRows {
                    input,
                    channels,
                    positions,
                } => {
                    accumulate(&mut grads, *input, merge_positions(&g, *channels, *positions))?;
                }
                Op::FromPositionRows {
                    input,
                    channels,
                    positions,
                } => {
                    accumulate(&mut grads, *input, split_positions(&g, *channels, *positions))?;
                }
                Op::MeanPool { input, group } => {
                    let inv = 1.0 / *group as f64;
                    let mut gx = Matrix::zeros(g.rows() * group, g.cols());
                    for i in 0..g.rows() {
                        for r in 0..*group {
                            for (o, v) in gx.row_mut(i * group + r).iter_mut().zip(g.row(i)) {
                                *o = v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Frozen {
                    input,
                    channels,
                    positions,
                    maps,
                } => {
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for (i, map) in maps.iter().enumerate() {
                        let gi = Matrix::from_vec(*channels, *positions, g.row(i).to_vec())?;
                        let pulled = map.pullback(&gi)?;
                        gx.row_mut(i).copy_from_slice(pulled.as_slice());
                    }
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut gl = probs.scale(scale);
                    for (i, &y) in labels.iter().enumerate() {
                        gl[(i, y)] -= scale;
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
                Op::WeightedSum(terms) => {
                    let s = g[(0, 0)];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Matrix::from_rows(&[[w * s]]))?;
                    }
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn split_positions(x: &Matrix, channels: usize, positions: usize) -> Matrix {
    let b = x.rows();
    let mut out = Matrix::zeros(b * positions, channels);
    for i in 0..b {
        let row = x.row(i);
        for c in 0..channels {
            for s in 0..positions {
                out[(i * positions + s, c)] = row[c * positions + s];
            }
        }
    }
    out
}

fn merge_positions(x: &Matrix, channels: usize, positions: usize) -> Matrix {
    let b = x.rows() / positions;
    let mut out = Matrix::zeros(b, channels * positions);
    for i in 0..b {
        for c in 0..channels {
            for s in 0..positions {
                out[(i, c * positions + s)] = x[(i * positions + s, c)];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, contribution: Matrix) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.axpy(1.0, &contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

/// Returns the mean cross-entropy and the row-wise softmax probabilities.
pub(crate) fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, n) = logits.shape();
    if b == 0 || labels.is_empty() {
        return Err(Error::EmptyInput("cross-entropy batch"));
    }
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{b} labels"), labels.len()));
    }
    let mut probs = Matrix::zeros(b, n);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::Config(format!("label {y} out of range for {n} logits")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy"));
    }
    Ok((loss, probs))
}
