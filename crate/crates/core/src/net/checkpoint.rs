//! Parameter checkpoint format.
//!
//! ```text
//! magic      4 bytes  "DCCD"
//! version    u32
//! channels   u32
//! positions  u32
//! encoder    u8       0 dense, 1 positionwise
//! pooling    u8       0 mean, 1 flatten
//! networks   u32      always 4: encoder, mapper, classifier, discriminator
//! per network:
//!   layers   u32
//!   per layer: rows u32, cols u32, activation u8 (0 identity, 1 tanh)
//! then per network, per layer: rows·cols weights, cols biases (f64)
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::binio::{LeReader, LeWriter};
use crate::error::Result;
use crate::linalg::Matrix;

use super::stack::{Activation, Dense, EncoderKind, NetworkStack, Pooling, StackSpec};

pub const STACK_MAGIC: &[u8; 4] = b"DCCD";
pub const STACK_FORMAT_VERSION: u32 = 1;

pub fn write_stack<W: Write>(stack: &NetworkStack, out: W) -> Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(STACK_MAGIC)?;
    w.u32(STACK_FORMAT_VERSION)?;
    w.len(stack.spec().channels)?;
    w.len(stack.spec().positions)?;
    w.u8(stack.spec().encoder.tag())?;
    w.u8(stack.spec().pooling.tag())?;
    let networks = stack.networks();
    w.len(networks.len())?;
    for (_, layers) in &networks {
        w.len(layers.len())?;
        for l in layers {
            w.len(l.weight.rows())?;
            w.len(l.weight.cols())?;
            w.u8(l.activation.tag())?;
        }
    }
    for (_, layers) in &networks {
        for l in layers {
            w.f64s(l.weight.as_slice())?;
            w.f64s(l.bias.as_slice())?;
        }
    }
    w.finish()?;
    Ok(())
}

pub fn read_stack<R: Read>(input: R) -> Result<NetworkStack> {
    let mut r = LeReader::new(input, "network checkpoint");
    r.magic(STACK_MAGIC)?;
    r.version(STACK_FORMAT_VERSION)?;
    let channels = r.len()?;
    let positions = r.len()?;
    let tag = r.u8()?;
    let encoder_kind = EncoderKind::from_tag(tag).ok_or_else(|| r.fail(format!("encoder tag {tag}")))?;
    let tag = r.u8()?;
    let pooling = Pooling::from_tag(tag).ok_or_else(|| r.fail(format!("pooling tag {tag}")))?;
    if r.len()? != 4 {
        return Err(r.fail("expected 4 networks"));
    }
    let mut shapes: Vec<Vec<(usize, usize, Activation)>> = Vec::with_capacity(4);
    for _ in 0..4 {
        let n = r.len()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = r.len()?;
            let cols = r.len()?;
            let tag = r.u8()?;
            let act = Activation::from_tag(tag).ok_or_else(|| r.fail(format!("activation tag {tag}")))?;
            layers.push((rows, cols, act));
        }
        shapes.push(layers);
    }
    let mut nets: Vec<Vec<Dense>> = Vec::with_capacity(4);
    for layers in &shapes {
        let mut dense = Vec::with_capacity(layers.len());
        for &(rows, cols, activation) in layers {
            let weight = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
            let bias = Matrix::from_vec(1, cols, r.f64s(cols)?)?;
            dense.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        nets.push(dense);
    }
    r.expect_end()?;

    let mut it = nets.into_iter();
    let (encoder, mut mapper, mut classifier, discriminator) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    if encoder.is_empty() || mapper.is_empty() || classifier.len() != 1 || discriminator.is_empty() {
        return Err(r.fail("unexpected layer counts"));
    }
    let head = mapper.pop().unwrap();
    let classifier = classifier.pop().unwrap();
    let input_dim = match encoder_kind {
        EncoderKind::Dense => encoder[0].inputs(),
        EncoderKind::Positionwise => encoder[0].inputs() * positions,
    };
    let spec = StackSpec {
        input_dim,
        encoder: encoder_kind,
        encoder_hidden: encoder[..encoder.len() - 1].iter().map(Dense::outputs).collect(),
        channels,
        positions,
        mapper_hidden: mapper.iter().map(Dense::outputs).collect(),
        pooling,
        embed_dim: head.outputs(),
        classes: classifier.outputs(),
        domains: discriminator.last().map_or(0, Dense::outputs),
        discriminator_hidden: discriminator[..discriminator.len() - 1].iter().map(Dense::outputs).collect(),
    };
    NetworkStack::from_layers(spec, encoder, mapper, head, classifier, discriminator)
        .map_err(|e| r.fail(e.to_string()))
}
