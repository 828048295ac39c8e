//! Confounded multi-domain classification worlds.
//!
//! Every domain owns a disjoint block of class ids and an affine style:
//! `x = A_d·(prototype(y) + noise) + b_d`. The domain assignment process is
//! the confounder: it fixes both which style a sample gets and which label
//! block its class comes from. Target domains use styles and ids that never
//! appear in the training split.
//!
//! The input vector is viewed as `style_channels` channels over
//! `input_dim / style_channels` positions; a style mixes channels the same
//! way at every position (`A_d = mix_d ⊗ I`) and shifts each channel by a
//! constant. Setting `style_channels = input_dim` gives a fully dense mix.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "DCDS" | version u32 | seed u64 | input_dim u32
//! | source_domains u32 | target_domains u32 | source_classes u32
//! | total_classes u32 | samples u64
//! | samples × input_dim f64          (train split first, then target)
//! | samples × (y u32, d u32)
//! ```

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::eval::entropy_bits;
use crate::linalg::Matrix;

pub const DATASET_MAGIC: &[u8; 4] = b"DCDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Ids per source domain; its length is the source domain count `K`.
    pub ids_per_domain: Vec<usize>,
    pub target_domains: usize,
    pub target_ids_per_domain: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub class_signal_dim: usize,
    pub style_channels: usize,
    /// Scale of the random perturbation `mix_d = I + s·G/√c`.
    pub style_strength: f64,
    pub shift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            ids_per_domain: vec![10, 10, 10],
            target_domains: 2,
            target_ids_per_domain: 10,
            samples_per_id: 30,
            input_dim: 48,
            class_signal_dim: 16,
            style_channels: 3,
            style_strength: 0.6,
            shift_scale: 1.0,
            noise_scale: 0.6,
            seed: 2024,
        }
    }
}

impl WorldSpec {
    pub fn source_domains(&self) -> usize {
        self.ids_per_domain.len()
    }

    pub fn source_classes(&self) -> usize {
        self.ids_per_domain.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("world: {msg}")));
        if self.ids_per_domain.is_empty() || self.ids_per_domain.contains(&0) {
            return bad("every source domain needs at least one id".into());
        }
        if self.target_domains > 0 && self.target_ids_per_domain == 0 {
            return bad("target domains need at least one id".into());
        }
        if self.samples_per_id == 0 || self.input_dim == 0 || self.class_signal_dim == 0 {
            return bad("samples_per_id, input_dim and class_signal_dim must be positive".into());
        }
        if self.class_signal_dim > self.input_dim {
            return bad(format!(
                "class_signal_dim {} exceeds input_dim {}",
                self.class_signal_dim, self.input_dim
            ));
        }
        if self.style_channels == 0 || !self.input_dim.is_multiple_of(self.style_channels) {
            return bad(format!(
                "style_channels {} must divide input_dim {}",
                self.style_channels, self.input_dim
            ));
        }
        for (name, v) in [
            ("style_strength", self.style_strength),
            ("shift_scale", self.shift_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    /// Global class index.
    pub y: usize,
    pub d: usize,
}

/// Affine style of one domain in input space.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Full `input_dim x input_dim` mixing matrix.
    pub mixing: Matrix,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub input_dim: usize,
    pub source_domains: usize,
    pub target_domains: usize,
    pub source_classes: usize,
    pub total_classes: usize,
    pub train: Vec<LabeledSample>,
    pub target: Vec<LabeledSample>,
}

/// A generated world: ground-truth structure plus the sampled dataset.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    /// Embedded prototypes, one per global class (`input_dim` each).
    pub prototypes: Vec<Vec<f64>>,
    /// Source styles first, then target styles.
    pub styles: Vec<DomainStyle>,
    pub dataset: Dataset,
}

/// Query/gallery partition of one target domain (indices into `target`).
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSplit {
    pub domain: usize,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    build_world(spec).map(|w| w.dataset)
}

pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.input_dim;

    let isometry = random_isometry(n, spec.class_signal_dim, &mut rng);
    let k = spec.source_domains();
    let source_classes = spec.source_classes();
    let total_classes = source_classes + spec.target_domains * spec.target_ids_per_domain;
    let prototypes: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| {
            let g: Vec<f64> = (0..spec.class_signal_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            isometry
                .matmul(&Matrix::column(&g))
                .expect("isometry shape")
                .into_vec()
        })
        .collect();

    let styles: Vec<DomainStyle> = (0..k + spec.target_domains)
        .map(|_| random_style(spec, &mut rng))
        .collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(source_classes * spec.samples_per_id);
    let mut target = Vec::new();
    let mut offset = 0;
    let blocks = spec
        .ids_per_domain
        .iter()
        .copied()
        .chain(std::iter::repeat_n(spec.target_ids_per_domain, spec.target_domains));
    for (d, ids) in blocks.enumerate() {
        let style = &styles[d];
        for local in 0..ids {
            let y = offset + local;
            for _ in 0..spec.samples_per_id {
                let clean: Vec<f64> = prototypes[y]
                    .iter()
                    .map(|p| p + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut x = style
                    .mixing
                    .matmul(&Matrix::column(&clean))
                    .expect("mixing shape")
                    .into_vec();
                for (xi, b) in x.iter_mut().zip(&style.shift) {
                    *xi += b;
                }
                let sample = LabeledSample { x, y, d };
                if d < k {
                    train.push(sample);
                } else {
                    target.push(sample);
                }
            }
        }
        offset += ids;
    }

    Ok(World {
        spec: spec.clone(),
        prototypes,
        styles,
        dataset: Dataset {
            seed: spec.seed,
            input_dim: n,
            source_domains: k,
            target_domains: spec.target_domains,
            source_classes,
            total_classes,
            train,
            target,
        },
    })
}

/// Orthonormal columns from Gram-Schmidt on a Gaussian matrix.
fn random_isometry(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
        let mut ok = true;
        for _ in 0..cols {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
        if ok {
            let mut m = Matrix::zeros(rows, cols);
            for (j, b) in basis.iter().enumerate() {
                for (i, &v) in b.iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            return m;
        }
    }
}

fn random_style(spec: &WorldSpec, rng: &mut impl Rng) -> Result<DomainStyle> {
    let c = spec.style_channels;
    let p = spec.input_dim / c;
    for _ in 0..100 {
        let mut mix = Matrix::identity(c);
        let s = spec.style_strength / (c as f64).sqrt();
        for v in mix.as_mut_slice() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
        let shift: Vec<f64> = (0..c)
            .map(|_| spec.shift_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if min_pivot(&mix) < 1e-6 {
            continue;
        }
        let mut mixing = Matrix::zeros(spec.input_dim, spec.input_dim);
        for a in 0..c {
            for b in 0..c {
                for pos in 0..p {
                    mixing[(a * p + pos, b * p + pos)] = mix[(a, b)];
                }
            }
        }
        let shift = (0..spec.input_dim).map(|i| shift[i / p]).collect();
        return Ok(DomainStyle { mixing, shift });
    }
    Err(Error::Config("could not draw a nonsingular style mixing matrix".into()))
}

/// Smallest absolute pivot of Gaussian elimination with partial pivoting,
/// relative to the largest entry.
fn min_pivot(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut a = m.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut smallest = f64::INFINITY;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        if pivot_row != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot_row, j)];
                a[(pivot_row, j)] = tmp;
            }
        }
        let p = a[(col, col)];
        smallest = smallest.min(p.abs() / scale);
        if p == 0.0 {
            return 0.0;
        }
        for i in (col + 1)..n {
            let f = a[(i, col)] / p;
            for j in col..n {
                a[(i, j)] -= f * a[(col, j)];
            }
        }
    }
    smallest
}

impl Dataset {
    /// Stacks the inputs of the given samples into a `[n x input_dim]` matrix.
    pub fn inputs(samples: &[&LabeledSample]) -> Matrix {
        let cols = samples.first().map_or(0, |s| s.x.len());
        let mut data = Vec::with_capacity(samples.len() * cols);
        for s in samples {
            data.extend_from_slice(&s.x);
        }
        Matrix::from_vec(samples.len(), cols, data).expect("equal sample widths")
    }

    /// Training-sample indices grouped by source domain.
    pub fn train_indices_by_domain(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.source_domains];
        for (i, s) in self.train.iter().enumerate() {
            groups[s.d].push(i);
        }
        groups
    }

    /// Per target domain: the first `queries_per_id` samples of every id are
    /// queries, the rest form the gallery.
    pub fn target_splits(&self, queries_per_id: usize) -> Vec<RetrievalSplit> {
        let mut splits: Vec<RetrievalSplit> = (0..self.target_domains)
            .map(|t| RetrievalSplit {
                domain: self.source_domains + t,
                query: Vec::new(),
                gallery: Vec::new(),
            })
            .collect();
        let mut seen = std::collections::HashMap::new();
        for (i, s) in self.target.iter().enumerate() {
            let count = seen.entry(s.y).or_insert(0usize);
            let split = &mut splits[s.d - self.source_domains];
            if *count < queries_per_id {
                split.query.push(i);
            } else {
                split.gallery.push(i);
            }
            *count += 1;
        }
        splits
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = LeWriter::new(out);
        w.bytes(DATASET_MAGIC)?;
        w.u32(DATASET_FORMAT_VERSION)?;
        w.u64(self.seed)?;
        w.len(self.input_dim)?;
        w.len(self.source_domains)?;
        w.len(self.target_domains)?;
        w.len(self.source_classes)?;
        w.len(self.total_classes)?;
        w.u64((self.train.len() + self.target.len()) as u64)?;
        for s in self.train.iter().chain(&self.target) {
            w.f64s(&s.x)?;
        }
        for s in self.train.iter().chain(&self.target) {
            w.len(s.y)?;
            w.len(s.d)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = LeReader::new(input, "dataset");
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_FORMAT_VERSION)?;
        let seed = r.u64()?;
        let input_dim = r.len()?;
        let source_domains = r.len()?;
        let target_domains = r.len()?;
        let source_classes = r.len()?;
        let total_classes = r.len()?;
        let n = r.u64()? as usize;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| r.f64s(input_dim)).collect::<Result<_>>()?;
        let mut train = Vec::new();
        let mut target = Vec::new();
        for x in xs {
            let y = r.len()?;
            let d = r.len()?;
            if d >= source_domains + target_domains || y >= total_classes {
                return Err(r.fail(format!("label {y} / domain {d} out of range")));
            }
            let s = LabeledSample { x, y, d };
            if d < source_domains {
                train.push(s);
            } else {
                target.push(s);
            }
        }
        r.expect_end()?;
        Ok(Self {
            seed,
            input_dim,
            source_domains,
            target_domains,
            source_classes,
            total_classes,
            train,
            target,
        })
    }
}

/// Joint (y, d) probabilities of a sample set, as sorted count tables.
fn label_domain_counts(samples: &[LabeledSample]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    use std::collections::BTreeMap;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ys: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ds: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *joint.entry((s.y, s.d)).or_default() += 1;
        *ys.entry(s.y).or_default() += 1;
        *ds.entry(s.d).or_default() += 1;
    }
    let n = samples.len() as f64;
    let probs = |m: Vec<usize>| m.into_iter().map(|c| c as f64 / n).collect::<Vec<_>>();
    (
        probs(joint.into_values().collect()),
        probs(ys.into_values().collect()),
        probs(ds.into_values().collect()),
    )
}

/// Plug-in `I(y, d) = H(d) + H(y) − H(y, d)` in bits.
pub fn empirical_mutual_information_yd(samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("mutual information needs samples"));
    }
    let (joint, y, d) = label_domain_counts(samples);
    Ok(entropy_bits(&d) + (entropy_bits(&y) - entropy_bits(&joint)))
}

/// Plug-in `H(d | y) = H(y, d) − H(y)` in bits.
pub fn empirical_domain_given_label_entropy(samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("conditional entropy needs samples"));
    }
    let (joint, y, _) = label_domain_counts(samples);
    Ok(entropy_bits(&joint) - entropy_bits(&y))
}
