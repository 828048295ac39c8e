//! Training loops for the domain-adversarial baseline and the DCCD objective.
//!
//! Both loops draw domain-balanced batches. The reported total follows
//!
//! ```text
//! baseline:  [ce]·L_CE − [adv]·L_ADV
//! dccd:      [ce]·L_CE − [adv]·L_ADV + γ·([ce*]·L_CE* − [adv*]·L_ADV*)
//! ```
//!
//! where every `L_ADV` is the discriminator's cross-entropy; the generator
//! sees its negation through gradient reversal.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dccd::{transfer_maps, DomainStyleBank, FeatureMap, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{sgd_step, EncoderKind, NetworkStack, OptimState, Pooling, StackSpec, Tape, Var};
use crate::synth::Dataset;

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const INTERVENTION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub use_ce: bool,
    pub use_adv: bool,
    pub use_ce_star: bool,
    pub use_adv_star: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            use_ce: true,
            use_adv: false,
            use_ce_star: true,
            use_adv_star: true,
        }
    }
}

impl LossToggles {
    pub fn any_star(&self) -> bool {
        self.use_ce_star || self.use_adv_star
    }
}

/// Widths of the toy network; input, class and domain counts come from
/// the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub encoder: EncoderKind,
    pub encoder_hidden: Vec<usize>,
    pub channels: usize,
    pub positions: usize,
    pub mapper_hidden: Vec<usize>,
    pub pooling: Pooling,
    pub embed_dim: usize,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Positionwise,
            encoder_hidden: vec![16],
            channels: 4,
            positions: 16,
            mapper_hidden: vec![16],
            pooling: Pooling::Flatten,
            embed_dim: 16,
            discriminator_hidden: vec![16],
        }
    }
}

impl Architecture {
    pub fn stack_spec(&self, dataset: &Dataset) -> StackSpec {
        StackSpec {
            input_dim: dataset.input_dim,
            encoder: self.encoder,
            encoder_hidden: self.encoder_hidden.clone(),
            channels: self.channels,
            positions: self.positions,
            mapper_hidden: self.mapper_hidden.clone(),
            pooling: self.pooling,
            embed_dim: self.embed_dim,
            classes: dataset.source_classes,
            domains: dataset.source_domains,
            discriminator_hidden: self.discriminator_hidden.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub beta: f64,
    pub epochs: usize,
    /// Split evenly across source domains; any remainder is dropped.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    /// Gradient reversal strength.
    pub reversal: f64,
    pub losses: LossToggles,
    pub seed: u64,
    /// Epoch interval for stack/bank snapshots (epoch 0 and the last epoch
    /// are always kept).
    pub snapshot_every: usize,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            beta: 0.3,
            epochs: 60,
            batch_size: 48,
            learning_rate: 0.05,
            lr_decay: 0.1,
            lr_decay_every: 40,
            momentum: 0.9,
            weight_decay: 5e-4,
            epsilon: DEFAULT_EPSILON,
            reversal: 0.1,
            losses: LossToggles::default(),
            seed: 7,
            snapshot_every: 10,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.lr_decay_every.max(1);
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }

    fn validate(&self, dataset: &Dataset, objective: Objective) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let t = &self.losses;
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("beta {} outside (0, 1]", self.beta));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon {} must be > 0", self.epsilon));
        }
        if !(self.reversal >= 0.0) {
            return fail(format!("reversal {} must be >= 0", self.reversal));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return fail("lr decay factor must be > 0 and interval >= 1".into());
        }
        if self.snapshot_every == 0 {
            return fail("snapshot_every must be >= 1".into());
        }
        if objective == Objective::Baseline && t.any_star() {
            return fail("the baseline objective has no generated-sample losses".into());
        }
        let star_weight = if objective == Objective::Dccd { self.gamma } else { 0.0 };
        if !t.use_ce && !(t.use_ce_star && star_weight > 0.0) {
            return fail("at least one classification loss must be active".into());
        }
        let k = dataset.source_domains;
        if (t.use_adv || (objective == Objective::Dccd && t.use_adv_star)) && k < 2 {
            return fail(format!("adversarial losses need >= 2 source domains, got {k}"));
        }
        if self.batch_size < k {
            return fail(format!("batch size {} smaller than {k} domains", self.batch_size));
        }
        if dataset.train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Baseline,
    Dccd,
}

/// Batch means over one epoch (epoch 0 is a pass before any update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub ce: f64,
    pub adv: f64,
    pub ce_star: Option<f64>,
    pub adv_star: Option<f64>,
    pub class_accuracy: f64,
    pub domain_accuracy: f64,
    pub domain_accuracy_star: Option<f64>,
}

impl EpochLog {
    /// Recomputes the objective from its logged components.
    pub fn recomposed_total(&self, config: &TrainConfig) -> f64 {
        let t = &config.losses;
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let mut total = on(t.use_ce) * self.ce - on(t.use_adv) * self.adv;
        if let (Some(ce_star), Some(adv_star)) = (self.ce_star, self.adv_star) {
            total += config.gamma * (on(t.use_ce_star) * ce_star - on(t.use_adv_star) * adv_star);
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub stack: NetworkStack,
    pub bank: Option<DomainStyleBank>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub objective: Objective,
    pub config: TrainConfig,
    /// Epoch 0 followed by one record per training epoch.
    pub log: Vec<EpochLog>,
    pub snapshots: Vec<Snapshot>,
    pub stack: NetworkStack,
    pub bank: Option<DomainStyleBank>,
}

impl TrainReport {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for record in &self.log {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<EpochLog>> {
    let mut log = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            log.push(serde_json::from_str(&line)?);
        }
    }
    Ok(log)
}

fn is_snapshot_epoch(epoch: usize, epochs: usize, every: usize) -> bool {
    epoch.is_multiple_of(every) || epoch == epochs
}

/// Epochs at which training keeps a snapshot: 0, every `every`-th, and the last.
pub fn snapshot_epochs(epochs: usize, every: usize) -> Vec<usize> {
    (0..=epochs).filter(|&e| is_snapshot_epoch(e, epochs, every)).collect()
}

/// Optimizes `E[−L_ADV + L_CE]` per the loss toggles.
pub fn train_baseline_dal(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    Trainer::new(dataset, config, Objective::Baseline)?.run()
}

/// Optimizes `γ·[−L_ADV* + L_CE*] + L_CE` on bank-colored interventions,
/// after one statistics-only warmup epoch.
pub fn train_dccd(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    Trainer::new(dataset, config, Objective::Dccd)?.run()
}

#[derive(Default)]
struct Totals {
    batches: usize,
    total: f64,
    ce: f64,
    adv: f64,
    ce_star: f64,
    adv_star: f64,
    class_accuracy: f64,
    domain_accuracy: f64,
    domain_accuracy_star: f64,
}

struct Step {
    loss: Var,
    total: f64,
    ce: f64,
    adv: f64,
    star: Option<(f64, f64, f64)>,
    class_accuracy: f64,
    domain_accuracy: f64,
}

struct Trainer<'a> {
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    objective: Objective,
    stack: NetworkStack,
    bank: Option<DomainStyleBank>,
    by_domain: Vec<Vec<usize>>,
    per_domain: usize,
    batch_rng: ChaCha8Rng,
    star_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn argmax_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            row.iter().enumerate().all(|(c, &v)| c == y || v < row[y])
        })
        .count();
    hits as f64 / labels.len() as f64
}

impl<'a> Trainer<'a> {
    fn new(dataset: &'a Dataset, config: &'a TrainConfig, objective: Objective) -> Result<Self> {
        config.validate(dataset, objective)?;
        let spec = config.architecture.stack_spec(dataset);
        let stack = NetworkStack::new(spec, &mut stream(config.seed, INIT_STREAM))?;
        let k = dataset.source_domains;
        let by_domain = dataset.train_indices_by_domain();
        if let Some(d) = by_domain.iter().position(|v| v.is_empty()) {
            return Err(Error::Config(format!("source domain {d} has no training samples")));
        }
        let per_domain = config.batch_size / k;
        let bank = match objective {
            Objective::Dccd => Some(DomainStyleBank::new(k, config.architecture.channels, config.beta)?),
            Objective::Baseline => None,
        };
        Ok(Self {
            dataset,
            config,
            objective,
            stack,
            bank,
            by_domain,
            per_domain,
            batch_rng: stream(config.seed, BATCH_STREAM),
            star_rng: stream(config.seed, INTERVENTION_STREAM),
        })
    }

    fn batches_per_epoch(&self) -> usize {
        let smallest = self.by_domain.iter().map(Vec::len).min().unwrap_or(0);
        (smallest / self.per_domain).max(1)
    }

    /// Domain-balanced batches; `order` holds one index list per domain.
    fn batches(&self, order: &[Vec<usize>]) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch())
            .map(|b| {
                order
                    .iter()
                    .flat_map(|idx| (0..self.per_domain).map(move |i| idx[(b * self.per_domain + i) % idx.len()]))
                    .collect()
            })
            .collect()
    }

    fn shuffled_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order = self.by_domain.clone();
        for idx in &mut order {
            idx.shuffle(&mut self.batch_rng);
        }
        self.batches(&order)
    }

    fn batch_data(&self, batch: &[usize]) -> (Matrix, Vec<usize>, Vec<usize>) {
        let samples: Vec<_> = batch.iter().map(|&i| &self.dataset.train[i]).collect();
        let x = Dataset::inputs(&samples);
        (x, samples.iter().map(|s| s.y).collect(), samples.iter().map(|s| s.d).collect())
    }

    /// Statistics-only pass in dataset order.
    fn warmup(&mut self) -> Result<()> {
        let batches = self.batches(&self.by_domain.clone());
        for (b, batch) in batches.iter().enumerate() {
            let (x, _, d) = self.batch_data(batch);
            self.stack
                .encode(&x)
                .and_then(|features| update_bank(&mut self.bank, &self.config.architecture, &features, &d))
                .map_err(|e| numeric(0, b, e))?;
        }
        Ok(())
    }

    /// Records the forward graph; updates the bank first when `update` is set.
    fn forward(&mut self, tape: &mut Tape, batch: &[usize], update: bool) -> Result<(Step, Vec<Matrix>)> {
        let (x, y, d) = self.batch_data(batch);
        let cfg = self.config;
        let t = cfg.losses;
        let arch = &cfg.architecture;
        let net = self.stack.bind(tape);
        let xv = tape.leaf(x);
        let f = net.encode(tape, xv)?;
        if update {
            update_bank(&mut self.bank, arch, tape.value(f), &d)?;
        }
        let z = net.map(tape, f)?;
        let logits = net.classify(tape, z)?;
        let ce = tape.cross_entropy(logits, &y)?;
        let zr = tape.grad_reverse(z, cfg.reversal);
        let dlogits = net.discriminate(tape, zr)?;
        let adv = tape.cross_entropy(dlogits, &d)?;

        let mut terms = Vec::new();
        if t.use_ce {
            terms.push((ce, 1.0));
        }
        if t.use_adv {
            terms.push((adv, 1.0));
        }
        let mut total = if t.use_ce { tape.scalar(ce) } else { 0.0 };
        if t.use_adv {
            total -= tape.scalar(adv);
        }

        let mut star = None;
        if let Some(bank) = &self.bank {
            let k = bank.domain_count();
            let targets: Vec<usize> = (0..y.len()).map(|_| self.star_rng.random_range(0..k)).collect();
            let styles = bank.styles(cfg.epsilon)?;
            let maps = transfer_maps(tape.value(f), arch.channels, arch.positions, &targets, &styles, cfg.epsilon)?;
            let f_star = tape.frozen_map(f, arch.channels, arch.positions, maps)?;
            let z_star = net.map(tape, f_star)?;
            let logits_star = net.classify(tape, z_star)?;
            let ce_star = tape.cross_entropy(logits_star, &y)?;
            let zr_star = tape.grad_reverse(z_star, cfg.reversal);
            let dlogits_star = net.discriminate(tape, zr_star)?;
            let adv_star = tape.cross_entropy(dlogits_star, &targets)?;
            if cfg.gamma > 0.0 {
                if t.use_ce_star {
                    terms.push((ce_star, cfg.gamma));
                }
                if t.use_adv_star {
                    terms.push((adv_star, cfg.gamma));
                }
            }
            let (cs, ads) = (tape.scalar(ce_star), tape.scalar(adv_star));
            if t.use_ce_star {
                total += cfg.gamma * cs;
            }
            if t.use_adv_star {
                total -= cfg.gamma * ads;
            }
            star = Some((cs, ads, argmax_accuracy(tape.value(dlogits_star), &targets)));
        }

        let loss = tape.weighted_sum(&terms)?;
        let step = Step {
            loss,
            total,
            ce: tape.scalar(ce),
            adv: tape.scalar(adv),
            star,
            class_accuracy: argmax_accuracy(tape.value(logits), &y),
            domain_accuracy: argmax_accuracy(tape.value(dlogits), &d),
        };
        let grads = if update {
            let g = tape.backward(loss)?;
            net.param_grads(&g)
        } else {
            Vec::new()
        };
        Ok((step, grads))
    }

    fn accumulate(totals: &mut Totals, step: &Step) -> Result<()> {
        let mut values = vec![step.total, step.ce, step.adv];
        if let Some((a, b, _)) = step.star {
            values.extend([a, b]);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        totals.batches += 1;
        totals.total += step.total;
        totals.ce += step.ce;
        totals.adv += step.adv;
        totals.class_accuracy += step.class_accuracy;
        totals.domain_accuracy += step.domain_accuracy;
        if let Some((a, b, acc)) = step.star {
            totals.ce_star += a;
            totals.adv_star += b;
            totals.domain_accuracy_star += acc;
        }
        Ok(())
    }

    fn log_record(&self, epoch: usize, totals: &Totals) -> EpochLog {
        let n = totals.batches as f64;
        let star = self.bank.is_some();
        EpochLog {
            epoch,
            learning_rate: if epoch == 0 { 0.0 } else { self.config.learning_rate_at(epoch) },
            total: totals.total / n,
            ce: totals.ce / n,
            adv: totals.adv / n,
            ce_star: star.then(|| totals.ce_star / n),
            adv_star: star.then(|| totals.adv_star / n),
            class_accuracy: totals.class_accuracy / n,
            domain_accuracy: totals.domain_accuracy / n,
            domain_accuracy_star: star.then(|| totals.domain_accuracy_star / n),
        }
    }

    fn snapshot(&self, epoch: usize) -> Snapshot {
        Snapshot {
            epoch,
            stack: self.stack.clone(),
            bank: self.bank.clone(),
        }
    }

    fn run(mut self) -> Result<TrainReport> {
        let cfg = self.config;
        if self.objective == Objective::Dccd {
            self.warmup()?;
        }
        let mut log = Vec::with_capacity(cfg.epochs + 1);
        let mut snapshots = Vec::new();

        // epoch 0: evaluation pass in dataset order, no updates
        let mut totals = Totals::default();
        for (b, batch) in self.batches(&self.by_domain.clone()).iter().enumerate() {
            let mut tape = Tape::new();
            let (step, _) = self.forward(&mut tape, batch, false).map_err(|e| numeric(0, b, e))?;
            Self::accumulate(&mut totals, &step).map_err(|e| numeric(0, b, e))?;
        }
        log.push(self.log_record(0, &totals));
        snapshots.push(self.snapshot(0));

        let mut optim = OptimState::new(&self.stack, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
        for epoch in 1..=cfg.epochs {
            optim.learning_rate = cfg.learning_rate_at(epoch);
            let mut totals = Totals::default();
            for (b, batch) in self.shuffled_batches().iter().enumerate() {
                let mut tape = Tape::new();
                let (step, grads) = self.forward(&mut tape, batch, true).map_err(|e| numeric(epoch, b, e))?;
                Self::accumulate(&mut totals, &step).map_err(|e| numeric(epoch, b, e))?;
                debug_assert_eq!(tape.value(step.loss).shape(), (1, 1));
                sgd_step(&mut self.stack, &mut optim, &grads).map_err(|e| numeric(epoch, b, e))?;
                if !self.stack.params().iter().all(|p| p.is_finite()) {
                    return Err(numeric(epoch, b, Error::NonFinite("parameters")));
                }
            }
            log.push(self.log_record(epoch, &totals));
            if is_snapshot_epoch(epoch, cfg.epochs, cfg.snapshot_every) {
                snapshots.push(self.snapshot(epoch));
            }
        }
        Ok(TrainReport {
            objective: self.objective,
            config: cfg.clone(),
            log,
            snapshots,
            stack: self.stack,
            bank: self.bank,
        })
    }
}

fn update_bank(bank: &mut Option<DomainStyleBank>, arch: &Architecture, features: &Matrix, domains: &[usize]) -> Result<()> {
    let Some(bank) = bank else {
        return Ok(());
    };
    let maps = FeatureMap::batch(features, arch.channels, arch.positions)?;
    let pairs: Vec<(&FeatureMap, usize)> = maps.iter().zip(domains.iter().copied()).collect();
    bank.update(&pairs)
}

fn numeric(epoch: usize, batch: usize, source: Error) -> Error {
    match source {
        Error::Config(_) | Error::Numeric { .. } => source,
        other => Error::Numeric {
            epoch,
            batch,
            source: Box::new(other),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, WorldSpec};

    fn small_world() -> Dataset {
        generate(&WorldSpec {
            ids_per_domain: vec![4, 4, 4],
            target_domains: 1,
            target_ids_per_domain: 4,
            samples_per_id: 12,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 24,
            snapshot_every: 2,
            architecture: Architecture {
                encoder_hidden: vec![16],
                channels: 4,
                positions: 8,
                mapper_hidden: vec![8],
                embed_dim: 8,
                ..Architecture::default()
            },
            ..TrainConfig::default()
        }
    }

    fn ce_only() -> LossToggles {
        LossToggles {
            use_ce: true,
            use_adv: false,
            use_ce_star: false,
            use_adv_star: false,
        }
    }

    #[test]
    fn schedule_decays_at_interval() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(1), 0.05);
        assert_eq!(c.learning_rate_at(40), 0.05);
        assert!((c.learning_rate_at(41) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn ce_only_loss_decreases() {
        let data = small_world();
        let cfg = TrainConfig {
            losses: ce_only(),
            ..quick(5)
        };
        let r = train_baseline_dal(&data, &cfg).unwrap();
        for w in r.log.windows(2) {
            assert!(w[1].ce < w[0].ce, "{} -> {}", w[0].ce, w[1].ce);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = small_world();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(2)
        };
        let r = train_dccd(&data, &cfg).unwrap();
        assert_eq!(r.snapshots[0].stack, r.stack);
    }

    #[test]
    fn zero_gamma_matches_ce_baseline() {
        let data = small_world();
        let base = TrainConfig {
            losses: ce_only(),
            ..quick(3)
        };
        let dccd = TrainConfig {
            gamma: 0.0,
            losses: LossToggles::default(),
            ..quick(3)
        };
        let a = train_baseline_dal(&data, &base).unwrap();
        let b = train_dccd(&data, &dccd).unwrap();
        assert_eq!(a.stack, b.stack);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let data = small_world();
        let cfg = quick(3);
        let a = train_dccd(&data, &cfg).unwrap();
        let b = train_dccd(&data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.bank, b.bank);
    }

    #[test]
    fn logged_total_recomposes() {
        let data = small_world();
        for losses in [LossToggles::default(), LossToggles { use_adv: true, ..LossToggles::default() }] {
            let cfg = TrainConfig { losses, ..quick(2) };
            let r = train_dccd(&data, &cfg).unwrap();
            for e in &r.log {
                assert!((e.total - e.recomposed_total(&cfg)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn snapshots_cover_schedule() {
        let data = small_world();
        let r = train_dccd(&data, &quick(5)).unwrap();
        let epochs: Vec<usize> = r.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4, 5]);
        assert_eq!(snapshot_epochs(5, 2), epochs);
        assert!(r.snapshots.iter().all(|s| s.bank.as_ref().unwrap().all_initialized()));
        assert_eq!(r.log.len(), 6);
    }

    #[test]
    fn config_errors() {
        let data = small_world();
        let star_in_baseline = quick(1);
        assert!(matches!(train_baseline_dal(&data, &star_in_baseline), Err(Error::Config(_))));
        let no_classifier = TrainConfig {
            losses: LossToggles {
                use_ce: false,
                ..LossToggles::default()
            },
            gamma: 0.0,
            ..quick(1)
        };
        assert!(matches!(train_dccd(&data, &no_classifier), Err(Error::Config(_))));
        let single = generate(&WorldSpec {
            ids_per_domain: vec![4],
            target_domains: 1,
            samples_per_id: 6,
            ..WorldSpec::default()
        })
        .unwrap();
        let adv = TrainConfig {
            losses: LossToggles {
                use_adv: true,
                ..ce_only()
            },
            ..quick(1)
        };
        assert!(matches!(train_baseline_dal(&single, &adv), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_has_one_record_per_epoch() {
        let data = small_world();
        let r = train_dccd(&data, &quick(2)).unwrap();
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 0);
    }
}
