//! Spec-driven experiment runs: generation, training, evaluation, ablation
//! grids and the discrete theorem oracle.
//!
//! A spec is a TOML document with `[run]`, `[world]`, `[train]`, `[eval]`
//! and `[grid]` tables; every field has a default. Each run writes a
//! `manifest.toml` holding the fully resolved spec, which is itself a valid
//! spec that reproduces the run.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dccd::{do_test_embed, intervention_embeddings, read_bank, write_bank, DomainStyleBank, BANK_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::eval::{
    cmc_map, entropy_proxy_from_discriminator, marginal_match, random_disjoint_joint, verify_theorem1,
    AteReport, EntropyProxy, RefitConfig, RetrievalResult, RetrievalSummary,
};
use crate::linalg::Matrix;
use crate::net::{read_stack, write_stack, NetworkStack, STACK_FORMAT_VERSION};
use crate::synth::{generate, Dataset, WorldSpec, DATASET_FORMAT_VERSION};
use crate::train::{
    read_jsonl, snapshot_epochs, train_baseline_dal, train_dccd, LossToggles, Objective, Snapshot, TrainConfig,
    TrainReport,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const ERROR_FILE: &str = "error.json";
pub const DATASET_FILE: &str = "dataset.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const NETWORK_FILE: &str = "network.ckpt";
pub const BANK_FILE: &str = "bank.ckpt";
pub const CMC_FILE: &str = "cmc.csv";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BaselineDal,
    Dccd,
    AblationGrid,
    VerifyTheorems,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub mode: Mode,
    /// Output directory; the CLI `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Dccd,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Embed target data with the intervention average over bank styles.
    pub do_test: bool,
    /// Target samples used for ATE and marginal match.
    pub probe_size: usize,
    /// Training samples per source domain for the discriminator refit.
    pub proxy_per_domain: usize,
    pub queries_per_id: usize,
    pub cmc_ks: Vec<usize>,
    pub cmc_curve_max: usize,
    pub refit: RefitConfig,
    pub theorem_joints: usize,
    pub theorem_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            do_test: true,
            probe_size: 60,
            proxy_per_domain: 100,
            queries_per_id: 5,
            cmc_ks: vec![1, 5, 10],
            cmc_curve_max: 20,
            refit: RefitConfig::default(),
            theorem_joints: 1000,
            theorem_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    /// Training seeds per cell; empty means the `[train]` seed alone.
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub parallel: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            betas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            gammas: vec![0.05, 0.1, 0.25, 0.5, 1.0],
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub crate_version: String,
    pub dataset_format: u32,
    pub stack_format: u32,
    pub bank_format: u32,
}

impl ManifestInfo {
    fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: DATASET_FORMAT_VERSION,
            stack_format: STACK_FORMAT_VERSION,
            bank_format: BANK_FORMAT_VERSION,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub run: RunOptions,
    pub world: WorldSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub grid: GridOptions,
    /// Present in manifests; ignored on input.
    #[serde(skip_serializing)]
    pub manifest: Option<ManifestInfo>,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let e = &self.eval;
        if e.cmc_ks.contains(&0) || e.cmc_curve_max == 0 {
            return Err(Error::Config("eval: CMC ranks start at 1".into()));
        }
        if e.probe_size == 0 || e.queries_per_id == 0 || e.proxy_per_domain == 0 {
            return Err(Error::Config("eval: probe_size, queries_per_id and proxy_per_domain must be positive".into()));
        }
        if e.queries_per_id >= self.world.samples_per_id {
            return Err(Error::Config("eval: queries_per_id leaves no gallery samples".into()));
        }
        if matches!(self.run.mode, Mode::BaselineDal | Mode::Dccd | Mode::AblationGrid) && self.world.target_domains == 0 {
            return Err(Error::Config("world: retrieval needs at least one target domain".into()));
        }
        Ok(())
    }

    /// The resolved spec plus format versions, as TOML.
    pub fn manifest(&self) -> Result<String> {
        let mut body = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        let info = toml::to_string(&ManifestInfo::current()).map_err(|e| Error::Parse(e.to_string()))?;
        body.push_str("\n[manifest]\n");
        body.push_str(&info);
        Ok(body)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetRetrieval {
    pub domain: usize,
    #[serde(flatten)]
    pub summary: RetrievalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub do_test: bool,
    /// Averages over target domains.
    pub rank_k_accuracy: std::collections::BTreeMap<usize, f64>,
    pub mean_average_precision: f64,
    pub per_domain: Vec<TargetRetrieval>,
    #[serde(skip)]
    pub curve: Vec<f64>,
}

impl RetrievalMetrics {
    pub fn rank1(&self) -> f64 {
        self.curve[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for (k, acc) in self.curve.iter().enumerate() {
            out.push_str(&format!("{},{acc}\n", k + 1));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub ate_norm: f64,
    pub marginal_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mode: Mode,
    pub seed: u64,
    pub retrieval: RetrievalMetrics,
    pub entropy_proxy: EntropyProxy,
    pub final_losses: crate::train::EpochLog,
    pub ate: Option<AteReport>,
    pub marginal_match: Option<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Target-domain retrieval with plain or do-test embeddings.
pub fn target_retrieval(
    dataset: &Dataset,
    stack: &NetworkStack,
    bank: Option<&DomainStyleBank>,
    options: &EvalOptions,
    epsilon: f64,
) -> Result<RetrievalMetrics> {
    let do_test = options.do_test && bank.is_some();
    let embed = |x: &Matrix| match (do_test, bank) {
        (true, Some(b)) => do_test_embed(stack, x, b, None, epsilon),
        _ => stack.embed(x),
    };
    let splits = dataset.target_splits(options.queries_per_id);
    if splits.is_empty() {
        return Err(Error::EmptyInput("target domains"));
    }
    let curve_len = options
        .cmc_ks
        .iter()
        .copied()
        .chain([options.cmc_curve_max])
        .max()
        .unwrap_or(1);
    let mut curve = vec![0.0; curve_len];
    let mut map = 0.0;
    let mut per_domain = Vec::new();
    for split in &splits {
        let pick = |idx: &[usize]| -> (Matrix, Vec<usize>) {
            let samples: Vec<_> = idx.iter().map(|&i| &dataset.target[i]).collect();
            (Dataset::inputs(&samples), samples.iter().map(|s| s.y).collect())
        };
        let (qx, qy) = pick(&split.query);
        let (gx, gy) = pick(&split.gallery);
        let r: RetrievalResult = cmc_map(&embed(&qx)?, &embed(&gx)?, &qy, &gy)?;
        for (k, c) in curve.iter_mut().enumerate() {
            *c += r.rank(k + 1);
        }
        map += r.mean_average_precision;
        per_domain.push(TargetRetrieval {
            domain: split.domain,
            summary: r.summary(&options.cmc_ks),
        });
    }
    let n = splits.len() as f64;
    curve.iter_mut().for_each(|c| *c /= n);
    Ok(RetrievalMetrics {
        do_test,
        rank_k_accuracy: options.cmc_ks.iter().map(|&k| (k, curve[k - 1])).collect(),
        mean_average_precision: map / n,
        per_domain,
        curve,
    })
}

/// Evenly strided held-out target samples.
pub fn probe_inputs(dataset: &Dataset, size: usize) -> Matrix {
    let n = dataset.target.len();
    let take = size.min(n);
    let samples: Vec<_> = (0..take).map(|i| &dataset.target[i * n / take]).collect();
    Dataset::inputs(&samples)
}

fn proxy_samples(dataset: &Dataset, per_domain: usize) -> (Matrix, Vec<usize>) {
    let mut samples = Vec::new();
    for idx in dataset.train_indices_by_domain() {
        let take = per_domain.min(idx.len());
        samples.extend((0..take).map(|i| &dataset.train[idx[i * idx.len() / take]]));
    }
    let d = samples.iter().map(|s| s.d).collect();
    (Dataset::inputs(&samples), d)
}

/// ATE and marginal match of the intervention embeddings on a probe set.
pub fn intervention_diagnostics(
    stack: &NetworkStack,
    bank: &DomainStyleBank,
    probe: &Matrix,
    epsilon: f64,
) -> Result<(AteReport, f64)> {
    let per_domain = intervention_embeddings(stack, probe, bank, epsilon)?;
    let ate = crate::eval::ate_from_interventions(&per_domain)?;
    let mm = if per_domain.len() >= 2 { marginal_match(&per_domain)? } else { 0.0 };
    Ok((ate, mm))
}

pub fn evaluate(dataset: &Dataset, report: &TrainReport, options: &EvalOptions, mode: Mode) -> Result<Metrics> {
    let eps = report.config.epsilon;
    let retrieval = target_retrieval(dataset, &report.stack, report.bank.as_ref(), options, eps)?;
    let (px, pd) = proxy_samples(dataset, options.proxy_per_domain);
    let entropy_proxy = entropy_proxy_from_discriminator(&report.stack, &px, &pd, &options.refit)?;
    let probe = probe_inputs(dataset, options.probe_size);
    let (ate, marginal, trajectory) = match &report.bank {
        Some(bank) => {
            let (ate, mm) = intervention_diagnostics(&report.stack, bank, &probe, eps)?;
            let trajectory = report
                .snapshots
                .iter()
                .filter_map(|s| s.bank.as_ref().map(|b| (s, b)))
                .map(|(s, b)| {
                    intervention_diagnostics(&s.stack, b, &probe, eps).map(|(a, m)| TrajectoryPoint {
                        epoch: s.epoch,
                        ate_norm: a.ate_norm,
                        marginal_match: m,
                    })
                })
                .collect::<Result<_>>()?;
            (Some(ate), Some(mm), trajectory)
        }
        None => (None, None, Vec::new()),
    };
    Ok(Metrics {
        mode,
        seed: report.config.seed,
        retrieval,
        entropy_proxy,
        final_losses: report.log.last().cloned().ok_or(Error::EmptyInput("training log"))?,
        ate,
        marginal_match: marginal,
        trajectory,
    })
}

/// Summary of the randomized discrete check of the entropy bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremSummary {
    pub joints: usize,
    pub violations: usize,
    pub inapplicable: usize,
    pub premise_checks: usize,
    pub min_slack: f64,
    pub min_premise_slack: Option<f64>,
}

/// Half the joints force `H(d|z) = H(d)`; the rest are unrestricted.
pub fn verify_theorems(joints: usize, seed: u64) -> Result<TheoremSummary> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = TheoremSummary {
        joints,
        violations: 0,
        inapplicable: 0,
        premise_checks: 0,
        min_slack: f64::INFINITY,
        min_premise_slack: None,
    };
    for i in 0..joints {
        let nz = rng.random_range(1..6);
        let k = rng.random_range(1..5);
        let ids: Vec<usize> = (0..k).map(|_| rng.random_range(1..4)).collect();
        let joint = random_disjoint_joint(&mut rng, nz, &ids, i % 2 == 0)?;
        let r = verify_theorem1(&joint);
        if !r.applicable {
            s.inapplicable += 1;
            continue;
        }
        if !r.holds {
            s.violations += 1;
        }
        s.min_slack = s.min_slack.min(r.slack);
        if let Some(p) = r.premise_slack {
            s.premise_checks += 1;
            s.min_premise_slack = Some(s.min_premise_slack.map_or(p, |m: f64| m.min(p)));
        }
    }
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    message: String,
    epoch: Option<usize>,
    batch: Option<usize>,
}

/// Machine-readable error record.
pub fn error_json(err: &Error) -> String {
    let (epoch, batch) = match err {
        Error::Numeric { epoch, batch, .. } => (Some(*epoch), Some(*batch)),
        _ => (None, None),
    };
    serde_json::to_string(&ErrorRecord {
        kind: err.kind(),
        message: err.to_string(),
        epoch,
        batch,
    })
    .expect("error record serializes")
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub enum Outcome {
    Single(Box<Metrics>),
    Grid(GridSummary),
    Theorems(TheoremSummary),
}

/// Runs the spec, writing artifacts to `out`. On failure an `error.json`
/// record is left next to whatever was already written.
pub fn run(spec: &ExperimentSpec, out: &Path) -> Result<Outcome> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST_FILE), spec.manifest()?)?;
    let result = match spec.run.mode {
        Mode::BaselineDal | Mode::Dccd => run_single(spec, out).map(|m| Outcome::Single(Box::new(m))),
        Mode::AblationGrid => run_grid(spec, out).map(Outcome::Grid),
        Mode::VerifyTheorems => run_verify(spec, out).map(Outcome::Theorems),
    };
    if let Err(e) = &result {
        fs::write(out.join(ERROR_FILE), error_json(e) + "\n")?;
    }
    result
}

fn train_for(mode: Mode, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    match mode {
        Mode::BaselineDal => train_baseline_dal(dataset, config),
        _ => train_dccd(dataset, config),
    }
}

fn run_single(spec: &ExperimentSpec, out: &Path) -> Result<Metrics> {
    let dataset = generate_stage(spec, out)?;
    let report = train_stage(spec, &dataset, out)?;
    let metrics = evaluate(&dataset, &report, &spec.eval, spec.run.mode)?;
    write_metrics(out, &metrics)?;
    Ok(metrics)
}

fn single_mode(spec: &ExperimentSpec) -> Result<Mode> {
    match spec.run.mode {
        m @ (Mode::BaselineDal | Mode::Dccd) => Ok(m),
        m => Err(Error::Config(format!(
            "run.mode must be baseline-dal or dccd for this stage, got {}",
            serde_json::to_string(&m)?
        ))),
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<fs::File>> {
    fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn snapshot_path(out: &Path, epoch: usize, what: &str) -> PathBuf {
    out.join(SNAPSHOT_DIR).join(format!("epoch-{epoch:04}.{what}.ckpt"))
}

fn write_metrics(out: &Path, metrics: &Metrics) -> Result<()> {
    write_json(&out.join(METRICS_FILE), metrics)?;
    fs::write(out.join(CMC_FILE), metrics.retrieval.to_csv())?;
    Ok(())
}

/// Generates the world and writes `dataset.bin`.
pub fn generate_stage(spec: &ExperimentSpec, out: &Path) -> Result<Dataset> {
    fs::create_dir_all(out)?;
    let dataset = generate(&spec.world)?;
    write_with(&out.join(DATASET_FILE), |w| dataset.write(w))?;
    Ok(dataset)
}

/// Trains per `run.mode`, writing the log, final checkpoints and the
/// snapshot checkpoints under `snapshots/`.
pub fn train_stage(spec: &ExperimentSpec, dataset: &Dataset, out: &Path) -> Result<TrainReport> {
    let mode = single_mode(spec)?;
    let report = train_for(mode, dataset, &spec.train)?;
    write_with(&out.join(TRAIN_LOG_FILE), |w| report.write_jsonl(w))?;
    write_with(&out.join(NETWORK_FILE), |w| write_stack(&report.stack, w))?;
    if let Some(bank) = &report.bank {
        write_with(&out.join(BANK_FILE), |w| write_bank(bank, w))?;
    }
    fs::create_dir_all(out.join(SNAPSHOT_DIR))?;
    for s in &report.snapshots {
        write_with(&snapshot_path(out, s.epoch, "network"), |w| write_stack(&s.stack, w))?;
        if let Some(bank) = &s.bank {
            write_with(&snapshot_path(out, s.epoch, "bank"), |w| write_bank(bank, w))?;
        }
    }
    Ok(report)
}

/// Rebuilds a training report from the artifacts of [`train_stage`].
pub fn load_trained(spec: &ExperimentSpec, out: &Path) -> Result<(Dataset, TrainReport)> {
    let mode = single_mode(spec)?;
    let dataset = Dataset::read(open(&out.join(DATASET_FILE))?)?;
    let log = read_jsonl(open(&out.join(TRAIN_LOG_FILE))?)?;
    let stack = read_stack(open(&out.join(NETWORK_FILE))?)?;
    let dccd = mode == Mode::Dccd;
    let bank = if dccd { Some(read_bank(open(&out.join(BANK_FILE))?)?) } else { None };
    let mut snapshots = Vec::new();
    for epoch in snapshot_epochs(spec.train.epochs, spec.train.snapshot_every) {
        let network = snapshot_path(out, epoch, "network");
        snapshots.push(Snapshot {
            epoch,
            stack: read_stack(open(&network)?)?,
            bank: if dccd { Some(read_bank(open(&snapshot_path(out, epoch, "bank"))?)?) } else { None },
        });
    }
    let report = TrainReport {
        objective: if dccd { Objective::Dccd } else { Objective::Baseline },
        config: spec.train.clone(),
        log,
        snapshots,
        stack,
        bank,
    };
    Ok((dataset, report))
}

/// Evaluates the artifacts of [`train_stage`] and writes the metrics.
pub fn eval_stage(spec: &ExperimentSpec, out: &Path) -> Result<Metrics> {
    let (dataset, report) = load_trained(spec, out)?;
    let metrics = evaluate(&dataset, &report, &spec.eval, spec.run.mode)?;
    write_metrics(out, &metrics)?;
    Ok(metrics)
}

fn run_verify(spec: &ExperimentSpec, out: &Path) -> Result<TheoremSummary> {
    let summary = verify_theorems(spec.eval.theorem_joints, spec.eval.theorem_seed)?;
    write_json(&out.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

/// One ablation or sweep configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub name: String,
    pub group: String,
    pub losses: LossToggles,
    pub do_test: bool,
    pub beta: f64,
    pub gamma: f64,
}

impl GridCell {
    fn mode(&self) -> Mode {
        if self.losses.any_star() {
            Mode::Dccd
        } else {
            Mode::BaselineDal
        }
    }
}

/// The six ablation rows followed by the β and γ sweeps.
pub fn grid_cells(train: &TrainConfig, grid: &GridOptions) -> Vec<GridCell> {
    let t = |use_ce, use_adv, use_ce_star, use_adv_star| LossToggles {
        use_ce,
        use_adv,
        use_ce_star,
        use_adv_star,
    };
    let rows = [
        ("ce", t(true, false, false, false), false),
        ("ce+adv", t(true, true, false, false), false),
        ("ce+ce*", t(true, false, true, false), false),
        ("ce+ce*+adv*", t(true, false, true, true), false),
        ("ce+ce*+do-test", t(true, false, true, false), true),
        ("ce+ce*+adv*+do-test", t(true, false, true, true), true),
    ];
    let full = t(true, false, true, true);
    let mut cells: Vec<GridCell> = rows
        .iter()
        .map(|(name, losses, do_test)| GridCell {
            name: name.to_string(),
            group: "ablation".into(),
            losses: *losses,
            do_test: *do_test,
            beta: train.beta,
            gamma: train.gamma,
        })
        .collect();
    cells.extend(grid.betas.iter().map(|&beta| GridCell {
        name: format!("beta={beta}"),
        group: "beta".into(),
        losses: full,
        do_test: true,
        beta,
        gamma: train.gamma,
    }));
    cells.extend(grid.gammas.iter().map(|&gamma| GridCell {
        name: format!("gamma={gamma}"),
        group: "gamma".into(),
        losses: full,
        do_test: true,
        beta: train.beta,
        gamma,
    }));
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    #[serde(flatten)]
    pub cell: GridCell,
    pub seeds: Vec<u64>,
    pub rank1: Vec<f64>,
    pub mean_rank1: f64,
    pub mean_map: f64,
    pub mean_ate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSummary {
    pub rows: Vec<GridRow>,
}

impl GridSummary {
    pub fn row(&self, name: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.cell.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,group,beta,gamma,do_test,mean_rank1,mean_map\n");
        for r in &self.rows {
            let c = &r.cell;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.name, c.group, c.beta, c.gamma, c.do_test, r.mean_rank1, r.mean_map
            ));
        }
        out
    }
}

fn cell_dir(name: &str) -> String {
    name.replace('*', "star").replace('+', "_").replace('=', "-")
}

/// Trains and evaluates one grid cell for one seed.
pub fn run_cell(dataset: &Dataset, spec: &ExperimentSpec, cell: &GridCell, seed: u64) -> Result<Metrics> {
    let train = TrainConfig {
        losses: cell.losses,
        beta: cell.beta,
        gamma: cell.gamma,
        seed,
        ..spec.train.clone()
    };
    let eval = EvalOptions {
        do_test: cell.do_test,
        ..spec.eval.clone()
    };
    let report = train_for(cell.mode(), dataset, &train)?;
    evaluate(dataset, &report, &eval, cell.mode())
}

fn run_grid(spec: &ExperimentSpec, out: &Path) -> Result<GridSummary> {
    let dataset = generate(&spec.world)?;
    write_with(&out.join(DATASET_FILE), |w| dataset.write(w))?;
    let seeds = if spec.grid.seeds.is_empty() {
        vec![spec.train.seed]
    } else {
        spec.grid.seeds.clone()
    };
    let cells = grid_cells(&spec.train, &spec.grid);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let work = |&(c, seed): &(usize, u64)| -> Result<Metrics> {
        let cell = &cells[c];
        let dir = out.join("cells").join(cell_dir(&cell.name)).join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let metrics = run_cell(&dataset, spec, cell, seed)?;
        write_json(&dir.join(METRICS_FILE), &metrics)?;
        fs::write(dir.join(CMC_FILE), metrics.retrieval.to_csv())?;
        Ok(metrics)
    };
    let results: Vec<Result<Metrics>> = if spec.grid.parallel {
        jobs.par_iter().map(work).collect()
    } else {
        jobs.iter().map(work).collect()
    };
    let results: Vec<Metrics> = results.into_iter().collect::<Result<_>>()?;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let runs: Vec<&Metrics> = jobs
                .iter()
                .zip(&results)
                .filter(|((jc, _), _)| *jc == c)
                .map(|(_, m)| m)
                .collect();
            let n = runs.len() as f64;
            let rank1: Vec<f64> = runs.iter().map(|m| m.retrieval.rank1()).collect();
            let ates: Vec<f64> = runs.iter().filter_map(|m| m.ate.as_ref().map(|a| a.ate_norm)).collect();
            GridRow {
                cell: cell.clone(),
                seeds: seeds.clone(),
                mean_rank1: rank1.iter().sum::<f64>() / n,
                rank1,
                mean_map: runs.iter().map(|m| m.retrieval.mean_average_precision).sum::<f64>() / n,
                mean_ate: (!ates.is_empty()).then(|| ates.iter().sum::<f64>() / ates.len() as f64),
            }
        })
        .collect();
    let summary = GridSummary { rows };
    write_json(&out.join(METRICS_FILE), &summary)?;
    fs::write(out.join("grid.csv"), summary.to_csv())?;
    Ok(summary)
}
