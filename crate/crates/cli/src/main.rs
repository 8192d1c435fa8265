//! `csur`: reproducible pipelines for the SIRS simulator and its surrogates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use causal_surrogate::abm::{exact_pushforward, total_variation, Lattice, LatticeConfig, ParamVector};
use causal_surrogate::error::{Error, Result};
use causal_surrogate::evaluation::{
    evaluate_pairs, lockdown_counterfactual, markov_bound_check, reproduce_table, write_table_csv, EtaGrid,
    LookupTableSurrogate, TableConfig, TrajectoryModel,
};
use causal_surrogate::gradcheck::check_gradients;
use causal_surrogate::interventions::{AbmIntervention, EtaDistribution};
use causal_surrogate::io::write_atomic;
use causal_surrogate::rng::{Purpose, RngStream};
use causal_surrogate::surrogate::{Family, TrainedPair};
use causal_surrogate::trainer::{generate_dataset, train, Dataset, Regime, RunManifest, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "csur", version, about = "Interventionally consistent surrogates for a spatial SIRS ABM")]
struct Cli {
    /// Directory receiving every output file.
    #[arg(long, global = true, env = "CSUR_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the ABM under one intervention and write the aggregate trajectory.
    Simulate(SimulateArgs),
    /// Sample a dataset of (intervention, trajectory) records.
    GenData(GenDataArgs),
    /// Train one surrogate family over all splits.
    Train(TrainArgs),
    /// Evaluate trained checkpoints on a held-out dataset.
    Eval(EvalArgs),
    /// Train and evaluate every family under both regimes.
    Table(TableArgs),
    /// Lockdown vs no-lockdown mean infected curves for ABM and surrogate.
    Counterfactual(CounterfactualArgs),
    /// Compare sampled ABM runs with the exact trajectory distribution.
    Oracle(OracleArgs),
    /// Check exact abstraction errors against the cross-entropy bound.
    Bound(BoundArgs),
    /// Compare surrogate NLL gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct LatticeArgs {
    /// Lattice side length.
    #[arg(long = "L", default_value_t = 10)]
    side: usize,
    /// Number of time steps.
    #[arg(long = "T", default_value_t = 20)]
    horizon: usize,
}

impl LatticeArgs {
    fn config(&self) -> Result<LatticeConfig> {
        LatticeConfig::new(self.side, self.horizon)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct InterventionArgs {
    #[arg(long, default_value_t = 0.4)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Initial infection probability.
    #[arg(long, default_value_t = 0.1)]
    i0: f64,
    /// First lockdown step (5..=10); omit for no lockdown.
    #[arg(long)]
    lockdown_start: Option<usize>,
}

impl InterventionArgs {
    fn intervention(&self) -> Result<AbmIntervention> {
        let v = ParamVector::new(self.alpha, self.beta, self.gamma)?;
        if !(0.0..=1.0).contains(&self.i0) {
            return Err(Error::InvalidConfig(format!("i0 = {} outside [0, 1]", self.i0)));
        }
        let iota = match self.lockdown_start {
            None => AbmIntervention::Init { v, a: self.i0 },
            Some(t_l) => AbmIntervention::InitLock { v, a: self.i0, t_l },
        };
        Ok(iota)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainingArgs {
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 800)]
    train_size: usize,
    #[arg(long, default_value_t = 200)]
    val_size: usize,
    #[arg(long, default_value_t = 5)]
    splits: usize,
}

impl TrainingArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            train_size: self.train_size,
            val_size: self.val_size,
            splits: self.splits,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EtaArg {
    /// Init interventions only (observational regime).
    Init,
    /// Init and lockdown interventions, half each (interventional regime).
    Union,
}

impl EtaArg {
    fn eta(self) -> EtaDistribution {
        match self {
            EtaArg::Init => EtaDistribution::UniformInit,
            EtaArg::Union => EtaDistribution::union(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
enum RegimeArg {
    #[value(name = "I", alias = "i")]
    I,
    #[value(name = "O", alias = "o")]
    O,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::I => Regime::Interventional,
            RegimeArg::O => Regime::Observational,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
enum FamilyArg {
    Lode,
    Lodernn,
    Lrnn,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Lode => Family::Lode,
            FamilyArg::Lodernn => Family::LodeRnn,
            FamilyArg::Lrnn => Family::Lrnn,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    #[command(flatten)]
    intervention: InterventionArgs,
    /// Replicates; above 1 the mean counts per step are written.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "trajectory.csv")]
    output: String,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long, value_enum, default_value_t = EtaArg::Union)]
    eta: EtaArg,
    /// Number of records.
    #[arg(long = "R", default_value_t = 1000)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data.csv")]
    output: String,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Training regime label; also picks the generated data's eta when no
    /// dataset is given.
    #[arg(long, value_enum)]
    regime: RegimeArg,
    /// Dataset CSV; generated from `--L/--T/--R` and the seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long = "R", default_value_t = 1000)]
    records: usize,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Manifest written by `train`.
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out dataset CSV, or `Iprime` / `Oprime` to generate one.
    #[arg(long)]
    test: String,
    /// Lattice and size used when generating the test set.
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long = "R", default_value_t = 1000)]
    records: usize,
    /// Surrogate samples per test record for AMSE.
    #[arg(long, default_value_t = 1)]
    amse_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TableArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long = "R", default_value_t = 1000)]
    records: usize,
    #[arg(long = "R-test", default_value_t = 1000)]
    test_records: usize,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, default_value_t = 1)]
    amse_samples: usize,
    /// Families to include (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    families: Vec<FamilyArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct CounterfactualArgs {
    /// Trained pair checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    i0: f64,
    #[arg(long, default_value_t = 7)]
    lockdown_start: usize,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct OracleArgs {
    #[arg(long = "L", default_value_t = 2)]
    side: usize,
    #[arg(long = "T", default_value_t = 3)]
    horizon: usize,
    /// ABM runs per setting.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Number of random (theta, i0) settings.
    #[arg(long, default_value_t = 5)]
    settings: usize,
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct BoundArgs {
    /// Trained pair checkpoint; the exact pushforward is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "L", default_value_t = 2)]
    side: usize,
    #[arg(long = "T", default_value_t = 2)]
    horizon: usize,
    #[arg(long, value_enum, default_value_t = EtaArg::Union)]
    eta: EtaArg,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2")]
    epsilons: Vec<f64>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![FamilyArg::Lode, FamilyArg::Lodernn, FamilyArg::Lrnn])]
    families: Vec<FamilyArg>,
    #[arg(long = "L", default_value_t = 3)]
    side: usize,
    #[arg(long = "T", default_value_t = 16)]
    horizon: usize,
    #[arg(long = "R", default_value_t = 10)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        let path = self.path(name);
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    fn bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    /// Writes the fully resolved configuration of a command.
    fn echo<T: Serialize>(&self, command: &str, args: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Echo<'a, T> {
            command: &'a str,
            version: &'a str,
            args: &'a T,
        }
        self.json(
            &format!("{command}_config.json"),
            &Echo { command, version: env!("CARGO_PKG_VERSION"), args },
        )?;
        Ok(())
    }
}

fn simulate(args: &SimulateArgs, out: &Output) -> Result<()> {
    if args.runs == 0 {
        return Err(Error::InvalidConfig("--runs must be positive".into()));
    }
    let config = args.lattice.config()?;
    let schedule = args.intervention.intervention()?.apply_to_abm(config.horizon())?;
    let lattice = Lattice::new(config.side());
    let stream = RngStream::new(args.seed).purpose(Purpose::Data);
    out.echo("simulate", args)?;
    let path = if args.runs == 1 {
        let y = lattice.simulate(&schedule, &mut stream.split(0)).aggregate();
        let mut buf = Vec::new();
        y.write_csv(&mut buf)?;
        for (t, c) in y.counts.iter().enumerate() {
            println!("t={t} S={} I={} R={}", c[0], c[1], c[2]);
        }
        out.bytes(&args.output, &buf)?
    } else {
        let mut sums = vec![[0.0f64; 3]; config.horizon() + 1];
        for r in 0..args.runs as u64 {
            let y = lattice.simulate(&schedule, &mut stream.split(r)).aggregate();
            for (s, c) in sums.iter_mut().zip(&y.counts) {
                for k in 0..3 {
                    s[k] += c[k] as f64;
                }
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "mean_S", "mean_I", "mean_R"])?;
        for (t, s) in sums.iter().enumerate() {
            let m = s.map(|v| v / args.runs as f64);
            println!("t={t} S={} I={} R={}", m[0], m[1], m[2]);
            w.write_record([t.to_string(), m[0].to_string(), m[1].to_string(), m[2].to_string()])?;
        }
        let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.bytes(&args.output, &buf)?
    };
    info!("wrote {}", path.display());
    Ok(())
}

fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    Ok(buf)
}

fn gen_data(args: &GenDataArgs, out: &Output) -> Result<()> {
    let ds = generate_dataset(&args.eta.eta(), args.records, &args.lattice.config()?, args.seed)?;
    out.echo("gen-data", args)?;
    let path = out.bytes(&args.output, &dataset_bytes(&ds)?)?;
    println!("{} records -> {}", ds.len(), path.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs, out: &Output) -> Result<()> {
    let family = Family::from(args.family);
    let regime = Regime::from(args.regime);
    let config = args.training.config(RngStream::new(args.seed).purpose(Purpose::Init).seed());
    config.validate()?;
    let dataset = match &args.data {
        Some(p) => Dataset::load(p)?,
        None => {
            let data_seed = RngStream::new(args.seed).purpose(Purpose::Data).seed();
            let ds = generate_dataset(&regime.eta(), args.records, &args.lattice.config()?, data_seed)?;
            out.bytes(&format!("train_{}.csv", regime.symbol()), &dataset_bytes(&ds)?)?;
            ds
        }
    };
    out.echo("train", args)?;
    let results = train(family, &dataset, &config)?;
    let mut checkpoints = Vec::new();
    for r in &results {
        let name = format!("{}_{}_split{}.json", family.name(), regime.symbol(), r.summary.split);
        r.pair.save(&out.path(&name))?;
        println!(
            "split {}: best epoch {} stopped {} val NLL {:.6}",
            r.summary.split, r.summary.best_epoch, r.summary.stopping_epoch, r.summary.best_val_nll
        );
        checkpoints.push(name);
    }
    let manifest = RunManifest {
        family,
        regime: Some(regime),
        dataset: dataset.header.clone(),
        config,
        parameter_count: family.parameter_count(),
        splits: results.into_iter().map(|r| r.summary).collect(),
        checkpoints,
    };
    out.json(&format!("{}_{}_manifest.json", family.name(), regime.symbol()), &manifest)?;
    Ok(())
}

fn test_set(spec: &str, lattice: &LatticeArgs, records: usize, seed: u64) -> Result<(Regime, Dataset)> {
    let regime = match spec {
        "Iprime" | "I'" => Some(Regime::Interventional),
        "Oprime" | "O'" => Some(Regime::Observational),
        _ => None,
    };
    match regime {
        Some(r) => {
            let data_seed = RngStream::new(seed).purpose(Purpose::Data).split(r as u64).seed();
            Ok((r, generate_dataset(&r.eta(), records, &lattice.config()?, data_seed)?))
        }
        None => {
            let ds = Dataset::load(Path::new(spec))?;
            let r = if ds.header.eta == EtaDistribution::UniformInit.describe() {
                Regime::Observational
            } else {
                Regime::Interventional
            };
            Ok((r, ds))
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    manifest: RunManifest,
    test_regime: Regime,
    test_records: usize,
    rows: Vec<causal_surrogate::evaluation::MetricsRow>,
    per_split: Vec<causal_surrogate::evaluation::SplitMetrics>,
}

fn eval_cmd(args: &EvalArgs, out: &Output) -> Result<()> {
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(&args.manifest)?)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let pairs = manifest
        .checkpoints
        .iter()
        .map(|c| TrainedPair::load(&base.join(c)))
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::Checkpoint("manifest lists no checkpoints".into()));
    }
    let (test_regime, test) = test_set(&args.test, &args.lattice, args.records, args.seed)?;
    if test.header.population != manifest.dataset.population || test.header.horizon != manifest.dataset.horizon {
        return Err(Error::Dataset("test set lattice differs from the training data".into()));
    }
    out.echo("eval", args)?;
    let train_regime = manifest.regime.unwrap_or(Regime::Interventional);
    let eval_seed = RngStream::new(args.seed).purpose(Purpose::Eval).seed();
    let tests = BTreeMap::from([(test_regime, test)]);
    let (rows, per_split) = evaluate_pairs(manifest.family, train_regime, &pairs, &tests, args.amse_samples, eval_seed)?;
    for r in &rows {
        println!("ANLL median {:.4} AMSE median {:.6}", r.anll.median, r.amse.median);
    }
    let name = format!("eval_{}_{}_on_{}prime.json", manifest.family.name(), train_regime.symbol(), test_regime.symbol());
    out.json(&name, &EvalReport { test_records: tests[&test_regime].len(), manifest, test_regime, rows, per_split })?;
    Ok(())
}

fn table_cmd(args: &TableArgs, out: &Output) -> Result<()> {
    let families = if args.families.is_empty() {
        Family::ALL.to_vec()
    } else {
        args.families.iter().map(|&f| f.into()).collect()
    };
    let config = TableConfig {
        side: args.lattice.side,
        horizon: args.lattice.horizon,
        train_records: args.records,
        test_records: args.test_records,
        amse_samples: args.amse_samples,
        train: args.training.config(0),
        families,
        seed: args.seed,
    };
    config.train.validate()?;
    out.echo("table", args)?;
    let run = reproduce_table(&config)?;
    let mut buf = Vec::new();
    write_table_csv(&run.rows, &mut buf)?;
    out.bytes("table.csv", &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    #[derive(Serialize)]
    struct TableReport<'a> {
        config: &'a TableConfig,
        seeds: causal_surrogate::evaluation::TableSeeds,
        rows: &'a [causal_surrogate::evaluation::MetricsRow],
        per_split: &'a [causal_surrogate::evaluation::SplitMetrics],
        training: Vec<(String, &'a [causal_surrogate::trainer::SplitSummary])>,
    }
    let training = run
        .summaries
        .iter()
        .map(|((f, r), s)| (format!("{}_{}", f.name(), r.symbol()), s.as_slice()))
        .collect();
    out.json(
        "table.json",
        &TableReport { config: &config, seeds: run.seeds, rows: &run.rows, per_split: &run.per_split, training },
    )?;
    for ((family, regime), pairs) in &run.pairs {
        for (s, pair) in pairs.iter().enumerate() {
            pair.save(&out.path(&format!("{}_{}_split{s}.json", family.name(), regime.symbol())))?;
        }
    }
    Ok(())
}

fn counterfactual_cmd(args: &CounterfactualArgs, out: &Output) -> Result<()> {
    let pair = TrainedPair::load(&args.checkpoint)?;
    let side = (pair.model.population() as f64).sqrt().round() as usize;
    if side * side != pair.model.population() as usize {
        return Err(Error::Checkpoint("population is not a square lattice".into()));
    }
    let config = LatticeConfig::new(side, pair.model.horizon())?;
    let v = ParamVector::new(args.alpha, args.beta, args.gamma)?;
    out.echo("counterfactual", args)?;
    let cf = lockdown_counterfactual(&pair, &config, v, args.i0, args.lockdown_start, args.runs, args.seed)?;
    let mut buf = Vec::new();
    cf.write_csv(&mut buf)?;
    out.bytes("counterfactual.csv", &buf)?;
    #[derive(Serialize)]
    struct Gaps {
        lockdown_start: usize,
        abm_window_gap: f64,
        surrogate_window_gap: f64,
    }
    let gaps = Gaps { lockdown_start: cf.lockdown_start, abm_window_gap: cf.abm_gap(), surrogate_window_gap: cf.surrogate_gap() };
    println!("window gap: ABM {:.4} surrogate {:.4}", gaps.abm_window_gap, gaps.surrogate_window_gap);
    out.json("counterfactual_gaps.json", &gaps)?;
    Ok(())
}

#[derive(Serialize)]
struct OracleSetting {
    alpha: f64,
    beta: f64,
    gamma: f64,
    i0: f64,
    support_size: usize,
    total_variation: f64,
    passed: bool,
}

fn oracle_cmd(args: &OracleArgs, out: &Output) -> Result<()> {
    let config = LatticeConfig::new(args.side, args.horizon)?;
    let lattice = Lattice::new(args.side);
    let master = RngStream::new(args.seed);
    out.echo("oracle", args)?;
    let mut settings = Vec::with_capacity(args.settings);
    for k in 0..args.settings as u64 {
        let mut pick = master.purpose(Purpose::Eval).split(k);
        let v = ParamVector::new(pick.uniform(), pick.uniform(), pick.uniform())?;
        let i0 = pick.uniform();
        let schedule = AbmIntervention::Init { v, a: i0 }.apply_to_abm(config.horizon())?;
        let exact = exact_pushforward(&config, &schedule)?;
        let runs = master.purpose(Purpose::Data).split(k);
        let samples: Vec<_> = (0..args.samples as u64)
            .map(|r| lattice.simulate(&schedule, &mut runs.split(r)).aggregate())
            .collect();
        let tv = total_variation(&exact, &samples);
        println!("setting {k}: support {} TV {tv:.5}", exact.support_size());
        settings.push(OracleSetting {
            alpha: v.alpha,
            beta: v.beta,
            gamma: v.gamma,
            i0,
            support_size: exact.support_size(),
            total_variation: tv,
            passed: tv < args.tolerance,
        });
    }
    out.json("oracle.json", &settings)?;
    Ok(())
}

fn bound_cmd(args: &BoundArgs, out: &Output) -> Result<()> {
    let config = LatticeConfig::new(args.side, args.horizon)?;
    let grid = EtaGrid::new(&args.eta.eta(), &[0.0, 0.5, 1.0], config.horizon())?;
    let pair;
    let lookup;
    let model: &dyn TrajectoryModel = match &args.checkpoint {
        Some(p) => {
            pair = TrainedPair::load(p)?;
            if pair.model.population() as usize != config.population() || pair.model.horizon() != config.horizon() {
                return Err(Error::Checkpoint("checkpoint lattice differs from --L/--T".into()));
            }
            &pair
        }
        None => {
            lookup = LookupTableSurrogate::new(config);
            &lookup
        }
    };
    out.echo("bound", args)?;
    let report = markov_bound_check(model, &grid, &config, &args.epsilons)?;
    for r in &report.rows {
        println!("eps {}: P(KL >= eps) = {:.6} <= {:.6}", r.epsilon, r.probability, r.bound);
    }
    out.json("bound_report.json", &report)?;
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs, out: &Output) -> Result<()> {
    let config = LatticeConfig::new(args.side, args.horizon)?;
    let master = RngStream::new(args.seed);
    let records = generate_dataset(&EtaDistribution::union(), args.records, &config, master.purpose(Purpose::Data).seed())?;
    out.echo("gradcheck", args)?;
    let mut reports = Vec::new();
    let mut failed = 0;
    for (k, &f) in args.families.iter().enumerate() {
        let family = Family::from(f);
        let mut init = master.purpose(Purpose::Init).split(k as u64);
        let pair = TrainedPair::new(family, config.population() as u32, config.horizon(), &mut init)?;
        let report = check_gradients(&pair, &records.records)?;
        println!(
            "{family}: {} coordinates, max relative error {:.3e}, {} failures",
            report.coordinates,
            report.max_relative_error,
            report.failures.len()
        );
        failed += report.failures.len();
        reports.push(report);
    }
    out.json("gradcheck.json", &reports)?;
    if failed > 0 {
        return Err(Error::Evaluation(format!("{failed} coordinates disagree with finite differences")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let out = Output::new(&cli.out_dir)?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, &out),
        Command::GenData(a) => gen_data(a, &out),
        Command::Train(a) => train_cmd(a, &out),
        Command::Eval(a) => eval_cmd(a, &out),
        Command::Table(a) => table_cmd(a, &out),
        Command::Counterfactual(a) => counterfactual_cmd(a, &out),
        Command::Oracle(a) => oracle_cmd(a, &out),
        Command::Bound(a) => bound_cmd(a, &out),
        Command::Gradcheck(a) => gradcheck_cmd(a, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
