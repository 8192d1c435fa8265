//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- C1 C4`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use causal_surrogate::abm::{exact_pushforward, total_variation, Lattice, LatticeConfig, ParamVector, Pushforward};
use causal_surrogate::evaluation::{
    abstraction_error_exact, lockdown_counterfactual, markov_bound_check, reproduce_table, EtaGrid,
    LookupTableSurrogate, TableConfig, TableRun,
};
use causal_surrogate::grad::multinomial_log_pmf;
use causal_surrogate::gradcheck::check_gradients;
use causal_surrogate::interventions::{sample_intervention, AbmIntervention, EtaDistribution};
use causal_surrogate::nn::FeedForwardSpec;
use causal_surrogate::nn::OutputActivation;
use causal_surrogate::ode::{euler_solve_raw, OdeState};
use causal_surrogate::rng::RngStream;
use causal_surrogate::surrogate::{Family, TrainedPair};
use causal_surrogate::trainer::{generate_dataset, train, Regime, TrainConfig};

type Outcome = Result<(bool, String), String>;

struct Suite {
    table: Option<TableRun>,
}

impl Suite {
    fn table(&mut self) -> Result<&TableRun, String> {
        if self.table.is_none() {
            let t0 = Instant::now();
            let run = reproduce_table(&TableConfig::default()).map_err(|e| e.to_string())?;
            eprintln!("table experiment finished in {:.0}s", t0.elapsed().as_secs_f64());
            for r in &run.rows {
                eprintln!(
                    "  {:8} train {} test {}': ANLL {:.2} [{:.2}, {:.2}]  AMSE {:.4} [{:.4}, {:.4}]",
                    r.family.label(),
                    r.train_regime.symbol(),
                    r.test_regime.symbol(),
                    r.anll.median,
                    r.anll.q1,
                    r.anll.q3,
                    r.amse.median,
                    r.amse.q1,
                    r.amse.q3
                );
            }
            self.table = Some(run);
        }
        Ok(self.table.as_ref().expect("just set"))
    }
}

fn c1_architecture() -> Outcome {
    let omega = FeedForwardSpec::new(vec![3, 32, 64, 64, 64, 32, 3], OutputActivation::Sigmoid)
        .map_err(|e| e.to_string())?
        .parameter_count();
    let lode = Family::Lode.parameter_count();
    let lodernn = Family::LodeRnn.parameter_count();
    let lrnn = Family::Lrnn.parameter_count();
    Ok((
        omega == 12_739 && lode == 12_739 && lodernn == 13_798 && lrnn == 13_798,
        format!("LODE omega {omega}, LODE total {lode}, LODERNN {lodernn}, LRNN {lrnn} (targets 12739 / 13798)"),
    ))
}

/// Expected TV of an empirical pmf from `n` draws under the normal approximation.
fn tv_noise_floor(exact: &Pushforward, n: usize) -> f64 {
    exact
        .entries()
        .iter()
        .map(|(_, p)| 0.5 * (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n as f64)).sqrt())
        .sum()
}

fn c2_oracle() -> Outcome {
    let config = LatticeConfig::new(2, 3).map_err(|e| e.to_string())?;
    let lattice = Lattice::new(2);
    let runs = 100_000;
    let mut pick = RngStream::new(2024);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for k in 0..5 {
        let v = ParamVector::new(pick.uniform(), pick.uniform(), pick.uniform()).map_err(|e| e.to_string())?;
        let i0 = pick.uniform();
        let schedule = AbmIntervention::Init { v, a: i0 }.apply_to_abm(3).map_err(|e| e.to_string())?;
        let exact = exact_pushforward(&config, &schedule).map_err(|e| e.to_string())?;
        let stream = RngStream::new(7).split(k);
        let draw = |n: usize| -> Vec<_> {
            (0..n as u64).map(|r| lattice.simulate(&schedule, &mut stream.split(r)).aggregate()).collect()
        };
        let tv = total_variation(&exact, &draw(runs));
        worst = worst.max(tv);
        let mut line = format!(
            "setting {k}: support {}, TV {tv:.4} (sampling floor {:.4})",
            exact.support_size(),
            tv_noise_floor(&exact, runs)
        );
        if k == 0 {
            let big = 1_000_000;
            line += &format!(
                "; at {big} runs TV {:.4} (floor {:.4})",
                total_variation(&exact, &draw(big)),
                tv_noise_floor(&exact, big)
            );
        }
        lines.push(line);
    }
    Ok((worst < 0.01, format!("max TV {worst:.4} at 1e5 runs, threshold 0.01\n    {}", lines.join("\n    "))))
}

fn c3_gradients() -> Outcome {
    let config = LatticeConfig::new(3, 16).map_err(|e| e.to_string())?;
    let records = generate_dataset(&EtaDistribution::union(), 10, &config, 99).map_err(|e| e.to_string())?.records;
    let t0 = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for (k, family) in Family::ALL.into_iter().enumerate() {
        let pair = TrainedPair::new(family, 9, 16, &mut RngStream::new(300 + k as u64)).map_err(|e| e.to_string())?;
        let r = check_gradients(&pair, &records).map_err(|e| e.to_string())?;
        ok &= r.passed();
        lines.push(format!(
            "{}: {} coords, {} failures, max rel err {:.2e}, max abs err (small grads) {:.1e}, {} one-sided at ReLU kinks",
            family.label(),
            r.coordinates,
            r.failures.len(),
            r.max_relative_error,
            r.max_small_abs_error,
            r.one_sided.len()
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((ok && secs < 300.0, format!("{secs:.0}s (limit 300s)\n    {}", lines.join("\n    "))))
}

fn c4_normalization() -> Outcome {
    let n = 5u32;
    let triples: Vec<[u32; 3]> =
        (0..=n).flat_map(|a| (0..=n - a).map(move |b| [a, b, n - a - b])).collect();
    let mut rng = RngStream::new(44);
    let mut pmf_gap: f64 = 0.0;
    let eta = EtaDistribution::union();
    for family in Family::ALL {
        let pair = TrainedPair::new(family, n, 20, &mut rng).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let iota = sample_intervention(&eta, &mut rng);
            let lp = pair.model.emission_log_probs(&pair.translate(&iota).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            for row in &lp {
                let mut total = 0.0;
                for c in &triples {
                    total += multinomial_log_pmf(c, row).map_err(|e| e.to_string())?.exp();
                }
                pmf_gap = pmf_gap.max((total - 1.0).abs());
            }
        }
    }
    let (mut mass_gap, mut excursions): (f64, usize) = (0.0, 0);
    for _ in 0..10_000 {
        let (u, w) = (rng.uniform(), rng.uniform());
        let (lo, hi) = if u < w { (u, w) } else { (w, u) };
        let z0 = OdeState::new(lo, hi - lo, 1.0 - hi);
        let thetas: Vec<[f64; 3]> = (0..20).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
        match euler_solve_raw(z0, &thetas, 1.0) {
            Ok(path) => {
                for z in path {
                    mass_gap = mass_gap.max((z.mass() - 1.0).abs());
                }
            }
            Err(_) => excursions += 1,
        }
    }
    Ok((
        pmf_gap <= 1e-10 && mass_gap <= 1e-12 && excursions == 0,
        format!("max |sum pmf - 1| {pmf_gap:.1e}; Euler max |mass - 1| {mass_gap:.1e}, simplex exits {excursions}/10000"),
    ))
}

fn c5_table(suite: &mut Suite) -> Outcome {
    let run = suite.table()?;
    let median = |f: Family, train: Regime, test: Regime| {
        run.rows
            .iter()
            .find(|r| r.family == f && r.train_regime == train && r.test_regime == test)
            .map(|r| r.anll.median)
            .unwrap_or(f64::NAN)
    };
    let (i, o) = (Regime::Interventional, Regime::Observational);
    let mut ok = true;
    let mut lines = Vec::new();
    for f in Family::ALL {
        let (ii, oi, oo, io) = (median(f, i, i), median(f, o, i), median(f, o, o), median(f, i, o));
        let ratio = oi / ii;
        let row_ok = ii < oi && oo < io && (f == Family::Lode || ratio >= 2.0);
        ok &= row_ok;
        lines.push(format!(
            "{}: ANLL(I') I {ii:.2} vs O {oi:.2} (ratio {ratio:.2}); ANLL(O') O {oo:.2} vs I {io:.2} {}",
            f.label(),
            if row_ok { "ok" } else { "VIOLATED" }
        ));
    }
    let best = median(Family::LodeRnn, i, i);
    let lodernn_best = Family::ALL.iter().all(|&f| f == Family::LodeRnn || best < median(f, i, i));
    ok &= lodernn_best;
    lines.push(format!("I-trained LODERNN lowest ANLL(I'): {lodernn_best}"));
    Ok((ok, lines.join("\n    ")))
}

fn c6_counterfactual(suite: &mut Suite) -> Outcome {
    let run = suite.table()?;
    let config = LatticeConfig::new(10, 20).map_err(|e| e.to_string())?;
    let v = ParamVector::new(0.8, 0.2, 0.1).map_err(|e| e.to_string())?;
    let mut gaps = BTreeMap::new();
    for regime in Regime::ALL {
        let pair = run
            .pairs
            .get(&(Family::LodeRnn, regime))
            .and_then(|p| p.first())
            .ok_or("no trained LODERNN")?;
        let cf = lockdown_counterfactual(pair, &config, v, 0.1, 7, 1000, 77).map_err(|e| e.to_string())?;
        gaps.insert(regime, (cf.abm_gap(), cf.surrogate_gap()));
    }
    let (abm, sur_i) = gaps[&Regime::Interventional];
    let (_, sur_o) = gaps[&Regime::Observational];
    let consistent = |s: f64| s.signum() == abm.signum() && s.abs() >= 0.5 * abm.abs();
    Ok((
        consistent(sur_i),
        format!(
            "window gap ABM {abm:.2}; I-trained LODERNN {sur_i:.2} ({}); O-trained LODERNN {sur_o:.2} ({})",
            if consistent(sur_i) { "consistent" } else { "inconsistent" },
            if consistent(sur_o) { "consistent" } else { "inconsistent" }
        ),
    ))
}

fn c7_bound() -> Outcome {
    let config = LatticeConfig::new(2, 2).map_err(|e| e.to_string())?;
    let data = generate_dataset(&EtaDistribution::UniformInit, 1000, &config, 70).map_err(|e| e.to_string())?;
    let train_config = TrainConfig { splits: 1, max_epochs: 100, ..TrainConfig::default() };
    let pair = train(Family::LodeRnn, &data, &train_config).map_err(|e| e.to_string())?.remove(0).pair;
    let grid = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], 2).map_err(|e| e.to_string())?;
    let report = markov_bound_check(&pair, &grid, &config, &[0.1, 0.5, 1.0, 2.0]).map_err(|e| e.to_string())?;
    let holds = report.rows.iter().all(|r| r.probability <= r.bound);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("eps {}: P {:.4} <= {:.4}", r.epsilon, r.probability, r.bound))
        .collect();
    Ok((
        holds && report.grid_points == 81 && report.max_decomposition_gap <= 1e-9,
        format!(
            "{} grid points, E[KL] {:.4}, E[CE] {:.4}, max |KL - (CE - H)| {:.1e}; {}",
            report.grid_points,
            report.expected_kl,
            report.expected_cross_entropy,
            report.max_decomposition_gap,
            rows.join(", ")
        ),
    ))
}

fn c8_lookup() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for horizon in [2, 3] {
        let config = LatticeConfig::new(2, horizon).map_err(|e| e.to_string())?;
        let grid = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], horizon).map_err(|e| e.to_string())?;
        let report = abstraction_error_exact(&LookupTableSurrogate::new(config), &grid, &config).map_err(|e| e.to_string())?;
        points += report.points.len();
        for p in &report.points {
            worst = worst.max(p.kl.abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |KL| {worst:.1e} over {points} grid points (L=2, T=2 and 3)")))
}

fn csur(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csur"))
        .current_dir(dir)
        .arg("--out-dir")
        .arg(".")
        .args(args)
        .env_remove("CSUR_OUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(entry.path()).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn c9_determinism() -> Outcome {
    let small = ["--L", "3", "--T", "16", "--R", "60", "--epochs", "3", "--batch-size", "10", "--train-size", "40", "--val-size", "20", "--splits", "2"];
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("simulate", vec!["simulate", "--lockdown-start", "7", "--seed", "5"]),
        ("simulate --runs", vec!["simulate", "--runs", "50", "--seed", "5", "--output", "mean.csv"]),
        ("gen-data", vec!["gen-data", "--eta", "union", "--R", "300", "--seed", "11"]),
        ("train", [&["train", "--family", "lodernn", "--regime", "I", "--seed", "3"][..], &small].concat()),
        ("eval", vec!["eval", "--manifest", "lodernn_I_manifest.json", "--test", "Oprime", "--L", "3", "--T", "16", "--R", "30"]),
        ("counterfactual", vec!["counterfactual", "--checkpoint", "lodernn_I_split0.json", "--runs", "40"]),
        ("table", [&["table", "--families", "lode", "--R-test", "30"][..], &small].concat()),
        ("oracle", vec!["oracle", "--L", "2", "--T", "2", "--samples", "2000", "--settings", "2"]),
        ("bound", vec!["bound", "--L", "2", "--T", "2"]),
        ("gradcheck", vec!["gradcheck", "--families", "lode", "--R", "2"]),
    ];
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut differing = Vec::new();
    for (name, args) in &commands {
        let mut shots = Vec::new();
        for d in &dirs {
            csur(d.path(), args)?;
            shots.push(snapshot(d.path())?);
        }
        if shots[0] != shots[1] {
            differing.push(name.to_string());
        }
    }
    let files = snapshot(dirs[0].path())?.len();
    Ok((
        differing.is_empty(),
        format!(
            "{} command runs, {files} output files, byte-identical across reruns{}",
            commands.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    ))
}

type Criterion<'a> = (&'a str, &'a str, Box<dyn FnMut(&mut Suite) -> Outcome>);

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let wanted = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut suite = Suite { table: None };
    let criteria: Vec<Criterion> = vec![
        ("C1", "architecture fidelity", Box::new(|_| c1_architecture())),
        ("C2", "oracle equivalence", Box::new(|_| c2_oracle())),
        ("C3", "gradient suite", Box::new(|_| c3_gradients())),
        ("C4", "normalization", Box::new(|_| c4_normalization())),
        ("C5", "table ordering", Box::new(c5_table)),
        ("C6", "lockdown counterfactual", Box::new(c6_counterfactual)),
        ("C7", "cross-entropy bound", Box::new(|_| c7_bound())),
        ("C8", "lookup-table abstraction error", Box::new(|_| c8_lookup())),
        ("C9", "determinism", Box::new(|_| c9_determinism())),
    ];
    let mut failed = 0;
    for (id, title, mut check) in criteria {
        if !wanted(id) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match check(&mut suite) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{id} {} {title} [{:.1}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
}
