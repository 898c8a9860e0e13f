//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::time::Instant;

use physe_core::config::RunConfig;
use physe_core::data::{SequenceBatch, WINDOW};
use physe_core::gradcheck::composite_check;
use physe_core::model::{physics_encode, surjective_transform, ModelKind, SurjectiveParams, BETA_RAW_LIMIT};
use physe_core::objectives::{nt_xent_views, pe_loss, ContrastiveVariant};
use physe_core::physics::{
    demonstrate_nonuniqueness, forward_thickness, hydrostatic_residual, invert_freeboard, HydrostaticState,
    NonuniqueGrid, PhysicalConstants,
};
use physe_core::train::{
    evaluate_restored, load_series, prepare_dataset, read_results_csv, restore_run, run_ablation, summarize,
    train, write_results_csv, write_run_artifacts, AblationGrid, CellResult, RunReport, SclSetting, TrainOutcome,
};
use physe_tensor::{op_suite, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 50;
const GRAD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

/// Collects the passed and failed sub-checks of one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn verdict(self) -> Verdict {
        if self.failures.is_empty() {
            Verdict::new(true, self.notes.join("; "))
        } else if self.notes.is_empty() {
            Verdict::new(false, format!("failed: {}", self.failures.join("; ")))
        } else {
            Verdict::new(
                false,
                format!("failed: {}; passed: {}", self.failures.join("; "), self.notes.join("; ")),
            )
        }
    }
}

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let mut c = Checks::default();
    let mut worst: (f64, &str) = (0.0, "");
    for op in op_suite() {
        let mut op_worst: f64 = 0.0;
        for seed in 0..GRAD_SEEDS {
            match (op.run)(seed, GRAD_EPS) {
                Ok(e) => op_worst = op_worst.max(e),
                Err(e) => c.check(false, format!("{} seed {seed}: {e}", op.name)),
            }
        }
        c.check(op_worst < GRAD_TOL, format!("{} {op_worst:.2e}", op.name));
        if op_worst > worst.0 {
            worst = (op_worst, op.name);
        }
    }
    let mut composite: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        match composite_check(ModelKind::PhysEInv, ContrastiveVariant::NtXent, seed, GRAD_EPS) {
            Ok(r) => composite = composite.max(r.check.max_rel_error),
            Err(e) => c.check(false, format!("composite seed {seed}: {e}")),
        }
    }
    c.check(composite < GRAD_TOL, format!("composite {composite:.2e}"));
    let secs = started.elapsed().as_secs_f64();
    c.check(secs < 60.0, format!("runtime {secs:.1} s"));
    let mut v = c.verdict();
    if v.pass {
        v.detail = format!(
            "{} ops and the composite model under {GRAD_TOL:e} over {GRAD_SEEDS} seeds each, worst op {} {:.2e}, composite {composite:.2e}, runtime {secs:.1} s",
            op_suite().len(),
            worst.1,
            worst.0
        );
    }
    v
}

fn physics_identities() -> Verdict {
    let k = PhysicalConstants::default();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_residual, mut worst_inverse, mut columns) = (0.0f64, 0.0f64, 0);
    while columns < 10_000 {
        let h_s = rng.gen_range(0.0..1.5);
        let f_b = rng.gen_range(0.0..1.0);
        let rho_s = rng.gen_range(100.0..600.0);
        let Ok(state) = HydrostaticState::from_forward(h_s, f_b, rho_s, &k) else {
            continue;
        };
        columns += 1;
        let scale = k.rho_i * state.h_i + rho_s * h_s + k.rho_w * state.h_sub;
        worst_residual = worst_residual.max(hydrostatic_residual(&state, &k).abs() / scale.max(f64::MIN_POSITIVE));
        let back = invert_freeboard(state.h_i, h_s, rho_s, &k).unwrap();
        worst_inverse = worst_inverse.max((back - f_b).abs() / f_b.abs().max(1.0));
    }
    c.check(worst_residual < 1e-9, format!("residual {worst_residual:.1e} relative over {columns} columns"));
    c.check(worst_inverse < 1e-9, format!("freeboard inversion {worst_inverse:.1e}"));

    let target = forward_thickness(0.3, 0.4, 330.0, &k).unwrap();
    c.check((target - 1.88224).abs() < 1e-5, format!("worked example h_i = {target:.5}"));
    let grid = NonuniqueGrid::default();
    match demonstrate_nonuniqueness(target, &k, &grid) {
        Ok(pairs) => {
            let exact = pairs.iter().all(|&(h_s, f_b)| {
                let h = (h_s * (k.rho_w - grid.rho_s) - k.rho_w * f_b) / (k.rho_i - k.rho_w);
                (h - target).abs() <= 1e-6
            });
            c.check(pairs.len() >= 2 && exact, format!("{} (h_s, f_b) pairs on the 100x100 grid", pairs.len()));
        }
        Err(e) => c.check(false, format!("nonunique: {e}")),
    }
    c.verdict()
}

fn range_guarantees() -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let raw: Vec<f64> = (0..3 * n)
        .map(|_| {
            let magnitude = 10f64.powf(rng.gen_range(-6.0..6.0));
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    let in_range = |p: &SurjectiveParams| {
        (-1.0..=1.0).contains(&p.alpha) && p.beta > 0.0 && p.beta.is_finite() && (-10.0..=10.0).contains(&p.gamma)
    };
    let values = raw
        .chunks(3)
        .all(|r| in_range(&SurjectiveParams::from_raw([r[0], r[1], r[2]]).0));
    c.check(values, format!("{n} raw triples in range (value path)"));

    let mut tape = Tape::new();
    let r = tape.constant(Tensor::new(&[n, 3], raw).unwrap()).unwrap();
    let (a, b, g) = surjective_transform(&mut tape, r).unwrap();
    let (a, b, g) = (tape.value(a).data(), tape.value(b).data(), tape.value(g).data());
    let tape_ok = (0..n).all(|i| {
        in_range(&SurjectiveParams {
            alpha: a[i],
            beta: b[i],
            gamma: g[i],
        })
    });
    c.check(tape_ok, "tape path");

    let (hi, _) = SurjectiveParams::from_raw([1e6, 1e6, 1e6]);
    let (lo, _) = SurjectiveParams::from_raw([-1e6, -1e6, -1e6]);
    c.check(
        hi.alpha == 1.0 && lo.alpha == -1.0 && hi.gamma == 10.0 && lo.gamma == -10.0,
        "alpha and gamma saturate at ±1e6",
    );
    c.check(
        hi.beta == BETA_RAW_LIMIT.exp() && hi.beta.is_finite() && lo.beta == (-BETA_RAW_LIMIT).exp() && lo.beta > 0.0,
        format!("beta in [{:.3e}, {:.3e}] at ±1e6", lo.beta, hi.beta),
    );
    c.verdict()
}

fn brute_nt_xent(views: &[Vec<f64>], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = views
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let n = unit.len();
    let m = n / 2;
    let mut total = 0.0;
    for i in 0..n {
        let positive = (i + m) % n;
        let mut denom = 0.0;
        let mut numer = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let s: f64 = unit[i].iter().zip(&unit[k]).map(|(a, b)| a * b).sum::<f64>() / tau;
            denom += s.exp();
            if k == positive {
                numer = s.exp();
            }
        }
        total -= (numer / denom).ln();
    }
    total / n as f64
}

fn nt_xent(z: &[Vec<f64>], za: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(z).unwrap()).unwrap();
    let b = tape.constant(Tensor::from_rows(za).unwrap()).unwrap();
    let l = nt_xent_views(&mut tape, a, b, tau).unwrap();
    tape.value(l).item().unwrap()
}

fn loss_oracles() -> Verdict {
    let mut c = Checks::default();
    let rows = |rng: &mut ChaCha8Rng, m: usize| -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    };
    let (mut single_nonzero, mut brute, mut rescale) = (0usize, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, za) = (rows(&mut rng, 1), rows(&mut rng, 1));
        if nt_xent(&z, &za, 0.5) != 0.0 {
            single_nonzero += 1;
        }
        let (z, za) = (rows(&mut rng, 2), rows(&mut rng, 2));
        let views: Vec<Vec<f64>> = z.iter().chain(&za).cloned().collect();
        let value = nt_xent(&z, &za, 0.5);
        brute = brute.max((value - brute_nt_xent(&views, 0.5)).abs());
        let k = 10f64.powf(rng.gen_range(-3.0..3.0));
        let scale = |r: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { r.iter().map(|v| v.iter().map(|x| x * k).collect()).collect() };
        rescale = rescale.max((nt_xent(&scale(&z), &scale(&za), 0.5) - value).abs());
    }
    c.check(single_nonzero == 0, format!("M=1 exactly 0 in {}/100 seeds", 100 - single_nonzero));
    c.check(brute < 1e-10, format!("M=2 vs enumeration {brute:.1e}"));
    c.check(rescale < 1e-9, format!("rescale invariance {rescale:.1e}"));

    let mut pe_max: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut tape = Tape::new();
        let pred: Vec<f64> = (0..4 * WINDOW).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pred = tape.constant(Tensor::new(&[4, WINDOW], pred).unwrap()).unwrap();
        let alpha = tape.constant(Tensor::zeros(&[4, 1])).unwrap();
        let beta = tape.constant(Tensor::ones(&[4, 1])).unwrap();
        let gamma = tape.constant(Tensor::zeros(&[4, 1])).unwrap();
        let est = physics_encode(&mut tape, pred, alpha, beta, gamma).unwrap();
        let l = pe_loss(&mut tape, pred, est).unwrap();
        pe_max = pe_max.max(tape.value(l).item().unwrap().abs());
    }
    c.check(pe_max == 0.0, format!("PE loss at (0,1,0) = {pe_max}"));
    c.verdict()
}

fn data_arithmetic() -> Verdict {
    let mut c = Checks::default();
    let config = RunConfig::default();
    let series = load_series(&config).unwrap();
    let ds = prepare_dataset(&config, &series).unwrap();
    let shape = |s: &physe_core::data::WindowSource| {
        let all: Vec<usize> = (0..s.len()).collect();
        SequenceBatch::gather(s, &all).x.shape().to_vec()
    };
    c.check(series.len() == 10958, format!("{} steps", series.len()));
    c.check(shape(&ds.train) == [8757, WINDOW, 1], format!("train {:?}", shape(&ds.train)));
    c.check(shape(&ds.test) == [2183, WINDOW, 1], format!("test {:?}", shape(&ds.test)));
    c.verdict()
}

/// Two full default runs; returns the verdict and the first outcome.
fn end_to_end() -> (Verdict, Option<(RunConfig, TrainOutcome)>) {
    let config = RunConfig::default();
    let series = load_series(&config).unwrap();
    let ds = prepare_dataset(&config, &series).unwrap();
    let run = |label: &str| {
        train(&config, &ds, &mut |log| {
            if log.epoch % 10 == 0 {
                eprintln!("  [criterion 6, {label}] epoch {}/{}: L_total {:.5}", log.epoch, config.epochs, log.total);
            }
        })
    };
    let first = match run("run 1") {
        Ok(o) => o,
        Err(e) => return (Verdict::new(false, format!("run 1 failed: {e}")), None),
    };
    let second = match run("run 2") {
        Ok(o) => o,
        Err(e) => return (Verdict::new(false, format!("run 2 failed: {e}")), None),
    };
    let r = &first.report;
    let ratio = r.test.mse / r.initial.mse;
    let mut c = Checks::default();
    c.check(
        ratio <= 0.5,
        format!("test MSE {:.5} vs epoch-0 {:.5} (ratio {ratio:.3}, need <= 0.5)", r.test.mse, r.initial.mse),
    );
    c.check(
        r.wall_clock_seconds < 300.0,
        format!(
            "wall-clock {:.0} s and {:.0} s (need < 300 s)",
            r.wall_clock_seconds, second.report.wall_clock_seconds
        ),
    );
    c.check(r.same_results(&second.report), "same-seed reports identical");
    (c.verdict(), Some((config, first)))
}

fn direction_of_effect() -> (Verdict, Vec<CellResult>) {
    let base = RunConfig {
        synth_length: 2000,
        epochs: 10,
        ..RunConfig::default()
    };
    let grid = AblationGrid {
        models: vec![ModelKind::PhysEInv],
        splits: vec![0.5],
        scl: vec![SclSetting::Off, SclSetting::On(ContrastiveVariant::NtXent)],
        pe: vec![true, false],
        seeds: (1..=5).collect(),
    };
    let series = load_series(&base).unwrap();
    let results = match run_ablation(&base, &series, &grid, &|_| {}) {
        Ok(r) => r,
        Err(e) => return (Verdict::new(false, e.to_string()), Vec::new()),
    };
    let summary = summarize(&results);
    let median = |scl: SclSetting, pe: bool| {
        summary
            .iter()
            .find(|r| r.scl == scl.to_string() && r.pe == pe)
            .map_or(f64::NAN, |r| r.median_mse)
    };
    let on = SclSetting::On(ContrastiveVariant::NtXent);
    let (pe_on, pe_off) = (median(on, true), median(on, false));
    let scl_off = median(SclSetting::Off, true);
    let mut c = Checks::default();
    c.check(
        pe_on <= pe_off + 0.02,
        format!("median MSE with PE {pe_on:.5} vs without {pe_off:.5} (+0.02)"),
    );
    c.check(
        pe_on <= scl_off + 0.02,
        format!("with SCL {pe_on:.5} vs without {scl_off:.5} (+0.02)"),
    );
    c.check(results.iter().all(|r| r.outcome.is_ok()), "all 20 cells trained");
    (c.verdict(), results)
}

fn rmse_consistent(mse: f64, rmse: f64) -> bool {
    (rmse - mse.sqrt()).abs() <= 1e-12
}

fn report_rmse_ok(r: &RunReport) -> bool {
    rmse_consistent(r.test.mse, r.test.rmse) && rmse_consistent(r.initial.mse, r.initial.rmse)
}

fn report_consistency(full: Option<&(RunConfig, TrainOutcome)>, cells: &[CellResult]) -> Verdict {
    let mut c = Checks::default();
    let dir = tempfile::tempdir().unwrap();
    let small = RunConfig {
        synth_length: 400,
        epochs: 3,
        ..RunConfig::default()
    };
    let series = load_series(&small).unwrap();
    let ds = prepare_dataset(&small, &series).unwrap();
    let small_outcome = train(&small, &ds, &mut |_| {}).unwrap();
    let mut runs = vec![("small", small.clone(), series, ds, &small_outcome)];
    if let Some((config, outcome)) = full {
        let series = load_series(config).unwrap();
        let ds = prepare_dataset(config, &series).unwrap();
        runs.push(("default", config.clone(), series, ds, outcome));
    }
    for (label, config, series, ds, outcome) in &runs {
        let out = dir.path().join(label);
        let paths = write_run_artifacts(&out, config, ds, outcome).unwrap();
        let text = std::fs::read_to_string(&paths.report).unwrap();
        let written: RunReport = serde_json::from_str(&text).unwrap();
        let rows = read_results_csv(&paths.results).unwrap();
        let rows_ok = rows.iter().all(|r| matches!(r.outcome, Ok((m, s)) if rmse_consistent(m, s)));
        c.check(report_rmse_ok(&written) && rows_ok, format!("{label} run: rmse = sqrt(mse) in report.json and results.csv"));

        let restored = restore_run(&paths.checkpoint).unwrap();
        let (eval, pred) = evaluate_restored(&restored, series).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let identical = restored.model == outcome.model
            && eval.mse.to_bits() == outcome.report.test.mse.to_bits()
            && eval.rmse.to_bits() == outcome.report.test.rmse.to_bits()
            && bits(&pred.pred) == bits(&outcome.predictions.pred)
            && bits(&pred.h_est) == bits(&outcome.predictions.h_est);
        c.check(identical, format!("{label} run: checkpoint save/load/eval bit-identical"));
    }
    if !cells.is_empty() {
        let path = dir.path().join("ablation.csv");
        write_results_csv(&path, cells).unwrap();
        let rows = read_results_csv(&path).unwrap();
        let ok = rows.len() == cells.len() && rows.iter().all(|r| matches!(r.outcome, Ok((m, s)) if rmse_consistent(m, s)));
        c.check(ok, format!("{} ablation rows consistent", rows.len()));
    }
    c.verdict()
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, started: Instant, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} ({name}): {status} [{:.1} s] {}",
            started.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(n);
        }
    };
    type Simple = fn() -> Verdict;
    let simple: [(u32, &str, Simple); 5] = [
        (1, "gradient suite", gradient_suite),
        (2, "physics identities", physics_identities),
        (3, "range guarantees", range_guarantees),
        (4, "loss oracles", loss_oracles),
        (5, "data arithmetic", data_arithmetic),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }
    let mut full = None;
    if wanted(6) {
        let t = Instant::now();
        let (v, outcome) = end_to_end();
        full = outcome;
        report(6, "end-to-end training", t, v);
    }
    let mut cells = Vec::new();
    if wanted(7) {
        let t = Instant::now();
        let (v, results) = direction_of_effect();
        cells = results;
        report(7, "direction of effect", t, v);
    }
    if wanted(8) {
        let t = Instant::now();
        report(8, "report consistency", t, report_consistency(full.as_ref(), &cells));
    }
    if !failed.is_empty() {
        println!("acceptance: {} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
