use std::fs;
use std::path::{Path, PathBuf};

use physe_core::config::RunConfig;
use physe_core::data::{read_csv, synthesize_series, write_csv, DataError, SynthParams};
use physe_core::gradcheck::composite_check;
use physe_core::model::{save_checkpoint, ModelKind};
use physe_core::objectives::ContrastiveVariant;
use physe_core::train::{
    evaluate_restored, load_series, prepare_dataset, restore_run, run_ablation, summarize, train as run_training,
    write_results_csv, write_run_artifacts, write_summary_csv, AblationGrid, SclSetting, TrainError,
};
use physe_tensor::{op_suite, GradCheckError};

use crate::args::{AblateArgs, ConfigArgs, EvalArgs, GradcheckArgs, OnOffBoth, SclChoice, SynthArgs, TrainArgs};
use crate::CliError;

pub const SEED_ENV: &str = "PHYSE_INV_SEED";

pub fn data_err(e: DataError) -> CliError {
    match e {
        DataError::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    if e.is_numeric() {
        return CliError::Numeric(e.to_string());
    }
    match e {
        TrainError::Config(c) => CliError::Usage(c.to_string()),
        TrainError::Data(d) => data_err(d),
        other => CliError::Data(other.to_string()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Built-in defaults, then `PHYSE_INV_SEED`, then the config file, then flags.
pub fn resolve_config(a: &ConfigArgs, out_dir: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Ok(text) = std::env::var(SEED_ENV) {
        c.seed = text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{text}`")))?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        c = c
            .overlay_json(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(v) = &a.data {
        c.data = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field {
                c.$field = v.into();
            })*
        };
    }
    set!(synth_length, synth_seed, noise_sigma, cl_variant, lambda_pe, lambda_cl, tau);
    set!(learning_rate, epochs, batch_size, seed, rho_w, rho_i, parallel_chunks);
    if let Some(dir) = out_dir {
        c.out_dir = dir.to_path_buf();
    }
    Ok(c)
}

pub fn synth(a: &SynthArgs, out_dir: Option<&Path>) -> Result<(), CliError> {
    let series = synthesize_series(a.length, a.seed, &SynthParams::default()).map_err(data_err)?;
    let path = match &a.out {
        Some(p) => p.clone(),
        None => {
            let dir = out_dir.unwrap_or(Path::new("."));
            create_dir(dir)?;
            dir.join("synth.csv")
        }
    };
    write_csv(&path, &series).map_err(data_err)?;
    println!("wrote {} records to {}", series.len(), path.display());
    Ok(())
}

pub fn train(a: &TrainArgs, out_dir: Option<&Path>) -> Result<(), CliError> {
    let mut config = resolve_config(&a.config, out_dir)?;
    if let Some(m) = a.model {
        config.model = m.into();
    }
    if let Some(s) = a.split {
        config.split = s;
    }
    if let Some(pe) = a.pe {
        config.pe = pe.enabled();
    }
    if let Some(scl) = a.scl {
        config.scl = scl.enabled();
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let series = load_series(&config).map_err(data_err)?;
    let dataset = prepare_dataset(&config, &series).map_err(data_err)?;
    eprintln!(
        "training {} on {} windows ({} test), config {}",
        config.model,
        dataset.train.len(),
        dataset.test.len(),
        &config.hash()[..12]
    );
    let total = config.epochs;
    let outcome = run_training(&config, &dataset, &mut |log| {
        eprintln!(
            "epoch {}/{total}  L_total {:.6}  L_MSE {:.6}  L_PE {:.6}  L_CL {:.6}",
            log.epoch, log.total, log.mse, log.pe, log.cl
        );
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let dir = config.out_dir.join("checkpoint_last_good");
            let meta = serde_json::json!({ "config": config, "diverged_epoch": epoch, "reason": reason });
            let saved = save_checkpoint(&last_good, &dir, meta)
                .map(|_| format!("; last good parameters saved to {}", dir.display()))
                .unwrap_or_default();
            return Err(CliError::Numeric(format!("training diverged in epoch {epoch}: {reason}{saved}")));
        }
        Err(e) => return Err(train_err(e)),
    };
    let paths = write_run_artifacts(&config.out_dir, &config, &dataset, &outcome).map_err(train_err)?;
    let r = &outcome.report;
    println!(
        "test mse {:.6} rmse {:.6} (initial mse {:.6}) in {:.1} s",
        r.test.mse, r.test.rmse, r.initial.mse, r.wall_clock_seconds
    );
    println!("report {}", paths.report.display());
    println!("checkpoint {}", paths.checkpoint.display());
    Ok(())
}

pub fn eval(a: &EvalArgs, out_dir: Option<&Path>) -> Result<(), CliError> {
    if !a.checkpoint.join("manifest.json").is_file() {
        return Err(CliError::Data(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let run = restore_run(&a.checkpoint).map_err(train_err)?;
    let series = match &a.data {
        Some(path) => read_csv(path),
        None => load_series(&run.config),
    }
    .map_err(data_err)?;
    let (evaluation, _) = evaluate_restored(&run, &series).map_err(train_err)?;
    let summary = serde_json::json!({
        "checkpoint": a.checkpoint,
        "model": run.config.model,
        "windows": evaluation.windows,
        "mse": evaluation.mse,
        "rmse": evaluation.rmse,
    });
    let text = serde_json::to_string_pretty(&summary).expect("serializable");
    println!("{text}");
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let path = dir.join("eval.json");
        let full = serde_json::to_string_pretty(&evaluation).expect("serializable");
        fs::write(&path, full + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn scl_settings(choice: SclChoice, configured: ContrastiveVariant) -> Vec<SclSetting> {
    let on = SclSetting::On(configured);
    match choice {
        SclChoice::Off => vec![SclSetting::Off],
        SclChoice::On => vec![on],
        SclChoice::Both => vec![SclSetting::Off, on],
        SclChoice::All => vec![
            SclSetting::Off,
            SclSetting::On(ContrastiveVariant::NtXent),
            SclSetting::On(ContrastiveVariant::Stability),
        ],
        SclChoice::NtXent => vec![SclSetting::On(ContrastiveVariant::NtXent)],
        SclChoice::Stability => vec![SclSetting::On(ContrastiveVariant::Stability)],
    }
}

pub fn ablate(a: &AblateArgs, out_dir: Option<&Path>) -> Result<(), CliError> {
    let base = resolve_config(&a.config, out_dir)?;
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let models: Vec<ModelKind> = if a.models.is_empty() {
        vec![base.model]
    } else {
        a.models.iter().map(|&m| m.into()).collect()
    };
    let grid = AblationGrid {
        models,
        splits: a.splits.clone(),
        scl: scl_settings(a.scl, base.cl_variant),
        pe: match a.pe {
            OnOffBoth::On => vec![true],
            OnOffBoth::Off => vec![false],
            OnOffBoth::Both => vec![true, false],
        },
        seeds: (1..=a.seeds).collect(),
    };
    let series = load_series(&base).map_err(data_err)?;
    eprintln!("ablation over {} cells", grid.len());
    let results = run_ablation(&base, &series, &grid, &|cell| match &cell.outcome {
        Ok((mse, _)) => eprintln!(
            "{} split {} scl {} pe {} seed {}: mse {mse:.6}",
            cell.model, cell.split, cell.scl, cell.pe, cell.seed
        ),
        Err(e) => eprintln!(
            "{} split {} scl {} pe {} seed {}: failed: {e}",
            cell.model, cell.split, cell.scl, cell.pe, cell.seed
        ),
    })
    .map_err(train_err)?;
    create_dir(&base.out_dir)?;
    let results_path = base.out_dir.join("results.csv");
    let summary_path = base.out_dir.join("summary.csv");
    write_results_csv(&results_path, &results).map_err(train_err)?;
    let summary = summarize(&results);
    write_summary_csv(&summary_path, &summary).map_err(train_err)?;
    println!("model\tsplit\tscl\tpe\truns\tmedian_mse\tmedian_rmse");
    for row in &summary {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            row.model,
            row.split,
            row.scl,
            if row.pe { "on" } else { "off" },
            row.runs,
            row.median_mse,
            row.median_rmse
        );
    }
    println!("results {}", results_path.display());
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} cells failed", results.len())));
    }
    Ok(())
}

type CheckFn = Box<dyn Fn(u64, f64) -> Result<f64, GradCheckError>>;

/// Every operation probe followed by the composite model checks.
pub fn gradient_checks() -> Vec<(String, CheckFn)> {
    let mut checks: Vec<(String, CheckFn)> = op_suite()
        .into_iter()
        .map(|op| (op.name.to_string(), Box::new(op.run) as CheckFn))
        .collect();
    let composites = [
        ("composite", ModelKind::PhysEInv, ContrastiveVariant::NtXent),
        ("composite-stability", ModelKind::PhysEInv, ContrastiveVariant::Stability),
        ("composite-lstm", ModelKind::Lstm, ContrastiveVariant::NtXent),
        ("composite-bilstm", ModelKind::BiLstm, ContrastiveVariant::NtXent),
    ];
    for (name, kind, variant) in composites {
        let run = move |seed, eps| composite_check(kind, variant, seed, eps).map(|c| c.check.max_rel_error);
        checks.push((name.to_string(), Box::new(run)));
    }
    checks
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let all = gradient_checks();
    if a.list {
        for (name, _) in &all {
            println!("{name}");
        }
        return Ok(());
    }
    if !(a.eps > 0.0 && a.tolerance > 0.0) || a.seeds == 0 {
        return Err(CliError::Usage("--eps and --tolerance must be positive and --seeds at least 1".into()));
    }
    for name in &a.op {
        if !all.iter().any(|(n, _)| n == name) {
            return Err(CliError::Usage(format!("unknown check `{name}`; see `gradcheck --list`")));
        }
    }
    let mut failed = Vec::new();
    for (name, run) in all.iter().filter(|(n, _)| a.op.is_empty() || a.op.contains(n)) {
        let mut worst: f64 = 0.0;
        let mut error = None;
        for seed in 0..a.seeds {
            match run(seed, a.eps) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        match error {
            Some(e) => {
                println!("FAIL {name}: {e}");
                failed.push(name.clone());
            }
            None if worst < a.tolerance => println!("PASS {name}: max relative error {worst:.3e}"),
            None => {
                println!("FAIL {name}: max relative error {worst:.3e} >= {:e}", a.tolerance);
                failed.push(name.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn output_path(out: &Option<PathBuf>, out_dir: Option<&Path>, name: &str) -> Result<Option<PathBuf>, CliError> {
    match (out, out_dir) {
        (Some(p), _) => Ok(Some(p.clone())),
        (None, Some(dir)) => {
            create_dir(dir)?;
            Ok(Some(dir.join(name)))
        }
        (None, None) => Ok(None),
    }
}
