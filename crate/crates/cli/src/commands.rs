use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eow::calibration::{
    corruption_sweep, ece, nll, records_from_logits, sweep_csv, temperature_fit, threshold_csv,
    NllMode, PredictionRecord, ScoreMode,
};
use eow::data::{
    gen_gaussian_mixture, gen_two_moons, load_idx, split, Corruption, Dataset, GaussianMixture,
};
use eow::diff::Array;
use eow::energy::{ChainInit, SgldConfig};
use eow::experiments::{ablate_lambda, ablation_csv, ood_table};
use eow::model::EowClassifier;
use eow::objective::{fit, LossKind, TrainConfig};
use eow::theory::{
    check_density_proportionality, check_lemma1, check_prop1, check_theorem1_bound, theory_model,
    DiscreteDomain,
};
use eow::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{DatasetSpec, RunConfig};
use crate::{Command, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A verification command ran but some check did not pass.
    ChecksFailed,
}

pub fn dispatch(command: Command, env: &BTreeMap<String, String>) -> Result<Outcome> {
    match command {
        Command::Train {
            common,
            seeds,
            seed,
        } => {
            let seeds = seed.map(|s| vec![s]).unwrap_or(seeds);
            train(&resolve(&common, env)?, &common.out, &seeds)
        }
        Command::Evaluate { common, checkpoint } => {
            evaluate(&resolve(&common, env)?, &common.out, &checkpoint)
        }
        Command::OodEval {
            common,
            checkpoint,
            seed,
        } => ood_eval(&resolve(&common, env)?, &common.out, &checkpoint, seed),
        Command::CorruptionEval {
            common,
            checkpoint,
            seed,
        } => corruption_eval(&resolve(&common, env)?, &common.out, &checkpoint, seed),
        Command::TheoryCheck { seed, grid, out } => theory_check(seed, grid, &out),
        Command::AblateLambda {
            common,
            seed,
            lambdas,
        } => ablate(&resolve(&common, env)?, &common.out, seed, &lambdas),
        Command::MakeData { common } => make_data(&resolve(&common, env)?, &common.out),
    }
}

fn resolve(common: &Common, env: &BTreeMap<String, String>) -> Result<RunConfig> {
    let overrides: Vec<(&str, String)> = common
        .dataset
        .iter()
        .map(|d| ("dataset", d.clone()))
        .collect();
    RunConfig::resolve(common.config.as_deref(), env, &overrides)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    stems
        .iter()
        .flat_map(|s| [dir.join(format!("{s}.gz")), dir.join(s)])
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no {} file in {}", stems[0], dir.display())))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Mixture => gen_gaussian_mixture(cfg.data_seed, cfg.n_samples, cfg.num_classes),
        DatasetSpec::Moons => gen_two_moons(cfg.data_seed, cfg.n_samples, cfg.moons_noise),
        DatasetSpec::Mnist => {
            let images = find_file(
                &cfg.data_dir,
                &[
                    "images-idx3-ubyte",
                    "t10k-images-idx3-ubyte",
                    "train-images-idx3-ubyte",
                ],
            )?;
            let labels = find_file(
                &cfg.data_dir,
                &[
                    "labels-idx1-ubyte",
                    "t10k-labels-idx1-ubyte",
                    "train-labels-idx1-ubyte",
                ],
            )?;
            let mut ds = load_idx(&images, &labels)?;
            ds.num_classes = ds.num_classes.max(10);
            Ok(ds)
        }
        DatasetSpec::Csv(path) => Dataset::read_csv(path, cfg.num_classes),
    }
}

fn splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let ds = load_dataset(cfg)?;
    let (train, val, test) = split(&ds, cfg.split, cfg.data_seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "split leaves the train or test part empty".into(),
        ));
    }
    Ok((train, val, test))
}

fn closed_logits(logits: &Array, mode: ScoreMode) -> Result<Array> {
    match mode {
        ScoreMode::OpenWorld => Ok(logits.clone()),
        ScoreMode::ClosedWorld => {
            let k = logits.last_dim() - 1;
            let data = (0..logits.rows())
                .flat_map(|r| logits.row(r)[..k].to_vec())
                .collect();
            Array::matrix(logits.rows(), k, data)
        }
    }
}

fn score(
    cfg: &RunConfig,
    model: &EowClassifier,
    val: &Dataset,
    test: &Dataset,
) -> Result<(Value, Vec<PredictionRecord>)> {
    let mode = cfg.train.loss.score_mode();
    let logits = model.forward(&test.inputs)?.as_batch();
    let records = records_from_logits(&logits, Some(&test.labels), mode)?;
    let report = ece(&records, cfg.ece_bins)?;
    let accuracy = eow::calibration::accuracy(&records)?;
    let nll_true = nll(&records, NllMode::TrueLabel)?;
    let nll_pred = nll(&records, NllMode::PredictedLabel)?;
    let mut summary = json!({
        "loss": cfg.train.loss.to_string(),
        "score_mode": format!("{mode:?}"),
        "n_test": test.len(),
        "accuracy": accuracy,
        "ece": report.ece,
        "ece_bins": cfg.ece_bins,
        "nll": nll_true.value,
        "nll_mode": nll_true.mode.name(),
        "nll_clamped": nll_true.clamped,
        "nll_predicted_label": nll_pred.value,
    });
    if !val.is_empty() && val.labels.iter().any(|&y| y != val.labels[0]) {
        let val_logits = closed_logits(&model.forward(&val.inputs)?.as_batch(), mode)?;
        let t = temperature_fit(&val_logits, &val.labels)?;
        let scaled = logits.map(|v| v / t);
        let scaled_records = records_from_logits(&scaled, Some(&test.labels), mode)?;
        summary["temperature"] = json!(t);
        summary["ece_temperature_scaled"] = json!(ece(&scaled_records, cfg.ece_bins)?.ece);
    }
    Ok((summary, records))
}

fn train(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<Outcome> {
    let (train, val, test) = splits(cfg)?;
    let mut summaries = Vec::new();
    for &seed in seeds {
        let dir = cfg.run_dir(out, seed);
        write(&dir.join("config.txt"), &cfg.to_text())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = EowClassifier::new(train.dim(), &cfg.hidden, train.num_classes, &mut rng)?;
        let log = fit(&mut model, &train, &cfg.train, &mut rng, Some(&test))?;
        write(&dir.join("metrics.csv"), &log.to_csv())?;
        model.save(&dir.join("model.ckpt"))?;
        let (mut summary, _) = score(cfg, &model, &val, &test)?;
        summary["seed"] = json!(seed);
        summary["config_hash"] = json!(cfg.hash());
        summary["run_dir"] = json!(dir.display().to_string());
        write_json(&dir.join("summary.json"), &summary)?;
        println!("{}", serde_json::to_string(&summary).unwrap_or_default());
        summaries.push(summary);
    }
    Ok(Outcome::Success)
}

fn load_checkpoint(path: &Path, ds: &Dataset) -> Result<EowClassifier> {
    let model = EowClassifier::load(path)?;
    if model.input_dim() != ds.dim() || model.num_classes() != ds.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} inputs and {} classes, dataset has {} and {}",
            model.input_dim(),
            model.num_classes(),
            ds.dim(),
            ds.num_classes
        )));
    }
    Ok(model)
}

fn evaluate(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Outcome> {
    let (_, val, test) = splits(cfg)?;
    let model = load_checkpoint(checkpoint, &test)?;
    let (mut summary, records) = score(cfg, &model, &val, &test)?;
    summary["checkpoint"] = json!(checkpoint.display().to_string());
    write(
        &out.join("reliability.csv"),
        &ece(&records, cfg.ece_bins)?.reliability_csv(),
    )?;
    write_json(&out.join("evaluate.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).unwrap_or_default());
    Ok(Outcome::Success)
}

fn ood_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, seed: u64) -> Result<Outcome> {
    if cfg.dataset != DatasetSpec::Mixture {
        return Err(Error::Config(
            "ood-eval uses the translated mixture and needs dataset = mixture".into(),
        ));
    }
    let (_, _, test) = splits(cfg)?;
    let model = load_checkpoint(checkpoint, &test)?;
    let (dx, dy) = cfg.ood_offset;
    let ood = GaussianMixture::on_circle(cfg.num_classes)
        .translated(dx, dy)
        .sample("ood", seed, test.len().max(cfg.num_classes))?;
    let rows = ood_table(&model, &test, &ood, cfg.train.loss)?;
    write(&out.join("ood.csv"), &threshold_csv(&rows))?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "threshold": r.threshold,
                "kept_in": r.kept_in,
                "kept_ood": r.kept_ood,
                "correct": r.correct,
                "accuracy": r.accuracy,
            })
        })
        .collect();
    let summary =
        json!({ "loss": cfg.train.loss.to_string(), "ood_offset": [dx, dy], "rows": table });
    write_json(&out.join("ood.json"), &summary)?;
    println!("{}", threshold_csv(&rows).trim_end());
    Ok(Outcome::Success)
}

fn corruption_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, seed: u64) -> Result<Outcome> {
    let (_, _, test) = splits(cfg)?;
    let model = load_checkpoint(checkpoint, &test)?;
    let clamp = cfg.dataset == DatasetSpec::Mnist;
    let rows = corruption_sweep(
        &model,
        &test,
        &Corruption::ALL,
        &[0, 1, 2, 3, 4, 5],
        cfg.train.loss.score_mode(),
        seed,
        clamp,
    )?;
    write(&out.join("corruption.csv"), &sweep_csv(&rows))?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| {
            let per: serde_json::Map<String, Value> =
                r.per_type.iter().map(|(k, e)| (k.name().to_string(), json!(e))).collect();
            json!({ "severity": r.severity, "mean_ece": r.mean_ece, "std_ece": r.std_ece, "per_type": per })
        })
        .collect();
    write_json(&out.join("corruption.json"), &json!({ "rows": table }))?;
    println!("{}", sweep_csv(&rows).trim_end());
    Ok(Outcome::Success)
}

/// Small energy-loss training run whose density correlation is reported.
fn density_probe_model(seed: u64) -> Result<EowClassifier> {
    let train = gen_gaussian_mixture(seed, 2000, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EowClassifier::new(2, &[16, 16], 2, &mut rng)?;
    let config = TrainConfig {
        lr: 0.01,
        loss: LossKind::Eow,
        sgld: SgldConfig {
            alpha: 0.5,
            sigma: 1.0,
            steps: 20,
            stage: 0,
            init: ChainInit::Data,
            ..SgldConfig::default()
        },
        ..TrainConfig::default()
    };
    fit(&mut model, &train, &config, &mut rng, None)?;
    Ok(model)
}

fn theory_check(seed: u64, grid: usize, out: &Path) -> Result<Outcome> {
    if grid < 2 {
        return Err(Error::Config(format!(
            "--grid must be at least 2, got {grid}"
        )));
    }
    let k = 3;
    let model = theory_model(seed, k)?;
    let domain = DiscreteDomain::grid(grid, -3.0, 3.0, k)?;
    let prop1 = check_prop1(&model, &domain)?;
    let lemma1 = check_lemma1(&model, &DiscreteDomain::random(seed, 5, 2, k)?)?;
    let theorem1 = check_theorem1_bound(&model, &domain)?;
    let density = check_density_proportionality(
        &density_probe_model(seed)?,
        &DiscreteDomain::grid(grid, -4.0, 4.0, 2)?,
    )?;
    let density_pass =
        matches!((density.known_mass, density.uncertainty), (Some(a), Some(b)) if a * b < 0.0);

    let report = json!({
        "seed": seed,
        "grid": grid,
        "prop1": {
            "z": prop1.z,
            "z_prime": prop1.z_prime,
            "mu": prop1.mu,
            "max_rel_deviation": prop1.max_rel_deviation,
            "cosine": prop1.cosine,
            "pass": prop1.pass,
        },
        "lemma1": { "kl": lemma1.kl, "max_rel_error": lemma1.max_rel_error, "pass": lemma1.pass },
        "theorem1": {
            "min_margin": theorem1.min_margin,
            "aggregate_upper": theorem1.aggregate_upper,
            "aggregate_energy_difference": theorem1.aggregate_energy_difference,
            "pass": theorem1.pass,
        },
        "density": {
            "spearman_known_mass": density.known_mass,
            "spearman_uncertainty": density.uncertainty,
            "pass": density_pass,
        },
    });
    write_json(&out.join("theory.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).unwrap_or_default()
    );
    let all = prop1.pass && lemma1.pass && theorem1.pass && density_pass;
    Ok(if all {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}

fn ablate(cfg: &RunConfig, out: &Path, seed: u64, lambdas: &[f64]) -> Result<Outcome> {
    let (train, _, test) = splits(cfg)?;
    let rows = ablate_lambda(&train, &test, &cfg.hidden, &cfg.train, lambdas, seed)?;
    let dir = cfg.run_dir(out, seed);
    write(&dir.join("config.txt"), &cfg.to_text())?;
    write(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "lambda": r.lambda,
                "accuracy": r.summary.accuracy,
                "ece": r.summary.ece,
                "nll": r.summary.nll,
            })
        })
        .collect();
    write_json(
        &dir.join("ablation.json"),
        &json!({ "seed": seed, "nll_mode": "true_label", "rows": table }),
    )?;
    println!("{}", ablation_csv(&rows).trim_end());
    Ok(Outcome::Success)
}

fn make_data(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ds = load_dataset(cfg)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{}.csv", ds.name));
    ds.write_csv(&path)?;
    println!("{}", path.display());
    Ok(Outcome::Success)
}
