//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! The MNIST criterion reads IDX files from `$EOW_MNIST_DIR`, falling back to
//! the bundled `data/mnist-10k` subset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use eow::calibration::{ece, nll, records_from_logits, NllMode, PredictionRecord, ScoreMode};
use eow::data::{gen_gaussian_mixture, load_idx, split, Dataset};
use eow::diff::Array;
use eow::energy::{langevin_step, sample, LatentEnergy, QuadraticEnergy, SgldConfig};
use eow::experiments::{
    ablate_lambda, ablation_csv, desk_sgld, mean_std, mixture_ood_pair, ood_table,
    train_and_evaluate, ABLATION_LAMBDAS, DEFAULT_HIDDEN,
};
use eow::model::EowClassifier;
use eow::objective::{
    eow_loss, fit, gradient_check, vanilla_loss, LabeledBatch, LossKind, TrainConfig,
};
use eow::theory::{
    bound_margin, check_density_proportionality, check_lemma1, check_prop1, check_theorem1_bound,
    theory_model, DiscreteDomain,
};
use eow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 5;

struct Check {
    id: usize,
    name: &'static str,
    budget_secs: Option<f64>,
    run: fn() -> Result<(bool, String)>,
}

fn main() -> ExitCode {
    let checks = [
        Check {
            id: 1,
            name: "loss gradients match finite differences",
            budget_secs: Some(30.0),
            run: gradients,
        },
        Check {
            id: 2,
            name: "gradient proportionality on the grid",
            budget_secs: Some(60.0),
            run: proportional_gradients,
        },
        Check {
            id: 3,
            name: "contrastive KL gradient",
            budget_secs: None,
            run: contrastive_kl,
        },
        Check {
            id: 4,
            name: "cross-entropy bounds the energy objective",
            budget_secs: None,
            run: bound,
        },
        Check {
            id: 5,
            name: "known mass tracks the data density",
            budget_secs: Some(300.0),
            run: density,
        },
        Check {
            id: 6,
            name: "MNIST calibration direction",
            budget_secs: Some(1800.0),
            run: mnist_calibration,
        },
        Check {
            id: 7,
            name: "metric oracles",
            budget_secs: None,
            run: metric_oracles,
        },
        Check {
            id: 8,
            name: "thresholded accuracy on translated mixture",
            budget_secs: None,
            run: ood,
        },
        Check {
            id: 9,
            name: "Langevin sampler statistics",
            budget_secs: None,
            run: sampler,
        },
        Check {
            id: 10,
            name: "lambda ablation table",
            budget_secs: None,
            run: ablation,
        },
    ];
    let filter: Vec<usize> = std::env::var("EOW_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for check in checks
        .iter()
        .filter(|c| filter.is_empty() || filter.contains(&c.id))
    {
        let start = Instant::now();
        let (ok, detail) = match (check.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        let in_time = check.budget_secs.is_none_or(|b| secs < b);
        let pass = ok && in_time;
        let budget = check
            .budget_secs
            .map(|b| format!(" / {b:.0}s"))
            .unwrap_or_default();
        println!(
            "{} criterion {:>2}: {} [{secs:.1}s{budget}] {detail}",
            if pass { "PASS" } else { "FAIL" },
            check.id,
            check.name
        );
        if !pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn gradients() -> Result<(bool, String)> {
    let k = 3;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EowClassifier::new(2, &[16, 16], k, &mut rng)?;
        let ds = gen_gaussian_mixture(seed, 8, k)?;
        let batch = LabeledBatch::from_dataset(&ds, &(0..8).collect::<Vec<_>>())?;
        let sgld = SgldConfig {
            steps: 5,
            stage: 1,
            ..SgldConfig::default()
        };
        let (chain, _) = sample(&model, &batch.inputs, &sgld, &mut rng, None)?;
        let with_chain = [(&batch.inputs, 0), (&chain.z, chain.stage)];
        let eow = gradient_check(
            &model,
            |m| eow_loss(m, &batch, Some(&chain), 0.1),
            &with_chain,
        )?;
        let vanilla = gradient_check(&model, |m| vanilla_loss(m, &batch), &[(&batch.inputs, 0)])?;
        worst = worst.max(eow.max_rel_error).max(vanilla.max_rel_error);
    }
    Ok((
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 20 seeds"),
    ))
}

fn proportional_gradients() -> Result<(bool, String)> {
    let domain = DiscreteDomain::default_grid();
    let (mut dev, mut cos, mut all): (f64, f64, bool) = (0.0, 1.0, true);
    for seed in 0..20 {
        let r = check_prop1(&theory_model(seed, 3)?, &domain)?;
        dev = dev.max(r.max_rel_deviation);
        cos = cos.min(r.cosine);
        all &= r.pass;
    }
    let pass = all && dev < 1e-6 && cos >= 1.0 - 1e-10;
    Ok((
        pass,
        format!("max deviation {dev:.2e}, min cosine 1 - {:.1e}", 1.0 - cos),
    ))
}

fn contrastive_kl() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let domain = DiscreteDomain::random(seed, 5, 2, 3)?;
        worst = worst.max(check_lemma1(&theory_model(seed, 3)?, &domain)?.max_rel_error);
    }
    Ok((
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 10 seeds"),
    ))
}

fn bound() -> Result<(bool, String)> {
    let k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_margin = f64::INFINITY;
    let mut triples = 0;
    for t in 0..100 {
        let mut model = theory_model(100 + t, k)?;
        // spread the logit scale so saturated softmaxes are covered too
        let scale: f64 = 10f64.powf(rng.random_range(-1.0..2.0));
        let theta: Vec<f64> = model.params_flat().iter().map(|v| v * scale).collect();
        model.set_params_flat(&theta)?;
        let x: Vec<f64> = (0..200)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = model.forward(&Array::matrix(100, 2, x)?)?;
        for r in 0..100 {
            min_margin = min_margin.min(bound_margin(logits.row(r), rng.random_range(0..k)));
            triples += 1;
        }
    }
    let domain = DiscreteDomain::default_grid();
    let mut aggregate = true;
    for seed in 0..20 {
        aggregate &= check_theorem1_bound(&theory_model(seed, k)?, &domain)?.pass;
    }
    Ok((
        min_margin >= 0.0 && aggregate,
        format!("{triples} triples, min margin {min_margin:.3e}; aggregate bound holds on 20 grid models: {aggregate}"),
    ))
}

/// Small-network settings shared by the mixture criteria.
fn mixture_config(loss: LossKind) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        loss,
        sgld: desk_sgld(0, 20),
        ..TrainConfig::default()
    }
}

fn density() -> Result<(bool, String)> {
    let grid = DiscreteDomain::grid(25, -4.0, 4.0, 2)?;
    let mut good = 0;
    let mut rhos = Vec::new();
    for seed in 0..SEEDS {
        let train = gen_gaussian_mixture(seed, 2000, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = EowClassifier::new(2, &[16, 16], 2, &mut rng)?;
        let config = TrainConfig {
            lambda: 0.1,
            epochs: 50,
            ..mixture_config(LossKind::Eow)
        };
        fit(&mut model, &train, &config, &mut rng, None)?;
        let r = check_density_proportionality(&model, &grid)?;
        if let (Some(known), Some(unc)) = (r.known_mass, r.uncertainty) {
            if known >= 0.6 && known * unc < 0.0 {
                good += 1;
            }
            rhos.push(format!("{known:.2}/{unc:.2}"));
        } else {
            rhos.push("undefined".into());
        }
    }
    Ok((
        good >= 3,
        format!(
            "{good}/{SEEDS} seeds; rho known/uncertainty {}",
            rhos.join(" ")
        ),
    ))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("EOW_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k"))
}

fn load_mnist(dir: &Path) -> Result<Dataset> {
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    load_idx(&pick("images-idx3-ubyte"), &pick("labels-idx1-ubyte"))
}

fn mnist_calibration() -> Result<(bool, String)> {
    let ds = load_mnist(&mnist_dir())?;
    let (train, _, test) = split(&ds, (0.8, 0.0, 0.2), 0)?;
    let base = TrainConfig {
        lr: 0.01,
        epochs: 20,
        ..TrainConfig::default()
    };
    let vanilla_cfg = TrainConfig {
        loss: LossKind::Vanilla,
        ..base.clone()
    };
    let eow_cfg = TrainConfig {
        loss: LossKind::Eow,
        sgld: desk_sgld(2, 10),
        ..base
    };
    let (mut ev, mut ee, mut av, mut ae) = (vec![], vec![], vec![], vec![]);
    for seed in 0..SEEDS {
        let v = train_and_evaluate(&train, &test, &DEFAULT_HIDDEN, &vanilla_cfg, seed)?.summary;
        let e = train_and_evaluate(&train, &test, &DEFAULT_HIDDEN, &eow_cfg, seed)?.summary;
        ev.push(v.ece);
        ee.push(e.ece);
        av.push(v.accuracy);
        ae.push(e.accuracy);
    }
    let ((ecev, sev), (ecee, see)) = (mean_std(&ev), mean_std(&ee));
    let (accv, acce) = (mean_std(&av).0, mean_std(&ae).0);
    Ok((
        ecee < ecev && acce >= accv - 0.01,
        format!(
            "ECE vanilla {:.2}% ± {:.2} vs energy {:.2}% ± {:.2}; accuracy {:.2}% vs {:.2}%",
            100.0 * ecev,
            100.0 * sev,
            100.0 * ecee,
            100.0 * see,
            100.0 * accv,
            100.0 * acce
        ),
    ))
}

fn metric_oracles() -> Result<(bool, String)> {
    let rec =
        |c: f64, correct: bool| PredictionRecord::new(c, 0, Some(if correct { 0 } else { 1 }));
    let hand = ece(&[rec(0.6, true), rec(0.8, false)], 2)?.ece;
    let perfect = ece(&[rec(1.0, true), rec(1.0, true), rec(1.0, true)], 15)?.ece;

    let r = |probs: Vec<f64>, label| PredictionRecord::from_probs(probs, 2, Some(label));
    let pair = nll(
        &[r(vec![0.5, 0.3, 0.2], 0), r(vec![0.25, 0.7, 0.05], 0)],
        NllMode::TrueLabel,
    )?
    .value;
    let certain = nll(&[r(vec![1.0, 0.0, 0.0], 0)], NllMode::TrueLabel)?.value;
    let mut uniform_err: f64 = 0.0;
    for k in 1..20 {
        let logits = Array::zeros(&[4, k + 1]);
        let labels: Vec<usize> = (0..4).map(|i| i % k).collect();
        let v = nll(
            &records_from_logits(&logits, Some(&labels), ScoreMode::OpenWorld)?,
            NllMode::TrueLabel,
        )?
        .value;
        uniform_err = uniform_err.max((v - ((k + 1) as f64).ln()).abs());
    }
    let pass = hand == 0.2
        && perfect == 0.0
        && pair == (2f64.ln() + 4f64.ln()) / 2.0
        && certain == 0.0
        && uniform_err < 1e-12;
    Ok((
        pass,
        format!("hand ECE {hand}, perfect ECE {perfect}, NLL {pair:.6}, uniform NLL error {uniform_err:.1e}"),
    ))
}

fn ood() -> Result<(bool, String)> {
    let mut wins = 0;
    let mut monotone = true;
    let mut at_half = Vec::new();
    for seed in 0..SEEDS {
        let pair = mixture_ood_pair(seed, 2000, 1000, 2, (6.0, 6.0))?;
        let acc = |loss| -> Result<Vec<Option<f64>>> {
            let run = train_and_evaluate(
                &pair.train,
                &pair.test,
                &[16, 16],
                &mixture_config(loss),
                seed,
            )?;
            Ok(ood_table(&run.model, &pair.test, &pair.ood, loss)?
                .iter()
                .map(|r| r.accuracy)
                .collect())
        };
        let (v, e) = (acc(LossKind::Vanilla)?, acc(LossKind::Eow)?);
        let e_vals: Option<Vec<f64>> = e.iter().copied().collect();
        monotone &= e_vals.is_some_and(|a| a.windows(2).all(|w| w[0] <= w[1]));
        if let (Some(a), Some(b)) = (e[2], v[2]) {
            if a > b {
                wins += 1;
            }
            at_half.push(format!("{a:.3}/{b:.3}"));
        }
    }
    Ok((
        monotone && wins >= 3,
        format!(
            "non-decreasing in every seed: {monotone}; energy beats vanilla at 0.5 in {wins}/{SEEDS} ({})",
            at_half.join(" ")
        ),
    ))
}

fn sampler() -> Result<(bool, String)> {
    let alpha: f64 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut z = Array::zeros(&[1, 16]);
    let (burn_in, steps) = (2_000, 100_000);
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for t in 0..burn_in + steps {
        langevin_step(
            &QuadraticEnergy,
            &mut z,
            alpha,
            alpha.sqrt(),
            None,
            &mut rng,
        )?;
        if t >= burn_in {
            for &v in z.data() {
                sum += v;
                sum_sq += v * v;
                count += 1.0;
            }
        }
    }
    let mean = sum / count;
    let var = sum_sq / count - mean * mean;

    let data = (0..40)
        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut z = Array::matrix(5, 8, data)?;
    let mut non_increasing = true;
    let mut prev: f64 = QuadraticEnergy.energy_and_grad(&z)?.0.iter().sum();
    for _ in 0..100 {
        langevin_step(&QuadraticEnergy, &mut z, 0.5, 0.0, None, &mut rng)?;
        let e: f64 = QuadraticEnergy.energy_and_grad(&z)?.0.iter().sum();
        non_increasing &= e <= prev;
        prev = e;
    }
    Ok((
        (var - 1.0).abs() < 0.1 && non_increasing,
        format!("stationary variance {var:.4}; noiseless energy non-increasing: {non_increasing}"),
    ))
}

fn ablation() -> Result<(bool, String)> {
    let pair = mixture_ood_pair(0, 2000, 1000, 2, (6.0, 6.0))?;
    let config = TrainConfig {
        epochs: 20,
        ..mixture_config(LossKind::Eow)
    };
    let rows = ablate_lambda(
        &pair.train,
        &pair.test,
        &[16, 16],
        &config,
        &ABLATION_LAMBDAS,
        0,
    )?;
    let csv = ablation_csv(&rows);
    let finite = rows.iter().all(|r| {
        r.summary.accuracy.is_finite() && r.summary.ece.is_finite() && r.summary.nll.is_finite()
    });
    let lambdas_match = rows.iter().map(|r| r.lambda).eq(ABLATION_LAMBDAS);
    let table = rows
        .iter()
        .map(|r| {
            format!(
                "λ={} acc {:.3} ece {:.3} nll {:.3}",
                r.lambda, r.summary.accuracy, r.summary.ece, r.summary.nll
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        rows.len() == 3 && lambdas_match && finite && csv.lines().count() == 4,
        table,
    ))
}
