//! End-to-end protocols built from the library pieces: train-and-evaluate,
//! the lambda ablation, mixture out-of-distribution tables and multi-seed
//! summaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::calibration::mean_std;
use crate::calibration::{
    evaluate, ood_threshold_accuracy, records_from_model, EvalSummary, ThresholdRow, OOD_THRESHOLDS,
};
use crate::data::{Dataset, GaussianMixture};
use crate::energy::{ChainInit, SgldConfig};
use crate::error::{Error, Result};
use crate::model::EowClassifier;
use crate::objective::{fit, LossKind, TrainConfig, TrainLog};

/// Hidden widths of the default classifier.
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Sampler used for the small benchmark runs: short chains started at the
/// data with unit noise, so they spread over the neighbourhood of the
/// training set instead of settling where the model is already uncertain.
pub fn desk_sgld(stage: usize, steps: usize) -> SgldConfig {
    SgldConfig {
        alpha: 0.5,
        sigma: 1.0,
        steps,
        stage,
        init: ChainInit::Data,
        ..SgldConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: EowClassifier,
    pub log: TrainLog,
    pub summary: EvalSummary,
}

/// Initialises a classifier from `seed`, trains it on `train` and scores it
/// on `test` in the mode matching the loss.
pub fn train_and_evaluate(
    train: &Dataset,
    test: &Dataset,
    hidden: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<RunResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EowClassifier::new(train.dim(), hidden, train.num_classes, &mut rng)?;
    let log = fit(&mut model, train, config, &mut rng, None)?;
    let summary = evaluate(&model, test, config.loss.score_mode())?;
    Ok(RunResult {
        model,
        log,
        summary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub summary: EvalSummary,
}

pub const ABLATION_LAMBDAS: [f64; 3] = [1.0, 0.1, 0.01];

/// Trains one energy-loss model per `lambda` from the same seed.
pub fn ablate_lambda(
    train: &Dataset,
    test: &Dataset,
    hidden: &[usize],
    base: &TrainConfig,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("ablation needs at least one lambda".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let config = TrainConfig {
                lambda,
                loss: LossKind::Eow,
                ..base.clone()
            };
            let run = train_and_evaluate(train, test, hidden, &config, seed)?;
            Ok(AblationRow {
                lambda,
                summary: run.summary,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("lambda,accuracy,ece,nll\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.summary.accuracy, r.summary.ece, r.summary.nll
        ));
    }
    out
}

/// In-distribution mixture data and its copy translated by `offset`, drawn
/// with independent seeds. The shifted copy keeps its component labels, but
/// they carry no meaning for the classifier.
#[derive(Clone, Debug)]
pub struct OodPair {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

pub fn mixture_ood_pair(
    seed: u64,
    n_train: usize,
    n_test: usize,
    k: usize,
    offset: (f64, f64),
) -> Result<OodPair> {
    let mixture = GaussianMixture::on_circle(k);
    let shifted = mixture.translated(offset.0, offset.1);
    Ok(OodPair {
        train: mixture.sample("mixture_train", seed.wrapping_mul(3), n_train)?,
        test: mixture.sample("mixture_test", seed.wrapping_mul(3).wrapping_add(1), n_test)?,
        ood: shifted.sample("mixture_ood", seed.wrapping_mul(3).wrapping_add(2), n_test)?,
    })
}

/// Thresholded accuracy of `model` on `test` combined with `ood`.
pub fn ood_table(
    model: &EowClassifier,
    test: &Dataset,
    ood: &Dataset,
    loss: LossKind,
) -> Result<Vec<ThresholdRow>> {
    let mode = loss.score_mode();
    let in_records = records_from_model(model, &test.inputs, Some(&test.labels), mode)?;
    let ood_records = records_from_model(model, &ood.inputs, None, mode)?;
    ood_threshold_accuracy(&in_records, &ood_records, &OOD_THRESHOLDS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(loss: LossKind) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs: 3,
            batch_size: 32,
            loss,
            sgld: SgldConfig {
                steps: 5,
                stage: 1,
                init: ChainInit::Noise,
                ..SgldConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_emits_one_row_per_lambda() {
        let pair = mixture_ood_pair(1, 120, 60, 2, (6.0, 6.0)).unwrap();
        let rows = ablate_lambda(
            &pair.train,
            &pair.test,
            &[8, 8],
            &quick(LossKind::Eow),
            &ABLATION_LAMBDAS,
            3,
        )
        .unwrap();
        assert_eq!(
            rows.iter().map(|r| r.lambda).collect::<Vec<_>>(),
            ABLATION_LAMBDAS
        );
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(rows
            .iter()
            .all(|r| r.summary.accuracy.is_finite() && r.summary.ece.is_finite()));
    }

    #[test]
    fn ood_pair_is_far_from_training_data() {
        let pair = mixture_ood_pair(2, 100, 50, 2, (6.0, 6.0)).unwrap();
        let centre = |d: &Dataset| {
            let n = d.len() as f64;
            (0..2)
                .map(|j| (0..d.len()).map(|r| d.inputs.row(r)[j]).sum::<f64>() / n)
                .collect::<Vec<_>>()
        };
        let (a, b) = (centre(&pair.test), centre(&pair.ood));
        assert!((b[0] - a[0] - 6.0).abs() < 0.3 && (b[1] - a[1] - 6.0).abs() < 0.3);
        let run = train_and_evaluate(&pair.train, &pair.test, &[8], &quick(LossKind::Vanilla), 0)
            .unwrap();
        let table = ood_table(&run.model, &pair.test, &pair.ood, LossKind::Vanilla).unwrap();
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].kept_in + table[0].kept_ood, 100);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[0.1, 0.1, 0.1]), (0.1, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
