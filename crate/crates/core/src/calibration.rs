//! Calibration and rejection metrics over prediction records.

use crate::data::{corrupt, Corruption, Dataset};
use crate::diff::Array;
use crate::error::{Error, Result};
use crate::model::{EowClassifier, Probs};

/// Floor applied to a scored probability before taking its log.
pub const NLL_CLAMP: f64 = 1e-12;

/// How scores are read off the `K+1` logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreMode {
    /// `K+1`-way softmax; confidence is the score of the predicted known
    /// class, not renormalised.
    #[default]
    OpenWorld,
    /// `K`-way softmax over the known classes only (baselines).
    ClosedWorld,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open_world" => Ok(ScoreMode::OpenWorld),
            "closed_world" => Ok(ScoreMode::ClosedWorld),
            _ => Err(Error::Parse(format!("unknown score mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    /// `None` marks an out-of-distribution input.
    pub label: Option<usize>,
    pub probs: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(confidence: f64, predicted: usize, label: Option<usize>) -> Self {
        Self {
            confidence,
            predicted,
            label,
            probs: None,
        }
    }

    /// Builds a record from a probability vector; the prediction is the
    /// argmax over the first `known` entries.
    pub fn from_probs(probs: Vec<f64>, known: usize, label: Option<usize>) -> Self {
        let predicted = (0..known).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
        Self {
            confidence: probs[predicted],
            predicted,
            label,
            probs: Some(probs),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.label == Some(self.predicted)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Scores a batch of logits `[N x (K+1)]`.
pub fn records_from_logits(
    logits: &Array,
    labels: Option<&[usize]>,
    mode: ScoreMode,
) -> Result<Vec<PredictionRecord>> {
    let width = logits.last_dim();
    if width < 2 {
        return Err(Error::ShapeMismatch {
            op: "records_from_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![2],
        });
    }
    if let Some(l) = labels {
        if l.len() != logits.rows() {
            return Err(Error::ShapeMismatch {
                op: "records_from_logits",
                lhs: logits.shape().to_vec(),
                rhs: vec![l.len()],
            });
        }
    }
    let k = width - 1;
    Ok((0..logits.rows())
        .map(|r| {
            let label = labels.map(|l| l[r]);
            let probs = match mode {
                ScoreMode::OpenWorld => Probs::from_logits(logits.row(r)).values().to_vec(),
                ScoreMode::ClosedWorld => softmax(&logits.row(r)[..k]),
            };
            PredictionRecord::from_probs(probs, k, label)
        })
        .collect())
}

/// Records for `inputs`; `labels = None` marks every row as out of
/// distribution.
pub fn records_from_model(
    model: &EowClassifier,
    inputs: &Array,
    labels: Option<&[usize]>,
    mode: ScoreMode,
) -> Result<Vec<PredictionRecord>> {
    records_from_logits(&model.forward(inputs)?.as_batch(), labels, mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EceBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub sum_confidence: f64,
    pub sum_correct: f64,
    /// `sum (conf - correct)`, accumulated per record.
    pub sum_gap: f64,
}

impl EceBin {
    pub fn avg_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_confidence / self.count as f64)
    }

    pub fn avg_accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_correct / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EceReport {
    pub bins: Vec<EceBin>,
    pub ece: f64,
    pub total: usize,
}

impl EceReport {
    /// Reliability-diagram rows; empty bins leave the averages blank.
    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,avg_conf,avg_acc\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low,
                b.high,
                b.count,
                opt(b.avg_confidence()),
                opt(b.avg_accuracy())
            ));
        }
        out
    }
}

/// Binned calibration error with `bins` equal-width bins
/// `[(l-1)/L, l/L)`, the last one closed:
/// `sum_l |sum_{I_l} (conf - correct)| / N`.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<EceReport> {
    if records.is_empty() {
        return Err(Error::Empty("ece records"));
    }
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    let mut table: Vec<EceBin> = (0..bins)
        .map(|l| EceBin {
            low: l as f64 / bins as f64,
            high: (l + 1) as f64 / bins as f64,
            count: 0,
            sum_confidence: 0.0,
            sum_correct: 0.0,
            sum_gap: 0.0,
        })
        .collect();
    for r in records {
        let c = r.confidence;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        let l = ((c * bins as f64).floor() as usize).min(bins - 1);
        let bin = &mut table[l];
        bin.count += 1;
        bin.sum_confidence += c;
        let correct = r.is_correct() as u8 as f64;
        bin.sum_correct += correct;
        bin.sum_gap += c - correct;
    }
    let n = records.len() as f64;
    let ece = table.iter().map(|b| b.sum_gap.abs() / n).sum();
    Ok(EceReport {
        bins: table,
        ece,
        total: records.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NllMode {
    /// Scores the true label.
    #[default]
    TrueLabel,
    /// Scores the predicted label.
    PredictedLabel,
}

impl NllMode {
    pub fn name(self) -> &'static str {
        match self {
            NllMode::TrueLabel => "true_label",
            NllMode::PredictedLabel => "predicted_label",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllReport {
    pub value: f64,
    pub mode: NllMode,
    /// Records whose scored probability was below the clamp.
    pub clamped: usize,
}

pub fn nll(records: &[PredictionRecord], mode: NllMode) -> Result<NllReport> {
    if records.is_empty() {
        return Err(Error::Empty("nll records"));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for r in records {
        let probs = r
            .probs
            .as_ref()
            .ok_or_else(|| Error::Config("nll needs records with probabilities".into()))?;
        let index = match mode {
            NllMode::TrueLabel => r
                .label
                .ok_or_else(|| Error::Config("true-label nll over an unlabeled record".into()))?,
            NllMode::PredictedLabel => r.predicted,
        };
        let p = *probs.get(index).ok_or(Error::IndexOutOfRange {
            index,
            limit: probs.len(),
        })?;
        if p < NLL_CLAMP {
            clamped += 1;
        }
        total -= p.max(NLL_CLAMP).ln();
    }
    Ok(NllReport {
        value: total / records.len() as f64,
        mode,
        clamped,
    })
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy records"));
    }
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

/// Accuracy, ECE (15 bins) and true-label NLL of a model on a labelled set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub n: usize,
}

pub fn evaluate(model: &EowClassifier, ds: &Dataset, mode: ScoreMode) -> Result<EvalSummary> {
    let records = records_from_model(model, &ds.inputs, Some(&ds.labels), mode)?;
    summarize(&records)
}

pub fn summarize(records: &[PredictionRecord]) -> Result<EvalSummary> {
    Ok(EvalSummary {
        accuracy: accuracy(records)?,
        ece: ece(records, 15)?.ece,
        nll: nll(records, NllMode::TrueLabel)?.value,
        n: records.len(),
    })
}

fn scaled_nll(logits: &Array, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| ((v - max) / t).exp()).sum::<f64>().ln();
        total += lse - (row[y] - max) / t;
    }
    total / labels.len() as f64
}

/// Temperature minimising the true-label NLL of `softmax(logits / T)`,
/// found by golden-section search over `log T` in `[-3, 3]`.
pub fn temperature_fit(logits: &Array, labels: &[usize]) -> Result<f64> {
    let logits = logits.as_batch();
    if labels.is_empty() {
        return Err(Error::Empty("temperature validation set"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            op: "temperature_fit",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.last_dim()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: logits.last_dim(),
        });
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Domain(
            "temperature fit on a single-class validation set".into(),
        ));
    }
    let f = |log_t: f64| scaled_nll(&logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-3.0f64, 3.0f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok((0.5 * (a + b)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub kept_in: usize,
    pub kept_ood: usize,
    pub correct: usize,
    /// `None` when every record was rejected.
    pub accuracy: Option<f64>,
}

pub const OOD_THRESHOLDS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

/// Keeps records with confidence strictly above each threshold (everything
/// at 0) and scores the kept set, counting kept OOD records as errors.
pub fn ood_threshold_accuracy(
    in_dist: &[PredictionRecord],
    ood: &[PredictionRecord],
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>> {
    if in_dist.is_empty() && ood.is_empty() {
        return Err(Error::Empty("ood records"));
    }
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let keep = |r: &&PredictionRecord| tau <= 0.0 || r.confidence > tau;
            let kept: Vec<&PredictionRecord> = in_dist.iter().filter(keep).collect();
            let kept_ood = ood.iter().filter(keep).count();
            let correct = kept.iter().filter(|r| r.is_correct()).count();
            let total = kept.len() + kept_ood;
            ThresholdRow {
                threshold: tau,
                kept_in: kept.len(),
                kept_ood,
                correct,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect())
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("threshold,kept_in,kept_ood,correct,accuracy\n");
    for r in rows {
        let acc = r
            .accuracy
            .map(|a| a.to_string())
            .unwrap_or_else(|| "undefined".into());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.threshold, r.kept_in, r.kept_ood, r.correct, acc
        ));
    }
    out
}

/// Mean and population standard deviation, accumulated as offsets from the
/// first value so equal inputs give exactly that value and 0. NaN for an
/// empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&first) = values.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = values.len() as f64;
    let shift = values.iter().map(|v| v - first).sum::<f64>() / n;
    let square = values.iter().map(|v| (v - first).powi(2)).sum::<f64>() / n;
    (first + shift, (square - shift * shift).max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub severity: usize,
    pub per_type: Vec<(Corruption, f64)>,
    pub mean_ece: f64,
    /// Population standard deviation across corruption types.
    pub std_ece: f64,
}

/// ECE under each corruption at each severity. Severity 0 is the clean set.
pub fn corruption_sweep(
    model: &EowClassifier,
    clean: &Dataset,
    kinds: &[Corruption],
    severities: &[usize],
    mode: ScoreMode,
    seed: u64,
    clamp_unit: bool,
) -> Result<Vec<SweepRow>> {
    if kinds.is_empty() && !severities.is_empty() {
        return Err(Error::Config(
            "corruption sweep needs at least one corruption type".into(),
        ));
    }
    let mut rows = Vec::with_capacity(severities.len());
    for &severity in severities {
        let mut per_type = Vec::with_capacity(kinds.len());
        for (i, &kind) in kinds.iter().enumerate() {
            let inputs = if severity == 0 {
                clean.inputs.clone()
            } else {
                corrupt(
                    &clean.inputs,
                    kind,
                    severity,
                    seed.wrapping_add(i as u64),
                    clamp_unit,
                )?
            };
            let records = records_from_model(model, &inputs, Some(&clean.labels), mode)?;
            per_type.push((kind, ece(&records, 15)?.ece));
        }
        let eces: Vec<f64> = per_type.iter().map(|p| p.1).collect();
        let (mean_ece, std_ece) = mean_std(&eces);
        rows.push(SweepRow {
            severity,
            per_type,
            mean_ece,
            std_ece,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("severity,mean_ece,std_ece");
    if let Some(first) = rows.first() {
        for (kind, _) in &first.per_type {
            out.push_str(&format!(",{}", kind.name()));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.severity, r.mean_ece, r.std_ece));
        for (_, e) in &r.per_type {
            out.push_str(&format!(",{e}"));
        }
        out.push('\n');
    }
    out
}
