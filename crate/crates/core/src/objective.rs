//! Training objectives and the SGD loop.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::calibration::{evaluate, ScoreMode};
use crate::data::Dataset;
use crate::diff::{floored_relative_error, piecewise_gradient, Array, NodeId, Tape};
use crate::energy::{
    log_uncertainty_on, sample, ChainInit, ChainState, PersistentBuffer, SgldConfig,
};
use crate::error::{Error, Result};
use crate::model::EowClassifier;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Cross-entropy over all `K+1` outputs plus the weighted energy term.
    Eow,
    /// `K`-way cross-entropy; the uncertainty output is ignored.
    Vanilla,
    /// `K`-way cross-entropy against smoothed targets.
    LabelSmoothing(f64),
}

impl LossKind {
    /// How a model trained with this loss is scored at evaluation time.
    pub fn score_mode(self) -> ScoreMode {
        match self {
            LossKind::Eow => ScoreMode::OpenWorld,
            LossKind::Vanilla | LossKind::LabelSmoothing(_) => ScoreMode::ClosedWorld,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Eow => write!(f, "eow"),
            LossKind::Vanilla => write!(f, "vanilla"),
            LossKind::LabelSmoothing(eps) => write!(f, "label_smoothing({eps})"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    /// `eow`, `vanilla`, `label_smoothing` (epsilon 0.1) or
    /// `label_smoothing(<eps>)`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "eow" => Ok(LossKind::Eow),
            "vanilla" => Ok(LossKind::Vanilla),
            "label_smoothing" => Ok(LossKind::LabelSmoothing(0.1)),
            other => other
                .strip_prefix("label_smoothing(")
                .and_then(|rest| rest.strip_suffix(')'))
                .and_then(|eps| eps.parse().ok())
                .map(LossKind::LabelSmoothing)
                .ok_or_else(|| Error::Parse(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate is multiplied by `lr_decay` at each of these
    /// fractions of the run.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub sgld: SgldConfig,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 50,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            sgld: SgldConfig::default(),
            loss: LossKind::Eow,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule (200 epochs); everything else as the default.
    pub fn full_length() -> Self {
        Self {
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!(
                "lr milestones must be fractions in [0, 1], got {:?}",
                self.lr_milestones
            ));
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be > 0, got {}", self.lr_decay));
        }
        if let LossKind::LabelSmoothing(eps) = self.loss {
            if !(0.0..=1.0).contains(&eps) {
                return bad(format!(
                    "label smoothing epsilon must be in [0, 1], got {eps}"
                ));
            }
        }
        self.sgld.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Array, labels: Vec<usize>) -> Result<Self> {
        let inputs = inputs.as_batch();
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled batch",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("labeled batch"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        Self::new(
            ds.inputs.select_rows(indices),
            indices.iter().map(|&i| ds.labels[i]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A loss value with its parts and the gradient in `params_flat` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub ce_term: f64,
    pub energy_term: f64,
    pub grad: Vec<f64>,
    /// Rows whose prediction (argmax over the known classes) was right.
    pub correct: usize,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

fn count_correct(logits: &Array, labels: &[usize], k: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &logits.row(r)[..k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

struct Forward {
    tape: Tape,
    params: crate::model::BoundParams,
    logits: NodeId,
}

fn forward(model: &EowClassifier, batch: &LabeledBatch) -> Result<Forward> {
    check_labels(&batch.labels, model.num_classes())?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(batch.inputs.clone());
    let logits = model.logits_on(&mut tape, &params, x, 0)?;
    Ok(Forward {
        tape,
        params,
        logits,
    })
}

fn finish(
    f: Forward,
    root: NodeId,
    ce: f64,
    energy: f64,
    labels: &[usize],
    k: usize,
) -> Result<LossOutput> {
    let grads = f.tape.backward(root)?;
    Ok(LossOutput {
        loss: f.tape.scalar_value(root),
        ce_term: ce,
        energy_term: energy,
        grad: f.params.gradient(&f.tape, &grads),
        correct: count_correct(f.tape.value(f.logits), labels, k),
    })
}

/// `mean(-log h(x)[y]) + lambda * mean(-log h(z)[K])`, where `h` is the
/// `K+1`-way softmax and the second term runs the sampled latents through the
/// remaining stages. The latents enter as constants. With `lambda == 0` or
/// no samples the second term is omitted.
pub fn eow_loss(
    model: &EowClassifier,
    batch: &LabeledBatch,
    sampled: Option<&ChainState>,
    lambda: f64,
) -> Result<LossOutput> {
    let k = model.num_classes();
    let mut f = forward(model, batch)?;
    let tape = &mut f.tape;
    let log_probs = tape.log_softmax(f.logits)?;
    let picked = tape.pick(log_probs, &batch.labels)?;
    let mean_lp = tape.mean(picked)?;
    let ce = tape.neg(mean_lp)?;
    let ce_value = tape.scalar_value(ce);

    let (root, energy_value) = match sampled {
        Some(chain) if lambda > 0.0 => {
            let z = tape.constant(chain.z.as_batch());
            let z_logits = model.logits_on(tape, &f.params, z, chain.stage)?;
            let log_u = log_uncertainty_on(tape, z_logits)?;
            let mean_u = tape.mean(log_u)?;
            let energy = tape.neg(mean_u)?;
            let weighted = tape.scale(energy, lambda)?;
            (tape.add(ce, weighted)?, tape.scalar_value(energy))
        }
        _ => (ce, 0.0),
    };
    finish(f, root, ce_value, energy_value, &batch.labels, k)
}

/// `K`-way cross-entropy against per-row targets, with the uncertainty logit
/// masked out: `mean(logsumexp_{j<K}(l) - sum_j t_j l_j)`.
fn closed_world_ce(model: &EowClassifier, batch: &LabeledBatch, eps: f64) -> Result<LossOutput> {
    let k = model.num_classes();
    let mut f = forward(model, batch)?;
    let tape = &mut f.tape;
    let rows = batch.len();
    let mut targets = Array::zeros(&[rows, k + 1]);
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = targets.row_mut(r);
        row[..k].iter_mut().for_each(|t| *t = eps / k as f64);
        row[y] += 1.0 - eps;
    }
    let lse = tape.log_sum_exp(f.logits, 0, k)?;
    let mean_lse = tape.mean(lse)?;
    let t = tape.constant(targets);
    let weighted = tape.mul(f.logits, t)?;
    let total = tape.sum(weighted)?;
    let fit = tape.scale(total, -1.0 / rows as f64)?;
    let loss = tape.add(mean_lse, fit)?;
    let value = tape.scalar_value(loss);
    finish(f, loss, value, 0.0, &batch.labels, k)
}

/// Standard `K`-way cross-entropy; the uncertainty output gets no gradient.
pub fn vanilla_loss(model: &EowClassifier, batch: &LabeledBatch) -> Result<LossOutput> {
    closed_world_ce(model, batch, 0.0)
}

/// `K`-way cross-entropy against `(1 - eps) * onehot + eps / K`.
pub fn label_smoothing_loss(
    model: &EowClassifier,
    batch: &LabeledBatch,
    eps: f64,
) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "label smoothing epsilon must be in [0, 1], got {eps}"
        )));
    }
    closed_world_ce(model, batch, eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    /// Steps refused because of a non-finite gradient.
    pub skipped: usize,
}

impl Sgd {
    /// `v = momentum * v + grad + wd * theta; theta -= lr * v`. Returns false
    /// (and leaves everything untouched) when the gradient is not finite.
    pub fn step(&self, params: &mut [f64], grad: &[f64], state: &mut SgdState) -> Result<bool> {
        if grad.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: vec![params.len()],
                rhs: vec![grad.len()],
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            state.skipped += 1;
            return Ok(false);
        }
        if state.velocity.len() != params.len() {
            state.velocity = vec![0.0; params.len()];
        }
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut state.velocity) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
        Ok(true)
    }
}

/// Metrics for one epoch. Evaluation fields are `None` without an eval set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce_term: f64,
    pub energy_term: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub eval_ece: Option<f64>,
    pub eval_nll: Option<f64>,
    pub sgld_energy_before: Option<f64>,
    pub sgld_energy_after: Option<f64>,
    pub sgld_skipped: usize,
    pub steps_skipped: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,ce_term,energy_term,train_acc,eval_acc,ece,nll,sgld_energy_before,sgld_energy_after,sgld_skipped,steps_skipped";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss,
            self.ce_term,
            self.energy_term,
            self.train_acc,
            opt(self.eval_acc),
            opt(self.eval_ece),
            opt(self.eval_nll),
            opt(self.sgld_energy_before),
            opt(self.sgld_energy_after),
            self.sgld_skipped,
            self.steps_skipped
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochMetrics::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }
}

/// The loss selected by `config` on one batch. Samples are drawn here for the
/// energy loss; a diverged sampling round drops the energy term for the
/// iteration and is reported through the returned flag.
pub fn training_loss<R: Rng + ?Sized>(
    model: &EowClassifier,
    batch: &LabeledBatch,
    config: &TrainConfig,
    rng: &mut R,
    buffer: Option<&mut PersistentBuffer>,
) -> Result<(LossOutput, Option<crate::energy::SgldRoundLog>, bool)> {
    match config.loss {
        LossKind::Eow if config.lambda > 0.0 => {
            match sample(model, &batch.inputs, &config.sgld, rng, buffer) {
                Ok((chain, log)) => Ok((
                    eow_loss(model, batch, Some(&chain), config.lambda)?,
                    Some(log),
                    false,
                )),
                Err(Error::SgldDiverged { .. }) => {
                    Ok((eow_loss(model, batch, None, 0.0)?, None, true))
                }
                Err(e) => Err(e),
            }
        }
        LossKind::Eow => Ok((eow_loss(model, batch, None, 0.0)?, None, false)),
        LossKind::Vanilla => Ok((vanilla_loss(model, batch)?, None, false)),
        LossKind::LabelSmoothing(eps) => {
            Ok((label_smoothing_loss(model, batch, eps)?, None, false))
        }
    }
}

/// Minibatch SGD over `train`. Each iteration samples latents from a frozen
/// copy of the current parameters (energy loss only), evaluates the loss and
/// takes one optimizer step. Fully determined by `rng`.
pub fn fit<R: Rng + ?Sized>(
    model: &mut EowClassifier,
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
    eval: Option<&Dataset>,
) -> Result<TrainLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if train.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {}",
            train.num_classes,
            model.num_classes()
        )));
    }
    let mut buffer = (config.sgld.init == ChainInit::Persistent)
        .then(|| PersistentBuffer::new(config.sgld.buffer_capacity));
    let mut state = SgdState::default();
    let mut params = model.params_flat();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let sgd = Sgd {
            lr: config.lr_at(epoch),
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        order.shuffle(rng);
        let (mut loss, mut ce, mut energy, mut correct, mut batches) =
            (0.0, 0.0, 0.0, 0usize, 0usize);
        let (mut e_before, mut e_after, mut rounds, mut sgld_skipped) = (0.0, 0.0, 0usize, 0usize);
        let skipped_before = state.skipped;
        for chunk in order.chunks(config.batch_size) {
            let batch = LabeledBatch::from_dataset(train, chunk)?;
            let (out, round, diverged) =
                training_loss(model, &batch, config, rng, buffer.as_mut())?;
            if let Some(r) = round {
                e_before += r.energy_before;
                e_after += r.energy_after;
                rounds += 1;
            }
            sgld_skipped += diverged as usize;
            if sgd.step(&mut params, &out.grad, &mut state)? {
                model.set_params_flat(&params)?;
            }
            loss += out.loss;
            ce += out.ce_term;
            energy += out.energy_term;
            correct += out.correct;
            batches += 1;
        }
        let summary = eval
            .map(|ds| evaluate(model, ds, config.loss.score_mode()))
            .transpose()?;
        let per_round = |v: f64| (rounds > 0).then(|| v / rounds as f64);
        log.epochs.push(EpochMetrics {
            epoch,
            lr: sgd.lr,
            loss: loss / batches as f64,
            ce_term: ce / batches as f64,
            energy_term: energy / batches as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc: summary.as_ref().map(|s| s.accuracy),
            eval_ece: summary.as_ref().map(|s| s.ece),
            eval_nll: summary.as_ref().map(|s| s.nll),
            sgld_energy_before: per_round(e_before),
            sgld_energy_after: per_round(e_after),
            sgld_skipped,
            steps_skipped: state.skipped - skipped_before,
        });
    }
    Ok(log)
}

/// Gradient magnitude below which errors are measured against this floor
/// instead. Round-off in the difference quotients is around `1e-12`, so
/// relative errors of smaller components are noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(|numeric_i|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares a loss gradient with fourth-order finite differences over every
/// parameter (see [`piecewise_gradient`]). `probes` lists the inputs the loss
/// runs through, each with the stage it enters at; their ReLU activation
/// patterns identify the linear piece a parameter setting lies on.
pub fn gradient_check(
    model: &EowClassifier,
    loss: impl Fn(&EowClassifier) -> Result<LossOutput>,
    probes: &[(&Array, usize)],
) -> Result<GradCheck> {
    let analytic = loss(model)?.grad;
    let mut probe = model.clone();
    let numeric = piecewise_gradient(
        |theta| {
            probe.set_params_flat(theta)?;
            let pattern = probes
                .iter()
                .map(|&(z, s)| probe.activation_pattern(z, s))
                .collect::<Result<Vec<_>>>()?;
            Ok((loss(&probe)?.loss, pattern))
        },
        &model.params_flat(),
        1e-3,
    )?;
    let (max_rel_error, worst_index) =
        floored_relative_error(&analytic, &numeric, GRAD_CHECK_FLOOR);
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::energy::sampling_energy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, k: usize) -> (EowClassifier, LabeledBatch, ChainState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EowClassifier::new(2, &[16, 16], k, &mut rng).unwrap();
        let ds = gen_gaussian_mixture(seed, 8, k).unwrap();
        let batch = LabeledBatch::from_dataset(&ds, &(0..8).collect::<Vec<_>>()).unwrap();
        let cfg = SgldConfig {
            steps: 5,
            stage: 1,
            ..SgldConfig::default()
        };
        let (chain, _) = sample(&model, &batch.inputs, &cfg, &mut rng, None).unwrap();
        (model, batch, chain)
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..5 {
            let (model, batch, chain) = tiny(seed, 3);
            let data = [(&batch.inputs, 0)];
            let with_chain = [(&batch.inputs, 0), (&chain.z, chain.stage)];
            let check = gradient_check(
                &model,
                |m| eow_loss(m, &batch, Some(&chain), 0.1),
                &with_chain,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "eow seed {seed}: {check:?}");
            let check = gradient_check(&model, |m| vanilla_loss(m, &batch), &data).unwrap();
            assert!(check.max_rel_error < 1e-4, "vanilla seed {seed}: {check:?}");
            let check =
                gradient_check(&model, |m| label_smoothing_loss(m, &batch, 0.1), &data).unwrap();
            assert!(
                check.max_rel_error < 1e-4,
                "smoothing seed {seed}: {check:?}"
            );
        }
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let (model, batch, chain) = tiny(3, 3);
        let with = eow_loss(&model, &batch, Some(&chain), 0.0).unwrap();
        let probs = model.probs(&batch.inputs).unwrap();
        let ce = -batch
            .labels
            .iter()
            .zip(&probs)
            .map(|(&y, p)| p.values()[y].ln())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((with.loss - ce).abs() < 1e-12);
        assert_eq!(with.loss, eow_loss(&model, &batch, None, 0.3).unwrap().loss);
    }

    #[test]
    fn sampled_latents_are_constants() {
        let (model, batch, chain) = tiny(4, 2);
        let base = eow_loss(&model, &batch, Some(&chain), 0.5).unwrap();
        let no_energy = eow_loss(&model, &batch, None, 0.0).unwrap();
        let mut moved = chain.clone();
        moved.z.data_mut().iter_mut().for_each(|v| *v += 0.3);
        let shifted = eow_loss(&model, &batch, Some(&moved), 0.5).unwrap();
        assert_eq!(base.ce_term, shifted.ce_term);
        assert_ne!(base.energy_term, shifted.energy_term);

        // the energy part of the gradient is exactly that of -0.5 * mean log h[K]
        // at the sampled latents, computed independently
        let energy_grad = gradient_check_energy(&model, &chain);
        for ((b, n), e) in base.grad.iter().zip(&no_energy.grad).zip(&energy_grad) {
            assert!((b - n - 0.5 * e).abs() < 1e-10);
        }
        assert!(
            (base.energy_term - sampling_energy(&model, &chain.z, chain.stage).unwrap()).abs()
                < 1e-12
        );
    }

    fn gradient_check_energy(model: &EowClassifier, chain: &ChainState) -> Vec<f64> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let z = tape.constant(chain.z.clone());
        let logits = model.logits_on(&mut tape, &params, z, chain.stage).unwrap();
        let lu = log_uncertainty_on(&mut tape, logits).unwrap();
        let m = tape.mean(lu).unwrap();
        let e = tape.neg(m).unwrap();
        let grads = tape.backward(e).unwrap();
        params.gradient(&tape, &grads)
    }

    #[test]
    fn label_smoothing_hand_value() {
        // K = 2, logits chosen so the K-way probabilities are (0.8, 0.2)
        let head = crate::model::Dense {
            weights: Array::zeros(&[1, 3]),
            bias: Array::vector(vec![0.8f64.ln(), 0.2f64.ln(), 5.0]),
        };
        let model =
            EowClassifier::from_layers(vec![crate::model::Dense::zeros(1, 1)], head, 2).unwrap();
        let batch = LabeledBatch::new(Array::matrix(1, 1, vec![0.0]).unwrap(), vec![0]).unwrap();
        let got = label_smoothing_loss(&model, &batch, 0.1).unwrap().loss;
        let expected = -0.95 * 0.8f64.ln() - 0.05 * 0.2f64.ln();
        assert!((got - expected).abs() < 1e-12);
        assert!(
            (label_smoothing_loss(&model, &batch, 0.0).unwrap().loss
                - vanilla_loss(&model, &batch).unwrap().loss)
                .abs()
                < 1e-15
        );
        assert!((vanilla_loss(&model, &batch).unwrap().loss + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_perfect_losses() {
        let k = 4;
        let model = EowClassifier::zeros(3, &[5], k).unwrap();
        let batch =
            LabeledBatch::new(Array::matrix(2, 3, vec![0.1; 6]).unwrap(), vec![1, 3]).unwrap();
        assert!((vanilla_loss(&model, &batch).unwrap().loss - (k as f64).ln()).abs() < 1e-12);
        assert!(
            (eow_loss(&model, &batch, None, 0.0).unwrap().loss - (k as f64 + 1.0).ln()).abs()
                < 1e-12
        );
        assert!(matches!(
            vanilla_loss(
                &model,
                &LabeledBatch::new(Array::matrix(1, 3, vec![0.0; 3]).unwrap(), vec![4]).unwrap()
            ),
            Err(Error::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn momentum_recursion() {
        let sgd = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut theta = [1.0];
        let mut state = SgdState::default();
        sgd.step(&mut theta, &[2.0], &mut state).unwrap();
        // v1 = 2, theta1 = 1 - 0.2
        assert!((theta[0] - 0.8).abs() < 1e-15);
        sgd.step(&mut theta, &[1.0], &mut state).unwrap();
        // v2 = 0.9 * 2 + 1 = 2.8, theta2 = 0.8 - 0.28
        assert!((theta[0] - 0.52).abs() < 1e-15);

        let plain = Sgd {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut theta = [3.0, -1.0];
        plain
            .step(&mut theta, &[0.0, 0.0], &mut SgdState::default())
            .unwrap();
        assert_eq!(theta, [3.0, -1.0]);
        plain
            .step(&mut theta, &[1.0, 2.0], &mut SgdState::default())
            .unwrap();
        assert_eq!(theta, [2.5, -2.0]);

        let mut state = SgdState::default();
        assert!(!plain
            .step(&mut theta, &[f64::NAN, 0.0], &mut state)
            .unwrap());
        assert_eq!((theta, state.skipped), ([2.5, -2.0], 1));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            epochs: 8,
            lr: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..8).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[3], 1.0);
        assert!((lrs[4] - 0.1).abs() < 1e-15);
        assert!((lrs[6] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("eow".parse::<LossKind>().unwrap(), LossKind::Eow);
        assert_eq!(
            "label_smoothing(0.2)".parse::<LossKind>().unwrap(),
            LossKind::LabelSmoothing(0.2)
        );
        assert_eq!(
            "label_smoothing".parse::<LossKind>().unwrap(),
            LossKind::LabelSmoothing(0.1)
        );
        assert!("mixup".parse::<LossKind>().is_err());
        for kind in [
            LossKind::Eow,
            LossKind::Vanilla,
            LossKind::LabelSmoothing(0.3),
        ] {
            assert_eq!(kind.to_string().parse::<LossKind>().unwrap(), kind);
        }
    }

    fn separable(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let cx = if label == 0 { -1.5 } else { 1.5 };
            data.push(cx + rng.random_range(-0.5..0.5));
            data.push(rng.random_range(-1.0..1.0));
            labels.push(label);
        }
        Dataset::new("separable", Array::matrix(n, 2, data).unwrap(), labels, 2).unwrap()
    }

    fn toy_config(loss: LossKind, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs,
            batch_size: 32,
            loss,
            sgld: SgldConfig {
                alpha: 1.0,
                sigma: 0.01,
                steps: 10,
                stage: 0,
                init: ChainInit::Noise,
                ..SgldConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ds = separable(0, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = EowClassifier::new(2, &[8], 2, &mut rng).unwrap();
        let before = model.clone();
        let log = fit(
            &mut model,
            &ds,
            &toy_config(LossKind::Eow, 0),
            &mut rng,
            None,
        )
        .unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn vanilla_separates_toy_data() {
        let ds = separable(1, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = EowClassifier::new(2, &[16, 16], 2, &mut rng).unwrap();
        fit(
            &mut model,
            &ds,
            &toy_config(LossKind::Vanilla, 200),
            &mut rng,
            None,
        )
        .unwrap();
        let preds = model.predict(&ds.inputs).unwrap();
        let acc = preds
            .iter()
            .zip(&ds.labels)
            .filter(|(p, &y)| p.label == y)
            .count();
        assert_eq!(acc, ds.len());
    }

    #[test]
    fn energy_training_raises_uncertainty_off_manifold() {
        let ds = separable(3, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = EowClassifier::new(2, &[16, 16], 2, &mut rng).unwrap();
        let cfg = toy_config(LossKind::Eow, 200);
        fit(&mut model, &ds, &cfg, &mut rng, None).unwrap();
        let probs = model.probs(&ds.inputs).unwrap();
        let acc = probs
            .iter()
            .zip(&ds.labels)
            .filter(|(p, &y)| p.predict().label == y)
            .count();
        assert!(acc as f64 >= 0.95 * ds.len() as f64, "accuracy {acc}");

        let on = probs.iter().map(|p| p.uncertainty()).sum::<f64>() / probs.len() as f64;
        let mut probe = Vec::new();
        for i in 0..9 {
            for j in 0..9 {
                let (x, y) = (-8.0 + 2.0 * i as f64, -8.0 + 2.0 * j as f64);
                if x.abs() > 4.0 || y.abs() > 4.0 {
                    probe.extend([x, y]);
                }
            }
        }
        let probe = Array::matrix(probe.len() / 2, 2, probe).unwrap();
        let off_probs = model.probs(&probe).unwrap();
        let off = off_probs.iter().map(|p| p.uncertainty()).sum::<f64>() / off_probs.len() as f64;
        assert!(off > on, "off-manifold {off} vs on {on}");
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = separable(5, 64);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut model = EowClassifier::new(2, &[8, 8], 2, &mut rng).unwrap();
            let log = fit(
                &mut model,
                &ds,
                &toy_config(LossKind::Eow, 3),
                &mut rng,
                Some(&ds),
            )
            .unwrap();
            (model.params_flat(), log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(la, lb);
        assert!(la.to_csv().lines().count() == 4);
        assert!(la.epochs[0].eval_ece.is_some());
    }
}
