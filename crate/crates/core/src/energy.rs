//! Energies on the K+1 head and a Langevin sampler over latent activations.
//!
//! Two energies are defined on any input or latent `z` entering at stage `s`:
//!
//! * the sampling energy `-log h(z)[K]`, whose Boltzmann density is
//!   proportional to the uncertainty score, and
//! * the auxiliary energy `-log sum_{i<K} h(z)[i]`, whose density is
//!   proportional to the mass on the known classes.
//!
//! Since the scores sum to one, `exp(-E_sample) + exp(-E_aux) = 1` pointwise.
//!
//! The sampler runs `z <- z - (alpha/2) dE/dz + sigma * eps` with the model
//! parameters entered on the tape as constants.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diff::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::EowClassifier;

/// Sign convention for the sampling energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnergySign {
    /// `-log h[K]`: samples concentrate where the uncertainty score is high.
    #[default]
    Uncertainty,
    /// `+log h[K]`, the literal form; samples avoid high-uncertainty regions.
    Literal,
}

impl EnergySign {
    fn factor(self) -> f64 {
        match self {
            EnergySign::Uncertainty => -1.0,
            EnergySign::Literal => 1.0,
        }
    }
}

/// Row-wise `log h[K]` for a logits node.
pub fn log_uncertainty_on(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let k = tape.value(logits).last_dim() - 1;
    let rows = tape.value(logits).rows();
    let ls = tape.log_softmax(logits)?;
    tape.pick(ls, &vec![k; rows])
}

/// Row-wise `log sum_{i<K} h[i]` for a logits node.
pub fn log_known_mass_on(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let width = tape.value(logits).last_dim();
    let known = tape.log_sum_exp(logits, 0, width - 1)?;
    let all = tape.log_sum_exp(logits, 0, width)?;
    let neg_all = tape.neg(all)?;
    tape.add(known, neg_all)
}

fn mean_energy(
    model: &EowClassifier,
    z: &Array,
    stage: usize,
    build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let input = tape.constant(z.clone());
    let logits = model.logits_on(&mut tape, &params, input, stage)?;
    let per_row = build(&mut tape, logits)?;
    let m = tape.mean(per_row)?;
    Ok(-tape.scalar_value(m))
}

/// Batch mean of `-log h(z)[K]` for latents `z` at `stage`.
pub fn sampling_energy(model: &EowClassifier, z: &Array, stage: usize) -> Result<f64> {
    mean_energy(model, z, stage, log_uncertainty_on)
}

/// Batch mean of `-log sum_{i<K} h(z)[i]` for latents `z` at `stage`.
pub fn auxiliary_energy(model: &EowClassifier, z: &Array, stage: usize) -> Result<f64> {
    mean_energy(model, z, stage, log_known_mass_on)
}

/// An energy over rows of a latent batch.
pub trait LatentEnergy {
    /// Per-row energies, and the gradient of their sum with respect to `z`
    /// (so each row gets the gradient of its own energy).
    fn energy_and_grad(&self, z: &Array) -> Result<(Vec<f64>, Array)>;
}

/// Sampling energy of a frozen model at a given stage.
#[derive(Clone, Copy, Debug)]
pub struct ModelEnergy<'a> {
    pub model: &'a EowClassifier,
    pub stage: usize,
    pub sign: EnergySign,
}

impl LatentEnergy for ModelEnergy<'_> {
    fn energy_and_grad(&self, z: &Array) -> Result<(Vec<f64>, Array)> {
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, false);
        let input = tape.var(z.clone());
        let logits = self
            .model
            .logits_on(&mut tape, &params, input, self.stage)?;
        let log_u = log_uncertainty_on(&mut tape, logits)?;
        let energy = tape.scale(log_u, self.sign.factor())?;
        let total = tape.sum(energy)?;
        let grads = tape.backward(total)?;
        Ok((tape.value(energy).data().to_vec(), grads.wrt(&tape, input)))
    }
}

/// `E(z) = |z|^2 / 2` per row; the Langevin target is the standard normal.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticEnergy;

impl LatentEnergy for QuadraticEnergy {
    fn energy_and_grad(&self, z: &Array) -> Result<(Vec<f64>, Array)> {
        let energies = (0..z.rows())
            .map(|r| 0.5 * z.row(r).iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok((energies, z.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChainInit {
    /// Start from the encoded minibatch.
    #[default]
    Data,
    /// Start from `N(0, I)` at the stage width.
    Noise,
    /// Draw from a replay buffer, reinitialising a fraction from noise.
    Persistent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub steps: usize,
    pub stage: usize,
    pub init: ChainInit,
    pub sign: EnergySign,
    /// Per-row L2 cap on the energy gradient.
    pub grad_clip: Option<f64>,
    /// Probability that a persistent chain restarts from noise.
    pub reinit_prob: f64,
    pub buffer_capacity: usize,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            sigma: 1e-3,
            steps: 100,
            stage: 2,
            init: ChainInit::Data,
            sign: EnergySign::Uncertainty,
            grad_clip: Some(100.0),
            reinit_prob: 0.05,
            buffer_capacity: 10_000,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "sgld alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sgld sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return Err(Error::Config(format!(
                "sgld reinit probability must lie in [0, 1], got {}",
                self.reinit_prob
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "sgld grad clip must be > 0, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Latent batch at a stage; the output of a sampling round.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub z: Array,
    pub stage: usize,
}

/// Replay buffer for persistent chains.
#[derive(Clone, Debug, Default)]
pub struct PersistentBuffer {
    rows: Vec<Vec<f64>>,
    capacity: usize,
}

impl PersistentBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            rows: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends the rows of `z`, overwriting random slots once full.
    pub fn store<R: Rng + ?Sized>(&mut self, z: &Array, rng: &mut R) {
        for r in 0..z.rows() {
            let row = z.row(r).to_vec();
            if self.rows.len() < self.capacity {
                self.rows.push(row);
            } else if self.capacity > 0 {
                let slot = rng.random_range(0..self.capacity);
                self.rows[slot] = row;
            }
        }
    }
}

fn noise<R: Rng + ?Sized>(rows: usize, width: usize, rng: &mut R) -> Array {
    let data = (0..rows * width)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Array::matrix(rows, width, data).expect("shape")
}

/// Starting latents for one round. `batch` is the current input minibatch.
pub fn init_chain<R: Rng + ?Sized>(
    model: &EowClassifier,
    batch: &Array,
    config: &SgldConfig,
    rng: &mut R,
    buffer: Option<&PersistentBuffer>,
) -> Result<ChainState> {
    let batch = batch.as_batch();
    let rows = batch.rows();
    if rows == 0 {
        return Err(Error::Empty("sgld batch"));
    }
    let width = model.stage_width(config.stage)?;
    let z = match (config.init, buffer) {
        (ChainInit::Data, _) => model.encode_to_stage(&batch, config.stage)?,
        (ChainInit::Persistent, Some(buf)) if !buf.is_empty() => {
            let mut data = Vec::with_capacity(rows * width);
            for _ in 0..rows {
                if rng.random::<f64>() < config.reinit_prob {
                    data.extend((0..width).map(|_| rng.sample::<f64, _>(StandardNormal)));
                } else {
                    let pick = rng.random_range(0..buf.rows.len());
                    data.extend_from_slice(&buf.rows[pick]);
                }
            }
            Array::matrix(rows, width, data)?
        }
        (ChainInit::Noise | ChainInit::Persistent, _) => noise(rows, width, rng),
    };
    Ok(ChainState {
        z,
        stage: config.stage,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_energy: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

/// One Langevin update of every row of `z` under an arbitrary energy.
pub fn langevin_step<E: LatentEnergy + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    z: &mut Array,
    alpha: f64,
    sigma: f64,
    grad_clip: Option<f64>,
    rng: &mut R,
) -> Result<StepStats> {
    let (energies, mut grad) = energy.energy_and_grad(z)?;
    if !grad.all_finite() {
        return Err(Error::SgldDiverged {
            step: 0,
            reason: "non-finite energy gradient".into(),
        });
    }
    let rows = z.rows();
    let mut norm_sum = 0.0;
    let mut norm_max: f64 = 0.0;
    for r in 0..rows {
        let row = grad.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm_sum += norm;
        norm_max = norm_max.max(norm);
        if let Some(cap) = grad_clip {
            if norm > cap {
                let s = cap / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let half = 0.5 * alpha;
    for (zi, gi) in z.data_mut().iter_mut().zip(grad.data()) {
        let eps: f64 = if sigma > 0.0 {
            rng.sample(StandardNormal)
        } else {
            0.0
        };
        *zi += -half * gi + sigma * eps;
    }
    if !z.all_finite() {
        return Err(Error::SgldDiverged {
            step: 0,
            reason: "non-finite latent".into(),
        });
    }
    Ok(StepStats {
        mean_energy: energies.iter().sum::<f64>() / rows.max(1) as f64,
        grad_norm_mean: norm_sum / rows.max(1) as f64,
        grad_norm_max: norm_max,
    })
}

/// One update of the model-energy chain; parameters are read-only.
pub fn sgld_step<R: Rng + ?Sized>(
    model: &EowClassifier,
    chain: &mut ChainState,
    config: &SgldConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let energy = ModelEnergy {
        model,
        stage: chain.stage,
        sign: config.sign,
    };
    langevin_step(
        &energy,
        &mut chain.z,
        config.alpha,
        config.sigma,
        config.grad_clip,
        rng,
    )
}

/// Diagnostics for one sampling round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgldRoundLog {
    pub energy_before: f64,
    pub energy_after: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

impl SgldRoundLog {
    pub const CSV_HEADER: &'static str =
        "round,energy_before,energy_after,grad_norm_mean,grad_norm_max";

    pub fn csv_row(&self, round: usize) -> String {
        format!(
            "{round},{},{},{},{}",
            self.energy_before, self.energy_after, self.grad_norm_mean, self.grad_norm_max
        )
    }
}

/// `init_chain` followed by `steps` updates. The returned latents are plain
/// values with no link back to the parameters.
pub fn sample<R: Rng + ?Sized>(
    model: &EowClassifier,
    batch: &Array,
    config: &SgldConfig,
    rng: &mut R,
    buffer: Option<&mut PersistentBuffer>,
) -> Result<(ChainState, SgldRoundLog)> {
    config.validate()?;
    let mut chain = init_chain(model, batch, config, rng, buffer.as_deref())?;
    let energy = ModelEnergy {
        model,
        stage: chain.stage,
        sign: config.sign,
    };
    let mut before = None;
    let mut norm_sum = 0.0;
    let mut norm_max: f64 = 0.0;
    for step in 0..config.steps {
        let stats = langevin_step(
            &energy,
            &mut chain.z,
            config.alpha,
            config.sigma,
            config.grad_clip,
            rng,
        )
        .map_err(|e| match e {
            Error::SgldDiverged { reason, .. } => Error::SgldDiverged { step, reason },
            other => other,
        })?;
        before.get_or_insert(stats.mean_energy);
        norm_sum += stats.grad_norm_mean;
        norm_max = norm_max.max(stats.grad_norm_max);
    }
    let (after_rows, _) = energy.energy_and_grad(&chain.z)?;
    let after = after_rows.iter().sum::<f64>() / after_rows.len() as f64;
    if let Some(buf) = buffer {
        if config.init == ChainInit::Persistent {
            buf.store(&chain.z, rng);
        }
    }
    let log = SgldRoundLog {
        energy_before: before.unwrap_or(after),
        energy_after: after,
        grad_norm_mean: if config.steps > 0 {
            norm_sum / config.steps as f64
        } else {
            0.0
        },
        grad_norm_max: norm_max,
    };
    Ok((chain, log))
}
