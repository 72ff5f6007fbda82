//! Staged MLP classifier with a K+1-way softmax head.
//!
//! The network is a chain of dense+ReLU stages followed by a dense head that
//! emits `K + 1` logits. Logit `K` (0-based) is the open-world uncertainty
//! slot. Every stage boundary is an entry point: [`EowClassifier::encode_to_stage`]
//! runs the prefix and [`EowClassifier::head_from_stage`] runs the suffix, so a
//! sampler can work on latent activations directly.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Array, Gradients, NodeId, Tape};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"EOWCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in x out]`
    pub weights: Array,
    /// `[out]`
    pub bias: Array,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array::zeros(&[input, output]),
            bias: Array::zeros(&[output]),
        }
    }

    /// Weights drawn from `N(0, 2 / fan_in)`, zero bias.
    pub fn he_normal<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("finite std");
        let data = (0..input * output).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Array::new(vec![input, output], data).expect("shape"),
            bias: Array::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Softmax scores over the `K + 1` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Probs(Vec<f64>);

/// Label (0-based), the K+1-softmax score of that label, and the score of
/// the uncertainty slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub uncertainty: f64,
}

impl Probs {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn uncertainty(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Total mass on the K known classes.
    pub fn known_mass(&self) -> f64 {
        self.0[..self.num_classes()].iter().sum()
    }

    /// Argmax over the first K scores (ties go to the lowest index). The
    /// confidence is not renormalised over the K classes.
    pub fn predict(&self) -> Prediction {
        let known = &self.0[..self.num_classes()];
        let mut label = 0;
        for (i, &p) in known.iter().enumerate() {
            if p > known[label] {
                label = i;
            }
        }
        Prediction {
            label,
            confidence: known[label],
            uncertainty: self.uncertainty(),
        }
    }
}

/// Parameter leaves of one model registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    /// Flattened gradient in [`EowClassifier::params_flat`] order. Layers the
    /// root does not depend on contribute zeros.
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            out.extend_from_slice(grads.wrt(tape, w).data());
            out.extend_from_slice(grads.wrt(tape, b).data());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EowClassifier {
    stages: Vec<Dense>,
    head: Dense,
    num_classes: usize,
}

impl EowClassifier {
    /// `input -> hidden[0] -> ... -> hidden[S-1] -> K+1` with He-normal init.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(input_dim, hidden, num_classes)?;
        let mut stages = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            stages.push(Dense::he_normal(width, h, rng));
            width = h;
        }
        let head = Dense::he_normal(width, num_classes + 1, rng);
        Self::from_layers(stages, head, num_classes)
    }

    /// All weights and biases zero, so every input maps to uniform scores.
    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        Self::check_dims(input_dim, hidden, num_classes)?;
        let mut stages = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            stages.push(Dense::zeros(width, h));
            width = h;
        }
        Self::from_layers(stages, Dense::zeros(width, num_classes + 1), num_classes)
    }

    fn check_dims(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<()> {
        if input_dim == 0 || num_classes == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "model needs positive widths and at least one stage \
                 (input {input_dim}, hidden {hidden:?}, classes {num_classes})"
            )));
        }
        Ok(())
    }

    pub fn from_layers(stages: Vec<Dense>, head: Dense, num_classes: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        for layer in stages.iter().chain(std::iter::once(&head)) {
            if layer.bias.shape() != [layer.output_dim()] {
                return Err(Error::ShapeMismatch {
                    op: "bias",
                    lhs: layer.bias.shape().to_vec(),
                    rhs: vec![layer.output_dim()],
                });
            }
        }
        for pair in stages.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    op: "stage chain",
                    lhs: pair[0].weights.shape().to_vec(),
                    rhs: pair[1].weights.shape().to_vec(),
                });
            }
        }
        let last = stages.last().expect("nonempty");
        if last.output_dim() != head.input_dim() || head.output_dim() != num_classes + 1 {
            return Err(Error::ShapeMismatch {
                op: "head",
                lhs: last.weights.shape().to_vec(),
                rhs: head.weights.shape().to_vec(),
            });
        }
        Ok(Self {
            stages,
            head,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].input_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.stages.iter().map(Dense::output_dim).collect()
    }

    /// Width of the activation after stage `s` (`s = 0` is the input).
    pub fn stage_width(&self, s: usize) -> Result<usize> {
        match s {
            0 => Ok(self.input_dim()),
            s if s <= self.stages.len() => Ok(self.stages[s - 1].output_dim()),
            _ => Err(Error::StageOutOfRange {
                stage: s,
                stages: self.stages.len(),
            }),
        }
    }

    pub fn stages(&self) -> &[Dense] {
        &self.stages
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.stages.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.stages
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::num_params).sum()
    }

    /// All weights and biases, layer by layer (weights before bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "set_params_flat",
                lhs: vec![self.num_params()],
                rhs: vec![params.len()],
            });
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            for target in [&mut layer.weights, &mut layer.bias] {
                let n = target.len();
                target
                    .data_mut()
                    .copy_from_slice(&params[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn param_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params_flat() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }

    /// Registers the parameters on `tape`, as vars when `trainable` and as
    /// constants (frozen) otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let layers = self
            .layers()
            .map(|layer| {
                if trainable {
                    (
                        tape.var(layer.weights.clone()),
                        tape.var(layer.bias.clone()),
                    )
                } else {
                    (
                        tape.constant(layer.weights.clone()),
                        tape.constant(layer.bias.clone()),
                    )
                }
            })
            .collect();
        BoundParams { layers }
    }

    fn check_input(&self, tape: &Tape, node: NodeId, stage: usize) -> Result<()> {
        let expected = self.stage_width(stage)?;
        let got = tape.value(node).last_dim();
        if got != expected {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: tape.value(node).shape().to_vec(),
                rhs: vec![expected],
            });
        }
        Ok(())
    }

    /// Runs stages `1..=stage` on the tape.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        stage: usize,
    ) -> Result<NodeId> {
        self.check_input(tape, x, 0)?;
        self.stage_width(stage)?;
        let mut h = x;
        for &(w, b) in &params.layers[..stage] {
            let a = tape.linear(h, w, b)?;
            h = tape.relu(a)?;
        }
        Ok(h)
    }

    /// Runs stages `stage+1..=S` and the head on the tape, returning logits.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        z: NodeId,
        stage: usize,
    ) -> Result<NodeId> {
        self.check_input(tape, z, stage)?;
        let s = self.stages.len();
        let mut h = z;
        for &(w, b) in &params.layers[stage..s] {
            let a = tape.linear(h, w, b)?;
            h = tape.relu(a)?;
        }
        let (w, b) = params.layers[s];
        tape.linear(h, w, b)
    }

    /// Logits for a batch `[B x D]` (or a single `[D]` input).
    pub fn forward(&self, x: &Array) -> Result<Array> {
        self.head_from_stage(x, 0)
    }

    pub fn encode_to_stage(&self, x: &Array, stage: usize) -> Result<Array> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, &params, input, stage)?;
        Ok(tape.value(z).clone())
    }

    pub fn head_from_stage(&self, z: &Array, stage: usize) -> Result<Array> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = tape.constant(z.clone());
        let logits = self.logits_on(&mut tape, &params, input, stage)?;
        Ok(tape.value(logits).clone())
    }

    /// Which hidden units are active (`> 0` before the ReLU) in stages
    /// `stage+1..=S` for latents `z` at `stage`. Two parameter settings with
    /// equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self, z: &Array, stage: usize) -> Result<Vec<bool>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let mut h = tape.constant(z.as_batch());
        self.check_input(&tape, h, stage)?;
        let mut pattern = Vec::new();
        for &(w, b) in &params.layers[stage..self.stages.len()] {
            let a = tape.linear(h, w, b)?;
            pattern.extend(tape.value(a).data().iter().map(|&v| v > 0.0));
            h = tape.relu(a)?;
        }
        Ok(pattern)
    }

    pub fn probs(&self, x: &Array) -> Result<Vec<Probs>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|r| Probs::from_logits(logits.row(r)))
            .collect())
    }

    pub fn predict(&self, x: &Array) -> Result<Vec<Prediction>> {
        Ok(self.probs(x)?.iter().map(Probs::predict).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&((self.stages.len() + 1) as u32).to_le_bytes());
        for layer in self.layers() {
            out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
        }
        for v in self.params_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let read_u32 = |cursor: &mut &[u8]| -> Result<u32> {
            let mut buf = [0u8; 4];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated header".into()))?;
            Ok(u32::from_le_bytes(buf))
        };
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let num_classes = read_u32(&mut cursor)? as usize;
        let num_layers = read_u32(&mut cursor)? as usize;
        if num_layers < 2 {
            return Err(Error::Checkpoint(
                "need at least one stage and a head".into(),
            ));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let input = read_u32(&mut cursor)? as usize;
            let output = read_u32(&mut cursor)? as usize;
            layers.push(Dense::zeros(input, output));
        }
        let head = layers.pop().expect("num_layers >= 2");
        let mut model = Self::from_layers(layers, head, num_classes)?;
        let expected = model.num_params() * 8;
        if cursor.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter bytes, found {}",
                cursor.len()
            )));
        }
        let params: Vec<f64> = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.set_params_flat(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
        Array::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = EowClassifier::zeros(3, &[4, 4], 2).unwrap();
        let logits = model.forward(&Array::vector(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(logits.data(), &[0.0; 3]);
        let probs = model.probs(&Array::vector(vec![1.0, -2.0, 0.5])).unwrap();
        for p in probs[0].values() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_composition() {
        let stage = Dense {
            weights: Array::identity(3),
            bias: Array::zeros(&[3]),
        };
        let head = Dense {
            weights: Array::identity(3),
            bias: Array::zeros(&[3]),
        };
        let model = EowClassifier::from_layers(vec![stage], head, 2).unwrap();
        let x = Array::vector(vec![0.5, 2.0, 1.5]);
        assert_eq!(model.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn random_model_probs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EowClassifier::new(4, &[8, 8, 8], 3, &mut rng).unwrap();
        let x = random_input(&mut rng, 16, 4);
        for p in model.probs(&x).unwrap() {
            assert_eq!(p.values().len(), 4);
            assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EowClassifier::new(4, &[8], 3, &mut rng).unwrap();
        assert!(model.forward(&Array::vector(vec![1.0; 5])).is_err());
        assert!(model
            .head_from_stage(&Array::vector(vec![1.0; 4]), 1)
            .is_err());
        assert!(matches!(
            model.encode_to_stage(&Array::vector(vec![1.0; 4]), 2),
            Err(Error::StageOutOfRange { .. })
        ));
    }

    #[test]
    fn stage_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EowClassifier::new(4, &[6, 7, 5], 3, &mut rng).unwrap();
        let x = random_input(&mut rng, 3, 4);
        assert_eq!(model.encode_to_stage(&x, 0).unwrap(), x);
        let top = model.encode_to_stage(&x, 3).unwrap();
        assert_eq!(top.shape(), &[3, 5]);
        assert_eq!(model.head().input_dim(), 5);
    }

    #[test]
    fn predict_examples() {
        let p = Probs(vec![0.7, 0.1, 0.2]);
        assert_eq!(
            p.predict(),
            Prediction {
                label: 0,
                confidence: 0.7,
                uncertainty: 0.2
            }
        );
        let u = Probs::from_logits(&[0.0, 0.0, 0.0]);
        let pred = u.predict();
        assert_eq!(pred.label, 0);
        assert!((pred.confidence - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EowClassifier::new(5, &[7, 3], 4, &mut rng).unwrap();
        let restored = EowClassifier::from_bytes(&model.to_bytes()).unwrap();
        let bits = |m: &EowClassifier| {
            m.params_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&model), bits(&restored));
        assert_eq!(model, restored);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        assert_eq!(EowClassifier::load(&path).unwrap(), model);

        let mut bad = model.to_bytes();
        bad[0] = b'X';
        assert!(EowClassifier::from_bytes(&bad).is_err());
        let short = &model.to_bytes()[..40];
        assert!(EowClassifier::from_bytes(short).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn stage_split_composes(seed in 0u64..1000, split in 0usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = EowClassifier::new(4, &[6, 6, 6], 3, &mut rng).unwrap();
            let x = random_input(&mut rng, 5, 4);
            let full = model.forward(&x).unwrap();
            let z = model.encode_to_stage(&x, split).unwrap();
            let via = model.head_from_stage(&z, split).unwrap();
            for (a, b) in full.data().iter().zip(via.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn predict_is_shift_invariant(
            logits in proptest::collection::vec(-10.0f64..10.0, 3..7),
            shift in -20.0f64..20.0,
        ) {
            let a = Probs::from_logits(&logits).predict();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = Probs::from_logits(&shifted).predict();
            prop_assert_eq!(a.label, b.label);
            prop_assert!(a.confidence + a.uncertainty <= 1.0 + 1e-12);
        }
    }
}
