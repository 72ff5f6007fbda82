//! Exact checks of the energy-model identities on finite domains, where every
//! partition function and expectation is a plain sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::GaussianMixture;
use crate::diff::{floored_relative_error, piecewise_gradient, Array, NodeId, Tape};
use crate::energy::{log_known_mass_on, log_uncertainty_on};
use crate::error::{Error, Result};
use crate::model::EowClassifier;
use crate::objective::GRAD_CHECK_FLOOR;

/// Tolerances used by the pass flags.
pub const PROP1_MAX_DEVIATION: f64 = 1e-6;
pub const PROP1_MIN_COSINE: f64 = 1.0 - 1e-10;
pub const LEMMA1_MAX_ERROR: f64 = 1e-4;

/// A finite input domain with a data distribution over its points.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDomain {
    /// `[N x D]`, rows distinct.
    pub points: Array,
    /// Sums to 1.
    pub density: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl DiscreteDomain {
    pub fn new(points: Array, density: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let points = points.as_batch();
        let n = points.rows();
        if n == 0 {
            return Err(Error::Domain("no points".into()));
        }
        if density.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Domain(format!(
                "{n} points but {} weights",
                density.len()
            )));
        }
        if density.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain(
                "density weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = density.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("density sums to {total}, not 1")));
        }
        let mut keys: Vec<Vec<u64>> = (0..n)
            .map(|r| points.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        keys.sort();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("points must be distinct".into()));
        }
        Ok(Self {
            points,
            density,
            labels,
        })
    }

    /// `side x side` grid on `[lo, hi]^2` weighted by the `k`-component
    /// circle mixture (renormalised over the grid) and labelled by the
    /// nearest component.
    pub fn grid(side: usize, lo: f64, hi: f64, k: usize) -> Result<Self> {
        if side < 2 || !(hi > lo) || k == 0 {
            return Err(Error::Domain(format!(
                "bad grid: side {side}, range [{lo}, {hi}], k {k}"
            )));
        }
        let mixture = GaussianMixture::on_circle(k);
        let step = (hi - lo) / (side - 1) as f64;
        let mut data = Vec::with_capacity(2 * side * side);
        let mut weights = Vec::with_capacity(side * side);
        let mut labels = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let x = [lo + step * i as f64, lo + step * j as f64];
                data.extend(x);
                weights.push(mixture.density(&x));
                labels.push(mixture.nearest_component(&x));
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(Array::matrix(side * side, 2, data)?, weights, Some(labels))
    }

    /// The default verification domain: 21 x 21 on `[-3, 3]^2`, three classes.
    pub fn default_grid() -> Self {
        Self::grid(21, -3.0, 3.0, 3).expect("valid default grid")
    }

    /// `n` random points in `[-3, 3]^dim` with random weights and labels.
    pub fn random(seed: u64, n: usize, dim: usize, k: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let labels = (0..n).map(|_| rng.random_range(0..k.max(1))).collect();
        Self::new(Array::matrix(n, dim, data)?, weights, Some(labels))
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    /// Same points, with the density replaced.
    pub fn with_density(&self, density: Vec<f64>) -> Result<Self> {
        Self::new(self.points.clone(), density, self.labels.clone())
    }
}

/// Row-wise `log h[K]` and `log sum_{i<K} h[i]` of a model over `points`.
fn log_scores(model: &EowClassifier, points: &Array) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.constant(points.clone());
    let logits = model.logits_on(&mut tape, &params, x, 0)?;
    let log_u = log_uncertainty_on(&mut tape, logits)?;
    let log_s = log_known_mass_on(&mut tape, logits)?;
    Ok((
        tape.value(log_u).data().to_vec(),
        tape.value(log_s).data().to_vec(),
    ))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalised densities `p_theta = h[K] / Z` and `q_theta = sum_{i<K} h / Z'`
/// over the domain points, with their partition functions.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactDensities {
    pub p_theta: Vec<f64>,
    pub q_theta: Vec<f64>,
    pub z: f64,
    pub z_prime: f64,
}

pub fn exact_densities(model: &EowClassifier, domain: &DiscreteDomain) -> Result<ExactDensities> {
    let (log_u, log_s) = log_scores(model, &domain.points)?;
    let (log_z, log_zp) = (log_sum_exp(&log_u), log_sum_exp(&log_s));
    Ok(ExactDensities {
        p_theta: log_u.iter().map(|l| (l - log_z).exp()).collect(),
        q_theta: log_s.iter().map(|l| (l - log_zp).exp()).collect(),
        z: log_z.exp(),
        z_prime: log_zp.exp(),
    })
}

/// Gradient over the parameters of `sum_x w(x) * score(x)`, with the weights
/// held constant.
fn weighted_gradient(
    model: &EowClassifier,
    points: &Array,
    weights: &[f64],
    score: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(points.clone());
    let logits = model.logits_on(&mut tape, &params, x, 0)?;
    let per_point = score(&mut tape, logits)?;
    let w = tape.constant(Array::vector(weights.to_vec()));
    let weighted = tape.mul(per_point, w)?;
    let total = tape.sum(weighted)?;
    let grads = tape.backward(total)?;
    Ok(params.gradient(&tape, &grads))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Report {
    pub z: f64,
    pub z_prime: f64,
    pub mu: f64,
    /// Gradient of `E_{q frozen}[log sum_{i<K} h]`.
    pub grad_known: Vec<f64>,
    /// Gradient of `E_{p frozen}[-log h[K]]`.
    pub grad_uncertainty: Vec<f64>,
    /// `max_i |g1_i - mu g2_i| / max(|g1_i|, |mu g2_i|)`; pairs of exact
    /// zeros count as agreement.
    pub max_rel_deviation: f64,
    pub cosine: f64,
    pub pass: bool,
}

/// Checks that the frozen-weight gradients of the two expectations are
/// parallel with ratio `mu = Z / Z'`.
pub fn check_prop1(model: &EowClassifier, domain: &DiscreteDomain) -> Result<Prop1Report> {
    let dens = exact_densities(model, domain)?;
    let g1 = weighted_gradient(model, &domain.points, &dens.q_theta, log_known_mass_on)?;
    let g2 = weighted_gradient(model, &domain.points, &dens.p_theta, |tape, logits| {
        let lu = log_uncertainty_on(tape, logits)?;
        tape.neg(lu)
    })?;
    let mu = dens.z / dens.z_prime;
    let scaled: Vec<f64> = g2.iter().map(|g| mu * g).collect();
    let max_rel_deviation = g1
        .iter()
        .zip(&scaled)
        .map(|(a, b)| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0, f64::max);
    let cosine = dot(&g1, &scaled) / (dot(&g1, &g1).sqrt() * dot(&scaled, &scaled).sqrt());
    Ok(Prop1Report {
        z: dens.z,
        z_prime: dens.z_prime,
        mu,
        pass: max_rel_deviation < PROP1_MAX_DEVIATION && cosine >= PROP1_MIN_COSINE,
        grad_known: g1,
        grad_uncertainty: g2,
        max_rel_deviation,
        cosine,
    })
}

/// `KL(p || q_theta)` by enumeration; points with `p = 0` contribute nothing.
pub fn kl_to_model(model: &EowClassifier, domain: &DiscreteDomain) -> Result<f64> {
    let (_, log_s) = log_scores(model, &domain.points)?;
    let log_zp = log_sum_exp(&log_s);
    Ok(domain
        .density
        .iter()
        .zip(&log_s)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, ls)| p * (p.ln() - (ls - log_zp)))
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    pub kl: f64,
    /// Finite-difference gradient of the exact KL.
    pub numeric: Vec<f64>,
    /// `E_p[dE'/dtheta] - E_{q frozen}[dE'/dtheta]`.
    pub contrastive: Vec<f64>,
    /// Relative error, floored at [`GRAD_CHECK_FLOOR`].
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Compares the contrastive gradient with finite differences of the exact KL.
pub fn check_lemma1(model: &EowClassifier, domain: &DiscreteDomain) -> Result<Lemma1Report> {
    let q = exact_densities(model, domain)?.q_theta;
    let weights: Vec<f64> = domain.density.iter().zip(&q).map(|(p, q)| p - q).collect();
    // E' = -log sum_{i<K} h
    let contrastive = weighted_gradient(model, &domain.points, &weights, |tape, logits| {
        let ls = log_known_mass_on(tape, logits)?;
        tape.neg(ls)
    })?;
    let mut probe = model.clone();
    let numeric = piecewise_gradient(
        |theta| {
            probe.set_params_flat(theta)?;
            Ok((
                kl_to_model(&probe, domain)?,
                probe.activation_pattern(&domain.points, 0)?,
            ))
        },
        &model.params_flat(),
        1e-3,
    )?;
    let (max_rel_error, _) = floored_relative_error(&contrastive, &numeric, GRAD_CHECK_FLOOR);
    Ok(Lemma1Report {
        kl: kl_to_model(model, domain)?,
        numeric,
        contrastive,
        max_rel_error,
        pass: max_rel_error < LEMMA1_MAX_ERROR,
    })
}

/// `(-log h[y]) - (-log sum_{i<K} h)` for one row of `K+1` logits, computed
/// in the log domain so that it is never negative in floating point.
pub fn bound_margin(logits: &[f64], label: usize) -> f64 {
    let k = logits.len() - 1;
    log_sum_exp(&logits[..k]) - logits[label]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub margins: Vec<f64>,
    pub min_margin: f64,
    /// `E_p[-log h[y]] + E_{q frozen}[log sum_{i<K} h]`.
    pub aggregate_upper: f64,
    /// `E_p[E'] - E_{q frozen}[E']`.
    pub aggregate_energy_difference: f64,
    pub pass: bool,
}

/// Checks the pointwise bound at every labelled point and the aggregate
/// inequality between the two objectives.
pub fn check_theorem1_bound(
    model: &EowClassifier,
    domain: &DiscreteDomain,
) -> Result<Theorem1Report> {
    let labels = domain
        .labels
        .as_ref()
        .ok_or_else(|| Error::Domain("bound check needs labels".into()))?;
    let logits = model.forward(&domain.points)?;
    let k = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let q = exact_densities(model, domain)?.q_theta;
    let mut neg_log_hy = 0.0;
    let mut neg_log_s = 0.0;
    let mut q_log_s = 0.0;
    let mut margins = Vec::with_capacity(labels.len());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let log_s = log_sum_exp(&row[..k]);
        let p = domain.density[r];
        neg_log_hy += p * (lse - row[y]);
        neg_log_s += p * (lse - log_s);
        q_log_s += q[r] * (log_s - lse);
        margins.push(bound_margin(row, y));
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = neg_log_hy + q_log_s;
    let energy_difference = neg_log_s + q_log_s;
    Ok(Theorem1Report {
        pass: min_margin >= 0.0 && upper >= energy_difference,
        margins,
        min_margin,
        aggregate_upper: upper,
        aggregate_energy_difference: energy_difference,
    })
}

/// Average ranks (ties share the mean of their positions), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityReport {
    /// Correlation of `sum_{i<K} h` with the data density.
    pub known_mass: Option<f64>,
    /// Correlation of `h[K]` with the data density.
    pub uncertainty: Option<f64>,
}

pub fn check_density_proportionality(
    model: &EowClassifier,
    domain: &DiscreteDomain,
) -> Result<DensityReport> {
    let probs = model.probs(&domain.points)?;
    let known: Vec<f64> = probs.iter().map(|p| p.known_mass()).collect();
    let unc: Vec<f64> = probs.iter().map(|p| p.uncertainty()).collect();
    Ok(DensityReport {
        known_mass: spearman(&known, &domain.density),
        uncertainty: spearman(&unc, &domain.density),
    })
}

/// Model used by the default checks: `2 -> 16 -> 16 -> K+1`.
pub fn theory_model(seed: u64, k: usize) -> Result<EowClassifier> {
    EowClassifier::new(2, &[16, 16], k, &mut ChaCha8Rng::seed_from_u64(seed))
}
