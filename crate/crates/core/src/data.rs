//! Datasets: synthetic generators, IDX ingestion, corruption transforms and
//! seeded splits.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diff::Array;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs `[N x D]` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Array,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Exact data density at each input, when known.
    pub density: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Array,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            inputs,
            labels,
            num_classes,
            density: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.shape().len() != 2 || self.inputs.rows() != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: self.inputs.shape().to_vec(),
                rhs: vec![self.labels.len()],
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.num_classes,
            });
        }
        if let Some(d) = &self.density {
            if d.len() != self.labels.len() {
                return Err(Error::ShapeMismatch {
                    op: "dataset density",
                    lhs: vec![d.len()],
                    rhs: vec![self.labels.len()],
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.last_dim()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            density: self
                .density
                .as_ref()
                .map(|d| indices.iter().map(|&i| d[i]).collect()),
        }
    }

    /// Same data with the inputs replaced (e.g. by a corrupted copy).
    pub fn with_inputs(&self, inputs: Array) -> Result<Dataset> {
        let ds = Dataset {
            inputs,
            density: None,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }

    /// `x0,..,x{D-1},label[,density]` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        if self.density.is_some() {
            header.push("density".into());
        }
        writeln!(out, "{}", header.join(","))?;
        for r in 0..self.len() {
            let mut fields: Vec<String> = self.inputs.row(r).iter().map(f64::to_string).collect();
            fields.push(self.labels[r].to_string());
            if let Some(d) = &self.density {
                fields.push(d[r].to_string());
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or(Error::Empty("dataset csv"))??;
        let columns: Vec<&str> = header.split(',').collect();
        let label_col = columns
            .iter()
            .position(|c| *c == "label")
            .ok_or_else(|| Error::Parse("csv header lacks a label column".into()))?;
        let has_density = columns.get(label_col + 1) == Some(&"density");
        let (mut data, mut labels, mut density) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields",
                    lineno + 2,
                    columns.len()
                )));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
            };
            for f in &fields[..label_col] {
                data.push(num(f)?);
            }
            labels.push(
                fields[label_col]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?,
            );
            if has_density {
                density.push(num(fields[label_col + 1])?);
            }
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut ds = Dataset::new(
            name,
            Array::matrix(labels.len(), label_col, data)?,
            labels,
            num_classes,
        )?;
        if has_density {
            ds.density = Some(density);
        }
        Ok(ds)
    }
}

/// Equal-weight isotropic Gaussian mixture in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl GaussianMixture {
    /// `k` components with means evenly spaced on a circle of radius 2 and
    /// standard deviation 0.4.
    pub fn on_circle(k: usize) -> Self {
        let means = (0..k)
            .map(|j| {
                let angle = 2.0 * PI * j as f64 / k as f64;
                [2.0 * angle.cos(), 2.0 * angle.sin()]
            })
            .collect();
        Self { means, sigma: 0.4 }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            means: self.means.iter().map(|m| [m[0] + dx, m[1] + dy]).collect(),
            sigma: self.sigma,
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let var = self.sigma * self.sigma;
        let norm = 1.0 / (2.0 * PI * var);
        self.means
            .iter()
            .map(|m| {
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                norm * (-d2 / (2.0 * var)).exp()
            })
            .sum::<f64>()
            / self.means.len() as f64
    }

    /// Index of the component with the nearest mean.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let d2 = |m: &[f64; 2]| (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
        (0..self.means.len())
            .min_by(|&a, &b| d2(&self.means[a]).total_cmp(&d2(&self.means[b])))
            .unwrap_or(0)
    }

    /// `n` points, label `i % k` for the i-th draw, order shuffled. The exact
    /// mixture density is attached.
    pub fn sample(&self, name: &str, seed: u64, n: usize) -> Result<Dataset> {
        let k = self.means.len();
        if k == 0 || n < k {
            return Err(Error::Config(format!(
                "mixture sample needs n >= k ({n} < {k})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.sigma).expect("positive sigma");
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(2 * n);
        for &label in &labels {
            let m = self.means[label];
            data.push(m[0] + noise.sample(&mut rng));
            data.push(m[1] + noise.sample(&mut rng));
        }
        let inputs = Array::matrix(n, 2, data)?;
        let density = (0..n).map(|r| self.density(inputs.row(r))).collect();
        let mut ds = Dataset::new(name, inputs, labels, k)?;
        ds.density = Some(density);
        Ok(ds)
    }
}

/// `k` Gaussian classes on a circle of radius 2 (sigma 0.4), one per class.
pub fn gen_gaussian_mixture(seed: u64, n: usize, k: usize) -> Result<Dataset> {
    GaussianMixture::on_circle(k).sample("gaussian_mixture", seed, n)
}

/// Two interleaved half circles: class 0 on the unit circle's upper half,
/// class 1 on the lower half of the unit circle centred at `(1, 0.5)`.
pub fn gen_two_moons(seed: u64, n: usize, noise: f64) -> Result<Dataset> {
    if n < 2 || !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "two moons needs n >= 2 and noise >= 0 (n {n}, noise {noise})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let linspace = |count: usize, i: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = linspace(n_outer, i);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = linspace(n_inner, i);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    points.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, label) in points {
        for v in p {
            let jitter: f64 = if noise > 0.0 {
                rng.sample::<f64, _>(StandardNormal) * noise
            } else {
                0.0
            };
            data.push(v + jitter);
        }
        labels.push(label);
    }
    Dataset::new("two_moons", Array::matrix(n, 2, data)?, labels, 2)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx {
                path: path.to_path_buf(),
                reason: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let err = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| err("truncated header".into()))
    };
    let found = word(0)?;
    if found != magic {
        return Err(err(format!(
            "bad magic 0x{found:08x}, expected 0x{magic:08x}"
        )));
    }
    let dims: Vec<usize> = (1..=ndims)
        .map(|i| word(i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let body = dims.iter().product::<usize>();
    let have = bytes.len() - 4 * (ndims + 1);
    if have < body {
        return Err(err(format!(
            "truncated: {have} data bytes, header promises {body}"
        )));
    }
    Ok(dims)
}

/// Reads an IDX image file (`0x00000803`, u8, `N x rows x cols`) and an IDX
/// label file (`0x00000801`, u8, `N`). Pixels are scaled to `[0, 1]` and
/// flattened. Gzip-compressed files are accepted.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let dims = idx_header(&img_bytes, images, IDX_IMAGES_MAGIC, 3)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let ldims = idx_header(&lbl_bytes, labels, IDX_LABELS_MAGIC, 1)?;
    let (n, d) = (dims[0], dims[1] * dims[2]);
    if ldims[0] != n {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            reason: format!("{} labels for {n} images", ldims[0]),
        });
    }
    let pixels = &img_bytes[16..16 + n * d];
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(1);
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Array::matrix(n, d, data)?, labels, num_classes)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for dim in [images.len(), rows, cols] {
        out.write_all(&(dim as u32).to_be_bytes())?;
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "write_idx_images",
                lhs: vec![img.len()],
                rhs: vec![rows, cols],
            });
        }
        out.write_all(img)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    GaussianNoise,
    PixelDropout,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [
        Corruption::GaussianNoise,
        Corruption::PixelDropout,
        Corruption::Contrast,
    ];

    /// Noise std, dropout fraction, or contrast blend weight at `severity`.
    pub fn level(self, severity: usize) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Severity(severity));
        }
        let table = match self {
            Corruption::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            Corruption::PixelDropout => [0.05, 0.1, 0.2, 0.3, 0.4],
            Corruption::Contrast => [0.2, 0.35, 0.5, 0.65, 0.8],
        };
        Ok(table[severity - 1])
    }

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::PixelDropout => "pixel_dropout",
            Corruption::Contrast => "contrast",
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown corruption '{s}'")))
    }
}

/// Applies a corruption row by row. Contrast blends each row toward its own
/// mean. With `clamp_unit` the result is clipped to `[0, 1]` (image data).
pub fn corrupt(
    inputs: &Array,
    kind: Corruption,
    severity: usize,
    seed: u64,
    clamp_unit: bool,
) -> Result<Array> {
    let level = kind.level(severity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = inputs.clone();
    match kind {
        Corruption::GaussianNoise => {
            let normal = Normal::new(0.0, level).expect("positive std");
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(&mut rng));
        }
        Corruption::PixelDropout => {
            out.data_mut().iter_mut().for_each(|v| {
                if rng.random::<f64>() < level {
                    *v = 0.0;
                }
            });
        }
        Corruption::Contrast => {
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                row.iter_mut()
                    .for_each(|v| *v = (1.0 - level) * *v + level * mean);
            }
        }
    }
    if clamp_unit {
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Seeded shuffle into disjoint train/validation/test parts. Sizes are
/// `round(f * n)` for train and validation; test takes the rest.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        dataset.subset(train),
        dataset.subset(val),
        dataset.subset(test),
    ))
}
