//! `key = value` run configuration with environment overrides.
//!
//! Precedence, lowest first: built-in defaults, the config file, `EOW_<KEY>`
//! environment variables, command-line flags. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eow::energy::{ChainInit, EnergySign, SgldConfig};
use eow::objective::{LossKind, TrainConfig};
use eow::{Error, Result};
use sha2::{Digest, Sha256};

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "mixture", "mixture | moons | mnist | csv:<path>"),
    (
        "data_dir",
        "data/mnist-10k",
        "directory holding the IDX image and label files",
    ),
    ("data_seed", "0", "seed for synthetic data and the split"),
    ("n_samples", "2000", "synthetic dataset size"),
    ("num_classes", "2", "classes for synthetic and csv data"),
    ("moons_noise", "0.1", "two-moons jitter"),
    ("split", "0.7,0.1,0.2", "train,validation,test fractions"),
    (
        "hidden",
        "128,128,128",
        "hidden widths; one stage per entry",
    ),
    ("loss", "eow", "eow | vanilla | label_smoothing(<eps>)"),
    ("lambda", "0.1", "weight of the energy term"),
    ("lr", "1e-4", "learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "5e-4", "L2 coefficient"),
    ("batch_size", "64", "minibatch size"),
    ("epochs", "50", "training epochs"),
    (
        "lr_milestones",
        "0.5,0.75",
        "fractions of the run where the rate decays",
    ),
    ("lr_decay", "0.1", "decay factor per milestone"),
    ("sgld_alpha", "2", "Langevin step size"),
    ("sgld_sigma", "1e-3", "Langevin noise standard deviation"),
    ("sgld_steps", "100", "Langevin steps per round"),
    (
        "sgld_stage",
        "2",
        "stage whose output is sampled (0 = inputs)",
    ),
    ("sgld_init", "data", "data | noise | persistent"),
    ("sgld_sign", "uncertainty", "uncertainty | literal"),
    (
        "sgld_grad_clip",
        "100",
        "per-row gradient norm cap, or none",
    ),
    (
        "sgld_reinit_prob",
        "0.05",
        "persistent-chain restart probability",
    ),
    (
        "sgld_buffer_capacity",
        "10000",
        "persistent-chain buffer size",
    ),
    ("ece_bins", "15", "calibration bins"),
    (
        "ood_offset",
        "6,6",
        "translation of the out-of-distribution mixture",
    ),
];

pub const ENV_PREFIX: &str = "EOW_";

/// `EOW_*` variables read by the test suites rather than the CLI.
const ENV_IGNORED: [&str; 3] = [
    "EOW_MNIST_DIR",
    "EOW_MNIST_OFFICIAL_DIR",
    "EOW_ACCEPTANCE_ONLY",
];

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Mixture,
    Moons,
    Mnist,
    Csv(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
    pub dataset: DatasetSpec,
    pub data_dir: PathBuf,
    pub data_seed: u64,
    pub n_samples: usize,
    pub num_classes: usize,
    pub moons_noise: f64,
    pub split: (f64, f64, f64),
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub ece_bins: usize,
    pub ood_offset: (f64, f64),
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim().to_string();
        check_key(&key)?;
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key}",
                n + 1
            )));
        }
    }
    Ok(out)
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key '{key}'")))
    }
}

impl RunConfig {
    /// Resolves defaults, then `file`, then matching `EOW_*` entries of `env`,
    /// then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        env: &BTreeMap<String, String>,
        overrides: &[(&str, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            values.extend(parse_config_text(&text)?);
        }
        for (name, value) in env
            .iter()
            .filter(|(n, _)| !ENV_IGNORED.contains(&n.as_str()))
        {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                check_key(&key)
                    .map_err(|_| Error::Config(format!("unknown environment override {name}")))?;
                values.insert(key, value.clone());
            }
        }
        for (key, value) in overrides {
            check_key(key)?;
            values.insert(key.to_string(), value.clone());
        }
        Self::from_values(values)
    }

    pub fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| values.get(k).map(String::as_str).unwrap_or("");
        let dataset = match get("dataset") {
            "mixture" => DatasetSpec::Mixture,
            "moons" => DatasetSpec::Moons,
            "mnist" => DatasetSpec::Mnist,
            other => match other.strip_prefix("csv:") {
                Some(path) if !path.is_empty() => DatasetSpec::Csv(PathBuf::from(path)),
                _ => return Err(Error::Config(format!("unknown dataset '{other}'"))),
            },
        };
        let split: Vec<f64> = parse_list("split", get("split"))?;
        let split = match split[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::Config("split needs three fractions".into())),
        };
        let offset: Vec<f64> = parse_list("ood_offset", get("ood_offset"))?;
        let ood_offset = match offset[..] {
            [x, y] => (x, y),
            _ => return Err(Error::Config("ood_offset needs two numbers".into())),
        };
        let sgld = SgldConfig {
            alpha: parse("sgld_alpha", get("sgld_alpha"))?,
            sigma: parse("sgld_sigma", get("sgld_sigma"))?,
            steps: parse("sgld_steps", get("sgld_steps"))?,
            stage: parse("sgld_stage", get("sgld_stage"))?,
            init: match get("sgld_init") {
                "data" => ChainInit::Data,
                "noise" => ChainInit::Noise,
                "persistent" => ChainInit::Persistent,
                other => return Err(Error::Config(format!("unknown sgld_init '{other}'"))),
            },
            sign: match get("sgld_sign") {
                "uncertainty" => EnergySign::Uncertainty,
                "literal" => EnergySign::Literal,
                other => return Err(Error::Config(format!("unknown sgld_sign '{other}'"))),
            },
            grad_clip: match get("sgld_grad_clip") {
                "none" => None,
                v => Some(parse("sgld_grad_clip", v)?),
            },
            reinit_prob: parse("sgld_reinit_prob", get("sgld_reinit_prob"))?,
            buffer_capacity: parse("sgld_buffer_capacity", get("sgld_buffer_capacity"))?,
        };
        let train = TrainConfig {
            lambda: parse("lambda", get("lambda"))?,
            lr: parse("lr", get("lr"))?,
            momentum: parse("momentum", get("momentum"))?,
            weight_decay: parse("weight_decay", get("weight_decay"))?,
            batch_size: parse("batch_size", get("batch_size"))?,
            epochs: parse("epochs", get("epochs"))?,
            lr_milestones: parse_list("lr_milestones", get("lr_milestones"))?,
            lr_decay: parse("lr_decay", get("lr_decay"))?,
            sgld,
            loss: get("loss")
                .parse::<LossKind>()
                .map_err(|e| Error::Config(e.to_string()))?,
        };
        train.validate()?;
        let hidden: Vec<usize> = parse_list("hidden", get("hidden"))?;
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(
                "hidden needs at least one positive width".into(),
            ));
        }
        if train.sgld.stage > hidden.len() {
            return Err(Error::Config(format!(
                "sgld_stage {} exceeds the {} stages",
                train.sgld.stage,
                hidden.len()
            )));
        }
        let ece_bins = parse("ece_bins", get("ece_bins"))?;
        if ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        Ok(Self {
            dataset,
            data_dir: PathBuf::from(get("data_dir")),
            data_seed: parse("data_seed", get("data_seed"))?,
            n_samples: parse("n_samples", get("n_samples"))?,
            num_classes: parse("num_classes", get("num_classes"))?,
            moons_noise: parse("moons_noise", get("moons_noise"))?,
            split,
            hidden,
            train,
            ece_bins,
            ood_offset,
            values,
        })
    }

    /// Canonical `key = value` listing, sorted by key.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 12 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, out: &Path, seed: u64) -> PathBuf {
        out.join(format!("{}-seed{seed}", self.hash()))
    }
}
