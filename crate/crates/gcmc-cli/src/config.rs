//! Run configuration: line-oriented `key = value` files, bundled presets,
//! command-line overrides, and a fingerprint of the resolved result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gcmc::data::{split_train_val, MovielensFormat, RatingDataset, SplitSpec};
use gcmc::encoder::{Accumulation, Activation, EncoderConfig, Normalization};
use gcmc::tensor::derive_seed;
use gcmc::train::TrainConfig;
use gcmc::{Error, Result};

/// Seed stream for carving a validation set out of the training indices,
/// kept distinct from the stream used for the random test carve.
const VAL_CARVE_STREAM: u64 = 0x56414c53;

pub const PRESETS: [(&str, &str); 4] = [
    ("ml100k-gcmc", include_str!("../presets/ml100k-gcmc.conf")),
    ("ml100k-feat", include_str!("../presets/ml100k-feat.conf")),
    ("ml1m", include_str!("../presets/ml1m.conf")),
    ("ml10m-minibatch", include_str!("../presets/ml10m-minibatch.conf")),
];

/// Every accepted key with its default, sorted by key. Empty string means
/// "unset" for the path-like keys.
const DEFAULTS: [(&str, &str); 34] = [
    ("accumulation", "stack"),
    ("batch_size", "0"),
    ("checkpoint", ""),
    ("cold_users", "0,50,100,150"),
    ("coldstart_features", "off,on"),
    ("conv_activation", "relu"),
    ("data_seed", "1"),
    ("dataset_dir", "ml-100k"),
    ("dense_activation", "identity"),
    ("ema_decay", "0.995"),
    ("embed_dim", "75"),
    ("epochs", "1000"),
    ("eval_every", "10"),
    ("format", "ml100k"),
    ("hidden_dim", "500"),
    ("items_file", ""),
    ("kept_ratings", "1,5,10"),
    ("learning_rate", "0.01"),
    ("n_basis", "2"),
    ("node_dropout", "0.7"),
    ("normalization", "left"),
    ("ordinal_sharing", "true"),
    ("pairs_file", ""),
    ("ratings_file", ""),
    ("run_seeds", "1,2,3,4,5"),
    ("side_hidden_dim", "10"),
    ("side_info", "false"),
    ("test_file", ""),
    ("test_fraction", "0.1"),
    ("train_file", ""),
    ("train_seed", "1"),
    ("unit_dropout", "0.7"),
    ("users_file", ""),
    ("val_fraction", "0.05"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset_dir: String,
    pub format: MovielensFormat,
    pub train_file: Option<String>,
    pub test_file: Option<String>,
    pub ratings_file: Option<String>,
    pub test_fraction: f64,
    pub users_file: Option<String>,
    pub items_file: Option<String>,
    pub val_fraction: f64,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub cold_users: Vec<usize>,
    pub kept_ratings: Vec<usize>,
    pub coldstart_features: Vec<bool>,
    pub run_seeds: Vec<u64>,
    pub checkpoint: Option<String>,
    pub pairs_file: Option<String>,
    resolved: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(format!("{key}: expected {what}, got '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s, what))
        .collect()
}

fn opt_path(v: &str) -> Option<String> {
    if v.is_empty() {
        None
    } else {
        Some(v.to_string())
    }
}

impl RunConfig {
    /// Builds a configuration from an optional config source (a file path or
    /// a bundled preset name) plus `--key value` overrides, in that order of
    /// precedence. Every key is validated; unknown keys are rejected.
    pub fn resolve(config: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut map: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|&(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(source) = config {
            let (label, text) = read_config_source(source)?;
            apply_file(&mut map, &label, &text)?;
        }
        for (key, value) in overrides {
            if !map.contains_key(key) {
                return Err(bad(format!("unknown configuration key '--{key}'")));
            }
            map.insert(key.clone(), value.clone());
        }
        RunConfig::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<RunConfig> {
        let get = |k: &str| map.get(k).map(String::as_str).unwrap_or_default();

        let encoder = EncoderConfig {
            hidden_dim: parse_num("hidden_dim", get("hidden_dim"), "a positive integer")?,
            embed_dim: parse_num("embed_dim", get("embed_dim"), "a positive integer")?,
            accumulation: match get("accumulation") {
                "stack" => Accumulation::Stack,
                "sum" => Accumulation::Sum,
                v => return Err(bad(format!("accumulation: expected stack or sum, got '{v}'"))),
            },
            normalization: match get("normalization") {
                "left" => Normalization::Left,
                "symmetric" => Normalization::Symmetric,
                v => {
                    return Err(bad(format!(
                        "normalization: expected left or symmetric, got '{v}'"
                    )))
                }
            },
            ordinal_sharing: parse_bool("ordinal_sharing", get("ordinal_sharing"))?,
            conv_activation: parse_activation("conv_activation", get("conv_activation"))?,
            dense_activation: parse_activation("dense_activation", get("dense_activation"))?,
            side_info: parse_bool("side_info", get("side_info"))?,
            side_hidden_dim: parse_num(
                "side_hidden_dim",
                get("side_hidden_dim"),
                "a positive integer",
            )?,
            node_dropout: parse_num("node_dropout", get("node_dropout"), "a number")?,
            unit_dropout: parse_num("unit_dropout", get("unit_dropout"), "a number")?,
        };
        let train = TrainConfig {
            encoder,
            n_basis: parse_num("n_basis", get("n_basis"), "a positive integer")?,
            epochs: parse_num("epochs", get("epochs"), "a nonnegative integer")?,
            batch_size: parse_num("batch_size", get("batch_size"), "a nonnegative integer")?,
            learning_rate: parse_num("learning_rate", get("learning_rate"), "a number")?,
            ema_decay: parse_num("ema_decay", get("ema_decay"), "a number")?,
            eval_every: parse_num("eval_every", get("eval_every"), "a positive integer")?,
            train_seed: parse_num("train_seed", get("train_seed"), "an integer seed")?,
        };

        let coldstart_features = get("coldstart_features")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_bool("coldstart_features", s))
            .collect::<Result<Vec<bool>>>()?;

        let cfg = RunConfig {
            dataset_dir: get("dataset_dir").to_string(),
            format: MovielensFormat::parse_name(get("format"))?,
            train_file: opt_path(get("train_file")),
            test_file: opt_path(get("test_file")),
            ratings_file: opt_path(get("ratings_file")),
            test_fraction: parse_num("test_fraction", get("test_fraction"), "a number")?,
            users_file: opt_path(get("users_file")),
            items_file: opt_path(get("items_file")),
            val_fraction: parse_num("val_fraction", get("val_fraction"), "a number")?,
            data_seed: parse_num("data_seed", get("data_seed"), "an integer seed")?,
            train,
            cold_users: parse_list("cold_users", get("cold_users"), "a nonnegative integer")?,
            kept_ratings: parse_list("kept_ratings", get("kept_ratings"), "a positive integer")?,
            coldstart_features,
            run_seeds: parse_list("run_seeds", get("run_seeds"), "an integer seed")?,
            checkpoint: opt_path(get("checkpoint")),
            pairs_file: opt_path(get("pairs_file")),
            resolved: map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(bad(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(bad(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let file_pair = self.train_file.is_some() && self.test_file.is_some();
        if self.train_file.is_some() != self.test_file.is_some() {
            return Err(bad("train_file and test_file must be set together"));
        }
        if file_pair && self.ratings_file.is_some() {
            return Err(bad(
                "set either train_file/test_file or ratings_file, not both",
            ));
        }
        if self.users_file.is_some() != self.items_file.is_some() {
            return Err(bad("users_file and items_file must be set together"));
        }
        if self.train.encoder.side_info && self.users_file.is_none() {
            return Err(bad(
                "side_info = true requires users_file and items_file for the metadata",
            ));
        }
        Ok(())
    }

    /// Dataset root: `GCMC_DATA_DIR` if set, else `data` under the current
    /// directory. Absolute `dataset_dir` values bypass it.
    pub fn data_root() -> PathBuf {
        std::env::var_os("GCMC_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    fn dataset_file(&self, name: &str) -> PathBuf {
        let dir = Path::new(&self.dataset_dir);
        let base = if dir.is_absolute() {
            dir.to_path_buf()
        } else {
            Self::data_root().join(dir)
        };
        base.join(name)
    }

    /// Loads the configured dataset and produces the train/val/test split.
    /// With `train_file`/`test_file` the test set is the canonical file;
    /// with `ratings_file` a `test_fraction` share is carved at random under
    /// `data_seed`. Validation is always carved from the training indices.
    pub fn load_dataset(&self) -> Result<(RatingDataset, SplitSpec)> {
        let users = self.users_file.as_ref().map(|f| self.dataset_file(f));
        let items = self.items_file.as_ref().map(|f| self.dataset_file(f));
        let (ds, mut split) = match (&self.train_file, &self.ratings_file) {
            (Some(train), None) => {
                let test = self.test_file.as_ref().expect("validated");
                gcmc::data::load_movielens_split(
                    &self.dataset_file(train),
                    &self.dataset_file(test),
                    users.as_deref(),
                    items.as_deref(),
                    self.format,
                )?
            }
            (None, Some(ratings)) => {
                let ds = gcmc::data::load_movielens(
                    &self.dataset_file(ratings),
                    users.as_deref(),
                    items.as_deref(),
                    self.format,
                )?;
                let all: Vec<usize> = (0..ds.triples.len()).collect();
                let carved = split_train_val(&all, 1.0 - self.test_fraction, self.data_seed)?;
                let split = SplitSpec {
                    train: carved.train,
                    val: Vec::new(),
                    test: carved.val,
                    seed: self.data_seed,
                };
                (ds, split)
            }
            _ => {
                return Err(bad(
                    "no input files: set train_file/test_file or ratings_file",
                ))
            }
        };
        if self.val_fraction > 0.0 {
            let carved = split_train_val(
                &split.train,
                1.0 - self.val_fraction,
                derive_seed(self.data_seed, VAL_CARVE_STREAM),
            )?;
            split.train = carved.train;
            split.val = carved.val;
        }
        split.seed = self.data_seed;
        Ok((ds, split))
    }

    /// The resolved configuration as sorted `key = value` lines.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a 64 over the resolved text, as 16 hex digits. Identifies the
    /// configuration in every output artifact.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.resolved_text().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// The resolved keys as hyperparameter pairs for checkpoint headers.
    /// The header format cannot carry empty values, so unset keys are
    /// stored as `-` (see [`decode_hyper`]).
    pub fn hyper_pairs(&self) -> Vec<(String, String)> {
        self.resolved
            .iter()
            .map(|(k, v)| {
                let v = if v.is_empty() { "-" } else { v };
                (k.clone(), v.to_string())
            })
            .collect()
    }
}

/// Undoes the `-` placeholder that [`RunConfig::hyper_pairs`] uses for
/// unset values in checkpoint headers.
pub fn decode_hyper(v: &str) -> &str {
    if v == "-" {
        ""
    } else {
        v
    }
}

fn parse_activation(key: &str, v: &str) -> Result<Activation> {
    match v {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        _ => Err(bad(format!(
            "{key}: expected relu or identity, got '{v}'"
        ))),
    }
}

/// Reads the config text either from a file path or from a bundled preset.
fn read_config_source(source: &str) -> Result<(String, String)> {
    let path = Path::new(source);
    if path.is_file() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        return Ok((source.to_string(), text));
    }
    for (name, text) in PRESETS {
        if name == source {
            return Ok((format!("preset {name}"), text.to_string()));
        }
    }
    let names: Vec<&str> = PRESETS.iter().map(|&(n, _)| n).collect();
    Err(bad(format!(
        "config '{source}' is neither a readable file nor a bundled preset ({})",
        names.join(", ")
    )))
}

fn apply_file(map: &mut BTreeMap<String, String>, label: &str, text: &str) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("{label}:{}: expected 'key = value'", idx + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if !map.contains_key(key) {
            return Err(bad(format!(
                "{label}:{}: unknown configuration key '{key}'",
                idx + 1
            )));
        }
        if !seen.insert(key.to_string()) {
            return Err(bad(format!(
                "{label}:{}: duplicate key '{key}'",
                idx + 1
            )));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(())
}
