//! RMSE evaluation and the cold-start sweep harness.

use std::collections::HashSet;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{
    build_side_features, coldstart_filter, identity_features, FeatureSet, RatingDataset,
    RatingGraph, SplitSpec,
};
use crate::decoder::{decoder_weights, predict, rating_logits};
use crate::encoder::{dense_embed, graph_convolve, EncoderConfig};
use crate::error::{Error, Result};
use crate::train::{train, ModelParams, TrainConfig, TrainError};

/// Root mean squared error over paired predictions and targets.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "rmse",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("rmse over an empty set".into()));
    }
    let sq: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// Test RMSE of expected ratings on held-out edges, using the inference
/// path: no dropout, the full training graph for message passing. The
/// edges to score must be disjoint from the graph's training edges; an
/// overlap means train/test leakage and is reported as a data error.
pub fn evaluate(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &RatingGraph,
    eval_edges: &[usize],
    dataset: &RatingDataset,
) -> Result<f64> {
    let features = identity_features(dataset);
    let side = if cfg.side_info {
        Some(build_side_features(dataset)?)
    } else {
        None
    };
    evaluate_with_features(params, cfg, graph, eval_edges, dataset, &features, side.as_ref())
}

/// User and item embeddings over the full training graph on the inference
/// path (no dropout). These are the rows the decoder scores, precomputed
/// once so a saved model can serve predictions without the dataset.
pub fn inference_embeddings(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &RatingGraph,
    dataset: &RatingDataset,
) -> Result<(crate::tensor::DenseMatrix, crate::tensor::DenseMatrix)> {
    let features = identity_features(dataset);
    let side = if cfg.side_info {
        Some(build_side_features(dataset)?)
    } else {
        None
    };
    let (h_u, h_v) = graph_convolve(graph, &features, &params.encoder, cfg, None)?;
    dense_embed(&h_u, &h_v, side.as_ref(), &params.encoder, cfg, None)
}

/// [`evaluate`] with caller-provided feature matrices, so repeated
/// validation passes during training reuse them.
pub(crate) fn evaluate_with_features(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &RatingGraph,
    eval_edges: &[usize],
    dataset: &RatingDataset,
    features: &FeatureSet,
    side: Option<&FeatureSet>,
) -> Result<f64> {
    if eval_edges.is_empty() {
        return Err(Error::InvalidConfig("evaluation over an empty edge set".into()));
    }
    let train_pairs: HashSet<(u32, u32)> =
        graph.edges.iter().map(|e| (e.user, e.item)).collect();
    for &idx in eval_edges {
        let t = dataset.triples.get(idx).ok_or_else(|| {
            Error::Data(format!(
                "evaluation edge index {idx} out of range for {} ratings",
                dataset.triples.len()
            ))
        })?;
        if train_pairs.contains(&(t.user, t.item)) {
            return Err(Error::Data(format!(
                "evaluation edge (user {}, item {}) also appears in the training graph",
                t.user, t.item
            )));
        }
    }

    let (h_u, h_v) = graph_convolve(graph, features, &params.encoder, cfg, None)?;
    let (u, v) = dense_embed(&h_u, &h_v, side, &params.encoder, cfg, None)?;
    let q = decoder_weights(&params.decoder);
    let edges: Vec<(u32, u32)> = eval_edges
        .iter()
        .map(|&idx| {
            let t = &dataset.triples[idx];
            (t.user, t.item)
        })
        .collect();
    let logits = rating_logits(&u, &v, &edges, &q)?;
    let predictions = predict(&logits, &dataset.level_values)?;
    let expected: Vec<f64> = predictions.iter().map(|p| p.expected_rating).collect();
    let actual: Vec<f64> = eval_edges
        .iter()
        .map(|&idx| dataset.level_values[dataset.triples[idx].level as usize])
        .collect();
    rmse(&expected, &actual)
}

/// Cold-start sweep axes: cold user counts, ratings kept per cold user,
/// and whether side features are used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColdStartGrid {
    pub cold_users: Vec<usize>,
    pub kept_ratings: Vec<usize>,
    pub features: Vec<bool>,
}

impl Default for ColdStartGrid {
    fn default() -> Self {
        ColdStartGrid {
            cold_users: vec![0, 50, 100, 150],
            kept_ratings: vec![1, 5, 10],
            features: vec![false, true],
        }
    }
}

impl ColdStartGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cold_users.is_empty() || self.kept_ratings.is_empty() || self.features.is_empty() {
            return Err(Error::InvalidConfig("cold-start grid has an empty axis".into()));
        }
        if self.kept_ratings.contains(&0) {
            return Err(Error::InvalidConfig(
                "cold-start kept-ratings counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sweep cell: mean and standard error of the test RMSE over the runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ColdStartCell {
    pub n_c: usize,
    pub n_r: usize,
    pub features: bool,
    pub mean_rmse: f64,
    pub stderr: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColdStartReport {
    pub cells: Vec<ColdStartCell>,
}

impl ColdStartReport {
    /// CSV form, one row per cell in grid order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::Io {
            path: "<coldstart csv>".into(),
            source: e,
        };
        writeln!(w, "n_c,n_r,features,mean_rmse,stderr,runs").map_err(io)?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.n_c,
                c.n_r,
                if c.features { "on" } else { "off" },
                c.mean_rmse,
                c.stderr,
                c.runs
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct UnitKey {
    n_c: usize,
    n_r: usize,
    features: bool,
}

impl UnitKey {
    /// Keys identifying the same training problem collapse: with no cold
    /// users the kept-ratings count is irrelevant.
    fn canonical(n_c: usize, n_r: usize, features: bool) -> UnitKey {
        UnitKey {
            n_c,
            n_r: if n_c == 0 { 0 } else { n_r },
            features,
        }
    }
}

/// Runs the cold-start sweep: for every grid cell, prune the training
/// ratings of `n_c` randomly chosen users down to `n_r` each (one shared
/// surgery seed, so cells are nested), train once per entry of
/// `train_seeds`, and evaluate on the untouched test split. Cells that
/// describe the same training problem (`n_c` = 0 with different `n_r`)
/// are trained once and reported per grid row. `jobs` bounds concurrent
/// training runs; output is deterministic regardless of `jobs`.
pub fn coldstart_experiment(
    config: &TrainConfig,
    dataset: &RatingDataset,
    splits: &SplitSpec,
    grid: &ColdStartGrid,
    train_seeds: &[u64],
    surgery_seed: u64,
    jobs: usize,
) -> Result<ColdStartReport> {
    grid.validate()?;
    if train_seeds.is_empty() {
        return Err(Error::InvalidConfig("cold-start sweep needs at least one seed".into()));
    }
    if jobs == 0 {
        return Err(Error::InvalidConfig("jobs must be at least 1".into()));
    }
    if splits.test.is_empty() {
        return Err(Error::InvalidConfig("cold-start sweep needs a test split".into()));
    }

    let mut unit_keys: Vec<UnitKey> = Vec::new();
    for &n_c in &grid.cold_users {
        for &n_r in &grid.kept_ratings {
            for &features in &grid.features {
                let key = UnitKey::canonical(n_c, n_r, features);
                if !unit_keys.contains(&key) {
                    unit_keys.push(key);
                }
            }
        }
    }

    struct Task {
        key_idx: usize,
        seed: u64,
    }
    let tasks: Vec<Task> = unit_keys
        .iter()
        .enumerate()
        .flat_map(|(key_idx, _)| {
            train_seeds.iter().map(move |&seed| Task { key_idx, seed })
        })
        .collect();

    let run_task = |task: &Task| -> Result<f64> {
        let key = unit_keys[task.key_idx];
        let filtered = coldstart_filter(
            dataset,
            &splits.train,
            key.n_c,
            key.n_r.max(1),
            surgery_seed,
        )?;
        let cell_splits = SplitSpec {
            train: filtered,
            val: splits.val.clone(),
            test: splits.test.clone(),
            seed: splits.seed,
        };
        let mut cfg = config.clone();
        cfg.encoder.side_info = key.features;
        cfg.train_seed = task.seed;
        let outcome = train(&cfg, dataset, &cell_splits).map_err(|e| match e {
            TrainError::Diverged { epoch, .. } => Error::NonFinite(format!(
                "training diverged at epoch {epoch} in cold-start cell \
                 (n_c {}, n_r {}, features {}, seed {})",
                key.n_c, key.n_r, key.features, task.seed
            )),
            TrainError::Core(err) => err,
        })?;
        outcome.metrics.final_summary.test_rmse.ok_or_else(|| {
            Error::InvalidConfig("cold-start training run produced no test RMSE".into())
        })
    };

    let results: Vec<Option<Result<f64>>> = if jobs == 1 {
        tasks.iter().map(|t| Some(run_task(t))).collect()
    } else {
        let slots: Mutex<Vec<Option<Result<f64>>>> =
            Mutex::new((0..tasks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= tasks.len() {
                        break;
                    }
                    let res = run_task(&tasks[idx]);
                    slots.lock().expect("result mutex").get_mut(idx).map(|s| *s = Some(res));
                });
            }
        });
        slots.into_inner().expect("result mutex")
    };

    let mut per_key: Vec<Vec<f64>> = vec![Vec::new(); unit_keys.len()];
    for (task, slot) in tasks.iter().zip(results) {
        let value = slot.expect("every task ran")?;
        per_key[task.key_idx].push(value);
    }

    let mut cells = Vec::new();
    for &n_c in &grid.cold_users {
        for &n_r in &grid.kept_ratings {
            for &features in &grid.features {
                let key = UnitKey::canonical(n_c, n_r, features);
                let key_idx = unit_keys.iter().position(|k| *k == key).expect("key enumerated");
                let (mean_rmse, stderr) = mean_and_stderr(&per_key[key_idx]);
                cells.push(ColdStartCell {
                    n_c,
                    n_r,
                    features,
                    mean_rmse,
                    stderr,
                    runs: per_key[key_idx].len(),
                });
            }
        }
    }
    Ok(ColdStartReport { cells })
}
