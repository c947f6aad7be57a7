//! Output-directory writers: checkpoints, metrics CSVs, resolved config.
//! Every text artifact starts with a `# config <fingerprint>` line so files
//! from different runs are distinguishable.

use std::path::{Path, PathBuf};

use gcmc::checkpoint::Checkpoint;
use gcmc::data::{RatingDataset, SplitSpec, ENCODING_VERSION};
use gcmc::eval::inference_embeddings;
use gcmc::tensor::DenseMatrix;
use gcmc::train::{ModelParams, TrainOutcome};
use gcmc::{Error, Result};

use crate::config::RunConfig;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn fingerprint_line(fp: &str) -> String {
    format!("# config {fp}\n")
}

/// Saves everything a finished (or diverged-but-recovered) training run
/// produces: resolved config, per-epoch metrics, final summary, the final
/// checkpoint, and the best-validation checkpoint when one was tracked.
pub fn save_run(
    out: &Path,
    cfg: &RunConfig,
    ds: &RatingDataset,
    splits: &SplitSpec,
    outcome: &TrainOutcome,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fp = cfg.fingerprint();

    let mut resolved = fingerprint_line(&fp);
    resolved.push_str(&cfg.resolved_text());
    write_text(&out.join("config.resolved"), &resolved)?;

    let mut metrics = outcome.metrics.clone();
    metrics.final_summary.fingerprint = Some(fp.clone());

    let mut buf = fingerprint_line(&fp).into_bytes();
    metrics
        .write_csv(&mut buf)
        .map_err(|e| Error::io(out.join("metrics.csv"), e))?;
    std::fs::write(out.join("metrics.csv"), &buf).map_err(|e| Error::io(out.join("metrics.csv"), e))?;

    let mut buf = fingerprint_line(&fp).into_bytes();
    metrics
        .write_summary_csv(&mut buf)
        .map_err(|e| Error::io(out.join("summary.csv"), e))?;
    std::fs::write(out.join("summary.csv"), &buf)
        .map_err(|e| Error::io(out.join("summary.csv"), e))?;

    let graph = gcmc::data::build_rating_graph(ds, &splits.train)?;
    let model_path = out.join("model.gcmc");
    let final_ck = make_checkpoint(
        cfg,
        &fp,
        ds,
        &graph,
        &outcome.params,
        &outcome.ema.shadow,
        &[],
    )?;
    final_ck.save(&model_path)?;

    if let Some(best) = &outcome.best_ema {
        let extra = [
            ("best_val_epoch".to_string(), best.epoch.to_string()),
            ("best_val_rmse".to_string(), best.val_rmse.to_string()),
        ];
        let best_ck = make_checkpoint(cfg, &fp, ds, &graph, &best.params, &best.params, &extra)?;
        best_ck.save(&out.join("model.best.gcmc"))?;
    }
    Ok(model_path)
}

/// Checkpoint layout: the live tensors under their own names, the averaged
/// shadow under `ema.`, and precomputed inference embeddings of the shadow
/// under `infer.u` / `infer.v` so prediction needs no dataset access.
fn make_checkpoint(
    cfg: &RunConfig,
    fp: &str,
    ds: &RatingDataset,
    graph: &gcmc::data::RatingGraph,
    live: &ModelParams,
    ema: &ModelParams,
    extra_hyper: &[(String, String)],
) -> Result<Checkpoint> {
    let (infer_u, infer_v) = inference_embeddings(ema, &cfg.train.encoder, graph, ds)?;
    let mut tensors: Vec<(String, DenseMatrix)> = Vec::new();
    for (name, t) in live.tensor_names().into_iter().zip(live.tensors()) {
        tensors.push((name, t.clone()));
    }
    for (name, t) in ema.tensor_names().into_iter().zip(ema.tensors()) {
        tensors.push((format!("ema.{name}"), t.clone()));
    }
    tensors.push(("infer.u".to_string(), infer_u));
    tensors.push(("infer.v".to_string(), infer_v));

    let mut hyper = cfg.hyper_pairs();
    hyper.extend_from_slice(extra_hyper);
    Ok(Checkpoint {
        format_name: "gcmc-model".to_string(),
        encoding_version: ENCODING_VERSION,
        fingerprint: Some(fp.to_string()),
        seed: cfg.train.train_seed,
        level_values: ds.level_values.clone(),
        hyper,
        user_ids: ds.user_ids.clone(),
        item_ids: ds.item_ids.clone(),
        tensors,
    })
}
