//! `gcmc`: train, evaluate, and serve graph-convolutional matrix completion
//! models on MovieLens-style rating data.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gcmc::checkpoint::{decoder_from_tensors, Checkpoint};
use gcmc::decoder::{decoder_weights, predict, rating_logits};
use gcmc::eval::{coldstart_experiment, rmse, ColdStartGrid, ColdStartReport};
use gcmc::train::{train, TrainError};
use gcmc::Error;

use config::RunConfig;

const USAGE: &str = "\
usage: gcmc <command> [--config <file-or-preset>] [--out <dir>] [--jobs <n>] [--key <value> ...]

commands:
  train      fit a model; writes model.gcmc, metrics.csv, summary.csv
  evaluate   score a saved model on the configured splits (needs --checkpoint)
  predict    score user/item pairs (needs --checkpoint and --pairs_file)
  coldstart  sparse-user sweep; writes coldstart.csv

Any configuration key can be passed as a --key value override; --config
accepts a file path or a bundled preset (ml100k-gcmc, ml100k-feat, ml1m,
ml10m-minibatch). Dataset paths resolve under $GCMC_DATA_DIR (default:
./data). Exit codes: 2 bad config, 3 data error, 4 divergence, 5 unreadable
checkpoint.";

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::ShapeMismatch { .. } => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite(_) => 4,
            Error::Checkpoint(_) => 5,
        };
        Failure::new(code, e.to_string())
    }
}

struct Invocation {
    command: String,
    config: Option<String>,
    out: Option<PathBuf>,
    jobs: usize,
    overrides: Vec<(String, String)>,
}

/// The whole surface is uniform `--key value` pairs after the subcommand;
/// keys that are not harness flags are configuration overrides.
fn parse_args(args: &[String]) -> Result<Invocation, Failure> {
    let mut it = args.iter();
    let command = match it.next() {
        Some(c) => c.clone(),
        None => return Err(Failure::new(2, format!("missing command\n{USAGE}"))),
    };
    let mut inv = Invocation {
        command,
        config: None,
        out: None,
        jobs: 1,
        overrides: Vec::new(),
    };
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::new(2, format!("expected a --flag, got '{flag}'")))?;
        let value = it
            .next()
            .ok_or_else(|| Failure::new(2, format!("missing value for --{key}")))?;
        match key {
            "config" => inv.config = Some(value.clone()),
            "out" => inv.out = Some(PathBuf::from(value)),
            "jobs" => {
                inv.jobs = value
                    .parse()
                    .ok()
                    .filter(|&j| j >= 1)
                    .ok_or_else(|| Failure::new(2, format!("--jobs must be >= 1, got '{value}'")))?
            }
            _ => inv.overrides.push((key.to_string(), value.clone())),
        }
    }
    Ok(inv)
}

fn out_dir(inv: &Invocation) -> Result<&Path, Failure> {
    inv.out
        .as_deref()
        .ok_or_else(|| Failure::new(2, "missing --out <dir>"))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if matches!(args.first().map(String::as_str), None | Some("--help") | Some("-h") | Some("help"))
    {
        if args.is_empty() {
            eprintln!("{USAGE}");
            return ExitCode::from(2);
        }
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gcmc: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(args: &[String]) -> Result<(), Failure> {
    let inv = parse_args(args)?;
    match inv.command.as_str() {
        "train" => cmd_train(&inv),
        "evaluate" => cmd_evaluate(&inv),
        "predict" => cmd_predict(&inv),
        "coldstart" => cmd_coldstart(&inv),
        other => Err(Failure::new(
            2,
            format!("unknown command '{other}'\n{USAGE}"),
        )),
    }
}

fn cmd_train(inv: &Invocation) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(inv.config.as_deref(), &inv.overrides)?;
    let out = out_dir(inv)?;
    let (ds, splits) = cfg.load_dataset()?;
    match train(&cfg.train, &ds, &splits) {
        Ok(outcome) => {
            artifacts::save_run(out, &cfg, &ds, &splits, &outcome)?;
            let s = &outcome.metrics.final_summary;
            println!(
                "train: epochs={} test_rmse={} val_rmse={} best_val={} fingerprint={} wall={:.1}s",
                outcome.metrics.epochs.len(),
                fmt_opt(s.test_rmse),
                fmt_opt(s.val_rmse),
                s.best_val
                    .map(|b| format!("{}@{}", trim_float(b.val_rmse), b.epoch))
                    .unwrap_or_else(|| "-".into()),
                cfg.fingerprint(),
                s.wall_seconds
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, last_good }) => {
            artifacts::save_run(out, &cfg, &ds, &splits, &last_good)?;
            Err(Failure::new(
                4,
                format!("training diverged at epoch {epoch}; last finite state saved to {}", out.display()),
            ))
        }
        Err(TrainError::Core(e)) => Err(e.into()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(trim_float).unwrap_or_else(|| "-".into())
}

fn trim_float(v: f64) -> String {
    format!("{v:.4}")
}

/// Loads a checkpoint for serving; any load problem means exit 5.
fn load_checkpoint(path: &str) -> Result<Checkpoint, Failure> {
    Checkpoint::load(Path::new(path)).map_err(|e| Failure::new(5, e.to_string()))
}

/// Keys that determine the dataset and its split. A saved model is only
/// comparable against the exact split it was trained beside.
const DATA_KEYS: [&str; 8] = [
    "dataset_dir",
    "format",
    "train_file",
    "test_file",
    "ratings_file",
    "test_fraction",
    "val_fraction",
    "data_seed",
];

fn check_same_data(ck: &Checkpoint, cfg: &RunConfig) -> Result<(), Failure> {
    let resolved = cfg.resolved_text();
    for key in DATA_KEYS {
        let here = resolved
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap_or_default();
        let there = config::decode_hyper(ck.hyper(key).map_err(Failure::from)?);
        if here != there {
            return Err(Failure::new(
                3,
                format!(
                    "checkpoint was trained with {key} = {there}, this run has {key} = {here}; \
                     refusing to evaluate against a different split"
                ),
            ));
        }
    }
    Ok(())
}

fn cmd_evaluate(inv: &Invocation) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(inv.config.as_deref(), &inv.overrides)?;
    let out = out_dir(inv)?;
    let ck_path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Failure::new(2, "evaluate needs --checkpoint <model.gcmc>"))?;
    let ck = load_checkpoint(ck_path)?;
    let (ds, splits) = cfg.load_dataset()?;
    if ck.user_ids != ds.user_ids || ck.item_ids != ds.item_ids {
        return Err(Failure::new(
            3,
            "checkpoint id tables do not match the configured dataset",
        ));
    }
    check_same_data(&ck, &cfg)?;

    let u = ck.tensor("infer.u").map_err(Failure::from)?;
    let v = ck.tensor("infer.v").map_err(Failure::from)?;
    let dec = decoder_from_tensors(&ck, "ema.")
        .or_else(|_| decoder_from_tensors(&ck, ""))
        .map_err(Failure::from)?;
    let q = decoder_weights(&dec);

    let mut rows = Vec::new();
    for (name, indices) in [("val", &splits.val), ("test", &splits.test)] {
        if indices.is_empty() {
            continue;
        }
        let edges: Vec<(u32, u32)> = indices
            .iter()
            .map(|&i| (ds.triples[i].user, ds.triples[i].item))
            .collect();
        let logits = rating_logits(u, v, &edges, &q).map_err(Failure::from)?;
        let preds = predict(&logits, &ds.level_values).map_err(Failure::from)?;
        let expected: Vec<f64> = preds.iter().map(|p| p.expected_rating).collect();
        let actual: Vec<f64> = indices
            .iter()
            .map(|&i| ds.level_values[ds.triples[i].level as usize])
            .collect();
        let score = rmse(&expected, &actual).map_err(Failure::from)?;
        rows.push((name, indices.len(), score));
    }
    if rows.is_empty() {
        return Err(Failure::new(2, "no validation or test split to evaluate"));
    }

    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
    let fp = ck.fingerprint.clone().unwrap_or_else(|| "-".into());
    let mut text = artifacts::fingerprint_line(&fp);
    text.push_str("split,count,rmse\n");
    for (name, count, score) in &rows {
        text.push_str(&format!("{name},{count},{score}\n"));
        println!("evaluate: {name} rmse {} over {count} ratings", trim_float(*score));
    }
    artifacts::write_text(&out.join("evaluation.csv"), &text)?;
    Ok(())
}

fn cmd_predict(inv: &Invocation) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(inv.config.as_deref(), &inv.overrides)?;
    let out = out_dir(inv)?;
    let ck_path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Failure::new(2, "predict needs --checkpoint <model.gcmc>"))?;
    let pairs_path = cfg
        .pairs_file
        .as_deref()
        .ok_or_else(|| Failure::new(2, "predict needs --pairs_file <file>"))?;
    let ck = load_checkpoint(ck_path)?;
    let u = ck.tensor("infer.u").map_err(Failure::from)?;
    let v = ck.tensor("infer.v").map_err(Failure::from)?;
    let dec = decoder_from_tensors(&ck, "ema.")
        .or_else(|_| decoder_from_tensors(&ck, ""))
        .map_err(Failure::from)?;
    let q = decoder_weights(&dec);
    let levels = ck.level_values.len();

    let text = std::fs::read_to_string(pairs_path)
        .map_err(|e| Failure::from(Error::io(pairs_path, e)))?;

    enum Row {
        Scored { user: u32, item: u32, slot: usize },
        Unknown { user: u32, item: u32 },
    }
    let mut rows = Vec::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut warnings = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line.split_once('\t').and_then(|(a, b)| {
            Some((a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?))
        });
        let Some((user, item)) = parsed else {
            eprintln!("warning: {pairs_path}:{}: expected 'user<TAB>item'", idx + 1);
            warnings += 1;
            continue;
        };
        match (ck_index(&ck.user_ids, user), ck_index(&ck.item_ids, item)) {
            (Some(iu), Some(iv)) => {
                rows.push(Row::Scored {
                    user,
                    item,
                    slot: edges.len(),
                });
                edges.push((iu, iv));
            }
            (known_u, _) => {
                let what = if known_u.is_none() { "user" } else { "item" };
                let id = if known_u.is_none() { user } else { item };
                eprintln!("warning: {pairs_path}:{}: unknown {what} id {id}", idx + 1);
                warnings += 1;
                rows.push(Row::Unknown { user, item });
            }
        }
    }

    let preds = if edges.is_empty() {
        Vec::new()
    } else {
        let logits = rating_logits(u, v, &edges, &q).map_err(Failure::from)?;
        predict(&logits, &ck.level_values).map_err(Failure::from)?
    };

    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
    let fp = ck.fingerprint.clone().unwrap_or_else(|| "-".into());
    let mut csv = artifacts::fingerprint_line(&fp);
    csv.push_str("user,item,expected_rating");
    for r in 1..=levels {
        csv.push_str(&format!(",p_{r}"));
    }
    csv.push('\n');
    for row in &rows {
        match row {
            Row::Scored { user, item, slot } => {
                let p = &preds[*slot];
                csv.push_str(&format!("{user},{item},{}", p.expected_rating));
                for prob in &p.probabilities {
                    csv.push_str(&format!(",{prob}"));
                }
                csv.push('\n');
            }
            Row::Unknown { user, item } => {
                csv.push_str(&format!("{user},{item},"));
                csv.push_str(&",".repeat(levels));
                csv.push('\n');
            }
        }
    }
    let csv_path = out.join("predictions.csv");
    artifacts::write_text(&csv_path, &csv)?;
    println!(
        "predict: wrote {} rows ({} scored, {warnings} warnings) to {}",
        rows.len(),
        preds.len(),
        csv_path.display()
    );
    Ok(())
}

fn ck_index(ids: &[u32], original: u32) -> Option<u32> {
    ids.binary_search(&original).ok().map(|i| i as u32)
}

fn cmd_coldstart(inv: &Invocation) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(inv.config.as_deref(), &inv.overrides)?;
    let out = out_dir(inv)?;
    let (ds, splits) = cfg.load_dataset()?;
    let grid = ColdStartGrid {
        cold_users: cfg.cold_users.clone(),
        kept_ratings: cfg.kept_ratings.clone(),
        features: cfg.coldstart_features.clone(),
    };
    let report = coldstart_experiment(
        &cfg.train,
        &ds,
        &splits,
        &grid,
        &cfg.run_seeds,
        cfg.data_seed,
        inv.jobs,
    )
    .map_err(Failure::from)?;

    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
    let fp = cfg.fingerprint();
    let mut resolved = artifacts::fingerprint_line(&fp);
    resolved.push_str(&cfg.resolved_text());
    artifacts::write_text(&out.join("config.resolved"), &resolved)?;

    let mut buf = artifacts::fingerprint_line(&fp).into_bytes();
    report.write_csv(&mut buf).map_err(Failure::from)?;
    let csv_path = out.join("coldstart.csv");
    std::fs::write(&csv_path, &buf).map_err(|e| Failure::from(Error::io(&csv_path, e)))?;
    for c in &report.cells {
        println!(
            "coldstart: n_c={} n_r={} features={} mean_rmse={} stderr={} runs={}",
            c.n_c,
            c.n_r,
            if c.features { "on" } else { "off" },
            trim_float(c.mean_rmse),
            trim_float(c.stderr),
            c.runs
        );
    }
    check_monotone_degradation(&report)
}

/// With features off, keeping more ratings per cold user can only help:
/// mean RMSE must be nonincreasing in the kept-ratings count at each cold
/// user count, with slack for seed noise.
fn check_monotone_degradation(report: &ColdStartReport) -> Result<(), Failure> {
    const SLACK: f64 = 0.005;
    let mut cells: Vec<_> = report
        .cells
        .iter()
        .filter(|c| !c.features)
        .collect();
    cells.sort_by_key(|c| (c.n_c, c.n_r));
    for pair in cells.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.n_c == b.n_c && b.mean_rmse > a.mean_rmse + SLACK {
            return Err(Failure::new(
                1,
                format!(
                    "monotone degradation violated at n_c={}: rmse {} at n_r={} vs {} at n_r={}",
                    a.n_c, b.mean_rmse, b.n_r, a.mean_rmse, a.n_r
                ),
            ));
        }
    }
    Ok(())
}
