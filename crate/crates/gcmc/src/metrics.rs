//! Metrics containers and their CSV forms.

use std::io::Write;

use crate::error::{Error, Result};

/// One training epoch's record. `val_rmse` is filled only on validation
/// cadence epochs. `train_loss` and `train_rmse` come from the training
/// forward passes themselves (dropout active), so they are noisy estimates;
/// `elapsed_seconds` is cumulative wall time since training started.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub val_rmse: Option<f64>,
    pub elapsed_seconds: f64,
}

/// Best validation RMSE seen during training and when it happened.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestVal {
    pub epoch: usize,
    pub val_rmse: f64,
}

/// End-of-run summary. RMSE fields are absent when the corresponding split
/// is empty; `fingerprint` identifies the resolved run configuration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FinalSummary {
    pub test_rmse: Option<f64>,
    pub val_rmse: Option<f64>,
    pub best_val: Option<BestVal>,
    pub fingerprint: Option<String>,
    pub seed: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub epochs: Vec<EpochRecord>,
    pub final_summary: FinalSummary,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0;
        for r in &self.epochs {
            if r.epoch <= last {
                return Err(Error::InvalidConfig(format!(
                    "epoch records must increase: {} after {last}",
                    r.epoch
                )));
            }
            last = r.epoch;
            if r.train_rmse < 0.0 || r.val_rmse.is_some_and(|v| v < 0.0) {
                return Err(Error::InvalidConfig("negative RMSE in record".into()));
            }
        }
        Ok(())
    }

    /// Per-epoch CSV. Floats use shortest round-trip formatting, so output
    /// bytes are a pure function of the recorded values.
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,train_rmse,val_rmse,elapsed_seconds")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_rmse,
                opt(r.val_rmse),
                r.elapsed_seconds
            )?;
        }
        Ok(())
    }

    /// One-row summary CSV with the final numbers.
    pub fn write_summary_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(
            w,
            "test_rmse,val_rmse,best_val_epoch,best_val_rmse,fingerprint,seed,wall_seconds"
        )?;
        let f = &self.final_summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            opt(f.test_rmse),
            opt(f.val_rmse),
            f.best_val.map(|b| b.epoch.to_string()).unwrap_or_default(),
            opt(f.best_val.map(|b| b.val_rmse)),
            f.fingerprint.clone().unwrap_or_default(),
            f.seed,
            f.wall_seconds
        )
    }
}
