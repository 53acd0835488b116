//! Per-update training records and their CSV stream.

use std::io::Write;

/// One row per optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: u64,
    /// Mean learning signal over the batch.
    pub signal_mean: f64,
    /// Accepted draws over total proposal draws for the batch.
    pub accept_rate: f64,
    pub attempts: u64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str =
    "schema_version,epoch,step,signal_mean,accept_rate,attempts,grad_norm_theta,grad_norm_phi,wall_ms";

/// Append-only record list.
#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    records: Vec<StepRecord>,
}

impl TrainMetrics {
    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "1,{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.step,
                r.signal_mean,
                r.accept_rate,
                r.attempts,
                r.grad_norm_theta,
                r.grad_norm_phi,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of the signal mean against the step index.
    pub fn signal_slope(&self) -> f64 {
        let n = self.records.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean_x = self.records.iter().map(|r| r.step as f64).sum::<f64>() / n;
        let mean_y = self.records.iter().map(|r| r.signal_mean).sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for r in &self.records {
            let dx = r.step as f64 - mean_x;
            sxy += dx * (r.signal_mean - mean_y);
            sxx += dx * dx;
        }
        sxy / sxx
    }

    /// Mean acceptance rate over the first and last `fraction` of records.
    pub fn accept_rate_trend(&self, fraction: f64) -> (f64, f64) {
        let n = self.records.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let head = self.records[..k]
            .iter()
            .map(|r| r.accept_rate)
            .sum::<f64>()
            / k as f64;
        let tail = self.records[n - k..]
            .iter()
            .map(|r| r.accept_rate)
            .sum::<f64>()
            / k as f64;
        (head, tail)
    }
}
