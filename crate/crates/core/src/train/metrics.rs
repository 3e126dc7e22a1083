use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: &str = "step,mode,loss_total,loss_lm,loss_com,loss_R,D_s2t,D_t2s,skipped";

/// One row of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mode: String,
    pub loss_total: f64,
    pub loss_lm: f64,
    pub loss_com: Option<f64>,
    pub loss_r: Option<f64>,
    pub d_s2t: Option<f64>,
    pub d_t2s: Option<f64>,
    pub skipped: u64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mode,
            self.loss_total,
            self.loss_lm,
            cell(self.loss_com),
            cell(self.loss_r),
            cell(self.d_s2t),
            cell(self.d_t2s),
            self.skipped
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Means over consecutive windows of `w` values; a trailing partial window is dropped.
pub fn window_means(values: &[f64], w: usize) -> Vec<f64> {
    values
        .chunks_exact(w.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            step: 3,
            mode: "pretrain".into(),
            loss_total: 1.5,
            loss_lm: 1.5,
            loss_com: None,
            loss_r: Some(0.25),
            d_s2t: None,
            d_t2s: None,
            skipped: 0,
        };
        assert_eq!(metrics_csv(&[row]), format!("{CSV_HEADER}\n3,pretrain,1.5,1.5,,0.25,,,0\n"));
    }

    #[test]
    fn windows() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
