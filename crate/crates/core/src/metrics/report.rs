use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Scores for one image pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub image_id: String,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub uqi: f64,
}

/// Per-image scores and their dataset means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Arithmetic mean of each column; `None` when there are no rows.
    pub fn mean(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            image_id: "MEAN".into(),
            ssim: avg(|r| r.ssim),
            ms_ssim: avg(|r| r.ms_ssim),
            uqi: avg(|r| r.uqi),
        })
    }

    /// CSV with columns `image_id, ssim, ms_ssim, uqi` and a final `MEAN` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "ssim", "ms_ssim", "uqi"])?;
        for row in self.rows.iter().chain(self.mean().as_ref()) {
            w.write_record([
                row.image_id.clone(),
                format!("{:.9}", row.ssim),
                format!("{:.9}", row.ms_ssim),
                format!("{:.9}", row.uqi),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
