use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: [&str; 6] = ["metric", "variant", "horizon", "sigma", "seed", "value"];

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub variant: String,
    pub horizon: usize,
    /// Head-pose noise, degrees.
    pub sigma: f64,
    pub seed: u64,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, variant: &str, horizon: usize, sigma: f64, seed: u64, value: f64) -> Self {
        Self {
            metric: metric.into(),
            variant: variant.into(),
            horizon,
            sigma,
            seed,
            value,
        }
    }
}

pub fn write_metrics_csv(w: impl Write, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(r: impl Read) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| Ok(r?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let rows = vec![
            MetricRow::new("mad", "full", 12, 0.0, 3, 0.1 + 0.2),
            MetricRow::new("e_alpha", "vanilla", 32, 24.0, 4, 12.98),
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn empty_report_still_has_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), METRICS_HEADER.join(","));
    }
}
