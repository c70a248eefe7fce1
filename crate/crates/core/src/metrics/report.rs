use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One metric measurement, as written to JSON reports and CSV tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn write_metric_rows_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header() {
        let rows = [MetricRow {
            metric: "psnr".into(),
            value: 20.0,
            n_samples: 4,
            seed: 1,
        }];
        let mut buf = Vec::new();
        write_metric_rows_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value,n_samples,seed\npsnr,20.0,4,1\n");
    }
}
