use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// One row per report, best (lowest mean dB) first.
pub fn report_render(reports: &[MetricReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows: Vec<&MetricReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.mean_db.total_cmp(&b.mean_db));
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::Config(format!("csv output: {e}"));
            w.write_record(["method", "mean_db", "std_db", "sequences"]).map_err(io)?;
            for r in rows {
                w.write_record([
                    r.method.clone(),
                    format!("{:.3}", r.mean_db),
                    format!("{:.3}", r.std_db),
                    r.per_sequence_db.len().to_string(),
                ])
                .map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv output: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv output: {e}")))
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Method | MSE [dB] |\n|---|---|\n");
            for r in rows {
                out.push_str(&format!("| {} | {:.3} ± {:.3} |\n", r.method, r.mean_db, r.std_db));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, mean: f64, std: f64) -> MetricReport {
        MetricReport {
            method: method.into(),
            per_sequence_db: vec![mean; 3],
            mean_db: mean,
            std_db: std,
            wall_clock_secs: 1.0,
            config_hash: "x".into(),
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(report_render(&[], ReportFormat::Csv), Err(Error::EmptyInput)));
    }

    #[test]
    fn single_row() {
        let md = report_render(&[report("ekf", -6.3, 0.1)], ReportFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| ekf | -6.300 ± 0.100 |"));
    }

    #[test]
    fn rows_sorted_by_mean() {
        let reps = [report("ekf", -6.3, 0.1), report("knet", -11.1, 0.2), report("noise", 0.0, 0.05)];
        let md = report_render(&reps, ReportFormat::Markdown).unwrap();
        let order: Vec<&str> = md.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
        assert_eq!(order, ["knet", "ekf", "noise"]);
    }

    #[test]
    fn csv_roundtrips_through_reader() {
        let reps = [report("pf, bootstrap", -5.3, 0.1), report("ekf", -6.3, 0.1)];
        let text = report_render(&reps, ReportFormat::Csv).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rdr.headers().unwrap(), vec!["method", "mean_db", "std_db", "sequences"]);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "ekf");
        assert_eq!(&rows[1][0], "pf, bootstrap");
        assert_eq!(rows[1][1].parse::<f64>().unwrap(), -5.3);
    }
}
