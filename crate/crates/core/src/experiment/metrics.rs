//! Metrics rows, their CSV form and the rate comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "experiment,stage,rate,alpha,epoch,metric,value";

/// Metric name of the per-epoch decoder training loss.
pub const DECODER_LOSS: &str = "train_masked_mse";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub stage: String,
    /// Empty for stages that do not depend on the rate.
    pub rate: Option<f64>,
    pub alpha: Option<f64>,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(
        experiment: &str,
        stage: &str,
        cell: Option<(f64, f64)>,
        epoch: usize,
        metric: &str,
        value: f64,
    ) -> Self {
        Self {
            experiment: experiment.to_string(),
            stage: stage.to_string(),
            rate: cell.map(|c| c.0),
            alpha: cell.map(|c| c.1),
            epoch,
            metric: metric.to_string(),
            value,
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::arg(format!("malformed metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        Ok(Self {
            experiment: f[0].to_string(),
            stage: f[1].to_string(),
            rate: opt(f[2])?,
            alpha: opt(f[3])?,
            epoch: f[4].parse().map_err(|_| bad())?,
            metric: f[5].to_string(),
            value: f[6].parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.experiment,
            self.stage,
            opt(self.rate),
            opt(self.alpha),
            self.epoch,
            self.metric,
            self.value
        )
    }
}

/// Full CSV text including the header.
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::arg("metrics file lacks the expected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// Appends rows to a metrics file, writing the header first if the file is
/// new.
pub fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut s = String::new();
    if fresh {
        s.push_str(METRICS_HEADER);
        s.push('\n');
    }
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    f.write_all(s.as_bytes())?;
    Ok(())
}

/// One line of [`compare_rates`].
#[derive(Clone, Debug, PartialEq)]
pub struct RateSummary {
    pub experiment: String,
    pub alpha: f64,
    pub rate: f64,
    pub masked_mse: f64,
    /// `masked_mse` over the `r = 1` value of the same experiment and alpha.
    pub ratio: f64,
}

impl RateSummary {
    pub const CSV_HEADER: &'static str = "experiment,alpha,rate,masked_mse,ratio_to_full";
}

impl fmt::Display for RateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.experiment, self.alpha, self.rate, self.masked_mse, self.ratio
        )
    }
}

/// Final-epoch decoder loss per `(experiment, alpha, rate)` and its ratio to
/// the full-rate baseline.
pub fn compare_rates(rows: &[MetricsRow]) -> Result<Vec<RateSummary>> {
    // (experiment, alpha bits, rate bits) -> (epoch, value)
    let mut last: BTreeMap<(String, u64, u64), (usize, f64)> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.stage == "decoder" && r.metric == DECODER_LOSS)
    {
        let (Some(rate), Some(alpha)) = (r.rate, r.alpha) else {
            continue;
        };
        let key = (r.experiment.clone(), alpha.to_bits(), rate.to_bits());
        let slot = last.entry(key).or_insert((r.epoch, r.value));
        if r.epoch >= slot.0 {
            *slot = (r.epoch, r.value);
        }
    }
    let mut groups: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for ((exp, alpha, rate), (_, v)) in last {
        groups
            .entry((exp, alpha))
            .or_default()
            .push((f64::from_bits(rate), v));
    }
    if groups.is_empty() {
        return Err(Error::Precondition("no decoder losses to compare".into()));
    }
    let mut out = Vec::new();
    for ((exp, alpha), mut cells) in groups {
        let alpha = f64::from_bits(alpha);
        let base = cells
            .iter()
            .find(|c| c.0 == 1.0)
            .map(|c| c.1)
            .ok_or_else(|| {
                Error::Precondition(format!("{exp} alpha {alpha}: missing r = 1 baseline"))
            })?;
        if cells.len() < 2 {
            return Err(Error::Precondition(format!(
                "{exp} alpha {alpha}: only the baseline rate is present"
            )));
        }
        cells.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (rate, v) in cells {
            out.push(RateSummary {
                experiment: exp.clone(),
                alpha,
                rate,
                masked_mse: v,
                ratio: v / base,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(rate: f64, epoch: usize, v: f64) -> MetricsRow {
        MetricsRow::new("e", "decoder", Some((rate, 1.0)), epoch, DECODER_LOSS, v)
    }

    #[test]
    fn row_roundtrip() {
        let r = MetricsRow::new("toy-s0", "encoder", None, 3, "train_loss", 0.125);
        assert_eq!(r.to_string(), "toy-s0,encoder,,,3,train_loss,0.125");
        assert_eq!(MetricsRow::parse(&r.to_string()).unwrap(), r);
        let rows = vec![r, loss(0.5, 1, 0.25)];
        assert_eq!(parse_csv(&render_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn ratio_against_baseline() {
        let rows = vec![
            loss(1.0, 1, 9.0),
            loss(1.0, 2, 1.0),
            loss(0.5, 1, 5.0),
            loss(0.5, 2, 0.9),
        ];
        let s = compare_rates(&rows).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].rate, s[0].ratio), (1.0, 1.0));
        assert_eq!(s[1].rate, 0.5);
        assert!((s[1].ratio - 0.9).abs() < 1e-12);
    }

    #[test]
    fn missing_baseline() {
        assert!(compare_rates(&[loss(0.5, 1, 1.0)]).is_err());
        assert!(compare_rates(&[loss(1.0, 1, 1.0)]).is_err());
        assert!(compare_rates(&[loss(0.5, 1, 1.0), loss(0.25, 1, 1.0)]).is_err());
    }
}
