//! Cross-run comparison: aligns metrics CSVs, probe histories and timing
//! logs from two or more runs and reports per-step losses, probe
//! precision, updated-parameter fractions and wall-clock, with deltas
//! against the first run.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::pretrain::{EpochProbe, StepMetrics};

#[derive(Clone, Debug)]
pub struct RunLog {
    pub name: String,
    pub metrics: Vec<StepMetrics>,
    /// `(step, wallclock_ms)`; may be absent.
    pub timing: Vec<(usize, f64)>,
    pub probes: Vec<EpochProbe>,
}

/// Loads `metrics.csv`, `timing.csv` and `probe_history.json` from a run
/// directory produced by pre-training.
pub fn load_run_dir(dir: &Path) -> Result<RunLog> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let metrics = read_metrics_csv(&dir.join("metrics.csv"))?;
    let timing = match std::fs::File::open(dir.join("timing.csv")) {
        Ok(f) => {
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if i == 0 || line.trim().is_empty() {
                    continue;
                }
                let (s, w) = line
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidArgument(format!("bad timing row '{line}'")))?;
                rows.push((
                    s.parse().map_err(|_| Error::InvalidArgument("bad step".into()))?,
                    w.parse().map_err(|_| Error::InvalidArgument("bad wallclock".into()))?,
                ));
            }
            rows
        }
        Err(_) => Vec::new(),
    };
    let probes: Vec<EpochProbe> = match std::fs::read_to_string(dir.join("probe_history.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Vec::new(),
    };
    Ok(RunLog { name, metrics, timing, probes })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::InvalidArgument("empty metrics file".into()))?;
    if header.trim() != StepMetrics::CSV_HEADER {
        return Err(Error::InvalidArgument(format!(
            "metric schema mismatch: '{}' != '{}'",
            header.trim(),
            StepMetrics::CSV_HEADER
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(StepMetrics::parse_csv_row(&line)?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepComparison {
    pub step: usize,
    pub l_total: Vec<f64>,
    /// `l_total[i] - l_total[0]`
    pub l_total_delta: Vec<f64>,
    /// Updated-FFN-parameter fraction per run.
    pub coverage_fraction: Vec<f64>,
    pub wallclock_ms: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochComparison {
    pub epoch: usize,
    pub heldout_p_at_1: Vec<f64>,
    /// `heldout_p_at_1[i] - heldout_p_at_1[0]`
    pub p_at_1_delta: Vec<f64>,
    pub train_p_at_1: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub runs: Vec<String>,
    pub steps: Vec<StepComparison>,
    pub epochs: Vec<EpochComparison>,
}

pub fn compare_runs(runs: &[RunLog]) -> Result<CompareReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two runs to compare".into()));
    }
    let n_steps = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
    let mut steps = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let step = runs[0].metrics[i].step;
        for r in runs {
            if r.metrics[i].step != step {
                return Err(Error::InvalidArgument(format!(
                    "step column mismatch at row {i}: {} vs {}",
                    r.metrics[i].step, step
                )));
            }
        }
        let l_total: Vec<f64> = runs.iter().map(|r| r.metrics[i].l_total).collect();
        let base = l_total[0];
        steps.push(StepComparison {
            step,
            l_total_delta: l_total.iter().map(|v| v - base).collect(),
            coverage_fraction: runs.iter().map(|r| r.metrics[i].coverage_fraction).collect(),
            wallclock_ms: runs
                .iter()
                .map(|r| r.timing.iter().find(|&&(s, _)| s == step).map(|&(_, w)| w))
                .collect(),
            l_total,
        });
    }

    let n_epochs = runs.iter().map(|r| r.probes.len()).min().unwrap_or(0);
    let mut epochs = Vec::with_capacity(n_epochs);
    for i in 0..n_epochs {
        let heldout: Vec<f64> = runs
            .iter()
            .map(|r| r.probes[i].heldout.as_ref().map(|p| p.macro_p_at_1).unwrap_or(f64::NAN))
            .collect();
        let base = heldout[0];
        epochs.push(EpochComparison {
            epoch: runs[0].probes[i].epoch,
            p_at_1_delta: heldout.iter().map(|v| v - base).collect(),
            train_p_at_1: runs.iter().map(|r| r.probes[i].train.macro_p_at_1).collect(),
            heldout_p_at_1: heldout,
        });
    }

    Ok(CompareReport { runs: runs.iter().map(|r| r.name.clone()).collect(), steps, epochs })
}

impl CompareReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut header = vec!["step".to_string()];
        for r in &self.runs {
            header.push(format!("l_total[{r}]"));
        }
        for r in &self.runs[1..] {
            header.push(format!("l_total_delta[{r}]"));
        }
        for r in &self.runs {
            header.push(format!("coverage_fraction[{r}]"));
        }
        for r in &self.runs {
            header.push(format!("wallclock_ms[{r}]"));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string()];
            row.extend(s.l_total.iter().map(|v| v.to_string()));
            row.extend(s.l_total_delta[1..].iter().map(|v| v.to_string()));
            row.extend(s.coverage_fraction.iter().map(|v| v.to_string()));
            row.extend(
                s.wallclock_ms.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            writeln!(w, "{}", row.join(","))?;
        }
        writeln!(w)?;
        let mut header = vec!["epoch".to_string()];
        for r in &self.runs {
            header.push(format!("heldout_p@1[{r}]"));
        }
        for r in &self.runs[1..] {
            header.push(format!("p@1_delta[{r}]"));
        }
        for r in &self.runs {
            header.push(format!("train_p@1[{r}]"));
        }
        writeln!(w, "{}", header.join(","))?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string()];
            row.extend(e.heldout_p_at_1.iter().map(|v| v.to_string()));
            row.extend(e.p_at_1_delta[1..].iter().map(|v| v.to_string()));
            row.extend(e.train_p_at_1.iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_log(name: &str, offset: f64) -> RunLog {
        let metrics = (0..5)
            .map(|i| StepMetrics {
                step: i,
                epoch: 0,
                l_mlm: 1.0 + offset,
                l_cka: 2.0 + offset,
                l_total: 1.5 + offset,
                lambda_q: 0.5,
                coverage_fraction: 0.1,
            })
            .collect();
        RunLog { name: name.into(), metrics, timing: vec![(0, 12.0)], probes: Vec::new() }
    }

    #[test]
    fn identical_logs_have_zero_deltas() {
        let report = compare_runs(&[fake_log("a", 0.0), fake_log("b", 0.0)]).unwrap();
        for s in &report.steps {
            assert!(s.l_total_delta.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn deltas_reflect_offset() {
        let report = compare_runs(&[fake_log("a", 0.0), fake_log("b", 0.25)]).unwrap();
        for s in &report.steps {
            assert!((s.l_total_delta[1] - 0.25).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("l_total_delta[b]"));
        assert!(text.contains("coverage_fraction[a]"));
    }

    #[test]
    fn single_run_rejected() {
        assert!(compare_runs(&[fake_log("a", 0.0)]).is_err());
    }
}
