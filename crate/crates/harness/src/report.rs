//! Multi-seed result tables computed from metrics CSVs alone.

use std::path::{Path, PathBuf};

use aasc_core::trainer::METRICS_HEADER;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub batch: usize,
    pub reward: f64,
    pub cumulative_violations: usize,
    pub interventions: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub risk_loss: f64,
    pub seed: u64,
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::in_file(path, aasc_core::Error::Parse { line, msg: msg.into() })
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        Some((_, h)) => return Err(parse_error(path, 1, format!("unexpected header `{h}`"))),
        None => return Err(parse_error(path, 1, "empty file")),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let n = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(parse_error(path, n, format!("expected 9 fields, found {}", f.len())));
        }
        let bad = |col: &str| parse_error(path, n, format!("bad `{col}` value"));
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|_| bad("step"))?,
            batch: f[1].parse().map_err(|_| bad("batch"))?,
            reward: f[2].parse().map_err(|_| bad("mean_episodic_reward_raw"))?,
            cumulative_violations: f[3].parse().map_err(|_| bad("cumulative_violations"))?,
            interventions: f[4].parse().map_err(|_| bad("interventions"))?,
            policy_loss: f[5].parse().map_err(|_| bad("policy_loss"))?,
            value_loss: f[6].parse().map_err(|_| bad("value_loss"))?,
            risk_loss: f[7].parse().map_err(|_| bad("risk_loss"))?,
            seed: f[8].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_metrics(&text, path)
}

/// One method: its label and the metrics of each seed.
#[derive(Debug, Clone)]
pub struct MethodRuns {
    pub label: String,
    pub seeds: Vec<(u64, Vec<MetricsRow>)>,
}

/// Reads `<dir>/<seed>/metrics.csv` for every seed directory, in seed order.
pub fn load_method(dir: &Path) -> Result<MethodRuns> {
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut seeds = Vec::new();
    let listing = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::Usage(format!("cannot read run directory {}: {e}", dir.display())))?;
    for entry in listing {
        let path = entry?.path();
        let csv = path.join("metrics.csv");
        if !csv.is_file() {
            continue;
        }
        let Ok(seed) = path.file_name().unwrap_or_default().to_string_lossy().parse::<u64>() else {
            continue;
        };
        seeds.push((seed, read_metrics(&csv)?));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Usage(format!("no <seed>/metrics.csv under {}", dir.display())));
    }
    seeds.sort_by_key(|(s, _)| *s);
    Ok(MethodRuns { label, seeds })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
            stderr: (var / n as f64).sqrt(),
        }
    }
}

/// Standard error of the difference of two means under a pooled variance.
pub fn pooled_stderr(a: &Summary, b: &Summary) -> f64 {
    let dof = (a.n + b.n).saturating_sub(2);
    if dof == 0 {
        return 0.0;
    }
    let pooled = ((a.n - 1) as f64 * a.std.powi(2) + (b.n - 1) as f64 * b.std.powi(2)) / dof as f64;
    (pooled * (1.0 / a.n as f64 + 1.0 / b.n as f64)).sqrt()
}

/// Reward of one seed at `checkpoint`: the mean over the last `window`
/// batches ending at or before it.
pub fn reward_at(rows: &[MetricsRow], checkpoint: usize, window: usize) -> Option<f64> {
    let upto: Vec<&MetricsRow> = rows.iter().filter(|r| r.step <= checkpoint).collect();
    if upto.is_empty() || rows.last().map(|r| r.step).unwrap_or(0) < checkpoint {
        return None;
    }
    let tail = &upto[upto.len().saturating_sub(window.max(1))..];
    let vals: Vec<f64> = tail.iter().map(|r| r.reward).filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn violations_at(rows: &[MetricsRow], checkpoint: usize) -> Option<usize> {
    rows.iter().filter(|r| r.step <= checkpoint).last().map(|r| r.cumulative_violations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub checkpoint: usize,
    pub reward: Summary,
    pub violations: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub window: usize,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn from_methods(methods: &[MethodRuns], checkpoints: &[usize], window: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for m in methods {
            for &c in checkpoints {
                let mut rewards = Vec::new();
                let mut viol = Vec::new();
                for (seed, r) in &m.seeds {
                    let value = reward_at(r, c, window).ok_or_else(|| {
                        HarnessError::Usage(format!("{} seed {seed} has no data at step {c}", m.label))
                    })?;
                    rewards.push(value);
                    viol.push(violations_at(r, c).unwrap_or(0) as f64);
                }
                rows.push(TableRow {
                    method: m.label.clone(),
                    checkpoint: c,
                    reward: Summary::of(&rewards),
                    violations: Summary::of(&viol),
                });
            }
        }
        Ok(Self { window, rows })
    }

    pub fn from_dirs(dirs: &[PathBuf], checkpoints: &[usize], window: usize) -> Result<Self> {
        let methods: Vec<MethodRuns> = dirs.iter().map(|d| load_method(d)).collect::<Result<_>>()?;
        Self::from_methods(&methods, checkpoints, window)
    }

    pub fn get(&self, method: &str, checkpoint: usize) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method && r.checkpoint == checkpoint)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,checkpoint,seeds,reward_mean,reward_min,reward_max,reward_stderr,violations_mean,violations_min,violations_max\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.checkpoint,
                r.reward.n,
                r.reward.mean,
                r.reward.min,
                r.reward.max,
                r.reward.stderr,
                r.violations.mean,
                r.violations.min,
                r.violations.max
            ));
        }
        out
    }

    /// Markdown with one row per method and `mean (min, max) ± se` cells.
    pub fn to_markdown(&self) -> String {
        let mut checkpoints: Vec<usize> = self.rows.iter().map(|r| r.checkpoint).collect();
        checkpoints.sort_unstable();
        checkpoints.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut out = String::from("| method |");
        for c in &checkpoints {
            out.push_str(&format!(" reward @{c} | violations @{c} |"));
        }
        out.push_str("\n|---|");
        for _ in &checkpoints {
            out.push_str("---|---|");
        }
        out.push('\n');
        for m in methods {
            out.push_str(&format!("| {m} |"));
            for &c in &checkpoints {
                match self.get(m, c) {
                    Some(r) => out.push_str(&format!(
                        " {:.1} ({:.1}, {:.1}) ± {:.1} | {:.1} |",
                        r.reward.mean, r.reward.min, r.reward.max, r.reward.stderr, r.violations.mean
                    )),
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rewards: &[f64]) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for (i, r) in rewards.iter().enumerate() {
            s.push_str(&format!("{},{},{r},{},0,0,0,0,7\n", (i + 1) * 10, i + 1, i));
        }
        s
    }

    #[test]
    fn parses_and_reports_line_numbers() {
        let rows = parse_metrics(&csv(&[1.0, 2.0]), Path::new("m.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].step, 20);
        let mut bad = csv(&[1.0]);
        bad.push_str("1,2,3\n");
        let err = parse_metrics(&bad, Path::new("m.csv")).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(parse_metrics("a,b\n", Path::new("m.csv")).is_err());
        let nan = csv(&[f64::NAN, 3.0]);
        assert!(parse_metrics(&nan, Path::new("m.csv")).unwrap()[0].reward.is_nan());
    }

    #[test]
    fn checkpoint_windows() {
        let rows = parse_metrics(&csv(&[1.0, 2.0, 3.0, 4.0]), Path::new("m")).unwrap();
        assert_eq!(reward_at(&rows, 40, 2), Some(3.5));
        assert_eq!(reward_at(&rows, 25, 5), Some(1.5));
        assert_eq!(reward_at(&rows, 50, 1), None);
        assert_eq!(violations_at(&rows, 30), Some(2));
    }

    #[test]
    fn summaries() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.min, s.max), (2.0, 1.0, 3.0));
        assert!((s.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let one = Summary::of(&[5.0]);
        assert_eq!((one.min, one.max, one.stderr), (5.0, 5.0, 0.0));
        let b = Summary::of(&[1.0, 2.0, 3.0]);
        assert!((pooled_stderr(&s, &b) - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
