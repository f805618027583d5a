//! Source-quality and source-count ablations.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use aasc_core::{KvMap, SourcePool};

use crate::config;
use crate::error::{HarnessError, Result};
use crate::experiment::{self, ExperimentSpec, Method, Selection};
use crate::report::ResultTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    SourceQuality,
    SourceCount,
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source_quality" => Ok(Ablation::SourceQuality),
            "source_count" => Ok(Ablation::SourceCount),
            other => Err(format!("unknown ablation `{other}` (expected source_quality or source_count)")),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::SourceQuality => "source_quality",
            Ablation::SourceCount => "source_count",
        }
    }
}

/// The arms of an ablation as experiment specs sharing `base`'s seeds,
/// budget and training settings.
pub fn arms(which: Ablation, base: &ExperimentSpec, pool: &SourcePool, kv: &KvMap) -> Result<Vec<ExperimentSpec>> {
    let arm = |name: String, method: Method, selection: Selection| ExperimentSpec {
        name,
        method,
        selection,
        ..base.clone()
    };
    let mut out = Vec::new();
    if config::get_or(kv, "ablate.include_mlp", true)? {
        out.push(arm("mlp".into(), Method::Mlp, Selection::None));
    }
    match which {
        Ablation::SourceQuality => {
            let k: usize = config::get_or(kv, "ablate.k", 4)?;
            if k < 2 {
                return Err(HarnessError::Usage("ablate.k must be at least 2".into()));
            }
            let (h, l) = (k / 2, k - k / 2);
            out.push(arm(format!("{k}-high"), base.method, Selection::KHigh(k)));
            out.push(arm(format!("{h}-high-{l}-low"), base.method, Selection::Mixed { high: h, low: l }));
            out.push(arm(format!("{k}-low"), base.method, Selection::KLow(k)));
            out.push(arm("random".into(), base.method, Selection::Random(k)));
        }
        Ablation::SourceCount => {
            let mut counts: Vec<usize> = config::list_or(kv, "ablate.counts", vec![1, 4, 10])?
                .into_iter()
                .map(|k: usize| k.min(pool.len()))
                .filter(|k| *k > 0)
                .collect();
            counts.dedup();
            for k in counts {
                out.push(arm(format!("k{k}"), base.method, Selection::Random(k)));
            }
        }
    }
    Ok(out)
}

/// Runs every arm (jobs of all arms share the worker pool), then writes
/// `<out>/ablate/<which>/table.{csv,md}`.
pub fn run_ablation(which: Ablation, kv: &KvMap, out: &Path, workers: usize) -> Result<ResultTable> {
    let mut kv = kv.clone();
    if !kv.contains("experiment.name") {
        kv.insert("experiment.name", which.name());
    }
    if !kv.contains("experiment.method") {
        kv.insert("experiment.method", "aasc");
    }
    let base = ExperimentSpec::from_kv(&kv)?;
    let manifest = base
        .sources
        .clone()
        .ok_or_else(|| HarnessError::missing_key("experiment.sources"))?;
    let pool = SourcePool::load(&manifest).map_err(|e| HarnessError::in_file(&manifest, e))?;
    let specs = arms(which, &base, &pool, &kv)?;
    let mut jobs = Vec::new();
    for s in &specs {
        jobs.extend(experiment::plan(s, Some(&pool), out)?);
    }
    let policies = crate::sources::load_policies(&pool)?;
    experiment::execute(&jobs, &policies, Some(&pool), workers)?;

    let dirs: Vec<PathBuf> = specs.iter().map(|s| out.join("run").join(&s.name)).collect();
    let window = config::get_or(&kv, "report.window", 5)?;
    let table = ResultTable::from_dirs(&dirs, &base.checkpoints, window)?;
    let dir = out.join("ablate").join(which.name());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("table.csv"), table.to_csv())?;
    std::fs::write(dir.join("table.md"), table.to_markdown())?;
    Ok(table)
}
