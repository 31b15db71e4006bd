//! Report emission: JSON, aggregate CSV, tidy per-seed plot data, and
//! benchmark tables, all with stable field ordering.

use super::bench::BenchResult;
use super::{HarnessError, PipelineOutput};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(format!("unknown report format: {other}")),
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), HarnessError> {
    std::fs::write(path, content).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn render_json(outputs: &[PipelineOutput]) -> Result<String, HarnessError> {
    if outputs.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    serde_json::to_string_pretty(outputs).map_err(|e| HarnessError::Io {
        path: "<json>".into(),
        source: std::io::Error::other(e),
    })
}

/// Aggregate table: one row per model x precision x metric with mean and
/// sample standard deviation across seeds.
pub fn render_csv(outputs: &[PipelineOutput]) -> Result<String, HarnessError> {
    if outputs.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut out = String::from("model,precision,metric,mean,std\n");
    for output in outputs {
        for agg in &output.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                agg.preset, agg.precision, agg.metric, agg.mean, agg.std
            ));
        }
    }
    Ok(out)
}

/// Tidy per-seed rows (model, precision, metric, seed, value) for plotting.
pub fn render_plotdata(outputs: &[PipelineOutput]) -> Result<String, HarnessError> {
    if outputs.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut out = String::from("model,precision,metric,seed,value\n");
    for output in outputs {
        for run in &output.runs {
            for (k, v) in &run.report.recall_at {
                out.push_str(&format!(
                    "{},{},recall_at_{},{},{}\n",
                    run.preset, run.precision, k, run.seed, v
                ));
            }
            for (name, value) in [
                ("mrr", run.report.mrr),
                ("max_f1", run.report.max_f1),
                ("pr_auc", run.report.pr_auc),
            ] {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    run.preset, run.precision, name, run.seed, value
                ));
            }
        }
    }
    Ok(out)
}

pub fn render_bench_csv(results: &[BenchResult]) -> Result<String, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut out = String::from(
        "model,precision,batch,mean_ms,p50_ms,p95_ms,throughput_ips,param_count,memory_mib\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.precision,
            r.batch,
            r.mean_ms,
            r.p50_ms,
            r.p95_ms,
            r.throughput_ips,
            r.param_count,
            r.memory_mib
        ));
    }
    Ok(out)
}

/// Writes the requested formats under `dir` and returns the created paths.
pub fn emit_report(
    dir: &Path,
    outputs: &[PipelineOutput],
    bench: &[BenchResult],
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, HarnessError> {
    if outputs.is_empty() && bench.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for &format in formats {
        match format {
            ReportFormat::Json => {
                if !outputs.is_empty() {
                    let path = dir.join("report.json");
                    write_file(&path, &render_json(outputs)?)?;
                    written.push(path);
                }
            }
            ReportFormat::Csv => {
                if !outputs.is_empty() {
                    let path = dir.join("report.csv");
                    write_file(&path, &render_csv(outputs)?)?;
                    written.push(path);
                }
                if !bench.is_empty() {
                    let path = dir.join("bench.csv");
                    write_file(&path, &render_bench_csv(bench)?)?;
                    written.push(path);
                }
            }
            ReportFormat::Plotdata => {
                if !outputs.is_empty() {
                    let path = dir.join("plotdata.csv");
                    write_file(&path, &render_plotdata(outputs)?)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}
