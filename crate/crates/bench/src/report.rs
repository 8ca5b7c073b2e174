//! Report files. JSON and CSV reports depend only on the configuration;
//! wall time goes to a separate `timing.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tomesd::unet::{BlockSite, PartitionRecord};
use tomesd::viz::{render_mask, render_merge_map};

use crate::config::{Experiment, Format, HarnessConfig};
use crate::error::BenchError;
use crate::runner::{Extras, PointReport};

#[derive(Debug, Serialize)]
pub struct CsvRow<'a> {
    pub config_digest: &'a str,
    pub seed: u64,
    pub ratio: f64,
    pub ratio_start: Option<f64>,
    pub ratio_end: Option<f64>,
    pub partition: &'a str,
    pub batch_fix: bool,
    pub apply: &'a str,
    pub prune: bool,
    pub speedup_estimate: f64,
    pub baseline_flops: u64,
    pub merged_flops: u64,
    pub merge_overhead: u64,
    pub baseline_peak_elements: u64,
    pub merged_peak_elements: u64,
    pub similarity_passes: usize,
    pub merged_token_rows: usize,
    pub relative_l2: Option<f64>,
    pub max_abs: Option<f64>,
}

pub fn csv_rows(point: &PointReport) -> Vec<CsvRow<'_>> {
    let c = &point.config;
    point
        .seeds
        .iter()
        .map(|s| {
            let r = &s.report;
            CsvRow {
                config_digest: &point.config_digest,
                seed: s.seed,
                ratio: c.ratio,
                ratio_start: c.ratio_start,
                ratio_end: c.ratio_end,
                partition: &c.partition,
                batch_fix: c.batch_fix,
                apply: &c.apply,
                prune: c.prune,
                speedup_estimate: r.speedup_estimate,
                baseline_flops: r.flops.baseline_total,
                merged_flops: r.flops.merged_total,
                merge_overhead: r.flops.merge_overhead,
                baseline_peak_elements: r.memory.baseline_peak_elements,
                merged_peak_elements: r.memory.merged_peak_elements,
                similarity_passes: r.similarity_passes,
                merged_token_rows: r.token_ledger.observed_rows,
                relative_l2: r.error.as_ref().map(|e| e.relative_l2),
                max_abs: r.error.as_ref().map(|e| e.max_abs),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SweepReport<'a> {
    config_digest: String,
    config: Experiment,
    points: &'a [PointReport],
}

#[derive(Serialize)]
struct TimingEntry<'a> {
    config_digest: &'a str,
    seed: u64,
    total_seconds: f64,
    step_seconds: &'a [f64],
}

fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf, BenchError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| BenchError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    bytes
}

fn csv_bytes<'a>(rows: impl IntoIterator<Item = CsvRow<'a>>) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| BenchError::io("csv buffer", e.into_error()))
}

fn timing_bytes(points: &[(&PointReport, &Extras)]) -> Vec<u8> {
    let entries: Vec<TimingEntry> = points
        .iter()
        .flat_map(|(p, x)| {
            x.timings.iter().map(|(seed, t)| TimingEntry {
                config_digest: &p.config_digest,
                seed: *seed,
                total_seconds: t.total_seconds,
                step_seconds: &t.step_seconds,
            })
        })
        .collect();
    json(&entries)
}

/// Writes the report, timing sidecar and resolved config of a single run.
pub fn write_run(cfg: &HarnessConfig, point: &PointReport, extras: &Extras) -> Result<Vec<PathBuf>, BenchError> {
    let out = Path::new(&cfg.out);
    let mut written = vec![match cfg.format {
        Format::Json => write(&out.join("report.json"), &json(point))?,
        Format::Csv => write(&out.join("report.csv"), &csv_bytes(csv_rows(point))?)?,
    }];
    written.push(write(&out.join("timing.json"), &timing_bytes(&[(point, extras)]))?);
    written.push(write(&out.join("resolved.conf"), cfg.to_flat().as_bytes())?);
    Ok(written)
}

pub fn write_sweep(
    cfg: &HarnessConfig,
    points: &[PointReport],
    extras: &[Extras],
) -> Result<Vec<PathBuf>, BenchError> {
    let out = Path::new(&cfg.out);
    let mut written = vec![match cfg.format {
        Format::Json => write(
            &out.join("sweep.json"),
            &json(&SweepReport {
                config_digest: cfg.digest(),
                config: cfg.experiment(),
                points,
            }),
        )?,
        Format::Csv => write(&out.join("sweep.csv"), &csv_bytes(points.iter().flat_map(csv_rows))?)?,
    }];
    let pairs: Vec<_> = points.iter().zip(extras).collect();
    written.push(write(&out.join("timing.json"), &timing_bytes(&pairs))?);
    written.push(write(&out.join("resolved.conf"), cfg.to_flat().as_bytes())?);
    Ok(written)
}

/// For each record: the first batch element's `dst` mask, merge map and edge list.
pub fn write_partition_views(
    dir: &Path,
    sites: &[BlockSite],
    records: &[PartitionRecord],
) -> Result<Vec<PathBuf>, BenchError> {
    let mut written = Vec::new();
    for rec in records {
        let site = &sites[rec.layer];
        let stem = format!("step{:03}_layer{:02}", rec.step, rec.layer);
        let mask = render_mask(&rec.masks[0], site.height, site.width)?;
        written.push(write(&dir.join(format!("{stem}_mask.ppm")), &mask.to_ppm())?);
        let map = render_merge_map(&rec.plans[0], site.height, site.width)?;
        written.push(write(&dir.join(format!("{stem}_merge.ppm")), &map.to_ppm())?);
        written.push(write(&dir.join(format!("{stem}_edges.txt")), rec.plans[0].to_edge_list().as_bytes())?);
    }
    Ok(written)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf, BenchError> {
    write(path, bytes)
}
