//! Executes configured runs: baselines and merged runs over a range of seeds.

use rayon::prelude::*;
use serde::Serialize;

use tomesd::diffusion::{
    check_capacity, compare_to_baseline, denoise, max_ratio, sample_inputs, DenoiseOptions, Schedule,
};
use tomesd::metrics::{aggregate, timing, RunReport, Timing};
use tomesd::partition::PartitionVariant;
use tomesd::unet::{init_unet, PartitionRecord, TokenGrid, UNetModel};
use tomesd::ToMeConfig;

use crate::config::{ApplySet, Experiment, HarnessConfig};
use crate::error::BenchError;

#[derive(Clone, Debug, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: RunReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub speedup_estimate: f64,
    pub baseline_flops: u64,
    pub merged_flops: u64,
    pub merge_overhead: u64,
    pub baseline_peak_elements: u64,
    pub merged_peak_elements: u64,
    pub similarity_passes: usize,
    pub eligible_block_steps: usize,
    pub mean_relative_l2: Option<f64>,
    pub mean_max_abs: Option<f64>,
}

/// One resolved configuration run over all its seeds.
#[derive(Clone, Debug, Serialize)]
pub struct PointReport {
    pub config_digest: String,
    pub config: Experiment,
    pub max_ratio: f64,
    pub summary: Summary,
    pub seeds: Vec<SeedReport>,
}

/// Data kept out of reports: wall time and optional partition records.
#[derive(Clone, Debug, Default)]
pub struct Extras {
    pub timings: Vec<(u64, Timing)>,
    pub partitions: Vec<PartitionRecord>,
}

/// A model plus the per-seed inputs and baseline outputs shared by every
/// configuration in a sweep.
pub struct Harness {
    model: UNetModel,
    inputs: Vec<(u64, tomesd::diffusion::HarnessInputs)>,
    baselines: Option<Vec<TokenGrid>>,
}

impl Harness {
    pub fn new(cfg: &HarnessConfig) -> Result<Self, BenchError> {
        let spec = cfg.unet_spec();
        let model = init_unet(&spec)?;
        let inputs = cfg
            .seeds()
            .map(|s| Ok((s, sample_inputs(&spec, s)?)))
            .collect::<Result<Vec<_>, tomesd::Error>>()?;
        let baselines = if cfg.compare_baseline {
            let schedule = Schedule::constant(cfg.steps, 0.0)?;
            let opts = options(cfg, String::new(), false);
            Some(
                inputs
                    .par_iter()
                    .map(|(_, inp)| {
                        denoise(&model, &inp.noise, &inp.prompt, &schedule, &ToMeConfig::disabled(), &opts)
                            .map(|r| r.final_grid)
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            model,
            inputs,
            baselines,
        })
    }

    pub fn model(&self) -> &UNetModel {
        &self.model
    }

    /// Runs `cfg` on every seed. Masks and plans are recorded for the first
    /// seed when `record` is set.
    pub fn run(&self, cfg: &HarnessConfig, record: bool) -> Result<(PointReport, Extras), BenchError> {
        let digest = cfg.digest();
        let schedule = cfg.schedule()?;
        let spec = self.model.spec();
        let probe = cfg.tome(cfg.seed);
        check_capacity(spec, &schedule, &probe).map_err(|e| {
            BenchError::config(
                "ratio",
                format!("{e}; the largest ratio this configuration supports is {}", max_ratio(spec, &probe)),
            )
        })?;

        let outcomes = self
            .inputs
            .par_iter()
            .enumerate()
            .map(|(i, (seed, inp))| {
                let opts = options(cfg, digest.clone(), record && i == 0);
                let run = denoise(&self.model, &inp.noise, &inp.prompt, &schedule, &cfg.tome(*seed), &opts)?;
                let mut report = aggregate(&run.steps)?;
                if let Some(base) = &self.baselines {
                    report.error = Some(compare_to_baseline(&base[i], &run.final_grid)?);
                }
                Ok((
                    SeedReport { seed: *seed, report },
                    timing(&run.steps),
                    run.trace.partitions,
                ))
            })
            .collect::<Result<Vec<_>, tomesd::Error>>()?;

        let mut seeds = Vec::with_capacity(outcomes.len());
        let mut extras = Extras::default();
        for (report, t, parts) in outcomes {
            extras.timings.push((report.seed, t));
            extras.partitions.extend(parts);
            seeds.push(report);
        }
        Ok((
            PointReport {
                config_digest: digest,
                config: cfg.experiment(),
                max_ratio: max_ratio(spec, &probe),
                summary: summarize(&seeds),
                seeds,
            },
            extras,
        ))
    }
}

fn options(cfg: &HarnessConfig, run_id: String, record_masks: bool) -> DenoiseOptions {
    DenoiseOptions {
        guidance_scale: cfg.guidance_scale,
        step_size: cfg.step_size,
        run_id,
        record_masks,
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(seeds: &[SeedReport]) -> Summary {
    let r = &seeds[0].report;
    Summary {
        speedup_estimate: r.speedup_estimate,
        baseline_flops: r.flops.baseline_total,
        merged_flops: r.flops.merged_total,
        merge_overhead: r.flops.merge_overhead,
        baseline_peak_elements: r.memory.baseline_peak_elements,
        merged_peak_elements: r.memory.merged_peak_elements,
        similarity_passes: r.similarity_passes,
        eligible_block_steps: r.blocks.iter().map(|b| b.eligible_steps).sum(),
        mean_relative_l2: mean(seeds.iter().map(|s| s.report.error.as_ref().map(|e| e.relative_l2))),
        mean_max_abs: mean(seeds.iter().map(|s| s.report.error.as_ref().map(|e| e.max_abs))),
    }
}

/// The configuration of one sweep point: base settings with the axes
/// substituted and the sweep lists cleared.
pub fn point_config(base: &HarnessConfig, ratio: f64, partition: PartitionVariant, apply: ApplySet) -> HarnessConfig {
    HarnessConfig {
        ratio,
        partition,
        apply,
        sweep_ratios: Vec::new(),
        sweep_partitions: Vec::new(),
        sweep_apply: Vec::new(),
        ..base.clone()
    }
}

/// Sweep points in partition, component set, ratio order.
pub fn sweep_points(base: &HarnessConfig) -> Vec<HarnessConfig> {
    fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let ratios = or(&base.sweep_ratios, base.ratio);
    let partitions = or(&base.sweep_partitions, base.partition);
    let applies = or(&base.sweep_apply, base.apply);
    let mut points = Vec::new();
    for &p in &partitions {
        for &a in &applies {
            for &r in &ratios {
                points.push(point_config(base, r, p, a));
            }
        }
    }
    points
}

/// Runs every sweep point; points execute in parallel, results keep point order.
pub fn run_sweep(base: &HarnessConfig) -> Result<(Vec<PointReport>, Vec<Extras>), BenchError> {
    let points = sweep_points(base);
    for p in &points {
        p.validate()?;
    }
    let harness = Harness::new(base)?;
    let results = points
        .par_iter()
        .map(|p| harness.run(p, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(results.into_iter().unzip())
}
