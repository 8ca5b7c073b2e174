//! Guided denoising loop over the toy U-Net.
//!
//! Every step evaluates a two-element batch (conditional with the prompt,
//! unconditional with a zero prompt), combines the predictions as
//! `uncond + scale * (cond - uncond)` and takes a linearly decaying step
//! `x <- x - alpha_t * prediction`. The sampler is deliberately simple: it
//! only has to drive the merging machinery deterministically.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ToMeConfig;
use crate::error::{Error, Result};
use crate::matching::{tokens_to_remove, RatioPolicy};
use crate::metrics::{BlockStepRecord, StepRecord};
use crate::rng::{Purpose, Rng};
use crate::tensor::Matrix;
use crate::unet::{flop_count, ForwardTrace, TokenGrid, UNetModel, UNetSpec};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f32 = 7.5;
pub const DEFAULT_STEP_SIZE: f32 = 0.05;
/// Prompt embeddings are small next to the latent, so the two guidance
/// branches stay close and differ mainly through cross-attention.
const PROMPT_SCALE: f32 = 0.1;

/// Linear merge-ratio schedule over the diffusion steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub ratio_start: f64,
    pub ratio_end: f64,
}

impl Schedule {
    pub fn new(steps: usize, ratio_start: f64, ratio_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        RatioPolicy::new(ratio_start)?;
        RatioPolicy::new(ratio_end)?;
        Ok(Self {
            steps,
            ratio_start,
            ratio_end,
        })
    }

    pub fn constant(steps: usize, ratio: f64) -> Result<Self> {
        Self::new(steps, ratio, ratio)
    }

    pub fn from_config(steps: usize, tome: &ToMeConfig) -> Result<Self> {
        Self::new(steps, tome.start_ratio(), tome.end_ratio())
    }

    pub fn ratio_at(&self, step: usize) -> Result<f64> {
        ratio_at(self, step)
    }
}

/// Ratio at `step`. Written as a convex combination so the first and last
/// steps return the endpoints exactly.
pub fn ratio_at(schedule: &Schedule, step: usize) -> Result<f64> {
    if step >= schedule.steps {
        return Err(Error::Range {
            step,
            steps: schedule.steps,
        });
    }
    if schedule.steps == 1 {
        return Ok(schedule.ratio_start);
    }
    let t = step as f64 / (schedule.steps - 1) as f64;
    Ok(schedule.ratio_start * (1.0 - t) + schedule.ratio_end * t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseOptions {
    pub guidance_scale: f32,
    pub step_size: f32,
    /// Tag stamped on every step record, typically the config digest.
    pub run_id: String,
    /// Keep every partition mask in the trace.
    pub record_masks: bool,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            step_size: DEFAULT_STEP_SIZE,
            run_id: String::new(),
            record_masks: false,
        }
    }
}

/// Initial noise and prompt embedding for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessInputs {
    pub noise: TokenGrid,
    pub prompt: Matrix,
}

pub fn sample_inputs(spec: &UNetSpec, seed: u64) -> Result<HarnessInputs> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let top = spec.scales[0];
    let n = top.height * top.width;
    let mut s = rng.stream(Purpose::Noise, 0, 0);
    let noise = Matrix::from_vec(n, spec.channels, (0..n * spec.channels).map(|_| s.normal() as f32).collect())?;
    let mut s = rng.stream(Purpose::Prompt, 0, 0);
    let p = spec.prompt_tokens * spec.channels;
    let prompt = Matrix::from_vec(spec.prompt_tokens, spec.channels, (0..p).map(|_| PROMPT_SCALE * s.normal() as f32).collect())?;
    let shape = crate::partition::GridShape::new(1, top.height, top.width)?;
    Ok(HarnessInputs {
        noise: TokenGrid::new(shape, spec.channels, vec![noise])?,
        prompt,
    })
}

/// Fails with a ratio error if any eligible block at any step would need to
/// remove more tokens than its `src` set holds.
pub fn check_capacity(spec: &UNetSpec, schedule: &Schedule, tome: &ToMeConfig) -> Result<()> {
    for step in 0..schedule.steps {
        let ratio = schedule.ratio_at(step)?;
        for site in spec.block_sites() {
            let tokens = site.tokens();
            if !tome.is_eligible(tokens, ratio) {
                continue;
            }
            let requested = tokens_to_remove(ratio, tokens);
            let available = tome.partition.variant.src_count(site.height, site.width);
            if requested > available {
                return Err(Error::Ratio {
                    ratio,
                    tokens,
                    requested,
                    available,
                });
            }
        }
    }
    Ok(())
}

/// Largest ratio every eligible block can honour: `min src / N`.
pub fn max_ratio(spec: &UNetSpec, tome: &ToMeConfig) -> f64 {
    spec.block_sites()
        .iter()
        .filter(|s| s.tokens() >= tome.min_tokens)
        .map(|s| tome.partition.variant.src_count(s.height, s.width) as f64 / s.tokens() as f64)
        .fold(1.0, f64::min)
}

#[derive(Clone, Debug)]
pub struct DenoiseRun {
    pub final_grid: TokenGrid,
    pub trace: ForwardTrace,
    pub steps: Vec<StepRecord>,
}

pub fn denoise(
    model: &UNetModel,
    init_noise: &TokenGrid,
    prompt: &Matrix,
    schedule: &Schedule,
    tome: &ToMeConfig,
    opts: &DenoiseOptions,
) -> Result<DenoiseRun> {
    tome.validate()?;
    if init_noise.shape() != model.top_shape(1) || init_noise.channels() != model.spec().channels {
        return Err(Error::Shape(format!(
            "initial noise {}x{}x{} (batch {}) does not match the model's top scale",
            init_noise.shape().height,
            init_noise.shape().width,
            init_noise.channels(),
            init_noise.shape().batch
        )));
    }
    let spec = model.spec();
    check_capacity(spec, schedule, tome)?;
    let prompts = [prompt.clone(), Matrix::zeros(spec.prompt_tokens, spec.channels)];
    let mut trace = ForwardTrace {
        record_masks: opts.record_masks,
        ..ForwardTrace::default()
    };
    let mut records = Vec::with_capacity(schedule.steps);
    let mut x = init_noise.element(0).clone();
    let shape = init_noise.shape();

    for step in 0..schedule.steps {
        let started = Instant::now();
        let ratio = schedule.ratio_at(step)?;
        let single = TokenGrid::new(shape, spec.channels, vec![x.clone()])?;
        let pair = TokenGrid::stack(&[&single, &single])?;
        let evals_before = trace.block_evals.len();
        let passes_before = trace.similarity_passes.len();
        let pred = model.forward(&pair, &prompts, tome, ratio, step, &mut trace)?;

        let (cond, uncond) = (pred.element(0), pred.element(1));
        let guided = uncond.add(&cond.sub(uncond)?.scale(opts.guidance_scale))?;
        let alpha = opts.step_size * (schedule.steps - step) as f32 / schedule.steps as f32;
        x = x.sub(&guided.scale(alpha))?;

        let flops = flop_count(spec, tome, ratio);
        let blocks = trace.block_evals[evals_before..]
            .iter()
            .zip(model.sites())
            .zip(flops)
            .map(|((eval, site), flops)| BlockStepRecord {
                layer: site.layer,
                height: site.height,
                width: site.width,
                reduced_tokens: eval.reduced_tokens.clone(),
                counted_flops: eval.flops,
                flops,
            })
            .collect();
        records.push(StepRecord {
            run: opts.run_id.clone(),
            step,
            ratio,
            batch: 2,
            similarity_passes: trace.similarity_passes.len() - passes_before,
            blocks,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(DenoiseRun {
        final_grid: TokenGrid::new(shape, spec.channels, vec![x])?,
        trace,
        steps: records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `||b - a|| / ||a||`, or `||b - a||` when `a` is all zeros.
    pub relative_l2: f64,
    pub max_abs: f64,
    /// Mean of `b - a` per channel.
    pub channel_mean_shift: Vec<f64>,
}

/// Deviation of `b` from the baseline `a`.
pub fn compare_to_baseline(a: &TokenGrid, b: &TokenGrid) -> Result<ErrorMetrics> {
    if a.shape() != b.shape() || a.channels() != b.channels() {
        return Err(Error::Shape("compared grids differ in shape".into()));
    }
    let c = a.channels();
    let mut diff_sq = 0.0f64;
    let mut base_sq = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut shift = vec![0.0f64; c];
    let mut rows = 0usize;
    for (ma, mb) in a.values().iter().zip(b.values()) {
        for (ra, rb) in ma.iter_rows().zip(mb.iter_rows()) {
            rows += 1;
            for (ch, (&va, &vb)) in ra.iter().zip(rb).enumerate() {
                let d = f64::from(vb) - f64::from(va);
                diff_sq += d * d;
                base_sq += f64::from(va) * f64::from(va);
                max_abs = max_abs.max(d.abs());
                shift[ch] += d;
            }
        }
    }
    for s in &mut shift {
        *s /= rows as f64;
    }
    let relative_l2 = if base_sq > 0.0 {
        (diff_sq / base_sq).sqrt()
    } else {
        diff_sq.sqrt()
    };
    Ok(ErrorMetrics {
        relative_l2,
        max_abs,
        channel_mean_shift: shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::GridShape;
    use crate::unet::init_unet;

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(50, 0.7, 0.3).unwrap();
        assert_eq!(s.ratio_at(0).unwrap(), 0.7);
        assert_eq!(s.ratio_at(49).unwrap(), 0.3);
        let s = Schedule::constant(50, 0.5).unwrap();
        assert!((0..50).all(|t| s.ratio_at(t).unwrap() == 0.5));
        let s = Schedule::new(3, 0.6, 0.4).unwrap();
        assert!((s.ratio_at(1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            s.ratio_at(3),
            Err(Error::Range { step: 3, steps: 3 })
        );
        assert_eq!(Schedule::new(1, 0.2, 0.6).unwrap().ratio_at(0).unwrap(), 0.2);
        assert!(Schedule::new(0, 0.2, 0.2).is_err());
        assert!(Schedule::new(5, 1.0, 0.2).is_err());
    }

    #[test]
    fn schedule_is_monotone_between_endpoints() {
        let s = Schedule::new(20, 0.3, 0.7).unwrap();
        let r: Vec<f64> = (0..20).map(|t| s.ratio_at(t).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    fn grid(values: Vec<f32>) -> TokenGrid {
        let n = values.len() / 2;
        TokenGrid::new(
            GridShape::new(1, 1, n).unwrap(),
            2,
            vec![Matrix::from_vec(n, 2, values).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn compare_examples() {
        let a = grid(vec![1.0, 2.0, 3.0, 4.0]);
        let m = compare_to_baseline(&a, &a).unwrap();
        assert_eq!(m.relative_l2, 0.0);
        assert_eq!(m.max_abs, 0.0);
        assert_eq!(m.channel_mean_shift, vec![0.0, 0.0]);

        let b = grid(vec![2.0, 3.0, 4.0, 5.0]);
        let m = compare_to_baseline(&a, &b).unwrap();
        let rms = ((1.0 + 4.0 + 9.0 + 16.0) / 4.0f64).sqrt();
        assert!((m.relative_l2 - 1.0 / rms).abs() < 1e-12);
        assert_eq!(m.channel_mean_shift, vec![1.0, 1.0]);
        assert_eq!(m.max_abs, 1.0);

        assert!(compare_to_baseline(&a, &grid(vec![0.0; 6])).is_err());
    }

    #[test]
    fn small_run_is_deterministic_and_identity_at_zero_ratio() {
        let spec = UNetSpec::pyramid(8, 8, 2, 2, 16, 4);
        let model = init_unet(&spec).unwrap();
        let inputs = sample_inputs(&spec, 3).unwrap();
        let sched = Schedule::constant(3, 0.0).unwrap();
        let opts = DenoiseOptions::default();
        let plain = denoise(&model, &inputs.noise, &inputs.prompt, &sched, &ToMeConfig::disabled(), &opts).unwrap();
        let zero = ToMeConfig {
            ratio: 0.0,
            apply_cross: true,
            apply_mlp: true,
            ..ToMeConfig::default()
        };
        let again = denoise(&model, &inputs.noise, &inputs.prompt, &sched, &zero, &opts).unwrap();
        assert_eq!(plain.final_grid, again.final_grid);
        assert_eq!(plain.steps.len(), 3);

        let half = Schedule::constant(3, 0.5).unwrap();
        let a = denoise(&model, &inputs.noise, &inputs.prompt, &half, &ToMeConfig::default(), &opts).unwrap();
        let b = denoise(&model, &inputs.noise, &inputs.prompt, &half, &ToMeConfig::default(), &opts).unwrap();
        assert_eq!(a.final_grid, b.final_grid);
        let err = compare_to_baseline(&plain.final_grid, &a.final_grid).unwrap();
        assert!(err.relative_l2 > 0.0);
    }

    #[test]
    fn capacity_is_checked_up_front() {
        let spec = UNetSpec::pyramid(8, 8, 2, 1, 16, 4);
        let tome = ToMeConfig::default();
        assert_eq!(max_ratio(&spec, &tome), 0.75);
        assert!(check_capacity(&spec, &Schedule::constant(2, 0.75).unwrap(), &tome).is_ok());
        let err = check_capacity(&spec, &Schedule::new(2, 0.5, 0.8).unwrap(), &tome).unwrap_err();
        assert_eq!(
            err,
            Error::Ratio {
                ratio: 0.8,
                tokens: 64,
                requested: 51,
                available: 48
            }
        );
    }

    #[test]
    fn wrong_noise_shape_is_rejected() {
        let spec = UNetSpec::pyramid(8, 8, 2, 1, 16, 4);
        let model = init_unet(&spec).unwrap();
        let other = sample_inputs(&UNetSpec::pyramid(16, 16, 2, 1, 16, 4), 0).unwrap();
        let sched = Schedule::constant(1, 0.5).unwrap();
        assert!(matches!(
            denoise(&model, &other.noise, &other.prompt, &sched, &ToMeConfig::default(), &DenoiseOptions::default()),
            Err(Error::Shape(_))
        ));
    }
}
