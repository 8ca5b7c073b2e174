//! Harness configuration: a flat, commented `key = value` file plus flag
//! overrides. Both go through [`HarnessConfig::set`], so a flag and a file
//! line with the same setting resolve identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use tomesd::diffusion::{Schedule, DEFAULT_GUIDANCE_SCALE, DEFAULT_STEPS, DEFAULT_STEP_SIZE};
use tomesd::partition::{PartitionScheme, PartitionVariant};
use tomesd::unet::UNetSpec;
use tomesd::ToMeConfig;

use crate::error::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Which components merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ApplySet {
    pub self_attn: bool,
    pub cross_attn: bool,
    pub mlp: bool,
}

impl ApplySet {
    pub const SELF_ONLY: ApplySet = ApplySet {
        self_attn: true,
        cross_attn: false,
        mlp: false,
    };
}

impl FromStr for ApplySet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut set = ApplySet {
            self_attn: false,
            cross_attn: false,
            mlp: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "self" => set.self_attn = true,
                "cross" => set.cross_attn = true,
                "mlp" => set.mlp = true,
                other => return Err(format!("unknown component {other:?}, expected self, cross or mlp")),
            }
        }
        if !(set.self_attn || set.cross_attn || set.mlp) {
            return Err("at least one of self, cross, mlp is required".into());
        }
        Ok(set)
    }
}

impl std::fmt::Display for ApplySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [
            (self.self_attn, "self"),
            (self.cross_attn, "cross"),
            (self.mlp, "mlp"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Everything that determines a run's results. Serialized into reports and
/// hashed into the config digest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Experiment {
    pub latent_height: usize,
    pub latent_width: usize,
    pub depth: usize,
    pub blocks_per_scale: usize,
    pub channels: usize,
    pub heads: usize,
    pub prompt_tokens: usize,
    pub weight_seed: u64,
    pub steps: usize,
    pub guidance_scale: f32,
    pub step_size: f32,
    pub seed: u64,
    pub seed_count: usize,
    pub ratio: f64,
    pub ratio_start: Option<f64>,
    pub ratio_end: Option<f64>,
    pub partition: String,
    pub batch_fix: bool,
    pub apply: String,
    pub min_tokens: usize,
    pub prune: bool,
    pub share_edges: bool,
    pub compare_baseline: bool,
    pub sweep_ratios: Vec<f64>,
    pub sweep_partitions: Vec<String>,
    pub sweep_apply: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub latent: (usize, usize),
    pub depth: usize,
    pub blocks_per_scale: usize,
    pub channels: usize,
    pub heads: usize,
    pub prompt_tokens: usize,
    pub weight_seed: u64,
    pub steps: usize,
    pub guidance_scale: f32,
    pub step_size: f32,
    pub seed: u64,
    pub seed_count: usize,
    pub ratio: f64,
    pub ratio_start: Option<f64>,
    pub ratio_end: Option<f64>,
    pub partition: PartitionVariant,
    pub batch_fix: bool,
    pub apply: ApplySet,
    /// `None` means the top-scale token count.
    pub min_tokens: Option<usize>,
    pub prune: bool,
    pub share_edges: bool,
    pub compare_baseline: bool,
    pub sweep_ratios: Vec<f64>,
    pub sweep_partitions: Vec<PartitionVariant>,
    pub sweep_apply: Vec<ApplySet>,
    pub out: String,
    pub format: Format,
    pub viz_partition: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            latent: (32, 32),
            depth: 3,
            blocks_per_scale: 2,
            channels: 64,
            heads: 4,
            prompt_tokens: 8,
            weight_seed: 0,
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            step_size: DEFAULT_STEP_SIZE,
            seed: 0,
            seed_count: 1,
            ratio: 0.5,
            ratio_start: None,
            ratio_end: None,
            partition: PartitionScheme::default().variant,
            batch_fix: true,
            apply: ApplySet::SELF_ONLY,
            min_tokens: None,
            prune: false,
            share_edges: false,
            compare_baseline: true,
            sweep_ratios: Vec::new(),
            sweep_partitions: Vec::new(),
            sweep_apply: Vec::new(),
            out: "out".into(),
            format: Format::Json,
            viz_partition: false,
        }
    }
}

/// Keys accepted in config files, in the order [`HarnessConfig::to_flat`] writes them.
pub const KEYS: &[&str] = &[
    "latent",
    "depth",
    "blocks_per_scale",
    "channels",
    "heads",
    "prompt_tokens",
    "weight_seed",
    "steps",
    "guidance_scale",
    "step_size",
    "seed",
    "seed_count",
    "ratio",
    "ratio_start",
    "ratio_end",
    "partition",
    "batch_fix",
    "apply",
    "min_tokens",
    "prune",
    "share_edges",
    "compare_baseline",
    "sweep_ratios",
    "sweep_partitions",
    "sweep_apply",
    "out",
    "format",
    "viz_partition",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| BenchError::config(key, format!("{value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, BenchError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(BenchError::config(key, format!("{value:?} is not a boolean"))),
    }
}

fn parse_optional_ratio(key: &str, value: &str) -> Result<Option<f64>, BenchError> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// `HxW`.
pub fn parse_dims(key: &str, value: &str) -> Result<(usize, usize), BenchError> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| BenchError::config(key, format!("{value:?} is not of the form HxW")))?;
    Ok((parse(key, h)?, parse(key, w)?))
}

/// `start:stop:step` (inclusive, rounded to 1e-9) or a comma list.
pub fn parse_ratio_axis(key: &str, value: &str) -> Result<Vec<f64>, BenchError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step): (f64, f64, f64) =
                (parse(key, start)?, parse(key, stop)?, parse(key, step)?);
            if !(step > 0.0) || stop < start {
                return Err(BenchError::config(key, format!("{value:?} is not an increasing range")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [_] => value.split(',').map(|v| parse(key, v.trim())).collect(),
        _ => Err(BenchError::config(key, format!("{value:?} is neither a list nor start:stop:step"))),
    }
}

impl HarnessConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), BenchError> {
        let value = value.trim();
        match key {
            "latent" => self.latent = parse_dims(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "blocks_per_scale" => self.blocks_per_scale = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "prompt_tokens" => self.prompt_tokens = parse(key, value)?,
            "weight_seed" => self.weight_seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "guidance_scale" => self.guidance_scale = parse(key, value)?,
            "step_size" => self.step_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "seed_count" => self.seed_count = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "ratio_start" => self.ratio_start = parse_optional_ratio(key, value)?,
            "ratio_end" => self.ratio_end = parse_optional_ratio(key, value)?,
            "partition" => self.partition = parse(key, value)?,
            "batch_fix" => self.batch_fix = parse_bool(key, value)?,
            "apply" => self.apply = parse(key, value)?,
            "min_tokens" => {
                self.min_tokens = if value == "top" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "prune" => self.prune = parse_bool(key, value)?,
            "share_edges" => self.share_edges = parse_bool(key, value)?,
            "compare_baseline" => self.compare_baseline = parse_bool(key, value)?,
            "sweep_ratios" => self.sweep_ratios = parse_ratio_axis(key, value)?,
            "sweep_partitions" => {
                self.sweep_partitions = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse(key, v))
                    .collect::<Result<_, _>>()?
            }
            "sweep_apply" => {
                self.sweep_apply = value
                    .split('|')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse(key, v))
                    .collect::<Result<_, _>>()?
            }
            "out" => self.out = value.to_string(),
            "format" => {
                self.format = match value {
                    "json" => Format::Json,
                    "csv" => Format::Csv,
                    _ => return Err(BenchError::config(key, format!("{value:?} is not json or csv"))),
                }
            }
            "viz_partition" => self.viz_partition = parse_bool(key, value)?,
            _ => return Err(BenchError::config(key, "unknown key".to_string())),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>, BenchError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BenchError::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1))
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(BenchError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(BenchError::Config(format!("line {}: {key} is set twice", n + 1)));
            }
        }
        Ok(entries)
    }

    /// Defaults, then `file` entries, then `overrides`.
    pub fn resolve(
        file: &BTreeMap<String, String>,
        overrides: &[(&str, String)],
    ) -> Result<HarnessConfig, BenchError> {
        let mut cfg = HarnessConfig::default();
        for (k, v) in file {
            cfg.set(k, v)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_flat(text: &str) -> Result<HarnessConfig, BenchError> {
        Self::resolve(&Self::parse_flat(text)?, &[])
    }

    /// Serializes every key so that [`HarnessConfig::from_flat`] reproduces `self`.
    pub fn to_flat(&self) -> String {
        let opt = |r: Option<f64>| r.map_or_else(|| "none".to_string(), |r| r.to_string());
        let join = |items: Vec<String>, sep: &str| items.join(sep);
        let values = [
            format!("{}x{}", self.latent.0, self.latent.1),
            self.depth.to_string(),
            self.blocks_per_scale.to_string(),
            self.channels.to_string(),
            self.heads.to_string(),
            self.prompt_tokens.to_string(),
            self.weight_seed.to_string(),
            self.steps.to_string(),
            self.guidance_scale.to_string(),
            self.step_size.to_string(),
            self.seed.to_string(),
            self.seed_count.to_string(),
            self.ratio.to_string(),
            opt(self.ratio_start),
            opt(self.ratio_end),
            self.partition.to_string(),
            self.batch_fix.to_string(),
            self.apply.to_string(),
            self.min_tokens.map_or_else(|| "top".to_string(), |m| m.to_string()),
            self.prune.to_string(),
            self.share_edges.to_string(),
            self.compare_baseline.to_string(),
            join(self.sweep_ratios.iter().map(f64::to_string).collect(), ","),
            join(self.sweep_partitions.iter().map(ToString::to_string).collect(), ","),
            join(self.sweep_apply.iter().map(ToString::to_string).collect(), "|"),
            self.out.clone(),
            match self.format {
                Format::Json => "json".to_string(),
                Format::Csv => "csv".to_string(),
            },
            self.viz_partition.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn unet_spec(&self) -> UNetSpec {
        let (h, w) = self.latent;
        UNetSpec {
            weight_seed: self.weight_seed,
            prompt_tokens: self.prompt_tokens,
            ..UNetSpec::pyramid(h, w, self.depth, self.blocks_per_scale, self.channels, self.heads)
        }
    }

    pub fn resolved_min_tokens(&self) -> usize {
        self.min_tokens.unwrap_or(self.latent.0 * self.latent.1)
    }

    pub fn tome(&self, seed: u64) -> ToMeConfig {
        self.tome_with(self.ratio, self.partition, self.apply, seed)
    }

    pub fn tome_with(&self, ratio: f64, partition: PartitionVariant, apply: ApplySet, seed: u64) -> ToMeConfig {
        ToMeConfig {
            ratio,
            ratio_start: self.ratio_start,
            ratio_end: self.ratio_end,
            partition: PartitionScheme::new(partition).with_batch_fix(self.batch_fix),
            apply_self: apply.self_attn,
            apply_cross: apply.cross_attn,
            apply_mlp: apply.mlp,
            min_tokens: self.resolved_min_tokens(),
            seed,
            prune: self.prune,
            share_edges: self.share_edges,
        }
    }

    pub fn schedule(&self) -> Result<Schedule, BenchError> {
        let tome = self.tome(self.seed);
        Schedule::from_config(self.steps, &tome).map_err(|e| BenchError::config("ratio", e.to_string()))
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.seed_count as u64).map(move |i| self.seed.wrapping_add(i))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let spec = self.unet_spec();
        spec.validate()
            .map_err(|e| BenchError::config("latent", e.to_string()))?;
        if self.seed_count == 0 {
            return Err(BenchError::config("seed_count", "must be at least 1".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(BenchError::config("guidance_scale", "must be finite".into()));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(BenchError::config("step_size", "must be finite and non-negative".into()));
        }
        if self.min_tokens == Some(0) {
            return Err(BenchError::config("min_tokens", "must be at least 1".into()));
        }
        for (key, r) in [
            ("ratio", Some(self.ratio)),
            ("ratio_start", self.ratio_start),
            ("ratio_end", self.ratio_end),
        ] {
            if let Some(r) = r {
                tomesd::matching::RatioPolicy::new(r).map_err(|e| BenchError::config(key, e.to_string()))?;
            }
        }
        for &r in &self.sweep_ratios {
            tomesd::matching::RatioPolicy::new(r).map_err(|e| BenchError::config("sweep_ratios", e.to_string()))?;
        }
        self.schedule()?;
        Ok(())
    }

    /// The part of the config that determines results.
    pub fn experiment(&self) -> Experiment {
        Experiment {
            latent_height: self.latent.0,
            latent_width: self.latent.1,
            depth: self.depth,
            blocks_per_scale: self.blocks_per_scale,
            channels: self.channels,
            heads: self.heads,
            prompt_tokens: self.prompt_tokens,
            weight_seed: self.weight_seed,
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            step_size: self.step_size,
            seed: self.seed,
            seed_count: self.seed_count,
            ratio: self.ratio,
            ratio_start: self.ratio_start,
            ratio_end: self.ratio_end,
            partition: self.partition.to_string(),
            batch_fix: self.batch_fix,
            apply: self.apply.to_string(),
            min_tokens: self.resolved_min_tokens(),
            prune: self.prune,
            share_edges: self.share_edges,
            compare_baseline: self.compare_baseline,
            sweep_ratios: self.sweep_ratios.clone(),
            sweep_partitions: self.sweep_partitions.iter().map(ToString::to_string).collect(),
            sweep_apply: self.sweep_apply.iter().map(ToString::to_string).collect(),
        }
    }

    /// Hex SHA-256 of the experiment's JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&self.experiment()).expect("experiment serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
